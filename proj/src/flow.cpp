#include "preshape/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "preshape/errors.hpp"

namespace preshape {

namespace {

constexpr float kFloTag = 202021.25f;

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  if (v.size() % 2 == 1) return v[mid];
  const double hi = v[mid];
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

}  // namespace

FlowField read_flo(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open flow file " + path.string());
  float tag = 0;
  std::int32_t w = 0, h = 0;
  in.read(reinterpret_cast<char*>(&tag), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  if (!in) throw LoadError("flow file " + path.string() + ": truncated header");
  if (tag != kFloTag) throw LoadError("flow file " + path.string() + ": wrong tag");
  if (w < 1 || w > 99999 || h < 1 || h > 99999) throw LoadError("flow file " + path.string() + ": illegal size");
  FlowField flow(w, h);
  in.read(reinterpret_cast<char*>(flow.data.data()), static_cast<std::streamsize>(flow.data.size() * sizeof(float)));
  if (!in) throw LoadError("flow file " + path.string() + ": file is too short");
  if (in.peek() != std::char_traits<char>::eof()) throw LoadError("flow file " + path.string() + ": file is too long");
  for (float f : flow.data)
    if (!std::isfinite(f)) throw LoadError("flow file " + path.string() + ": non-finite motion");
  return flow;
}

void write_flo(const FlowField& flow, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write flow file " + path.string());
  const std::int32_t w = flow.width, h = flow.height;
  out.write(reinterpret_cast<const char*>(&kFloTag), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(flow.data.data()), static_cast<std::streamsize>(flow.data.size() * sizeof(float)));
}

Vec2 sample_flow(const FlowField& flow, const Vec2& p, const FlowSamplingOptions& options) {
  if (!(p.x() >= 0.0 && p.y() >= 0.0 && p.x() <= flow.width - 1 && p.y() <= flow.height - 1))
    throw SamplingError("flow sample point (" + std::to_string(p.x()) + ", " + std::to_string(p.y()) +
                        ") is outside the image");
  const int x0 = std::max(0, static_cast<int>(std::ceil(p.x() - options.radius)));
  const int x1 = std::min(flow.width - 1, static_cast<int>(std::floor(p.x() + options.radius)));
  const int y0 = std::max(0, static_cast<int>(std::ceil(p.y() - options.radius)));
  const int y1 = std::min(flow.height - 1, static_cast<int>(std::floor(p.y() + options.radius)));
  const double inv = 1.0 / (2.0 * options.sigma * options.sigma);
  Vec2 sum = Vec2::Zero();
  double weight = 0.0;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double w = std::exp(-((x - p.x()) * (x - p.x()) + (y - p.y()) * (y - p.y())) * inv);
      sum += w * flow.at(x, y);
      weight += w;
    }
  return sum / weight;
}

std::vector<FlowSample> filter_flow_outliers(const std::vector<FlowSample>& samples, const FlowFilterOptions& options) {
  const int n = static_cast<int>(samples.size());
  if (n < 3) return samples;
  const int half = options.window / 2;

  std::vector<double> deviation(static_cast<std::size_t>(n));
  std::vector<double> us, vs;
  for (int i = 0; i < n; ++i) {
    // Symmetric window; on open input it shrinks at the ends so ramps are
    // reproduced exactly.
    const int r = options.closed ? std::min(half, (n - 1) / 2) : std::min({half, i, n - 1 - i});
    us.clear();
    vs.clear();
    for (int j = i - r; j <= i + r; ++j) {
      const auto& m = samples[static_cast<std::size_t>(((j % n) + n) % n)].motion;
      us.push_back(m.x());
      vs.push_back(m.y());
    }
    const Vec2 filtered(median(us), median(vs));
    deviation[i] = (samples[i].motion - filtered).norm();
  }
  const double mad = std::max(median(deviation), options.mad_floor);

  std::vector<FlowSample> kept;
  kept.reserve(samples.size());
  for (int i = 0; i < n; ++i)
    if (deviation[i] <= options.mad_factor * mad) kept.push_back(samples[i]);
  return kept;
}

}  // namespace preshape
