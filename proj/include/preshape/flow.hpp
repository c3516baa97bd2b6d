#pragma once

#include <filesystem>
#include <vector>

#include "preshape/face_model.hpp"

namespace preshape {

// Dense 2D motion field, row-major interleaved (u, v) like the .flo layout.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  FlowField() = default;
  FlowField(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 2, 0.0f) {}

  Vec2 at(int x, int y) const {
    const std::size_t k = 2 * (static_cast<std::size_t>(y) * width + x);
    return {data[k], data[k + 1]};
  }
  void set(int x, int y, const Vec2& m) {
    const std::size_t k = 2 * (static_cast<std::size_t>(y) * width + x);
    data[k] = static_cast<float>(m.x());
    data[k + 1] = static_cast<float>(m.y());
  }
};

// Middlebury .flo: float tag 202021.25, i32 width, i32 height, float32 (u, v)
// pairs in row order, all little-endian.
FlowField read_flo(const std::filesystem::path& path);
void write_flo(const FlowField& flow, const std::filesystem::path& path);

struct FlowSamplingOptions {
  double sigma = 1.5;
  int radius = 3;
};

// Gaussian-weighted average of the integer taps within `radius` of p on each
// axis; taps outside the image are dropped and the weights renormalized.
// Throws SamplingError if p is outside the image.
Vec2 sample_flow(const FlowField& flow, const Vec2& p, const FlowSamplingOptions& options = {});

struct FlowSample {
  int vertex = -1;
  Vec2 motion = Vec2::Zero();
};

struct FlowFilterOptions {
  int window = 9;
  double mad_factor = 2.0;
  // Lower bound on the MAD so that noise-free smooth inputs keep every sample.
  double mad_floor = 0.1;
  // Samples form a loop: windows wrap around instead of shrinking at the ends.
  bool closed = false;
};

// Sliding-median low-pass along contour order; drops samples whose distance to
// the filtered motion exceeds mad_factor * MAD. Inputs with fewer than 3
// samples are returned unchanged.
std::vector<FlowSample> filter_flow_outliers(const std::vector<FlowSample>& samples,
                                             const FlowFilterOptions& options = {});

}  // namespace preshape
