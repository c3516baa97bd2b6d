#include "preshape/contour_sdf.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>

#include "preshape/errors.hpp"

namespace preshape {

namespace {

// Clockwise on screen (y down), starting west.
constexpr std::array<std::array<int, 2>, 8> kRing = {{
    {-1, 0}, {-1, -1}, {0, -1}, {1, -1}, {1, 0}, {1, 1}, {0, 1}, {-1, 1},
}};

int ring_index(const Eigen::Vector2i& from, const Eigen::Vector2i& to) {
  const Eigen::Vector2i d = to - from;
  for (int i = 0; i < 8; ++i)
    if (kRing[i][0] == d.x() && kRing[i][1] == d.y()) return i;
  return -1;
}

double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b, Vec2* nearest) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec2 q = a + t * ab;
  if (nearest) *nearest = q;
  return (p - q).norm();
}

}  // namespace

std::vector<Vec2> Silhouette::closed_polyline() const {
  std::vector<Vec2> out = points;
  if (!out.empty()) out.push_back(out.front());
  return out;
}

std::vector<Eigen::Vector2i> trace_outer_boundary(const std::function<bool(int, int)>& covered, int width,
                                                  int height) {
  std::vector<Eigen::Vector2i> boundary;
  if (width <= 0 || height <= 0) return boundary;
  // Largest 8-connected component; its first pixel in raster order has a
  // background west neighbour.
  std::vector<int> component(static_cast<std::size_t>(width) * height, -1);
  Eigen::Vector2i start(-1, -1);
  std::size_t best_size = 0;
  std::vector<Eigen::Vector2i> stack;
  int label = 0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (component[static_cast<std::size_t>(y) * width + x] >= 0 || !covered(x, y)) continue;
      std::size_t size = 0;
      stack.assign(1, {x, y});
      component[static_cast<std::size_t>(y) * width + x] = label;
      while (!stack.empty()) {
        const Eigen::Vector2i q = stack.back();
        stack.pop_back();
        ++size;
        for (const auto& d : kRing) {
          const int nx = q.x() + d[0], ny = q.y() + d[1];
          if (nx < 0 || ny < 0 || nx >= width || ny >= height) continue;
          int& c = component[static_cast<std::size_t>(ny) * width + nx];
          if (c >= 0 || !covered(nx, ny)) continue;
          c = label;
          stack.emplace_back(nx, ny);
        }
      }
      if (size > best_size) {
        best_size = size;
        start = {x, y};
      }
      ++label;
    }
  if (start.x() < 0) return boundary;
  const int keep = component[static_cast<std::size_t>(start.y()) * width + start.x()];
  auto inside = [&](int x, int y) { return component[static_cast<std::size_t>(y) * width + x] == keep; };

  boundary.push_back(start);
  Eigen::Vector2i p = start;
  int back = 0;  // west of the first pixel is background by construction
  Eigen::Vector2i first_move(-1, -1);
  const std::size_t limit = 4u * static_cast<std::size_t>(width) * height + 8;
  while (boundary.size() < limit) {
    int found = -1;
    for (int k = 1; k <= 8; ++k) {
      const int idx = (back + k) % 8;
      const int x = p.x() + kRing[idx][0], y = p.y() + kRing[idx][1];
      if (x >= 0 && y >= 0 && x < width && y < height && inside(x, y)) {
        found = idx;
        break;
      }
    }
    if (found < 0) break;  // isolated pixel
    const Eigen::Vector2i q(p.x() + kRing[found][0], p.y() + kRing[found][1]);
    if (p == start) {
      if (first_move.x() < 0)
        first_move = q;
      else if (q == first_move)
        break;
    }
    const int prev = (found + 7) % 8;
    const Eigen::Vector2i b(p.x() + kRing[prev][0], p.y() + kRing[prev][1]);
    back = ring_index(q, b);
    p = q;
    if (p == start) continue;
    boundary.push_back(p);
  }
  return boundary;
}

std::vector<Eigen::Vector2i> trace_outer_boundary(const RasterBuffers& raster) {
  return trace_outer_boundary([&](int x, int y) { return raster.covered(x, y); }, raster.width(), raster.height());
}

Silhouette extract_silhouette(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam, int width,
                              int height) {
  RasterBuffers raster(mesh, pose, cam, width, height);
  if (raster.empty()) throw GeometryError("silhouette: projected mesh covers no pixels");
  Silhouette sil;
  for (const auto& px : trace_outer_boundary(raster)) {
    const SurfaceAnchor anchor = raster.anchor_at(px.x(), px.y());
    sil.points.emplace_back(px.x(), px.y());
    sil.anchors.push_back(anchor);
    sil.labels.push_back(anchor_label(*mesh.topology, anchor));
  }
  return sil;
}

Silhouette extract_silhouette(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam) {
  return extract_silhouette(mesh, pose, cam, cam.width, cam.height);
}

Silhouette extract_fine_silhouette(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam, int factor) {
  if (factor < 1) throw ArgumentError("silhouette: supersampling factor must be >= 1");
  // Fine pixel i covers image x = (i - (factor - 1) / 2) / factor.
  const double shift = 0.5 * (factor - 1);
  Camera fine = cam;
  fine.focal = cam.focal * factor;
  fine.principal_point = cam.principal_point * factor + Vec2::Constant(shift);
  fine.width = cam.width * factor;
  fine.height = cam.height * factor;
  Silhouette sil = extract_silhouette(mesh, pose, fine, fine.width, fine.height);
  for (auto& p : sil.points) p = (p - Vec2::Constant(shift)) / factor;
  return sil;
}

// --- ContourDistance -------------------------------------------------------

ContourDistance::ContourDistance(std::vector<Vec2> closed, double cell_size) : pts_(std::move(closed)), cell_(cell_size) {
  if (pts_.size() < 2) throw ArgumentError("contour needs at least two points");
  Vec2 lo = pts_.front(), hi = pts_.front();
  for (const auto& p : pts_) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  origin_ = lo;
  cols_ = static_cast<int>(std::floor((hi.x() - lo.x()) / cell_)) + 1;
  rows_ = static_cast<int>(std::floor((hi.y() - lo.y()) / cell_)) + 1;
  buckets_.resize(static_cast<std::size_t>(cols_) * rows_);
  for (std::size_t s = 0; s + 1 < pts_.size(); ++s) {
    const Vec2 a = pts_[s].cwiseMin(pts_[s + 1]) - origin_;
    const Vec2 b = pts_[s].cwiseMax(pts_[s + 1]) - origin_;
    const int c0 = static_cast<int>(a.x() / cell_), c1 = static_cast<int>(b.x() / cell_);
    const int r0 = static_cast<int>(a.y() / cell_), r1 = static_cast<int>(b.y() / cell_);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) buckets_[static_cast<std::size_t>(r) * cols_ + c].push_back(static_cast<int>(s));
  }
}

double ContourDistance::distance(const Vec2& p, int* segment, Vec2* nearest) const {
  const Vec2 rel = (p - origin_) / cell_;
  const int pc = static_cast<int>(std::floor(rel.x()));
  const int pr = static_cast<int>(std::floor(rel.y()));
  // Rings are centered on the nearest bucketed cell.
  const int cc = std::clamp(pc, 0, cols_ - 1);
  const int cr = std::clamp(pr, 0, rows_ - 1);
  const int max_ring = std::max({cc, cols_ - 1 - cc, cr, rows_ - 1 - cr});

  double best = std::numeric_limits<double>::infinity();
  int best_seg = -1;
  Vec2 best_q = Vec2::Zero();
  for (int ring = 0; ring <= max_ring; ++ring) {
    for (int r = cr - ring; r <= cr + ring; ++r) {
      if (r < 0 || r >= rows_) continue;
      const bool edge_row = (r == cr - ring || r == cr + ring);
      for (int c = cc - ring; c <= cc + ring; c += (edge_row ? 1 : 2 * ring)) {
        if (c >= 0 && c < cols_) {
          for (int s : buckets_[static_cast<std::size_t>(r) * cols_ + c]) {
            Vec2 q;
            const double d = point_segment_distance(p, pts_[s], pts_[s + 1], &q);
            if (d < best || (d == best && s < best_seg)) {
              best = d;
              best_seg = s;
              best_q = q;
            }
          }
        }
        if (ring == 0) break;
      }
    }
    // Cells beyond this ring are at least ring * cell_ away.
    if (best <= ring * cell_) break;
  }
  if (segment) *segment = best_seg;
  if (nearest) *nearest = best_q;
  return best;
}

bool ContourDistance::inside(const Vec2& p) const {
  bool in = false;
  for (std::size_t s = 0; s + 1 < pts_.size(); ++s) {
    const Vec2& a = pts_[s];
    const Vec2& b = pts_[s + 1];
    if ((a.y() <= p.y()) != (b.y() <= p.y())) {
      const double x = a.x() + (p.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
      if (x > p.x()) in = !in;
    }
  }
  return in;
}

double ContourDistance::signed_distance(const Vec2& p) const {
  const double d = distance(p);
  return inside(p) ? -d : d;
}

int ContourDistance::nearest_vertex(const Vec2& p) const {
  int seg = -1;
  Vec2 q;
  distance(p, &seg, &q);
  const int open_count = static_cast<int>(pts_.size()) - 1;
  const int a = seg;
  const int b = (seg + 1) % open_count;
  return (q - pts_[a]).squaredNorm() <= (q - pts_[seg + 1]).squaredNorm() ? a : b;
}

// --- SDF -------------------------------------------------------------------

double SdfGrid::sample(const Vec2& p) const {
  const double x = std::clamp(p.x(), 0.0, static_cast<double>(width_ - 1));
  const double y = std::clamp(p.y(), 0.0, static_cast<double>(height_ - 1));
  const int x0 = std::min(static_cast<int>(x), width_ - 2 < 0 ? 0 : width_ - 2);
  const int y0 = std::min(static_cast<int>(y), height_ - 2 < 0 ? 0 : height_ - 2);
  const int x1 = std::min(x0 + 1, width_ - 1), y1 = std::min(y0 + 1, height_ - 1);
  const double fx = x - x0, fy = y - y0;
  return (1 - fx) * (1 - fy) * at(x0, y0) + fx * (1 - fy) * at(x1, y0) + (1 - fx) * fy * at(x0, y1) +
         fx * fy * at(x1, y1);
}

Vec2 SdfGrid::node_gradient(int x, int y) const {
  const int xm = std::max(x - 1, 0), xp = std::min(x + 1, width_ - 1);
  const int ym = std::max(y - 1, 0), yp = std::min(y + 1, height_ - 1);
  const double gx = xp > xm ? (at(xp, y) - at(xm, y)) / (xp - xm) : 0.0;
  const double gy = yp > ym ? (at(x, yp) - at(x, ym)) / (yp - ym) : 0.0;
  return {gx, gy};
}

Vec2 SdfGrid::gradient(const Vec2& p) const {
  const double x = std::clamp(p.x(), 0.0, static_cast<double>(width_ - 1));
  const double y = std::clamp(p.y(), 0.0, static_cast<double>(height_ - 1));
  const int x0 = std::min(static_cast<int>(x), std::max(width_ - 2, 0));
  const int y0 = std::min(static_cast<int>(y), std::max(height_ - 2, 0));
  const int x1 = std::min(x0 + 1, width_ - 1), y1 = std::min(y0 + 1, height_ - 1);
  const double fx = x - x0, fy = y - y0;
  return (1 - fx) * (1 - fy) * node_gradient(x0, y0) + fx * (1 - fy) * node_gradient(x1, y0) +
         (1 - fx) * fy * node_gradient(x0, y1) + fx * fy * node_gradient(x1, y1);
}

SdfGrid compute_sdf(const std::vector<Vec2>& closed_contour, int width, int height) {
  if (closed_contour.size() < 4 || closed_contour.front() != closed_contour.back())
    throw ArgumentError("compute_sdf: contour must be closed (first point repeated at the end)");
  if (width <= 0 || height <= 0) throw ArgumentError("compute_sdf: size must be positive");

  const ContourDistance dist(closed_contour);
  std::vector<double> values(static_cast<std::size_t>(width) * height);
  std::vector<double> crossings;
  for (int y = 0; y < height; ++y) {
    // Even-odd crossings of the row, half-open in y so shared vertices count once.
    crossings.clear();
    for (std::size_t s = 0; s + 1 < closed_contour.size(); ++s) {
      const Vec2& a = closed_contour[s];
      const Vec2& b = closed_contour[s + 1];
      if ((a.y() <= y) != (b.y() <= y)) crossings.push_back(a.x() + (y - a.y()) * (b.x() - a.x()) / (b.y() - a.y()));
    }
    std::sort(crossings.begin(), crossings.end());
    for (int x = 0; x < width; ++x) {
      const auto right = crossings.end() - std::upper_bound(crossings.begin(), crossings.end(), static_cast<double>(x));
      const double d = dist.distance(Vec2(x, y));
      values[static_cast<std::size_t>(y) * width + x] = (right % 2 == 1) ? -d : d;
    }
  }
  return SdfGrid(width, height, std::move(values));
}

// --- Dense mapping -----------------------------------------------------------

int DenseContourMapping::valid_count() const {
  return static_cast<int>(std::count_if(pairs.begin(), pairs.end(), [](const ContourPair& p) { return p.valid; }));
}

DenseContourMapping dense_mapping(const Silhouette& original, const Silhouette& reshaped_sil, const FaceMesh& reshaped,
                                  const RigidPose& pose, const Camera& cam, const MappingOptions& options) {
  if (original.size() < 3 || reshaped_sil.size() < 3) throw GeometryError("dense mapping: degenerate silhouette");

  const SdfGrid sdf = compute_sdf(original.closed_polyline(), cam.width, cam.height);
  const ContourDistance target_contour(reshaped_sil.closed_polyline());

  DenseContourMapping mapping;
  mapping.pairs.reserve(original.size());
  for (std::size_t i = 0; i < original.size(); ++i) {
    ContourPair pair;
    pair.source = original.points[i];
    pair.label = original.labels[i];

    // Follow the surface point through the reshape.
    const Vec3 moved = surface_point(reshaped, original.anchors[i]);
    bool found = false;
    Vec2 candidate = Vec2::Zero();
    const Vec3 xc = pose.apply(moved);
    if (xc.z() > 0.0) {
      candidate = cam.focal * Vec2(xc.x() / xc.z(), xc.y() / xc.z()) + cam.principal_point;
      found = target_contour.distance(candidate) <= options.tolerance;
    }

    if (!found) {
      // The surface point left the silhouette (occlusion). Slide along the
      // original SDF gradient until the reshaped contour is reached.
      ++mapping.walked;
      const double direction = target_contour.inside(pair.source) ? 1.0 : -1.0;
      Vec2 p = pair.source;
      for (int step = 0; step <= options.max_steps; ++step) {
        if (target_contour.distance(p) <= options.tolerance) {
          candidate = p;
          found = true;
          break;
        }
        Vec2 g = sdf.gradient(p);
        const double norm = g.norm();
        if (norm < 1e-9) break;
        p += direction * options.step * g / norm;
      }
      if (!found) ++mapping.walk_failures;
    }

    pair.target = found ? candidate : pair.source;
    pair.valid = found;
    if (found && options.structure_check) {
      const int k = target_contour.nearest_vertex(pair.target);
      if (reshaped_sil.labels[static_cast<std::size_t>(k)] != pair.label) {
        pair.valid = false;
        ++mapping.label_rejections;
      }
    }
    mapping.pairs.push_back(pair);
  }

  if (mapping.walk_failures > options.max_failure_fraction * static_cast<double>(original.size()))
    throw MappingError("dense mapping: SDF walk failed for " + std::to_string(mapping.walk_failures) + " of " +
                       std::to_string(original.size()) + " contour pixels");
  return mapping;
}

DenseContourMapping dense_mapping(const FaceMesh& original, const FaceMesh& reshaped, const RigidPose& pose,
                                  const Camera& cam, const MappingOptions& options) {
  const Silhouette a = extract_silhouette(original, pose, cam);
  const Silhouette b = extract_silhouette(reshaped, pose, cam);
  return dense_mapping(a, b, reshaped, pose, cam, options);
}

}  // namespace preshape
