#pragma once

#include <functional>
#include <vector>

#include "preshape/face_model.hpp"
#include "preshape/raster.hpp"

namespace preshape {

// Outer boundary of a projected mesh, one entry per boundary pixel in tracing
// order. The polyline is implicitly closed (last point links back to first).
struct Silhouette {
  std::vector<Vec2> points;
  std::vector<SurfaceAnchor> anchors;
  std::vector<Region> labels;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  // Points with the first one repeated at the end.
  std::vector<Vec2> closed_polyline() const;
};

// Moore-neighbour trace of the outer boundary of the largest 8-connected
// covered component. Returns pixel coordinates.
std::vector<Eigen::Vector2i> trace_outer_boundary(const RasterBuffers& raster);
// Same on an arbitrary width x height mask.
std::vector<Eigen::Vector2i> trace_outer_boundary(const std::function<bool(int, int)>& covered, int width,
                                                  int height);

// Rasterizes the mesh at width x height and traces its outer boundary; each
// boundary pixel is anchored to the visible surface point under its center.
// Throws GeometryError when nothing is covered.
Silhouette extract_silhouette(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam, int width,
                              int height);
Silhouette extract_silhouette(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam);
// Traced on a raster `factor` times finer in each direction, with points
// mapped back to image pixel coordinates. Anchors are exact surface points.
Silhouette extract_fine_silhouette(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam, int factor);

// Exact distance queries against a closed polyline, bucketed on a uniform grid.
class ContourDistance {
 public:
  // `closed` must have first == last.
  explicit ContourDistance(std::vector<Vec2> closed, double cell_size = 8.0);

  double distance(const Vec2& p, int* segment = nullptr, Vec2* nearest = nullptr) const;
  // Even-odd inside test; negative inside.
  double signed_distance(const Vec2& p) const;
  bool inside(const Vec2& p) const;
  // Index (into the open point list) of the polyline vertex closest to p.
  int nearest_vertex(const Vec2& p) const;

  const std::vector<Vec2>& polyline() const { return pts_; }

 private:
  std::vector<Vec2> pts_;
  double cell_;
  Vec2 origin_;
  int cols_ = 0;
  int rows_ = 0;
  std::vector<std::vector<int>> buckets_;
};

// Per-pixel signed distance to a closed contour (pixels, negative inside).
class SdfGrid {
 public:
  SdfGrid(int width, int height, std::vector<double> values)
      : width_(width), height_(height), values_(std::move(values)) {}

  int width() const { return width_; }
  int height() const { return height_; }
  double at(int x, int y) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  // Bilinear interpolation, clamped to the grid.
  double sample(const Vec2& p) const;
  // Central-difference gradient, bilinearly interpolated.
  Vec2 gradient(const Vec2& p) const;

 private:
  Vec2 node_gradient(int x, int y) const;

  int width_;
  int height_;
  std::vector<double> values_;
};

// Throws ArgumentError if the contour is not closed or has fewer than 3 points.
SdfGrid compute_sdf(const std::vector<Vec2>& closed_contour, int width, int height);

struct ContourPair {
  Vec2 source;
  Vec2 target;
  bool valid = false;
  Region label = Region::Other;
};

struct DenseContourMapping {
  std::vector<ContourPair> pairs;
  int walked = 0;
  int walk_failures = 0;
  int label_rejections = 0;

  int valid_count() const;
};

struct MappingOptions {
  double tolerance = 0.75;
  double step = 0.5;
  int max_steps = 200;
  double max_failure_fraction = 0.05;
  // Off reproduces the mapping without 3D-structure correction.
  bool structure_check = true;
};

// Dense correspondence between the silhouette of `original` and that of
// `reshaped` (same topology, same pose). Throws MappingError when more than
// max_failure_fraction of the SDF walks fail.
DenseContourMapping dense_mapping(const FaceMesh& original, const FaceMesh& reshaped, const RigidPose& pose,
                                  const Camera& cam, const MappingOptions& options = {});

// Same, reusing silhouettes already extracted for both meshes.
DenseContourMapping dense_mapping(const Silhouette& original_silhouette, const Silhouette& reshaped_silhouette,
                                  const FaceMesh& reshaped, const RigidPose& pose, const Camera& cam,
                                  const MappingOptions& options = {});

}  // namespace preshape
