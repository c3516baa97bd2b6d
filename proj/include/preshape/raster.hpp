#pragma once

#include <vector>

#include "preshape/face_model.hpp"

namespace preshape {

// Point on a mesh surface: triangle index plus barycentric weights.
struct SurfaceAnchor {
  int triangle = -1;
  Vec3 barycentric = Vec3::Zero();
};

// Z-buffered coverage of the front-facing triangles of a posed mesh.
// Pixel (x, y) covers the image point with center (x, y).
class RasterBuffers {
 public:
  RasterBuffers(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam, int width, int height);

  int width() const { return width_; }
  int height() const { return height_; }
  int triangle_at(int x, int y) const { return triangle_[index(x, y)]; }
  double depth_at(int x, int y) const { return depth_[index(x, y)]; }
  bool covered(int x, int y) const {
    return x >= 0 && y >= 0 && x < width_ && y < height_ && triangle_[index(x, y)] >= 0;
  }
  bool empty() const { return covered_count_ == 0; }
  int covered_count() const { return covered_count_; }

  // Perspective-correct surface point seen through the center of a covered pixel.
  SurfaceAnchor anchor_at(int x, int y) const;

 private:
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width_ + x; }

  int width_;
  int height_;
  int covered_count_ = 0;
  std::vector<double> depth_;
  std::vector<int> triangle_;
  std::vector<Vec2> projected_;
  std::vector<double> camera_depth_;
  const MeshTopology* topology_;
};

Vec3 surface_point(const FaceMesh& mesh, const SurfaceAnchor& anchor);
Region anchor_label(const MeshTopology& topology, const SurfaceAnchor& anchor);

}  // namespace preshape
