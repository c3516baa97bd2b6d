#include "preshape/raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "preshape/errors.hpp"

namespace preshape {

namespace {

double edge(const Vec2& a, const Vec2& b, double px, double py) {
  return (b.x() - a.x()) * (py - a.y()) - (b.y() - a.y()) * (px - a.x());
}

}  // namespace

RasterBuffers::RasterBuffers(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam, int width, int height)
    : width_(width),
      height_(height),
      depth_(static_cast<std::size_t>(width) * height, std::numeric_limits<double>::infinity()),
      triangle_(static_cast<std::size_t>(width) * height, -1),
      topology_(mesh.topology.get()) {
  if (width <= 0 || height <= 0) throw ArgumentError("raster size must be positive");
  if (!mesh.topology) throw ArgumentError("mesh has no topology");

  const Mat3 R = pose.rotation_matrix();
  const int n = mesh.vertex_count();
  std::vector<Vec3> cam_pts(static_cast<std::size_t>(n));
  projected_.resize(static_cast<std::size_t>(n));
  camera_depth_.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Vec3 x = R * mesh.vertices.col(i) + pose.translation;
    if (!(x.z() > 0.0)) throw ProjectionError(i, x.z());
    cam_pts[i] = x;
    camera_depth_[i] = x.z();
    projected_[i] = Vec2(cam.focal * x.x() / x.z() + cam.principal_point.x(),
                         cam.focal * x.y() / x.z() + cam.principal_point.y());
  }

  const auto& tris = mesh.topology->triangles;
  for (std::size_t t = 0; t < tris.size(); ++t) {
    const auto [i0, i1, i2] = tris[t];
    const Vec3 normal = (cam_pts[i1] - cam_pts[i0]).cross(cam_pts[i2] - cam_pts[i0]);
    if (normal.dot(cam_pts[i0]) >= 0.0) continue;  // back-facing or edge-on

    const Vec2& a = projected_[i0];
    const Vec2& b = projected_[i1];
    const Vec2& c = projected_[i2];
    const double area = edge(a, b, c.x(), c.y());
    if (area == 0.0) continue;
    const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({a.x(), b.x(), c.x()}))));
    const int x1 = std::min(width - 1, static_cast<int>(std::floor(std::max({a.x(), b.x(), c.x()}))));
    const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({a.y(), b.y(), c.y()}))));
    const int y1 = std::min(height - 1, static_cast<int>(std::floor(std::max({a.y(), b.y(), c.y()}))));
    const double inv_z0 = 1.0 / camera_depth_[i0];
    const double inv_z1 = 1.0 / camera_depth_[i1];
    const double inv_z2 = 1.0 / camera_depth_[i2];
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double w0 = edge(b, c, x, y) / area;
        const double w1 = edge(c, a, x, y) / area;
        const double w2 = edge(a, b, x, y) / area;
        if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
        const double z = 1.0 / (w0 * inv_z0 + w1 * inv_z1 + w2 * inv_z2);
        const std::size_t k = index(x, y);
        if (z < depth_[k]) {
          if (triangle_[k] < 0) ++covered_count_;
          depth_[k] = z;
          triangle_[k] = static_cast<int>(t);
        }
      }
    }
  }
}

SurfaceAnchor RasterBuffers::anchor_at(int x, int y) const {
  SurfaceAnchor anchor;
  anchor.triangle = triangle_at(x, y);
  if (anchor.triangle < 0) throw GeometryError("pixel is not covered by the mesh");
  const auto [i0, i1, i2] = topology_->triangles[static_cast<std::size_t>(anchor.triangle)];
  const Vec2& a = projected_[i0];
  const Vec2& b = projected_[i1];
  const Vec2& c = projected_[i2];
  const double area = edge(a, b, c.x(), c.y());
  const Vec3 screen(edge(b, c, x, y) / area, edge(c, a, x, y) / area, edge(a, b, x, y) / area);
  const Vec3 weighted(screen(0) / camera_depth_[i0], screen(1) / camera_depth_[i1], screen(2) / camera_depth_[i2]);
  anchor.barycentric = weighted / weighted.sum();
  return anchor;
}

Vec3 surface_point(const FaceMesh& mesh, const SurfaceAnchor& anchor) {
  const auto [i0, i1, i2] = mesh.topology->triangles[static_cast<std::size_t>(anchor.triangle)];
  return anchor.barycentric(0) * mesh.vertices.col(i0) + anchor.barycentric(1) * mesh.vertices.col(i1) +
         anchor.barycentric(2) * mesh.vertices.col(i2);
}

Region anchor_label(const MeshTopology& topology, const SurfaceAnchor& anchor) {
  const auto& tri = topology.triangles[static_cast<std::size_t>(anchor.triangle)];
  Eigen::Index best = 0;
  anchor.barycentric.maxCoeff(&best);
  return topology.labels[static_cast<std::size_t>(tri[static_cast<std::size_t>(best)])];
}

}  // namespace preshape
