#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace preshape {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

enum class Region : std::uint8_t {
  CheekLeft = 0,
  CheekRight = 1,
  Chin = 2,
  Nose = 3,
  Forehead = 4,
  Other = 5,
};

std::string_view region_name(Region r);

// Connectivity and per-vertex labels shared by a model and every mesh built
// from it.
struct MeshTopology {
  std::vector<std::array<int, 3>> triangles;
  std::vector<Region> labels;
};

// Linear face model: mean + identity basis + expression basis, plus the
// per-vertex displacement used by the reshape operator.
//
// Bases are stored column-wise: column i of identity_basis is one 3n vector
// laid out as (x0, y0, z0, x1, ...).
struct FaceModel {
  Eigen::VectorXd mean_shape;
  Eigen::MatrixXd identity_basis;
  Eigen::MatrixXd expression_basis;
  Eigen::VectorXd reshape_basis;
  std::shared_ptr<const MeshTopology> topology;
  std::vector<int> landmark_vertices;
  std::vector<bool> contour_landmark;
  double face_length = 0.0;

  int vertex_count() const { return static_cast<int>(mean_shape.size() / 3); }
  int identity_count() const { return static_cast<int>(identity_basis.cols()); }
  int expression_count() const { return static_cast<int>(expression_basis.cols()); }
  int landmark_count() const { return static_cast<int>(landmark_vertices.size()); }

  // Throws DimensionError when any invariant is violated.
  void validate() const;
};

struct ShapeCoeffs {
  Eigen::VectorXd alpha;

  static ShapeCoeffs zero(int count) { return {Eigen::VectorXd::Zero(count)}; }
};

struct ExprCoeffs {
  Eigen::VectorXd beta;

  // The neutral expression is the all-zeros vector.
  static ExprCoeffs neutral(int count) { return {Eigen::VectorXd::Zero(count)}; }
};

struct FaceMesh {
  Eigen::Matrix3Xd vertices;
  std::shared_ptr<const MeshTopology> topology;

  int vertex_count() const { return static_cast<int>(vertices.cols()); }
};

// Axis-angle rotation (radians) followed by translation (model units).
struct RigidPose {
  Vec3 rotation = Vec3::Zero();
  Vec3 translation = Vec3::Zero();

  Mat3 rotation_matrix() const;
  Vec3 apply(const Vec3& v) const { return rotation_matrix() * v + translation; }
  // Rewrites rotation so that |r| <= pi without changing the rotation it encodes.
  void canonicalize();
};

// Pinhole camera looking down +z; image x right, y down, pixel centers at
// integer coordinates.
struct Camera {
  double focal = 1.0;
  Vec2 principal_point = Vec2::Zero();
  int width = 0;
  int height = 0;

  // focal = 1.2 * max(width, height), principal point at the image center.
  static Camera for_image(int width, int height);
  void validate() const;
};

Mat3 rodrigues(const Vec3& r);
// d(R(r) v) / dr, a 3x3 matrix.
Mat3 rotated_point_jacobian(const Vec3& r, const Vec3& v);

FaceModel load_model(const std::filesystem::path& path);
void save_model(const FaceModel& model, const std::filesystem::path& path);

FaceMesh assemble(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr);

// Neutral face of `shape`, displaced by delta * reshape_basis, then the
// expression of `expr` is added back on top.
FaceMesh reshape(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr,
                 double delta);

// Position of a single vertex without assembling the whole mesh.
Vec3 model_vertex(const FaceModel& model, int index, const Eigen::VectorXd& alpha,
                  const Eigen::VectorXd& beta);

Vec2 project_point(const Vec3& model_point, const RigidPose& pose, const Camera& cam,
                   int vertex_index = -1);
std::vector<Vec2> project(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam);

// Inverse of project_point for a known camera-frame depth.
Vec3 unproject(const Vec2& pixel, double depth, const RigidPose& pose, const Camera& cam);

}  // namespace preshape
