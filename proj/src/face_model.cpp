#include "preshape/face_model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

#include <Eigen/Geometry>

#include "preshape/errors.hpp"

namespace preshape {

static_assert(std::endian::native == std::endian::little,
              "model files are little-endian; big-endian hosts need byte swapping");

namespace {

constexpr char kMagic[4] = {'P', 'R', 'F', 'M'};
constexpr std::uint32_t kVersion = 1;

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw LoadError("cannot open model file " + path.string());
  }

  template <typename T>
  void read(T* dst, std::size_t count, const char* section) {
    in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(sizeof(T) * count));
    if (!in_) throw LoadError("model file " + path_.string() + ": truncated in section '" + section + "'");
  }

  template <typename T>
  T scalar(const char* section) {
    T v{};
    read(&v, 1, section);
    return v;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw Error("cannot write model file " + path.string());
  }
  template <typename T>
  void write(const T* src, std::size_t count) {
    out_.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(sizeof(T) * count));
  }
  template <typename T>
  void scalar(T v) {
    write(&v, 1);
  }

 private:
  std::ofstream out_;
};

}  // namespace

std::string_view region_name(Region r) {
  switch (r) {
    case Region::CheekLeft: return "cheek-L";
    case Region::CheekRight: return "cheek-R";
    case Region::Chin: return "chin";
    case Region::Nose: return "nose";
    case Region::Forehead: return "forehead";
    case Region::Other: return "other";
  }
  return "unknown";
}

void FaceModel::validate() const {
  const auto dims = mean_shape.size();
  if (dims == 0 || dims % 3 != 0) throw DimensionError("mean shape length must be a positive multiple of 3");
  const int n = vertex_count();
  if (identity_basis.rows() != dims) throw DimensionError("identity basis vectors must have length 3n");
  if (expression_basis.rows() != dims) throw DimensionError("expression basis vectors must have length 3n");
  if (reshape_basis.size() != dims) throw DimensionError("reshape basis must have length 3n");
  if (!topology) throw DimensionError("model has no topology");
  for (const auto& tri : topology->triangles)
    for (int idx : tri)
      if (idx < 0 || idx >= n) throw DimensionError("triangle index out of range");
  if (static_cast<int>(topology->labels.size()) != n) throw DimensionError("region label count must equal n");
  if (contour_landmark.size() != landmark_vertices.size())
    throw DimensionError("contour flag count must equal landmark count");
  for (int idx : landmark_vertices)
    if (idx < 0 || idx >= n) throw DimensionError("landmark vertex index out of range");
  if (!(face_length > 0.0)) throw DimensionError("face_length must be positive");
}

Mat3 rodrigues(const Vec3& r) {
  const double theta = r.norm();
  if (theta < 1e-12) return Mat3::Identity() + skew(r);
  return Eigen::AngleAxisd(theta, r / theta).toRotationMatrix();
}

Mat3 rotated_point_jacobian(const Vec3& r, const Vec3& v) {
  const double theta2 = r.squaredNorm();
  if (theta2 < 1e-16) return -skew(v);
  const Mat3 R = rodrigues(r);
  return -R * skew(v) * (r * r.transpose() + (R.transpose() - Mat3::Identity()) * skew(r)) / theta2;
}

Mat3 RigidPose::rotation_matrix() const { return rodrigues(rotation); }

void RigidPose::canonicalize() {
  const double theta = rotation.norm();
  if (theta <= std::numbers::pi) return;
  const double wrapped = theta - 2.0 * std::numbers::pi * std::round(theta / (2.0 * std::numbers::pi));
  rotation *= wrapped / theta;
}

Camera Camera::for_image(int width, int height) {
  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.focal = 1.2 * std::max(width, height);
  cam.principal_point = Vec2(0.5 * (width - 1), 0.5 * (height - 1));
  return cam;
}

void Camera::validate() const {
  if (!(focal > 0.0)) throw ArgumentError("camera focal length must be positive");
  if (width <= 0 || height <= 0) throw ArgumentError("camera image size must be positive");
  if (principal_point.x() < 0 || principal_point.x() > width - 1 || principal_point.y() < 0 ||
      principal_point.y() > height - 1)
    throw ArgumentError("principal point must lie inside the image");
}

FaceModel load_model(const std::filesystem::path& path) {
  Reader in(path);
  char magic[4];
  in.read(magic, 4, "header");
  if (!std::equal(magic, magic + 4, kMagic)) throw LoadError("model file " + path.string() + ": bad magic in section 'header'");
  if (in.scalar<std::uint32_t>("header") != kVersion) throw LoadError("model file " + path.string() + ": unsupported version in section 'header'");
  const auto n = in.scalar<std::uint32_t>("header");
  const auto m_s = in.scalar<std::uint32_t>("header");
  const auto m_e = in.scalar<std::uint32_t>("header");
  const auto nl = in.scalar<std::uint32_t>("header");
  const auto tri_count = in.scalar<std::uint32_t>("header");
  if (n == 0) throw LoadError("model file " + path.string() + ": zero vertices in section 'header'");

  const std::size_t dims = 3u * n;
  FaceModel model;
  model.mean_shape.resize(static_cast<Eigen::Index>(dims));
  in.read(model.mean_shape.data(), dims, "mean");
  // Row-major m x 3n on disk is column-major 3n x m in memory.
  model.identity_basis.resize(static_cast<Eigen::Index>(dims), m_s);
  in.read(model.identity_basis.data(), dims * m_s, "identity_basis");
  model.expression_basis.resize(static_cast<Eigen::Index>(dims), m_e);
  in.read(model.expression_basis.data(), dims * m_e, "expression_basis");
  model.reshape_basis.resize(static_cast<Eigen::Index>(dims));
  in.read(model.reshape_basis.data(), dims, "reshape_basis");

  std::vector<std::uint32_t> landmarks(nl);
  in.read(landmarks.data(), nl, "landmarks");
  std::vector<std::uint8_t> flags(nl);
  in.read(flags.data(), nl, "contour_flags");
  std::vector<std::uint32_t> tris(3u * tri_count);
  in.read(tris.data(), tris.size(), "triangles");
  std::vector<std::uint8_t> labels(n);
  in.read(labels.data(), n, "region_labels");
  model.face_length = in.scalar<double>("face_length");
  if (!in.at_end()) throw LoadError("model file " + path.string() + ": trailing bytes after section 'face_length'");

  auto topo = std::make_shared<MeshTopology>();
  topo->triangles.reserve(tri_count);
  for (std::size_t t = 0; t < tri_count; ++t)
    topo->triangles.push_back({static_cast<int>(tris[3 * t]), static_cast<int>(tris[3 * t + 1]),
                               static_cast<int>(tris[3 * t + 2])});
  topo->labels.reserve(n);
  for (auto l : labels) {
    if (l > static_cast<std::uint8_t>(Region::Other))
      throw LoadError("model file " + path.string() + ": unknown label in section 'region_labels'");
    topo->labels.push_back(static_cast<Region>(l));
  }
  model.topology = std::move(topo);
  model.landmark_vertices.assign(landmarks.begin(), landmarks.end());
  model.contour_landmark.reserve(nl);
  for (auto f : flags) model.contour_landmark.push_back(f != 0);

  model.validate();
  return model;
}

void save_model(const FaceModel& model, const std::filesystem::path& path) {
  model.validate();
  Writer out(path);
  out.write(kMagic, 4);
  out.scalar(kVersion);
  out.scalar(static_cast<std::uint32_t>(model.vertex_count()));
  out.scalar(static_cast<std::uint32_t>(model.identity_count()));
  out.scalar(static_cast<std::uint32_t>(model.expression_count()));
  out.scalar(static_cast<std::uint32_t>(model.landmark_count()));
  out.scalar(static_cast<std::uint32_t>(model.topology->triangles.size()));
  out.write(model.mean_shape.data(), static_cast<std::size_t>(model.mean_shape.size()));
  out.write(model.identity_basis.data(), static_cast<std::size_t>(model.identity_basis.size()));
  out.write(model.expression_basis.data(), static_cast<std::size_t>(model.expression_basis.size()));
  out.write(model.reshape_basis.data(), static_cast<std::size_t>(model.reshape_basis.size()));
  for (int idx : model.landmark_vertices) out.scalar(static_cast<std::uint32_t>(idx));
  for (bool f : model.contour_landmark) out.scalar(static_cast<std::uint8_t>(f ? 1 : 0));
  for (const auto& tri : model.topology->triangles)
    for (int idx : tri) out.scalar(static_cast<std::uint32_t>(idx));
  for (Region l : model.topology->labels) out.scalar(static_cast<std::uint8_t>(l));
  out.scalar(model.face_length);
}

namespace {

void check_coeffs(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr) {
  if (shape.alpha.size() != model.identity_count())
    throw DimensionError("expected " + std::to_string(model.identity_count()) + " identity coefficients, got " +
                         std::to_string(shape.alpha.size()));
  if (expr.beta.size() != model.expression_count())
    throw DimensionError("expected " + std::to_string(model.expression_count()) + " expression coefficients, got " +
                         std::to_string(expr.beta.size()));
}

FaceMesh to_mesh(const FaceModel& model, const Eigen::VectorXd& flat) {
  FaceMesh mesh;
  mesh.vertices = Eigen::Map<const Eigen::Matrix3Xd>(flat.data(), 3, model.vertex_count());
  mesh.topology = model.topology;
  return mesh;
}

}  // namespace

FaceMesh assemble(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr) {
  check_coeffs(model, shape, expr);
  Eigen::VectorXd flat = model.mean_shape;
  flat.noalias() += model.identity_basis * shape.alpha;
  flat.noalias() += model.expression_basis * expr.beta;
  return to_mesh(model, flat);
}

FaceMesh reshape(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr, double delta) {
  check_coeffs(model, shape, expr);
  // Same accumulation order as assemble(), so delta == 0 is bit-identical.
  Eigen::VectorXd flat = model.mean_shape;
  flat.noalias() += model.identity_basis * shape.alpha;
  if (delta != 0.0) flat += delta * model.reshape_basis;
  flat.noalias() += model.expression_basis * expr.beta;
  return to_mesh(model, flat);
}

Vec3 model_vertex(const FaceModel& model, int index, const Eigen::VectorXd& alpha, const Eigen::VectorXd& beta) {
  const Eigen::Index row = 3 * static_cast<Eigen::Index>(index);
  Vec3 v = model.mean_shape.segment<3>(row);
  if (alpha.size() > 0) v.noalias() += model.identity_basis.middleRows<3>(row) * alpha;
  if (beta.size() > 0) v.noalias() += model.expression_basis.middleRows<3>(row) * beta;
  return v;
}

Vec2 project_point(const Vec3& model_point, const RigidPose& pose, const Camera& cam, int vertex_index) {
  const Vec3 x = pose.apply(model_point);
  if (!(x.z() > 0.0)) throw ProjectionError(vertex_index, x.z());
  return cam.focal * Vec2(x.x() / x.z(), x.y() / x.z()) + cam.principal_point;
}

std::vector<Vec2> project(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam) {
  const Mat3 R = pose.rotation_matrix();
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(mesh.vertex_count()));
  for (int i = 0; i < mesh.vertex_count(); ++i) {
    const Vec3 x = R * mesh.vertices.col(i) + pose.translation;
    if (!(x.z() > 0.0)) throw ProjectionError(i, x.z());
    out.emplace_back(cam.focal * x.x() / x.z() + cam.principal_point.x(),
                     cam.focal * x.y() / x.z() + cam.principal_point.y());
  }
  return out;
}

Vec3 unproject(const Vec2& pixel, double depth, const RigidPose& pose, const Camera& cam) {
  const Vec2 n = (pixel - cam.principal_point) / cam.focal;
  const Vec3 x(n.x() * depth, n.y() * depth, depth);
  return pose.rotation_matrix().transpose() * (x - pose.translation);
}

}  // namespace preshape
