#include "preshape/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include <Eigen/Geometry>
#include <opencv2/imgcodecs.hpp>

#include "preshape/contour_sdf.hpp"
#include "preshape/errors.hpp"
#include "preshape/raster.hpp"

namespace preshape {

namespace {

constexpr double kA = 70.0;   // half width
constexpr double kB = 100.0;  // half height
constexpr double kC = 60.0;   // depth
constexpr int kCols = 49;
constexpr int kRows = 45;
constexpr double kThetaMax = 100.0 * std::numbers::pi / 180.0;
constexpr double kPhiTop = -60.0 * std::numbers::pi / 180.0;
constexpr double kPhiBottom = 70.0 * std::numbers::pi / 180.0;
constexpr double kDepth = 520.0;
constexpr double kCrease = 200.0 / 3.0 * std::numbers::pi / 180.0;  // on a grid column
constexpr double kSide = 40.0;
constexpr double kSideTilt = 25.0 * std::numbers::pi / 180.0;

double deg(double d) { return d * std::numbers::pi / 180.0; }

double legendre(int n, double x) {
  double p0 = 1.0, p1 = x;
  if (n == 0) return p0;
  for (int k = 2; k <= n; ++k) {
    const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
    p0 = p1;
    p1 = p2;
  }
  return p1;
}

double gauss(double x, double y, double cx, double cy, double sx, double sy) {
  const double dx = (x - cx) / sx, dy = (y - cy) / sy;
  return std::exp(-0.5 * (dx * dx + dy * dy));
}

// Removes the components along `basis` (orthonormal columns) and returns the
// remainder's norm.
double orthogonalize(Eigen::VectorXd& v, const std::vector<Eigen::VectorXd>& basis) {
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& b : basis) v -= b.dot(v) * b;
  return v.norm();
}

Region label_for(double x, double y, double nose) {
  if (nose > 0.35) return Region::Nose;
  if (y > 62.0) return Region::Chin;
  if (y < -38.0) return Region::Forehead;
  if (std::abs(x) > 24.0 && y > -25.0) return x < 0.0 ? Region::CheekLeft : Region::CheekRight;
  return Region::Other;
}

}  // namespace

Camera reference_camera() { return Camera::for_image(320, 320); }

RigidPose reference_pose() {
  RigidPose p;
  p.translation = Vec3(0.0, 0.0, kDepth);
  return p;
}

FaceModel make_reference_model() {
  const int n = kCols * kRows;
  FaceModel model;
  model.mean_shape.resize(3 * n);
  std::vector<double> us(static_cast<std::size_t>(n)), vs(static_cast<std::size_t>(n)), nose(static_cast<std::size_t>(n));
  for (int j = 0; j < kRows; ++j)
    for (int i = 0; i < kCols; ++i) {
      const int k = j * kCols + i;
      const double u = -1.0 + 2.0 * i / (kCols - 1);
      const double v = -1.0 + 2.0 * j / (kRows - 1);
      const double theta = u * kThetaMax;
      const double phi = kPhiTop + (v + 1.0) * 0.5 * (kPhiBottom - kPhiTop);
      // Past the crease the side turns sharply back, like a jawline, so the
      // crease stays on the outline over a range of head turns.
      const double t = std::min(std::abs(theta), kCrease);
      const double back = std::max(std::abs(theta) - kCrease, 0.0) / (kThetaMax - kCrease) * kSide;
      const double x = std::copysign(kA * std::sin(t) - std::sin(kSideTilt) * back, theta) * std::cos(phi);
      const double y = kB * std::sin(phi);
      double z = (-kC * std::cos(t) + std::cos(kSideTilt) * back) * std::cos(phi);
      const double bump = gauss(x, y, 0.0, 8.0, 10.0, 20.0);
      z -= 20.0 * bump;
      model.mean_shape.segment<3>(3 * k) = Vec3(x, y, z);
      us[static_cast<std::size_t>(k)] = u;
      vs[static_cast<std::size_t>(k)] = v;
      nose[static_cast<std::size_t>(k)] = bump;
    }

  auto topology = std::make_shared<MeshTopology>();
  for (int j = 0; j + 1 < kRows; ++j)
    for (int i = 0; i + 1 < kCols; ++i) {
      const int a = j * kCols + i, b = a + 1, c = a + kCols, d = c + 1;
      for (std::array<int, 3> tri : {std::array<int, 3>{a, b, d}, std::array<int, 3>{a, d, c}}) {
        const Vec3 p0 = model.mean_shape.segment<3>(3 * tri[0]);
        const Vec3 p1 = model.mean_shape.segment<3>(3 * tri[1]);
        const Vec3 p2 = model.mean_shape.segment<3>(3 * tri[2]);
        const Vec3 centroid = (p0 + p1 + p2) / 3.0;
        const Vec3 outward(centroid.x() / (kA * kA), centroid.y() / (kB * kB), centroid.z() / (kC * kC));
        if ((p1 - p0).cross(p2 - p0).dot(outward) < 0.0) std::swap(tri[1], tri[2]);
        topology->triangles.push_back(tri);
      }
    }
  for (int k = 0; k < n; ++k) {
    const Vec3 p = model.mean_shape.segment<3>(3 * k);
    topology->labels.push_back(label_for(p.x(), p.y(), nose[static_cast<std::size_t>(k)]));
  }

  // Landmarks: 17 contour points first, then 51 interior points.
  const Camera cam = reference_camera();
  const RigidPose pose = reference_pose();
  auto row_extreme = [&](int row, double side) {
    int best = row * kCols;
    double best_x = -1e300;
    for (int i = 0; i < kCols; ++i) {
      const int k = row * kCols + i;
      const Vec2 px = project_point(model.mean_shape.segment<3>(3 * k), pose, cam);
      const double val = side * (px.x() - cam.principal_point.x());
      if (val > best_x) {
        best_x = val;
        best = k;
      }
    }
    return best;
  };
  const int contour_rows[8] = {12, 15, 18, 21, 24, 27, 30, 33};
  for (int s = 0; s < 8; ++s) model.landmark_vertices.push_back(row_extreme(contour_rows[s], -1.0));
  model.landmark_vertices.push_back((kRows - 1) * kCols + kCols / 2);
  for (int s = 7; s >= 0; --s) model.landmark_vertices.push_back(row_extreme(contour_rows[s], 1.0));

  std::vector<Vec2> spots;
  for (int i = 0; i < 10; ++i) spots.emplace_back(-45.0 + 10.0 * i, -35.0);  // brows
  for (int i = 0; i < 4; ++i) spots.emplace_back(0.0, -20.0 + 10.0 * i);     // bridge
  for (int i = 0; i < 5; ++i) spots.emplace_back(-12.0 + 6.0 * i, 20.0);     // nostrils
  for (int side : {-1, 1})
    for (int i = 0; i < 6; ++i) {
      const double a = 2.0 * std::numbers::pi * i / 6.0;
      spots.emplace_back(side * 28.0 + 12.0 * std::cos(a), -18.0 + 5.0 * std::sin(a));
    }
  for (int i = 0; i < 12; ++i) {
    const double a = 2.0 * std::numbers::pi * i / 12.0;
    spots.emplace_back(25.0 * std::cos(a), 45.0 + 10.0 * std::sin(a));
  }
  for (int i = 0; i < 8; ++i) {
    const double a = 2.0 * std::numbers::pi * i / 8.0;
    spots.emplace_back(15.0 * std::cos(a), 45.0 + 4.0 * std::sin(a));
  }
  for (const auto& s : spots) {
    int best = -1;
    double best_d = 1e300;
    for (int k = 0; k < n; ++k) {
      const Vec3 p = model.mean_shape.segment<3>(3 * k);
      if (p.z() > -20.0) continue;
      if (std::find(model.landmark_vertices.begin(), model.landmark_vertices.end(), k) != model.landmark_vertices.end())
        continue;
      const double d = (p.head<2>() - s).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    model.landmark_vertices.push_back(best);
  }
  model.contour_landmark.assign(model.landmark_vertices.size(), false);
  for (int i = 0; i < 17; ++i) model.contour_landmark[static_cast<std::size_t>(i)] = true;

  // Similarity directions: translations, rotations and scale about the centroid.
  Vec3 centroid = Vec3::Zero();
  for (int k = 0; k < n; ++k) centroid += model.mean_shape.segment<3>(3 * k);
  centroid /= n;
  std::vector<Eigen::VectorXd> sim;
  for (int axis = 0; axis < 7; ++axis) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(3 * n);
    for (int k = 0; k < n; ++k) {
      const Vec3 p = model.mean_shape.segment<3>(3 * k) - centroid;
      Vec3 d = Vec3::Zero();
      if (axis < 3)
        d(axis) = 1.0;
      else if (axis < 6)
        d = Vec3::Unit(axis - 3).cross(p);
      else
        d = p;
      v.segment<3>(3 * k) = d;
    }
    orthogonalize(v, sim);
    sim.push_back(v.normalized());
  }

  // Identity: smooth Legendre candidates over the surface parameters, each with
  // a prior scale; the 63 kept modes are the combinations best seen through the
  // landmarks from a few head orientations.
  std::vector<Eigen::VectorXd> pool;
  std::vector<double> scale;
  const double rms_scale = std::sqrt(static_cast<double>(n));
  for (int degree = 0; degree <= 10; ++degree)
    for (int p = degree; p >= 0; --p) {
      const int q = degree - p;
      for (int axis = 0; axis < 3; ++axis) {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(3 * n);
        for (int k = 0; k < n; ++k)
          v(3 * k + axis) = legendre(p, us[static_cast<std::size_t>(k)]) * legendre(q, vs[static_cast<std::size_t>(k)]);
        const double before = v.norm();
        std::vector<Eigen::VectorXd> all = sim;
        all.insert(all.end(), pool.begin(), pool.end());
        if (orthogonalize(v, all) < 1e-3 * before) continue;
        pool.push_back(v.normalized());
        // depth varies less than width and height in scanned faces
        scale.push_back((axis == 2 ? 1.5 : 3.0) / (1.0 + 0.35 * std::max(degree - 1, 0)) * rms_scale);
      }
    }
  const int nl = static_cast<int>(model.landmark_vertices.size());
  const int np = static_cast<int>(pool.size());
  const Vec3 views[5] = {Vec3::Zero(), Vec3(0.0, deg(15.0), 0.0), Vec3(0.0, deg(-15.0), 0.0), Vec3(deg(8.0), 0.0, 0.0),
                         Vec3(deg(-8.0), 0.0, 0.0)};
  // Landmark motion per pool vector, and per head pose parameter, in each view.
  std::vector<Eigen::Matrix<double, 2, 3>> motion(static_cast<std::size_t>(5 * nl));
  Eigen::MatrixXd posed = Eigen::MatrixXd::Zero(10 * nl, 30);
  for (int view = 0; view < 5; ++view) {
    const Mat3 R = rodrigues(views[view]);
    for (int l = 0; l < nl; ++l) {
      const Vec3 v = model.mean_shape.segment<3>(3 * model.landmark_vertices[static_cast<std::size_t>(l)]);
      const Vec3 x = R * v + pose.translation;
      Eigen::Matrix<double, 2, 3> d;
      d << 1.0 / x.z(), 0.0, -x.x() / (x.z() * x.z()), 0.0, 1.0 / x.z(), -x.y() / (x.z() * x.z());
      d *= cam.focal;
      const int row = 2 * (view * nl + l);
      posed.block<2, 3>(row, 6 * view) = d * rotated_point_jacobian(views[view], v);
      posed.block<2, 3>(row, 6 * view + 3) = d;
      motion[static_cast<std::size_t>(view * nl + l)] = d * R;
    }
  }
  auto landmark_motion = [&](const Eigen::VectorXd& field) {
    Eigen::VectorXd out(10 * nl);
    for (int view = 0; view < 5; ++view)
      for (int l = 0; l < nl; ++l)
        out.segment<2>(2 * (view * nl + l)) =
            motion[static_cast<std::size_t>(view * nl + l)] *
            field.segment<3>(3 * model.landmark_vertices[static_cast<std::size_t>(l)]);
    return out;
  };
  Eigen::MatrixXd seen(10 * nl, np);
  for (int c = 0; c < np; ++c) seen.col(c) = landmark_motion(pool[static_cast<std::size_t>(c)]);
  // Keep only combinations whose landmark motion no head pose change can
  // explain, then take those with the most landmark motion per unit of
  // surface motion. Each mode gets the candidates' spread along it.
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(posed);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(10 * nl, 30);
  const Eigen::JacobiSVD<Eigen::MatrixXd> pose_part(q.transpose() * seen, Eigen::ComputeFullV);
  const Eigen::MatrixXd free = pose_part.matrixV().rightCols(np - pose_part.rank());
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(seen * free, Eigen::ComputeThinV);
  if (svd.rank() < 63) throw Error("reference model: could not build 63 identity modes");
  const Eigen::MatrixXd weights = free * svd.matrixV().leftCols(63);
  const Eigen::VectorXd spread = Eigen::Map<const Eigen::VectorXd>(scale.data(), np);
  model.identity_basis = Eigen::MatrixXd::Zero(3 * n, 63);
  for (int m = 0; m < 63; ++m) {
    const double amplitude = weights.col(m).cwiseProduct(spread).norm() * std::pow(svd.singularValues()(m) / svd.singularValues()(0), 1.0);
    for (int c = 0; c < np; ++c) model.identity_basis.col(m) += pool[static_cast<std::size_t>(c)] * (amplitude * weights(c, m));
  }
  std::vector<Eigen::VectorXd> kept;
  for (int m = 0; m < 63; ++m) {
    Eigen::VectorXd v = model.identity_basis.col(m);
    orthogonalize(v, kept);
    kept.push_back(v.normalized());
  }

  // Expression: localized motions, kept clear of the identity span.
  std::vector<Eigen::VectorXd> expr_candidates(6, Eigen::VectorXd::Zero(3 * n));
  for (int k = 0; k < n; ++k) {
    const Vec3 p = model.mean_shape.segment<3>(3 * k);
    const double x = p.x(), y = p.y();
    const double side = x < 0.0 ? -1.0 : 1.0;
    expr_candidates[0].segment<3>(3 * k) = Vec3(0.0, 6.0, 0.0) * gauss(x, y, 0.0, 75.0, 30.0, 18.0);
    const double smile = gauss(std::abs(x), y, 25.0, 45.0, 10.0, 10.0);
    expr_candidates[1].segment<3>(3 * k) = Vec3(5.0 * side, -2.0, 0.0) * smile;
    expr_candidates[2].segment<3>(3 * k) = Vec3(0.0, -5.0, 0.0) * gauss(x, y, 0.0, -45.0, 40.0, 12.0);
    const double puff = gauss(std::abs(x), y, 48.0, 25.0, 15.0, 18.0);
    expr_candidates[3].segment<3>(3 * k) = Vec3(4.0 * side, 0.0, -2.0) * puff;
    const double lips = gauss(x, y, 0.0, 45.0, 14.0, 9.0);
    expr_candidates[4].segment<3>(3 * k) = Vec3(-0.15 * x, 0.0, -5.0) * lips;
    const double eyes = gauss(std::abs(x), y, 28.0, -18.0, 9.0, 6.0);
    expr_candidates[5].segment<3>(3 * k) = Vec3(0.0, 3.0, -1.0) * eyes;
  }
  // Each candidate loses the smallest pool combination that cancels the part
  // of its landmark motion a head pose change could explain.
  const Eigen::MatrixXd pose_seen = q.transpose() * seen;
  const auto pose_solve = pose_seen.completeOrthogonalDecomposition();
  std::vector<Eigen::VectorXd> span = kept;
  model.expression_basis.resize(3 * n, 6);
  for (int m = 0; m < 6; ++m) {
    Eigen::VectorXd v = expr_candidates[static_cast<std::size_t>(m)];
    const double peak_rms = v.norm() / rms_scale;
    const Eigen::VectorXd c = pose_solve.solve(q.transpose() * landmark_motion(v));
    for (int p = 0; p < np; ++p) v -= pool[static_cast<std::size_t>(p)] * c(p);
    orthogonalize(v, span);
    span.push_back(v.normalized());
    model.expression_basis.col(m) = v.normalized() * std::max(peak_rms, 0.5) * rms_scale;
  }

  // Reshape: lower face widens, chin lengthens slightly.
  model.reshape_basis.resize(3 * n);
  for (int k = 0; k < n; ++k) {
    const Vec3 p = model.mean_shape.segment<3>(3 * k);
    const double s = 1.0 / (1.0 + std::exp(-p.y() / 18.0));
    model.reshape_basis.segment<3>(3 * k) = Vec3(0.35 * p.x() * s, 0.08 * std::max(p.y(), 0.0) * s, 0.0);
  }

  double ymin = 1e300, ymax = -1e300;
  for (int k = 0; k < n; ++k) {
    ymin = std::min(ymin, model.mean_shape(3 * k + 1));
    ymax = std::max(ymax, model.mean_shape(3 * k + 1));
  }
  model.face_length = ymax - ymin;
  model.topology = std::move(topology);
  model.validate();
  return model;
}

// --- Scenarios -----------------------------------------------------------------------

void SyntheticScenario::validate() const {
  if (!model) throw ArgumentError("scenario: no model");
  if (poses.empty()) throw ArgumentError("scenario: frame count must be at least 1");
  if (betas.size() != poses.size()) throw ArgumentError("scenario: one expression per frame required");
  if (alpha.alpha.size() != model->identity_count()) throw ArgumentError("scenario: identity size mismatch");
  if (!(landmark_jitter >= 0.0)) throw ArgumentError("scenario: jitter must be non-negative");
  camera.validate();
}

SyntheticScenario make_scenario(std::shared_ptr<const FaceModel> model, const ScenarioOptions& options) {
  if (options.frames < 1) throw ArgumentError("scenario: frame count must be at least 1");
  SyntheticScenario sc;
  sc.model = model;
  sc.camera = reference_camera();
  sc.seed = options.seed;
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  sc.alpha.alpha.resize(model->identity_count());
  for (int i = 0; i < model->identity_count(); ++i) sc.alpha.alpha(i) = options.alpha_scale * normal(rng);

  const double phase[3] = {normal(rng), normal(rng), normal(rng)};
  Eigen::VectorXd freq(model->expression_count()), offs(model->expression_count());
  for (int e = 0; e < model->expression_count(); ++e) {
    freq(e) = 0.5 + 0.25 * e;
    offs(e) = normal(rng);
  }
  const int n = options.frames;
  for (int f = 0; f < n; ++f) {
    const double s = n > 1 ? static_cast<double>(f) / (n - 1) : 0.0;
    RigidPose p = reference_pose();
    const Vec3 euler(deg(options.pitch_degrees) * std::sin(2.0 * std::numbers::pi * 0.7 * s + phase[0]),
                     deg(options.yaw_degrees) * std::sin(2.0 * std::numbers::pi * 0.9 * s + phase[1]),
                     deg(options.roll_degrees) * std::sin(2.0 * std::numbers::pi * 0.5 * s + phase[2]));
    const Mat3 R = (Eigen::AngleAxisd(euler.y(), Vec3::UnitY()) * Eigen::AngleAxisd(euler.x(), Vec3::UnitX()) *
                    Eigen::AngleAxisd(euler.z(), Vec3::UnitZ()))
                       .toRotationMatrix();
    const Eigen::AngleAxisd aa(R);
    p.rotation = aa.angle() * aa.axis();
    p.translation += Vec3(8.0 * std::sin(2.0 * std::numbers::pi * 0.6 * s), 5.0 * std::cos(2.0 * std::numbers::pi * 0.4 * s),
                          15.0 * std::sin(2.0 * std::numbers::pi * 0.3 * s));
    sc.poses.push_back(p);
    ExprCoeffs b = ExprCoeffs::neutral(model->expression_count());
    for (int e = 0; e < model->expression_count(); ++e)
      b.beta(e) = options.expression_scale * std::sin(2.0 * std::numbers::pi * freq(e) * s + offs(e));
    sc.betas.push_back(b);
  }
  return sc;
}

// --- Generation ------------------------------------------------------------------------

cv::Mat render_frame(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam) {
  cv::Mat img(cam.height, cam.width, CV_8UC3);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const bool dark = ((x / 16) + (y / 16)) % 2 == 0;
      img.at<cv::Vec3b>(y, x) = dark ? cv::Vec3b(150, 110, 70) : cv::Vec3b(190, 170, 150);
    }
  const RasterBuffers raster(mesh, pose, cam, cam.width, cam.height);
  const Mat3 R = pose.rotation_matrix();
  const Vec3 light = Vec3(-0.3, -0.4, -1.0).normalized();
  std::vector<double> shade(mesh.topology->triangles.size());
  for (std::size_t t = 0; t < shade.size(); ++t) {
    const auto& tri = mesh.topology->triangles[t];
    const Vec3 a = R * mesh.vertices.col(tri[0]), b = R * mesh.vertices.col(tri[1]), c = R * mesh.vertices.col(tri[2]);
    const Vec3 nrm = (b - a).cross(c - a).normalized();
    shade[t] = 0.6 + 0.4 * std::max(0.0, nrm.dot(light));
  }
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const int t = raster.triangle_at(x, y);
      if (t < 0) continue;
      const double s = shade[static_cast<std::size_t>(t)];
      img.at<cv::Vec3b>(y, x) = cv::Vec3b(static_cast<uchar>(std::lround(90 * s)), static_cast<uchar>(std::lround(120 * s)),
                                          static_cast<uchar>(std::lround(215 * s)));
    }
  return img;
}

FlowField exact_flow(const FaceMesh& from_mesh, const RigidPose& from_pose, const FaceMesh& to_mesh,
                     const RigidPose& to_pose, const Camera& cam) {
  FlowField flow(cam.width, cam.height);
  const RasterBuffers raster(from_mesh, from_pose, cam, cam.width, cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      if (!raster.covered(x, y)) continue;
      const SurfaceAnchor a = raster.anchor_at(x, y);
      flow.set(x, y, project_point(surface_point(to_mesh, a), to_pose, cam) -
                         project_point(surface_point(from_mesh, a), from_pose, cam));
    }
  return flow;
}

SyntheticSequence generate(const SyntheticScenario& scenario, bool render) {
  scenario.validate();
  const FaceModel& model = *scenario.model;
  const Camera& cam = scenario.camera;
  SyntheticSequence seq;
  std::mt19937_64 rng(scenario.seed);
  std::normal_distribution<double> jitter(0.0, scenario.landmark_jitter > 0.0 ? scenario.landmark_jitter : 1.0);
  for (int f = 0; f < scenario.frame_count(); ++f) {
    const std::size_t fi = static_cast<std::size_t>(f);
    seq.meshes.push_back(assemble(model, scenario.alpha, scenario.betas[fi]));
    const FaceMesh& mesh = seq.meshes.back();
    FrameObservation obs;
    obs.index = f;
    for (int v : model.landmark_vertices) {
      Vec2 p = project_point(mesh.vertices.col(v), scenario.poses[fi], cam, v);
      if (scenario.landmark_jitter > 0.0) p += Vec2(jitter(rng), jitter(rng));
      obs.landmarks.push_back(p);
    }
    if (f > 0) {
      obs.flow = exact_flow(seq.meshes[fi - 1], scenario.poses[fi - 1], mesh, scenario.poses[fi], cam);
      for (const auto& patch : scenario.flow_patches) {
        if (patch.frame != f) continue;
        for (int y = std::max(patch.y, 0); y < std::min(patch.y + patch.height, cam.height); ++y)
          for (int x = std::max(patch.x, 0); x < std::min(patch.x + patch.width, cam.width); ++x) obs.flow->set(x, y, patch.motion);
      }
    }
    seq.observations.push_back(std::move(obs));
    if (render) seq.frames.push_back(render_frame(mesh, scenario.poses[fi], cam));
  }
  return seq;
}

// --- Audits ----------------------------------------------------------------------------

std::vector<std::uint8_t> face_mask(const cv::Mat& image) {
  if (image.type() != CV_8UC3) throw ArgumentError("face_mask: expected a BGR image");
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(image.rows) * image.cols, 0);
  for (int y = 0; y < image.rows; ++y)
    for (int x = 0; x < image.cols; ++x) {
      const cv::Vec3b& px = image.at<cv::Vec3b>(y, x);
      mask[static_cast<std::size_t>(y) * image.cols + x] = (static_cast<int>(px[2]) - static_cast<int>(px[1]) > 10) ? 1 : 0;
    }
  return mask;
}

std::vector<Vec2> face_boundary(const cv::Mat& image) {
  const auto mask = face_mask(image);
  std::vector<Vec2> out;
  for (const auto& p : trace_outer_boundary(
           [&](int x, int y) { return mask[static_cast<std::size_t>(y) * image.cols + x] != 0; }, image.cols, image.rows))
    out.emplace_back(p.x(), p.y());
  return out;
}

PoseError pose_error(const RigidPose& estimate, const RigidPose& truth, double face_length) {
  const Mat3 rel = estimate.rotation_matrix() * truth.rotation_matrix().transpose();
  const Eigen::AngleAxisd aa(rel);
  PoseError e;
  e.degrees = std::abs(aa.angle()) * 180.0 / std::numbers::pi;
  e.translation = (estimate.translation - truth.translation).norm() / face_length;
  return e;
}

double mesh_rmse(const FaceMesh& estimate, const FaceMesh& truth) {
  if (estimate.vertex_count() != truth.vertex_count() || truth.vertex_count() == 0)
    throw DimensionError("mesh_rmse: vertex counts differ");
  const double rms = std::sqrt((estimate.vertices - truth.vertices).colwise().squaredNorm().mean());
  const Vec3 lo = truth.vertices.rowwise().minCoeff(), hi = truth.vertices.rowwise().maxCoeff();
  return rms / (hi - lo).norm();
}

double second_difference_norm(const std::vector<RigidPose>& poses, double face_length) {
  double sum = 0.0;
  for (std::size_t i = 1; i + 1 < poses.size(); ++i) {
    sum += (poses[i + 1].rotation - 2.0 * poses[i].rotation + poses[i - 1].rotation).squaredNorm();
    sum += ((poses[i + 1].translation - 2.0 * poses[i].translation + poses[i - 1].translation) / face_length).squaredNorm();
  }
  return std::sqrt(sum);
}

void write_sequence(const SyntheticSequence& sequence, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "flow");
  char name[64];
  for (std::size_t f = 0; f < sequence.frames.size(); ++f) {
    std::snprintf(name, sizeof(name), "frame_%06zu.png", f);
    if (!cv::imwrite((dir / "frames" / name).string(), sequence.frames[f]))
      throw Error("cannot write " + (dir / "frames" / name).string());
  }
  std::vector<std::vector<Vec2>> landmarks;
  for (const auto& obs : sequence.observations) {
    landmarks.push_back(obs.landmarks);
    if (!obs.flow) continue;
    std::snprintf(name, sizeof(name), "flow_%06d.flo", obs.index);
    write_flo(*obs.flow, dir / "flow" / name);
  }
  write_landmarks(landmarks, dir / "landmarks.jsonl");
}

}  // namespace preshape
