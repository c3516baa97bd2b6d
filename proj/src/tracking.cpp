#include "preshape/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "preshape/errors.hpp"

namespace preshape {

namespace {

using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat3X = Eigen::Matrix<double, 3, Eigen::Dynamic>;

constexpr double kPriorEps = 1e-12;
const Vec3 kForwardAxis(0.0, 0.0, -1.0);

// A point on the model surface as a fixed combination of up to three vertices.
struct ModelPoint {
  Vec3 mean;
  Mat3X identity;
  Mat3X expression;

  Vec3 at(const Eigen::VectorXd& alpha, const Eigen::VectorXd& beta) const {
    return mean + identity * alpha + expression * beta;
  }
};

ModelPoint vertex_point(const FaceModel& model, int v) {
  const Eigen::Index row = 3 * static_cast<Eigen::Index>(v);
  return {model.mean_shape.segment<3>(row), model.identity_basis.middleRows<3>(row),
          model.expression_basis.middleRows<3>(row)};
}

ModelPoint anchor_point(const FaceModel& model, const SurfaceAnchor& anchor) {
  ModelPoint p{Vec3::Zero(), Mat3X::Zero(3, model.identity_count()), Mat3X::Zero(3, model.expression_count())};
  const auto& tri = model.topology->triangles[static_cast<std::size_t>(anchor.triangle)];
  for (int k = 0; k < 3; ++k) {
    const ModelPoint v = vertex_point(model, tri[static_cast<std::size_t>(k)]);
    p.mean += anchor.barycentric(k) * v.mean;
    p.identity += anchor.barycentric(k) * v.identity;
    p.expression += anchor.barycentric(k) * v.expression;
  }
  return p;
}

struct Projection {
  Vec2 p;
  Mat23 d_point;  // w.r.t. the model-frame point
  Mat23 d_rot;
  Mat23 d_trans;
};

bool project_jac(const Vec3& v, const RigidPose& pose, const Mat3& R, const Camera& cam, Projection& out,
                 bool with_jacobian) {
  const Vec3 x = R * v + pose.translation;
  if (!(x.z() > 0.0)) return false;
  const double iz = 1.0 / x.z();
  out.p = Vec2(cam.focal * x.x() * iz + cam.principal_point.x(), cam.focal * x.y() * iz + cam.principal_point.y());
  if (with_jacobian) {
    Mat23 dx;
    dx << cam.focal * iz, 0.0, -cam.focal * x.x() * iz * iz, 0.0, cam.focal * iz, -cam.focal * x.y() * iz * iz;
    out.d_trans = dx;
    out.d_point = dx * R;
    out.d_rot = dx * rotated_point_jacobian(pose.rotation, v);
  }
  return true;
}

// Which unknowns of the current problem a frame's parameters map to; -1 = fixed.
struct Columns {
  int pose = -1;
  int alpha = -1;
  int beta = -1;
  int prev_beta = -1;
};

class Rows {
 public:
  Rows(std::vector<double>& values, Triplets* triplets) : values_(values), triplets_(triplets) {}

  int add(double value) {
    values_.push_back(value);
    return static_cast<int>(values_.size()) - 1;
  }
  bool jacobian() const { return triplets_ != nullptr; }

  template <typename Derived>
  void block(int row, int col, const Eigen::MatrixBase<Derived>& m) {
    if (!triplets_ || col < 0) return;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        if (m(i, j) != 0.0) triplets_->emplace_back(row + static_cast<int>(i), col + static_cast<int>(j), m(i, j));
  }

 private:
  std::vector<double>& values_;
  Triplets* triplets_;
};

enum class Phase { Pose, Identity, Expression };

struct FrameParams {
  RigidPose pose;
  Eigen::VectorXd alpha;
  Eigen::VectorXd beta;
  Eigen::VectorXd prev_beta;  // previous frame's beta (fixed or variable)
};

// Appends a 2-row residual scale * (P(point) - target) and its derivatives.
bool add_point_rows(Rows& rows, const ModelPoint& mp, const FrameParams& fp, const Mat3& R, const Camera& cam,
                    const Vec2& target, double scale, const Columns& cols) {
  Projection pr;
  if (!project_jac(mp.at(fp.alpha, fp.beta), fp.pose, R, cam, pr, rows.jacobian())) return false;
  const Vec2 r = scale * (pr.p - target);
  const int row = rows.add(r.x());
  rows.add(r.y());
  if (rows.jacobian()) {
    if (cols.pose >= 0) {
      rows.block(row, cols.pose, scale * pr.d_rot);
      rows.block(row, cols.pose + 3, scale * pr.d_trans);
    }
    if (cols.alpha >= 0) rows.block(row, cols.alpha, scale * pr.d_point * mp.identity);
    if (cols.beta >= 0) rows.block(row, cols.beta, scale * pr.d_point * mp.expression);
  }
  return true;
}

void add_prior_row(Rows& rows, const Eigen::VectorXd& coeffs, double w_prior, int col) {
  // r = sqrt(w) c / |c|^(1/2), so |r|^2 = w |c| (origin smoothed); the
  // Gauss-Newton curvature across c is then exact.
  if (coeffs.size() == 0) return;
  const double s = coeffs.squaredNorm() + kPriorEps;
  const double sw = std::sqrt(w_prior);
  const double scale = sw * std::pow(s, -0.25);
  const int first = rows.add(scale * coeffs(0));
  for (Eigen::Index i = 1; i < coeffs.size(); ++i) rows.add(scale * coeffs(i));
  if (rows.jacobian() && col >= 0)
    rows.block(first, col,
               scale * Eigen::MatrixXd::Identity(coeffs.size(), coeffs.size()) - (0.5 * scale / s) * coeffs * coeffs.transpose());
}

// All residual rows of one frame in one phase.
bool frame_rows(Rows& rows, const FaceModel& model, const Camera& cam, const EnergyWeights& w, Phase phase,
                const FrameSetup& setup, const FrameParams& fp, const Columns& cols) {
  const PhaseWeights& pw = phase == Phase::Pose ? w.pose : (phase == Phase::Identity ? w.identity : w.expression);
  const Mat3 R = fp.pose.rotation_matrix();

  const double s_land = std::sqrt(pw.landmark);
  for (int i = 0; i < model.landmark_count(); ++i) {
    const ModelPoint mp = vertex_point(model, model.landmark_vertices[static_cast<std::size_t>(i)]);
    if (!add_point_rows(rows, mp, fp, R, cam, setup.obs->landmarks[static_cast<std::size_t>(i)], s_land, cols))
      return false;
  }

  if (phase != Phase::Pose && !setup.contour_anchors.empty()) {
    const double s_contour = std::sqrt(pw.landmark * w.sigma_align);
    std::size_t c = 0;
    for (int i = 0; i < model.landmark_count(); ++i) {
      if (!model.contour_landmark[static_cast<std::size_t>(i)]) continue;
      const ModelPoint mp = anchor_point(model, setup.contour_anchors[c++]);
      if (!add_point_rows(rows, mp, fp, R, cam, setup.obs->landmarks[static_cast<std::size_t>(i)], s_contour, cols))
        return false;
    }
  }

  if (setup.prev) {
    const RigidPose& prev_pose = setup.prev->pose;
    const double s_temp = std::sqrt(pw.temporal);
    const double s_trans = std::sqrt(pw.temporal * w.resolved_gamma(model));
    for (int k = 0; k < 3; ++k) {
      const int row = rows.add(s_temp * (fp.pose.rotation(k) - prev_pose.rotation(k)));
      if (rows.jacobian() && cols.pose >= 0) rows.block(row, cols.pose + k, Eigen::Matrix<double, 1, 1>(s_temp));
    }
    for (int k = 0; k < 3; ++k) {
      const int row = rows.add(s_trans * (fp.pose.translation(k) - prev_pose.translation(k)));
      if (rows.jacobian() && cols.pose >= 0) rows.block(row, cols.pose + 3 + k, Eigen::Matrix<double, 1, 1>(s_trans));
    }
    if (phase != Phase::Pose) {
      const double s_expr = std::sqrt(pw.temporal * w.sigma_temp);
      for (Eigen::Index k = 0; k < fp.beta.size(); ++k) {
        const int row = rows.add(s_expr * (fp.beta(k) - fp.prev_beta(k)));
        if (rows.jacobian()) {
          if (cols.beta >= 0)
            rows.block(row, cols.beta + static_cast<int>(k), Eigen::Matrix<double, 1, 1>(s_expr));
          if (cols.prev_beta >= 0)
            rows.block(row, cols.prev_beta + static_cast<int>(k), Eigen::Matrix<double, 1, 1>(-s_expr));
        }
      }
    }

    if (!setup.flow.empty()) {
      const double s_flow = std::sqrt(pw.optic);
      const Mat3 R_prev = prev_pose.rotation_matrix();
      for (const FlowSample& sample : setup.flow) {
        const ModelPoint mp = vertex_point(model, sample.vertex);
        Projection now, before;
        if (!project_jac(mp.at(fp.alpha, fp.beta), fp.pose, R, cam, now, rows.jacobian())) return false;
        if (!project_jac(mp.at(fp.alpha, fp.prev_beta), prev_pose, R_prev, cam, before, rows.jacobian())) return false;
        const Vec2 r = s_flow * (now.p - before.p - sample.motion);
        const int row = rows.add(r.x());
        rows.add(r.y());
        if (rows.jacobian()) {
          if (cols.pose >= 0) {
            rows.block(row, cols.pose, s_flow * now.d_rot);
            rows.block(row, cols.pose + 3, s_flow * now.d_trans);
          }
          if (cols.alpha >= 0)
            rows.block(row, cols.alpha, s_flow * (now.d_point - before.d_point) * mp.identity);
          if (cols.beta >= 0) rows.block(row, cols.beta, s_flow * now.d_point * mp.expression);
          if (cols.prev_beta >= 0) rows.block(row, cols.prev_beta, -s_flow * before.d_point * mp.expression);
        }
      }
    }
  }

  if (phase != Phase::Pose) {
    add_prior_row(rows, fp.alpha, w.w_prior, cols.alpha);
    add_prior_row(rows, fp.beta, w.w_prior, cols.beta);
  }
  return true;
}

bool finish(const std::vector<double>& values, const Triplets& triplets, int cols, Eigen::VectorXd& residuals,
            SparseMatrix* jacobian) {
  residuals = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
  if (jacobian) {
    jacobian->resize(static_cast<Eigen::Index>(values.size()), cols);
    jacobian->setFromTriplets(triplets.begin(), triplets.end());
  }
  return true;
}

void check_observation(const FaceModel& model, const FrameObservation& obs) {
  if (static_cast<int>(obs.landmarks.size()) != model.landmark_count())
    throw DimensionError("frame " + std::to_string(obs.index) + ": expected " +
                         std::to_string(model.landmark_count()) + " landmarks, got " +
                         std::to_string(obs.landmarks.size()));
}

std::vector<FlowSample> flow_for(const FaceModel& model, const ShapeCoeffs& shape, const FrameObservation& obs,
                                 const PreviousFrame* prev, const Camera& cam, double optic_weight,
                                 const TrackingOptions& options, int* rejected) {
  if (!prev || !obs.flow || optic_weight <= 0.0) return {};
  auto samples = select_flow_samples(model, shape, *prev, cam, *obs.flow, options);
  if (!options.filter_flow) return samples;
  auto kept = filter_flow_outliers(samples, options.filter);
  if (rejected) *rejected = static_cast<int>(samples.size() - kept.size());
  return kept;
}

}  // namespace

// --- Landmark file ---------------------------------------------------------------

std::vector<std::vector<Vec2>> read_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open landmarks file " + path.string());
  std::vector<std::pair<int, std::vector<Vec2>>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("landmarks file " + path.string() + ", line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("frame") || !j.contains("points"))
      throw LoadError("landmarks file " + path.string() + ", line " + std::to_string(line_no) +
                      ": expected {\"frame\", \"points\"}");
    const int frame = j["frame"].get<int>();
    if (j["points"].is_null())
      throw LoadError("landmarks file " + path.string() + ": frame " + std::to_string(frame) + " has no detected face");
    std::vector<Vec2> pts;
    for (const auto& p : j["points"]) {
      if (!p.is_array() || p.size() != 2)
        throw LoadError("landmarks file " + path.string() + ", line " + std::to_string(line_no) + ": bad point");
      pts.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
    rows.emplace_back(frame, std::move(pts));
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::vector<Vec2>> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].first != static_cast<int>(i))
      throw LoadError("landmarks file " + path.string() + ": frames must be numbered 0..N-1, missing frame " +
                      std::to_string(i));
    out.push_back(std::move(rows[i].second));
  }
  return out;
}

void write_landmarks(const std::vector<std::vector<Vec2>>& frames, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write landmarks file " + path.string());
  for (std::size_t f = 0; f < frames.size(); ++f) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : frames[f]) pts.push_back({p.x(), p.y()});
    out << nlohmann::json{{"frame", f}, {"points", pts}}.dump() << '\n';
  }
}

// --- Weights -----------------------------------------------------------------------

void EnergyWeights::validate() const {
  for (double v : {sigma_align, w_prior, sigma_temp, pose.landmark, pose.temporal, pose.optic, identity.landmark,
                   identity.temporal, identity.optic, expression.landmark, expression.temporal, expression.optic})
    if (!(v >= 0.0) || !std::isfinite(v)) throw ArgumentError("energy weights must be finite and non-negative");
  if (!std::isfinite(gamma)) throw ArgumentError("gamma must be finite");
}

EnergyWeights EnergyWeights::scaled(double factor) const {
  // sigma_align and sigma_temp are ratios inside a term, so they stay put.
  EnergyWeights out = *this;
  out.w_prior *= factor;
  for (PhaseWeights* p : {&out.pose, &out.identity, &out.expression}) {
    p->landmark *= factor;
    p->temporal *= factor;
    p->optic *= factor;
  }
  return out;
}

// --- Energy terms --------------------------------------------------------------------

Eigen::VectorXd landmark_residuals(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr,
                                   const RigidPose& pose, const Camera& cam, const FrameObservation& obs) {
  check_observation(model, obs);
  Eigen::VectorXd r(2 * model.landmark_count());
  for (int i = 0; i < model.landmark_count(); ++i) {
    const int v = model.landmark_vertices[static_cast<std::size_t>(i)];
    r.segment<2>(2 * i) =
        project_point(model_vertex(model, v, shape.alpha, expr.beta), pose, cam, v) - obs.landmarks[static_cast<std::size_t>(i)];
  }
  return r;
}

std::vector<SurfaceAnchor> contour_correspondences(const FaceModel& model, const FrameObservation& obs,
                                                   const Silhouette& silhouette) {
  if (silhouette.empty()) throw GeometryError("contour correspondences: empty silhouette");
  check_observation(model, obs);
  std::vector<SurfaceAnchor> anchors;
  for (int i = 0; i < model.landmark_count(); ++i) {
    if (!model.contour_landmark[static_cast<std::size_t>(i)]) continue;
    const Vec2& lm = obs.landmarks[static_cast<std::size_t>(i)];
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < silhouette.size(); ++k) {
      const double d = (silhouette.points[k] - lm).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    anchors.push_back(silhouette.anchors[best]);
  }
  return anchors;
}

Eigen::VectorXd contour_residuals(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr,
                                  const RigidPose& pose, const Camera& cam, const FrameObservation& obs,
                                  const Silhouette& silhouette) {
  const auto anchors = contour_correspondences(model, obs, silhouette);
  Eigen::VectorXd r(2 * static_cast<Eigen::Index>(anchors.size()));
  std::size_t c = 0;
  for (int i = 0; i < model.landmark_count(); ++i) {
    if (!model.contour_landmark[static_cast<std::size_t>(i)]) continue;
    const Vec3 p = anchor_point(model, anchors[c]).at(shape.alpha, expr.beta);
    r.segment<2>(2 * static_cast<Eigen::Index>(c)) = project_point(p, pose, cam) - obs.landmarks[static_cast<std::size_t>(i)];
    ++c;
  }
  return r;
}

double prior_energy(const ShapeCoeffs& shape, const ExprCoeffs& expr, double w_prior) {
  return w_prior * (shape.alpha.norm() + expr.beta.norm());
}

Eigen::VectorXd temporal_residuals(const RigidPose& pose, const RigidPose& prev_pose, const ExprCoeffs& expr,
                                   const ExprCoeffs& prev_expr, double gamma, double sigma_temp) {
  if (expr.beta.size() != prev_expr.beta.size()) throw DimensionError("expression sizes differ between frames");
  Eigen::VectorXd r(6 + expr.beta.size());
  r.head<3>() = pose.rotation - prev_pose.rotation;
  r.segment<3>(3) = std::sqrt(gamma) * (pose.translation - prev_pose.translation);
  r.tail(expr.beta.size()) = std::sqrt(sigma_temp) * (expr.beta - prev_expr.beta);
  return r;
}

std::vector<FlowSample> select_flow_samples(const FaceModel& model, const ShapeCoeffs& shape,
                                            const PreviousFrame& prev, const Camera& cam, const FlowField& flow,
                                            const TrackingOptions& options) {
  const FaceMesh mesh = assemble(model, shape, prev.expr);
  const RasterBuffers raster(mesh, prev.pose, cam, cam.width, cam.height);
  if (raster.empty()) return {};
  std::vector<Vec2> contour;
  for (const auto& px : trace_outer_boundary(raster)) contour.emplace_back(px.x(), px.y());
  if (contour.size() < 3) return {};
  Vec2 centroid = Vec2::Zero();
  for (const auto& p : contour) centroid += p;
  centroid /= static_cast<double>(contour.size());
  contour.push_back(contour.front());
  const ContourDistance dist(std::move(contour));

  const int bins = std::max(options.flow_bins, 1);
  std::vector<int> best_vertex(static_cast<std::size_t>(bins), -1);
  std::vector<double> best_d(static_cast<std::size_t>(bins), std::numeric_limits<double>::infinity());
  std::vector<Vec2> best_p(static_cast<std::size_t>(bins));
  const Mat3 R = prev.pose.rotation_matrix();
  for (int v = 0; v < mesh.vertex_count(); ++v) {
    const Vec3 x = R * mesh.vertices.col(v) + prev.pose.translation;
    const Vec2 p(cam.focal * x.x() / x.z() + cam.principal_point.x(), cam.focal * x.y() / x.z() + cam.principal_point.y());
    const int px = static_cast<int>(std::lround(p.x())), py = static_cast<int>(std::lround(p.y()));
    if (!raster.covered(px, py) || p.x() < 0 || p.y() < 0 || p.x() > flow.width - 1 || p.y() > flow.height - 1)
      continue;
    if (x.z() > raster.depth_at(px, py) * 1.005) continue;  // hidden
    const double d = dist.distance(p);
    if (d < options.flow_band_inner || d > options.flow_band_outer) continue;
    const double angle = std::atan2(p.y() - centroid.y(), p.x() - centroid.x());
    int bin = static_cast<int>(std::floor((angle + std::numbers::pi) / (2.0 * std::numbers::pi) * bins));
    bin = std::clamp(bin, 0, bins - 1);
    if (d < best_d[static_cast<std::size_t>(bin)]) {
      best_d[static_cast<std::size_t>(bin)] = d;
      best_vertex[static_cast<std::size_t>(bin)] = v;
      best_p[static_cast<std::size_t>(bin)] = p;
    }
  }
  std::vector<FlowSample> samples;
  for (int b = 0; b < bins; ++b) {
    if (best_vertex[static_cast<std::size_t>(b)] < 0) continue;
    samples.push_back({best_vertex[static_cast<std::size_t>(b)], sample_flow(flow, best_p[static_cast<std::size_t>(b)], options.sampling)});
  }
  return samples;
}

Eigen::VectorXd flow_residuals(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr,
                               const RigidPose& pose, const PreviousFrame& prev, const Camera& cam,
                               const FlowField& flow, const TrackingOptions& options) {
  auto samples = select_flow_samples(model, shape, prev, cam, flow, options);
  if (options.filter_flow) samples = filter_flow_outliers(samples, options.filter);
  Eigen::VectorXd r(2 * static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int v = samples[i].vertex;
    const Vec2 now = project_point(model_vertex(model, v, shape.alpha, expr.beta), pose, cam, v);
    const Vec2 before = project_point(model_vertex(model, v, shape.alpha, prev.expr.beta), prev.pose, cam, v);
    r.segment<2>(2 * static_cast<Eigen::Index>(i)) = now - before - samples[i].motion;
  }
  return r;
}

// --- Problems ----------------------------------------------------------------------------

PoseProblem::PoseProblem(const FaceModel& model, const Camera& cam, const EnergyWeights& weights, FrameSetup setup,
                         Eigen::VectorXd alpha, Eigen::VectorXd beta)
    : model_(model), cam_(cam), weights_(weights), setup_(std::move(setup)), alpha_(std::move(alpha)), beta_(std::move(beta)) {}

Eigen::VectorXd PoseProblem::pack(const RigidPose& pose) {
  Eigen::VectorXd x(6);
  x << pose.rotation, pose.translation;
  return x;
}

RigidPose PoseProblem::unpack(const Eigen::VectorXd& x) {
  RigidPose pose;
  pose.rotation = x.head<3>();
  pose.translation = x.tail<3>();
  return pose;
}

bool PoseProblem::evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& residuals, SparseMatrix* jacobian) const {
  std::vector<double> values;
  Triplets triplets;
  Rows rows(values, jacobian ? &triplets : nullptr);
  FrameParams fp{unpack(x), alpha_, beta_, setup_.prev ? setup_.prev->expr.beta : beta_};
  Columns cols;
  cols.pose = 0;
  if (!frame_rows(rows, model_, cam_, weights_, Phase::Pose, setup_, fp, cols)) return false;
  return finish(values, triplets, 6, residuals, jacobian);
}

IdentityProblem::IdentityProblem(const FaceModel& model, const Camera& cam, const EnergyWeights& weights,
                                 std::vector<FrameSetup> frames)
    : model_(model), cam_(cam), weights_(weights), frames_(std::move(frames)) {}

int IdentityProblem::parameter_count() const {
  return model_.identity_count() + static_cast<int>(frames_.size()) * model_.expression_count();
}

bool IdentityProblem::evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& residuals, SparseMatrix* jacobian) const {
  const int ms = model_.identity_count();
  const int me = model_.expression_count();
  std::vector<double> values;
  Triplets triplets;
  Rows rows(values, jacobian ? &triplets : nullptr);
  const Eigen::VectorXd alpha = x.head(ms);
  for (std::size_t f = 0; f < frames_.size(); ++f) {
    const int beta_col = ms + static_cast<int>(f) * me;
    FrameParams fp;
    fp.pose = frames_[f].pose;
    fp.alpha = alpha;
    fp.beta = x.segment(beta_col, me);
    Columns cols;
    cols.alpha = 0;
    cols.beta = beta_col;
    if (f > 0 && frames_[f].prev) {
      fp.prev_beta = x.segment(beta_col - me, me);
      cols.prev_beta = beta_col - me;
    } else {
      fp.prev_beta = frames_[f].prev ? frames_[f].prev->expr.beta : fp.beta;
    }
    if (!frame_rows(rows, model_, cam_, weights_, Phase::Identity, frames_[f], fp, cols)) return false;
  }
  return finish(values, triplets, parameter_count(), residuals, jacobian);
}

ExpressionProblem::ExpressionProblem(const FaceModel& model, const Camera& cam, const EnergyWeights& weights,
                                     FrameSetup setup, Eigen::VectorXd alpha)
    : model_(model), cam_(cam), weights_(weights), setup_(std::move(setup)), alpha_(std::move(alpha)) {}

int ExpressionProblem::parameter_count() const { return model_.expression_count(); }

bool ExpressionProblem::evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& residuals, SparseMatrix* jacobian) const {
  std::vector<double> values;
  Triplets triplets;
  Rows rows(values, jacobian ? &triplets : nullptr);
  FrameParams fp{setup_.pose, alpha_, x, setup_.prev ? setup_.prev->expr.beta : x};
  Columns cols;
  cols.beta = 0;
  if (!frame_rows(rows, model_, cam_, weights_, Phase::Expression, setup_, fp, cols)) return false;
  return finish(values, triplets, parameter_count(), residuals, jacobian);
}

// --- Phases ----------------------------------------------------------------------------

RigidPose initial_pose(const FaceModel& model, const FrameObservation& obs, const Camera& cam) {
  check_observation(model, obs);
  const int nl = model.landmark_count();
  Vec2 img_c = Vec2::Zero();
  Vec2 mod_c = Vec2::Zero();
  double depth_c = 0.0;
  for (int i = 0; i < nl; ++i) {
    img_c += obs.landmarks[static_cast<std::size_t>(i)];
    const Vec3 v = model.mean_shape.segment<3>(3 * model.landmark_vertices[static_cast<std::size_t>(i)]);
    mod_c += v.head<2>();
    depth_c += v.z();
  }
  img_c /= nl;
  mod_c /= nl;
  depth_c /= nl;
  double img_s = 0.0, mod_s = 0.0;
  for (int i = 0; i < nl; ++i) {
    img_s += (obs.landmarks[static_cast<std::size_t>(i)] - img_c).squaredNorm();
    mod_s += (model.mean_shape.segment<2>(3 * model.landmark_vertices[static_cast<std::size_t>(i)]) - mod_c).squaredNorm();
  }
  const double z = cam.focal * std::sqrt(mod_s / std::max(img_s, 1e-12));
  RigidPose pose;
  const Vec2 xy = (img_c - cam.principal_point) * z / cam.focal - mod_c;
  pose.translation = Vec3(xy.x(), xy.y(), z - depth_c);
  return pose;
}

PoseEstimate estimate_pose(const FaceModel& model, const FrameObservation& obs, const PreviousFrame* prev,
                           const Camera& cam, const EnergyWeights& weights, const TrackingOptions& options,
                           const RigidPose& init, const ShapeCoeffs* shape) {
  check_observation(model, obs);
  const ShapeCoeffs alpha = shape ? *shape : ShapeCoeffs::zero(model.identity_count());
  const ExprCoeffs neutral = ExprCoeffs::neutral(model.expression_count());

  PoseEstimate out;
  FrameSetup setup;
  setup.obs = &obs;
  setup.pose = init;
  if (prev && (weights.pose.temporal > 0.0 || weights.pose.optic > 0.0)) {
    // Expressions are not estimated yet: the previous frame is taken neutral too.
    setup.prev = PreviousFrame{prev->pose, neutral};
    int rejected = 0;
    setup.flow = flow_for(model, alpha, obs, &*setup.prev, cam, weights.pose.optic, options, &rejected);
    out.flow_samples = static_cast<int>(setup.flow.size());
    out.flow_rejected = rejected;
  }
  PoseProblem problem(model, cam, weights, std::move(setup), alpha.alpha, neutral.beta);
  Eigen::VectorXd x = PoseProblem::pack(init);
  try {
    out.summary = solve_least_squares(problem, x, options.solver);
  } catch (const TrackingError&) {
    throw;
  } catch (const Error& e) {
    throw TrackingError(obs.index, std::string("pose: ") + e.what());
  }
  out.pose = PoseProblem::unpack(x);
  out.pose.canonicalize();
  return out;
}

double frontality_angle(const RigidPose& pose) {
  const Vec3 forward = pose.rotation_matrix() * kForwardAxis;
  return std::acos(std::clamp(forward.dot(Vec3(0.0, 0.0, -1.0)), -1.0, 1.0));
}

std::pair<int, int> select_representative_frames(std::span<const RigidPose> poses, int k) {
  if (poses.empty()) throw ArgumentError("select_representative_frames: empty sequence");
  const int n = static_cast<int>(poses.size());
  if (k < 1 || k > std::min(10, n)) throw ArgumentError("select_representative_frames: k must be in [1, min(10, frames)]");
  std::vector<double> angle(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) angle[static_cast<std::size_t>(i)] = frontality_angle(poses[static_cast<std::size_t>(i)]);
  int best = 0;
  double best_sum = std::numeric_limits<double>::infinity();
  for (int s = 0; s + k <= n; ++s) {
    double sum = 0.0;
    for (int i = s; i < s + k; ++i) sum += angle[static_cast<std::size_t>(i)];
    if (sum < best_sum - 1e-12) {
      best_sum = sum;
      best = s;
    }
  }
  return {best, best + k};
}

IdentityEstimate estimate_identity(const FaceModel& model, std::span<const FrameObservation> frames,
                                   std::span<const RigidPose> poses, const Camera& cam,
                                   const EnergyWeights& weights, const TrackingOptions& options) {
  if (frames.empty() || frames.size() != poses.size())
    throw ArgumentError("estimate_identity: need one pose per frame and at least one frame");
  if (options.identity_rounds < 1) throw ArgumentError("estimate_identity: identity_rounds must be >= 1");
  const int ms = model.identity_count();
  const int me = model.expression_count();
  const ShapeCoeffs alpha0 = ShapeCoeffs::zero(ms);
  const ExprCoeffs neutral = ExprCoeffs::neutral(me);
  for (const auto& obs : frames) check_observation(model, obs);

  // Flow samples come from the mean face and stay fixed across rounds.
  std::vector<std::vector<FlowSample>> flow(frames.size());
  for (std::size_t f = 1; f < frames.size(); ++f) {
    try {
      const PreviousFrame prev{poses[f - 1], neutral};
      flow[f] = flow_for(model, alpha0, frames[f], &prev, cam, weights.identity.optic, options, nullptr);
    } catch (const Error& e) {
      throw TrackingError(frames[f].index, std::string("identity: ") + e.what());
    }
  }

  Eigen::VectorXd x = Eigen::VectorXd::Zero(ms + static_cast<Eigen::Index>(frames.size()) * me);
  IdentityEstimate out;
  for (int round = 0; round < options.identity_rounds; ++round) {
    const ShapeCoeffs shape{x.head(ms)};
    std::vector<FrameSetup> setups;
    for (std::size_t f = 0; f < frames.size(); ++f) {
      FrameSetup s;
      s.obs = &frames[f];
      s.pose = poses[f];
      try {
        const ExprCoeffs beta{x.segment(ms + static_cast<Eigen::Index>(f) * me, me)};
        s.contour_anchors = contour_correspondences(model, frames[f], extract_fine_silhouette(assemble(model, shape, beta), poses[f], cam, options.contour_supersampling));
      } catch (const Error& e) {
        throw TrackingError(frames[f].index, std::string("identity: ") + e.what());
      }
      // The window's first frame has no previous beta estimate; it carries no
      // temporal or flow term.
      if (f > 0) {
        s.prev = PreviousFrame{poses[f - 1], neutral};
        s.flow = flow[f];
      }
      setups.push_back(std::move(s));
    }
    IdentityProblem problem(model, cam, weights, std::move(setups));
    try {
      const SolverSummary summary = solve_least_squares(problem, x, options.solver);
      if (round == 0) {
        out.summary = summary;
      } else {
        out.summary.iterations += summary.iterations;
        out.summary.accepted_steps += summary.accepted_steps;
        out.summary.rejected_steps += summary.rejected_steps;
        out.summary.final_energy = summary.final_energy;
        out.summary.converged = summary.converged;
        out.summary.energy_history.insert(out.summary.energy_history.end(), summary.energy_history.begin(),
                                          summary.energy_history.end());
      }
    } catch (const Error& e) {
      throw TrackingError(frames.front().index, std::string("identity: ") + e.what());
    }
  }
  out.shape.alpha = x.head(model.identity_count());
  for (std::size_t f = 0; f < frames.size(); ++f)
    out.expressions.push_back({x.segment(model.identity_count() + static_cast<Eigen::Index>(f) * model.expression_count(),
                                         model.expression_count())});
  return out;
}

ExpressionEstimate estimate_expression(const FaceModel& model, const ShapeCoeffs& shape, const FrameObservation& obs,
                                       const RigidPose& pose, const PreviousFrame* prev, const Camera& cam,
                                       const EnergyWeights& weights, const TrackingOptions& options,
                                       const ExprCoeffs* init) {
  check_observation(model, obs);
  const ExprCoeffs start = init ? *init : (prev ? prev->expr : ExprCoeffs::neutral(model.expression_count()));
  FrameSetup setup;
  setup.obs = &obs;
  setup.pose = pose;
  ExpressionEstimate out;
  Eigen::VectorXd x = start.beta;
  try {
    setup.contour_anchors =
        contour_correspondences(model, obs, extract_fine_silhouette(assemble(model, shape, start), pose, cam, options.contour_supersampling));
    if (prev) {
      setup.prev = *prev;
      setup.flow = flow_for(model, shape, obs, prev, cam, weights.expression.optic, options, nullptr);
    }
    ExpressionProblem problem(model, cam, weights, std::move(setup), shape.alpha);
    out.summary = solve_least_squares(problem, x, options.solver);
  } catch (const TrackingError&) {
    throw;
  } catch (const Error& e) {
    throw TrackingError(obs.index, std::string("expression: ") + e.what());
  }
  out.expr.beta = x;
  return out;
}

TrackResult track(const FaceModel& model, std::span<const FrameObservation> observations, const Camera& cam,
                  const EnergyWeights& weights, const TrackingOptions& options) {
  if (observations.empty()) throw ArgumentError("track: no frames");
  weights.validate();
  const int n = static_cast<int>(observations.size());
  TrackResult result;
  result.diagnostics.resize(static_cast<std::size_t>(n));

  auto pose_pass = [&](const ShapeCoeffs* shape) {
    std::vector<RigidPose> poses;
    for (int f = 0; f < n; ++f) {
      const FrameObservation& obs = observations[static_cast<std::size_t>(f)];
      std::optional<PreviousFrame> prev;
      if (f > 0) prev = PreviousFrame{poses.back(), ExprCoeffs::neutral(model.expression_count())};
      const RigidPose init = f > 0 ? poses.back()
                                   : (result.poses.empty() ? initial_pose(model, obs, cam) : result.poses.front());
      const PoseEstimate est =
          estimate_pose(model, obs, prev ? &*prev : nullptr, cam, weights, options, init, shape);
      auto& d = result.diagnostics[static_cast<std::size_t>(f)];
      d.pose_energy = est.summary.final_energy;
      d.pose_iterations = est.summary.iterations;
      d.flow_samples = est.flow_samples;
      d.flow_rejected = est.flow_rejected;
      poses.push_back(est.pose);
    }
    return poses;
  };

  result.poses = pose_pass(nullptr);

  const int k = std::min({options.identity_frames, 10, n});
  result.identity_window = select_representative_frames(result.poses, k);
  const auto [w0, w1] = result.identity_window;
  const IdentityEstimate identity =
      estimate_identity(model, observations.subspan(static_cast<std::size_t>(w0), static_cast<std::size_t>(w1 - w0)),
                        std::span<const RigidPose>(result.poses).subspan(static_cast<std::size_t>(w0),
                                                                         static_cast<std::size_t>(w1 - w0)),
                        cam, weights, options);
  result.shape = identity.shape;

  if (options.repose_after_identity) result.poses = pose_pass(&result.shape);

  for (int f = 0; f < n; ++f) {
    const FrameObservation& obs = observations[static_cast<std::size_t>(f)];
    std::optional<PreviousFrame> prev;
    if (f > 0) prev = PreviousFrame{result.poses[static_cast<std::size_t>(f - 1)], result.expressions.back()};
    const ExprCoeffs* init = nullptr;
    if (f >= w0 && f < w1) init = &identity.expressions[static_cast<std::size_t>(f - w0)];
    const ExpressionEstimate est = estimate_expression(model, result.shape, obs, result.poses[static_cast<std::size_t>(f)],
                                                       prev ? &*prev : nullptr, cam, weights, options, init);
    auto& d = result.diagnostics[static_cast<std::size_t>(f)];
    d.expression_energy = est.summary.final_energy;
    d.expression_iterations = est.summary.iterations;
    const Eigen::VectorXd lr =
        landmark_residuals(model, result.shape, est.expr, result.poses[static_cast<std::size_t>(f)], cam, obs);
    d.landmark_rmse = std::sqrt(lr.squaredNorm() / model.landmark_count());
    result.expressions.push_back(est.expr);
  }
  return result;
}

}  // namespace preshape
