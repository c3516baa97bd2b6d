#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "preshape/contour_sdf.hpp"
#include "preshape/face_model.hpp"
#include "preshape/flow.hpp"
#include "preshape/solver.hpp"

namespace preshape {

struct FrameObservation {
  int index = 0;
  std::vector<Vec2> landmarks;
  // Motion from the previous frame to this one; absent for the first frame.
  std::optional<FlowField> flow;
};

// Landmarks file: one JSON object per line, {"frame": int, "points": [[x, y], ...]}.
// Lines whose "points" is null raise LoadError naming the frame.
std::vector<std::vector<Vec2>> read_landmarks(const std::filesystem::path& path);
void write_landmarks(const std::vector<std::vector<Vec2>>& frames, const std::filesystem::path& path);

struct PhaseWeights {
  double landmark = 0.0;  // lambda_land in the pose phase, lambda_align otherwise
  double temporal = 0.0;
  double optic = 0.0;
};

struct EnergyWeights {
  double sigma_align = 0.5;
  double w_prior = 0.4;
  // Weight of translation in the pose coherence term; <= 0 means 1 / face_length.
  double gamma = 0.0;
  double sigma_temp = 2.0;
  PhaseWeights pose{0.6, 0.9, 0.5};
  PhaseWeights identity{0.7, 0.2, 0.1};
  PhaseWeights expression{0.9, 0.5, 0.5};

  double resolved_gamma(const FaceModel& model) const { return gamma > 0.0 ? gamma : 1.0 / model.face_length; }
  void validate() const;
  // Every weight multiplied by `factor` (used to check argmin invariance).
  EnergyWeights scaled(double factor) const;
};

struct TrackingOptions {
  int identity_frames = 10;
  bool repose_after_identity = false;
  bool filter_flow = true;
  FlowSamplingOptions sampling;
  FlowFilterOptions filter{.closed = true};  // samples go once around the silhouette
  SolverOptions solver;
  // Flow residuals use visible vertices this far inside the silhouette (px),
  // one per angular bin around the silhouette centroid.
  double flow_band_inner = 4.0;
  double flow_band_outer = 12.0;
  int flow_bins = 64;
  // Identity is solved this many times, re-fixing contour correspondences on
  // the latest estimate before each solve.
  int identity_rounds = 4;
  // Contour correspondences are searched on a silhouette traced this many
  // times finer than the image.
  int contour_supersampling = 4;
};

struct PreviousFrame {
  RigidPose pose;
  ExprCoeffs expr;
};

// --- Energy terms --------------------------------------------------------------

// 2 * NL residuals, projected landmark vertex minus observed landmark.
Eigen::VectorXd landmark_residuals(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr,
                                   const RigidPose& pose, const Camera& cam, const FrameObservation& obs);

// For each contour landmark, the anchor of the silhouette sample nearest to it
// in the image. Throws GeometryError for an empty silhouette.
std::vector<SurfaceAnchor> contour_correspondences(const FaceModel& model, const FrameObservation& obs,
                                                   const Silhouette& silhouette);

// 2 * |contour landmarks| residuals against the matched silhouette points.
Eigen::VectorXd contour_residuals(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr,
                                  const RigidPose& pose, const Camera& cam, const FrameObservation& obs,
                                  const Silhouette& silhouette);

// w_prior * (|alpha| + |beta|), unsquared norms.
double prior_energy(const ShapeCoeffs& shape, const ExprCoeffs& expr, double w_prior = 0.4);

// Stacked so that the squared norm is
// |r - r'|^2 + gamma |t - t'|^2 + sigma_temp |beta - beta'|^2.
Eigen::VectorXd temporal_residuals(const RigidPose& pose, const RigidPose& prev_pose, const ExprCoeffs& expr,
                                   const ExprCoeffs& prev_expr, double gamma, double sigma_temp);

// Vertices whose motion is sampled from the flow, in contour order, with the
// sampled motion. Computed from the previous frame's mesh and pose.
std::vector<FlowSample> select_flow_samples(const FaceModel& model, const ShapeCoeffs& shape,
                                            const PreviousFrame& prev, const Camera& cam, const FlowField& flow,
                                            const TrackingOptions& options);

// Per sampled vertex: projection now minus projection in the previous frame
// minus the sampled motion (after outlier filtering when enabled).
Eigen::VectorXd flow_residuals(const FaceModel& model, const ShapeCoeffs& shape, const ExprCoeffs& expr,
                               const RigidPose& pose, const PreviousFrame& prev, const Camera& cam,
                               const FlowField& flow, const TrackingOptions& options = {});

// --- Phases ----------------------------------------------------------------------

struct PoseEstimate {
  RigidPose pose;
  SolverSummary summary;
  int flow_samples = 0;
  int flow_rejected = 0;
};

// Minimizes lambda_land E_land + lambda_temp E_temp^pose + lambda_optic E_optic
// over the rigid pose with shape and expression held fixed.
PoseEstimate estimate_pose(const FaceModel& model, const FrameObservation& obs, const PreviousFrame* prev,
                           const Camera& cam, const EnergyWeights& weights, const TrackingOptions& options,
                           const RigidPose& init, const ShapeCoeffs* shape = nullptr);

// Rough pose from landmark centroid and spread, facing the camera.
RigidPose initial_pose(const FaceModel& model, const FrameObservation& obs, const Camera& cam);

// Angle (radians) between the face's forward axis and the direction to the camera.
double frontality_angle(const RigidPose& pose);

// [begin, end) of the k consecutive frames with the smallest summed
// frontality angle; the earliest window wins ties.
std::pair<int, int> select_representative_frames(std::span<const RigidPose> poses, int k);

struct IdentityEstimate {
  ShapeCoeffs shape;
  std::vector<ExprCoeffs> expressions;
  SolverSummary summary;
};

// Bundle over the given frames: alpha shared, one beta per frame, poses fixed.
IdentityEstimate estimate_identity(const FaceModel& model, std::span<const FrameObservation> frames,
                                   std::span<const RigidPose> poses, const Camera& cam,
                                   const EnergyWeights& weights, const TrackingOptions& options);

struct ExpressionEstimate {
  ExprCoeffs expr;
  SolverSummary summary;
};

ExpressionEstimate estimate_expression(const FaceModel& model, const ShapeCoeffs& shape, const FrameObservation& obs,
                                       const RigidPose& pose, const PreviousFrame* prev, const Camera& cam,
                                       const EnergyWeights& weights, const TrackingOptions& options,
                                       const ExprCoeffs* init = nullptr);

struct FrameDiagnostics {
  double pose_energy = 0.0;
  double expression_energy = 0.0;
  double landmark_rmse = 0.0;  // px, after the expression phase
  int pose_iterations = 0;
  int expression_iterations = 0;
  int flow_samples = 0;
  int flow_rejected = 0;
};

struct TrackResult {
  std::vector<RigidPose> poses;
  ShapeCoeffs shape;
  std::vector<ExprCoeffs> expressions;
  std::vector<FrameDiagnostics> diagnostics;
  std::pair<int, int> identity_window{0, 0};
};

// Pose for every frame, then one identity from the most frontal window, then
// expressions for every frame. Errors carry the frame index.
TrackResult track(const FaceModel& model, std::span<const FrameObservation> observations, const Camera& cam,
                  const EnergyWeights& weights = {}, const TrackingOptions& options = {});

// --- Problems (exposed for derivative checks) ---------------------------------------

// Fixed per-frame inputs for one solve: correspondences and flow samples are
// chosen once, before the solver starts.
struct FrameSetup {
  const FrameObservation* obs = nullptr;
  RigidPose pose;
  std::vector<SurfaceAnchor> contour_anchors;  // empty: no contour term
  std::vector<FlowSample> flow;                // empty: no flow term
  std::optional<PreviousFrame> prev;           // absent: no temporal/flow term
};

class PoseProblem : public LeastSquaresProblem {
 public:
  PoseProblem(const FaceModel& model, const Camera& cam, const EnergyWeights& weights, FrameSetup setup,
              Eigen::VectorXd alpha, Eigen::VectorXd beta);
  int parameter_count() const override { return 6; }
  bool evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& residuals, SparseMatrix* jacobian) const override;

  static Eigen::VectorXd pack(const RigidPose& pose);
  static RigidPose unpack(const Eigen::VectorXd& x);

 private:
  const FaceModel& model_;
  const Camera& cam_;
  EnergyWeights weights_;
  FrameSetup setup_;
  Eigen::VectorXd alpha_, beta_;
};

class IdentityProblem : public LeastSquaresProblem {
 public:
  IdentityProblem(const FaceModel& model, const Camera& cam, const EnergyWeights& weights,
                  std::vector<FrameSetup> frames);
  int parameter_count() const override;
  bool evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& residuals, SparseMatrix* jacobian) const override;

 private:
  const FaceModel& model_;
  const Camera& cam_;
  EnergyWeights weights_;
  std::vector<FrameSetup> frames_;
};

class ExpressionProblem : public LeastSquaresProblem {
 public:
  ExpressionProblem(const FaceModel& model, const Camera& cam, const EnergyWeights& weights, FrameSetup setup,
                    Eigen::VectorXd alpha);
  int parameter_count() const override;
  bool evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& residuals, SparseMatrix* jacobian) const override;

 private:
  const FaceModel& model_;
  const Camera& cam_;
  EnergyWeights weights_;
  FrameSetup setup_;
  Eigen::VectorXd alpha_;
};

}  // namespace preshape
