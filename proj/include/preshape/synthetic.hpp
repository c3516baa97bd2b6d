#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include <opencv2/core.hpp>

#include "preshape/face_model.hpp"
#include "preshape/flow.hpp"
#include "preshape/tracking.hpp"

namespace preshape {

// Procedural stand-in for a scanned face model: an ellipsoidal cap with a nose,
// 63 identity modes, 6 expression modes and a lower-face widening reshape basis.
FaceModel make_reference_model();

// 320 x 320 image, default intrinsics.
Camera reference_camera();
// Frontal pose that centers the reference model in the reference camera.
RigidPose reference_pose();

// Overwrites the flow inside [x, x + width) x [y, y + height) of one frame.
struct FlowPatch {
  int frame = 0;
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
  Vec2 motion = Vec2::Zero();
};

struct SyntheticScenario {
  std::shared_ptr<const FaceModel> model;
  ShapeCoeffs alpha;
  std::vector<ExprCoeffs> betas;
  std::vector<RigidPose> poses;
  Camera camera;
  double landmark_jitter = 0.0;  // px, Gaussian sigma
  std::vector<FlowPatch> flow_patches;
  std::uint64_t seed = 7;

  int frame_count() const { return static_cast<int>(poses.size()); }
  // Throws ArgumentError.
  void validate() const;
};

struct ScenarioOptions {
  int frames = 30;
  double alpha_scale = 1.0;
  double expression_scale = 0.3;
  double yaw_degrees = 12.0;
  double pitch_degrees = 5.0;
  double roll_degrees = 3.0;
  std::uint64_t seed = 7;
};

// Smooth head motion around reference_pose with random identity and slowly
// varying expressions.
SyntheticScenario make_scenario(std::shared_ptr<const FaceModel> model, const ScenarioOptions& options = {});

struct SyntheticSequence {
  std::vector<FrameObservation> observations;
  std::vector<cv::Mat> frames;  // empty unless rendered
  std::vector<FaceMesh> meshes;
};

SyntheticSequence generate(const SyntheticScenario& scenario, bool render = true);

// Flat-shaded face over a checkerboard, BGR.
cv::Mat render_frame(const FaceMesh& mesh, const RigidPose& pose, const Camera& cam);

// Motion of every face pixel of the first pose's rasterization to where the
// same surface point lands in the second; zero elsewhere.
FlowField exact_flow(const FaceMesh& from_mesh, const RigidPose& from_pose, const FaceMesh& to_mesh,
                     const RigidPose& to_pose, const Camera& cam);

// Skin-coloured pixels of a rendered (or warped) frame.
std::vector<std::uint8_t> face_mask(const cv::Mat& image);
// Outer boundary of face_mask, pixel centers in tracing order.
std::vector<Vec2> face_boundary(const cv::Mat& image);

struct PoseError {
  double degrees = 0.0;
  double translation = 0.0;  // fraction of face_length
};

PoseError pose_error(const RigidPose& estimate, const RigidPose& truth, double face_length);

// Per-vertex RMS distance as a fraction of the truth mesh's bounding-box diagonal.
double mesh_rmse(const FaceMesh& estimate, const FaceMesh& truth);

// sqrt of the summed squared second differences of (r, t / face_length).
double second_difference_norm(const std::vector<RigidPose>& poses, double face_length);

// frames/frame_%06d.png, landmarks.jsonl and flow/flow_%06d.flo under dir.
void write_sequence(const SyntheticSequence& sequence, const std::filesystem::path& dir);

}  // namespace preshape
