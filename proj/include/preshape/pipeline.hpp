#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "preshape/contour_sdf.hpp"
#include "preshape/face_model.hpp"
#include "preshape/tracking.hpp"
#include "preshape/warping.hpp"

namespace preshape {

struct PipelineConfig {
  std::filesystem::path input;      // directory of PNG frames, read in name order
  std::filesystem::path landmarks;  // JSONL
  std::filesystem::path flow;       // directory of flow_%06d.flo; empty disables the flow terms
  std::filesystem::path model;
  std::filesystem::path out;
  double delta = 0.0;
  int grid_size = 100;
  int identity_frames = 10;
  int threads = 1;
  std::optional<double> focal;
  EnergyWeights weights;
  GridWeights grid_weights;
  MlsKind mls = MlsKind::Similarity;
  bool filter_flow = true;
  bool sparse_mode = false;
  bool repose_after_identity = false;
  bool dump_contours = false;
  bool dump_grids = false;

  // Throws ConfigError.
  void validate() const;
};

enum class ConfigValueType { Path, Double, Int, Bool, String };

struct ConfigKey {
  std::string name;
  ConfigValueType type;
  std::string help;
};

// Every key accepted in a config file; the CLI long flags use the same names.
const std::vector<ConfigKey>& config_keys();

// Applies `file_values` then `overrides` (both flat JSON objects) on top of
// the defaults and validates. Unknown keys and wrongly typed values raise
// ConfigError naming the key.
PipelineConfig parse_config(const nlohmann::json& file_values, const nlohmann::json& overrides = nlohmann::json::object());
PipelineConfig parse_config(const std::optional<std::filesystem::path>& file,
                            const nlohmann::json& overrides = nlohmann::json::object());

nlohmann::json config_to_json(const PipelineConfig& config);

struct PipelineInputs {
  std::vector<std::filesystem::path> frame_paths;
  std::vector<cv::Mat> images;
  FaceModel model;
  Camera camera;
  std::vector<FrameObservation> observations;
};

// Reads and checks every input before any computation. Throws ConfigError.
PipelineInputs load_inputs(const PipelineConfig& config);

struct FrameReshape {
  cv::Mat image;
  Silhouette original;
  Silhouette reshaped;
  DenseContourMapping mapping;  // empty in sparse mode
  std::vector<Vec2> sparse_sources;
  std::vector<Vec2> sparse_targets;
  WarpPlan plan;
  WarpStats stats;
};

WarpOptions warp_options(const PipelineConfig& config);

// Reshapes the tracked face of one frame by delta and warps the image.
FrameReshape reshape_frame(const FaceModel& model, const Camera& cam, const cv::Mat& image, const ShapeCoeffs& shape,
                           const ExprCoeffs& expr, const RigidPose& pose, double delta, const WarpOptions& options);

nlohmann::json track_to_json(const TrackResult& track, const std::vector<std::filesystem::path>& frames);
nlohmann::json contours_to_json(int frame, const FrameReshape& r);
nlohmann::json grids_to_json(int frame, const FrameReshape& r);

struct StageTimings {
  double load = 0.0;
  double tracking = 0.0;
  double warping = 0.0;
};

struct RunReport {
  TrackResult track;
  StageTimings timings;
  int frames = 0;
  int folded_cells = 0;
};

// Loads, tracks, reshapes and writes out_%06d.png plus track.json into
// config.out. Errors: ConfigError before any compute, TrackingError from the
// fitting stage, WarpError (naming the frame) from the reshape stage.
RunReport run(const PipelineConfig& config, std::ostream* log = nullptr);

// 0 success, 1 configuration, 2 tracking, 3 warping.
int exit_code_for(const std::exception& e);

}  // namespace preshape
