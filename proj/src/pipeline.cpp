#include "preshape/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <ostream>
#include <thread>

#include <opencv2/imgcodecs.hpp>

#include "preshape/errors.hpp"
#include "preshape/flow.hpp"

namespace preshape {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string numbered(const char* pattern, int index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, index);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json points_json(const std::vector<Vec2>& pts) {
  json a = json::array();
  for (const auto& p : pts) a.push_back({p.x(), p.y()});
  return a;
}

json vector_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

// Reads a key of the expected type or throws ConfigError naming it.
template <typename T>
T value_as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, int>) {
      if (!v.is_number_integer()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
  }
}

void apply(PipelineConfig& c, const std::string& key, const json& v) {
  auto d = [&] { return value_as<double>(v, key); };
  auto i = [&] { return value_as<int>(v, key); };
  auto b = [&] { return value_as<bool>(v, key); };
  auto s = [&] { return value_as<std::string>(v, key); };
  if (key == "input") c.input = s();
  else if (key == "landmarks") c.landmarks = s();
  else if (key == "flow") c.flow = s();
  else if (key == "model") c.model = s();
  else if (key == "out") c.out = s();
  else if (key == "delta") c.delta = d();
  else if (key == "grid-size") c.grid_size = i();
  else if (key == "identity-frames") c.identity_frames = i();
  else if (key == "threads") c.threads = i();
  else if (key == "focal") c.focal = d();
  else if (key == "sigma-align") c.weights.sigma_align = d();
  else if (key == "w-prior") c.weights.w_prior = d();
  else if (key == "gamma") c.weights.gamma = d();
  else if (key == "sigma-temp") c.weights.sigma_temp = d();
  else if (key == "pose-land") c.weights.pose.landmark = d();
  else if (key == "pose-temp") c.weights.pose.temporal = d();
  else if (key == "pose-optic") c.weights.pose.optic = d();
  else if (key == "identity-align") c.weights.identity.landmark = d();
  else if (key == "identity-temp") c.weights.identity.temporal = d();
  else if (key == "identity-optic") c.weights.identity.optic = d();
  else if (key == "expression-align") c.weights.expression.landmark = d();
  else if (key == "expression-temp") c.weights.expression.temporal = d();
  else if (key == "expression-optic") c.weights.expression.optic = d();
  else if (key == "w-l") c.grid_weights.w_l = d();
  else if (key == "w-r") c.grid_weights.w_r = d();
  else if (key == "w-d") c.grid_weights.w_d = d();
  else if (key == "w-s") c.grid_weights.w_s = d();
  else if (key == "mls") {
    const std::string m = s();
    if (m == "similarity") c.mls = MlsKind::Similarity;
    else if (m == "affine") c.mls = MlsKind::Affine;
    else throw ConfigError("config key 'mls' must be \"similarity\" or \"affine\", got \"" + m + "\"");
  } else if (key == "filter-flow") c.filter_flow = b();
  else if (key == "sparse-mode") c.sparse_mode = b();
  else if (key == "repose-after-identity") c.repose_after_identity = b();
  else if (key == "dump-contours") c.dump_contours = b();
  else if (key == "dump-grids") c.dump_grids = b();
  else throw ConfigError("unknown config key '" + key + "'");
}

void apply_all(PipelineConfig& c, const json& values, const char* source) {
  if (values.is_null()) return;
  if (!values.is_object()) throw ConfigError(std::string(source) + " must be a flat JSON object");
  std::vector<std::string> unknown;
  for (auto it = values.begin(); it != values.end(); ++it) {
    const auto& keys = config_keys();
    if (std::none_of(keys.begin(), keys.end(), [&](const ConfigKey& k) { return k.name == it.key(); }))
      unknown.push_back(it.key());
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError(std::string("unknown config key(s) in ") + source + ": " + list);
  }
  for (auto it = values.begin(); it != values.end(); ++it) apply(c, it.key(), it.value());
}

TrackingOptions tracking_options(const PipelineConfig& c) {
  TrackingOptions o;
  o.identity_frames = c.identity_frames;
  o.repose_after_identity = c.repose_after_identity;
  o.filter_flow = c.filter_flow;
  return o;
}

}  // namespace

// --- Config ----------------------------------------------------------------------

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"input", ConfigValueType::Path, "directory of input PNG frames"},
      {"landmarks", ConfigValueType::Path, "landmarks JSONL file"},
      {"flow", ConfigValueType::Path, "directory of flow_%06d.flo files"},
      {"model", ConfigValueType::Path, "face model (.prfm)"},
      {"out", ConfigValueType::Path, "output directory"},
      {"delta", ConfigValueType::Double, "reshape amount"},
      {"grid-size", ConfigValueType::Int, "warp grid rows and columns"},
      {"identity-frames", ConfigValueType::Int, "frames in the identity window (1-10)"},
      {"threads", ConfigValueType::Int, "worker threads for the reshape stage"},
      {"focal", ConfigValueType::Double, "focal length in pixels"},
      {"sigma-align", ConfigValueType::Double, "contour weight inside the alignment term"},
      {"w-prior", ConfigValueType::Double, "coefficient prior weight"},
      {"gamma", ConfigValueType::Double, "translation weight in the temporal term (<= 0: 1/face length)"},
      {"sigma-temp", ConfigValueType::Double, "expression weight in the temporal term"},
      {"pose-land", ConfigValueType::Double, "pose phase landmark weight"},
      {"pose-temp", ConfigValueType::Double, "pose phase temporal weight"},
      {"pose-optic", ConfigValueType::Double, "pose phase flow weight"},
      {"identity-align", ConfigValueType::Double, "identity phase alignment weight"},
      {"identity-temp", ConfigValueType::Double, "identity phase temporal weight"},
      {"identity-optic", ConfigValueType::Double, "identity phase flow weight"},
      {"expression-align", ConfigValueType::Double, "expression phase alignment weight"},
      {"expression-temp", ConfigValueType::Double, "expression phase temporal weight"},
      {"expression-optic", ConfigValueType::Double, "expression phase flow weight"},
      {"w-l", ConfigValueType::Double, "grid line-bending weight"},
      {"w-r", ConfigValueType::Double, "grid regularization weight"},
      {"w-d", ConfigValueType::Double, "sparse mode distortion weight"},
      {"w-s", ConfigValueType::Double, "sparse mode similarity weight"},
      {"mls", ConfigValueType::String, "MLS flavour: similarity or affine"},
      {"filter-flow", ConfigValueType::Bool, "reject flow outliers"},
      {"sparse-mode", ConfigValueType::Bool, "sparse control points with the two-step grid solve"},
      {"repose-after-identity", ConfigValueType::Bool, "re-estimate poses with the fitted identity"},
      {"dump-contours", ConfigValueType::Bool, "write contours_%06d.json per frame"},
      {"dump-grids", ConfigValueType::Bool, "write grids_%06d.json per frame"},
  };
  return keys;
}

void PipelineConfig::validate() const {
  if (!std::isfinite(delta)) throw ConfigError("delta must be finite");
  if (grid_size < 2) throw ConfigError("grid-size must be at least 2, got " + std::to_string(grid_size));
  if (identity_frames < 1 || identity_frames > 10)
    throw ConfigError("identity-frames must be in [1, 10], got " + std::to_string(identity_frames));
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (focal && !(*focal > 0.0 && std::isfinite(*focal))) throw ConfigError("focal must be positive");
  try {
    weights.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  for (double w : {grid_weights.w_l, grid_weights.w_r, grid_weights.w_d, grid_weights.w_s})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("grid weights must be finite and non-negative");
  for (const auto& [name, path] : {std::pair{"input", &input}, std::pair{"landmarks", &landmarks},
                                   std::pair{"model", &model}, std::pair{"out", &out}})
    if (path->empty()) throw ConfigError(std::string("missing required setting '") + name + "'");
}

PipelineConfig parse_config(const json& file_values, const json& overrides) {
  PipelineConfig c;
  apply_all(c, file_values, "config file");
  apply_all(c, overrides, "command line");
  c.validate();
  return c;
}

PipelineConfig parse_config(const std::optional<fs::path>& file, const json& overrides) {
  json values = json::object();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot open config file " + file->string());
    try {
      values = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config file " + file->string() + ": " + e.what());
    }
  }
  return parse_config(values, overrides);
}

json config_to_json(const PipelineConfig& c) {
  json j;
  j["input"] = c.input.string();
  j["landmarks"] = c.landmarks.string();
  j["flow"] = c.flow.string();
  j["model"] = c.model.string();
  j["out"] = c.out.string();
  j["delta"] = c.delta;
  j["grid-size"] = c.grid_size;
  j["identity-frames"] = c.identity_frames;
  j["threads"] = c.threads;
  if (c.focal) j["focal"] = *c.focal;
  j["sigma-align"] = c.weights.sigma_align;
  j["w-prior"] = c.weights.w_prior;
  j["gamma"] = c.weights.gamma;
  j["sigma-temp"] = c.weights.sigma_temp;
  j["pose-land"] = c.weights.pose.landmark;
  j["pose-temp"] = c.weights.pose.temporal;
  j["pose-optic"] = c.weights.pose.optic;
  j["identity-align"] = c.weights.identity.landmark;
  j["identity-temp"] = c.weights.identity.temporal;
  j["identity-optic"] = c.weights.identity.optic;
  j["expression-align"] = c.weights.expression.landmark;
  j["expression-temp"] = c.weights.expression.temporal;
  j["expression-optic"] = c.weights.expression.optic;
  j["w-l"] = c.grid_weights.w_l;
  j["w-r"] = c.grid_weights.w_r;
  j["w-d"] = c.grid_weights.w_d;
  j["w-s"] = c.grid_weights.w_s;
  j["mls"] = c.mls == MlsKind::Similarity ? "similarity" : "affine";
  j["filter-flow"] = c.filter_flow;
  j["sparse-mode"] = c.sparse_mode;
  j["repose-after-identity"] = c.repose_after_identity;
  j["dump-contours"] = c.dump_contours;
  j["dump-grids"] = c.dump_grids;
  return j;
}

// --- Inputs ---------------------------------------------------------------------------

PipelineInputs load_inputs(const PipelineConfig& config) {
  PipelineInputs in;
  if (!fs::is_directory(config.input)) throw ConfigError("input directory not found: " + config.input.string());
  for (const auto& entry : fs::directory_iterator(config.input)) {
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (entry.is_regular_file() && ext == ".png") in.frame_paths.push_back(entry.path());
  }
  std::sort(in.frame_paths.begin(), in.frame_paths.end());
  if (in.frame_paths.empty()) throw ConfigError("no PNG frames in " + config.input.string());

  for (const auto& p : in.frame_paths) {
    cv::Mat img = cv::imread(p.string(), cv::IMREAD_UNCHANGED);
    if (img.empty()) throw ConfigError("cannot read frame " + p.string());
    if (img.depth() != CV_8U) throw ConfigError("frame " + p.string() + " is not 8-bit");
    if (!in.images.empty() && img.size() != in.images.front().size())
      throw ConfigError("frame " + p.string() + " differs in size from the first frame");
    in.images.push_back(std::move(img));
  }
  const int width = in.images.front().cols, height = in.images.front().rows;

  try {
    in.model = load_model(config.model);
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }

  std::vector<std::vector<Vec2>> landmarks;
  try {
    landmarks = read_landmarks(config.landmarks);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (landmarks.size() != in.frame_paths.size())
    throw ConfigError("landmarks file has " + std::to_string(landmarks.size()) + " frames but " +
                      std::to_string(in.frame_paths.size()) + " PNG frames were found");

  const int n = static_cast<int>(in.frame_paths.size());
  for (int f = 0; f < n; ++f) {
    FrameObservation obs;
    obs.index = f;
    obs.landmarks = std::move(landmarks[static_cast<std::size_t>(f)]);
    if (static_cast<int>(obs.landmarks.size()) != in.model.landmark_count())
      throw ConfigError("landmarks for frame " + std::to_string(f) + ": expected " +
                        std::to_string(in.model.landmark_count()) + " points, got " + std::to_string(obs.landmarks.size()));
    if (f > 0 && !config.flow.empty()) {
      const fs::path fp = config.flow / numbered("flow_%06d.flo", f);
      if (!fs::exists(fp)) throw ConfigError("missing flow file " + fp.string());
      try {
        obs.flow = read_flo(fp);
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
      if (obs.flow->width != width || obs.flow->height != height)
        throw ConfigError("flow file " + fp.string() + " is " + std::to_string(obs.flow->width) + "x" +
                          std::to_string(obs.flow->height) + ", frames are " + std::to_string(width) + "x" +
                          std::to_string(height));
    }
    in.observations.push_back(std::move(obs));
  }

  in.camera = Camera::for_image(width, height);
  if (config.focal) in.camera.focal = *config.focal;
  return in;
}

// --- Per-frame reshape ---------------------------------------------------------------

WarpOptions warp_options(const PipelineConfig& config) {
  WarpOptions o;
  o.rows = o.cols = config.grid_size;
  o.weights = config.grid_weights;
  o.mls = config.mls;
  o.sparse_mode = config.sparse_mode;
  return o;
}

FrameReshape reshape_frame(const FaceModel& model, const Camera& cam, const cv::Mat& image, const ShapeCoeffs& shape,
                           const ExprCoeffs& expr, const RigidPose& pose, double delta, const WarpOptions& options) {
  FrameReshape r;
  const FaceMesh original = assemble(model, shape, expr);
  const FaceMesh reshaped = reshape(model, shape, expr, delta);
  r.original = extract_silhouette(original, pose, cam, image.cols, image.rows);
  r.reshaped = extract_silhouette(reshaped, pose, cam, image.cols, image.rows);
  if (options.sparse_mode) {
    for (int i = 0; i < model.landmark_count(); ++i) {
      if (!model.contour_landmark[static_cast<std::size_t>(i)]) continue;
      const int v = model.landmark_vertices[static_cast<std::size_t>(i)];
      r.sparse_sources.push_back(project_point(original.vertices.col(v), pose, cam, v));
      r.sparse_targets.push_back(project_point(reshaped.vertices.col(v), pose, cam, v));
    }
    r.plan = plan_warp_sparse(r.original, r.reshaped, r.sparse_sources, r.sparse_targets, image.cols, image.rows, options);
  } else {
    r.mapping = dense_mapping(r.original, r.reshaped, reshaped, pose, cam);
    r.plan = plan_warp(r.original, r.reshaped, r.mapping, image.cols, image.rows, options);
  }
  r.image = warp_image(image, r.plan.optimized, &r.stats);
  return r;
}

// --- Dumps ------------------------------------------------------------------------------

json track_to_json(const TrackResult& track, const std::vector<fs::path>& frames) {
  json j;
  j["alpha"] = vector_json(track.shape.alpha);
  j["identity_window"] = {track.identity_window.first, track.identity_window.second};
  json list = json::array();
  for (std::size_t f = 0; f < track.poses.size(); ++f) {
    json e;
    e["frame"] = f;
    if (f < frames.size()) e["image"] = frames[f].filename().string();
    e["rotation"] = vector_json(track.poses[f].rotation);
    e["translation"] = vector_json(track.poses[f].translation);
    e["beta"] = vector_json(track.expressions[f].beta);
    const auto& d = track.diagnostics[f];
    e["landmark_rmse"] = d.landmark_rmse;
    e["pose_energy"] = d.pose_energy;
    e["expression_energy"] = d.expression_energy;
    e["flow_samples"] = d.flow_samples;
    e["flow_rejected"] = d.flow_rejected;
    list.push_back(e);
  }
  j["frames"] = list;
  return j;
}

json contours_to_json(int frame, const FrameReshape& r) {
  json j;
  j["frame"] = frame;
  j["silhouette"] = points_json(r.original.points);
  j["reshaped_silhouette"] = points_json(r.reshaped.points);
  json labels = json::array(), targets = json::array(), valid = json::array();
  for (const auto& l : r.original.labels) labels.push_back(std::string(region_name(l)));
  for (const auto& p : r.mapping.pairs) {
    targets.push_back({p.target.x(), p.target.y()});
    valid.push_back(p.valid);
  }
  j["labels"] = labels;
  j["targets"] = targets;
  j["valid"] = valid;
  if (!r.sparse_sources.empty()) {
    j["sparse_sources"] = points_json(r.sparse_sources);
    j["sparse_targets"] = points_json(r.sparse_targets);
  }
  return j;
}

json grids_to_json(int frame, const FrameReshape& r) {
  json j;
  j["frame"] = frame;
  j["rows"] = r.plan.optimized.rows;
  j["cols"] = r.plan.optimized.cols;
  j["region"] = {r.plan.region.r0, r.plan.region.r1, r.plan.region.c0, r.plan.region.c1};
  j["rest"] = points_json(r.plan.optimized.rest);
  j["mls"] = points_json(r.plan.mls.positions);
  j["optimized"] = points_json(r.plan.optimized.positions);
  return j;
}

// --- Run ---------------------------------------------------------------------------------

RunReport run(const PipelineConfig& config, std::ostream* log) {
  config.validate();
  RunReport report;
  auto t0 = std::chrono::steady_clock::now();
  PipelineInputs in = load_inputs(config);
  std::error_code ec;
  fs::create_directories(config.out, ec);
  if (!fs::is_directory(config.out)) throw ConfigError("cannot create output directory " + config.out.string());
  report.frames = static_cast<int>(in.images.size());
  report.timings.load = seconds_since(t0);
  if (log) *log << "load: " << report.frames << " frames in " << report.timings.load << " s\n";

  t0 = std::chrono::steady_clock::now();
  try {
    report.track = track(in.model, in.observations, in.camera, config.weights, tracking_options(config));
  } catch (const TrackingError&) {
    throw;
  } catch (const Error& e) {
    throw TrackingError(0, e.what());
  }
  report.timings.tracking = seconds_since(t0);
  if (log) *log << "tracking: " << report.timings.tracking << " s\n";
  write_json(track_to_json(report.track, in.frame_paths), config.out / "track.json");

  t0 = std::chrono::steady_clock::now();
  const WarpOptions options = warp_options(config);
  const int n = report.frames;
  struct Slot {
    bool done = false;
    std::optional<FrameReshape> result;
    std::exception_ptr error;
  };
  std::vector<Slot> slots(static_cast<std::size_t>(n));
  std::mutex mutex;
  std::condition_variable ready;
  std::atomic<int> next{0};
  std::atomic<bool> stop{false};

  auto worker = [&] {
    for (;;) {
      const int f = next.fetch_add(1);
      if (f >= n || stop.load()) return;
      Slot local;
      try {
        local.result = reshape_frame(in.model, in.camera, in.images[static_cast<std::size_t>(f)], report.track.shape,
                                     report.track.expressions[static_cast<std::size_t>(f)],
                                     report.track.poses[static_cast<std::size_t>(f)], config.delta, options);
      } catch (const std::exception& e) {
        local.error = std::make_exception_ptr(WarpError("frame " + std::to_string(f) + ": " + e.what()));
      }
      std::lock_guard lock(mutex);
      slots[static_cast<std::size_t>(f)].result = std::move(local.result);
      slots[static_cast<std::size_t>(f)].error = local.error;
      slots[static_cast<std::size_t>(f)].done = true;
      ready.notify_all();
    }
  };

  const int thread_count = std::min(config.threads, n);
  std::vector<std::thread> pool;
  for (int t = 0; t < thread_count; ++t) pool.emplace_back(worker);

  std::exception_ptr failure;
  for (int f = 0; f < n && !failure; ++f) {
    std::optional<FrameReshape> result;
    {
      std::unique_lock lock(mutex);
      ready.wait(lock, [&] { return slots[static_cast<std::size_t>(f)].done; });
      if (slots[static_cast<std::size_t>(f)].error) {
        failure = slots[static_cast<std::size_t>(f)].error;
        stop = true;
        break;
      }
      result = std::move(slots[static_cast<std::size_t>(f)].result);
    }
    try {
      const fs::path out_path = config.out / numbered("out_%06d.png", f);
      if (!cv::imwrite(out_path.string(), result->image)) throw WarpError("cannot write " + out_path.string());
      if (config.dump_contours) write_json(contours_to_json(f, *result), config.out / numbered("contours_%06d.json", f));
      if (config.dump_grids) write_json(grids_to_json(f, *result), config.out / numbered("grids_%06d.json", f));
      report.folded_cells += result->stats.folded_cells;
      if (result->stats.folded_cells > 0 && log)
        *log << "warning: frame " << f << ": " << result->stats.folded_cells << " folded grid cells\n";
    } catch (...) {
      failure = std::current_exception();
      stop = true;
    }
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  report.timings.warping = seconds_since(t0);
  if (log) *log << "reshape and warp: " << report.timings.warping << " s\n";
  return report;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const TrackingError*>(&e)) return 2;
  if (dynamic_cast<const WarpError*>(&e) || dynamic_cast<const MappingError*>(&e)) return 3;
  return 1;
}

}  // namespace preshape
