#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "preshape/errors.hpp"
#include "preshape/pipeline.hpp"
#include "preshape/synthetic.hpp"
#include "toy_model.hpp"

using namespace preshape;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json required_paths(const fs::path& dir) {
  return {{"input", (dir / "frames").string()},
          {"landmarks", (dir / "landmarks.jsonl").string()},
          {"flow", (dir / "flow").string()},
          {"model", (dir / "model.prfm").string()},
          {"out", (dir / "out").string()}};
}

// Small synthetic clip written in the pipeline's input formats.
fs::path write_clip(const std::string& name, int frames) {
  const fs::path dir = toy::scratch_dir(name);
  auto model = std::make_shared<const FaceModel>(make_reference_model());
  save_model(*model, dir / "model.prfm");
  ScenarioOptions o;
  o.frames = frames;
  write_sequence(generate(make_scenario(model, o), true), dir);
  return dir;
}

const fs::path& shared_clip() {
  static const fs::path dir = write_clip("pipeline_clip", 4);
  return dir;
}

PipelineConfig clip_config(const fs::path& dir, const std::string& out, double delta) {
  json o = required_paths(dir);
  o["out"] = (dir / out).string();
  o["delta"] = delta;
  return parse_config(json::object(), o);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Config, DefaultsCarryPublishedConstants) {
  const PipelineConfig c = parse_config(json::object(), required_paths("/tmp/x"));
  const EnergyWeights w;
  EXPECT_EQ(c.weights.sigma_align, w.sigma_align);
  EXPECT_EQ(c.weights.w_prior, 0.4);
  EXPECT_EQ(c.weights.sigma_temp, 2.0);
  EXPECT_EQ(c.weights.pose.landmark, 0.6);
  EXPECT_EQ(c.weights.identity.landmark, 0.7);
  EXPECT_EQ(c.weights.expression.optic, 0.5);
  EXPECT_EQ(c.grid_weights.w_l, 1.0);
  EXPECT_EQ(c.grid_weights.w_r, 0.8);
  EXPECT_EQ(c.grid_size, 100);
  EXPECT_EQ(c.identity_frames, 10);
  EXPECT_EQ(c.delta, 0.0);
  EXPECT_EQ(c.threads, 1);
  EXPECT_FALSE(c.focal.has_value());
  EXPECT_TRUE(c.filter_flow);
  EXPECT_FALSE(c.sparse_mode);
}

TEST(Config, CommandLineOverridesFile) {
  json file = required_paths("/tmp/x");
  file["delta"] = 0.3;
  file["grid-size"] = 50;
  const PipelineConfig c = parse_config(file, json{{"delta", -0.2}});
  EXPECT_EQ(c.delta, -0.2);
  EXPECT_EQ(c.grid_size, 50);
}

TEST(Config, FileOnDisk) {
  const fs::path dir = toy::scratch_dir("config_file");
  json file = required_paths(dir);
  file["pose-optic"] = 0.25;
  file["sparse-mode"] = true;
  file["mls"] = "affine";
  std::ofstream(dir / "c.json") << file.dump();
  const PipelineConfig c = parse_config(std::optional<fs::path>(dir / "c.json"), json{{"threads", 3}});
  EXPECT_EQ(c.weights.pose.optic, 0.25);
  EXPECT_TRUE(c.sparse_mode);
  EXPECT_EQ(c.mls, MlsKind::Affine);
  EXPECT_EQ(c.threads, 3);
  EXPECT_EQ(c.input, dir / "frames");
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(parse_config(std::optional<fs::path>(dir / "bad.json")), ConfigError);
  EXPECT_THROW(parse_config(std::optional<fs::path>(dir / "absent.json")), ConfigError);
}

TEST(Config, RejectsBadValues) {
  const json base = required_paths("/tmp/x");
  auto with = [&](const json& extra) {
    json o = base;
    o.update(extra);
    return o;
  };
  EXPECT_THROW(parse_config(json::object(), with({{"grid-size", 0}})), ConfigError);
  EXPECT_THROW(parse_config(json::object(), with({{"identity-frames", 11}})), ConfigError);
  EXPECT_THROW(parse_config(json::object(), with({{"threads", 0}})), ConfigError);
  EXPECT_THROW(parse_config(json::object(), with({{"delta", "big"}})), ConfigError);
  EXPECT_THROW(parse_config(json::object(), with({{"mls", "rigid"}})), ConfigError);
  EXPECT_THROW(parse_config(json::object(), with({{"pose-temp", -1.0}})), ConfigError);
  EXPECT_THROW(parse_config(json::object(), json{{"delta", 0.1}}), ConfigError);
  try {
    parse_config(json::object(), with({{"colour", 1}, {"deltaa", 2}}));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("colour"), std::string::npos) << what;
    EXPECT_NE(what.find("deltaa"), std::string::npos) << what;
  }
}

TEST(Config, JsonRoundTrip) {
  json o = required_paths("/tmp/x");
  o["delta"] = 0.75;
  o["w-s"] = 0.1;
  o["focal"] = 400.0;
  o["dump-grids"] = true;
  const PipelineConfig c = parse_config(json::object(), o);
  const PipelineConfig back = parse_config(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(back.focal, 400.0);
  for (const auto& k : config_keys()) EXPECT_TRUE(config_to_json(c).contains(k.name) || k.name == "focal") << k.name;
}

TEST(Inputs, LoadsClip) {
  const PipelineConfig c = clip_config(shared_clip(), "unused", 0.0);
  const PipelineInputs in = load_inputs(c);
  EXPECT_EQ(in.images.size(), 4u);
  EXPECT_EQ(in.observations.size(), 4u);
  EXPECT_FALSE(in.observations[0].flow.has_value());
  EXPECT_TRUE(in.observations[3].flow.has_value());
  EXPECT_EQ(in.camera.width, 320);
  EXPECT_DOUBLE_EQ(in.camera.focal, reference_camera().focal);
}

TEST(Inputs, MissingFlowFileNamed) {
  const fs::path dir = write_clip("pipeline_missing_flow", 9);
  fs::remove(dir / "flow" / "flow_000007.flo");
  try {
    load_inputs(clip_config(dir, "out", 0.0));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("flow_000007.flo"), std::string::npos) << e.what();
  }
}

TEST(Inputs, MismatchedCountsRejected) {
  const fs::path dir = write_clip("pipeline_counts", 3);
  fs::remove(dir / "frames" / "frame_000002.png");
  EXPECT_THROW(load_inputs(clip_config(dir, "out", 0.0)), ConfigError);
  PipelineConfig c = clip_config(shared_clip(), "out", 0.0);
  c.model = shared_clip() / "nope.prfm";
  EXPECT_THROW(load_inputs(c), ConfigError);
}

TEST(Run, DeltaZeroIsBitIdentical) {
  const fs::path dir = shared_clip();
  const PipelineConfig c = clip_config(dir, "out_zero", 0.0);
  std::ostringstream log;
  const RunReport r = run(c, &log);
  EXPECT_EQ(r.frames, 4);
  for (int f = 0; f < 4; ++f) {
    char in_name[32], out_name[32];
    std::snprintf(in_name, sizeof(in_name), "frame_%06d.png", f);
    std::snprintf(out_name, sizeof(out_name), "out_%06d.png", f);
    const cv::Mat a = cv::imread((dir / "frames" / in_name).string(), cv::IMREAD_UNCHANGED);
    const cv::Mat b = cv::imread((c.out / out_name).string(), cv::IMREAD_UNCHANGED);
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(cv::norm(a, b, cv::NORM_INF), 0.0) << f;
  }
  EXPECT_NE(log.str().find("tracking"), std::string::npos);
}

TEST(Run, TrackJsonSharesIdentity) {
  const PipelineConfig c = clip_config(shared_clip(), "out_track", 0.3);
  run(c);
  std::ifstream in(c.out / "track.json");
  const json j = json::parse(in);
  ASSERT_TRUE(j["alpha"].is_array());
  EXPECT_EQ(j["alpha"].size(), 63u);
  ASSERT_EQ(j["frames"].size(), 4u);
  for (const auto& f : j["frames"]) {
    EXPECT_FALSE(f.contains("alpha"));
    EXPECT_EQ(f["beta"].size(), 6u);
    EXPECT_EQ(f["rotation"].size(), 3u);
  }
}

TEST(Run, DeterministicAndThreadIndependent) {
  const fs::path dir = shared_clip();
  const PipelineConfig a = clip_config(dir, "out_a", 0.5);
  PipelineConfig b = clip_config(dir, "out_b", 0.5);
  PipelineConfig t = clip_config(dir, "out_t", 0.5);
  t.threads = 3;
  run(a);
  run(b);
  run(t);
  EXPECT_EQ(slurp(a.out / "track.json"), slurp(b.out / "track.json"));
  for (int f = 0; f < 4; ++f) {
    char name[32];
    std::snprintf(name, sizeof(name), "out_%06d.png", f);
    EXPECT_EQ(slurp(a.out / name), slurp(b.out / name)) << f;
    EXPECT_EQ(slurp(a.out / name), slurp(t.out / name)) << f;
  }
}

TEST(Run, DumpsWhenAsked) {
  PipelineConfig c = clip_config(shared_clip(), "out_dump", 0.4);
  c.dump_contours = true;
  c.dump_grids = true;
  run(c);
  std::ifstream gin(c.out / "grids_000001.json");
  const json g = json::parse(gin);
  EXPECT_EQ(g["rows"], 100);
  EXPECT_EQ(g["rest"].size(), 100u * 100u);
  EXPECT_EQ(g["optimized"].size(), 100u * 100u);
  std::ifstream cin_(c.out / "contours_000002.json");
  const json k = json::parse(cin_);
  EXPECT_EQ(k["targets"].size(), k["silhouette"].size());
}

TEST(Run, SparseModeRuns) {
  PipelineConfig c = clip_config(shared_clip(), "out_sparse", 0.4);
  c.sparse_mode = true;
  c.grid_size = 40;
  const RunReport r = run(c);
  EXPECT_EQ(r.frames, 4);
  EXPECT_TRUE(fs::exists(c.out / "out_000003.png"));
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), 1);
  EXPECT_EQ(exit_code_for(TrackingError(3, "x")), 2);
  EXPECT_EQ(exit_code_for(WarpError("x")), 3);
  EXPECT_EQ(exit_code_for(MappingError("x")), 3);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), 1);
}

TEST(ReshapeFrame, ZeroDeltaLeavesImage) {
  const PipelineInputs in = load_inputs(clip_config(shared_clip(), "unused", 0.0));
  ScenarioOptions o;
  o.frames = 4;
  const auto sc = make_scenario(std::make_shared<const FaceModel>(in.model), o);
  const FrameReshape r =
      reshape_frame(in.model, in.camera, in.images[1], sc.alpha, sc.betas[1], sc.poses[1], 0.0, WarpOptions{});
  EXPECT_EQ(cv::norm(r.image, in.images[1], cv::NORM_INF), 0.0);
  EXPECT_EQ(r.mapping.valid_count(), static_cast<int>(r.mapping.pairs.size()));
  const FrameReshape grown =
      reshape_frame(in.model, in.camera, in.images[1], sc.alpha, sc.betas[1], sc.poses[1], 0.8, WarpOptions{});
  EXPECT_GT(cv::norm(grown.image, in.images[1], cv::NORM_INF), 0.0);
  EXPECT_LE(grown.plan.optimized_energy, grown.plan.mls_energy);
}
