// Prints one PASS/FAIL line per acceptance criterion; exits non-zero on any FAIL.
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include <Eigen/Dense>
#include <opencv2/imgcodecs.hpp>

#include "preshape/contour_sdf.hpp"
#include "preshape/errors.hpp"
#include "preshape/pipeline.hpp"
#include "preshape/synthetic.hpp"
#include "preshape/tracking.hpp"
#include "preshape/warping.hpp"

using namespace preshape;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::shared_ptr<const FaceModel> reference_ptr() {
  static const auto p = std::make_shared<const FaceModel>(make_reference_model());
  return p;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), pattern, args...);
  return buf;
}

// --- constants ---------------------------------------------------------------------

Outcome constants_audit() {
  const PipelineConfig c = parse_config(nlohmann::json::object(),
                                        {{"input", "i"}, {"landmarks", "l"}, {"model", "m"}, {"out", "o"}});
  const EnergyWeights& w = c.weights;
  std::vector<std::string> bad;
  auto check = [&](const char* name, double got, double want) {
    if (got != want) bad.push_back(fmt("%s=%g (want %g)", name, got, want));
  };
  check("sigma_align", w.sigma_align, 0.5);
  check("w_prior", w.w_prior, 0.4);
  check("sigma_temp", w.sigma_temp, 2.0);
  check("pose.land", w.pose.landmark, 0.6);
  check("pose.temp", w.pose.temporal, 0.9);
  check("pose.optic", w.pose.optic, 0.5);
  check("identity.align", w.identity.landmark, 0.7);
  check("identity.optic", w.identity.optic, 0.1);
  check("identity.temp", w.identity.temporal, 0.2);
  check("expression.align", w.expression.landmark, 0.9);
  check("expression.optic", w.expression.optic, 0.5);
  check("expression.temp", w.expression.temporal, 0.5);
  check("w_l", c.grid_weights.w_l, 1.0);
  check("w_r", c.grid_weights.w_r, 0.8);
  check("grid", c.grid_size, 100);
  if (c.identity_frames > 10) bad.push_back("identity_frames > 10");
  bool rejects_k11 = false;
  try {
    PipelineConfig k = c;
    k.identity_frames = 11;
    k.validate();
  } catch (const ConfigError&) {
    rejects_k11 = true;
  }
  if (!rejects_k11) bad.push_back("identity_frames=11 accepted");
  std::string detail = "all defaults match";
  if (!bad.empty()) {
    detail.clear();
    for (const auto& b : bad) detail += b + "; ";
  }
  return {bad.empty(), detail};
}

// --- tracking ----------------------------------------------------------------------

Outcome round_trip() {
  const auto t0 = std::chrono::steady_clock::now();
  const SyntheticScenario sc = make_scenario(reference_ptr(), {});
  const SyntheticSequence seq = generate(sc, false);
  const TrackResult r = track(*sc.model, seq.observations, sc.camera);
  const double secs = seconds_since(t0);
  double rot = 0, trans = 0;
  for (int f = 0; f < sc.frame_count(); ++f) {
    const PoseError e = pose_error(r.poses[f], sc.poses[f], sc.model->face_length);
    rot = std::max(rot, e.degrees);
    trans = std::max(trans, e.translation);
  }
  const double id = mesh_rmse(assemble(*sc.model, r.shape, ExprCoeffs::neutral(6)),
                              assemble(*sc.model, sc.alpha, ExprCoeffs::neutral(6)));
  const bool pass = sc.frame_count() == 30 && rot <= 0.5 && trans <= 0.005 && id <= 0.005 && secs <= 60.0;
  return {pass, fmt("30 frames: max rotation %.3f deg, max translation %.3f%%, identity rmse %.3f%%, %.1f s", rot,
                    100 * trans, 100 * id, secs)};
}

Outcome jitter_robustness() {
  SyntheticScenario sc = make_scenario(reference_ptr(), {});
  sc.landmark_jitter = 1.0;
  const SyntheticSequence seq = generate(sc, false);
  EnergyWeights off;
  off.pose.temporal = 0;
  off.pose.optic = 0;
  const double fl = sc.model->face_length;
  const double with = second_difference_norm(track(*sc.model, seq.observations, sc.camera).poses, fl);
  const double without = second_difference_norm(track(*sc.model, seq.observations, sc.camera, off).poses, fl);
  return {with < without, fmt("second-difference norm %.4f with temporal/flow terms, %.4f without", with, without)};
}

double max_pose_change(const std::vector<RigidPose>& a, const std::vector<RigidPose>& b, double fl) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, pose_error(a[i], b[i], fl).degrees);
  return m;
}

Outcome flow_outlier() {
  const FaceModel& m = *reference_ptr();
  const double fl = m.face_length;
  bool pass = true;
  std::string detail;
  for (const int frame : {5, 12}) {
    SyntheticScenario sc = make_scenario(reference_ptr(), {});
    const SyntheticSequence clean = generate(sc, false);
    // a 16 x 16 patch of bogus motion straddling a cheek contour landmark
    const Vec2 at = clean.observations[frame].landmarks[3];
    sc.flow_patches.push_back({frame, static_cast<int>(at.x()) - 2, static_cast<int>(at.y()) - 8, 16, 16, Vec2(8, -6)});
    const SyntheticSequence bad = generate(sc, false);
    TrackingOptions on, off;
    off.filter_flow = false;
    const auto clean_on = track(m, clean.observations, sc.camera, {}, on);
    const auto clean_off = track(m, clean.observations, sc.camera, {}, off);
    const auto bad_on = track(m, bad.observations, sc.camera, {}, on);
    const auto bad_off = track(m, bad.observations, sc.camera, {}, off);
    const double baseline = max_pose_change(clean_on.poses, sc.poses, fl);
    const double filtered = max_pose_change(bad_on.poses, clean_on.poses, fl);
    const double unfiltered = max_pose_change(bad_off.poses, clean_off.poses, fl);
    const bool ok = filtered <= 3 * baseline && filtered <= unfiltered / 3;
    pass = pass && ok;
    detail += fmt("frame %d: change %.4f deg filtered, %.4f unfiltered, clean deviation %.4f deg; ", frame, filtered,
                  unfiltered, baseline);
  }
  return {pass, detail};
}

// --- end to end --------------------------------------------------------------------

struct Clip {
  SyntheticScenario scenario;
  SyntheticSequence sequence;
  fs::path dir;
};

const Clip& clip() {
  static const Clip c = [] {
    Clip out;
    out.scenario = make_scenario(reference_ptr(), {});
    out.sequence = generate(out.scenario, true);
    out.dir = fs::temp_directory_path() / "preshape_acceptance";
    fs::remove_all(out.dir);
    write_sequence(out.sequence, out.dir);
    save_model(*reference_ptr(), out.dir / "model.prfm");
    return out;
  }();
  return c;
}

PipelineConfig clip_config(double delta, const std::string& out) {
  const Clip& c = clip();
  PipelineConfig config;
  config.input = c.dir / "frames";
  config.landmarks = c.dir / "landmarks.jsonl";
  config.flow = c.dir / "flow";
  config.model = c.dir / "model.prfm";
  config.out = c.dir / out;
  config.delta = delta;
  return config;
}

cv::Mat output_frame(const PipelineConfig& config, int f) {
  char name[32];
  std::snprintf(name, sizeof(name), "out_%06d.png", f);
  return cv::imread((config.out / name).string(), cv::IMREAD_UNCHANGED);
}

Outcome delta_zero() {
  const PipelineConfig config = clip_config(0.0, "out_zero");
  run(config);
  const Clip& c = clip();
  int same = 0;
  for (int f = 0; f < c.scenario.frame_count(); ++f) {
    const cv::Mat out = output_frame(config, f);
    same += !out.empty() && out.size() == c.sequence.frames[f].size() && cv::norm(out, c.sequence.frames[f], cv::NORM_INF) == 0.0;
  }
  return {same == c.scenario.frame_count(), fmt("%d/%d frames bit-identical", same, c.scenario.frame_count())};
}

// Symmetric mean distance between the output face outline and the reshaped
// model's projected silhouette.
double silhouette_deviation(const cv::Mat& out, const FaceMesh& truth, const RigidPose& pose, const Camera& cam) {
  const Silhouette sil = extract_fine_silhouette(truth, pose, cam, 4);
  const ContourDistance target(sil.closed_polyline());
  std::vector<Vec2> outline = face_boundary(out);
  const std::size_t n = outline.size();
  outline.push_back(outline.front());
  const ContourDistance got(outline);
  double a = 0, b = 0;
  for (std::size_t i = 0; i < n; ++i) a += target.distance(outline[i]);
  for (const auto& p : sil.points) b += got.distance(p);
  return 0.5 * (a / static_cast<double>(n) + b / static_cast<double>(sil.size()));
}

Outcome fidelity() {
  const Clip& c = clip();
  bool pass = true;
  std::string detail;
  for (const double delta : {0.5, -0.5}) {
    const PipelineConfig config = clip_config(delta, delta > 0 ? "out_plus" : "out_minus");
    run(config);
    std::vector<double> dev;
    for (int f = 0; f < c.scenario.frame_count(); ++f) {
      const FaceMesh truth = reshape(*c.scenario.model, c.scenario.alpha, c.scenario.betas[f], delta);
      dev.push_back(silhouette_deviation(output_frame(config, f), truth, c.scenario.poses[f], c.scenario.camera));
    }
    double mean = 0, var = 0;
    for (double d : dev) mean += d;
    mean /= static_cast<double>(dev.size());
    for (double d : dev) var += (d - mean) * (d - mean);
    var /= static_cast<double>(dev.size());
    pass = pass && mean <= 1.5 && var <= 0.5;
    detail += fmt("delta %+.1f: mean %.3f px, variance %.4f px^2; ", delta, mean, var);
  }
  return {pass, detail};
}

Outcome dense_vs_sparse() {
  const Clip& c = clip();
  const double delta = 1.5;
  bool pass = true;
  std::string detail;
  for (const int f : {0, 10, 20}) {
    WarpOptions options = warp_options(clip_config(delta, "unused"));
    const auto dense = reshape_frame(*c.scenario.model, c.scenario.camera, c.sequence.frames[f], c.scenario.alpha,
                                     c.scenario.betas[f], c.scenario.poses[f], delta, options);
    options.sparse_mode = true;
    const auto sparse = reshape_frame(*c.scenario.model, c.scenario.camera, c.sequence.frames[f], c.scenario.alpha,
                                      c.scenario.betas[f], c.scenario.poses[f], delta, options);
    const double gd = contour_gap(dense.plan.optimized, dense.original.points, dense.reshaped).max;
    const double gs = contour_gap(sparse.plan.optimized, sparse.original.points, sparse.reshaped).max;
    pass = pass && gd < gs;
    detail += fmt("frame %d: max gap %.2f px dense, %.2f px sparse; ", f, gd, gs);
  }
  return {pass, detail};
}

// --- oracles -----------------------------------------------------------------------

Outcome sdf_mls_grid_oracles() {
  std::string detail;
  bool pass = true;

  // analytic signed distances
  double circle_err = 0, box_err = 0;
  {
    const Vec2 c(100.3, 90.7);
    const double r = 40;
    std::vector<Vec2> poly;
    for (int i = 0; i <= 720; ++i) {
      const double a = 2 * std::numbers::pi * i / 720;
      poly.push_back(c + r * Vec2(std::cos(a), std::sin(a)));
    }
    poly.back() = poly.front();
    const SdfGrid sdf = compute_sdf(poly, 200, 180);
    for (int y = 0; y < 180; ++y)
      for (int x = 0; x < 200; ++x) circle_err = std::max(circle_err, std::abs(sdf.at(x, y) - ((Vec2(x, y) - c).norm() - r)));
  }
  {
    const Vec2 lo(50, 40), hi(150, 110);
    const std::vector<Vec2> poly = {lo, Vec2(hi.x(), lo.y()), hi, Vec2(lo.x(), hi.y()), lo};
    const SdfGrid sdf = compute_sdf(poly, 200, 150);
    for (int y = 0; y < 150; ++y)
      for (int x = 0; x < 200; ++x) {
        const Vec2 p(x, y);
        const Vec2 d = (p - 0.5 * (lo + hi)).cwiseAbs() - 0.5 * (hi - lo);
        const double exact = d.cwiseMax(0.0).norm() + std::min(std::max(d.x(), d.y()), 0.0);
        box_err = std::max(box_err, std::abs(sdf.at(x, y) - exact));
      }
  }
  pass = pass && circle_err <= 1.0 && box_err <= 1.0;
  detail += fmt("sdf max error circle %.3f px, box %.3f px; ", circle_err, box_err);

  // MLS on a similarity
  double mls_err = 0;
  {
    std::mt19937 rng(11);
    std::uniform_real_distribution<double> u(0, 200);
    std::vector<Vec2> p, q;
    const std::complex<double> a = 0.93 * std::polar(1.0, -0.4), b(12, 5);
    auto sim = [&](const Vec2& v) {
      const auto z = a * std::complex<double>(v.x(), v.y()) + b;
      return Vec2(z.real(), z.imag());
    };
    for (int i = 0; i < 40; ++i) {
      p.emplace_back(u(rng), u(rng));
      q.push_back(sim(p.back()));
    }
    for (int k = 0; k < 500; ++k) {
      const Vec2 v(u(rng), u(rng));
      mls_err = std::max(mls_err, (mls_deform(p, q, v) - sim(v)).norm());
    }
  }
  pass = pass && mls_err <= 1e-6;
  detail += fmt("mls similarity error %.2e; ", mls_err);

  // 5 x 5 grids against a dense normal-equation solve
  double grid_err = 0;
  {
    std::mt19937 rng(12);
    std::normal_distribution<double> n(0, 3);
    for (int trial = 0; trial < 20; ++trial) {
      const WarpGrid g = WarpGrid::uniform(5, 5, 41 + 7 * trial, 41 + 3 * trial);
      const GridRegion region{0, 4, 0, 4};
      const GridWeights w;
      std::vector<ControlConstraint> cons;
      for (int i : {g.index(1, 1 + trial % 3), g.index(3, 2)}) cons.push_back({i, g.rest[i] + Vec2(n(rng), n(rng))});
      if (trial == 0) cons = {{g.index(2, 2), g.rest[g.index(2, 2)] + Vec2(5, 0)}};
      const WarpGrid out = optimize_grid(g, cons, region, w);

      std::vector<bool> fixed(g.size());
      std::vector<Vec2> pos = g.rest;
      for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 5; ++c) fixed[g.index(r, c)] = region.on_rim(r, c);
      for (const auto& k : cons) {
        fixed[k.index] = true;
        pos[k.index] = k.target;
      }
      std::vector<int> cols(g.size(), -1);
      int unknowns = 0;
      for (int i = 0; i < g.size(); ++i)
        if (!fixed[i]) {
          cols[i] = unknowns;
          unknowns += 2;
        }
      Eigen::MatrixXd h = Eigen::MatrixXd::Zero(unknowns, unknowns);
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(unknowns);
      // each directed edge: w_l (d x e)^2 + w_r |d|^2, d = v_i - v_j
      auto add = [&](int i, int j) {
        const Vec2 e = (g.rest[i] - g.rest[j]).normalized();
        Eigen::Matrix2d q = w.w_r * Eigen::Matrix2d::Identity();
        const Eigen::RowVector2d cr(e.y(), -e.x());
        q += w.w_l * cr.transpose() * cr;
        for (int s = 0; s < 2; ++s) {
          const int a = s == 0 ? i : j, b = s == 0 ? j : i;
          if (cols[a] < 0) continue;
          h.block<2, 2>(cols[a], cols[a]) += q;
          if (cols[b] >= 0)
            h.block<2, 2>(cols[a], cols[b]) -= q;
          else
            rhs.segment<2>(cols[a]) += q * pos[b];
        }
      };
      for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 5; ++c) {
          if (c < 4) {
            add(g.index(r, c), g.index(r, c + 1));
            add(g.index(r, c + 1), g.index(r, c));
          }
          if (r < 4) {
            add(g.index(r, c), g.index(r + 1, c));
            add(g.index(r + 1, c), g.index(r, c));
          }
        }
      const Eigen::VectorXd x = h.fullPivLu().solve(rhs);
      for (int i = 0; i < g.size(); ++i) {
        const Vec2 want = cols[i] >= 0 ? Vec2(x.segment<2>(cols[i])) : pos[i];
        grid_err = std::max(grid_err, (out.positions[i] - want).norm());
      }
    }
  }
  pass = pass && grid_err <= 1e-8;
  detail += fmt("5x5 grid vs dense solve %.2e", grid_err);
  return {pass, detail};
}

double jacobian_mismatch(const LeastSquaresProblem& p, const Eigen::VectorXd& x) {
  Eigen::VectorXd r;
  SparseMatrix J;
  if (!p.evaluate(x, r, &J)) return INFINITY;
  const Eigen::MatrixXd jd(J);
  double worst = 0;
  for (int c = 0; c < x.size(); ++c) {
    Eigen::VectorXd xp = x, xm = x, rp, rm;
    xp(c) += 1e-6;
    xm(c) -= 1e-6;
    if (!p.evaluate(xp, rp, nullptr) || !p.evaluate(xm, rm, nullptr)) return INFINITY;
    const Eigen::VectorXd fd = (rp - rm) / 2e-6;
    worst = std::max(worst, (fd - jd.col(c)).cwiseAbs().maxCoeff() / std::max(1.0, jd.col(c).cwiseAbs().maxCoeff()));
  }
  return worst;
}

bool decreasing(const SolverSummary& s) {
  for (std::size_t i = 1; i < s.energy_history.size(); ++i)
    if (!(s.energy_history[i] < s.energy_history[i - 1])) return false;
  return s.final_energy <= s.initial_energy;
}

Outcome solver_health() {
  const Clip& c = clip();
  const FaceModel& m = *c.scenario.model;
  const Camera& cam = c.scenario.camera;
  const auto& obs = c.sequence.observations;
  std::mt19937 rng(13);
  std::normal_distribution<double> n(0, 1);
  auto noise = [&](int size, double scale) {
    Eigen::VectorXd v(size);
    for (int i = 0; i < size; ++i) v(i) = scale * n(rng);
    return v;
  };

  // derivatives, with contour, flow and temporal terms all present
  double worst = 0;
  const FaceMesh mean = assemble(m, ShapeCoeffs::zero(63), ExprCoeffs::neutral(6));
  std::vector<FrameSetup> setups;
  for (int f = 1; f <= 3; ++f) {
    FrameSetup s;
    s.obs = &obs[f];
    s.pose = c.scenario.poses[f];
    s.contour_anchors = contour_correspondences(m, obs[f], extract_silhouette(mean, s.pose, cam));
    s.prev = PreviousFrame{c.scenario.poses[f - 1], c.scenario.betas[f - 1]};
    s.flow = select_flow_samples(m, c.scenario.alpha, *s.prev, cam, *obs[f].flow, {});
    setups.push_back(s);
  }
  for (int trial = 0; trial < 10; ++trial) {
    const PoseProblem pose(m, cam, {}, setups[0], noise(63, 0.5), noise(6, 0.2));
    RigidPose at = setups[0].pose;
    at.rotation += noise(3, 0.03);
    at.translation += noise(3, 1.0);
    worst = std::max(worst, jacobian_mismatch(pose, PoseProblem::pack(at)));
    const IdentityProblem identity(m, cam, {}, setups);
    worst = std::max(worst, jacobian_mismatch(identity, noise(identity.parameter_count(), 0.5)));
    const ExpressionProblem expression(m, cam, {}, setups[1], c.scenario.alpha.alpha);
    worst = std::max(worst, jacobian_mismatch(expression, noise(6, 0.4)));
  }
  {
    const WarpGrid g = WarpGrid::uniform(8, 8, 71, 71);
    const GridRegion region{0, 7, 0, 7};
    const WarpGrid marked = optimize_grid(g, {{g.index(3, 3), g.rest[g.index(3, 3)] + Vec2(4, -3)}}, region);
    const auto problem = sparse_mode_problem(marked, region);
    for (int trial = 0; trial < 10; ++trial) {
      const Eigen::VectorXd x = free_point_vector(marked);
      worst = std::max(worst, jacobian_mismatch(*problem, x + noise(static_cast<int>(x.size()), 1.5)));
    }
  }

  // every solve along a tracked clip lowers the energy on each accepted step
  int solves = 0, monotone = 0;
  TrackingOptions one_round;
  one_round.identity_rounds = 1;
  std::vector<RigidPose> poses;
  for (int f = 0; f < 10; ++f) {
    const std::optional<PreviousFrame> prev =
        f > 0 ? std::optional(PreviousFrame{poses.back(), ExprCoeffs::neutral(6)}) : std::nullopt;
    const auto est = estimate_pose(m, obs[f], prev ? &*prev : nullptr, cam, {}, {},
                                   f > 0 ? poses.back() : initial_pose(m, obs[f], cam));
    poses.push_back(est.pose);
    ++solves;
    monotone += decreasing(est.summary);
  }
  const auto id = estimate_identity(m, std::span(obs).first(10), poses, cam, {}, one_round);
  ++solves;
  monotone += decreasing(id.summary);
  for (int f = 0; f < 10; ++f) {
    const std::optional<PreviousFrame> prev =
        f > 0 ? std::optional(PreviousFrame{poses[f - 1], id.expressions[f - 1]}) : std::nullopt;
    const auto est = estimate_expression(m, id.shape, obs[f], poses[f], prev ? &*prev : nullptr, cam, {}, {});
    ++solves;
    monotone += decreasing(est.summary);
  }

  // every grid solve ends at or below its MLS start
  int grids = 0, grids_ok = 0;
  for (const double delta : {0.5, -0.5, 1.5})
    for (const bool sparse : {false, true})
      for (const int f : {0, 15, 29}) {
        WarpOptions o;
        o.sparse_mode = sparse;
        const auto r = reshape_frame(m, cam, c.sequence.frames[f], c.scenario.alpha, c.scenario.betas[f],
                                     c.scenario.poses[f], delta, o);
        ++grids;
        grids_ok += r.plan.optimized_energy <= r.plan.mls_energy;
      }

  const bool pass = worst <= 1e-4 && monotone == solves && grids_ok == grids;
  return {pass, fmt("worst jacobian mismatch %.2e; %d/%d solves monotone; %d/%d grids at or below MLS start", worst,
                    monotone, solves, grids_ok, grids)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"constants audit", constants_audit},
      {"synthetic round trip", round_trip},
      {"jitter robustness", jitter_robustness},
      {"flow outlier rejection", flow_outlier},
      {"delta=0 end-to-end no-op", delta_zero},
      {"reshape fidelity", fidelity},
      {"dense vs sparse ablation", dense_vs_sparse},
      {"sdf / mls / grid oracles", sdf_mls_grid_oracles},
      {"solver health", solver_health},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << fmt(" [%.1f s]", seconds_since(t0)) << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
