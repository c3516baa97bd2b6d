#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "preshape/errors.hpp"
#include "preshape/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a synthetic portrait sequence and the reference face model"};
  std::string out;
  preshape::ScenarioOptions opt;
  double jitter = 0.0;
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--frames", opt.frames, "frame count")->check(CLI::PositiveNumber);
  app.add_option("--seed", opt.seed, "random seed");
  app.add_option("--alpha-scale", opt.alpha_scale, "identity coefficient scale");
  app.add_option("--expression-scale", opt.expression_scale, "expression amplitude");
  app.add_option("--yaw", opt.yaw_degrees, "yaw amplitude (degrees)");
  app.add_option("--jitter", jitter, "landmark noise sigma (px)");
  CLI11_PARSE(app, argc, argv);

  try {
    auto model = std::make_shared<const preshape::FaceModel>(preshape::make_reference_model());
    auto scenario = preshape::make_scenario(model, opt);
    scenario.landmark_jitter = jitter;
    const auto seq = preshape::generate(scenario);
    preshape::write_sequence(seq, out);
    preshape::save_model(*model, std::filesystem::path(out) / "model.prfm");

    nlohmann::json truth;
    truth["alpha"] = std::vector<double>(scenario.alpha.alpha.data(), scenario.alpha.alpha.data() + scenario.alpha.alpha.size());
    for (int f = 0; f < scenario.frame_count(); ++f) {
      const auto& p = scenario.poses[static_cast<std::size_t>(f)];
      const auto& b = scenario.betas[static_cast<std::size_t>(f)].beta;
      truth["frames"].push_back({{"rotation", {p.rotation.x(), p.rotation.y(), p.rotation.z()}},
                                 {"translation", {p.translation.x(), p.translation.y(), p.translation.z()}},
                                 {"beta", std::vector<double>(b.data(), b.data() + b.size())}});
    }
    std::ofstream(std::filesystem::path(out) / "truth.json") << truth.dump(1) << '\n';
    std::cerr << "wrote " << scenario.frame_count() << " frames to " << out << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
