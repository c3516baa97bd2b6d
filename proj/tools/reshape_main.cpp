#include <deque>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "preshape/errors.hpp"
#include "preshape/pipeline.hpp"

using preshape::ConfigValueType;

int main(int argc, char** argv) {
  CLI::App app{"Reshape the face in a portrait frame sequence"};
  std::string config_file;
  app.add_option("--config", config_file, "flat JSON config; flags override its values");

  // One flag per config key, collected as JSON overrides.
  const auto& keys = preshape::config_keys();
  std::vector<std::string> text(keys.size());
  std::deque<bool> flags(keys.size(), false);
  std::vector<CLI::Option*> opts(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::string name = "--" + keys[i].name;
    if (keys[i].type == ConfigValueType::Bool) {
      opts[i] = app.add_flag(name + ",!--no-" + keys[i].name, flags[i], keys[i].help);
    } else {
      opts[i] = app.add_option(name, text[i], keys[i].help);
    }
  }

  CLI11_PARSE(app, argc, argv);

  try {
    nlohmann::json overrides = nlohmann::json::object();
    for (std::size_t i = 0; i < keys.size(); ++i) {
      if (opts[i]->count() == 0) continue;
      const std::string& key = keys[i].name;
      switch (keys[i].type) {
        case ConfigValueType::Bool:
          overrides[key] = flags[i];
          break;
        case ConfigValueType::Path:
        case ConfigValueType::String:
          overrides[key] = text[i];
          break;
        case ConfigValueType::Int:
          try {
            std::size_t used = 0;
            const long v = std::stol(text[i], &used);
            if (used != text[i].size()) throw std::invalid_argument(text[i]);
            overrides[key] = static_cast<int>(v);
          } catch (const std::logic_error&) {
            throw preshape::ConfigError("--" + key + " expects an integer, got '" + text[i] + "'");
          }
          break;
        case ConfigValueType::Double:
          try {
            std::size_t used = 0;
            const double v = std::stod(text[i], &used);
            if (used != text[i].size()) throw std::invalid_argument(text[i]);
            overrides[key] = v;
          } catch (const std::logic_error&) {
            throw preshape::ConfigError("--" + key + " expects a number, got '" + text[i] + "'");
          }
          break;
      }
    }
    const auto config = preshape::parse_config(
        config_file.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_file), overrides);
    const auto report = preshape::run(config, &std::cerr);
    std::cerr << "done: " << report.frames << " frames written to " << config.out.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return preshape::exit_code_for(e);
  }
}
