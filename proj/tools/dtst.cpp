// dtst <command> --config <path> [--seed N] [--out DIR]
//
// Exit status: 0 success, 1 usage error, 2 run error. Failures print one JSON
// error record on stderr.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dtst/dtst.hpp"

namespace {

constexpr int kUsageError = 1;
constexpr int kRunError = 2;

int report_error(int code, const std::string& kind, const std::string& message, const std::string& command) {
  nlohmann::json record = {{"status", "error"}, {"exit_code", code}, {"kind", kind}, {"message", message}};
  if (!command.empty()) record["command"] = command;
  std::cerr << record.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic token selective transformer on synthetic cross-view data"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  for (const char* name : {"train", "eval", "ablate", "gradcheck"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "Path to a key = value config file")->required();
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--out", out_dir, "Override output_dir");
  }
  app.get_subcommand("train")->description("Train a model; writes checkpoint, log, reports");
  app.get_subcommand("eval")->description("Score eval.checkpoint (and eval.baseline) on the test split");
  app.get_subcommand("ablate")->description("Train one model per (heads, K, position) cell");
  app.get_subcommand("gradcheck")->description("Finite-difference check of every parameter group");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(kUsageError, "usage", e.what(), "");
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    dtst::ExperimentConfig cfg = dtst::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (out_dir) cfg.output_dir = *out_dir;
    cfg.validate();
    if (command == "train") dtst::run_train(cfg, std::cout);
    else if (command == "eval") dtst::run_eval(cfg, std::cout);
    else if (command == "ablate") dtst::run_ablate(cfg, std::cout);
    else dtst::run_gradcheck(cfg, std::cout);
  } catch (const dtst::Error& e) {
    return report_error(kRunError, e.kind(), e.what(), command);
  } catch (const std::exception& e) {
    return report_error(kRunError, "internal", e.what(), command);
  }
  return 0;
}
