// ckpm: data generation, training, evaluation and sweeps.
//
//   ckpm datagen      --config exp.json --out run/
//   ckpm train        --config exp.json --out run/ --mode Block
//   ckpm eval-sim     --config exp.json --out run/ --mode KPM --extrapolate
//   ckpm eval-control --config exp.json --out run/ --lambda 1e-3
//   ckpm sweep        --config exp.json --out run/
//   ckpm report       --out run/
//
// Exit status: 0 success, 2 configuration error, 3 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ckpm/bench.hpp"
#include "ckpm/errors.hpp"

namespace fs = std::filesystem;
using namespace ckpm;
using namespace ckpm::bench;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Overrides {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  bool extrapolate = false;
  std::optional<int> m;
  std::optional<double> lambda;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "experiment JSON");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "base seed");
  cmd->add_option("--mode", o.mode, "Block, Diag, None or KPM");
  cmd->add_flag("--extrapolate", o.extrapolate, "evaluate on the larger-system test set");
  cmd->add_option("--m", o.m, "embedding width per object");
  cmd->add_option("--lambda", o.lambda, "control action penalty");
}

ExperimentSpec resolve(const Overrides& o) {
  ExperimentSpec spec = o.config.empty() ? ExperimentSpec{} : load_spec(o.config);
  if (!o.out.empty()) spec.output_dir = o.out;
  if (o.seed) {
    spec.seed = *o.seed;
    spec.train.seed = *o.seed;
  }
  if (o.mode) spec.model.mode = eval_mode_from_string(*o.mode);
  if (o.m) spec.model.m = *o.m;
  if (o.lambda) spec.eval.action_penalty = *o.lambda;
  spec.validate();
  return spec;
}

// Wall-clock seconds per command, kept out of the reports.
void record_timing(const ExperimentSpec& spec, const std::string& key, double seconds) {
  const fs::path path = fs::path(spec.output_dir) / "timings.json";
  nlohmann::json t = nlohmann::json::object();
  if (fs::exists(path)) {
    try {
      t = nlohmann::json::parse(file_bytes(path));
    } catch (const nlohmann::json::exception&) {
      t = nlohmann::json::object();
    }
  }
  t[key] = seconds;
  write_json(path, t);
}

int run(const std::string& command, const Overrides& o) {
  const ExperimentSpec spec = resolve(o);
  const auto t0 = std::chrono::steady_clock::now();
  std::string key = command;
  if (command == "datagen") {
    const auto r = run_datagen(spec);
    std::printf("wrote %d train / %d test episodes to %s\n", r.manifest["counts"]["train"].get<int>(),
                r.manifest["counts"]["test"].get<int>(), spec.data_path().string().c_str());
  } else if (command == "train") {
    key += "_" + to_string(spec.model.mode);
    const auto r = run_train(spec);
    std::printf("trained %s model (%zu parameters), loss %.6g -> %.6g\n",
                to_string(spec.model.mode).c_str(), r.model.parameter_count(),
                r.curve.empty() ? 0.0 : r.curve.front().values.total,
                r.curve.empty() ? 0.0 : r.curve.back().values.total);
  } else if (command == "eval-sim") {
    key += "_" + to_string(spec.model.mode) + (o.extrapolate ? "_extrapolate" : "");
    const auto r = run_eval_sim(spec, spec.model.mode, o.extrapolate);
    std::printf("%s: median simulation error at t=%d is %.6g over %zu episodes\n",
                to_string(spec.model.mode).c_str(), spec.eval.sim_horizon, r.rows.back().median,
                r.episodes);
  } else if (command == "eval-control") {
    key += "_" + to_string(spec.model.mode) + (o.extrapolate ? "_extrapolate" : "");
    const auto r = run_eval_control(spec, spec.model.mode, o.extrapolate);
    std::printf("%s: median control error %.6g over %zu episodes\n", to_string(spec.model.mode).c_str(),
                r.summary.median, r.errors.size());
  } else if (command == "sweep") {
    const auto r = run_sweep(spec);
    std::printf("sweep wrote %zu rows\n", r.rows.size());
  } else if (command == "report") {
    const auto r = run_report(spec);
    std::printf("summarised %zu reports\n", r["reports"].size());
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record_timing(spec, key, seconds);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compositional Koopman models: data, training and evaluation"};
  app.require_subcommand(1);
  Overrides o;
  for (const char* name : {"datagen", "train", "eval-sim", "eval-control", "sweep", "report"}) {
    add_common(app.add_subcommand(name), o);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
