#pragma once

// Experiment harness behind the command-line tool: dataset generation,
// training, simulation and control evaluation, sweeps and report assembly.
// Every report is a deterministic function of its inputs; wall-clock timings
// are written to a separate file.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckpm/control.hpp"
#include "ckpm/embeddings.hpp"
#include "ckpm/envs.hpp"
#include "ckpm/sysid.hpp"
#include "ckpm/training.hpp"

namespace ckpm::bench {

enum class EvalMode { Block, Diag, None, KPM };

std::string to_string(EvalMode mode);
EvalMode eval_mode_from_string(const std::string& name);

struct EvalSpec {
  int sim_horizon = 100;
  int control_horizon = 0;  // actions; 0 picks the environment's protocol
  int mpc_period = 0;       // 0 picks the environment's protocol
  int trials = 50;
  double action_penalty = kDefaultActionPenalty;
};

struct ModelSpec {
  EvalMode mode = EvalMode::Block;
  int m = 32;
  int hidden = 128;
  int effect_dim = 0;
  int sysid_episodes = 8;
  int poly_order = 3;
  double ridge_factor = 1e-3;  // trace-scaled, evaluation-time sysid; matches training
};

enum class SweepAxis { EmbeddingDim, SysidData };

struct SweepSpec {
  SweepAxis axis = SweepAxis::EmbeddingDim;
  std::vector<int> values;  // empty: the axis defaults
  std::vector<std::uint64_t> seeds{0};
};

struct ExperimentSpec {
  EnvConfig env = EnvConfig::defaults(EnvKind::Rope2D, 5);  // kind, dt and nominal parameters
  std::array<int, 2> object_count_range{5, 9};
  std::array<int, 2> extrapolation_range{10, 14};
  int episodes = 500;
  int episode_length = 100;
  double split = 0.9;
  bool randomize_params = true;
  std::uint64_t seed = 0;
  EvalSpec eval;
  ModelSpec model;
  TrainConfig train;
  SweepSpec sweep;
  std::string output_dir = "out";
  std::string data_dir;    // empty: output_dir
  std::string checkpoint;  // empty: <output_dir>/checkpoint_<mode>.json

  void validate() const;
  std::filesystem::path data_path() const;
  std::filesystem::path checkpoint_path(EvalMode mode) const;
  int control_horizon() const;
  int mpc_period() const;
};

void to_json(nlohmann::json& j, const ExperimentSpec& s);
void from_json(const nlohmann::json& j, ExperimentSpec& s);
ExperimentSpec load_spec(const std::filesystem::path& path);

// Deterministic 64-bit seed derived from a base seed and a tag path.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

// Episode configuration k of a dataset: object count, seed and (optionally)
// randomised stiffness and damping drawn from the derived seed.
EnvConfig episode_config(const ExperimentSpec& spec, std::array<int, 2> range,
                         std::uint64_t stream, int index);
Trajectory generate_episode(const EnvConfig& config, int length, std::uint64_t policy_seed);

std::vector<Trajectory> read_episodes(const std::filesystem::path& path);
void write_episodes(const std::filesystem::path& path, const std::vector<Trajectory>& episodes);

// Hex SHA-1 of a byte string.
std::string sha1_hex(const std::string& bytes);
std::string file_bytes(const std::filesystem::path& path);
// Writes JSON with two-space indentation and a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

struct Quartiles {
  double q25 = 0.0, median = 0.0, q75 = 0.0, mean = 0.0;
};
// Linear interpolation between order statistics.
Quartiles quartiles(std::vector<double> values);

// Mean over all N*d entries of the squared difference.
double state_mse(const DenseMatrix& predicted, const DenseMatrix& truth);

struct DatagenResult {
  nlohmann::json manifest;
};
DatagenResult run_datagen(const ExperimentSpec& spec);

struct TrainOutput {
  KoopmanModel model;
  std::vector<LossRecord> curve;
  nlohmann::json report;
};
TrainOutput run_train(const ExperimentSpec& spec);

// Observation map plus the structure used for identification.
struct Pipeline {
  EvalMode mode = EvalMode::Block;
  std::unique_ptr<Observer> observer;
  std::optional<KoopmanModel> model;
};
Pipeline make_pipeline(const ExperimentSpec& spec, EvalMode mode);
Pipeline make_pipeline(const KoopmanModel& model, EvalMode mode);
Pipeline make_kpm_pipeline(int state_dim, int poly_order);

// Identifies dynamics from `count` fresh episodes sharing the test episode's
// configuration, with policy seeds derived from `seed`.
BlockDynamics identify_for_episode(const Pipeline& p, const SceneGraph& graph,
                                   const EnvConfig& config, int count, int length,
                                   std::uint64_t seed, double ridge_factor);

struct SimEpisode {
  std::vector<double> error;  // per step t = 1..horizon
  bool finite = true;
};
SimEpisode simulate_episode(const Pipeline& p, const Trajectory& test, const BlockDynamics& dyn,
                            int horizon);

struct SimReport {
  nlohmann::json report;
  std::vector<Quartiles> rows;  // one per t = 1..sim_horizon
  std::size_t episodes = 0;
  std::size_t non_finite = 0;
};
SimReport run_eval_sim(const ExperimentSpec& spec, EvalMode mode, bool extrapolate);
SimReport eval_sim(const ExperimentSpec& spec, const Pipeline& p,
                   const std::vector<Trajectory>& tests);

struct ControlReport {
  nlohmann::json report;
  std::vector<double> errors;
  Quartiles summary;
};
ControlReport run_eval_control(const ExperimentSpec& spec, EvalMode mode, bool extrapolate);
ControlReport eval_control(const ExperimentSpec& spec, const Pipeline& p,
                           const std::vector<Trajectory>& tests);

struct SweepRow {
  int value = 0;
  std::uint64_t seed = 0;
  Quartiles final_error;  // simulation error at t = sim_horizon
};
struct SweepReport {
  nlohmann::json report;
  std::vector<SweepRow> rows;
};
SweepReport run_sweep(const ExperimentSpec& spec);

nlohmann::json run_report(const ExperimentSpec& spec);

}  // namespace ckpm::bench
