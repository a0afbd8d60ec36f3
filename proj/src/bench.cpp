#include "ckpm/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <openssl/evp.h>

#include "ckpm/errors.hpp"
#include "ckpm/scene_graph.hpp"

namespace ckpm::bench {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTrainTestStream = 1;
constexpr std::uint64_t kExtrapolateStream = 2;
constexpr std::uint64_t kEvalStream = 100;

nlohmann::json number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

nlohmann::json quartiles_json(const Quartiles& q) {
  return {{"q25", number(q.q25)}, {"median", number(q.median)}, {"q75", number(q.q75)},
          {"mean", number(q.mean)}};
}

std::string family_of(EnvKind kind) {
  switch (kind) {
    case EnvKind::SpringBalls: return "complete";
    case EnvKind::Rope2D: return "rope";
    case EnvKind::SoftLattice2D: return "lattice";
  }
  return "";
}

std::string sweep_axis_name(SweepAxis a) {
  return a == SweepAxis::EmbeddingDim ? "embedding_dim" : "sysid_data";
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "embedding_dim") return SweepAxis::EmbeddingDim;
  if (s == "sysid_data") return SweepAxis::SysidData;
  throw ConfigError("unknown sweep axis '" + s + "' (expected embedding_dim or sysid_data)");
}

StructureMode structure_of(EvalMode mode) {
  switch (mode) {
    case EvalMode::Block:
    case EvalMode::KPM: return StructureMode::Block;
    case EvalMode::Diag: return StructureMode::Diag;
    case EvalMode::None: return StructureMode::None;
  }
  return StructureMode::Block;
}

std::string mode_suffix(EvalMode mode, bool extrapolate) {
  return to_string(mode) + (extrapolate ? "_extrapolate" : "");
}

// Resolved configuration without the filesystem locations, so that a report
// does not depend on where it was written.
nlohmann::json config_echo(const ExperimentSpec& spec) {
  nlohmann::json j = spec;
  j.erase("output_dir");
  j.erase("data_dir");
  j.erase("checkpoint");
  return j;
}

// Hash of the resolved configuration and the bytes of every input file.
std::string input_hash(const ExperimentSpec& spec, const std::vector<fs::path>& inputs) {
  std::string acc = config_echo(spec).dump();
  for (const auto& p : inputs) {
    acc += '\n';
    acc += p.filename().string();
    acc += ':';
    acc += sha1_hex(file_bytes(p));
  }
  return sha1_hex(acc);
}

std::vector<Trajectory> limit(std::vector<Trajectory> v, int trials) {
  if (trials > 0 && v.size() > static_cast<std::size_t>(trials)) v.resize(static_cast<std::size_t>(trials));
  return v;
}

fs::path test_file(const ExperimentSpec& spec, bool extrapolate) {
  return spec.data_path() / (extrapolate ? "extrapolate.jsonl" : "test.jsonl");
}

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string format_real(double v) {
  if (!std::isfinite(v)) return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<EmbeddingSequence> observe_episodes(const Pipeline& p, const SceneGraph& graph,
                                                const std::vector<Trajectory>& episodes) {
  std::vector<EmbeddingSequence> out;
  for (const auto& ep : episodes) {
    EmbeddingSequence seq;
    seq.g = p.observer->observe(graph, ep.states);
    const double bound = ep.config.params.action_bound;
    for (const auto& u : ep.controls) seq.u.push_back(scale_controls(u, bound));
    out.push_back(std::move(seq));
  }
  return out;
}

bool all_finite(const DenseMatrix& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::Block: return "Block";
    case EvalMode::Diag: return "Diag";
    case EvalMode::None: return "None";
    case EvalMode::KPM: return "KPM";
  }
  return "";
}

EvalMode eval_mode_from_string(const std::string& name) {
  if (name == "Block") return EvalMode::Block;
  if (name == "Diag") return EvalMode::Diag;
  if (name == "None") return EvalMode::None;
  if (name == "KPM") return EvalMode::KPM;
  throw ConfigError("unknown mode '" + name + "' (expected Block, Diag, None or KPM)");
}

void ExperimentSpec::validate() const {
  env.validate();
  for (const auto& r : {object_count_range, extrapolation_range}) {
    if (r[0] > r[1]) throw ConfigError("object count range is empty");
    EnvConfig probe = env;
    probe.num_objects = r[0];
    probe.validate();
    probe.num_objects = r[1];
    probe.validate();
  }
  if (episodes < 2) throw ConfigError("episodes must be at least 2");
  if (episode_length < 2) throw ConfigError("episode_length must be at least 2");
  if (!(split > 0.0 && split < 1.0)) throw ConfigError("split must be in (0, 1)");
  const int train_count = static_cast<int>(std::lround(episodes * split));
  if (train_count < 1 || train_count >= episodes) {
    throw ConfigError("split leaves an empty train or test set");
  }
  if (eval.sim_horizon < 1 || eval.sim_horizon > episode_length) {
    throw ConfigError("sim_horizon must be in [1, episode_length]");
  }
  if (eval.trials < 1) throw ConfigError("trials must be at least 1");
  if (!(eval.action_penalty >= 0.0)) throw ConfigError("action_penalty must be non-negative");
  if (control_horizon() < 1 || control_horizon() >= episode_length) {
    throw ConfigError("control_horizon must be in [1, episode_length)");
  }
  if (mpc_period() < 1) throw ConfigError("mpc_period must be at least 1");
  if (model.m < 1 || model.hidden < 1 || model.effect_dim < 0) {
    throw ConfigError("model widths must be positive");
  }
  if (model.sysid_episodes < 1) throw ConfigError("sysid_episodes must be at least 1");
  if (model.poly_order < 1) throw ConfigError("poly_order must be at least 1");
  if (!(model.ridge_factor >= 0.0)) throw ConfigError("ridge_factor must be non-negative");
  train.validate();
  if (sweep.seeds.empty()) throw ConfigError("sweep needs at least one seed");
  for (int v : sweep.values) {
    if (v < 1) throw ConfigError("sweep values must be positive");
  }
}

fs::path ExperimentSpec::data_path() const { return data_dir.empty() ? fs::path(output_dir) : fs::path(data_dir); }

fs::path ExperimentSpec::checkpoint_path(EvalMode mode) const {
  if (!checkpoint.empty()) return checkpoint;
  // The unstructured ablation reuses the Block-trained observables.
  const EvalMode trained = mode == EvalMode::Diag ? EvalMode::Diag : EvalMode::Block;
  return fs::path(output_dir) / ("checkpoint_" + to_string(trained) + ".json");
}

int ExperimentSpec::control_horizon() const {
  if (eval.control_horizon > 0) return eval.control_horizon;
  switch (env.env_kind) {
    case EnvKind::Rope2D: return 40;
    case EnvKind::SoftLattice2D: return 64;
    case EnvKind::SpringBalls: return 19;
  }
  return 40;
}

int ExperimentSpec::mpc_period() const {
  if (eval.mpc_period > 0) return eval.mpc_period;
  return env.env_kind == EnvKind::SoftLattice2D ? 32 : control_horizon();
}

void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  j = nlohmann::json{
      {"env", s.env},
      {"object_count_range", s.object_count_range},
      {"extrapolation_range", s.extrapolation_range},
      {"episodes", s.episodes},
      {"episode_length", s.episode_length},
      {"split", s.split},
      {"randomize_params", s.randomize_params},
      {"seed", s.seed},
      {"eval",
       {{"sim_horizon", s.eval.sim_horizon},
        {"control_horizon", s.control_horizon()},
        {"mpc_period", s.mpc_period()},
        {"trials", s.eval.trials},
        {"action_penalty", s.eval.action_penalty}}},
      {"model",
       {{"mode", to_string(s.model.mode)},
        {"m", s.model.m},
        {"hidden", s.model.hidden},
        {"effect_dim", s.model.effect_dim},
        {"sysid_episodes", s.model.sysid_episodes},
        {"poly_order", s.model.poly_order},
        {"ridge_factor", s.model.ridge_factor}}},
      {"train", s.train},
      {"sweep",
       {{"axis", sweep_axis_name(s.sweep.axis)}, {"values", s.sweep.values}, {"seeds", s.sweep.seeds}}},
      {"output_dir", s.output_dir},
      {"data_dir", s.data_dir},
      {"checkpoint", s.checkpoint}};
}

void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  try {
    ExperimentSpec d;
    if (j.contains("env")) {
      const auto& e = j.at("env");
      const EnvKind kind = env_kind_from_string(e.value("env_kind", to_string(d.env.env_kind)));
      EnvConfig base = EnvConfig::defaults(kind, e.value("num_objects", 5));
      nlohmann::json merged = base;
      merged.merge_patch(e);
      s.env = merged.get<EnvConfig>();
    } else {
      s.env = d.env;
    }
    s.object_count_range = j.value("object_count_range", d.object_count_range);
    s.extrapolation_range = j.value("extrapolation_range", d.extrapolation_range);
    s.episodes = j.value("episodes", d.episodes);
    s.episode_length = j.value("episode_length", d.episode_length);
    s.split = j.value("split", d.split);
    s.randomize_params = j.value("randomize_params", d.randomize_params);
    s.seed = j.value("seed", d.seed);
    const nlohmann::json ev = j.value("eval", nlohmann::json::object());
    s.eval.sim_horizon = ev.value("sim_horizon", d.eval.sim_horizon);
    s.eval.control_horizon = ev.value("control_horizon", d.eval.control_horizon);
    s.eval.mpc_period = ev.value("mpc_period", d.eval.mpc_period);
    s.eval.trials = ev.value("trials", d.eval.trials);
    s.eval.action_penalty = ev.value("action_penalty", d.eval.action_penalty);
    const nlohmann::json mo = j.value("model", nlohmann::json::object());
    s.model.mode = eval_mode_from_string(mo.value("mode", to_string(d.model.mode)));
    s.model.m = mo.value("m", d.model.m);
    s.model.hidden = mo.value("hidden", d.model.hidden);
    s.model.effect_dim = mo.value("effect_dim", d.model.effect_dim);
    s.model.sysid_episodes = mo.value("sysid_episodes", d.model.sysid_episodes);
    s.model.poly_order = mo.value("poly_order", d.model.poly_order);
    s.model.ridge_factor = mo.value("ridge_factor", d.model.ridge_factor);
    s.train = j.value("train", nlohmann::json::object()).get<TrainConfig>();
    const nlohmann::json sw = j.value("sweep", nlohmann::json::object());
    s.sweep.axis = sweep_axis_from_string(sw.value("axis", sweep_axis_name(d.sweep.axis)));
    s.sweep.values = sw.value("values", d.sweep.values);
    s.sweep.seeds = sw.value("seeds", d.sweep.seeds);
    s.output_dir = j.value("output_dir", d.output_dir);
    s.data_dir = j.value("data_dir", d.data_dir);
    s.checkpoint = j.value("checkpoint", d.checkpoint);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  }
}

ExperimentSpec load_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return j.get<ExperimentSpec>();
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

EnvConfig episode_config(const ExperimentSpec& spec, std::array<int, 2> range, std::uint64_t stream,
                         int index) {
  std::mt19937_64 rng(derive_seed(spec.seed, stream, static_cast<std::uint64_t>(index)));
  EnvConfig c = spec.env;
  c.num_objects = std::uniform_int_distribution<int>(range[0], range[1])(rng);
  c.seed = rng();
  if (spec.randomize_params) {
    std::uniform_real_distribution<double> factor(0.5, 2.0);
    c.params.stiffness *= factor(rng);
    c.params.damping *= factor(rng);
  }
  c.validate();
  return c;
}

Trajectory generate_episode(const EnvConfig& config, int length, std::uint64_t policy_seed) {
  Environment env(config);
  return rollout_env(env, env.initial_state(), random_exploration_policy(env, policy_seed), length);
}

std::vector<Trajectory> read_episodes(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open episode file " + path.string());
  std::vector<Trajectory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(trajectory_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_episodes(const fs::path& path, const std::vector<Trajectory>& episodes) {
  std::string text;
  for (const auto& ep : episodes) {
    text += trajectory_to_json_line(ep);
    text += '\n';
  }
  write_text(path, text);
}

std::string sha1_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  std::ostringstream hex;
  for (unsigned int k = 0; k < len; ++k) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[k]);
  }
  return hex.str();
}

std::string file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

Quartiles quartiles(std::vector<double> values) {
  Quartiles q;
  if (values.empty()) return q;
  for (double& v : values) {
    if (std::isnan(v)) v = std::numeric_limits<double>::infinity();
  }
  std::sort(values.begin(), values.end());
  auto at = [&](double frac) {
    const double pos = frac * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double w = pos - static_cast<double>(lo);
    if (w == 0.0) return values[lo];
    return values[lo] + w * (values[hi] - values[lo]);
  };
  q.q25 = at(0.25);
  q.median = at(0.5);
  q.q75 = at(0.75);
  double s = 0.0;
  for (double v : values) s += v;
  q.mean = s / static_cast<double>(values.size());
  return q;
}

double state_mse(const DenseMatrix& predicted, const DenseMatrix& truth) {
  require_same_shape(predicted, truth, "state_mse");
  double s = 0.0;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const double d = predicted.data()[k] - truth.data()[k];
    s += d * d;
  }
  return truth.size() == 0 ? 0.0 : s / static_cast<double>(truth.size());
}

DatagenResult run_datagen(const ExperimentSpec& spec) {
  spec.validate();
  const int train_count = static_cast<int>(std::lround(spec.episodes * spec.split));
  const int test_count = spec.episodes - train_count;
  std::vector<Trajectory> train, test, extrapolate;
  for (int k = 0; k < spec.episodes; ++k) {
    const EnvConfig c = episode_config(spec, spec.object_count_range, kTrainTestStream, k);
    Trajectory t = generate_episode(c, spec.episode_length, derive_seed(c.seed, 7));
    (k < train_count ? train : test).push_back(std::move(t));
  }
  for (int k = 0; k < test_count; ++k) {
    const EnvConfig c = episode_config(spec, spec.extrapolation_range, kExtrapolateStream, k);
    extrapolate.push_back(generate_episode(c, spec.episode_length, derive_seed(c.seed, 7)));
  }
  const fs::path dir = spec.data_path();
  fs::create_directories(dir);
  write_episodes(dir / "train.jsonl", train);
  write_episodes(dir / "test.jsonl", test);
  write_episodes(dir / "extrapolate.jsonl", extrapolate);

  nlohmann::json files = nlohmann::json::object();
  for (const char* name : {"train.jsonl", "test.jsonl", "extrapolate.jsonl"}) {
    files[name] = sha1_hex(file_bytes(dir / name));
  }
  DatagenResult r;
  r.manifest = {{"command", "datagen"},
                {"config", config_echo(spec)},
                {"input_hash", input_hash(spec, {})},
                {"counts", {{"train", train_count}, {"test", test_count}, {"extrapolate", test_count}}},
                {"object_count_range", spec.object_count_range},
                {"extrapolation_range", spec.extrapolation_range},
                {"states_per_episode", spec.episode_length},
                {"controls_per_episode", spec.episode_length - 1},
                {"parameter_randomization",
                 spec.randomize_params ? "stiffness and damping x U[0.5, 2.0]" : "none"},
                {"files", files}};
  write_json(dir / "manifest.json", r.manifest);
  return r;
}

TrainOutput run_train(const ExperimentSpec& spec) {
  spec.validate();
  if (spec.model.mode != EvalMode::Block && spec.model.mode != EvalMode::Diag) {
    throw ConfigError("training supports --mode Block or Diag, got " + to_string(spec.model.mode));
  }
  const fs::path train_path = spec.data_path() / "train.jsonl";
  const std::vector<Trajectory> data = read_episodes(train_path);
  if (data.empty()) throw ConfigError("training set " + train_path.string() + " is empty");
  Environment env(data.front().config);
  const SceneGraph graph = build_graph(env);

  ModelConfig mc;
  mc.family = family_of(env.config().env_kind);
  mc.state_dim = env.state_dim();
  mc.num_object_types = graph.num_object_types();
  mc.num_relation_types = graph.h();
  mc.m = spec.model.m;
  mc.hidden = spec.model.hidden;
  mc.effect_dim = spec.model.effect_dim;
  mc.standardize = true;
  TrainConfig tc = spec.train;
  tc.structure = structure_of(spec.model.mode);

  TrainOutput out;
  TrainResult r = train(tc, data, KoopmanModel::init(mc, derive_seed(tc.seed, 11)));
  out.model = std::move(r.model);
  out.curve = std::move(r.curve);

  const fs::path dir(spec.output_dir);
  fs::create_directories(dir);
  const fs::path ckpt = spec.checkpoint_path(spec.model.mode);
  save_checkpoint(out.model, ckpt.string());
  const fs::path curve = dir / ("loss_curve_" + to_string(spec.model.mode) + ".csv");
  write_loss_curve(curve.string(), out.curve);

  const LossValues last = out.curve.empty() ? LossValues{} : out.curve.back().values;
  const LossValues first = out.curve.empty() ? LossValues{} : out.curve.front().values;
  out.report = {{"command", "train"},
                {"config", config_echo(spec)},
                {"input_hash", input_hash(spec, {train_path})},
                {"mode", to_string(spec.model.mode)},
                {"episodes", data.size()},
                {"parameter_count", out.model.parameter_count()},
                {"checkpoint", ckpt.filename().string()},
                {"checkpoint_sha1", sha1_hex(file_bytes(ckpt))},
                {"loss_curve", curve.filename().string()},
                {"first", {{"total", first.total}, {"ae", first.ae}, {"pred", first.pred}, {"metric", first.metric}}},
                {"last", {{"total", last.total}, {"ae", last.ae}, {"pred", last.pred}, {"metric", last.metric}}}};
  write_json(dir / ("train_report_" + to_string(spec.model.mode) + ".json"), out.report);
  return out;
}

Pipeline make_pipeline(const KoopmanModel& model, EvalMode mode) {
  if (mode == EvalMode::KPM) throw ArgumentError("KPM does not use a learned model");
  Pipeline p;
  p.mode = mode;
  p.model = model;
  p.observer = make_learned_observer(model);
  return p;
}

Pipeline make_kpm_pipeline(int state_dim, int poly_order) {
  Pipeline p;
  p.mode = EvalMode::KPM;
  p.observer = make_poly_observer(state_dim, poly_order);
  return p;
}

Pipeline make_pipeline(const ExperimentSpec& spec, EvalMode mode) {
  if (mode == EvalMode::KPM) {
    return make_kpm_pipeline(ckpm::state_dim(spec.env.env_kind), spec.model.poly_order);
  }
  const fs::path ckpt = spec.checkpoint_path(mode);
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint " + ckpt.string() + " not found; run train first");
  return make_pipeline(load_checkpoint(ckpt.string()), mode);
}

BlockDynamics identify_for_episode(const Pipeline& p, const SceneGraph& graph,
                                   const EnvConfig& config, int count, int length,
                                   std::uint64_t seed, double ridge_factor) {
  if (p.model) p.model->check_graph(graph);
  std::vector<Trajectory> episodes;
  for (int k = 0; k < count; ++k) {
    episodes.push_back(generate_episode(config, length, derive_seed(seed, static_cast<std::uint64_t>(k))));
  }
  const auto data = observe_episodes(p, graph, episodes);
  return identify(structure_of(p.mode), data, graph, Ridge::relative(ridge_factor));
}

SimEpisode simulate_episode(const Pipeline& p, const Trajectory& test, const BlockDynamics& dyn,
                            int horizon) {
  if (horizon < 1 || static_cast<std::size_t>(horizon) > test.states.size()) {
    throw ConfigError("simulation horizon exceeds the test episode length");
  }
  Environment env(test.config);
  const SceneGraph graph = build_graph(env);
  const double bound = test.config.params.action_bound;
  std::vector<DenseMatrix> controls;
  for (int t = 0; t + 1 < horizon; ++t) {
    controls.push_back(scale_controls(test.controls[static_cast<std::size_t>(t)], bound));
  }
  const Embedding g1 = p.observer->observe(graph, test.states.front());
  std::vector<Embedding> roll{g1};
  if (!controls.empty()) roll = rollout_linear(dyn, g1, controls);
  SimEpisode out;
  bool finite = true;
  for (const auto& g : roll) finite = finite && all_finite(g);
  std::vector<DenseMatrix> x_hat;
  if (finite) x_hat = p.observer->reconstruct(graph, roll);
  for (int t = 0; t < horizon; ++t) {
    const auto k = static_cast<std::size_t>(t);
    double e = std::numeric_limits<double>::infinity();
    if (finite && all_finite(x_hat[k])) e = state_mse(x_hat[k], test.states[k].values);
    if (!std::isfinite(e)) out.finite = false;
    out.error.push_back(e);
  }
  return out;
}

SimReport eval_sim(const ExperimentSpec& spec, const Pipeline& p, const std::vector<Trajectory>& tests) {
  SimReport r;
  const int horizon = spec.eval.sim_horizon;
  std::vector<std::vector<double>> per_t(static_cast<std::size_t>(horizon));
  for (std::size_t k = 0; k < tests.size(); ++k) {
    const Trajectory& test = tests[k];
    Environment env(test.config);
    const SceneGraph graph = build_graph(env);
    const BlockDynamics dyn =
        identify_for_episode(p, graph, test.config, spec.model.sysid_episodes, spec.episode_length,
                             derive_seed(spec.seed, kEvalStream, k), spec.model.ridge_factor);
    const SimEpisode ep = simulate_episode(p, test, dyn, horizon);
    r.non_finite += ep.finite ? 0 : 1;
    for (int t = 0; t < horizon; ++t) per_t[static_cast<std::size_t>(t)].push_back(ep.error[static_cast<std::size_t>(t)]);
  }
  r.episodes = tests.size();
  nlohmann::json rows = nlohmann::json::array();
  for (int t = 0; t < horizon; ++t) {
    r.rows.push_back(quartiles(per_t[static_cast<std::size_t>(t)]));
    nlohmann::json row = quartiles_json(r.rows.back());
    row["t"] = t + 1;
    rows.push_back(row);
  }
  r.report = {{"mode", to_string(p.mode)},
              {"episodes", r.episodes},
              {"non_finite_episodes", r.non_finite},
              {"sysid_episodes", spec.model.sysid_episodes},
              {"sim_horizon", horizon},
              {"rows", rows}};
  return r;
}

SimReport run_eval_sim(const ExperimentSpec& spec, EvalMode mode, bool extrapolate) {
  spec.validate();
  const Pipeline p = make_pipeline(spec, mode);
  const fs::path tests_path = test_file(spec, extrapolate);
  const auto tests = limit(read_episodes(tests_path), spec.eval.trials);
  if (tests.empty()) throw ConfigError("no test episodes in " + tests_path.string());
  SimReport r = eval_sim(spec, p, tests);
  std::vector<fs::path> inputs{tests_path};
  if (mode != EvalMode::KPM) inputs.push_back(spec.checkpoint_path(mode));
  nlohmann::json head = {{"command", "eval-sim"},
                         {"config", config_echo(spec)},
                         {"input_hash", input_hash(spec, inputs)},
                         {"extrapolate", extrapolate}};
  head.update(r.report);
  r.report = head;
  const fs::path dir(spec.output_dir);
  const std::string suffix = mode_suffix(mode, extrapolate);
  write_json(dir / ("sim_report_" + suffix + ".json"), r.report);
  std::string csv = "t,median,q25,q75,mean\n";
  for (std::size_t t = 0; t < r.rows.size(); ++t) {
    const Quartiles& q = r.rows[t];
    csv += std::to_string(t + 1) + "," + format_real(q.median) + "," + format_real(q.q25) + "," +
           format_real(q.q75) + "," + format_real(q.mean) + "\n";
  }
  write_text(dir / ("sim_error_" + suffix + ".csv"), csv);
  return r;
}

ControlReport eval_control(const ExperimentSpec& spec, const Pipeline& p,
                           const std::vector<Trajectory>& tests) {
  ControlReport r;
  const int steps = spec.control_horizon();
  MpcOptions options;
  options.horizon = steps + 1;
  options.feedback_period = spec.mpc_period();
  options.action_penalty = spec.eval.action_penalty;
  double saturation = 0.0;
  for (std::size_t k = 0; k < tests.size(); ++k) {
    const Trajectory& test = tests[k];
    if (test.states.size() <= static_cast<std::size_t>(steps)) {
      throw ConfigError("control horizon exceeds the test episode length");
    }
    Environment env(test.config);
    const SceneGraph graph = build_graph(env);
    const BlockDynamics dyn =
        identify_for_episode(p, graph, test.config, spec.model.sysid_episodes, spec.episode_length,
                             derive_seed(spec.seed, kEvalStream, k), spec.model.ridge_factor);
    options.action_scale = test.config.params.action_bound;
    const SystemState& start = test.states.front();
    const SystemState& goal = test.states[static_cast<std::size_t>(steps)];
    double err = std::numeric_limits<double>::infinity();
    try {
      const MpcResult m = run_mpc(env, *p.observer, graph, dyn, start, goal, options);
      err = control_error(m.trajectory.states.back(), goal);
      saturation += m.saturation_fraction;
    } catch (const InstabilityError&) {
      // The simulator blew up under the planned actions; counted as a failure.
    }
    r.errors.push_back(err);
  }
  r.summary = quartiles(r.errors);
  nlohmann::json errors = nlohmann::json::array();
  for (double e : r.errors) errors.push_back(number(e));
  r.report = {{"mode", to_string(p.mode)},
              {"episodes", tests.size()},
              {"protocol",
               {{"control_horizon", steps},
                {"feedback_period", options.feedback_period},
                {"open_loop", options.feedback_period >= steps},
                {"action_penalty", options.action_penalty},
                {"goal", "state of the test episode after control_horizon steps"}}},
              {"control_error", quartiles_json(r.summary)},
              {"errors", errors},
              {"mean_saturation_fraction", number(tests.empty() ? 0.0 : saturation / static_cast<double>(tests.size()))}};
  return r;
}

ControlReport run_eval_control(const ExperimentSpec& spec, EvalMode mode, bool extrapolate) {
  spec.validate();
  const Pipeline p = make_pipeline(spec, mode);
  const fs::path tests_path = test_file(spec, extrapolate);
  const auto tests = limit(read_episodes(tests_path), spec.eval.trials);
  if (tests.empty()) throw ConfigError("no test episodes in " + tests_path.string());
  ControlReport r = eval_control(spec, p, tests);
  std::vector<fs::path> inputs{tests_path};
  if (mode != EvalMode::KPM) inputs.push_back(spec.checkpoint_path(mode));
  nlohmann::json head = {{"command", "eval-control"},
                         {"config", config_echo(spec)},
                         {"input_hash", input_hash(spec, inputs)},
                         {"extrapolate", extrapolate}};
  head.update(r.report);
  r.report = head;
  write_json(fs::path(spec.output_dir) / ("control_report_" + mode_suffix(mode, extrapolate) + ".json"),
             r.report);
  return r;
}

SweepReport run_sweep(const ExperimentSpec& spec) {
  spec.validate();
  const bool dims = spec.sweep.axis == SweepAxis::EmbeddingDim;
  std::vector<int> values = spec.sweep.values;
  if (values.empty()) {
    values = dims ? std::vector<int>{8, 16, 32, 64} : std::vector<int>{200, 400, 800, 1600};
  }
  if (dims && spec.model.mode == EvalMode::KPM) {
    throw ConfigError("the embedding_dim sweep needs a learned model, not KPM");
  }
  const fs::path tests_path = test_file(spec, false);
  const auto tests = limit(read_episodes(tests_path), spec.eval.trials);
  if (tests.empty()) throw ConfigError("no test episodes in " + tests_path.string());
  std::vector<fs::path> inputs{tests_path};

  SweepReport r;
  std::optional<Pipeline> shared;
  if (!dims) {
    shared = make_pipeline(spec, spec.model.mode);
    if (spec.model.mode != EvalMode::KPM) inputs.push_back(spec.checkpoint_path(spec.model.mode));
  } else {
    inputs.push_back(spec.data_path() / "train.jsonl");
  }
  nlohmann::json rows = nlohmann::json::array();
  std::string csv = "axis,value,seed,median,q25,q75\n";
  for (int v : values) {
    ExperimentSpec s = spec;
    std::optional<Pipeline> own;
    if (dims) {
      s.model.m = v;
      s.checkpoint = (fs::path(spec.output_dir) /
                      ("checkpoint_" + to_string(spec.model.mode) + "_m" + std::to_string(v) + ".json"))
                         .string();
      TrainOutput t = run_train(s);
      own = make_pipeline(t.model, spec.model.mode);
    } else {
      s.model.sysid_episodes = std::max(1, v / spec.episode_length);
    }
    const Pipeline& p = dims ? *own : *shared;
    for (std::uint64_t seed : spec.sweep.seeds) {
      s.seed = seed;
      const SimReport sim = eval_sim(s, p, tests);
      SweepRow row{v, seed, sim.rows.back()};
      r.rows.push_back(row);
      nlohmann::json jr = quartiles_json(row.final_error);
      jr["value"] = v;
      jr["seed"] = seed;
      jr["sysid_episodes"] = s.model.sysid_episodes;
      jr["non_finite_episodes"] = sim.non_finite;
      rows.push_back(jr);
      csv += sweep_axis_name(spec.sweep.axis) + "," + std::to_string(v) + "," + std::to_string(seed) +
             "," + format_real(row.final_error.median) + "," + format_real(row.final_error.q25) + "," +
             format_real(row.final_error.q75) + "\n";
    }
  }
  r.report = {{"command", "sweep"},
              {"config", config_echo(spec)},
              {"input_hash", input_hash(spec, inputs)},
              {"axis", sweep_axis_name(spec.sweep.axis)},
              {"mode", to_string(spec.model.mode)},
              {"metric", "simulation error at t = sim_horizon"},
              {"rows", rows}};
  const fs::path dir(spec.output_dir);
  write_json(dir / ("sweep_report_" + sweep_axis_name(spec.sweep.axis) + ".json"), r.report);
  write_text(dir / ("sweep_" + sweep_axis_name(spec.sweep.axis) + ".csv"), csv);
  return r;
}

nlohmann::json run_report(const ExperimentSpec& spec) {
  const fs::path dir(spec.output_dir);
  if (!fs::is_directory(dir)) throw ConfigError("output directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    const bool report = name.ends_with(".json") &&
                        (name.starts_with("sim_report_") || name.starts_with("control_report_") ||
                         name.starts_with("sweep_report_") || name.starts_with("train_report_"));
    if (report) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  nlohmann::json entries = nlohmann::json::array();
  std::string csv = "report,command,mode,extrapolate,metric,value\n";
  for (const auto& f : files) {
    const nlohmann::json j = nlohmann::json::parse(file_bytes(f));
    const std::string cmd = j.value("command", "");
    nlohmann::json e = {{"report", f.filename().string()}, {"command", cmd},
                        {"input_hash", j.value("input_hash", "")}};
    auto add = [&](const std::string& metric, const nlohmann::json& v) {
      e[metric] = v;
      std::string text = v.is_null() ? "inf" : (v.is_number() ? format_real(v.get<double>()) : v.dump());
      csv += f.filename().string() + "," + cmd + "," + j.value("mode", "") + "," +
             (j.value("extrapolate", false) ? "true" : "false") + "," + metric + "," + text + "\n";
    };
    if (cmd == "eval-sim" && !j.at("rows").empty()) {
      const auto& last = j.at("rows").back();
      add("sim_error_final_median", last.at("median"));
      add("sim_error_final_q25", last.at("q25"));
      add("sim_error_final_q75", last.at("q75"));
    } else if (cmd == "eval-control") {
      add("control_error_median", j.at("control_error").at("median"));
      add("control_error_mean", j.at("control_error").at("mean"));
    } else if (cmd == "train") {
      add("loss_total_first", j.at("first").at("total"));
      add("loss_total_last", j.at("last").at("total"));
    } else if (cmd == "sweep") {
      for (const auto& row : j.at("rows")) {
        add("median_" + std::to_string(row.at("value").get<int>()) + "_seed" +
                std::to_string(row.at("seed").get<std::uint64_t>()),
            row.at("median"));
      }
    }
    entries.push_back(e);
  }
  nlohmann::json summary = {{"command", "report"}, {"reports", entries}};
  write_json(dir / "summary.json", summary);
  write_text(dir / "summary.csv", csv);
  return summary;
}

}  // namespace ckpm::bench
