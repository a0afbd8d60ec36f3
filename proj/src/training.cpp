#include "ckpm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "ckpm/errors.hpp"

namespace ckpm {

namespace {

// Mean over frames of the L2 norm of each frame's flattened difference.
ad::Var mean_frame_norm(ad::Var a, ad::Var b, std::size_t frames) {
  ad::Var diff = a - b;
  return ad::mean(ad::row_norms(ad::reshape(diff, frames, diff.rows() * diff.cols() / frames)));
}

ad::RowGroupsPtr single_rows(std::span<const std::size_t> rows) {
  auto g = std::make_shared<ad::RowGroups>();
  for (std::size_t r : rows) g->add_single(r);
  return g;
}

struct MetricParts {
  ad::RowGroupsPtr first;
  ad::RowGroupsPtr second;
  DenseMatrix state_distance;  // pairs x 1
};

MetricParts metric_parts(const PreparedEpisode& ep, int pair_count, std::uint64_t seed) {
  const auto pairs = sample_pairs(ep.frames, pair_count, seed);
  std::vector<std::size_t> a, b;
  DenseMatrix dist(pairs.size(), 1);
  const std::size_t width = ep.objects * ep.normalized.cols();
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    a.push_back(pairs[k].first);
    b.push_back(pairs[k].second);
    double s = 0.0;
    const double* xi = ep.normalized.data().data() + pairs[k].first * width;
    const double* xj = ep.normalized.data().data() + pairs[k].second * width;
    for (std::size_t e = 0; e < width; ++e) s += (xi[e] - xj[e]) * (xi[e] - xj[e]);
    dist(k, 0) = std::sqrt(s);
  }
  return {single_rows(a), single_rows(b), std::move(dist)};
}

// Whole-system embedding distances for the given pairs.
ad::Var embedding_distances(ad::Var g, const PreparedEpisode& ep, const MetricParts& parts) {
  ad::Var frames = ad::reshape(g, ep.frames, ep.objects * g.cols());
  return ad::row_norms(ad::gather_sum(frames, parts.first) - ad::gather_sum(frames, parts.second));
}

void check_finite(const LossValues& v, int iteration) {
  if (!std::isfinite(v.total) || !std::isfinite(v.ae) || !std::isfinite(v.pred) ||
      !std::isfinite(v.metric)) {
    throw NumericalError("training loss became non-finite at iteration " + std::to_string(iteration));
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("loss weights must be non-negative");
  if (subseq_len < 2) throw ConfigError("subseq_len must be at least 2");
  if (iterations < 0) throw ConfigError("iterations must be non-negative");
  if (metric_pair_count < 0) throw ConfigError("metric_pair_count must be non-negative");
  if (structure == StructureMode::None) {
    throw ConfigError("training supports Block or Diag structure");
  }
  if (ridge_factor < 0.0) throw ConfigError("ridge_factor must be non-negative");
  if (!(divergence_factor > 1.0)) throw ConfigError("divergence_factor must exceed 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"lambda1", c.lambda1},
                     {"lambda2", c.lambda2},
                     {"subseq_len", c.subseq_len},
                     {"iterations", c.iterations},
                     {"metric_pair_count", c.metric_pair_count},
                     {"seed", c.seed},
                     {"backprop_through_sysid", c.backprop_through_sysid},
                     {"structure", to_string(c.structure)},
                     {"ridge_factor", c.ridge_factor},
                     {"divergence_factor", c.divergence_factor}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  try {
    TrainConfig d;
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lambda1 = j.value("lambda1", d.lambda1);
    c.lambda2 = j.value("lambda2", d.lambda2);
    c.subseq_len = j.value("subseq_len", d.subseq_len);
    c.iterations = j.value("iterations", d.iterations);
    c.metric_pair_count = j.value("metric_pair_count", d.metric_pair_count);
    c.seed = j.value("seed", d.seed);
    c.backprop_through_sysid = j.value("backprop_through_sysid", d.backprop_through_sysid);
    c.structure = structure_mode_from_string(j.value("structure", to_string(d.structure)));
    c.ridge_factor = j.value("ridge_factor", d.ridge_factor);
    c.divergence_factor = j.value("divergence_factor", d.divergence_factor);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  c.validate();
}

AdamState make_adam(std::span<const DenseMatrix> params) {
  AdamState s;
  for (const auto& p : params) {
    s.first.emplace_back(p.rows(), p.cols());
    s.second.emplace_back(p.rows(), p.cols());
  }
  return s;
}

void adam_update(std::vector<DenseMatrix>& params, std::span<const DenseMatrix> grads,
                 AdamState& s, double learning_rate) {
  if (grads.size() != params.size() || s.first.size() != params.size()) {
    throw ArgumentError("Adam state does not match the parameters");
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    require_same_shape(params[k], grads[k], "adam_update");
    auto p = params[k].data();
    auto g = grads[k].data();
    auto m = s.first[k].data();
    auto v = s.second[k].data();
    for (std::size_t e = 0; e < p.size(); ++e) {
      m[e] = s.beta1 * m[e] + (1.0 - s.beta1) * g[e];
      v[e] = s.beta2 * v[e] + (1.0 - s.beta2) * g[e] * g[e];
      p[e] -= learning_rate * (m[e] / c1) / (std::sqrt(v[e] / c2) + s.eps);
    }
  }
}

DenseMatrix scale_controls(const DenseMatrix& u, double action_bound) {
  if (!(action_bound > 0.0)) throw ArgumentError("action bound must be positive");
  return (1.0 / action_bound) * u;
}

DenseMatrix unscale_controls(const DenseMatrix& u, double action_bound) {
  if (!(action_bound > 0.0)) throw ArgumentError("action bound must be positive");
  return action_bound * u;
}

PreparedEpisode prepare_episode(const KoopmanModel& model, const Trajectory& traj,
                                StructureMode structure) {
  if (traj.states.empty()) throw ArgumentError("episode has no states");
  Environment env(traj.config);
  PreparedEpisode ep;
  ep.graph = build_graph(env);
  model.check_graph(ep.graph);
  ep.types = type_map_for(structure, ep.graph);
  ep.frames = traj.states.size();
  ep.objects = ep.graph.num_objects();
  std::vector<DenseMatrix> xs, us;
  for (const auto& s : traj.states) xs.push_back(s.values);
  ep.normalized = model.normalize(vconcat(xs));
  if (ep.normalized.rows() != ep.frames * ep.objects) {
    throw DimensionError("episode states do not match the graph's object count");
  }
  const double bound = traj.config.params.action_bound;
  for (const auto& u : traj.controls) us.push_back(scale_controls(u, bound));
  ep.controls = us.empty() ? DenseMatrix(0, static_cast<std::size_t>(env.action_dim())) : vconcat(us);
  return ep;
}

PreparedEpisode slice_episode(const PreparedEpisode& ep, std::size_t begin, std::size_t len) {
  if (len == 0 || begin + len > ep.frames) throw ArgumentError("sub-sequence outside the episode");
  PreparedEpisode out;
  out.graph = ep.graph;
  out.types = ep.types;
  out.frames = len;
  out.objects = ep.objects;
  out.normalized = ep.normalized.block(begin * ep.objects, 0, len * ep.objects, ep.normalized.cols());
  out.controls = ep.controls.block(begin * ep.objects, 0, (len - 1) * ep.objects, ep.controls.cols());
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(std::size_t frames, int count,
                                                              std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (frames < 2) return out;
  if (count == 0) {
    for (std::size_t i = 0; i < frames; ++i) {
      for (std::size_t j = i + 1; j < frames; ++j) out.emplace_back(i, j);
    }
    return out;
  }
  std::mt19937_64 rng(seed ^ 0x9a125eedULL);
  std::uniform_int_distribution<std::size_t> first(0, frames - 1), other(0, frames - 2);
  for (int k = 0; k < count; ++k) {
    const std::size_t i = first(rng);
    std::size_t j = other(rng);
    if (j >= i) ++j;
    out.emplace_back(std::min(i, j), std::max(i, j));
  }
  return out;
}

LossVars build_loss(ad::Tape& tape, const KoopmanModel& model, std::span<const ad::Var> params,
                    const PreparedEpisode& ep, const TrainConfig& config, std::uint64_t pair_seed) {
  const std::size_t t = ep.frames, n = ep.objects;
  ad::Var x = tape.constant(ep.normalized);
  ad::Var g = encode_tape(model, params, make_graph_batch(ep.graph, t), x);

  LossVars out;
  if (t == 1) {
    ad::Var rec = decode_tape(model, params, make_graph_batch(ep.graph, 1), g);
    out.ae = mean_frame_norm(rec, x, 1);
    out.pred = out.ae;
    out.metric = tape.constant(DenseMatrix(1, 1));
  } else {
    const TapeDynamics dyn = identify_structured_tape(g, ep.controls, ep.types,
                                                      Ridge::relative(config.ridge_factor),
                                                      !config.backprop_through_sysid);
    ad::Var g_hat = rollout_tape(dyn, ad::slice_rows(g, 0, n), ep.controls, t - 1);
    const ad::Var both[2] = {g, g_hat};
    ad::Var x_hat = decode_tape(model, params, make_graph_batch(ep.graph, 2 * t), ad::vconcat(both));
    out.ae = mean_frame_norm(ad::slice_rows(x_hat, 0, t * n), x, t);
    out.pred = mean_frame_norm(ad::slice_rows(x_hat, t * n, t * n), x, t);
    const MetricParts parts = metric_parts(ep, config.metric_pair_count, pair_seed);
    out.metric = ad::mean(ad::abs(embedding_distances(g, ep, parts) - tape.constant(parts.state_distance)));
  }
  out.total = out.ae + config.lambda1 * out.pred;
  if (config.lambda2 != 0.0) out.total = out.total + config.lambda2 * out.metric;
  return out;
}

LossValues evaluate_loss(const KoopmanModel& model, const PreparedEpisode& ep,
                         const TrainConfig& config, std::uint64_t pair_seed) {
  ad::Tape tape;
  const auto params = bind_parameters(tape, model, false);
  const LossVars v = build_loss(tape, model, params, ep, config, pair_seed);
  return {v.total.value()(0, 0), v.ae.value()(0, 0), v.pred.value()(0, 0), v.metric.value()(0, 0)};
}

double loss_ae(const KoopmanModel& model, const PreparedEpisode& ep) {
  ad::Tape tape;
  const auto params = bind_parameters(tape, model, false);
  ad::Var x = tape.constant(ep.normalized);
  const GraphBatch batch = make_graph_batch(ep.graph, ep.frames);
  ad::Var rec = decode_tape(model, params, batch, encode_tape(model, params, batch, x));
  return mean_frame_norm(rec, x, ep.frames).value()(0, 0);
}

double loss_pred(const KoopmanModel& model, const PreparedEpisode& ep, const TrainConfig& config) {
  return evaluate_loss(model, ep, config, 0).pred;
}

double loss_pred(const KoopmanModel& model, const PreparedEpisode& ep, const BlockDynamics& dyn) {
  ad::Tape tape;
  const auto params = bind_parameters(tape, model, false);
  ad::Var x = tape.constant(ep.normalized);
  const std::size_t n = ep.objects;
  ad::Var g = encode_tape(model, params, make_graph_batch(ep.graph, ep.frames), x);
  std::vector<DenseMatrix> controls;
  for (std::size_t s = 0; s + 1 < ep.frames; ++s) {
    controls.push_back(ep.controls.block(s * n, 0, n, ep.controls.cols()));
  }
  std::vector<DenseMatrix> roll{g.value().block(0, 0, n, g.cols())};
  if (!controls.empty()) roll = rollout_linear(dyn, roll.front(), controls);
  ad::Var x_hat = decode_tape(model, params, make_graph_batch(ep.graph, ep.frames),
                              tape.constant(vconcat(roll)));
  return mean_frame_norm(x_hat, x, ep.frames).value()(0, 0);
}

double loss_metric(const KoopmanModel& model, const PreparedEpisode& ep, int pair_count,
                   std::uint64_t seed) {
  if (ep.frames < 2) throw ArgumentError("metric loss needs at least two states");
  ad::Tape tape;
  const auto params = bind_parameters(tape, model, false);
  ad::Var g = encode_tape(model, params, make_graph_batch(ep.graph, ep.frames),
                          tape.constant(ep.normalized));
  const MetricParts parts = metric_parts(ep, pair_count, seed);
  return ad::mean(ad::abs(embedding_distances(g, ep, parts) - tape.constant(parts.state_distance)))
      .value()(0, 0);
}

double distance_ratio_log_median(const KoopmanModel& model, const PreparedEpisode& ep,
                                 int pair_count, std::uint64_t seed) {
  ad::Tape tape;
  const auto params = bind_parameters(tape, model, false);
  ad::Var g = encode_tape(model, params, make_graph_batch(ep.graph, ep.frames),
                          tape.constant(ep.normalized));
  const MetricParts parts = metric_parts(ep, pair_count, seed);
  const DenseMatrix dg = embedding_distances(g, ep, parts).value();
  std::vector<double> logs;
  for (std::size_t k = 0; k < dg.rows(); ++k) {
    const double dx = parts.state_distance(k, 0);
    if (dx > 0.0 && dg(k, 0) > 0.0) logs.push_back(std::abs(std::log(dg(k, 0) / dx)));
  }
  if (logs.empty()) throw ArgumentError("no pair with nonzero distances");
  const auto mid = logs.begin() + static_cast<std::ptrdiff_t>(logs.size() / 2);
  std::nth_element(logs.begin(), mid, logs.end());
  if (logs.size() % 2 == 1) return *mid;
  const double upper = *mid;
  return 0.5 * (upper + *std::max_element(logs.begin(), mid));
}

TrainResult train(const TrainConfig& config, std::span<const Trajectory> dataset,
                  KoopmanModel model, const TrainCallback& on_iteration) {
  config.validate();
  if (dataset.empty()) throw ArgumentError("training dataset is empty");
  model.fit_normalizer(dataset);
  std::vector<PreparedEpisode> episodes;
  episodes.reserve(dataset.size());
  for (const auto& traj : dataset) {
    if (traj.states.size() < 2) throw ArgumentError("training episodes need at least two states");
    episodes.push_back(prepare_episode(model, traj, config.structure));
  }

  TrainResult result;
  AdamState adam = make_adam(model.parameters());
  std::mt19937_64 rng(config.seed ^ 0x7a11e5ULL);
  std::uniform_int_distribution<std::size_t> pick_episode(0, episodes.size() - 1);
  const double inv_batch = 1.0 / static_cast<double>(config.batch_size);
  double initial = 0.0;

  for (int it = 0; it < config.iterations; ++it) {
    std::vector<DenseMatrix> grads;
    for (const auto& p : model.parameters()) grads.emplace_back(p.rows(), p.cols());
    LossValues avg;
    for (int b = 0; b < config.batch_size; ++b) {
      const PreparedEpisode& ep = episodes[pick_episode(rng)];
      const std::size_t len = std::min(ep.frames, static_cast<std::size_t>(config.subseq_len));
      const std::size_t begin =
          std::uniform_int_distribution<std::size_t>(0, ep.frames - len)(rng);
      const std::uint64_t pair_seed = rng();
      const PreparedEpisode sub = slice_episode(ep, begin, len);
      ad::Tape tape;
      const auto params = bind_parameters(tape, model, true);
      const LossVars lv = build_loss(tape, model, params, sub, config, pair_seed);
      tape.backward(lv.total);
      for (std::size_t k = 0; k < params.size(); ++k) {
        const DenseMatrix& g = params[k].grad();
        auto dst = grads[k].data();
        auto src = g.data();
        for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += inv_batch * src[e];
      }
      avg.total += inv_batch * lv.total.value()(0, 0);
      avg.ae += inv_batch * lv.ae.value()(0, 0);
      avg.pred += inv_batch * lv.pred.value()(0, 0);
      avg.metric += inv_batch * lv.metric.value()(0, 0);
    }
    check_finite(avg, it);
    if (it == 0) initial = avg.total;
    if (avg.total > config.divergence_factor * initial) {
      throw NumericalError("training diverged at iteration " + std::to_string(it) + ": loss " +
                           std::to_string(avg.total) + " exceeds " +
                           std::to_string(config.divergence_factor) + "x the initial " +
                           std::to_string(initial));
    }
    adam_update(model.parameters(), grads, adam, config.learning_rate);
    result.curve.push_back({it, avg});
    if (on_iteration) on_iteration(result.curve.back());
  }
  result.model = std::move(model);
  return result;
}

void write_loss_curve(const std::string& path, std::span<const LossRecord> curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write loss curve " + path);
  out << "iteration,loss_total,loss_ae,loss_pred,loss_metric\n";
  char line[160];
  for (const auto& r : curve) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.values.total,
                  r.values.ae, r.values.pred, r.values.metric);
    out << line;
  }
  if (!out) throw std::runtime_error("failed writing loss curve " + path);
}

}  // namespace ckpm
