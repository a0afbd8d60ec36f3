#include "ckpm/embeddings.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "ckpm/errors.hpp"

namespace ckpm {

namespace {

constexpr const char* kFormatTag = "ckpm-v1";

// Tensor order inside one graph network.
enum NetSlot : std::size_t {
  kRelSender,
  kRelReceiver,
  kRelType,
  kRelB0,
  kRelW1,
  kRelB1,
  kRelW2,
  kRelB2,
  kObjNode,
  kObjEffect,
  kObjB0,
  kObjW1,
  kObjB1,
  kObjW2,
  kObjB2,
  kNetSlots
};

constexpr const char* kSlotNames[kNetSlots] = {
    "rel.w_sender", "rel.w_receiver", "rel.w_type", "rel.b0", "rel.w1",
    "rel.b1",       "rel.w2",         "rel.b2",     "obj.w_node", "obj.w_effect",
    "obj.b0",       "obj.w1",         "obj.b1",     "obj.w2",     "obj.b2"};

struct NetShape {
  std::size_t node_in, types, hidden, effect, out;
};

NetShape encoder_shape(const ModelConfig& c) {
  return {static_cast<std::size_t>(c.state_dim + c.num_object_types),
          static_cast<std::size_t>(c.num_relation_types), static_cast<std::size_t>(c.hidden),
          static_cast<std::size_t>(c.effective_effect_dim()), static_cast<std::size_t>(c.m)};
}

NetShape decoder_shape(const ModelConfig& c) {
  return {static_cast<std::size_t>(c.m + c.num_object_types),
          static_cast<std::size_t>(c.num_relation_types), static_cast<std::size_t>(c.hidden),
          static_cast<std::size_t>(c.effective_effect_dim()), static_cast<std::size_t>(c.state_dim)};
}

void append_net(const std::string& prefix, const NetShape& s, std::mt19937_64& rng,
                std::vector<std::string>& names, std::vector<DenseMatrix>& params) {
  const std::size_t rel_fan = 2 * s.node_in + s.types;
  const std::size_t obj_fan = s.node_in + s.effect;
  const std::pair<std::size_t, std::size_t> shapes[kNetSlots] = {
      {s.node_in, s.hidden}, {s.node_in, s.hidden}, {s.types, s.hidden}, {1, s.hidden},
      {s.hidden, s.hidden},  {1, s.hidden},         {s.hidden, s.effect}, {1, s.effect},
      {s.node_in, s.hidden}, {s.effect, s.hidden},  {1, s.hidden},        {s.hidden, s.hidden},
      {1, s.hidden},         {s.hidden, s.out},     {1, s.out}};
  const std::size_t fans[kNetSlots] = {rel_fan,  rel_fan,  rel_fan,  rel_fan,  s.hidden,
                                       s.hidden, s.hidden, s.hidden, obj_fan,  obj_fan,
                                       obj_fan,  s.hidden, s.hidden, s.hidden, s.hidden};
  for (std::size_t k = 0; k < kNetSlots; ++k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fans[k]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseMatrix w(shapes[k].first, shapes[k].second);
    for (double& v : w.data()) v = dist(rng);
    names.push_back(prefix + "." + kSlotNames[k]);
    params.push_back(std::move(w));
  }
}

ad::Var mlp_tail(ad::Var h0, std::span<const ad::Var> p, std::size_t w1) {
  using namespace ad;
  Var h1 = relu(add_row_broadcast(matmul(h0, p[w1]), p[w1 + 1]));
  return add_row_broadcast(matmul(h1, p[w1 + 2]), p[w1 + 3]);
}

// One round of message passing over stacked frames.
ad::Var graph_net(std::span<const ad::Var> p, const GraphBatch& b, ad::Var nodes) {
  using namespace ad;
  Var s = gather_sum(matmul(nodes, p[kRelSender]), b.senders);
  Var r = gather_sum(matmul(nodes, p[kRelReceiver]), b.receivers);
  Var ty = gather_sum(p[kRelType], b.types);
  Var e0 = relu(add_row_broadcast(s + r + ty, p[kRelB0]));
  Var effects = mlp_tail(e0, p, kRelW1);
  Var agg = gather_sum(effects, b.incoming);
  Var o0 = relu(add_row_broadcast(matmul(nodes, p[kObjNode]) + matmul(agg, p[kObjEffect]),
                                  p[kObjB0]));
  return mlp_tail(o0, p, kObjW1);
}

std::span<const ad::Var> encoder_params(std::span<const ad::Var> p) {
  return p.subspan(0, kNetSlots);
}
std::span<const ad::Var> decoder_params(std::span<const ad::Var> p) {
  return p.subspan(kNetSlots, kNetSlots);
}

void check_model_params(const KoopmanModel& model, std::span<const ad::Var> params) {
  if (params.size() != model.parameters().size()) {
    throw ArgumentError("expected " + std::to_string(model.parameters().size()) +
                        " parameter handles, got " + std::to_string(params.size()));
  }
}

DenseMatrix stack_rows(std::span<const DenseMatrix> frames, std::size_t rows, std::size_t cols,
                       const char* what) {
  DenseMatrix out(frames.size() * rows, cols);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (frames[f].rows() != rows || frames[f].cols() != cols) {
      throw DimensionError(std::string(what) + ": frame " + std::to_string(f) + " has shape " +
                           frames[f].shape_string() + ", expected " + std::to_string(rows) + "x" +
                           std::to_string(cols));
    }
    out.set_block(f * rows, 0, frames[f]);
  }
  return out;
}

std::vector<DenseMatrix> split_rows(const DenseMatrix& stacked, std::size_t rows) {
  std::vector<DenseMatrix> out;
  for (std::size_t r = 0; r < stacked.rows(); r += rows) {
    out.push_back(stacked.block(r, 0, rows, stacked.cols()));
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (state_dim < 1) throw ConfigError("state_dim must be positive");
  if (num_object_types < 1) throw ConfigError("num_object_types must be positive");
  if (num_relation_types < 1) throw ConfigError("num_relation_types must be positive");
  if (m < 1) throw ConfigError("embedding width m must be positive");
  if (hidden < 1) throw ConfigError("hidden width must be positive");
  if (effect_dim < 0) throw ConfigError("effect_dim must be non-negative");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"family", c.family},
                     {"state_dim", c.state_dim},
                     {"num_object_types", c.num_object_types},
                     {"num_relation_types", c.num_relation_types},
                     {"m", c.m},
                     {"hidden", c.hidden},
                     {"effect_dim", c.effect_dim},
                     {"standardize", c.standardize}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    ModelConfig d;
    c.family = j.value("family", d.family);
    c.state_dim = j.value("state_dim", d.state_dim);
    c.num_object_types = j.value("num_object_types", d.num_object_types);
    c.num_relation_types = j.value("num_relation_types", d.num_relation_types);
    c.m = j.value("m", d.m);
    c.hidden = j.value("hidden", d.hidden);
    c.effect_dim = j.value("effect_dim", d.effect_dim);
    c.standardize = j.value("standardize", d.standardize);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
}

GraphBatch make_graph_batch(const SceneGraph& graph, std::size_t frames) {
  GraphBatch b;
  b.frames = frames;
  b.objects = graph.num_objects();
  b.relations = graph.relations().size();
  auto senders = std::make_shared<ad::RowGroups>();
  auto receivers = std::make_shared<ad::RowGroups>();
  auto types = std::make_shared<ad::RowGroups>();
  auto incoming = std::make_shared<ad::RowGroups>();
  std::vector<std::vector<std::size_t>> into(b.objects);
  for (std::size_t k = 0; k < b.relations; ++k) into[graph.relations()[k].receiver].push_back(k);
  std::vector<std::size_t> scratch;
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t node0 = f * b.objects, edge0 = f * b.relations;
    for (const Relation& r : graph.relations()) {
      senders->add_single(node0 + r.sender);
      receivers->add_single(node0 + r.receiver);
      types->add_single(static_cast<std::size_t>(r.type - 1));
    }
    for (std::size_t i = 0; i < b.objects; ++i) {
      scratch.clear();
      for (std::size_t k : into[i]) scratch.push_back(edge0 + k);
      incoming->add(scratch);
    }
  }
  b.senders = std::move(senders);
  b.receivers = std::move(receivers);
  b.types = std::move(types);
  b.incoming = std::move(incoming);
  const DenseMatrix attr = graph.object_attributes();
  b.object_attributes = DenseMatrix(frames * b.objects, attr.cols());
  for (std::size_t f = 0; f < frames; ++f) b.object_attributes.set_block(f * b.objects, 0, attr);
  return b;
}

KoopmanModel KoopmanModel::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  KoopmanModel model;
  model.config_ = config;
  std::mt19937_64 rng(seed ^ 0x6b6f6f706d616eULL);
  append_net("enc", encoder_shape(config), rng, model.names_, model.params_);
  append_net("dec", decoder_shape(config), rng, model.names_, model.params_);
  const auto d = static_cast<std::size_t>(config.state_dim);
  model.mean_ = DenseMatrix(1, d, 0.0);
  model.scale_ = DenseMatrix(1, d, 1.0);
  return model;
}

KoopmanModel KoopmanModel::for_graph(const SceneGraph& graph, int state_dim, int m, int hidden,
                                     std::uint64_t seed) {
  ModelConfig c;
  c.state_dim = state_dim;
  c.num_object_types = graph.num_object_types();
  c.num_relation_types = graph.h();
  c.m = m;
  c.hidden = hidden;
  return init(c, seed);
}

std::size_t KoopmanModel::parameter_count() const {
  std::size_t n = 0;
  for (const DenseMatrix& p : params_) n += p.size();
  return n;
}

void KoopmanModel::set_normalizer(DenseMatrix mean, DenseMatrix scale) {
  const auto d = static_cast<std::size_t>(config_.state_dim);
  if (mean.rows() != 1 || mean.cols() != d || scale.rows() != 1 || scale.cols() != d) {
    throw DimensionError("normaliser statistics must be 1x" + std::to_string(d));
  }
  for (double s : scale.data()) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("normaliser scale must be positive");
  }
  mean_ = std::move(mean);
  scale_ = std::move(scale);
}

void KoopmanModel::fit_normalizer(std::span<const Trajectory> episodes) {
  if (!config_.standardize) return;
  const auto d = static_cast<std::size_t>(config_.state_dim);
  DenseMatrix sum(1, d), sq(1, d);
  double count = 0.0;
  for (const Trajectory& ep : episodes) {
    for (const SystemState& s : ep.states) {
      if (s.values.cols() != d) throw DimensionError("state width does not match the model");
      for (std::size_t r = 0; r < s.values.rows(); ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          sum(0, c) += s.values(r, c);
          sq(0, c) += s.values(r, c) * s.values(r, c);
        }
        count += 1.0;
      }
    }
  }
  if (count == 0.0) throw ArgumentError("cannot fit a normaliser on an empty dataset");
  DenseMatrix mean(1, d), scale(1, d);
  for (std::size_t c = 0; c < d; ++c) {
    mean(0, c) = sum(0, c) / count;
    const double var = std::max(sq(0, c) / count - mean(0, c) * mean(0, c), 0.0);
    // Constant channels (a pinned coordinate) keep unit scale.
    scale(0, c) = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  set_normalizer(std::move(mean), std::move(scale));
}

DenseMatrix KoopmanModel::normalize(const DenseMatrix& states) const {
  if (states.cols() != mean_.cols()) throw DimensionError("state width does not match the model");
  DenseMatrix out = states;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = (out(r, c) - mean_(0, c)) / scale_(0, c);
  }
  return out;
}

DenseMatrix KoopmanModel::denormalize(const DenseMatrix& normalized) const {
  if (normalized.cols() != mean_.cols()) {
    throw DimensionError("state width does not match the model");
  }
  DenseMatrix out = normalized;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = out(r, c) * scale_(0, c) + mean_(0, c);
  }
  return out;
}

void KoopmanModel::check_graph(const SceneGraph& graph) const {
  if (graph.num_object_types() != config_.num_object_types ||
      graph.h() != config_.num_relation_types) {
    throw ConfigError("graph typing (" + std::to_string(graph.num_object_types()) +
                      " object types, h=" + std::to_string(graph.h()) +
                      ") does not match the model (" + std::to_string(config_.num_object_types) +
                      ", h=" + std::to_string(config_.num_relation_types) + ")");
  }
}

Embedding KoopmanModel::encode(const SceneGraph& graph, const SystemState& state) const {
  return encode_frames(graph, std::span<const SystemState>(&state, 1)).front();
}

DenseMatrix KoopmanModel::decode(const SceneGraph& graph, const Embedding& emb) const {
  return decode_frames(graph, std::span<const Embedding>(&emb, 1)).front();
}

std::vector<Embedding> KoopmanModel::encode_frames(const SceneGraph& graph,
                                                   std::span<const SystemState> states) const {
  check_graph(graph);
  const std::size_t n = graph.num_objects();
  std::vector<DenseMatrix> values;
  values.reserve(states.size());
  for (const SystemState& s : states) {
    if (s.num_objects() != n) {
      throw DimensionError("encode: state has " + std::to_string(s.num_objects()) +
                           " objects, graph has " + std::to_string(n));
    }
    values.push_back(s.values);
  }
  if (values.empty()) return {};
  const DenseMatrix x =
      normalize(stack_rows(values, n, static_cast<std::size_t>(config_.state_dim), "encode"));
  ad::Tape tape;
  const auto params = bind_parameters(tape, *this, false);
  const GraphBatch batch = make_graph_batch(graph, values.size());
  return split_rows(encode_tape(*this, params, batch, tape.constant(x)).value(), n);
}

std::vector<DenseMatrix> KoopmanModel::decode_frames(const SceneGraph& graph,
                                                     std::span<const Embedding> embs) const {
  check_graph(graph);
  if (embs.empty()) return {};
  const std::size_t n = graph.num_objects();
  const DenseMatrix g = stack_rows(embs, n, static_cast<std::size_t>(config_.m), "decode");
  ad::Tape tape;
  const auto params = bind_parameters(tape, *this, false);
  const GraphBatch batch = make_graph_batch(graph, embs.size());
  return split_rows(denormalize(decode_tape(*this, params, batch, tape.constant(g)).value()), n);
}

std::vector<ad::Var> bind_parameters(ad::Tape& tape, const KoopmanModel& model, bool trainable) {
  std::vector<ad::Var> out;
  out.reserve(model.parameters().size());
  for (const DenseMatrix& p : model.parameters()) {
    out.push_back(trainable ? tape.variable(p) : tape.constant(p));
  }
  return out;
}

ad::Var encode_tape(const KoopmanModel& model, std::span<const ad::Var> params,
                    const GraphBatch& batch, ad::Var normalized) {
  check_model_params(model, params);
  ad::Tape& tape = *normalized.tape();
  const ad::Var parts[2] = {normalized, tape.constant(batch.object_attributes)};
  return graph_net(encoder_params(params), batch, ad::hconcat(parts));
}

ad::Var decode_tape(const KoopmanModel& model, std::span<const ad::Var> params,
                    const GraphBatch& batch, ad::Var embeddings) {
  check_model_params(model, params);
  ad::Tape& tape = *embeddings.tape();
  const ad::Var parts[2] = {embeddings, tape.constant(batch.object_attributes)};
  return graph_net(decoder_params(params), batch, ad::hconcat(parts));
}

void to_json(nlohmann::json& j, const KoopmanModel& model) {
  nlohmann::json layers = nlohmann::json::object();
  for (std::size_t k = 0; k < model.parameters().size(); ++k) {
    const DenseMatrix& p = model.parameters()[k];
    layers[model.parameter_names()[k]] = {
        {"shape", {p.rows(), p.cols()}},
        {"data", std::vector<double>(p.data().begin(), p.data().end())}};
  }
  const auto& mean = model.state_mean().data();
  const auto& scale = model.state_scale().data();
  j = nlohmann::json{{"format", kFormatTag},
                     {"config", model.config()},
                     {"normalizer",
                      {{"mean", std::vector<double>(mean.begin(), mean.end())},
                       {"scale", std::vector<double>(scale.begin(), scale.end())}}},
                     {"layers", layers}};
}

void from_json(const nlohmann::json& j, KoopmanModel& model) {
  try {
    if (j.value("format", std::string()) != kFormatTag) {
      throw ConfigError("checkpoint format tag is not " + std::string(kFormatTag));
    }
    const auto config = j.at("config").get<ModelConfig>();
    KoopmanModel m = KoopmanModel::init(config, 0);
    const auto& layers = j.at("layers");
    for (std::size_t k = 0; k < m.parameters().size(); ++k) {
      const std::string& name = m.parameter_names()[k];
      if (!layers.contains(name)) throw ConfigError("checkpoint is missing layer " + name);
      const auto& layer = layers.at(name);
      const auto shape = layer.at("shape").get<std::vector<std::size_t>>();
      DenseMatrix& p = m.parameters()[k];
      if (shape.size() != 2 || shape[0] != p.rows() || shape[1] != p.cols()) {
        throw ConfigError("checkpoint layer " + name + " has the wrong shape");
      }
      auto data = layer.at("data").get<std::vector<double>>();
      if (data.size() != p.size()) throw ConfigError("checkpoint layer " + name + " is truncated");
      p = DenseMatrix(p.rows(), p.cols(), std::move(data));
    }
    const auto d = static_cast<std::size_t>(config.state_dim);
    m.set_normalizer(DenseMatrix(1, d, j.at("normalizer").at("mean").get<std::vector<double>>()),
                     DenseMatrix(1, d, j.at("normalizer").at("scale").get<std::vector<double>>()));
    model = std::move(m);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid checkpoint: ") + e.what());
  }
}

void save_checkpoint(const KoopmanModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << nlohmann::json(model).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

KoopmanModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  return j.get<KoopmanModel>();
}

std::size_t poly_feature_count(std::size_t d, int max_order) {
  // C(d + k, k) - 1
  std::size_t c = 1;
  for (int k = 1; k <= max_order; ++k) c = c * (d + static_cast<std::size_t>(k)) / static_cast<std::size_t>(k);
  return c - 1;
}

Embedding poly_basis(const DenseMatrix& states, int max_order) {
  if (max_order < 1 || max_order > 3) {
    throw ArgumentError("polynomial order must be in [1, 3], got " + std::to_string(max_order));
  }
  const std::size_t d = states.cols();
  Embedding out(states.rows(), poly_feature_count(d, max_order));
  for (std::size_t r = 0; r < states.rows(); ++r) {
    const auto x = states.row(r);
    std::size_t f = 0;
    for (std::size_t a = 0; a < d; ++a) out(r, f++) = x[a];
    if (max_order >= 2) {
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) out(r, f++) = x[a] * x[b];
      }
    }
    if (max_order >= 3) {
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) {
          for (std::size_t c = b; c < d; ++c) out(r, f++) = x[a] * x[b] * x[c];
        }
      }
    }
  }
  return out;
}

Embedding poly_basis(const SystemState& state, int max_order) {
  return poly_basis(state.values, max_order);
}

Embedding Observer::observe(const SceneGraph& graph, const SystemState& state) const {
  return observe(graph, std::span<const SystemState>(&state, 1)).front();
}

DenseMatrix Observer::reconstruct(const SceneGraph& graph, const Embedding& emb) const {
  return reconstruct(graph, std::span<const Embedding>(&emb, 1)).front();
}

namespace {

class PolyObserver final : public Observer {
 public:
  PolyObserver(int d, int order) : d_(d), order_(order) {
    if (order < 1 || order > 3) throw ArgumentError("polynomial order must be in [1, 3]");
  }
  int width() const override {
    return static_cast<int>(poly_feature_count(static_cast<std::size_t>(d_), order_));
  }
  std::vector<Embedding> observe(const SceneGraph&,
                                 std::span<const SystemState> states) const override {
    std::vector<Embedding> out;
    out.reserve(states.size());
    for (const SystemState& s : states) {
      if (s.values.cols() != static_cast<std::size_t>(d_)) {
        throw DimensionError("observer state width mismatch");
      }
      out.push_back(poly_basis(s.values, order_));
    }
    return out;
  }
  std::vector<DenseMatrix> reconstruct(const SceneGraph&,
                                       std::span<const Embedding> embs) const override {
    std::vector<DenseMatrix> out;
    out.reserve(embs.size());
    for (const Embedding& e : embs) out.push_back(e.block(0, 0, e.rows(), static_cast<std::size_t>(d_)));
    return out;
  }

 private:
  int d_;
  int order_;
};

class LearnedObserver final : public Observer {
 public:
  explicit LearnedObserver(KoopmanModel model) : model_(std::move(model)) {}
  int width() const override { return model_.m(); }
  std::vector<Embedding> observe(const SceneGraph& graph,
                                 std::span<const SystemState> states) const override {
    return model_.encode_frames(graph, states);
  }
  std::vector<DenseMatrix> reconstruct(const SceneGraph& graph,
                                       std::span<const Embedding> embs) const override {
    return model_.decode_frames(graph, embs);
  }

 private:
  KoopmanModel model_;
};

}  // namespace

std::unique_ptr<Observer> make_identity_observer(int state_dim) {
  return std::make_unique<PolyObserver>(state_dim, 1);
}

std::unique_ptr<Observer> make_poly_observer(int state_dim, int max_order) {
  return std::make_unique<PolyObserver>(state_dim, max_order);
}

std::unique_ptr<Observer> make_learned_observer(const KoopmanModel& model) {
  return std::make_unique<LearnedObserver>(model);
}

}  // namespace ckpm
