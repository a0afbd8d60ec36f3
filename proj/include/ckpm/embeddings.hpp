#pragma once

// Koopman observation functions. The learned pair is an Interaction-Network
// style encoder phi and a decoder psi of the same shape; the polynomial basis
// is the hand-crafted dictionary of the KPM baseline.
//
// Every graph network runs one round of message passing:
//   e_k = f_R(o_u, o_v, a_k)          for each relation u -> v
//   y_i = f_O(o_i, sum_{k: v_k = i} e_k)
// with f_R and f_O two-hidden-layer ReLU perceptrons shared across objects.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckpm/envs.hpp"
#include "ckpm/matrix.hpp"
#include "ckpm/scene_graph.hpp"
#include "ckpm/tape.hpp"

namespace ckpm {

// N x m matrix, row i is the sub-embedding g_i of object i.
using Embedding = DenseMatrix;

struct ModelConfig {
  std::string family;  // graph family the model was built for: rope, lattice, complete
  int state_dim = 4;
  int num_object_types = 1;
  int num_relation_types = 1;
  int m = 32;
  int hidden = 128;
  int effect_dim = 0;  // 0 selects `hidden`
  bool standardize = true;

  int effective_effect_dim() const { return effect_dim > 0 ? effect_dim : hidden; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Frames of one graph stacked row-wise: row f*N + i is object i of frame f.
struct GraphBatch {
  std::size_t frames = 0;
  std::size_t objects = 0;
  std::size_t relations = 0;
  ad::RowGroupsPtr senders;    // one group per edge row
  ad::RowGroupsPtr receivers;  // one group per edge row
  ad::RowGroupsPtr types;      // edge row -> relation type row (type - 1)
  ad::RowGroupsPtr incoming;   // node row -> its incoming edge rows, in relation order
  DenseMatrix object_attributes;  // (frames*N) x num_object_types
};

GraphBatch make_graph_batch(const SceneGraph& graph, std::size_t frames);

class KoopmanModel {
 public:
  KoopmanModel() = default;
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation, identity normaliser.
  static KoopmanModel init(const ModelConfig& config, std::uint64_t seed);
  static KoopmanModel for_graph(const SceneGraph& graph, int state_dim, int m, int hidden,
                                std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  int m() const noexcept { return config_.m; }
  int state_dim() const noexcept { return config_.state_dim; }

  const std::vector<std::string>& parameter_names() const noexcept { return names_; }
  const std::vector<DenseMatrix>& parameters() const noexcept { return params_; }
  std::vector<DenseMatrix>& parameters() noexcept { return params_; }
  std::size_t parameter_count() const;

  // Per-dimension standardisation statistics (1 x d each).
  const DenseMatrix& state_mean() const noexcept { return mean_; }
  const DenseMatrix& state_scale() const noexcept { return scale_; }
  void set_normalizer(DenseMatrix mean, DenseMatrix scale);
  // Computes statistics from every row of every state; a no-op when
  // standardisation is disabled.
  void fit_normalizer(std::span<const Trajectory> episodes);

  DenseMatrix normalize(const DenseMatrix& states) const;
  DenseMatrix denormalize(const DenseMatrix& normalized) const;

  // Throws DimensionError on N or width mismatch.
  Embedding encode(const SceneGraph& graph, const SystemState& state) const;
  DenseMatrix decode(const SceneGraph& graph, const Embedding& emb) const;
  // Batched value-only versions over whole trajectories.
  std::vector<Embedding> encode_frames(const SceneGraph& graph,
                                       std::span<const SystemState> states) const;
  std::vector<DenseMatrix> decode_frames(const SceneGraph& graph,
                                         std::span<const Embedding> embs) const;

  void check_graph(const SceneGraph& graph) const;

 private:
  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<DenseMatrix> params_;
  DenseMatrix mean_;
  DenseMatrix scale_;
};

void to_json(nlohmann::json& j, const KoopmanModel& model);
void from_json(const nlohmann::json& j, KoopmanModel& model);
void save_checkpoint(const KoopmanModel& model, const std::string& path);
KoopmanModel load_checkpoint(const std::string& path);

// Tape-level graph networks. `params` holds one Var per model parameter in
// parameter_names() order.
std::vector<ad::Var> bind_parameters(ad::Tape& tape, const KoopmanModel& model, bool trainable);
// normalized: (frames*N) x d. Returns (frames*N) x m.
ad::Var encode_tape(const KoopmanModel& model, std::span<const ad::Var> params,
                    const GraphBatch& batch, ad::Var normalized);
// embeddings: (frames*N) x m. Returns (frames*N) x d in normalised units.
ad::Var decode_tape(const KoopmanModel& model, std::span<const ad::Var> params,
                    const GraphBatch& batch, ad::Var embeddings);

// All monomials of each object's own state with total degree in
// [1, max_order], ordered by degree and then lexicographically, so the first d
// features are the state itself.
Embedding poly_basis(const SystemState& state, int max_order);
Embedding poly_basis(const DenseMatrix& states, int max_order);
std::size_t poly_feature_count(std::size_t d, int max_order);

/// A fixed or learned observation map used at evaluation time.
class Observer {
 public:
  virtual ~Observer() = default;
  virtual int width() const = 0;
  virtual std::vector<Embedding> observe(const SceneGraph& graph,
                                         std::span<const SystemState> states) const = 0;
  virtual std::vector<DenseMatrix> reconstruct(const SceneGraph& graph,
                                               std::span<const Embedding> embs) const = 0;
  Embedding observe(const SceneGraph& graph, const SystemState& state) const;
  DenseMatrix reconstruct(const SceneGraph& graph, const Embedding& emb) const;
};

std::unique_ptr<Observer> make_identity_observer(int state_dim);
std::unique_ptr<Observer> make_poly_observer(int state_dim, int max_order = 3);
// Holds a copy of the model.
std::unique_ptr<Observer> make_learned_observer(const KoopmanModel& model);

}  // namespace ckpm
