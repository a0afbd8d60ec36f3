#pragma once

// Linear system identification in the embedding space.
//
//   g^{t+1} = K g^t + L u^t
//
// Block mode ties K and L to a block-type map sigma: block (i, j) of K is
// K_hat[sigma(i, j)] (zero for type 0), likewise for L. Fitting reduces to an
// ordinary ridge regression by aggregating, for every object i and type c,
//   s_{i,c} = sum_{j: sigma(i,j)=c} g_j,   a_{i,c} = sum_{j: sigma(i,j)=c} u_j
// and regressing g_i^{t+1} on [s_{i,1} .. s_{i,h}, a_{i,1} .. a_{i,h}].
//
// Normal equations are regularised with A + r I. An explicit ridge is the
// absolute r; the default scales with the data, r = 1e-6 * tr(A) / p.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckpm/matrix.hpp"
#include "ckpm/scene_graph.hpp"
#include "ckpm/tape.hpp"

namespace ckpm {

enum class StructureMode { Block, Diag, None };

std::string to_string(StructureMode mode);
StructureMode structure_mode_from_string(const std::string& name);

struct Ridge {
  double value = 1e-6;
  bool trace_scaled = true;

  Ridge() = default;
  // Absolute ridge.
  Ridge(double absolute) : value(absolute), trace_scaled(false) {}  // NOLINT: implicit by design
  static Ridge relative(double factor) {
    Ridge r;
    r.value = factor;
    return r;
  }
  // Diagonal shift for a p x p Gram matrix with the given trace.
  double shift(double gram_trace, std::size_t p) const;
};

struct TypeMap {
  std::size_t n = 0;
  int h = 0;
  std::vector<int> sigma;  // n*n, sigma[i*n + j] is the type of j -> i

  int at(std::size_t i, std::size_t j) const { return sigma[i * n + j]; }
  // Types in 1..h that never appear.
  std::vector<int> missing_types() const;

  friend bool operator==(const TypeMap&, const TypeMap&) = default;
};

TypeMap type_map(const SceneGraph& graph);
// One shared self type, no pairwise types.
TypeMap diag_type_map(std::size_t n);
TypeMap type_map_for(StructureMode mode, const SceneGraph& graph);

// Per-step embeddings g^1..g^T (N x m) and actions u^1..u^{T-1} (N x l).
struct EmbeddingSequence {
  std::vector<DenseMatrix> g;
  std::vector<DenseMatrix> u;

  std::size_t num_objects() const { return g.empty() ? 0 : g.front().rows(); }
  std::size_t m() const { return g.empty() ? 0 : g.front().cols(); }
  std::size_t l() const { return u.empty() ? 0 : u.front().cols(); }
  // Throws DimensionError on inconsistent lengths or shapes.
  void validate() const;
};

struct BlockDynamics {
  StructureMode mode = StructureMode::Block;
  std::size_t m = 0;
  std::size_t l = 0;
  TypeMap types;                   // Block and Diag
  std::vector<DenseMatrix> K_hat;  // h blocks of m x m
  std::vector<DenseMatrix> L_hat;  // h blocks of m x l
  DenseMatrix K;                   // None: Nm x Nm
  DenseMatrix L;                   // None: Nm x Nl
  std::vector<int> missing_types;  // block types returned as zero for lack of data

  std::size_t num_objects() const;
  int h() const { return types.h; }
  bool has_warning() const { return !missing_types.empty(); }
  // Number of fitted reals.
  std::size_t parameter_count() const;
  // Same shared blocks over a different type map (e.g. more objects).
  BlockDynamics rebind(const TypeMap& other) const;
};

void to_json(nlohmann::json& j, const BlockDynamics& d);
void from_json(const nlohmann::json& j, BlockDynamics& d);

BlockDynamics identify_unstructured(std::span<const EmbeddingSequence> data,
                                    Ridge ridge = {});
BlockDynamics identify_structured(std::span<const EmbeddingSequence> data, const TypeMap& types,
                                  Ridge ridge = {});
BlockDynamics identify_structured(std::span<const EmbeddingSequence> data,
                                  const SceneGraph& graph, Ridge ridge = {});
BlockDynamics identify_diag(std::span<const EmbeddingSequence> data, Ridge ridge = {});
BlockDynamics identify(StructureMode mode, std::span<const EmbeddingSequence> data,
                       const SceneGraph& graph, Ridge ridge = {});

struct MaterializedDynamics {
  DenseMatrix K;
  DenseMatrix L;
};

MaterializedDynamics materialize(const BlockDynamics& dyn);

// One step of the dynamics on an N x m embedding.
DenseMatrix step_linear(const BlockDynamics& dyn, const DenseMatrix& g, const DenseMatrix& u);
// Returns g^1 .. g^{H+1} for H = controls.size().
std::vector<DenseMatrix> rollout_linear(const BlockDynamics& dyn, const DenseMatrix& g1,
                                        std::span<const DenseMatrix> controls);

// Sum of squared one-step prediction errors over every transition.
double residual(const BlockDynamics& dyn, std::span<const EmbeddingSequence> data);

// Flattens an N x c matrix to an Nc x 1 column, object-major.
DenseMatrix flatten_objects(const DenseMatrix& x);
DenseMatrix unflatten_objects(const DenseMatrix& column, std::size_t n);

// Tape-level structured identification used during training. Frames are
// stacked row-wise: row t*N + i is object i at step t.
struct TapeDynamics {
  TypeMap types;
  std::size_t m = 0;
  std::size_t l = 0;
  // Types whose state and action blocks take part in the fit, in column order.
  std::vector<int> state_types;
  std::vector<int> action_types;
  // Rows: m per state type, then l per action type.
  // W[k*m + s][r] = K_hat_{state_types[k]}[r][s].
  ad::Var W;
};

// g: (T*N) x m, u: ((T-1)*N) x l. With stop_gradient the solve is detached.
TapeDynamics identify_structured_tape(ad::Var g, const DenseMatrix& u, const TypeMap& types,
                                      Ridge ridge = {}, bool stop_gradient = false);
// Rolls out from g1 (N x m) over the stacked actions ((H)*N x l) and returns
// the stacked (H+1)*N x m predictions, g1 first.
ad::Var rollout_tape(const TapeDynamics& dyn, ad::Var g1, const DenseMatrix& u, std::size_t steps);
BlockDynamics to_block_dynamics(const TapeDynamics& dyn);

}  // namespace ckpm
