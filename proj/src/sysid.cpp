#include "ckpm/sysid.hpp"

#include <algorithm>
#include <cmath>

#include "ckpm/errors.hpp"

namespace ckpm {

namespace {

// Aggregates rows of x (N x w) by type: out[i] = sum_{j: sigma(i,j)=c} x[j].
DenseMatrix aggregate(const TypeMap& types, const DenseMatrix& x, int c) {
  DenseMatrix out(types.n, x.cols());
  for (std::size_t i = 0; i < types.n; ++i) {
    auto dst = out.row(i);
    for (std::size_t j = 0; j < types.n; ++j) {
      if (types.at(i, j) != c) continue;
      const auto src = x.row(j);
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    }
  }
  return out;
}

ad::RowGroupsPtr aggregation_groups(const TypeMap& types, std::size_t frames, int c) {
  auto groups = std::make_shared<ad::RowGroups>();
  std::vector<std::size_t> members;
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t i = 0; i < types.n; ++i) {
      members.clear();
      for (std::size_t j = 0; j < types.n; ++j) {
        if (types.at(i, j) == c) members.push_back(f * types.n + j);
      }
      groups->add(members);
    }
  }
  return groups;
}

bool has_nonzero(std::span<const double> xs) {
  return std::any_of(xs.begin(), xs.end(), [](double v) { return v != 0.0; });
}

std::vector<int> present_types(const TypeMap& types) {
  std::vector<bool> seen(static_cast<std::size_t>(types.h) + 1, false);
  for (int s : types.sigma) seen[static_cast<std::size_t>(s)] = true;
  std::vector<int> out;
  for (int c = 1; c <= types.h; ++c) {
    if (seen[static_cast<std::size_t>(c)]) out.push_back(c);
  }
  return out;
}

// Types whose aggregated actions are nonzero somewhere.
std::vector<int> action_types_for(const TypeMap& types, const std::vector<bool>& acting) {
  std::vector<int> out;
  for (int c : present_types(types)) {
    bool any = false;
    for (std::size_t i = 0; i < types.n && !any; ++i) {
      for (std::size_t j = 0; j < types.n && !any; ++j) any = types.at(i, j) == c && acting[j];
    }
    if (any) out.push_back(c);
  }
  return out;
}

std::vector<bool> acting_objects(std::span<const EmbeddingSequence> data, std::size_t n) {
  std::vector<bool> acting(n, false);
  for (const auto& seq : data) {
    for (const auto& u : seq.u) {
      for (std::size_t j = 0; j < n; ++j) acting[j] = acting[j] || has_nonzero(u.row(j));
    }
  }
  return acting;
}

DenseMatrix ridge_solve(DenseMatrix a, const DenseMatrix& b, Ridge ridge) {
  const double shift = ridge.shift(trace(a), a.rows());
  for (std::size_t k = 0; k < a.rows(); ++k) a(k, k) += shift;
  try {
    return Cholesky(a).solve(b);
  } catch (const NotPositiveDefiniteError& e) {
    throw NumericalError(std::string("system identification normal equations are singular (") +
                         e.what() + "); use ridge > 0");
  }
}

void check_common(std::span<const EmbeddingSequence> data) {
  if (data.empty()) throw ArgumentError("system identification needs at least one sequence");
  for (const auto& seq : data) {
    seq.validate();
    if (seq.num_objects() != data.front().num_objects() || seq.m() != data.front().m() ||
        seq.l() != data.front().l()) {
      throw DimensionError("sequences disagree on object count or widths");
    }
  }
}

DenseMatrix block_rows(const DenseMatrix& w, std::size_t r0, std::size_t count) {
  return w.block(r0, 0, count, w.cols());
}

void fill_blocks(BlockDynamics& dyn, const DenseMatrix& w_t, const std::vector<int>& state_types,
                 const std::vector<int>& action_types) {
  const auto h = static_cast<std::size_t>(dyn.types.h);
  dyn.K_hat.assign(h, DenseMatrix(dyn.m, dyn.m));
  dyn.L_hat.assign(h, DenseMatrix(dyn.m, dyn.l));
  for (std::size_t k = 0; k < state_types.size(); ++k) {
    dyn.K_hat[static_cast<std::size_t>(state_types[k] - 1)] =
        transpose(block_rows(w_t, k * dyn.m, dyn.m));
  }
  const std::size_t off = state_types.size() * dyn.m;
  for (std::size_t k = 0; k < action_types.size(); ++k) {
    dyn.L_hat[static_cast<std::size_t>(action_types[k] - 1)] =
        transpose(block_rows(w_t, off + k * dyn.l, dyn.l));
  }
  dyn.missing_types = dyn.types.missing_types();
}

DenseMatrix matrix_from_json(const nlohmann::json& j, std::size_t rows, std::size_t cols) {
  const auto nested = j.get<std::vector<std::vector<double>>>();
  if (nested.size() != rows) throw ConfigError("matrix has the wrong number of rows");
  DenseMatrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (nested[r].size() != cols) throw ConfigError("matrix has the wrong number of columns");
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = nested[r][c];
  }
  return out;
}

nlohmann::json matrix_to_json(const DenseMatrix& m) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    out.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  }
  return out;
}

}  // namespace

double Ridge::shift(double gram_trace, std::size_t p) const {
  if (value < 0.0 || !std::isfinite(value)) throw ArgumentError("ridge must be non-negative");
  return trace_scaled ? value * gram_trace / static_cast<double>(p) : value;
}

std::string to_string(StructureMode mode) {
  switch (mode) {
    case StructureMode::Block: return "Block";
    case StructureMode::Diag: return "Diag";
    case StructureMode::None: return "None";
  }
  return "?";
}

StructureMode structure_mode_from_string(const std::string& name) {
  if (name == "Block") return StructureMode::Block;
  if (name == "Diag") return StructureMode::Diag;
  if (name == "None") return StructureMode::None;
  throw ConfigError("unknown structure mode '" + name + "' (expected Block, Diag or None)");
}

std::vector<int> TypeMap::missing_types() const {
  std::vector<bool> seen(static_cast<std::size_t>(h) + 1, false);
  for (int s : sigma) seen[static_cast<std::size_t>(s)] = true;
  std::vector<int> out;
  for (int c = 1; c <= h; ++c) {
    if (!seen[static_cast<std::size_t>(c)]) out.push_back(c);
  }
  return out;
}

TypeMap type_map(const SceneGraph& graph) {
  return {graph.num_objects(), graph.h(), graph.sigma_flat()};
}

TypeMap diag_type_map(std::size_t n) {
  TypeMap t{n, 1, std::vector<int>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) t.sigma[i * n + i] = 1;
  return t;
}

TypeMap type_map_for(StructureMode mode, const SceneGraph& graph) {
  switch (mode) {
    case StructureMode::Block: return type_map(graph);
    case StructureMode::Diag: return diag_type_map(graph.num_objects());
    case StructureMode::None: break;
  }
  throw ArgumentError("unstructured dynamics have no type map");
}

void EmbeddingSequence::validate() const {
  if (g.size() < 2) throw DimensionError("an embedding sequence needs at least two steps");
  if (u.size() + 1 != g.size()) {
    throw DimensionError("sequence has " + std::to_string(g.size()) + " embeddings but " +
                         std::to_string(u.size()) + " actions");
  }
  for (const auto& x : g) {
    if (x.rows() != g.front().rows() || x.cols() != g.front().cols()) {
      throw DimensionError("embedding shapes vary within a sequence");
    }
  }
  for (const auto& x : u) {
    if (x.rows() != g.front().rows() || x.cols() != u.front().cols()) {
      throw DimensionError("action shapes vary within a sequence or disagree with N");
    }
  }
}

std::size_t BlockDynamics::num_objects() const {
  if (mode == StructureMode::None) return m == 0 ? 0 : K.rows() / m;
  return types.n;
}

std::size_t BlockDynamics::parameter_count() const {
  if (mode == StructureMode::None) return K.size() + L.size();
  return static_cast<std::size_t>(types.h) * m * (m + l);
}

BlockDynamics BlockDynamics::rebind(const TypeMap& other) const {
  if (mode == StructureMode::None) {
    throw ArgumentError("unstructured dynamics cannot be rebound to another graph");
  }
  BlockDynamics out = *this;
  out.types = mode == StructureMode::Diag ? diag_type_map(other.n) : other;
  if (out.types.h != types.h) throw ArgumentError("type maps disagree on h");
  return out;
}

void to_json(nlohmann::json& j, const BlockDynamics& d) {
  j = nlohmann::json{{"mode", to_string(d.mode)}, {"m", d.m}, {"l", d.l}};
  if (d.mode == StructureMode::None) {
    j["h"] = 0;
    j["n"] = d.num_objects();
    j["K"] = matrix_to_json(d.K);
    j["L"] = matrix_to_json(d.L);
    return;
  }
  j["h"] = d.types.h;
  nlohmann::json sigma = nlohmann::json::array();
  for (std::size_t i = 0; i < d.types.n; ++i) {
    sigma.push_back(std::vector<int>(d.types.sigma.begin() + static_cast<std::ptrdiff_t>(i * d.types.n),
                                     d.types.sigma.begin() + static_cast<std::ptrdiff_t>((i + 1) * d.types.n)));
  }
  j["sigma"] = sigma;
  nlohmann::json kh = nlohmann::json::array(), lh = nlohmann::json::array();
  for (const auto& k : d.K_hat) kh.push_back(matrix_to_json(k));
  for (const auto& l : d.L_hat) lh.push_back(matrix_to_json(l));
  j["K_hat"] = kh;
  j["L_hat"] = lh;
}

void from_json(const nlohmann::json& j, BlockDynamics& d) {
  try {
    BlockDynamics out;
    out.mode = structure_mode_from_string(j.at("mode").get<std::string>());
    out.m = j.at("m").get<std::size_t>();
    out.l = j.at("l").get<std::size_t>();
    if (out.mode == StructureMode::None) {
      const auto n = j.at("n").get<std::size_t>();
      out.K = matrix_from_json(j.at("K"), n * out.m, n * out.m);
      out.L = matrix_from_json(j.at("L"), n * out.m, n * out.l);
    } else {
      out.types.h = j.at("h").get<int>();
      const auto sigma = j.at("sigma").get<std::vector<std::vector<int>>>();
      out.types.n = sigma.size();
      for (const auto& row : sigma) {
        if (row.size() != out.types.n) throw ConfigError("sigma must be square");
        for (int s : row) {
          if (s < 0 || s > out.types.h) throw ConfigError("sigma entry outside [0, h]");
          out.types.sigma.push_back(s);
        }
      }
      const auto& kh = j.at("K_hat");
      const auto& lh = j.at("L_hat");
      if (kh.size() != static_cast<std::size_t>(out.types.h) ||
          lh.size() != static_cast<std::size_t>(out.types.h)) {
        throw ConfigError("K_hat and L_hat need h blocks");
      }
      for (const auto& k : kh) out.K_hat.push_back(matrix_from_json(k, out.m, out.m));
      for (const auto& l : lh) out.L_hat.push_back(matrix_from_json(l, out.m, out.l));
      out.missing_types = out.types.missing_types();
    }
    d = std::move(out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid dynamics JSON: ") + e.what());
  }
}

BlockDynamics identify_unstructured(std::span<const EmbeddingSequence> data, Ridge ridge) {
  check_common(data);
  const std::size_t n = data.front().num_objects(), m = data.front().m(), l = data.front().l();
  const std::vector<bool> acting = acting_objects(data, n);
  std::vector<std::size_t> acting_idx;
  for (std::size_t j = 0; j < n; ++j) {
    if (acting[j] && l > 0) acting_idx.push_back(j);
  }
  const std::size_t p = n * m + acting_idx.size() * l;
  DenseMatrix a(p, p), b(p, n * m);
  for (const auto& seq : data) {
    const std::size_t steps = seq.u.size();
    DenseMatrix z(steps, p), y(steps, n * m);
    for (std::size_t t = 0; t < steps; ++t) {
      std::copy(seq.g[t].data().begin(), seq.g[t].data().end(), z.row(t).begin());
      std::size_t col = n * m;
      for (std::size_t j : acting_idx) {
        for (std::size_t q = 0; q < l; ++q) z(t, col++) = seq.u[t](j, q);
      }
      std::copy(seq.g[t + 1].data().begin(), seq.g[t + 1].data().end(), y.row(t).begin());
    }
    a += matmul_tn(z, z);
    b += matmul_tn(z, y);
  }
  const DenseMatrix w_t = ridge_solve(std::move(a), b, ridge);
  BlockDynamics dyn;
  dyn.mode = StructureMode::None;
  dyn.m = m;
  dyn.l = l;
  dyn.K = transpose(block_rows(w_t, 0, n * m));
  dyn.L = DenseMatrix(n * m, n * l);
  for (std::size_t k = 0; k < acting_idx.size(); ++k) {
    dyn.L.set_block(0, acting_idx[k] * l, transpose(block_rows(w_t, n * m + k * l, l)));
  }
  return dyn;
}

BlockDynamics identify_structured(std::span<const EmbeddingSequence> data, const TypeMap& types,
                                  Ridge ridge) {
  check_common(data);
  const std::size_t n = data.front().num_objects(), m = data.front().m(), l = data.front().l();
  if (types.n != n) {
    throw DimensionError("type map covers " + std::to_string(types.n) + " objects, data has " +
                         std::to_string(n));
  }
  const std::vector<int> state_types = present_types(types);
  const std::vector<int> action_types =
      l > 0 ? action_types_for(types, acting_objects(data, n)) : std::vector<int>{};
  const std::size_t p = state_types.size() * m + action_types.size() * l;
  DenseMatrix a(p, p), b(p, m);
  for (const auto& seq : data) {
    const std::size_t steps = seq.u.size();
    DenseMatrix z(steps * n, p), y(steps * n, m);
    for (std::size_t t = 0; t < steps; ++t) {
      std::size_t col = 0;
      for (int c : state_types) {
        z.set_block(t * n, col, aggregate(types, seq.g[t], c));
        col += m;
      }
      for (int c : action_types) {
        z.set_block(t * n, col, aggregate(types, seq.u[t], c));
        col += l;
      }
      y.set_block(t * n, 0, seq.g[t + 1]);
    }
    a += matmul_tn(z, z);
    b += matmul_tn(z, y);
  }
  const DenseMatrix w_t = ridge_solve(std::move(a), b, ridge);
  BlockDynamics dyn;
  dyn.mode = types.h == 1 && types == diag_type_map(n) ? StructureMode::Diag : StructureMode::Block;
  dyn.m = m;
  dyn.l = l;
  dyn.types = types;
  fill_blocks(dyn, w_t, state_types, action_types);
  return dyn;
}

BlockDynamics identify_structured(std::span<const EmbeddingSequence> data,
                                  const SceneGraph& graph, Ridge ridge) {
  return identify_structured(data, type_map(graph), ridge);
}

BlockDynamics identify_diag(std::span<const EmbeddingSequence> data, Ridge ridge) {
  check_common(data);
  BlockDynamics dyn = identify_structured(data, diag_type_map(data.front().num_objects()), ridge);
  dyn.mode = StructureMode::Diag;
  return dyn;
}

BlockDynamics identify(StructureMode mode, std::span<const EmbeddingSequence> data,
                       const SceneGraph& graph, Ridge ridge) {
  switch (mode) {
    case StructureMode::Block: {
      BlockDynamics dyn = identify_structured(data, type_map(graph), ridge);
      dyn.mode = StructureMode::Block;
      return dyn;
    }
    case StructureMode::Diag: return identify_diag(data, ridge);
    case StructureMode::None: return identify_unstructured(data, ridge);
  }
  throw ArgumentError("unknown structure mode");
}

MaterializedDynamics materialize(const BlockDynamics& dyn) {
  if (dyn.mode == StructureMode::None) return {dyn.K, dyn.L};
  const std::size_t n = dyn.types.n, m = dyn.m, l = dyn.l;
  MaterializedDynamics out{DenseMatrix(n * m, n * m), DenseMatrix(n * m, n * l)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const int c = dyn.types.at(i, j);
      if (c == 0) continue;
      if (c < 0 || c > dyn.types.h) throw std::logic_error("sigma entry outside [0, h]");
      out.K.set_block(i * m, j * m, dyn.K_hat[static_cast<std::size_t>(c - 1)]);
      if (l > 0) out.L.set_block(i * m, j * l, dyn.L_hat[static_cast<std::size_t>(c - 1)]);
    }
  }
  return out;
}

DenseMatrix flatten_objects(const DenseMatrix& x) { return x.reshaped(x.size(), 1); }

DenseMatrix unflatten_objects(const DenseMatrix& column, std::size_t n) {
  return column.reshaped(n, column.size() / n);
}

DenseMatrix step_linear(const BlockDynamics& dyn, const DenseMatrix& g, const DenseMatrix& u) {
  const std::size_t n = dyn.num_objects();
  if (g.rows() != n || g.cols() != dyn.m) {
    throw DimensionError("embedding " + g.shape_string() + " does not match the dynamics (" +
                         std::to_string(n) + "x" + std::to_string(dyn.m) + ")");
  }
  if (u.rows() != n || u.cols() != dyn.l) {
    throw DimensionError("action " + u.shape_string() + " does not match the dynamics (" +
                         std::to_string(n) + "x" + std::to_string(dyn.l) + ")");
  }
  if (dyn.mode == StructureMode::None) {
    DenseMatrix next = matmul(dyn.K, flatten_objects(g));
    if (dyn.l > 0) next += matmul(dyn.L, flatten_objects(u));
    return unflatten_objects(next, n);
  }
  DenseMatrix next(n, dyn.m);
  for (int c = 1; c <= dyn.types.h; ++c) {
    const auto idx = static_cast<std::size_t>(c - 1);
    next += matmul_nt(aggregate(dyn.types, g, c), dyn.K_hat[idx]);
    if (dyn.l > 0) next += matmul_nt(aggregate(dyn.types, u, c), dyn.L_hat[idx]);
  }
  return next;
}

std::vector<DenseMatrix> rollout_linear(const BlockDynamics& dyn, const DenseMatrix& g1,
                                        std::span<const DenseMatrix> controls) {
  if (controls.empty()) throw ArgumentError("rollout horizon must be at least 1");
  std::vector<DenseMatrix> out{g1};
  out.reserve(controls.size() + 1);
  for (const auto& u : controls) out.push_back(step_linear(dyn, out.back(), u));
  return out;
}

double residual(const BlockDynamics& dyn, std::span<const EmbeddingSequence> data) {
  double total = 0.0;
  for (const auto& seq : data) {
    seq.validate();
    for (std::size_t t = 0; t < seq.u.size(); ++t) {
      const DenseMatrix err = step_linear(dyn, seq.g[t], seq.u[t]) - seq.g[t + 1];
      for (double v : err.data()) total += v * v;
    }
  }
  return total;
}

TapeDynamics identify_structured_tape(ad::Var g, const DenseMatrix& u, const TypeMap& types,
                                      Ridge ridge, bool stop_gradient) {
  ad::Tape& tape = *g.tape();
  const std::size_t n = types.n;
  if (n == 0 || g.rows() % n != 0 || g.rows() < 2 * n) {
    throw DimensionError("stacked embeddings " + g.value().shape_string() +
                         " do not hold at least two frames of " + std::to_string(n) + " objects");
  }
  const std::size_t frames = g.rows() / n, m = g.cols(), l = u.cols();
  if (u.rows() != (frames - 1) * n) {
    throw DimensionError("stacked actions " + u.shape_string() + " do not match " +
                         std::to_string(frames - 1) + " transitions");
  }
  if (ridge.value < 0.0) throw ArgumentError("ridge must be non-negative");

  TapeDynamics dyn;
  dyn.types = types;
  dyn.m = m;
  dyn.l = l;
  dyn.state_types = present_types(types);
  if (l > 0) {
    std::vector<bool> acting(n, false);
    for (std::size_t r = 0; r < u.rows(); ++r) acting[r % n] = acting[r % n] || has_nonzero(u.row(r));
    dyn.action_types = action_types_for(types, acting);
  }

  auto solve = [&](ad::Tape& t, ad::Var gv) {
    ad::Var prev = ad::slice_rows(gv, 0, (frames - 1) * n);
    ad::Var next = ad::slice_rows(gv, n, (frames - 1) * n);
    std::vector<ad::Var> parts;
    for (int c : dyn.state_types) parts.push_back(ad::gather_sum(prev, aggregation_groups(types, frames - 1, c)));
    for (int c : dyn.action_types) {
      DenseMatrix a((frames - 1) * n, l);
      for (std::size_t f = 0; f + 1 < frames; ++f) {
        a.set_block(f * n, 0, aggregate(types, u.block(f * n, 0, n, l), c));
      }
      parts.push_back(t.constant(std::move(a)));
    }
    ad::Var z = ad::hconcat(parts);
    ad::Var zt = ad::transpose(z);
    ad::Var gram = ad::matmul(zt, z);
    ad::Var lhs = ridge.trace_scaled
                      ? ad::ridge_regularize(gram, ridge.value)
                      : gram + t.constant(ridge.value * DenseMatrix::identity(gram.rows()));
    return ad::spd_solve(lhs, ad::matmul(zt, next));
  };
  try {
    if (stop_gradient) {
      ad::Tape scratch;
      dyn.W = tape.constant(solve(scratch, scratch.constant(g.value())).value());
    } else {
      dyn.W = solve(tape, g);
    }
  } catch (const NotPositiveDefiniteError& e) {
    throw NumericalError(std::string("system identification normal equations are singular (") +
                         e.what() + "); use ridge > 0");
  }
  return dyn;
}

ad::Var rollout_tape(const TapeDynamics& dyn, ad::Var g1, const DenseMatrix& u, std::size_t steps) {
  ad::Tape& tape = *g1.tape();
  const std::size_t n = dyn.types.n;
  if (g1.rows() != n || g1.cols() != dyn.m) throw DimensionError("rollout start has the wrong shape");
  if (u.rows() < steps * n || u.cols() != dyn.l) throw DimensionError("rollout actions too short");
  std::vector<ad::RowGroupsPtr> groups;
  for (int c : dyn.state_types) groups.push_back(aggregation_groups(dyn.types, 1, c));
  std::vector<ad::Var> frames{g1};
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<ad::Var> parts;
    for (const auto& gr : groups) parts.push_back(ad::gather_sum(frames.back(), gr));
    const DenseMatrix ut = u.block(t * n, 0, n, dyn.l);
    for (int c : dyn.action_types) parts.push_back(tape.constant(aggregate(dyn.types, ut, c)));
    frames.push_back(ad::matmul(ad::hconcat(parts), dyn.W));
  }
  return ad::vconcat(frames);
}

BlockDynamics to_block_dynamics(const TapeDynamics& dyn) {
  BlockDynamics out;
  out.mode = dyn.types == diag_type_map(dyn.types.n) ? StructureMode::Diag : StructureMode::Block;
  out.m = dyn.m;
  out.l = dyn.l;
  out.types = dyn.types;
  fill_blocks(out, dyn.W.value(), dyn.state_types, dyn.action_types);
  return out;
}

}  // namespace ckpm
