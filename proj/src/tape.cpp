#include "ckpm/tape.hpp"

#include <cmath>
#include <string>

#include "ckpm/errors.hpp"

namespace ckpm::ad {

const DenseMatrix& Var::value() const { return tape_->value(index_); }
const DenseMatrix& Var::grad() const { return tape_->grad(index_); }
bool Var::requires_grad() const { return tape_->requires_grad(index_); }

void RowGroups::add(std::span<const std::size_t> group) {
  indices.insert(indices.end(), group.begin(), group.end());
  offsets.push_back(indices.size());
}

void RowGroups::add_single(std::size_t row) {
  indices.push_back(row);
  offsets.push_back(indices.size());
}

Var Tape::constant(DenseMatrix value) {
  nodes_.push_back(Node{"constant", std::move(value), {}, {}, {}, false, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(DenseMatrix value) {
  nodes_.push_back(Node{"variable", std::move(value), {}, {}, {}, true, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, DenseMatrix value, std::vector<std::size_t> parents,
                 Backward backward) {
  bool needs = false;
  for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
  Node node{op, std::move(value), {}, std::move(parents), {}, needs, false};
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const DenseMatrix& Tape::grad(std::size_t i) const {
  const Node& n = nodes_[i];
  if (n.has_adjoint) return n.adjoint;
  zero_scratch_ = DenseMatrix(n.value.rows(), n.value.cols());
  return zero_scratch_;
}

DenseMatrix& Tape::adjoint_accumulator(std::size_t i) {
  Node& n = nodes_[i];
  if (!n.has_adjoint) {
    n.adjoint = DenseMatrix(n.value.rows(), n.value.cols());
    n.has_adjoint = true;
  }
  return n.adjoint;
}

void Tape::accumulate(std::size_t i, const DenseMatrix& delta) {
  if (!nodes_[i].requires_grad) return;
  adjoint_accumulator(i) += delta;
}

void Tape::backward(Var output) {
  if (output.rows() != 1 || output.cols() != 1) {
    throw DimensionError("backward: implicit seed needs a 1x1 output, got " +
                         output.value().shape_string());
  }
  backward(output, DenseMatrix(1, 1, 1.0));
}

void Tape::backward(Var output, const DenseMatrix& seed) {
  require_same_shape(output.value(), seed, "backward seed");
  for (auto& n : nodes_) {
    n.has_adjoint = false;
    n.adjoint = DenseMatrix();
  }
  accumulate(output.index(), seed);
  for (std::size_t i = output.index() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_adjoint && n.backward) n.backward(*this, i);
  }
}

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ArgumentError(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape();
}

std::size_t p0(Tape& t, std::size_t self) { return t.parents(self)[0]; }
std::size_t p1(Tape& t, std::size_t self) { return t.parents(self)[1]; }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  return t.record("matmul", ckpm::matmul(a.value(), b.value()), {a.index(), b.index()},
                  [](Tape& t, std::size_t self) {
                    const auto ia = p0(t, self), ib = p1(t, self);
                    const DenseMatrix& g = t.adjoint(self);
                    if (t.requires_grad(ia)) t.accumulate(ia, matmul_nt(g, t.value(ib)));
                    if (t.requires_grad(ib)) t.accumulate(ib, matmul_tn(t.value(ia), g));
                  });
}

Var transpose(Var a) {
  Tape& t = *a.tape();
  return t.record("transpose", ckpm::transpose(a.value()), {a.index()},
                  [](Tape& t, std::size_t self) {
                    t.accumulate(p0(t, self), ckpm::transpose(t.adjoint(self)));
                  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  return t.record("add", a.value() + b.value(), {a.index(), b.index()},
                  [](Tape& t, std::size_t self) {
                    t.accumulate(p0(t, self), t.adjoint(self));
                    t.accumulate(p1(t, self), t.adjoint(self));
                  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "subtract");
  return t.record("sub", a.value() - b.value(), {a.index(), b.index()},
                  [](Tape& t, std::size_t self) {
                    t.accumulate(p0(t, self), t.adjoint(self));
                    if (t.requires_grad(p1(t, self))) {
                      t.adjoint_accumulator(p1(t, self)) -= t.adjoint(self);
                    }
                  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape();
  return t.record("scale", s * a.value(), {a.index()}, [s](Tape& t, std::size_t self) {
    t.accumulate(p0(t, self), s * t.adjoint(self));
  });
}

Var add_row_broadcast(Var a, Var row) {
  Tape& t = same_tape(a, row, "add_row_broadcast");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row_broadcast: shape mismatch " + a.value().shape_string() +
                         " + " + row.value().shape_string());
  }
  DenseMatrix out = a.value();
  const auto r = row.value().row(0);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto oi = out.row(i);
    for (std::size_t j = 0; j < out.cols(); ++j) oi[j] += r[j];
  }
  return t.record("add_row_broadcast", std::move(out), {a.index(), row.index()},
                  [](Tape& t, std::size_t self) {
                    const DenseMatrix& g = t.adjoint(self);
                    t.accumulate(p0(t, self), g);
                    const auto ir = p1(t, self);
                    if (!t.requires_grad(ir)) return;
                    auto acc = t.adjoint_accumulator(ir).row(0);
                    for (std::size_t i = 0; i < g.rows(); ++i) {
                      const auto gi = g.row(i);
                      for (std::size_t j = 0; j < g.cols(); ++j) acc[j] += gi[j];
                    }
                  });
}

Var relu(Var a) {
  Tape& t = *a.tape();
  DenseMatrix out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return t.record("relu", std::move(out), {a.index()}, [](Tape& t, std::size_t self) {
    const auto ia = p0(t, self);
    if (!t.requires_grad(ia)) return;
    const auto x = t.value(ia).data();
    const auto g = t.adjoint(self).data();
    auto acc = t.adjoint_accumulator(ia).data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > 0.0) acc[i] += g[i];
    }
  });
}

Var abs(Var a) {
  Tape& t = *a.tape();
  DenseMatrix out = a.value();
  for (double& v : out.data()) v = std::abs(v);
  return t.record("abs", std::move(out), {a.index()}, [](Tape& t, std::size_t self) {
    const auto ia = p0(t, self);
    if (!t.requires_grad(ia)) return;
    const auto x = t.value(ia).data();
    const auto g = t.adjoint(self).data();
    auto acc = t.adjoint_accumulator(ia).data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > 0.0) {
        acc[i] += g[i];
      } else if (x[i] < 0.0) {
        acc[i] -= g[i];
      }
    }
  });
}

Var hconcat(std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("hconcat: no operands");
  Tape& t = *parts.front().tape();
  std::vector<DenseMatrix> values;
  std::vector<std::size_t> parents;
  for (const Var& p : parts) {
    same_tape(parts.front(), p, "hconcat");
    values.push_back(p.value());
    parents.push_back(p.index());
  }
  return t.record("hconcat", ckpm::hconcat(values), std::move(parents),
                  [](Tape& t, std::size_t self) {
                    const DenseMatrix& g = t.adjoint(self);
                    std::size_t c0 = 0;
                    for (std::size_t p : t.parents(self)) {
                      const std::size_t nc = t.value(p).cols();
                      if (t.requires_grad(p)) t.accumulate(p, g.block(0, c0, g.rows(), nc));
                      c0 += nc;
                    }
                  });
}

Var vconcat(std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("vconcat: no operands");
  Tape& t = *parts.front().tape();
  std::vector<DenseMatrix> values;
  std::vector<std::size_t> parents;
  for (const Var& p : parts) {
    same_tape(parts.front(), p, "vconcat");
    values.push_back(p.value());
    parents.push_back(p.index());
  }
  return t.record("vconcat", ckpm::vconcat(values), std::move(parents),
                  [](Tape& t, std::size_t self) {
                    const DenseMatrix& g = t.adjoint(self);
                    std::size_t r0 = 0;
                    for (std::size_t p : t.parents(self)) {
                      const std::size_t nr = t.value(p).rows();
                      if (t.requires_grad(p)) t.accumulate(p, g.block(r0, 0, nr, g.cols()));
                      r0 += nr;
                    }
                  });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Tape& t = *a.tape();
  return t.record("reshape", a.value().reshaped(rows, cols), {a.index()},
                  [](Tape& t, std::size_t self) {
                    const auto ia = p0(t, self);
                    const DenseMatrix& v = t.value(ia);
                    t.accumulate(ia, t.adjoint(self).reshaped(v.rows(), v.cols()));
                  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& t = *a.tape();
  return t.record("slice_rows", a.value().block(begin, 0, count, a.cols()), {a.index()},
                  [begin](Tape& t, std::size_t self) {
                    const auto ia = p0(t, self);
                    if (!t.requires_grad(ia)) return;
                    const DenseMatrix& g = t.adjoint(self);
                    DenseMatrix& acc = t.adjoint_accumulator(ia);
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                      auto dst = acc.row(begin + r);
                      const auto src = g.row(r);
                      for (std::size_t j = 0; j < g.cols(); ++j) dst[j] += src[j];
                    }
                  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = *a.tape();
  return t.record("slice_cols", a.value().block(0, begin, a.rows(), count), {a.index()},
                  [begin](Tape& t, std::size_t self) {
                    const auto ia = p0(t, self);
                    if (!t.requires_grad(ia)) return;
                    const DenseMatrix& g = t.adjoint(self);
                    DenseMatrix& acc = t.adjoint_accumulator(ia);
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                      for (std::size_t j = 0; j < g.cols(); ++j) acc(r, begin + j) += g(r, j);
                    }
                  });
}

Var gather_sum(Var a, RowGroupsPtr groups) {
  Tape& t = *a.tape();
  const DenseMatrix& x = a.value();
  const std::size_t cols = x.cols();
  DenseMatrix out(groups->size(), cols);
  for (std::size_t g = 0; g < groups->size(); ++g) {
    auto dst = out.row(g);
    for (std::size_t src : groups->group(g)) {
      if (src >= x.rows()) {
        throw DimensionError("gather_sum: row index " + std::to_string(src) +
                             " out of range for " + x.shape_string());
      }
      const auto s = x.row(src);
      for (std::size_t j = 0; j < cols; ++j) dst[j] += s[j];
    }
  }
  return t.record("gather_sum", std::move(out), {a.index()},
                  [groups = std::move(groups)](Tape& t, std::size_t self) {
                    const auto ia = p0(t, self);
                    if (!t.requires_grad(ia)) return;
                    const DenseMatrix& g = t.adjoint(self);
                    DenseMatrix& acc = t.adjoint_accumulator(ia);
                    for (std::size_t k = 0; k < groups->size(); ++k) {
                      const auto gk = g.row(k);
                      for (std::size_t src : groups->group(k)) {
                        auto dst = acc.row(src);
                        for (std::size_t j = 0; j < g.cols(); ++j) dst[j] += gk[j];
                      }
                    }
                  });
}

Var row_norms(Var a) {
  Tape& t = *a.tape();
  const DenseMatrix& x = a.value();
  DenseMatrix out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double v : x.row(r)) s += v * v;
    out(r, 0) = std::sqrt(s);
  }
  return t.record("row_norms", std::move(out), {a.index()}, [](Tape& t, std::size_t self) {
    const auto ia = p0(t, self);
    if (!t.requires_grad(ia)) return;
    const DenseMatrix& x = t.value(ia);
    const DenseMatrix& n = t.value(self);
    const DenseMatrix& g = t.adjoint(self);
    DenseMatrix& acc = t.adjoint_accumulator(ia);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      if (n(r, 0) == 0.0) continue;
      const double f = g(r, 0) / n(r, 0);
      auto dst = acc.row(r);
      const auto src = x.row(r);
      for (std::size_t j = 0; j < x.cols(); ++j) dst[j] += f * src[j];
    }
  });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record("sum", DenseMatrix(1, 1, s), {a.index()}, [](Tape& t, std::size_t self) {
    const auto ia = p0(t, self);
    if (!t.requires_grad(ia)) return;
    const double g = t.adjoint(self)(0, 0);
    for (double& v : t.adjoint_accumulator(ia).data()) v += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean: empty operand");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var frobenius(Var a) {
  Tape& t = *a.tape();
  return t.record("frobenius", DenseMatrix(1, 1, frobenius_norm(a.value())), {a.index()},
                  [](Tape& t, std::size_t self) {
                    const auto ia = p0(t, self);
                    const double n = t.value(self)(0, 0);
                    if (!t.requires_grad(ia) || n == 0.0) return;
                    t.accumulate(ia, (t.adjoint(self)(0, 0) / n) * t.value(ia));
                  });
}

Var l2_diff_norm(Var a, Var b) {
  Tape& t = same_tape(a, b, "l2_diff_norm");
  require_same_shape(a.value(), b.value(), "l2_diff_norm");
  return t.record("l2_diff_norm", DenseMatrix(1, 1, frobenius_norm(a.value() - b.value())),
                  {a.index(), b.index()}, [](Tape& t, std::size_t self) {
                    const auto ia = p0(t, self), ib = p1(t, self);
                    const double n = t.value(self)(0, 0);
                    if (n == 0.0) return;
                    DenseMatrix d = (t.adjoint(self)(0, 0) / n) * (t.value(ia) - t.value(ib));
                    t.accumulate(ia, d);
                    if (t.requires_grad(ib)) t.adjoint_accumulator(ib) -= d;
                  });
}

Var ridge_regularize(Var a, double ridge) {
  Tape& t = *a.tape();
  if (a.rows() != a.cols()) {
    throw DimensionError("ridge_regularize: matrix must be square, got " +
                         a.value().shape_string());
  }
  const std::size_t n = a.rows();
  const double shift = ridge * ckpm::trace(a.value()) / static_cast<double>(n);
  DenseMatrix out = a.value();
  for (std::size_t i = 0; i < n; ++i) out(i, i) += shift;
  return t.record("ridge_regularize", std::move(out), {a.index()},
                  [ridge](Tape& t, std::size_t self) {
                    const auto ia = p0(t, self);
                    if (!t.requires_grad(ia)) return;
                    const DenseMatrix& g = t.adjoint(self);
                    const std::size_t n = g.rows();
                    const double f = ridge * ckpm::trace(g) / static_cast<double>(n);
                    DenseMatrix& acc = t.adjoint_accumulator(ia);
                    acc += g;
                    for (std::size_t i = 0; i < n; ++i) acc(i, i) += f;
                  });
}

Var spd_solve(Var a, Var b) {
  Tape& t = same_tape(a, b, "spd_solve");
  if (a.rows() != a.cols() || b.rows() != a.rows()) {
    throw DimensionError("spd_solve: shape mismatch " + a.value().shape_string() + " \\ " +
                         b.value().shape_string());
  }
  auto chol = std::make_shared<const Cholesky>(a.value());
  DenseMatrix x = chol->solve(b.value());
  return t.record("spd_solve", std::move(x), {a.index(), b.index()},
                  [chol](Tape& t, std::size_t self) {
                    const auto ia = p0(t, self), ib = p1(t, self);
                    DenseMatrix db = chol->solve(t.adjoint(self));
                    if (t.requires_grad(ia)) {
                      const DenseMatrix& x = t.value(self);
                      DenseMatrix da = matmul_nt(db, x);
                      DenseMatrix& acc = t.adjoint_accumulator(ia);
                      const std::size_t n = da.rows();
                      for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                          acc(i, j) -= 0.5 * (da(i, j) + da(j, i));
                        }
                      }
                    }
                    t.accumulate(ib, db);
                  });
}

}  // namespace ckpm::ad
