#pragma once

// Reverse-mode automatic differentiation over DenseMatrix values.
//
// A Tape records primitive operations in execution order. Each recorded node
// keeps its forward value, the indices of its parents and a closure that
// propagates its adjoint to those parents. Because nodes are appended as they
// are computed, parents always precede children and backward() is a single
// reverse sweep.
//
//   ad::Tape tape;
//   auto w = tape.variable(weights);
//   auto x = tape.constant(inputs);
//   auto loss = ad::sum(ad::relu(ad::matmul(x, w)));
//   tape.backward(loss);
//   const DenseMatrix& dw = w.grad();
//
// Tapes are single-owner; build and differentiate one per thread.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ckpm/matrix.hpp"

namespace ckpm::ad {

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t index() const noexcept { return index_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const DenseMatrix& value() const;
  // Zero matrix of the value's shape when no adjoint reached this node.
  const DenseMatrix& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Groups of row indices in compressed form. Group g covers
/// indices[offsets[g], offsets[g+1]).
struct RowGroups {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> indices;

  std::size_t size() const noexcept { return offsets.size() - 1; }
  void add(std::span<const std::size_t> group);
  void add_single(std::size_t row);
  void add_empty() { offsets.push_back(indices.size()); }
  std::span<const std::size_t> group(std::size_t g) const {
    return {indices.data() + offsets[g], offsets[g + 1] - offsets[g]};
  }
};

using RowGroupsPtr = std::shared_ptr<const RowGroups>;

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(DenseMatrix value);
  Var variable(DenseMatrix value);

  // Seeds a 1x1 output with 1 and sweeps the tape backwards.
  void backward(Var output);
  void backward(Var output, const DenseMatrix& seed);

  std::size_t size() const noexcept { return nodes_.size(); }
  const char* op_name(std::size_t i) const { return nodes_[i].op; }
  std::span<const std::size_t> parents(std::size_t i) const { return nodes_[i].parents; }

  const DenseMatrix& value(std::size_t i) const { return nodes_[i].value; }
  const DenseMatrix& grad(std::size_t i) const;
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  bool has_adjoint(std::size_t i) const { return nodes_[i].has_adjoint; }

  // Primitive authoring interface.
  Var record(const char* op, DenseMatrix value, std::vector<std::size_t> parents,
             Backward backward);
  const DenseMatrix& adjoint(std::size_t i) const { return nodes_[i].adjoint; }
  // Zero-initialised on first use.
  DenseMatrix& adjoint_accumulator(std::size_t i);
  void accumulate(std::size_t i, const DenseMatrix& delta);
  Var handle(std::size_t i) { return Var(this, i); }

 private:
  struct Node {
    const char* op;
    DenseMatrix value;
    DenseMatrix adjoint;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
    bool has_adjoint = false;
  };

  std::vector<Node> nodes_;
  mutable DenseMatrix zero_scratch_;
};

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
// Adds a 1xC row to every row of an RxC matrix.
Var add_row_broadcast(Var a, Var row);
Var relu(Var a);
Var abs(Var a);
Var hconcat(std::span<const Var> parts);
Var vconcat(std::span<const Var> parts);
Var reshape(Var a, std::size_t rows, std::size_t cols);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
// Output row g is the sum of input rows listed in group g (empty group -> 0).
Var gather_sum(Var a, RowGroupsPtr groups);
// Rx1 column of per-row Euclidean norms. The subgradient at a zero row is 0.
Var row_norms(Var a);
Var sum(Var a);
Var mean(Var a);
Var frobenius(Var a);
Var l2_diff_norm(Var a, Var b);
// a + ridge * (trace(a)/n) * I for square a.
Var ridge_regularize(Var a, double ridge);
// Solves a X = b for symmetric positive definite a via Cholesky.
Var spd_solve(Var a, Var b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace ckpm::ad
