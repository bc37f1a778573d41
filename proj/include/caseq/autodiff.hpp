#pragma once

// Define-by-run reverse-mode differentiation over dense row-major matrices.
//
// A Tape owns every value produced during one forward pass. Tensors are
// lightweight handles (tape pointer + node id); all tensors are 2-D, with
// vectors represented as 1 x n rows. A tape is single-threaded; run
// independent forward passes on independent tapes.

#include "caseq/core.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace caseq::ad {

class Tape;

class Tensor {
 public:
  Tensor() = default;

  const Matrix& value() const;
  /// Gradient accumulated by the last backward sweep (zeros if none reached it).
  Matrix grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input. Leaf gradients accumulate across backward calls
  /// until zero_grad().
  Tensor leaf(Matrix value);
  /// Input that never receives a gradient.
  Tensor constant(Matrix value);

  /// Records an operation. `inputs` must already be on this tape.
  Tensor record(Matrix value, std::vector<std::size_t> inputs, BackwardFn backward);

  /// Reverse sweep from a 1 x 1 loss. Non-leaf gradients are reset first;
  /// leaf gradients accumulate.
  void backward(const Tensor& loss);
  void zero_grad();

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient buffer of an input, allocated on first use.
  Matrix& grad_ref(std::size_t id);
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }
  std::size_t size() const { return nodes_.size(); }

  void check_owned(const Tensor& t, const char* op) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
};

// --- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// --- elementwise ----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
/// Throws DomainError on non-positive input.
Tensor log(const Tensor& a);

// --- broadcasting ---------------------------------------------------------
/// a (r x c) + row (1 x c) broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);
/// col (r x 1) scales each row of a (r x c).
Tensor mul_col(const Tensor& col, const Tensor& a);

// --- reductions -----------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// --- structure ------------------------------------------------------------
Tensor slice(const Tensor& a, Index row, Index col, Index rows, Index cols);
/// Row-major reinterpretation; element count must match.
Tensor reshape(const Tensor& a, Index rows, Index cols);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
/// Row lookup: out.row(i) = table.row(ids[i]) with 0-based ids.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// --- probability ----------------------------------------------------------
/// Row-wise softmax of logits / tau with max subtraction.
Tensor softmax_temp(const Tensor& logits, double tau);
/// Row-wise softmax over columns j <= i (lower-triangular mask), square input.
Tensor causal_softmax(const Tensor& scores);
/// Row-wise Kronecker product: out(r, i*Kb + j) = a(r, i) * b(r, j).
Tensor row_kron(const Tensor& a, const Tensor& b);
/// Per-row cross-entropy of softmax(logits) against 0-based targets; r x 1.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets);
/// Per-row KL(q_r || p), p a single 1 x n row clamped below at `floor`; r x 1.
/// Sets *floor_hit when any clamp was active.
Tensor kl_rows(const Tensor& q, const Tensor& p, double floor, bool* floor_hit = nullptr);

// --- recurrent ------------------------------------------------------------
/// Gated recurrent scan from h0 = 0 over the rows of x (L x d_in):
///   r = sigma(x Wr + bxr + h Whr + bhr), z = sigma(x Wz + bxz + h Whz + bhz)
///   n = tanh(x Wn + bxn + r * (h Whn + bhn)), h' = (1 - z) * n + z * h
/// with gate blocks packed [r | z | n] along the columns of wx (d_in x 3d),
/// wh (d x 3d), bx and bh (1 x 3d). Returns L x d.
Tensor gru_scan(const Tensor& x, const Tensor& wx, const Tensor& wh, const Tensor& bx,
                const Tensor& bh);

// --- gradient verification ------------------------------------------------
struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_input = 0;
  Index worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

using ScalarFn = std::function<Tensor(Tape&, std::span<const Tensor>)>;

/// Central differences per coordinate of every input against the tape's
/// gradients. Relative error is |analytic - numeric| / max(floor, |numeric|).
/// Central-difference rounding noise in float64 is around 1e-11 at eps 1e-5
/// for O(1) losses, so gradients far below `floor` are compared absolutely.
inline constexpr double kFiniteDiffFloor = 1e-6;
FiniteDiffReport finite_diff_check(const ScalarFn& f, const std::vector<Matrix>& inputs,
                                   double eps, double floor = kFiniteDiffFloor);
FiniteDiffReport finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                                   const Matrix& x, double eps, double floor = kFiniteDiffFloor);

}  // namespace caseq::ad
