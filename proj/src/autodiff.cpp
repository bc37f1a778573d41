#include "caseq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace caseq {

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

double uniform_open(Rng& rng) {
  // 53 random mantissa bits, shifted off zero.
  for (;;) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    if (u > 0.0) return u;
  }
}

double gumbel(Rng& rng) { return -std::log(-std::log(uniform_open(rng))); }

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 finalizer over the pair.
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace caseq

namespace caseq::ad {

const Matrix& Tensor::value() const {
  if (!tape_) throw Error("tensor is not bound to a tape");
  return tape_->value(id_);
}

Matrix Tensor::grad() const {
  const Matrix& v = value();
  if (!tape_->has_grad(id_)) return Matrix::Zero(v.rows(), v.cols());
  return tape_->grad(id_);
}

double Tensor::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("scalar(): tensor has shape " + shape_of(v));
  return v(0, 0);
}

Tensor Tape::leaf(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Tape::record(Matrix value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Matrix& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::check_owned(const Tensor& t, const char* op) const {
  if (t.tape() != this) throw Error(std::string(op) + ": tensor is not on this tape");
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad.resize(0, 0);
}

void Tape::backward(const Tensor& loss) {
  check_owned(loss, "backward");
  const Matrix& v = value(loss.id());
  if (v.size() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_of(v));
  for (Node& n : nodes_)
    if (!n.is_leaf) n.grad.resize(0, 0);
  if (!nodes_[loss.id()].requires_grad) return;
  grad_ref(loss.id())(0, 0) += 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.is_leaf || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

namespace {

Tape& tape_of(const Tensor& a, const char* op) {
  if (!a.valid()) throw Error(std::string(op) + ": unbound tensor");
  return *a.tape();
}

Tape& tape_of(const Tensor& a, const Tensor& b, const char* op) {
  Tape& t = tape_of(a, op);
  t.check_owned(b, op);
  return t;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " +
                         shape_of(b));
}

// Shorthand for unary pointwise ops whose derivative is a function of the
// input and output values.
template <typename Fwd, typename Deriv>
Tensor pointwise(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  Tape& t = tape_of(a, op);
  const std::size_t ia = a.id();
  Matrix out = t.value(ia).unaryExpr(fwd);
  return t.record(std::move(out), {ia}, [ia, deriv](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(ia)) return;
    const Matrix& x = tp.value(ia);
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad_ref(ia);
    for (Index i = 0; i < x.size(); ++i) ga.data()[i] += g.data()[i] * deriv(x.data()[i], y.data()[i]);
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& t = tape_of(a, b, "matmul");
  const std::size_t ia = a.id(), ib = b.id();
  const Matrix& va = t.value(ia);
  const Matrix& vb = t.value(ib);
  if (va.cols() != vb.rows())
    throw DimensionError("matmul: inner extents differ " + shape_of(va) + " x " + shape_of(vb));
  Matrix out = va * vb;
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad_ref(ia).noalias() += g * tp.value(ib).transpose();
    if (tp.needs_grad(ib)) tp.grad_ref(ib).noalias() += tp.value(ia).transpose() * g;
  });
}

Tensor transpose(const Tensor& a) {
  Tape& t = tape_of(a, "transpose");
  const std::size_t ia = a.id();
  Matrix out = t.value(ia).transpose();
  return t.record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    if (tp.needs_grad(ia)) tp.grad_ref(ia) += tp.grad(self).transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tape& t = tape_of(a, b, "add");
  const std::size_t ia = a.id(), ib = b.id();
  require_same_shape(t.value(ia), t.value(ib), "add");
  Matrix out = t.value(ia) + t.value(ib);
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    if (tp.needs_grad(ia)) tp.grad_ref(ia) += tp.grad(self);
    if (tp.needs_grad(ib)) tp.grad_ref(ib) += tp.grad(self);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tape& t = tape_of(a, b, "sub");
  const std::size_t ia = a.id(), ib = b.id();
  require_same_shape(t.value(ia), t.value(ib), "sub");
  Matrix out = t.value(ia) - t.value(ib);
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    if (tp.needs_grad(ia)) tp.grad_ref(ia) += tp.grad(self);
    if (tp.needs_grad(ib)) tp.grad_ref(ib) -= tp.grad(self);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tape& t = tape_of(a, b, "mul");
  const std::size_t ia = a.id(), ib = b.id();
  require_same_shape(t.value(ia), t.value(ib), "mul");
  Matrix out = t.value(ia).cwiseProduct(t.value(ib));
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad_ref(ia) += g.cwiseProduct(tp.value(ib));
    if (tp.needs_grad(ib)) tp.grad_ref(ib) += g.cwiseProduct(tp.value(ia));
  });
}

Tensor scale(const Tensor& a, double s) {
  Tape& t = tape_of(a, "scale");
  const std::size_t ia = a.id();
  Matrix out = t.value(ia) * s;
  return t.record(std::move(out), {ia}, [ia, s](Tape& tp, std::size_t self) {
    if (tp.needs_grad(ia)) tp.grad_ref(ia) += tp.grad(self) * s;
  });
}

Tensor tanh(const Tensor& a) {
  return pointwise(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return pointwise(a, "sigmoid", sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return pointwise(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return pointwise(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  Tape& t = tape_of(a, "log");
  if (!(t.value(a.id()).array() > 0.0).all()) throw DomainError("log: non-positive input");
  return pointwise(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  Tape& t = tape_of(a, row, "add_row");
  const std::size_t ia = a.id(), ir = row.id();
  const Matrix& va = t.value(ia);
  const Matrix& vr = t.value(ir);
  if (vr.rows() != 1 || vr.cols() != va.cols())
    throw DimensionError("add_row: cannot broadcast " + shape_of(vr) + " over " + shape_of(va));
  Matrix out = va.rowwise() + vr.row(0);
  return t.record(std::move(out), {ia, ir}, [ia, ir](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad_ref(ia) += g;
    if (tp.needs_grad(ir)) tp.grad_ref(ir) += g.colwise().sum();
  });
}

Tensor mul_col(const Tensor& col, const Tensor& a) {
  Tape& t = tape_of(col, a, "mul_col");
  const std::size_t ic = col.id(), ia = a.id();
  const Matrix& vc = t.value(ic);
  const Matrix& va = t.value(ia);
  if (vc.cols() != 1 || vc.rows() != va.rows())
    throw DimensionError("mul_col: cannot broadcast " + shape_of(vc) + " over " + shape_of(va));
  Matrix out(va.rows(), va.cols());
  for (Index r = 0; r < va.rows(); ++r) out.row(r) = vc(r, 0) * va.row(r);
  return t.record(std::move(out), {ic, ia}, [ic, ia](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& c = tp.value(ic);
    if (tp.needs_grad(ic)) tp.grad_ref(ic) += g.cwiseProduct(tp.value(ia)).rowwise().sum();
    if (tp.needs_grad(ia)) {
      Matrix& ga = tp.grad_ref(ia);
      for (Index r = 0; r < g.rows(); ++r) ga.row(r) += c(r, 0) * g.row(r);
    }
  });
}

Tensor sum(const Tensor& a) {
  Tape& t = tape_of(a, "sum");
  const std::size_t ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = t.value(ia).sum();
  return t.record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    if (tp.needs_grad(ia)) tp.grad_ref(ia).array() += tp.grad(self)(0, 0);
  });
}

Tensor mean(const Tensor& a) {
  Tape& t = tape_of(a, "mean");
  const Index n = t.value(a.id()).size();
  if (n == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Tensor slice(const Tensor& a, Index row, Index col, Index rows, Index cols) {
  Tape& t = tape_of(a, "slice");
  const std::size_t ia = a.id();
  const Matrix& va = t.value(ia);
  if (row < 0 || col < 0 || rows < 0 || cols < 0 || row + rows > va.rows() ||
      col + cols > va.cols())
    throw DimensionError("slice: block out of range for " + shape_of(va));
  Matrix out = va.block(row, col, rows, cols);
  return t.record(std::move(out), {ia}, [ia, row, col, rows, cols](Tape& tp, std::size_t self) {
    if (tp.needs_grad(ia)) tp.grad_ref(ia).block(row, col, rows, cols) += tp.grad(self);
  });
}

Tensor reshape(const Tensor& a, Index rows, Index cols) {
  Tape& t = tape_of(a, "reshape");
  const std::size_t ia = a.id();
  const Matrix& va = t.value(ia);
  if (rows * cols != va.size())
    throw DimensionError("reshape: " + shape_of(va) + " to " + shape_string(rows, cols));
  Matrix out = Eigen::Map<const Matrix>(va.data(), rows, cols);
  return t.record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(ia)) return;
    Matrix& ga = tp.grad_ref(ia);
    const Matrix& g = tp.grad(self);
    Eigen::Map<Matrix>(ga.data(), g.rows(), g.cols()) += g;
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Tape& t = tape_of(parts[0], "concat_cols");
  const Index rows = parts[0].rows();
  Index cols = 0;
  std::vector<std::size_t> ids;
  for (const Tensor& p : parts) {
    t.check_owned(p, "concat_cols");
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row mismatch " + shape_of(p.value()) + " vs " +
                           shape_of(parts[0].value()));
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (const Tensor& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  auto inputs = ids;
  return t.record(std::move(out), std::move(inputs), [ids](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Index c = 0;
    for (std::size_t id : ids) {
      const Index w = tp.value(id).cols();
      if (tp.needs_grad(id)) tp.grad_ref(id) += g.middleCols(c, w);
      c += w;
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Tape& t = tape_of(parts[0], "concat_rows");
  const Index cols = parts[0].cols();
  Index rows = 0;
  std::vector<std::size_t> ids;
  for (const Tensor& p : parts) {
    t.check_owned(p, "concat_rows");
    if (p.cols() != cols)
      throw DimensionError("concat_rows: column mismatch " + shape_of(p.value()) + " vs " +
                           shape_of(parts[0].value()));
    rows += p.rows();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Index r = 0;
  for (const Tensor& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  auto inputs = ids;
  return t.record(std::move(out), std::move(inputs), [ids](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Index r = 0;
    for (std::size_t id : ids) {
      const Index h = tp.value(id).rows();
      if (tp.needs_grad(id)) tp.grad_ref(id) += g.middleRows(r, h);
      r += h;
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  Tape& t = tape_of(table, "gather_rows");
  const std::size_t it = table.id();
  const Matrix& vt = t.value(it);
  Matrix out(static_cast<Index>(ids.size()), vt.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vt.rows())
      throw RangeError("gather_rows: id " + std::to_string(ids[i]) + " outside table " +
                       shape_of(vt));
    out.row(static_cast<Index>(i)) = vt.row(ids[i]);
  }
  std::vector<int> rows(ids.begin(), ids.end());
  return t.record(std::move(out), {it}, [it, rows = std::move(rows)](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(it)) return;
    const Matrix& g = tp.grad(self);
    Matrix& gt = tp.grad_ref(it);
    for (std::size_t i = 0; i < rows.size(); ++i) gt.row(rows[i]) += g.row(static_cast<Index>(i));
  });
}

Tensor softmax_temp(const Tensor& logits, double tau) {
  Tape& t = tape_of(logits, "softmax_temp");
  if (!(tau > 0.0)) throw ParameterError("softmax_temp: temperature must be positive");
  const std::size_t il = logits.id();
  const Matrix& v = t.value(il);
  if (!v.allFinite()) throw NumericError("softmax_temp: non-finite logits");
  Matrix out(v.rows(), v.cols());
  for (Index r = 0; r < v.rows(); ++r) {
    const double top = v.row(r).maxCoeff();
    for (Index c = 0; c < v.cols(); ++c) out(r, c) = std::exp((v(r, c) - top) / tau);
    out.row(r) /= out.row(r).sum();
  }
  return t.record(std::move(out), {il}, [il, tau](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(il)) return;
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.grad(self);
    Matrix& gl = tp.grad_ref(il);
    for (Index r = 0; r < y.rows(); ++r) {
      const double dot = y.row(r).dot(g.row(r));
      gl.row(r) += (y.row(r).array() * (g.row(r).array() - dot) / tau).matrix();
    }
  });
}

Tensor causal_softmax(const Tensor& scores) {
  Tape& t = tape_of(scores, "causal_softmax");
  const std::size_t is = scores.id();
  const Matrix& v = t.value(is);
  if (v.rows() != v.cols()) throw DimensionError("causal_softmax: square input required, got " + shape_of(v));
  if (!v.allFinite()) throw NumericError("causal_softmax: non-finite scores");
  Matrix out = Matrix::Zero(v.rows(), v.cols());
  for (Index r = 0; r < v.rows(); ++r) {
    const double top = v.row(r).head(r + 1).maxCoeff();
    for (Index c = 0; c <= r; ++c) out(r, c) = std::exp(v(r, c) - top);
    out.row(r).head(r + 1) /= out.row(r).head(r + 1).sum();
  }
  return t.record(std::move(out), {is}, [is](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(is)) return;
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.grad(self);
    Matrix& gs = tp.grad_ref(is);
    for (Index r = 0; r < y.rows(); ++r) {
      const auto yr = y.row(r).head(r + 1);
      const auto gr = g.row(r).head(r + 1);
      const double dot = yr.dot(gr);
      gs.row(r).head(r + 1) += (yr.array() * (gr.array() - dot)).matrix();
    }
  });
}

Tensor row_kron(const Tensor& a, const Tensor& b) {
  Tape& t = tape_of(a, b, "row_kron");
  const std::size_t ia = a.id(), ib = b.id();
  const Matrix& va = t.value(ia);
  const Matrix& vb = t.value(ib);
  if (va.rows() != vb.rows())
    throw DimensionError("row_kron: row mismatch " + shape_of(va) + " vs " + shape_of(vb));
  const Index ka = va.cols(), kb = vb.cols();
  Matrix out(va.rows(), ka * kb);
  for (Index r = 0; r < va.rows(); ++r)
    for (Index i = 0; i < ka; ++i)
      for (Index j = 0; j < kb; ++j) out(r, i * kb + j) = va(r, i) * vb(r, j);
  return t.record(std::move(out), {ia, ib}, [ia, ib, ka, kb](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& va = tp.value(ia);
    const Matrix& vb = tp.value(ib);
    const bool need_a = tp.needs_grad(ia), need_b = tp.needs_grad(ib);
    Matrix* ga = need_a ? &tp.grad_ref(ia) : nullptr;
    Matrix* gb = need_b ? &tp.grad_ref(ib) : nullptr;
    for (Index r = 0; r < g.rows(); ++r)
      for (Index i = 0; i < ka; ++i)
        for (Index j = 0; j < kb; ++j) {
          const double gij = g(r, i * kb + j);
          if (ga) (*ga)(r, i) += gij * vb(r, j);
          if (gb) (*gb)(r, j) += gij * va(r, i);
        }
  });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets) {
  Tape& t = tape_of(logits, "cross_entropy_rows");
  const std::size_t il = logits.id();
  const Matrix& v = t.value(il);
  if (static_cast<Index>(targets.size()) != v.rows())
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_of(v));
  if (!v.allFinite()) throw NumericError("cross_entropy_rows: non-finite logits");
  Matrix probs(v.rows(), v.cols());
  Matrix out(v.rows(), 1);
  for (Index r = 0; r < v.rows(); ++r) {
    const int y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= v.cols()) throw RangeError("cross_entropy_rows: target out of range");
    const double top = v.row(r).maxCoeff();
    probs.row(r) = (v.row(r).array() - top).exp().matrix();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    out(r, 0) = -(v(r, y) - top - std::log(z));
  }
  std::vector<int> ys(targets.begin(), targets.end());
  return t.record(std::move(out), {il},
                  [il, ys = std::move(ys), probs = std::move(probs)](Tape& tp, std::size_t self) {
                    if (!tp.needs_grad(il)) return;
                    const Matrix& g = tp.grad(self);
                    Matrix& gl = tp.grad_ref(il);
                    for (Index r = 0; r < probs.rows(); ++r) {
                      gl.row(r) += g(r, 0) * probs.row(r);
                      gl(r, ys[static_cast<std::size_t>(r)]) -= g(r, 0);
                    }
                  });
}

Tensor kl_rows(const Tensor& q, const Tensor& p, double floor, bool* floor_hit) {
  Tape& t = tape_of(q, p, "kl_rows");
  const std::size_t iq = q.id(), ip = p.id();
  const Matrix& vq = t.value(iq);
  const Matrix& vp = t.value(ip);
  if (vp.rows() != 1 || vp.cols() != vq.cols())
    throw DimensionError("kl_rows: prior " + shape_of(vp) + " does not match posterior " +
                         shape_of(vq));
  RowVector logp(vp.cols());
  bool hit = false;
  for (Index i = 0; i < vp.cols(); ++i) {
    if (vp(0, i) < floor) hit = true;
    logp(i) = std::log(std::max(vp(0, i), floor));
  }
  if (floor_hit) *floor_hit = *floor_hit || hit;
  Matrix out(vq.rows(), 1);
  for (Index r = 0; r < vq.rows(); ++r) {
    double kl = 0.0;
    for (Index i = 0; i < vq.cols(); ++i)
      if (vq(r, i) > 0.0) kl += vq(r, i) * (std::log(vq(r, i)) - logp(i));
    out(r, 0) = kl;
  }
  return t.record(std::move(out), {iq, ip}, [iq, ip, floor, logp](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& vq = tp.value(iq);
    const Matrix& vp = tp.value(ip);
    if (tp.needs_grad(iq)) {
      Matrix& gq = tp.grad_ref(iq);
      for (Index r = 0; r < vq.rows(); ++r)
        for (Index i = 0; i < vq.cols(); ++i)
          if (vq(r, i) > 0.0) gq(r, i) += g(r, 0) * (std::log(vq(r, i)) + 1.0 - logp(i));
    }
    if (tp.needs_grad(ip)) {
      Matrix& gp = tp.grad_ref(ip);
      for (Index i = 0; i < vp.cols(); ++i) {
        if (vp(0, i) < floor) continue;
        double acc = 0.0;
        for (Index r = 0; r < vq.rows(); ++r) acc += g(r, 0) * vq(r, i);
        gp(0, i) -= acc / vp(0, i);
      }
    }
  });
}

Tensor gru_scan(const Tensor& x, const Tensor& wx, const Tensor& wh, const Tensor& bx,
                const Tensor& bh) {
  Tape& t = tape_of(x, "gru_scan");
  for (const Tensor* p : {&wx, &wh, &bx, &bh}) t.check_owned(*p, "gru_scan");
  const std::size_t ix = x.id(), iwx = wx.id(), iwh = wh.id(), ibx = bx.id(), ibh = bh.id();
  const Matrix& X = t.value(ix);
  const Matrix& Wx = t.value(iwx);
  const Matrix& Wh = t.value(iwh);
  const Matrix& Bx = t.value(ibx);
  const Matrix& Bh = t.value(ibh);
  const Index d = Wh.rows();
  if (Wh.cols() != 3 * d || Wx.cols() != 3 * d || Wx.rows() != X.cols() || Bx.rows() != 1 ||
      Bx.cols() != 3 * d || Bh.rows() != 1 || Bh.cols() != 3 * d)
    throw DimensionError("gru_scan: inconsistent shapes x" + shape_of(X) + " wx" + shape_of(Wx) +
                         " wh" + shape_of(Wh) + " bx" + shape_of(Bx) + " bh" + shape_of(Bh));
  const Index L = X.rows();

  Matrix gx = X * Wx;
  gx.rowwise() += Bx.row(0);
  Matrix H(L, d), R(L, d), Z(L, d), N(L, d), GHn(L, d);
  RowVector h = RowVector::Zero(d);
  RowVector gh(3 * d);
  for (Index s = 0; s < L; ++s) {
    gh.noalias() = h * Wh;
    gh += Bh.row(0);
    for (Index j = 0; j < d; ++j) {
      const double r = sigmoid_scalar(gx(s, j) + gh(j));
      const double z = sigmoid_scalar(gx(s, d + j) + gh(d + j));
      const double n = std::tanh(gx(s, 2 * d + j) + r * gh(2 * d + j));
      R(s, j) = r;
      Z(s, j) = z;
      N(s, j) = n;
      GHn(s, j) = gh(2 * d + j);
      h(j) = (1.0 - z) * n + z * h(j);
    }
    H.row(s) = h;
  }

  auto backward = [ix, iwx, iwh, ibx, ibh, d, R = std::move(R), Z = std::move(Z),
                   N = std::move(N), GHn = std::move(GHn)](Tape& tp, std::size_t self) {
    const Matrix& G = tp.grad(self);
    const Matrix& Hs = tp.value(self);
    const Matrix& X = tp.value(ix);
    const Matrix& Wx = tp.value(iwx);
    const Matrix& Wh = tp.value(iwh);
    const Index L = G.rows();
    Matrix dgx(L, 3 * d);
    Matrix dWh = Matrix::Zero(d, 3 * d);
    RowVector dbh = RowVector::Zero(3 * d);
    RowVector dh_next = RowVector::Zero(d);
    RowVector dgh(3 * d);
    for (Index s = L; s-- > 0;) {
      RowVector dh = G.row(s) + dh_next;
      RowVector hprev = s > 0 ? RowVector(Hs.row(s - 1)) : RowVector::Zero(d);
      for (Index j = 0; j < d; ++j) {
        const double r = R(s, j), z = Z(s, j), n = N(s, j);
        const double dn = dh(j) * (1.0 - z);
        const double dz = dh(j) * (hprev(j) - n);
        const double dan = dn * (1.0 - n * n);
        const double dr = dan * GHn(s, j);
        const double dar = dr * r * (1.0 - r);
        const double daz = dz * z * (1.0 - z);
        dgx(s, j) = dar;
        dgx(s, d + j) = daz;
        dgx(s, 2 * d + j) = dan;
        dgh(j) = dar;
        dgh(d + j) = daz;
        dgh(2 * d + j) = dan * r;
        dh_next(j) = dh(j) * z;
      }
      dWh.noalias() += hprev.transpose() * dgh;
      dbh += dgh;
      dh_next.noalias() += dgh * Wh.transpose();
    }
    if (tp.needs_grad(ix)) tp.grad_ref(ix).noalias() += dgx * Wx.transpose();
    if (tp.needs_grad(iwx)) tp.grad_ref(iwx).noalias() += X.transpose() * dgx;
    if (tp.needs_grad(ibx)) tp.grad_ref(ibx) += dgx.colwise().sum();
    if (tp.needs_grad(iwh)) tp.grad_ref(iwh) += dWh;
    if (tp.needs_grad(ibh)) tp.grad_ref(ibh) += dbh;
  };
  return t.record(std::move(H), {ix, iwx, iwh, ibx, ibh}, std::move(backward));
}

FiniteDiffReport finite_diff_check(const ScalarFn& f, const std::vector<Matrix>& inputs,
                                   double eps, double floor) {
  if (!(eps >= 1e-7 && eps <= 1e-4))
    throw ParameterError("finite_diff_check: eps must lie in [1e-7, 1e-4]");
  if (!(floor > 0.0)) throw ParameterError("finite_diff_check: floor must be > 0");

  auto evaluate = [&f](const std::vector<Matrix>& xs, std::vector<Matrix>* grads) {
    Tape tape;
    std::vector<Tensor> vars;
    vars.reserve(xs.size());
    for (const Matrix& x : xs) vars.push_back(tape.leaf(x));
    Tensor loss = f(tape, vars);
    const double v = loss.scalar();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: function returned non-finite value");
    if (grads) {
      tape.backward(loss);
      for (const Tensor& var : vars) grads->push_back(var.grad());
    }
    return v;
  };

  std::vector<Matrix> analytic;
  evaluate(inputs, &analytic);

  FiniteDiffReport report;
  std::vector<Matrix> xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (Index i = 0; i < xs[k].size(); ++i) {
      const double orig = xs[k].data()[i];
      xs[k].data()[i] = orig + eps;
      const double up = evaluate(xs, nullptr);
      xs[k].data()[i] = orig - eps;
      const double down = evaluate(xs, nullptr);
      xs[k].data()[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k].data()[i];
      const double rel = std::abs(a - numeric) / std::max(floor, std::abs(numeric));
      ++report.coordinates;
      report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
      if (rel > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        report.worst_input = k;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

FiniteDiffReport finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                                   const Matrix& x, double eps, double floor) {
  return finite_diff_check(
      [&f](Tape& t, std::span<const Tensor> xs) { return f(t, xs[0]); }, std::vector<Matrix>{x},
      eps, floor);
}

}  // namespace caseq::ad
