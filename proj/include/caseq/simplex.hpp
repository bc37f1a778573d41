#pragma once

// Plain (tape-free) numerics over probability vectors. Templated on the
// Eigen expression so callers can pass rows, blocks or maps directly.

#include "caseq/core.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace caseq {

inline constexpr double kPriorFloor = 1e-12;

/// exp(s / tau) / sum exp(s / tau), max-subtracted.
template <typename Derived>
RowVectorR<typename Derived::Scalar> softmax_temp(const Eigen::MatrixBase<Derived>& logits,
                                                  typename Derived::Scalar tau) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > Scalar(0))) throw ParameterError("softmax_temp: temperature must be positive");
  if (!logits.allFinite()) throw NumericError("softmax_temp: non-finite logits");
  RowVectorR<Scalar> out(logits.size());
  const Scalar top = logits.maxCoeff();
  for (Index i = 0; i < logits.size(); ++i) out(i) = std::exp((logits(i) - top) / tau);
  out /= out.sum();
  return out;
}

/// KL(q || p) with 0 log 0 = 0 and p clamped below at `floor`.
template <typename DerivedQ, typename DerivedP>
typename DerivedQ::Scalar kl_divergence(const Eigen::MatrixBase<DerivedQ>& q,
                                        const Eigen::MatrixBase<DerivedP>& p,
                                        double floor = kPriorFloor) {
  using Scalar = typename DerivedQ::Scalar;
  if (q.size() != p.size())
    throw DimensionError("kl_divergence: length mismatch " + std::to_string(q.size()) + " vs " +
                         std::to_string(p.size()));
  Scalar kl = 0;
  for (Index i = 0; i < q.size(); ++i) {
    if (q(i) <= Scalar(0)) continue;
    const Scalar pi = std::max<Scalar>(p(i), Scalar(floor));
    kl += q(i) * (std::log(q(i)) - std::log(pi));
  }
  return kl;
}

template <typename Derived>
bool is_simplex(const Eigen::MatrixBase<Derived>& v, double tol) {
  if (v.size() == 0) return false;
  if ((v.array() < -tol).any()) return false;
  return std::abs(v.sum() - 1.0) <= tol;
}

/// Kronecker product of per-layer vectors; layer 0 is the most significant
/// digit of the flat index.
template <typename Scalar>
RowVectorR<Scalar> kronecker_flatten(const std::vector<RowVectorR<Scalar>>& layers) {
  RowVectorR<Scalar> flat = RowVectorR<Scalar>::Ones(1);
  for (const auto& q : layers) {
    RowVectorR<Scalar> next(flat.size() * q.size());
    for (Index i = 0; i < flat.size(); ++i)
      for (Index k = 0; k < q.size(); ++k) next(i * q.size() + k) = flat(i) * q(k);
    flat = std::move(next);
  }
  return flat;
}

}  // namespace caseq
