#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "embsteal/autodiff.hpp"
#include "embsteal/errors.hpp"
#include "embsteal/tensor.hpp"

namespace embsteal {

struct LossValue {
  double value = 0.0;
  Tensor grad;  // d loss / d S, same shape as S
};

namespace detail {

inline void require_same_batch(const Tensor& t, const Tensor& s, const char* op) {
  require_rank2(t, op);
  require_rank2(s, op);
  if (t.shape() != s.shape()) throw ShapeError(std::string(op) + ": teacher " + shape_str(t.shape()) + " vs student " + shape_str(s.shape()));
  if (t.rows() == 0) throw ShapeError(std::string(op) + ": empty batch");
}

inline std::vector<double> row_norms(const Tensor& x, const char* op) {
  std::vector<double> n(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    n[i] = l2_norm(x.row(i));
    if (!(n[i] > 0.0)) throw NumericError(std::string(op) + ": zero-norm row " + std::to_string(i));
  }
  return n;
}

}  // namespace detail

// -(1/n) Σ cos(t_i, s_i)
inline LossValue cosine_distance(const Tensor& t, const Tensor& s) {
  detail::require_same_batch(t, s, "cosine_distance_loss");
  const auto tn = detail::row_norms(t, "cosine_distance_loss");
  const auto sn = detail::row_norms(s, "cosine_distance_loss");
  const std::size_t n = t.rows(), d = t.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  LossValue out{0.0, Tensor(s.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    const double ts = dot(t.row(i), s.row(i));
    const double c = ts / (tn[i] * sn[i]);
    out.value -= c * inv_n;
    for (std::size_t k = 0; k < d; ++k) {
      out.grad(i, k) = -inv_n * (t(i, k) / (tn[i] * sn[i]) - c * s(i, k) / (sn[i] * sn[i]));
    }
  }
  return out;
}

// Mean over i of
//   -log( e^{a_ii} / (Σ_j e^{a_ij} + Σ_{j≠i} e^{b_ij}) )
// with a_ij = cos(t_j, s_i)/τ and b_ij = cos(s_j, s_i)/τ. Both sides are
// normalized first.
inline LossValue contrastive(const Tensor& t, const Tensor& s, double tau) {
  if (!(tau > 0.0)) throw ConfigError("contrastive temperature must be positive");
  detail::require_same_batch(t, s, "contrastive_loss");
  const auto tn = detail::row_norms(t, "contrastive_loss");
  const auto sn = detail::row_norms(s, "contrastive_loss");
  const std::size_t n = t.rows(), d = t.cols();
  Tensor th(t.shape()), sh(s.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      th(i, k) = t(i, k) / tn[i];
      sh(i, k) = s(i, k) / sn[i];
    }
  const Tensor a = matmul_bt(sh, th);  // a(i, j) = ŝ_i · t̂_j
  const Tensor b = matmul_bt(sh, sh);
  const double inv_tau = 1.0 / tau;
  const double inv_n = 1.0 / static_cast<double>(n);

  LossValue out{0.0, Tensor(s.shape())};
  Tensor g_hat(s.shape());  // gradient w.r.t. ŝ
  std::vector<double> pa(n), pb(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      m = std::max(m, a(i, j) * inv_tau);
      if (j != i) m = std::max(m, b(i, j) * inv_tau);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      pa[j] = std::exp(a(i, j) * inv_tau - m);
      z += pa[j];
      pb[j] = j == i ? 0.0 : std::exp(b(i, j) * inv_tau - m);
      z += pb[j];
    }
    out.value += inv_n * (m + std::log(z) - a(i, i) * inv_tau);
    for (std::size_t j = 0; j < n; ++j) {
      pa[j] /= z;
      pb[j] /= z;
    }
    const double w = inv_n * inv_tau;
    for (std::size_t k = 0; k < d; ++k) g_hat(i, k) -= w * th(i, k);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < d; ++k) {
        g_hat(i, k) += w * pa[j] * th(j, k);
        if (j != i) {
          g_hat(i, k) += w * pb[j] * sh(j, k);
          g_hat(j, k) += w * pb[j] * sh(i, k);
        }
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double proj = dot(g_hat.row(i), sh.row(i));
    for (std::size_t k = 0; k < d; ++k) out.grad(i, k) = (g_hat(i, k) - proj * sh(i, k)) / sn[i];
  }
  if (!std::isfinite(out.value)) throw NumericError("contrastive_loss is not finite");
  return out;
}

namespace detail {

inline Var loss_node(Var s, LossValue lv, const char* op) {
  Tensor value({1}, lv.value);
  return s.tape->push(std::move(value), {s.id},
                      [s, g = std::move(lv.grad)](Tape& t, std::size_t self) {
                        if (!t.needs_grad(s.id)) return;
                        const double up = t.grad(self)[0];
                        Tensor& gs = t.grad(s.id);
                        for (std::size_t i = 0; i < g.size(); ++i) gs[i] += up * g[i];
                      },
                      op);
}

}  // namespace detail

namespace ad {

inline Var cosine_distance_loss(const Tensor& teacher, Var student) {
  return detail::loss_node(student, cosine_distance(teacher, student.value()), "cosine_distance_loss");
}

inline Var contrastive_loss(const Tensor& teacher, Var student, double tau) {
  return detail::loss_node(student, contrastive(teacher, student.value(), tau), "contrastive_loss");
}

}  // namespace ad

}  // namespace embsteal
