#pragma once

#include <cmath>
#include <vector>

#include "mesa/linalg.hpp"
#include "mesa/matrix.hpp"
#include "mesa/mesa_kernel.hpp"
#include "mesa/tape.hpp"

namespace mesa {

// One attention head: W_q, W_k are n_a x n_e,
// W_v is n_v x n_e and P is n_e x n_v. Tokens are rows of E (T x n_e).
struct HeadParams {
  Matrix w_q, w_k, w_v, p;
  double lambda = 1.0;
};

enum class AttentionKind { kSoftmax, kLinear, kMesa };

inline const char* attention_kind_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::kSoftmax: return "softmax";
    case AttentionKind::kLinear: return "linear";
    case AttentionKind::kMesa: return "mesa";
  }
  return "unknown";
}

struct HeadProjections {
  Matrix q, k, v;  // T x n_a, T x n_a, T x n_v
};

inline HeadProjections project(const Matrix& e, const HeadParams& h) {
  return {matmul_nt(e, h.w_q), matmul_nt(e, h.w_k), matmul_nt(e, h.w_v)};
}

// Sinusoidal table (T x dim): entry (t, 2i) = sin(t w_i), (t, 2i+1) = cos(t w_i)
// with w_i = 10000^{-2i/dim}, t counted from 0.
inline Matrix sinusoidal_table(std::size_t t_len, std::size_t dim) {
  Matrix pe(t_len, dim);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double i2 = static_cast<double>(j - j % 2);
      const double w = std::pow(10000.0, -i2 / static_cast<double>(dim));
      pe(t, j) = (j % 2 == 0) ? std::sin(static_cast<double>(t) * w)
                              : std::cos(static_cast<double>(t) * w);
    }
  }
  return pe;
}

// Appends the positional table to queries and keys; values are untouched.
inline void positional_concat(Matrix& q, Matrix& k, const Matrix& table) {
  if (table.cols() == 0) return;
  const Matrix pe = slice_rows(table, 0, q.rows());
  q = concat_cols(q, pe);
  k = concat_cols(k, pe);
}

// Softmax attention weights A(t, t') (rows sum to 1 over t' <= t).
inline Matrix softmax_weights(const Matrix& q, const Matrix& k) {
  return detail::softmax_rows(matmul_nt(q, k), true);
}

// Linear-attention scores q_t . k_t' weighted by the (forget-)causal mask.
inline Matrix linear_scores(const Matrix& q, const Matrix& k, const Matrix& mask) {
  return hadamard(matmul_nt(q, k), transpose(mask));
}

inline void check_heads(const Matrix& e, const std::vector<HeadParams>& heads) {
  for (const auto& h : heads) {
    if (h.w_q.cols() != e.cols() || h.w_k.cols() != e.cols() || h.w_v.cols() != e.cols() ||
        h.w_q.rows() != h.w_k.rows() || h.p.rows() != e.cols() || h.p.cols() != h.w_v.rows()) {
      throw ShapeMismatch("head parameters do not match tokens " + e.shape_str());
    }
  }
}

inline Matrix softmax_attention(const Matrix& e, const std::vector<HeadParams>& heads,
                                const Matrix& pos_table = {}) {
  check_heads(e, heads);
  Matrix out(e.rows(), e.cols());
  for (const auto& h : heads) {
    auto pr = project(e, h);
    positional_concat(pr.q, pr.k, pos_table);
    out += matmul_nt(matmul(softmax_weights(pr.q, pr.k), pr.v), h.p);
  }
  return out;
}

inline Matrix linear_attention(const Matrix& e, const std::vector<HeadParams>& heads,
                               const Matrix& gammas = {}, const Matrix& pos_table = {}) {
  check_heads(e, heads);
  const Matrix mask = forget_mask(gammas.empty() ? ones_gammas(e.rows()) : gammas);
  Matrix out(e.rows(), e.cols());
  for (const auto& h : heads) {
    auto pr = project(e, h);
    positional_concat(pr.q, pr.k, pos_table);
    out += matmul_nt(matmul(linear_scores(pr.q, pr.k, mask), pr.v), h.p);
  }
  return out;
}

struct MesaLayerResult {
  Matrix delta;
  std::vector<std::vector<Matrix>> r_trace;  // per head, R_0..R_T when requested
};

inline MesaLayerResult mesa_forward(const Matrix& e, const std::vector<HeadParams>& heads,
                                    const Matrix& gammas = {}, bool keep_trace = false) {
  check_heads(e, heads);
  const Matrix g = gammas.empty() ? ones_gammas(e.rows()) : gammas;
  MesaLayerResult res;
  res.delta = Matrix(e.rows(), e.cols());
  for (const auto& h : heads) {
    const auto pr = project(e, h);
    auto fwd = mesa_head_forward(pr.k, pr.q, pr.v, g, h.lambda, keep_trace);
    res.delta += matmul_nt(fwd.y, h.p);
    if (keep_trace) res.r_trace.push_back(std::move(fwd.r_trace));
  }
  return res;
}

// Direct oracle: R_t = (sum_{t'<=t} M_{t',t} k k^T + (prod_{s<=t} g_s / lambda) I)^{-1}.
inline Matrix mesa_direct_inverse(const Matrix& k, const Matrix& gammas, double lambda,
                                  std::size_t t) {
  const std::size_t n = k.cols();
  Matrix x(n, n);
  double m = 1.0;
  for (std::size_t tp = t + 1; tp-- > 0;) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) x(i, j) += m * k(tp, i) * k(tp, j);
    m *= gammas[tp];
  }
  for (std::size_t i = 0; i < n; ++i) x(i, i) += m / lambda;
  return inverse_spd(symmetrize(x));
}

// Weighted system X_t q for all t at once: rows of the result are
// sum_{t'} M_{t',t} k_{t'} (k_{t'} . q_t) + (prod g / lambda) q_t.
inline Matrix mesa_system_apply(const Matrix& k, const Matrix& mask, const Matrix& decay,
                                double lambda, const Matrix& q) {
  Matrix out = matmul(hadamard(matmul_nt(q, k), transpose(mask)), k);
  for (std::size_t t = 0; t < q.rows(); ++t)
    for (std::size_t j = 0; j < q.cols(); ++j) out(t, j) += decay[t] / lambda * q(t, j);
  return out;
}

inline Matrix mesa_decay(const Matrix& gammas) {
  Matrix d(gammas.rows(), 1);
  double m = 1.0;
  for (std::size_t t = 0; t < gammas.rows(); ++t) {
    m *= gammas[t];
    d[t] = m;
  }
  return d;
}

inline constexpr double kNeumannMargin = 1.01;

// q~_t ~= X_t^{-1} q_t for all t by K Richardson steps on the normalized
// systems X_t / s_t, s_t = 1.01 * ||X_t||, in the residual form
// q~ <- q~ + (q - X q~) / s, starting at q~ = q. The per-step normalizer
// keeps the result causal.
inline Matrix neumann_solve(const Matrix& k, const Matrix& q, const Matrix& gammas,
                            double lambda, int k_steps) {
  if (!(lambda > 0.0)) throw NonPositiveLambda("neumann_solve requires lambda > 0");
  const Matrix mask = forget_mask(gammas);
  const Matrix decay = mesa_decay(gammas);
  const std::size_t n = k.cols();
  std::vector<double> inv_s(k.rows());
  for (std::size_t t = 0; t < k.rows(); ++t) {
    Matrix x(n, n);
    for (std::size_t tp = 0; tp <= t; ++tp)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) x(i, j) += mask(tp, t) * k(tp, i) * k(tp, j);
    for (std::size_t i = 0; i < n; ++i) x(i, i) += decay[t] / lambda;
    inv_s[t] = 1.0 / (kNeumannMargin * operator_norm(x));
  }
  Matrix qt = q;
  for (int it = 0; it < k_steps; ++it) {
    const Matrix r = q - mesa_system_apply(k, mask, decay, lambda, qt);
    for (std::size_t t = 0; t < qt.rows(); ++t)
      for (std::size_t j = 0; j < qt.cols(); ++j) qt(t, j) += inv_s[t] * r(t, j);
  }
  return qt;
}

inline Matrix mesa_forward_neumann(const Matrix& e, const std::vector<HeadParams>& heads,
                                   int k_steps, const Matrix& gammas = {}) {
  check_heads(e, heads);
  const Matrix g = gammas.empty() ? ones_gammas(e.rows()) : gammas;
  const Matrix mask = forget_mask(g);
  Matrix out(e.rows(), e.cols());
  for (const auto& h : heads) {
    const auto pr = project(e, h);
    const Matrix qt = neumann_solve(pr.k, pr.q, g, h.lambda, k_steps);
    out += matmul_nt(matmul(linear_scores(qt, pr.k, mask), pr.v), h.p);
  }
  return out;
}

// Compares the value-gradient of the mesa backward pass with the implicit
// function theorem form dL/dv_{t'} = sum_t M_{t',t} (k_{t'}^T R_t q_t) g_t,
// where R_t comes from a direct SPD solve. Returns max |a - b| / max |b|.
inline double mesa_ifth_gradient_check(const Matrix& k, const Matrix& q, const Matrix& v,
                                       const Matrix& gammas, double lambda, const Matrix& dy) {
  const auto fwd = mesa_head_forward(k, q, v, gammas, lambda);
  MesaHeadGrads grads;
  grads.reset(k.rows(), k.cols(), v.cols());
  mesa_head_backward(k, q, v, gammas, lambda, fwd.r_final, dy, grads);
  const Matrix mask = forget_mask(gammas);
  Matrix ift(v.rows(), v.cols());
  for (std::size_t t = 0; t < k.rows(); ++t) {
    const Matrix qt = matmul(mesa_direct_inverse(k, gammas, lambda, t), row_as_column(q, t));
    for (std::size_t tp = 0; tp <= t; ++tp) {
      const double w = mask(tp, t) * dot(k.row(tp), qt.data());
      for (std::size_t j = 0; j < v.cols(); ++j) ift(tp, j) += w * dy(t, j);
    }
  }
  return max_abs_diff(grads.dv, ift) / std::max(max_abs(ift), 1e-300);
}

// Store-everything oracle: the same head unrolled into generic tape
// primitives (every R_t kept on the tape). Returns sum_t <dy_t, y_t> so its
// gradients are the head's vector-Jacobian products for cotangent dy.
inline Var mesa_head_unrolled(Tape& tape, Var k, Var q, Var v, Var gammas, Var lambda,
                              const Matrix& dy) {
  const std::size_t t_len = k.rows();
  const std::size_t n = k.cols();
  Var r = ad::scale_by(tape.constant(Matrix::identity(n)), lambda);
  Var total = tape.constant(Matrix(1, 1));
  for (std::size_t t = 0; t < t_len; ++t) {
    const Var kt = ad::slice_rows(k, t, 1);
    const Var gt = ad::slice_rows(gammas, t, 1);
    const Var u = ad::matmul_nt(r, kt);
    const Var c = ad::add(gt, ad::matmul(kt, u));
    const Var down = ad::scale_by(ad::matmul_nt(u, u), ad::reciprocal(c));
    r = ad::scale_by(ad::sub(r, down), ad::reciprocal(gt));
    r = ad::scale(ad::add(r, ad::transpose(r)), 0.5);
    const Var qt = ad::matmul_nt(r, ad::slice_rows(q, t, 1));
    Var m = tape.constant(Matrix(1, 1, 1.0));
    for (std::size_t tp = t + 1; tp-- > 0;) {
      const Var a = ad::matmul(ad::slice_rows(k, tp, 1), qt);
      const Var term = ad::scale_by(ad::slice_rows(v, tp, 1), ad::mul(a, m));
      total = ad::add(total, ad::sum(ad::mul(term, tape.constant(slice_rows(dy, t, 1)))));
      if (tp > 0) m = ad::mul(m, ad::slice_rows(gammas, tp, 1));
    }
  }
  return total;
}

}  // namespace mesa
