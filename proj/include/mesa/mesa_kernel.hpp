#pragma once

#include <cmath>
#include <vector>

#include "mesa/error.hpp"
#include "mesa/matrix.hpp"

namespace mesa {

// Single mesa head over one sequence. Rows of K, Q, V are k_t, q_t, v_t;
// gammas is T x 1 with entries in (0, 1].
//
//   R_0 = lambda I
//   R_t = (R_{t-1} - R_{t-1} k_t k_t^T R_{t-1} / (g_t + k_t^T R_{t-1} k_t)) / g_t
//   y_t = sum_{t' <= t} M_{t',t} (k_{t'}^T R_t q_t) v_{t'}
//
// with M_{t',t} = prod_{s=t'+1..t} g_s.

inline constexpr double kDegenerateReverseTol = 1e-8;

struct MesaHeadForward {
  Matrix y;                    // T x n_v
  Matrix r_final;              // n_a x n_a
  std::vector<Matrix> r_trace;  // R_0 .. R_T when requested
};

struct MesaHeadGrads {
  Matrix dk, dq, dv, dgamma;
  double dlambda = 0.0;

  void reset(std::size_t t, std::size_t n_a, std::size_t n_v) {
    dk = Matrix(t, n_a);
    dq = Matrix(t, n_a);
    dv = Matrix(t, n_v);
    dgamma = Matrix(t, 1);
    dlambda = 0.0;
  }
};

namespace detail {

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

inline void check_head_shapes(const Matrix& k, const Matrix& q, const Matrix& v,
                              const Matrix& gammas) {
  if (k.rows() != q.rows() || k.rows() != v.rows() || k.cols() != q.cols() ||
      gammas.rows() != k.rows() || gammas.cols() != 1) {
    throw ShapeMismatch("mesa head K " + k.shape_str() + " Q " + q.shape_str() + " V " +
                        v.shape_str() + " gammas " + gammas.shape_str());
  }
}

inline auto row_vec(const Matrix& m, std::size_t t) {
  return Eigen::Map<const VecX>(m.row(t).data(), static_cast<Eigen::Index>(m.cols()));
}
inline auto row_vec(Matrix& m, std::size_t t) {
  return Eigen::Map<VecX>(m.row(t).data(), static_cast<Eigen::Index>(m.cols()));
}

inline void symmetrize_in_place(MatX& r) {
  const Eigen::Index n = r.rows();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double s = 0.5 * (r(i, j) + r(j, i));
      r(i, j) = s;
      r(j, i) = s;
    }
}

// R <- (R - R k k^T R / (g + k^T R k)) / g, reusing u as scratch.
inline void forward_update(MatX& r, const Eigen::Ref<const VecX>& k, double g, VecX& u) {
  u.noalias() = r * k;
  const double c = g + k.dot(u);
  r.noalias() -= (u / c) * u.transpose();
  r /= g;
  symmetrize_in_place(r);
}

// Inverse of forward_update: R_{t-1} = g (R_t - R_t k k^T R_t / (k^T R_t k - 1)).
inline void reverse_update(MatX& r, const Eigen::Ref<const VecX>& k, double g, VecX& u) {
  u.noalias() = r * k;
  const double d = k.dot(u) - 1.0;
  if (std::abs(d) < kDegenerateReverseTol) {
    throw DegenerateReverse("k^T R k - 1 = " + std::to_string(d));
  }
  r.noalias() -= (u / d) * u.transpose();
  r *= g;
  symmetrize_in_place(r);
}

// y_t readout for one step given qt = R_t q_t.
inline void readout_forward(const Matrix& k, const Matrix& v, const Matrix& gammas,
                            std::size_t t, const VecX& qt, Matrix& y) {
  auto yt = row_vec(y, t);
  double m = 1.0;
  for (std::size_t tp = t + 1; tp-- > 0;) {
    yt.noalias() += (m * row_vec(k, tp).dot(qt)) * row_vec(v, tp);
    m *= gammas[tp];
  }
}

// Backward of the readout at step t. Accumulates dV, dK, dgamma and writes
// dqt = dL/d(R_t q_t).
inline void readout_backward(const Matrix& k, const Matrix& v, const Matrix& gammas,
                             std::size_t t, const VecX& qt, const Eigen::Ref<const VecX>& g,
                             MesaHeadGrads& out, VecX& dqt) {
  dqt.setZero();
  double m = 1.0;
  double total = 0.0;
  for (std::size_t tp = t + 1; tp-- > 0;) {
    const auto kp = row_vec(k, tp);
    const auto vp = row_vec(v, tp);
    const double a = kp.dot(qt);
    const double b = vp.dot(g);
    row_vec(out.dv, tp).noalias() += (m * a) * g;
    row_vec(out.dk, tp).noalias() += (m * b) * qt;
    dqt.noalias() += (m * b) * kp;
    total += m * a * b;
    m *= gammas[tp];
  }
  // dM_{t',t}/dg_s = M_{t',t} / g_s for t' < s <= t.
  m = 1.0;
  double suffix = 0.0;
  for (std::size_t tp = t + 1; tp-- > 0;) {
    suffix += m * row_vec(k, tp).dot(qt) * row_vec(v, tp).dot(g);
    out.dgamma[tp] += (total - suffix) / gammas[tp];
    m *= gammas[tp];
  }
}

// Propagates gbar = dL/dR_t through R_t = f(P, k, g), P = R_{t-1}.
// Returns dL/dP in gbar, accumulates dk and dg.
inline void state_backward(const MatX& p, const Eigen::Ref<const VecX>& k, double g, MatX& gbar,
                           Eigen::Ref<VecX> dk, double& dg, const MatX& rt, VecX& u, VecX& du,
                           MatX& b) {
  dg += -(gbar.cwiseProduct(rt)).sum() / g;
  b = gbar / g;
  u.noalias() = p * k;
  const double c = g + k.dot(u);
  du.noalias() = b * u;
  du.noalias() += b.transpose() * u;
  du *= -1.0 / c;
  const double dc = u.dot(b * u) / (c * c);
  dg += dc;
  dk.noalias() += dc * (p * k + p.transpose() * k);
  dk.noalias() += p.transpose() * du;
  gbar = b;
  gbar.noalias() += du * k.transpose();
  gbar.noalias() += dc * (k * k.transpose());
}

inline void check_inputs(const Matrix& gammas, double lambda) {
  if (!(lambda > 0.0)) throw NonPositiveLambda("mesa head requires lambda > 0");
  // The recursion itself is defined for any positive factor; schedules are
  // validated against (0, 1] where they are built (forget_mask).
  for (double g : gammas.data()) {
    if (!(g > 0.0)) throw InvalidSpec("forget factor must be positive");
  }
}

}  // namespace detail

inline Matrix ones_gammas(std::size_t t) { return Matrix(t, 1, 1.0); }

inline MesaHeadForward mesa_head_forward(const Matrix& k, const Matrix& q, const Matrix& v,
                                         const Matrix& gammas, double lambda,
                                         bool keep_trace = false) {
  detail::check_head_shapes(k, q, v, gammas);
  detail::check_inputs(gammas, lambda);
  const std::size_t t_len = k.rows();
  const auto n = static_cast<Eigen::Index>(k.cols());
  MesaHeadForward out;
  out.y = Matrix(t_len, v.cols());
  detail::MatX r = lambda * detail::MatX::Identity(n, n);
  detail::VecX u(n), qt(n);
  if (keep_trace) out.r_trace.push_back(Matrix::from_eigen(r));
  for (std::size_t t = 0; t < t_len; ++t) {
    detail::forward_update(r, detail::row_vec(k, t), gammas[t], u);
    if (keep_trace) out.r_trace.push_back(Matrix::from_eigen(r));
    qt.noalias() = r * detail::row_vec(q, t);
    detail::readout_forward(k, v, gammas, t, qt, out.y);
  }
  out.r_final = Matrix::from_eigen(r);
  return out;
}

// Memory-efficient backward: walks R_T back to R_0 with the reverse
// Sherman-Morrison recursion. Scratch is O(n_a^2) regardless of T; `out` must
// be sized by the caller (MesaHeadGrads::reset).
inline void mesa_head_backward(const Matrix& k, const Matrix& q, const Matrix& v,
                               const Matrix& gammas, double lambda, const Matrix& r_final,
                               const Matrix& dy, MesaHeadGrads& out) {
  detail::check_head_shapes(k, q, v, gammas);
  detail::check_inputs(gammas, lambda);
  const std::size_t t_len = k.rows();
  const auto n = static_cast<Eigen::Index>(k.cols());
  detail::MatX rt = r_final.eigen();
  detail::MatX p(n, n), gbar = detail::MatX::Zero(n, n), b(n, n);
  detail::VecX u(n), du(n), qt(n), dqt(n);
  for (std::size_t t = t_len; t-- > 0;) {
    const auto qrow = detail::row_vec(q, t);
    qt.noalias() = rt * qrow;
    detail::readout_backward(k, v, gammas, t, qt, detail::row_vec(dy, t), out, dqt);
    detail::row_vec(out.dq, t).noalias() += rt * dqt;
    gbar.noalias() += dqt * qrow.transpose();
    p = rt;
    detail::reverse_update(p, detail::row_vec(k, t), gammas[t], u);
    detail::state_backward(p, detail::row_vec(k, t), gammas[t], gbar, detail::row_vec(out.dk, t),
                           out.dgamma[t], rt, u, du, b);
    rt.swap(p);
  }
  out.dlambda += gbar.trace();
}

// Same adjoint driven by a stored trace R_0..R_T (fallback path and oracle).
inline void mesa_head_backward_stored(const Matrix& k, const Matrix& q, const Matrix& v,
                                      const Matrix& gammas, const std::vector<Matrix>& trace,
                                      const Matrix& dy, MesaHeadGrads& out) {
  const std::size_t t_len = k.rows();
  if (trace.size() != t_len + 1) throw ShapeMismatch("mesa trace length");
  const auto n = static_cast<Eigen::Index>(k.cols());
  detail::MatX rt(n, n), p(n, n), gbar = detail::MatX::Zero(n, n), b(n, n);
  detail::VecX u(n), du(n), qt(n), dqt(n);
  for (std::size_t t = t_len; t-- > 0;) {
    rt = trace[t + 1].eigen();
    p = trace[t].eigen();
    const auto qrow = detail::row_vec(q, t);
    qt.noalias() = rt * qrow;
    detail::readout_backward(k, v, gammas, t, qt, detail::row_vec(dy, t), out, dqt);
    detail::row_vec(out.dq, t).noalias() += rt * dqt;
    gbar.noalias() += dqt * qrow.transpose();
    detail::state_backward(p, detail::row_vec(k, t), gammas[t], gbar, detail::row_vec(out.dk, t),
                           out.dgamma[t], rt, u, du, b);
  }
  out.dlambda += gbar.trace();
}

// Backward with automatic fallback to a recomputed stored trace when the
// reverse recursion is numerically singular.
inline void mesa_head_backward_auto(const Matrix& k, const Matrix& q, const Matrix& v,
                                    const Matrix& gammas, double lambda, const Matrix& r_final,
                                    const Matrix& dy, MesaHeadGrads& out) {
  out.reset(k.rows(), k.cols(), v.cols());
  try {
    mesa_head_backward(k, q, v, gammas, lambda, r_final, dy, out);
  } catch (const DegenerateReverse&) {
    out.reset(k.rows(), k.cols(), v.cols());
    const auto fwd = mesa_head_forward(k, q, v, gammas, lambda, true);
    mesa_head_backward_stored(k, q, v, gammas, fwd.r_trace, dy, out);
  }
}

// Forget mask M (T x T) with M(t', t) = [t' <= t] prod_{s=t'+1..t} g_s.
inline Matrix forget_mask(const Matrix& gammas) {
  const std::size_t t_len = gammas.rows();
  for (double g : gammas.data()) {
    if (!(g > 0.0 && g <= 1.0)) throw InvalidSpec("forget factor outside (0, 1]");
  }
  Matrix m(t_len, t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    double prod = 1.0;
    for (std::size_t tp = t + 1; tp-- > 0;) {
      m(tp, t) = prod;
      prod *= gammas[tp];
    }
  }
  return m;
}

}  // namespace mesa
