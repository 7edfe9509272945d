#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mesa/linalg.hpp"
#include "mesa/matrix.hpp"
#include "mesa/rng.hpp"
#include "mesa/tape.hpp"

namespace mesa {

enum class GeneratorKind {
  kFullyObservedLinear,
  kPartiallyObservedLinear,
  kNonlinear,
  kContracting,
  kFixedTeacher,
};

inline const char* generator_kind_name(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::kFullyObservedLinear: return "fully_observed_linear";
    case GeneratorKind::kPartiallyObservedLinear: return "partially_observed_linear";
    case GeneratorKind::kNonlinear: return "nonlinear";
    case GeneratorKind::kContracting: return "contracting";
    case GeneratorKind::kFixedTeacher: return "fixed_teacher";
  }
  return "unknown";
}

inline GeneratorKind parse_generator_kind(const std::string& s) {
  for (auto k : {GeneratorKind::kFullyObservedLinear, GeneratorKind::kPartiallyObservedLinear,
                 GeneratorKind::kNonlinear, GeneratorKind::kContracting,
                 GeneratorKind::kFixedTeacher}) {
    if (s == generator_kind_name(k)) return k;
  }
  throw InvalidSpec("unknown generator kind '" + s + "'");
}

struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::kFullyObservedLinear;
  std::size_t n_h = 10;
  std::size_t n_s = 10;
  std::size_t n_m = 40;
  double sigma_h = 0.01;
  double sigma_s = 0.0;
  std::size_t T = 50;
  std::optional<double> clip_band;

  void validate() const {
    if (n_s == 0 || n_h == 0) throw InvalidSpec("dimensions must be positive");
    if (n_s > n_h) {
      throw InvalidSpec("observation dim n_s=" + std::to_string(n_s) + " exceeds state dim n_h=" +
                        std::to_string(n_h));
    }
    if (kind == GeneratorKind::kPartiallyObservedLinear && n_s >= n_h) {
      throw InvalidSpec("partially observed tasks need n_s < n_h");
    }
    if ((kind == GeneratorKind::kFullyObservedLinear || kind == GeneratorKind::kFixedTeacher ||
         kind == GeneratorKind::kNonlinear) &&
        n_s != n_h) {
      throw InvalidSpec(std::string(generator_kind_name(kind)) + " requires n_s == n_h");
    }
    if (kind == GeneratorKind::kNonlinear && n_m == 0) throw InvalidSpec("n_m must be positive");
    if (!(sigma_h >= 0.0) || !(sigma_s >= 0.0)) throw InvalidSpec("noise levels must be >= 0");
    if (T < 2) throw InvalidSpec("T must be at least 2");
    if (clip_band && !(*clip_band > 0.0)) throw InvalidSpec("clip band must be positive");
  }

  std::optional<double> effective_clip() const {
    if (clip_band) return clip_band;
    if (kind == GeneratorKind::kContracting) return 2.0;
    return std::nullopt;
  }
};

struct Teacher {
  Matrix w;       // n_h x n_h
  Matrix c;       // n_s x n_h
  Matrix mlp_a;   // n_m x n_h (nonlinear only)
  Matrix mlp_b;   // n_h x n_m (nonlinear only)
};

struct SequenceBatch {
  GeneratorSpec spec;
  std::vector<Matrix> observations;  // each T x n_s
  std::vector<Matrix> states;        // each T x n_h
  std::vector<Teacher> teachers;
  std::vector<bool> clipped;

  std::size_t size() const { return observations.size(); }
};

inline Matrix teacher_mlp(const Teacher& th, const Matrix& h) {
  Matrix a = matmul(th.mlp_a, h);
  for (double& v : a.data()) v = gelu_scalar(v);
  return matmul(th.mlp_b, a);
}

inline Teacher draw_teacher(const GeneratorSpec& spec, Rng& rng) {
  Teacher th;
  switch (spec.kind) {
    case GeneratorKind::kContracting:
      th.w = rescale_spectrum(rng.normal_matrix(spec.n_h, spec.n_h), 0.3, 0.9);
      break;
    default:
      th.w = random_orthogonal(spec.n_h, rng);
      break;
  }
  if (spec.n_s == spec.n_h) {
    th.c = Matrix::identity(spec.n_h);
  } else {
    th.c = rng.normal_matrix(spec.n_s, spec.n_h, std::sqrt(0.5));
  }
  if (spec.kind == GeneratorKind::kNonlinear) {
    th.mlp_a = rng.normal_matrix(spec.n_m, spec.n_h, std::sqrt(1.1 / static_cast<double>(spec.n_h)));
    th.mlp_b = rng.normal_matrix(spec.n_h, spec.n_m, std::sqrt(1.1 / static_cast<double>(spec.n_m)));
  }
  return th;
}

// Rolls out one sequence from a given teacher.
inline void rollout(const GeneratorSpec& spec, const Teacher& th, Rng& rng, Matrix& states,
                    Matrix& obs, bool& clipped) {
  states = Matrix(spec.T, spec.n_h);
  obs = Matrix(spec.T, spec.n_s);
  Matrix h = rng.normal_matrix(spec.n_h, 1);
  clipped = false;
  const auto band = spec.effective_clip();
  for (std::size_t t = 0; t < spec.T; ++t) {
    for (std::size_t i = 0; i < spec.n_h; ++i) states(t, i) = h[i];
    Matrix s = matmul(th.c, h);
    for (std::size_t i = 0; i < spec.n_s; ++i) {
      double v = s[i] + (spec.sigma_s > 0.0 ? spec.sigma_s * rng.normal() : 0.0);
      if (band && std::abs(v) > *band) {
        v = std::clamp(v, -*band, *band);
        clipped = true;
      }
      obs(t, i) = v;
    }
    const Matrix fh = spec.kind == GeneratorKind::kNonlinear ? teacher_mlp(th, h) : h;
    h = matmul(th.w, fh);
    if (spec.sigma_h > 0.0) {
      for (double& v : h.data()) v += spec.sigma_h * rng.normal();
    }
  }
}

inline SequenceBatch gen_sequences(const GeneratorSpec& spec, std::size_t batch, Rng& rng) {
  spec.validate();
  SequenceBatch out;
  out.spec = spec;
  std::optional<Teacher> shared;
  if (spec.kind == GeneratorKind::kFixedTeacher) shared = draw_teacher(spec, rng);
  for (std::size_t b = 0; b < batch; ++b) {
    Teacher th = shared ? *shared : draw_teacher(spec, rng);
    Matrix states, obs;
    bool clipped = false;
    rollout(spec, th, rng, states, obs, clipped);
    out.observations.push_back(std::move(obs));
    out.states.push_back(std::move(states));
    out.teachers.push_back(std::move(th));
    out.clipped.push_back(clipped);
  }
  return out;
}

// ---------------------------------------------------------------------------
// In-context regression tasks.

struct IclTask {
  Matrix x;  // N x n_s, rows x_i
  Matrix y;  // N x n_s, rows y_i = W x_i
  Matrix w;
};

inline std::vector<IclTask> gen_icl_tasks(std::size_t n_s, std::size_t n_pairs, std::size_t batch,
                                          Rng& rng) {
  if (n_pairs < 2) throw InvalidSpec("ICL tasks need N >= 2");
  std::vector<IclTask> tasks;
  for (std::size_t b = 0; b < batch; ++b) {
    IclTask task;
    task.w = random_orthogonal(n_s, rng);
    task.x = rng.normal_matrix(n_pairs, n_s);
    task.y = matmul_nt(task.x, task.w);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

inline constexpr std::size_t kPrefixLength = 20;

// Token sequence [x_1, y_1, (EOS,) x_2, y_2, ...]; an optional prefix of
// learned tokens is prepended.
inline Matrix icl_tokens(const IclTask& task, const Matrix* eos = nullptr,
                         const Matrix* prefix = nullptr) {
  const std::size_t n = task.x.rows();
  const std::size_t d = task.x.cols();
  const std::size_t per = eos ? 3 : 2;
  const std::size_t pre = prefix ? prefix->rows() : 0;
  Matrix out(pre + per * n - (eos ? 1 : 0), d);
  for (std::size_t i = 0; i < pre; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = (*prefix)(i, j);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = pre + per * i;
    for (std::size_t j = 0; j < d; ++j) {
      out(base, j) = task.x(i, j);
      out(base + 1, j) = task.y(i, j);
      if (eos && i + 1 < n) out(base + 2, j) = (*eos)[j];
    }
  }
  return out;
}

// Row index of the token whose prediction is compared against y_i.
inline std::size_t icl_query_position(std::size_t i, bool eos, std::size_t prefix_len) {
  return prefix_len + (eos ? 3 : 2) * i;
}

struct PairDataset {
  Matrix inputs;   // rows
  Matrix targets;  // rows
  std::vector<bool> spurious;
};

inline PairDataset spurious_pairs(const IclTask& task) {
  const std::size_t n = task.x.rows();
  if (n < 2) throw InvalidSpec("spurious_pairs needs N >= 2");
  PairDataset d;
  d.inputs = Matrix(2 * n - 1, task.x.cols());
  d.targets = Matrix(2 * n - 1, task.x.cols());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < task.x.cols(); ++j) {
      d.inputs(i, j) = task.x(i, j);
      d.targets(i, j) = task.y(i, j);
    }
    d.spurious.push_back(false);
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    for (std::size_t j = 0; j < task.x.cols(); ++j) {
      d.inputs(n + i, j) = task.y(i, j);
      d.targets(n + i, j) = task.x(i + 1, j);
    }
    d.spurious.push_back(true);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Closed-form baselines.

struct PredictionCurve {
  Matrix predictions;        // T x n_s; row t predicts s_{t+1}
  std::vector<double> loss;  // loss[t] = 1/2 ||s_{t+1} - prediction_t||^2
  std::vector<bool> valid;   // false where no prediction is emitted
};

// Ridge fit on pairs (s_t', s_{t'+1}), t' < t, applied to s_t (0-based t).
inline PredictionCurve lsq_autoregressive(const Matrix& seq, double lambda) {
  if (!(lambda > 0.0)) throw NonPositiveLambda("lsq_autoregressive requires lambda > 0");
  const std::size_t t_len = seq.rows(), n = seq.cols();
  PredictionCurve c{Matrix(t_len, n), std::vector<double>(t_len, 0.0),
                    std::vector<bool>(t_len, false)};
  Matrix gram = Matrix::identity(n) * (1.0 / lambda);
  Matrix cross(n, n);  // sum s_{t'} s_{t'+1}^T
  for (std::size_t t = 1; t < t_len; ++t) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        gram(i, j) += seq(t - 1, i) * seq(t - 1, j);
        cross(i, j) += seq(t - 1, i) * seq(t, j);
      }
    // Phi^T = gram^{-1} cross, prediction = Phi s_t.
    const Matrix phi_t = solve_spd(gram, cross);
    const Matrix pred = matmul_tn(phi_t, row_as_column(seq, t));
    for (std::size_t j = 0; j < n; ++j) c.predictions(t, j) = pred[j];
    c.valid[t] = true;
    if (t + 1 < t_len) {
      double l = 0.0;
      for (std::size_t j = 0; j < n; ++j) l += 0.5 * std::pow(seq(t + 1, j) - pred[j], 2);
      c.loss[t] = l;
    } else {
      c.valid[t] = false;
    }
  }
  return c;
}

// s^_{t+1} = sum_{t' < t} s_{t'+1} softmax_t'(beta s_t'^T s_t)  (0-based t).
inline PredictionCurve softmax_kernel_predictor(const Matrix& seq, double beta) {
  if (!(beta > 0.0)) throw InvalidSpec("beta must be positive");
  const std::size_t t_len = seq.rows(), n = seq.cols();
  PredictionCurve c{Matrix(t_len, n), std::vector<double>(t_len, 0.0),
                    std::vector<bool>(t_len, false)};
  std::vector<double> logits;
  for (std::size_t t = 1; t + 1 < t_len; ++t) {
    logits.assign(t, 0.0);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t tp = 0; tp < t; ++tp) {
      logits[tp] = beta * dot(seq.row(tp), seq.row(t));
      mx = std::max(mx, logits[tp]);
    }
    double z = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      z += l;
    }
    double loss = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double p = 0.0;
      for (std::size_t tp = 0; tp < t; ++tp) p += logits[tp] / z * seq(tp + 1, j);
      c.predictions(t, j) = p;
      loss += 0.5 * std::pow(seq(t + 1, j) - p, 2);
    }
    c.loss[t] = loss;
    c.valid[t] = true;
  }
  return c;
}

inline double mean_valid_loss(const PredictionCurve& c) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < c.loss.size(); ++t) {
    if (c.valid[t]) {
      s += c.loss[t];
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

template <typename Predictor>
double batch_mean_loss(const std::vector<Matrix>& seqs, Predictor&& pred) {
  double s = 0.0;
  for (const auto& seq : seqs) s += mean_valid_loss(pred(seq));
  return s / static_cast<double>(std::max<std::size_t>(seqs.size(), 1));
}

inline std::vector<double> default_tuning_grid() { return log_grid(1e-3, 1e3, 25); }

struct TunedValue {
  double value = 0.0;
  double loss = 0.0;
};

// Grid search on a held-out batch.
template <typename Predictor>
TunedValue tune_on_grid(const std::vector<Matrix>& heldout, const std::vector<double>& grid,
                        Predictor&& make) {
  TunedValue best{grid.front(), std::numeric_limits<double>::infinity()};
  for (double g : grid) {
    const double l = batch_mean_loss(heldout, [&](const Matrix& s) { return make(s, g); });
    if (l < best.loss) best = {g, l};
  }
  return best;
}

inline TunedValue tune_lsq_lambda(const std::vector<Matrix>& heldout,
                                  const std::vector<double>& grid = default_tuning_grid()) {
  return tune_on_grid(heldout, grid, [](const Matrix& s, double l) { return lsq_autoregressive(s, l); });
}

inline TunedValue tune_kernel_beta(const std::vector<Matrix>& heldout,
                                   const std::vector<double>& grid = default_tuning_grid()) {
  return tune_on_grid(heldout, grid,
                      [](const Matrix& s, double b) { return softmax_kernel_predictor(s, b); });
}

// ---------------------------------------------------------------------------
// Partially observed systems.

// z_t^k = [s_{t-k+1}; ...; s_t] as a column, zero-padded before the start.
inline Matrix concat_window(const Matrix& seq, std::size_t t, std::size_t k) {
  const std::size_t n = seq.cols();
  Matrix z(k * n, 1);
  for (std::size_t b = 0; b < k; ++b) {
    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(k - 1 - b);
    if (src < 0) continue;
    for (std::size_t j = 0; j < n; ++j) z[b * n + j] = seq(static_cast<std::size_t>(src), j);
  }
  return z;
}

inline Matrix matrix_power(const Matrix& w, int p) {
  Matrix base = p >= 0 ? w : solve_general(w, Matrix::identity(w.rows()));
  Matrix out = Matrix::identity(w.rows());
  for (int i = 0; i < std::abs(p); ++i) out = matmul(out, base);
  return out;
}

struct PhiK {
  Matrix phi;            // k n_s x k n_s
  bool overdetermined;   // k n_s < n_h: exactness not guaranteed
};

// Phi_k = O_k W O_k^+ with O_k = [C; C W; ...; C W^{k-1}].
inline PhiK phi_k_optimal(const Matrix& w, const Matrix& c, std::size_t k) {
  if (k == 0) throw InvalidSpec("k must be >= 1");
  const std::size_t n_s = c.rows(), n_h = c.cols();
  Matrix o(k * n_s, n_h);
  Matrix cw = c;
  for (std::size_t b = 0; b < k; ++b) {
    for (std::size_t i = 0; i < n_s; ++i)
      for (std::size_t j = 0; j < n_h; ++j) o(b * n_s + i, j) = cw(i, j);
    cw = matmul(cw, w);
  }
  return {matmul(matmul(o, w), pinv(o)), k * n_s < n_h};
}

// Linear map U with h^_t = U z_t^k: stationarity system of
//   min 1/(2 sigma_s^2) ||v||^2 + 1/(2 sigma_h^2) sum_l ||eps_l||^2
//   s.t. z = v + F h - sum_l F^l eps_l,
// unknowns ordered [h, eps_1..eps_{k-1}, v, multiplier].
inline Matrix mle_state_map(const Matrix& w, const Matrix& c, std::size_t k, double sigma_h,
                            double sigma_s) {
  const std::size_t n_s = c.rows(), n_h = c.cols();
  const std::size_t ne = (k - 1) * n_h, nz = k * n_s;
  const std::size_t dim = n_h + ne + 2 * nz;
  const std::size_t off_e = n_h, off_v = n_h + ne, off_l = n_h + ne + nz;
  std::vector<Matrix> winv(k + 1);
  for (std::size_t p = 0; p <= k; ++p) winv[p] = matmul(c, matrix_power(w, -static_cast<int>(p)));
  // Coefficient block of h (F) and eps_l (F^l) in observation block b.
  auto f_block = [&](std::size_t b) { return winv[k - 1 - b]; };
  auto fl_block = [&](std::size_t b, std::size_t l) -> Matrix {
    const std::size_t j = k - 1 - b;
    return j >= l ? winv[j - l + 1] : Matrix(n_s, n_h);
  };
  Matrix s(dim, dim);
  auto put = [&](std::size_t r0, std::size_t c0, const Matrix& m, double sc) {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) s(r0 + i, c0 + j) += sc * m(i, j);
  };
  const double sh2 = sigma_h * sigma_h, ss2 = sigma_s * sigma_s;
  for (std::size_t b = 0; b < k; ++b) {
    // grad_h: F^T lambda = 0
    put(0, off_l + b * n_s, transpose(f_block(b)), 1.0);
    // constraint rows: v + F h - sum F^l eps_l = z
    put(off_l + b * n_s, 0, f_block(b), 1.0);
    for (std::size_t l = 1; l < k; ++l) {
      const Matrix fl = fl_block(b, l);
      // grad_eps_l: eps_l - sigma_h^2 F^{l T} lambda = 0
      put(off_e + (l - 1) * n_h, off_l + b * n_s, transpose(fl), -sh2);
      put(off_l + b * n_s, off_e + (l - 1) * n_h, fl, -1.0);
    }
  }
  for (std::size_t i = 0; i < ne; ++i) s(off_e + i, off_e + i) = 1.0;
  for (std::size_t i = 0; i < nz; ++i) {
    // grad_v: v + sigma_s^2 lambda = 0
    s(off_v + i, off_v + i) = 1.0;
    s(off_v + i, off_l + i) = ss2;
    s(off_l + i, off_v + i) = 1.0;
  }
  Matrix rhs(dim, nz);
  for (std::size_t i = 0; i < nz; ++i) rhs(off_l + i, i) = 1.0;
  const Matrix sol = solve_general(s, rhs);
  return slice_rows(sol, 0, n_h);
}

inline Matrix mle_latent_state(const Matrix& z, const Matrix& w, const Matrix& c, std::size_t k,
                               double sigma_h, double sigma_s) {
  return matmul(mle_state_map(w, c, k, sigma_h, sigma_s), z);
}

}  // namespace mesa
