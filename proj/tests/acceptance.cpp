// Acceptance run: one PASS/FAIL line per criterion.
//
// Exit status is 0 when every criterion was evaluated to completion; pass
// --strict to also fail the process when any criterion fails. Numeric
// arguments select criteria by index. Results are also written to
// acceptance_results.txt in the working directory.

#include <malloc.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "mesa/mesa.hpp"

// Heap accounting for the memory criterion. The glibc allocator entry points
// are interposed so that both operator new and Eigen's malloc-based
// temporaries are counted.
namespace alloc_stats {
std::atomic<long long> live{0};
std::atomic<long long> peak{0};

void add(void* p) {
  if (!p) return;
  const long long now = live += static_cast<long long>(malloc_usable_size(p));
  long long prev = peak.load();
  while (now > prev && !peak.compare_exchange_weak(prev, now)) {
  }
}

void sub(void* p) {
  if (p) live -= static_cast<long long>(malloc_usable_size(p));
}
}  // namespace alloc_stats

extern "C" {
void* __libc_malloc(std::size_t);
void* __libc_calloc(std::size_t, std::size_t);
void* __libc_realloc(void*, std::size_t);
void* __libc_memalign(std::size_t, std::size_t);
void __libc_free(void*);

void* malloc(std::size_t n) {
  void* p = __libc_malloc(n);
  alloc_stats::add(p);
  return p;
}

void* calloc(std::size_t n, std::size_t m) {
  void* p = __libc_calloc(n, m);
  alloc_stats::add(p);
  return p;
}

void* realloc(void* old, std::size_t n) {
  alloc_stats::sub(old);
  void* p = __libc_realloc(old, n);
  alloc_stats::add(p ? p : (n == 0 ? nullptr : old));
  return p;
}

void* aligned_alloc(std::size_t align, std::size_t n) {
  void* p = __libc_memalign(align, n);
  alloc_stats::add(p);
  return p;
}

int posix_memalign(void** out, std::size_t align, std::size_t n) {
  void* p = __libc_memalign(align, n);
  if (!p) return ENOMEM;
  alloc_stats::add(p);
  *out = p;
  return 0;
}

void free(void* p) {
  alloc_stats::sub(p);
  __libc_free(p);
}
}

using namespace mesa;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool passed = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

HeadParams random_head(std::size_t n_e, std::size_t n_a, Rng& rng, double scale) {
  return {rng.normal_matrix(n_a, n_e, scale), rng.normal_matrix(n_a, n_e, scale),
          rng.normal_matrix(n_a, n_e, scale), rng.normal_matrix(n_e, n_a, scale), 1.0};
}

Matrix gammas_between(std::size_t t, double lo, Rng& rng) {
  Matrix g(t, 1);
  for (double& v : g.data()) v = lo + (1.0 - lo) * rng.uniform();
  return g;
}

Rng acc_rng(std::uint64_t criterion, std::uint64_t index = 0) {
  return Rng(criterion, stream_id(StreamPurpose::kVerify, 1000 + index));
}

GeneratorSpec linear_task(std::size_t n, std::size_t t_len, double sigma = 0.01) {
  GeneratorSpec g;
  g.n_h = g.n_s = n;
  g.T = t_len;
  g.sigma_h = sigma;
  return g;
}

// ---------------------------------------------------------------------------

Outcome prop1_exactness() {
  const auto t0 = Clock::now();
  Rng rng = acc_rng(1);
  const GeneratorSpec g = linear_task(10, 50);
  double worst = 0.0;
  for (int b = 0; b < 100; ++b) {
    const Matrix seq = gen_sequences(g, 1, rng).observations[0];
    const bool zero_phi = b % 2 == 0;
    const auto ch = b % 4 < 2 ? TokenChannels::kThree : TokenChannels::kFour;
    const Matrix phi0 = zero_phi ? Matrix(10, 10) : rng.normal_matrix(10, 10, 0.3);
    const double eta = 0.01 + 0.1 * rng.uniform();
    const ConstructedTokenSpec spec{ch, 10};
    const Matrix tokens = build_constructed_tokens(seq, spec, zero_phi ? nullptr : &phi0);
    const Matrix out = tokens + linear_attention(tokens, {prop1_weights(10, eta, phi0, ch)});
    worst = std::max(worst, max_abs_diff(out, prop1_oracle_step(tokens, spec, eta, phi0)));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && secs <= 5.0,
          "max_abs_diff=" + fmt(worst) + " (tol 1e-10) time=" + fmt(secs) + "s (limit 5s)"};
}

Outcome mesa_correctness() {
  const auto t0 = Clock::now();
  Rng rng = acc_rng(2);
  const std::size_t t_len = 200, n_a = 8;
  const Matrix k = rng.normal_matrix(t_len, n_a);
  const double lambda = 0.7;
  const auto fwd = mesa_head_forward(k, k, Matrix(t_len, 1), ones_gammas(t_len), lambda, true);
  double r_err = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    r_err = std::max(r_err, relative_error(fwd.r_trace[t + 1], mesa_direct_inverse(k, ones_gammas(t_len), lambda, t)));
  }
  const Matrix e = rng.normal_matrix(t_len, 12);
  HeadParams h = random_head(12, n_a, rng, 0.3);
  h.lambda = lambda;
  const Matrix delta = mesa_forward(e, {h}).delta;
  const auto pr = project(e, h);
  double d_err = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    const Matrix phi = ridge_regressor(transpose(slice_rows(pr.k, 0, t + 1)),
                                       transpose(slice_rows(pr.v, 0, t + 1)), lambda);
    const Matrix pred = transpose(matmul(h.p, matmul(phi, row_as_column(pr.q, t))));
    d_err = std::max(d_err, relative_error(slice_rows(delta, t, 1), pred));
  }
  const double secs = seconds_since(t0);
  return {r_err <= 1e-7 && d_err <= 1e-7 && secs <= 10.0,
          "R_t rel_err=" + fmt(r_err) + " delta rel_err=" + fmt(d_err) + " (tol 1e-7) time=" + fmt(secs) +
              "s (limit 10s)"};
}

// Heap bytes allocated above the entry level while the backward pass runs.
long long backward_working_memory(std::size_t t_len, Rng& rng) {
  const std::size_t n = 6, m = 4;
  const Matrix k = rng.normal_matrix(t_len, n), q = rng.normal_matrix(t_len, n);
  const Matrix v = rng.normal_matrix(t_len, m), dy = rng.normal_matrix(t_len, m);
  const Matrix g = gammas_between(t_len, 0.95, rng);
  const auto fwd = mesa_head_forward(k, q, v, g, 1.0);
  MesaHeadGrads out;
  out.reset(t_len, n, m);
  const long long base = alloc_stats::live.load();
  alloc_stats::peak.store(base);
  mesa_head_backward(k, q, v, g, 1.0, fwd.r_final, dy, out);
  return alloc_stats::peak.load() - base;
}

Outcome custom_backward() {
  Rng rng = acc_rng(3);
  double tape_err = 0.0, fd_err = 0.0;
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t t_len = 6 + inst, n = 4, m = 3;
    const Matrix k = rng.normal_matrix(t_len, n), q = rng.normal_matrix(t_len, n);
    const Matrix v = rng.normal_matrix(t_len, m), dy = rng.normal_matrix(t_len, m);
    const Matrix g = inst % 2 ? gammas_between(t_len, 0.85, rng) : ones_gammas(t_len);
    const double lambda = 0.5 + rng.uniform();
    const auto fwd = mesa_head_forward(k, q, v, g, lambda);
    MesaHeadGrads out;
    out.reset(t_len, n, m);
    mesa_head_backward(k, q, v, g, lambda, fwd.r_final, dy, out);
    Tape tape;
    const Var kv = tape.leaf(k, "k"), qv = tape.leaf(q, "q"), vv = tape.leaf(v, "v");
    const Var gv = tape.leaf(g, "g"), lv = tape.leaf(Matrix(1, 1, lambda), "l");
    const GradMap ref = tape.backward(mesa_head_unrolled(tape, kv, qv, vv, gv, lv, dy));
    tape_err = std::max({tape_err, max_abs_diff(out.dk, ref.at("k")), max_abs_diff(out.dq, ref.at("q")),
                         max_abs_diff(out.dv, ref.at("v")), max_abs_diff(out.dgamma, ref.at("g")),
                         std::abs(out.dlambda - ref.at("l")[0])});
    const ScalarGraph f = [&](Tape& tp, const std::vector<Var>& x) {
      return ad::sum(ad::mul(ad::mesa_head(x[0], x[1], x[2], x[3], x[4]), tp.constant(dy)));
    };
    fd_err = std::max(fd_err, finite_diff_check(f, {k, q, v, g, Matrix(1, 1, lambda)}, 1e-5, 1e-6));
  }
  std::vector<long long> mem;
  for (std::size_t t_len : {50, 200, 800}) mem.push_back(backward_working_memory(t_len, rng));
  const bool flat = mem[0] == mem[1] && mem[1] == mem[2];
  return {tape_err <= 1e-9 && fd_err <= 1e-4 && flat,
          "tape max_err=" + fmt(tape_err) + " (tol 1e-9) fd rel_err=" + fmt(fd_err) +
              " (tol 1e-4) backward heap bytes at T=50/200/800: " + std::to_string(mem[0]) + "/" +
              std::to_string(mem[1]) + "/" + std::to_string(mem[2])};
}

Outcome ift_crosscheck() {
  Rng rng = acc_rng(4);
  double worst = 0.0;
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t t_len = 8 + inst;
    const Matrix g = inst % 2 ? gammas_between(t_len, 0.9, rng) : ones_gammas(t_len);
    worst = std::max(worst, mesa_ifth_gradient_check(rng.normal_matrix(t_len, 4), rng.normal_matrix(t_len, 4),
                                                     rng.normal_matrix(t_len, 3), g, 0.5 + rng.uniform(),
                                                     rng.normal_matrix(t_len, 3)));
  }
  return {worst <= 1e-8, "max_err=" + fmt(worst) + " (tol 1e-8)"};
}

Outcome neumann_convergence() {
  Rng rng = acc_rng(5);
  const Matrix e = rng.normal_matrix(50, 6);
  const std::vector<HeadParams> heads = {random_head(6, 4, rng, 0.05), random_head(6, 4, rng, 0.05)};
  const Matrix exact = mesa_forward(e, heads).delta;
  std::string trail;
  double prev = std::numeric_limits<double>::infinity();
  bool decreasing = true;
  for (int k : {2, 4, 8, 16, 32}) {
    const double err = relative_error(mesa_forward_neumann(e, heads, k), exact);
    decreasing = decreasing && err < prev;
    prev = err;
    trail += (trail.empty() ? "" : " ") + fmt(err);
  }
  return {decreasing && prev <= 1e-3,
          "rel_err K=2..32: " + trail + (decreasing ? " (strictly decreasing)" : " (NOT decreasing)") +
              " final tol 1e-3"};
}

Outcome lambda_degeneration() {
  Rng rng = acc_rng(6);
  const Matrix e = rng.normal_matrix(30, 8);
  std::vector<HeadParams> heads = {random_head(8, 4, rng, 0.3), random_head(8, 4, rng, 0.3)};
  for (auto& h : heads) h.lambda = 1e-8;
  const double err = relative_error(mesa_forward(e, heads).delta * 1e8, linear_attention(e, heads));
  return {err <= 1e-4, "rel_err=" + fmt(err) + " (tol 1e-4)"};
}

// ---------------------------------------------------------------------------

double sum_range(const std::vector<double>& c, std::size_t lo, std::size_t hi) {
  double s = 0.0;
  for (std::size_t t = lo; t < hi; ++t) s += c[t];
  return s;
}

// Per-t loss of one GD step from Phi = 0 with step eta.
std::vector<double> gd_curve(const std::vector<Matrix>& seqs, double eta) {
  std::vector<double> c(seqs[0].rows() - 1, 0.0);
  for (const auto& s : seqs) {
    const Matrix keys = shifted_keys(s);
    Matrix acc(s.cols(), s.cols());
    for (std::size_t t = 0; t + 1 < s.rows(); ++t) {
      acc += matmul_nt(row_as_column(s, t), row_as_column(keys, t));
      const Matrix y = matmul(acc, row_as_column(s, t)) * eta;
      double d = 0.0;
      for (std::size_t j = 0; j < s.cols(); ++j) d += std::pow(s(t + 1, j) - y[j], 2);
      c[t] += 0.5 * d / static_cast<double>(seqs.size());
    }
  }
  return c;
}

double line_search_gd(const std::vector<Matrix>& seqs) {
  double best_eta = 0.0, best = std::numeric_limits<double>::infinity();
  for (double eta : log_grid(1e-4, 1.0, 81)) {
    const double v = sum_range(gd_curve(seqs, eta), 0, seqs[0].rows() - 1);
    if (v < best) {
      best = v;
      best_eta = eta;
    }
  }
  return best_eta;
}

Outcome linear_1layer_vs_gd() {
  const auto t0 = Clock::now();
  TrainConfig tc;
  tc.task = linear_task(10, 50);
  tc.encoding.kind = EncodingKind::kConstructed4;
  tc.arch.layers = {AttentionKind::kLinear};
  tc.arch.heads = 2;
  tc.arch.key_size = 20;
  tc.arch.value_size = 20;
  tc.arch.token_dim = 40;
  tc.arch.readout_dim = 10;
  tc.arch.readout = Readout::kFirstDims;
  tc.steps = 10000;
  tc.batch_size = 64;
  tc.peak_lr = 1e-3;
  tc.warmup_steps = 500;
  tc.cosine_steps = tc.steps;
  tc.weight_decay = 0.0;
  tc.eval_every = 1000;
  tc.eval_batch = 256;
  const auto res = train_loop(tc);
  const auto eval = eval_batch(tc);
  const double trained = eval_loss(res.state.params, tc.arch, tc.encoding, eval);

  Rng tune_rng(7, stream_id(StreamPurpose::kTuning, 0));
  const double eta = line_search_gd(gen_sequences(tc.task, 256, tune_rng).observations);
  const double gd = sum_range(gd_curve(eval, eta), 0, 49);

  // Construction endpoint fitted to the trained heads: block-diagonal means
  // of each head's products, expanded back to identity blocks.
  const auto [fit_cfg, fit_params] = compressed_model(compress_algorithm(res.state.params, tc.arch, 10), tc.arch);
  const double fit = eval_loss(fit_params, fit_cfg, tc.encoding, eval);
  const auto [mid_cfg, mid_params] = interpolate_products(res.state.params, tc.arch, fit_params, fit_cfg, 0.5);
  const double mid = eval_loss(mid_params, mid_cfg, tc.encoding, eval);

  const double r1 = trained / gd, r2 = mid / trained, r3 = mid / fit;
  const double secs = seconds_since(t0);
  return {std::abs(r1 - 1.0) <= 0.05 && std::abs(r2 - 1.0) <= 0.05 &&
              std::abs(r3 - 1.0) <= 0.05 && secs <= 900.0,
          "trained=" + fmt(trained) + " gd(eta=" + fmt(eta) + ")=" + fmt(gd) + " ratio=" + fmt(r1) +
              "; fitted construction=" + fmt(fit) + " interpolated(w=0.5)=" + fmt(mid) + " ratio to trained=" + fmt(r2) +
              " to fitted=" + fmt(r3) + " (tol 5%) time=" + fmt(secs) +
              "s (limit 900s)"};
}

// ---------------------------------------------------------------------------
// Six-layer linear stack against the tuned Chebyshev + GD pipeline.

constexpr std::size_t kStackSteps = 3000;
constexpr std::size_t kStackBatch = 32;

// g_t = sum_{t'<=t} s_t' s_{t'-1}^T x_t with x from chebyshev_solve; the
// pipeline prediction is eta g_t.
std::vector<Matrix> pipeline_directions(const std::vector<Matrix>& seqs, const IterationParams& p) {
  std::vector<Matrix> out;
  for (const auto& s : seqs) {
    const Matrix keys = shifted_keys(s);
    const Matrix x = chebyshev_solve(keys, s, p);
    Matrix acc(s.cols(), s.cols()), g(s.rows(), s.cols());
    for (std::size_t t = 0; t < s.rows(); ++t) {
      acc += matmul_nt(row_as_column(s, t), row_as_column(keys, t));
      const Matrix y = matmul(acc, row_as_column(x, t));
      for (std::size_t j = 0; j < s.cols(); ++j) g(t, j) = y[j];
    }
    out.push_back(g);
  }
  return out;
}

double optimal_eta(const std::vector<Matrix>& seqs, const std::vector<Matrix>& g) {
  double num = 0.0, den = 0.0;
  for (std::size_t b = 0; b < seqs.size(); ++b)
    for (std::size_t t = 0; t + 1 < seqs[b].rows(); ++t)
      for (std::size_t j = 0; j < seqs[b].cols(); ++j) {
        num += seqs[b](t + 1, j) * g[b](t, j);
        den += g[b](t, j) * g[b](t, j);
      }
  return num / den;
}

std::vector<double> pipeline_curve(const std::vector<Matrix>& seqs, const std::vector<Matrix>& g, double eta) {
  std::vector<double> c(seqs[0].rows() - 1, 0.0);
  for (std::size_t b = 0; b < seqs.size(); ++b)
    for (std::size_t t = 0; t + 1 < seqs[b].rows(); ++t) {
      double d = 0.0;
      for (std::size_t j = 0; j < seqs[b].cols(); ++j) d += std::pow(seqs[b](t + 1, j) - eta * g[b](t, j), 2);
      c[t] += 0.5 * d / static_cast<double>(seqs.size());
    }
  return c;
}

double pipeline_objective(const std::vector<Matrix>& seqs, const IterationParams& p, double* eta_out) {
  try {
    const auto g = pipeline_directions(seqs, p);
    const double eta = optimal_eta(seqs, g);
    if (eta_out) *eta_out = eta;
    const auto c = pipeline_curve(seqs, g, eta);
    const double v = sum_range(c, 0, c.size());
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  } catch (const Error&) {
    return std::numeric_limits<double>::infinity();
  }
}

// Grid over Chebyshev schedules, then coordinate refinement of every
// alpha, beta and lambda; eta is solved in closed form.
IterationParams tune_pipeline(const std::vector<Matrix>& seqs) {
  IterationParams best;
  double best_v = std::numeric_limits<double>::infinity();
  for (double lambda : log_grid(0.1, 100.0, 7))
    for (double lo : log_grid(1e-3, 0.5, 10))
      for (double hi : {0.5, 1.0, 1.5}) {
        if (lo >= hi) continue;
        const IterationParams p = chebyshev_schedule(6, lo, hi, lambda);
        const double v = pipeline_objective(seqs, p, nullptr);
        if (v < best_v) {
          best_v = v;
          best = p;
        }
      }
  double step = 0.2;
  for (int round = 0; round < 6; ++round) {
    bool improved = false;
    for (std::size_t i = 0; i < 13; ++i)
      for (double sgn : {-1.0, 1.0}) {
        IterationParams p = best;
        if (i < 6) {
          p.alphas[i] *= std::exp(sgn * step);
        } else if (i < 12) {
          p.betas[i - 6] += sgn * step * 0.2;
        } else {
          p.lambda *= std::exp(sgn * step);
        }
        const double v = pipeline_objective(seqs, p, nullptr);
        if (v < best_v) {
          best_v = v;
          best = p;
          improved = true;
        }
      }
    if (!improved) step *= 0.5;
  }
  return best;
}

Outcome linear_6layer_vs_pipeline() {
  TrainConfig tc;
  tc.task = linear_task(10, 50);
  tc.encoding.kind = EncodingKind::kConstructed4;
  auto& a = tc.arch;
  a.layers.assign(6, AttentionKind::kLinear);
  a.heads = 4;
  a.key_size = 20;
  a.value_size = 20;
  a.token_dim = 40;
  a.readout_dim = 10;
  a.readout = Readout::kFirstDims;
  a.activation_clip = 4.0;
  a.init_std = std::sqrt(0.0002);
  tc.steps = kStackSteps;
  tc.batch_size = kStackBatch;
  tc.peak_lr = 1e-3;
  tc.warmup_steps = 500;
  tc.cosine_steps = tc.steps;
  tc.weight_decay = 0.1;
  tc.eval_every = 1000;
  tc.eval_batch = 256;
  const auto res = train_loop(tc);
  const auto eval = eval_batch(tc);
  const auto trained = eval_loss_curve(res.state.params, a, tc.encoding, eval);

  Rng tune_rng(8, stream_id(StreamPurpose::kTuning, 0));
  const auto tune = gen_sequences(tc.task, 256, tune_rng).observations;
  const auto gd = gd_curve(eval, line_search_gd(tune));
  const IterationParams p = tune_pipeline(tune);
  double eta = 0.0;
  pipeline_objective(tune, p, &eta);
  const auto pipe = pipeline_curve(eval, pipeline_directions(eval, p), eta);

  // Curve index i predicts s_{i+2} from the prefix of length i + 1.
  double worst = 0.0;
  std::size_t worst_t = 0;
  bool below = true;
  std::ostringstream samples;
  for (std::size_t t = 10; t < 50; ++t) {
    const std::size_t i = t - 1;
    const double rel = std::abs(pipe[i] - trained[i]) / trained[i];
    if (rel > worst) {
      worst = rel;
      worst_t = t;
    }
    if (t >= 20 && !(trained[i] < gd[i] && pipe[i] < gd[i])) below = false;
    if (t % 10 == 0) samples << " t=" << t << ":" << fmt(trained[i]) << "/" << fmt(pipe[i]) << "/" << fmt(gd[i]);
  }
  return {worst <= 0.10 && below,
          "max rel gap trained vs pipeline over t in [10,49]=" + fmt(worst) + " at t=" + std::to_string(worst_t) +
              " (tol 0.10); both below GD for t>=20: " + (below ? "yes" : "no") +
              "; trained/pipeline/gd:" + samples.str() + "; steps=" + std::to_string(kStackSteps)};
}

// ---------------------------------------------------------------------------

struct KernelRatio {
  double lsq = 0.0, kernel = 0.0;
  double ratio() const { return kernel / lsq; }
};

KernelRatio kernel_vs_lsq(std::size_t n_s, double sigma) {
  const GeneratorSpec g = linear_task(n_s, 4 * n_s, sigma);
  Rng tune_rng(9, stream_id(StreamPurpose::kTuning, n_s));
  const auto held = gen_sequences(g, 128, tune_rng).observations;
  Rng eval_rng(9, stream_id(StreamPurpose::kEvalData, n_s));
  const auto eval = gen_sequences(g, 512, eval_rng).observations;
  const auto grid = log_grid(1e-3, 1e7, 41);
  const double lambda = tune_lsq_lambda(held, grid).value;
  const double beta = tune_kernel_beta(held, grid).value;
  return {batch_mean_loss(eval, [&](const Matrix& s) { return lsq_autoregressive(s, lambda); }),
          batch_mean_loss(eval, [&](const Matrix& s) { return softmax_kernel_predictor(s, beta); })};
}

Outcome curse_of_dimensionality() {
  std::vector<double> ratios, noisy;
  for (std::size_t n : {4, 10, 20}) {
    ratios.push_back(kernel_vs_lsq(n, GeneratorSpec{}.sigma_h).ratio());
    noisy.push_back(kernel_vs_lsq(n, 0.1).ratio());
  }
  const bool increasing = ratios[0] < ratios[1] && ratios[1] < ratios[2];
  return {increasing, "kernel/lsq ratio at n_s=4,10,20 (sigma_h=0.01): " + fmt(ratios[0]) + ", " + fmt(ratios[1]) +
                          ", " + fmt(ratios[2]) + "; at sigma_h=0.1: " + fmt(noisy[0]) + ", " + fmt(noisy[1]) +
                          ", " + fmt(noisy[2])};
}

// ---------------------------------------------------------------------------
// Token binding in the first layer of a softmax model on raw tokens.

constexpr std::size_t kBindingStepsFull = 1000;
constexpr std::size_t kBindingStepsPartial = 4000;

TrainConfig softmax_raw(const GeneratorSpec& task, std::size_t steps) {
  TrainConfig tc;
  tc.task = task;
  auto& a = tc.arch;
  a.layers.assign(3, AttentionKind::kSoftmax);
  a.heads = 4;
  a.key_size = 16;
  a.value_size = 16;
  a.token_dim = task.n_s;
  a.embed_dim = 40;
  a.use_mlp = true;
  a.mlp_hidden = 160;
  a.use_layernorm = true;
  a.positional = Positional::kFirstLayerConcat;
  a.pos_dim = 40;
  a.readout = Readout::kOutputEmbedding;
  a.readout_dim = task.n_s;
  a.init_std = 0.05;
  tc.steps = steps;
  tc.batch_size = 32;
  tc.peak_lr = 3e-3;
  tc.warmup_steps = 200;
  tc.cosine_steps = steps;
  tc.weight_decay = 0.05;
  tc.eval_every = steps;
  tc.eval_batch = 128;
  return tc;
}

std::vector<double> first_layer_lags(const TrainConfig& tc, const ParamMap& params) {
  Rng rng(10, stream_id(StreamPurpose::kProbe, tc.task.n_s));
  const auto seqs = gen_sequences(tc.task, 1024, rng).observations;
  return token_probe(params, tc.arch, tc.encoding, seqs, 1, 20, {0, 1, 2, 3}).mse[0];
}

Outcome token_binding() {
  const TrainConfig full = softmax_raw(linear_task(10, 50), kBindingStepsFull);
  const auto lf = first_layer_lags(full, train_loop(full).state.params);
  const bool a_ok = lf[1] * 5.0 <= lf[2];

  GeneratorSpec po;
  po.kind = GeneratorKind::kPartiallyObservedLinear;
  po.n_h = 15;
  po.n_s = 5;
  po.T = 50;
  const TrainConfig part = softmax_raw(po, kBindingStepsPartial);
  const auto control = first_layer_lags(part, init_train_state(part).params);
  const auto lp = first_layer_lags(part, train_loop(part).state.params);
  const bool b_ok = lp[3] <= 0.5 * control[3];
  return {a_ok && b_ok,
          "fully observed lag1/lag2 MSE=" + fmt(lf[1]) + "/" + fmt(lf[2]) + " (need lag2 >= 5x lag1: " +
              (a_ok ? "yes" : "no") + "); partially observed lag3 MSE=" + fmt(lp[3]) + " vs untrained " +
              fmt(control[3]) + " (need <= 0.5x: " + (b_ok ? "yes" : "no") + "); lags 0-3 trained: " +
              fmt(lp[0]) + " " + fmt(lp[1]) + " " + fmt(lp[2]) + " " + fmt(lp[3])};
}

// ---------------------------------------------------------------------------

Outcome partial_observability_oracle() {
  Rng rng = acc_rng(11);
  GeneratorSpec g;
  g.kind = GeneratorKind::kPartiallyObservedLinear;
  g.n_h = 15;
  g.n_s = 5;
  g.T = 20;
  g.sigma_h = 0.0;
  const auto b = gen_sequences(g, 8, rng);
  double pred_err = 0.0, state_err = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    for (std::size_t k : {3, 4}) {
      const auto p = phi_k_optimal(b.teachers[i].w, b.teachers[i].c, k);
      for (std::size_t t = k - 1; t + 1 < g.T; ++t) {
        pred_err = std::max(pred_err, frobenius_norm(concat_window(b.observations[i], t + 1, k) -
                                                     matmul(p.phi, concat_window(b.observations[i], t, k))));
      }
    }
    const Matrix u = mle_state_map(b.teachers[i].w, b.teachers[i].c, 3, 1e-4, 1e-4);
    for (std::size_t t = 2; t < g.T; ++t) {
      state_err = std::max(state_err, max_abs_diff(matmul(u, concat_window(b.observations[i], t, 3)),
                                                   row_as_column(b.states[i], t)));
    }
  }
  return {pred_err <= 1e-7 && state_err <= 1e-6,
          "phi_k prediction err=" + fmt(pred_err) + " (tol 1e-7) MLE state err=" + fmt(state_err) + " (tol 1e-6)"};
}

Outcome early_ascent_control() {
  Rng rng(12, stream_id(StreamPurpose::kIcl, 0));
  const auto tasks = gen_icl_tasks(10, 20, 256, rng);
  const auto ea = early_ascent(lsq_icl_curve(tasks, 1.0, true));
  const bool clean = strictly_decreasing(lsq_icl_curve(tasks, 1.0, false));
  return {ea.ascent && ea.net_learning && clean,
          "spurious L2=" + fmt(ea.l2) + " max L2..L6=" + fmt(ea.peak) + " L_N=" + fmt(ea.last) +
              "; clean curve strictly decreasing: " + (clean ? "yes" : "no")};
}

Outcome train_determinism() {
  ExperimentConfig c;
  c.name = "determinism";
  c.seeds = {3};
  c.train.task = linear_task(4, 16);
  auto& a = c.train.arch;
  a.layers = {AttentionKind::kSoftmax, AttentionKind::kMesa};
  a.heads = 2;
  a.key_size = 4;
  a.value_size = 4;
  a.token_dim = 4;
  a.embed_dim = 8;
  a.use_mlp = true;
  a.mlp_hidden = 16;
  a.use_layernorm = true;
  a.positional = Positional::kFirstLayerConcat;
  a.pos_dim = 8;
  a.readout = Readout::kOutputEmbedding;
  a.readout_dim = 4;
  c.train.steps = 30;
  c.train.batch_size = 8;
  c.train.warmup_steps = 5;
  c.train.cosine_steps = 30;
  c.train.eval_every = 10;
  c.train.eval_batch = 16;
  const fs::path root = fs::temp_directory_path() / "mesa_acceptance_determinism";
  fs::remove_all(root);
  std::streambuf* old = std::cout.rdbuf(nullptr);
  const int r1 = cmd_train(c, root / "a");
  const int r2 = cmd_train(c, root / "b");
  std::cout.rdbuf(old);
  const std::string m1 = read_file(root / "a" / "seed_3" / "metrics.csv");
  const std::string m2 = read_file(root / "b" / "seed_3" / "metrics.csv");
  const bool same = r1 == 0 && r2 == 0 && m1 == m2;
  return {same, std::string("metrics.csv ") + (m1 == m2 ? "byte-identical" : "DIFFER") + " (" +
                    std::to_string(m1.size()) + " bytes)"};
}

Outcome verify_all() {
  const auto t0 = Clock::now();
  const std::string out = (fs::temp_directory_path() / "mesa_acceptance_verify").string();
  const std::string cmd = std::string(MESA_CLI_PATH) + " verify all --out " + out + " > /dev/null";
  const int status = std::system(cmd.c_str());
  const double secs = seconds_since(t0);
  const bool ok = status == 0;
  return {ok && secs <= 120.0, std::string("exit ") + (ok ? "0" : "nonzero") + " time=" + fmt(secs) + "s (limit 120s)"};
}

}  // namespace

int main(int argc, char** argv) {
  bool strict = false;
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--strict") {
      strict = true;
    } else {
      only.insert(std::stoul(a));
    }
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"prop1_exactness", prop1_exactness},
      {"mesa_correctness", mesa_correctness},
      {"custom_backward", custom_backward},
      {"ift_crosscheck", ift_crosscheck},
      {"neumann_convergence", neumann_convergence},
      {"lambda_degeneration", lambda_degeneration},
      {"linear_1layer_vs_gd", linear_1layer_vs_gd},
      {"linear_6layer_vs_pipeline", linear_6layer_vs_pipeline},
      {"curse_of_dimensionality", curse_of_dimensionality},
      {"token_binding_probe", token_binding},
      {"partial_observability_oracle", partial_observability_oracle},
      {"early_ascent", early_ascent_control},
      {"train_determinism", train_determinism},
      {"verify_all", verify_all},
  };
  std::ofstream report("acceptance_results.txt");
  int passed = 0, crashed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    ++ran;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
      ++crashed;
    }
    passed += o.passed;
    std::ostringstream line;
    line << (o.passed ? "[PASS] " : "[FAIL] ") << i + 1 << " " << criteria[i].first << ": " << o.detail << " ["
         << fmt(seconds_since(t0)) << "s]";
    std::cout << line.str() << std::endl;
    report << line.str() << std::endl;
  }
  std::cout << passed << "/" << ran << " criteria passed" << std::endl;
  report << passed << "/" << ran << " criteria passed" << std::endl;
  if (crashed > 0) return 2;
  return strict && passed != ran ? 1 : 0;
}
