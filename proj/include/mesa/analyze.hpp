#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mesa/train.hpp"

namespace mesa {

// ---------------------------------------------------------------------------
// Linear probes.

inline constexpr double kProbeRidge = 1e-6;

struct ProbeFit {
  Matrix decoder;  // m x d
  double test_mse = 0.0;
  double train_mse = 0.0;
  std::size_t n_train = 0, n_test = 0;
};

inline std::vector<std::size_t> seeded_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next_u64() % i]);
  return idx;
}

// Mean squared error per target entry.
inline double probe_mse(const Matrix& x, const Matrix& y, const Matrix& decoder) {
  const Matrix r = y - matmul_nt(x, decoder);
  const double f = frobenius_norm(r);
  return f * f / static_cast<double>(std::max<std::size_t>(r.size(), 1));
}

// Ridge decoder y ~ D x fit on a seeded 80% split, scored on the rest.
inline ProbeFit fit_linear_probe(const Matrix& activations, const Matrix& targets,
                                 double reg = kProbeRidge, std::uint64_t seed = 0) {
  if (activations.rows() != targets.rows()) throw ShapeMismatch("probe batch sizes differ");
  if (!(reg >= 0.0)) throw InvalidSpec("probe regularizer must be >= 0");
  const std::size_t n = activations.rows(), d = activations.cols(), m = targets.cols();
  if (n < 5) throw InvalidSpec("probe needs at least 5 samples");
  Rng rng(seed, stream_id(StreamPurpose::kProbe, 0));
  const auto perm = seeded_permutation(n, rng);
  const std::size_t n_train = (4 * n) / 5;
  if (n_train < d && reg == 0.0) throw InvalidSpec("probe batch smaller than dim needs reg > 0");
  Matrix xtr(n_train, d), ytr(n_train, m), xte(n - n_train, d), yte(n - n_train, m);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix& xo = i < n_train ? xtr : xte;
    Matrix& yo = i < n_train ? ytr : yte;
    const std::size_t r = i < n_train ? i : i - n_train;
    for (std::size_t j = 0; j < d; ++j) xo(r, j) = activations(perm[i], j);
    for (std::size_t j = 0; j < m; ++j) yo(r, j) = targets(perm[i], j);
  }
  Matrix gram = matmul_tn(xtr, xtr);
  for (std::size_t i = 0; i < d; ++i) gram(i, i) += reg;
  ProbeFit f;
  if (max_abs(gram) == 0.0) {
    f.decoder = Matrix(m, d);
  } else {
    f.decoder = transpose(solve_spd(gram, matmul_tn(xtr, ytr)));
  }
  f.n_train = n_train;
  f.n_test = n - n_train;
  f.train_mse = probe_mse(xtr, ytr, f.decoder);
  f.test_mse = probe_mse(xte, yte, f.decoder);
  return f;
}

enum class ProbeKind { kToken, kTarget, kPrecond };

inline const char* probe_kind_name(ProbeKind k) {
  switch (k) {
    case ProbeKind::kToken: return "token";
    case ProbeKind::kTarget: return "target";
    case ProbeKind::kPrecond: return "precond";
  }
  return "unknown";
}

// mse[i][j]: layer layers[i], timestep or lag index[j]. For precond probes
// `alt_mse` holds the Chebyshev-target grid and `target_gap` the max
// discrepancy between the two targets per cell.
struct ProbeReport {
  ProbeKind kind = ProbeKind::kToken;
  std::vector<std::size_t> layers;
  std::vector<std::size_t> index;
  std::vector<std::vector<double>> mse;
  std::vector<std::vector<double>> alt_mse;
  std::vector<std::vector<double>> target_gap;
  double reg = kProbeRidge;
  std::size_t batch = 0;
};

// Residual streams per sequence: entry 0 is the (embedded) input, entry l the
// output of block l.
inline std::vector<std::vector<Matrix>> collect_streams(const ParamMap& params,
                                                        const TransformerConfig& cfg,
                                                        const TokenEncoding& enc,
                                                        const std::vector<Matrix>& seqs) {
  std::vector<std::vector<Matrix>> out;
  for (const Matrix& seq : seqs) {
    const Matrix tokens = encode_tokens(seq, enc);
    auto fr = model_forward(params, cfg, tokens);
    std::vector<Matrix> s;
    s.push_back(cfg.embedded() ? matmul_nt(tokens, params.at("embed.W_in")) : tokens);
    for (auto& l : fr.trace.layer_outputs) s.push_back(std::move(l));
    out.push_back(std::move(s));
  }
  return out;
}

inline Matrix gather_rows(const std::vector<Matrix>& per_seq, std::size_t t) {
  Matrix out(per_seq.size(), per_seq.front().cols());
  for (std::size_t b = 0; b < per_seq.size(); ++b)
    for (std::size_t j = 0; j < out.cols(); ++j) out(b, j) = per_seq[b](t, j);
  return out;
}

inline std::vector<Matrix> stream_at(const std::vector<std::vector<Matrix>>& streams,
                                     std::size_t layer) {
  if (streams.empty() || layer >= streams.front().size()) {
    throw InvalidSpec("probe layer " + std::to_string(layer) + " out of range");
  }
  std::vector<Matrix> out;
  for (const auto& s : streams) out.push_back(s[layer]);
  return out;
}

// Decodes the input token at t - lag from the layer's stream at t.
inline ProbeReport token_probe(const ParamMap& params, const TransformerConfig& cfg,
                               const TokenEncoding& enc, const std::vector<Matrix>& seqs,
                               std::size_t layer, std::size_t t,
                               const std::vector<std::size_t>& lags, double reg = kProbeRidge,
                               std::uint64_t seed = 0) {
  const auto streams = collect_streams(params, cfg, enc, seqs);
  const auto acts = gather_rows(stream_at(streams, layer), t);
  std::vector<Matrix> tokens;
  for (const Matrix& s : seqs) tokens.push_back(encode_tokens(s, enc));
  ProbeReport r{ProbeKind::kToken, {layer}, lags, {{}}, {}, {}, reg, seqs.size()};
  for (std::size_t lag : lags) {
    if (lag > t) throw InvalidSpec("lag exceeds timestep");
    r.mse[0].push_back(fit_linear_probe(acts, gather_rows(tokens, t - lag), reg, seed).test_mse);
  }
  return r;
}

// Decodes s_{t+1} from each layer's stream at t.
inline ProbeReport target_probe(const ParamMap& params, const TransformerConfig& cfg,
                                const TokenEncoding& enc, const std::vector<Matrix>& seqs,
                                const std::vector<std::size_t>& layers,
                                const std::vector<std::size_t>& t_grid,
                                double reg = kProbeRidge, std::uint64_t seed = 0) {
  const auto streams = collect_streams(params, cfg, enc, seqs);
  ProbeReport r{ProbeKind::kTarget, layers, t_grid, {}, {}, {}, reg, seqs.size()};
  for (std::size_t l : layers) {
    const auto st = stream_at(streams, l);
    std::vector<double> row;
    for (std::size_t t : t_grid) {
      if (t + 1 >= seqs.front().rows()) throw InvalidSpec("target probe needs t + 1 < T");
      row.push_back(fit_linear_probe(gather_rows(st, t), gather_rows(seqs, t + 1), reg, seed).test_mse);
    }
    r.mse.push_back(std::move(row));
  }
  return r;
}

// Keys for the preconditioning systems: row t is s_{t-1}, row 0 is zero.
inline Matrix shifted_keys(const Matrix& seq) {
  Matrix keys(seq.rows(), seq.cols());
  for (std::size_t t = 1; t < seq.rows(); ++t)
    for (std::size_t j = 0; j < seq.cols(); ++j) keys(t, j) = seq(t - 1, j);
  return keys;
}

// Chebyshev semi-iteration coefficients for spectrum in [lo, hi], written in
// the x + alpha r - beta (x - x_prev) form.
inline IterationParams chebyshev_schedule(std::size_t depth, double lo, double hi, double lambda) {
  if (!(lo > 0.0 && hi > lo)) throw InvalidSpec("chebyshev_schedule needs 0 < lo < hi");
  IterationParams p;
  p.lambda = lambda;
  const double gamma = 2.0 / (hi + lo);
  const double rho = (hi - lo) / (hi + lo);
  double omega = 1.0;
  for (std::size_t k = 0; k < depth; ++k) {
    if (k == 1) omega = 1.0 / (1.0 - 0.5 * rho * rho);
    if (k > 1) omega = 1.0 / (1.0 - 0.25 * rho * rho * omega);
    p.alphas.push_back(omega * gamma);
    p.betas.push_back(1.0 - omega);
  }
  return p;
}

inline constexpr std::size_t kPrecondProbeDepth = 6;
inline constexpr double kPrecondSpectrumFloor = 0.05;

// Targets (S_{t-1} S_{t-1}^T + I/lambda)^{-1} s_t per sequence, exact and
// via the 6-step Chebyshev iteration.
struct PrecondTargets {
  Matrix exact;
  Matrix chebyshev;
};

inline PrecondTargets precond_targets(const Matrix& seq, double lambda) {
  const Matrix keys = shifted_keys(seq);
  return {preconditioned_targets_direct(keys, seq, lambda),
          chebyshev_solve(keys, seq,
                          chebyshev_schedule(kPrecondProbeDepth, kPrecondSpectrumFloor, 1.0, lambda))};
}

inline ProbeReport precond_probe(const ParamMap& params, const TransformerConfig& cfg,
                                 const TokenEncoding& enc, const std::vector<Matrix>& seqs,
                                 const std::vector<std::size_t>& layers,
                                 const std::vector<std::size_t>& t_grid, double lambda,
                                 double reg = kProbeRidge, std::uint64_t seed = 0) {
  const auto streams = collect_streams(params, cfg, enc, seqs);
  std::vector<Matrix> exact, cheb;
  for (const Matrix& s : seqs) {
    auto pt = precond_targets(s, lambda);
    exact.push_back(std::move(pt.exact));
    cheb.push_back(std::move(pt.chebyshev));
  }
  ProbeReport r{ProbeKind::kPrecond, layers, t_grid, {}, {}, {}, reg, seqs.size()};
  for (std::size_t l : layers) {
    const auto st = stream_at(streams, l);
    std::vector<double> row, alt, gap;
    for (std::size_t t : t_grid) {
      const Matrix acts = gather_rows(st, t);
      const Matrix ye = gather_rows(exact, t), yc = gather_rows(cheb, t);
      row.push_back(fit_linear_probe(acts, ye, reg, seed).test_mse);
      alt.push_back(fit_linear_probe(acts, yc, reg, seed).test_mse);
      gap.push_back(max_abs_diff(ye, yc));
    }
    r.mse.push_back(std::move(row));
    r.alt_mse.push_back(std::move(alt));
    r.target_gap.push_back(std::move(gap));
  }
  return r;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidSpec("spearman needs paired samples");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx == 0 || syy == 0 ? 0.0 : sxy / std::sqrt(sxx * syy);
}

// Spearman correlation of (layer index, -MSE) at one probe column.
inline double depth_monotonicity(const ProbeReport& r, std::size_t column) {
  std::vector<double> x, y;
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    x.push_back(static_cast<double>(r.layers[i]));
    y.push_back(-r.mse[i].at(column));
  }
  return spearman(x, y);
}

// ---------------------------------------------------------------------------
// Sensitivity of the first block's output to past inputs.

inline TransformerConfig truncate_layers(const TransformerConfig& cfg, std::size_t n) {
  TransformerConfig c = cfg;
  c.layers.resize(n);
  return c;
}

// The parameters a truncated config needs.
inline ParamMap restrict_params(const ParamMap& params, const TransformerConfig& cfg) {
  ParamMap out;
  for (const auto& [name, shape] : param_shapes(cfg)) out[name] = params.at(name);
  return out;
}

inline ForwardResult forward_first_layers(const ParamMap& params, const TransformerConfig& cfg,
                                          const Matrix& tokens, std::size_t n) {
  const TransformerConfig c = truncate_layers(cfg, n);
  return model_forward(restrict_params(params, c), c, tokens);
}

// Entry t' is || d ||f_t|| / d e_t' || where f is the residual stream after
// the first block and e the input tokens.
inline std::vector<double> sensitivity_norms(const ParamMap& params, const TransformerConfig& cfg,
                                             const Matrix& tokens, std::size_t t) {
  if (t >= tokens.rows()) throw InvalidSpec("sensitivity timestep out of range");
  const TransformerConfig first = truncate_layers(cfg, 1);
  Tape tape;
  const ParamVars vars = register_params(tape, params, false);
  const Var x = tape.leaf(tokens, "tokens", true);
  const Var f = ad::slice_rows(model_forward_tape(tape, vars, first, x).stream, t, 1);
  const double norm = frobenius_norm(f.value());
  std::vector<double> out(tokens.rows(), 0.0);
  if (norm == 0.0) return out;
  // d||f|| = J^T f / ||f||, taken through 1/2 ||f||^2.
  const Var half_sq = ad::scale(ad::squared_error(f, tape.constant(Matrix(1, f.value().cols()))), 1.0 / norm);
  const GradMap g = tape.backward(half_sq);
  const Matrix& gx = g.at("tokens");
  for (std::size_t tp = 0; tp < tokens.rows(); ++tp) {
    double s = 0.0;
    for (std::size_t j = 0; j < gx.cols(); ++j) s += gx(tp, j) * gx(tp, j);
    out[tp] = std::sqrt(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention maps.

// Per-head T x T maps averaged over the batch. Mesa layers export the
// k_t'^T R_t q_t score analog.
inline std::vector<Matrix> export_attention_maps(const ParamMap& params,
                                                 const TransformerConfig& cfg,
                                                 const TokenEncoding& enc,
                                                 const std::vector<Matrix>& seqs,
                                                 std::size_t layer) {
  if (layer >= cfg.layers.size()) throw InvalidSpec("attention map layer out of range");
  if (seqs.empty()) throw InvalidSpec("attention maps need a non-empty batch");
  std::vector<Matrix> avg;
  const double w = 1.0 / static_cast<double>(seqs.size());
  for (const Matrix& seq : seqs) {
    const auto fr = forward_first_layers(params, cfg, encode_tokens(seq, enc), layer + 1);
    const auto& maps = fr.trace.attention_weights[layer];
    if (avg.empty()) avg.assign(maps.size(), Matrix(maps[0].rows(), maps[0].cols()));
    for (std::size_t h = 0; h < maps.size(); ++h) avg[h] += maps[h] * w;
  }
  return avg;
}

// Mean attention mass on the entry directly below the diagonal.
inline double subdiagonal_mass(const Matrix& map) {
  double s = 0.0;
  for (std::size_t t = 1; t < map.rows(); ++t) s += map(t, t - 1);
  return map.rows() > 1 ? s / static_cast<double>(map.rows() - 1) : 0.0;
}

// ---------------------------------------------------------------------------
// Softmax-to-linear distillation.

struct DistillConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct DistillResult {
  std::vector<HeadParams> heads;
  double distill_mse = 0.0;      // held-out, per output entry
  double reference_loss = 0.0;
  double swapped_loss = 0.0;
  double loss_ratio = 0.0;
  TransformerConfig swapped_cfg;
  ParamMap swapped_params;
};

// Attention input (after LN when present) and the layer's attention update.
struct LayerRecord {
  Matrix input;
  Matrix output;
};

inline LayerRecord record_layer(const ParamMap& params, const TransformerConfig& cfg,
                                const Matrix& tokens, std::size_t layer) {
  const auto fr = forward_first_layers(params, cfg, tokens, layer + 1);
  Matrix e = layer == 0 ? (cfg.embedded() ? matmul_nt(tokens, params.at("embed.W_in")) : tokens)
                        : fr.trace.layer_outputs[layer - 1];
  if (cfg.use_layernorm) {
    const std::string lp = layer_prefix(layer);
    Tape tape;
    e = ad::layernorm(tape.constant(e), tape.constant(params.at(lp + "ln1.scale")),
                      tape.constant(params.at(lp + "ln1.offset")))
            .value();
  }
  return {e, fr.trace.attention_outputs[layer]};
}

inline Var linear_layer_tape(Tape& tape, const ParamVars& p, const TransformerConfig& cfg,
                             std::size_t layer, const Matrix& input) {
  const Var x = tape.constant(input);
  const Var mask = tape.constant(causal_mask(input.rows()));
  std::optional<Var> pe;
  if (layer == 0 && cfg.positional == Positional::kFirstLayerConcat && cfg.pos_dim > 0) {
    pe = tape.constant(sinusoidal_table(input.rows(), cfg.pos_dim));
  }
  std::optional<Var> delta;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::string hp = head_prefix(layer, h);
    Var q = ad::matmul_nt(x, p.at(hp + "W_q"));
    Var k = ad::matmul_nt(x, p.at(hp + "W_k"));
    if (cfg.qk_normalize) {
      q = ad::row_l2_normalize(q);
      k = ad::row_l2_normalize(k);
    }
    if (pe) {
      q = ad::concat_cols(q, *pe);
      k = ad::concat_cols(k, *pe);
    }
    const Var y = ad::matmul(ad::mul(ad::matmul_nt(q, k), mask), ad::matmul_nt(x, p.at(hp + "W_v")));
    const Var out = ad::matmul_nt(y, p.at(hp + "P"));
    delta = delta ? ad::add(*delta, out) : out;
  }
  return *delta;
}

// Trains a linear layer to reproduce `layer`'s attention update on recorded
// activations, then swaps it into the model. W_v and P start from the
// reference; W_q and W_k too when the reference layer is already linear.
inline DistillResult distill_linear_layer(const ParamMap& params, const TransformerConfig& cfg,
                                          const TokenEncoding& enc, std::size_t layer,
                                          const std::vector<Matrix>& train_seqs,
                                          const std::vector<Matrix>& eval_seqs,
                                          const DistillConfig& dc = {}) {
  if (layer >= cfg.layers.size()) throw InvalidSpec("distillation layer out of range");
  if (train_seqs.empty() || eval_seqs.empty()) throw InvalidSpec("distillation needs data");
  std::vector<LayerRecord> train, held;
  for (const Matrix& s : train_seqs) train.push_back(record_layer(params, cfg, encode_tokens(s, enc), layer));
  for (const Matrix& s : eval_seqs) held.push_back(record_layer(params, cfg, encode_tokens(s, enc), layer));

  ParamMap student;
  Rng rng(dc.seed, stream_id(StreamPurpose::kDistill, 0));
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::string hp = head_prefix(layer, h);
    for (const char* n : {"W_q", "W_k"}) {
      const Matrix& ref = params.at(hp + n);
      student[hp + n] = cfg.layers[layer] == AttentionKind::kLinear
                            ? ref
                            : rng.normal_matrix(ref.rows(), ref.cols(), cfg.init_std);
    }
    student[hp + "W_v"] = params.at(hp + "W_v");
    student[hp + "P"] = params.at(hp + "P");
  }

  auto batch_loss = [&](Tape& tape, const ParamVars& vars, const std::vector<LayerRecord>& recs,
                        std::size_t begin, std::size_t count) {
    std::optional<Var> total;
    std::size_t entries = 0;
    for (std::size_t i = 0; i < count; ++i) {
      const LayerRecord& r = recs[(begin + i) % recs.size()];
      const Var l = ad::squared_error(linear_layer_tape(tape, vars, cfg, layer, r.input),
                                      tape.constant(r.output));
      entries += r.output.size();
      total = total ? ad::add(*total, l) : l;
    }
    // squared_error is 1/2 sum; report mean squared error per entry.
    return ad::scale(*total, 2.0 / static_cast<double>(entries));
  };

  TrainConfig opt_cfg;
  opt_cfg.weight_decay = 0.0;
  OptimizerState st = init_optimizer(student);
  const std::size_t bs = std::min(dc.batch_size, train.size());
  for (std::size_t step = 0; step < dc.steps; ++step) {
    Tape tape;
    const ParamVars vars = register_params(tape, student, true);
    const Var loss = batch_loss(tape, vars, train, step * bs, bs);
    GradMap g = tape.backward(loss);
    clip_global_norm(g, opt_cfg.grad_clip_norm);
    adamw_step(student, g, st, dc.lr, opt_cfg);
  }

  DistillResult res;
  {
    Tape tape;
    const ParamVars vars = register_params(tape, student, false);
    res.distill_mse = batch_loss(tape, vars, held, 0, held.size()).value()[0];
  }
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::string hp = head_prefix(layer, h);
    res.heads.push_back({student.at(hp + "W_q"), student.at(hp + "W_k"), student.at(hp + "W_v"),
                         student.at(hp + "P"), 1.0});
  }
  res.swapped_cfg = cfg;
  res.swapped_cfg.layers[layer] = AttentionKind::kLinear;
  res.swapped_params = params;
  for (const auto& [name, m] : student) res.swapped_params[name] = m;
  for (std::size_t h = 0; h < cfg.heads; ++h) res.swapped_params.erase(head_prefix(layer, h) + "lambda_raw");
  res.reference_loss = eval_loss(params, cfg, enc, eval_seqs);
  res.swapped_loss = eval_loss(res.swapped_params, res.swapped_cfg, enc, eval_seqs);
  res.loss_ratio = res.swapped_loss / res.reference_loss;
  return res;
}

// ---------------------------------------------------------------------------
// In-context learning.

enum class IclVariant { kPlain, kEos, kEosPrefix };

inline const char* icl_variant_name(IclVariant v) {
  switch (v) {
    case IclVariant::kPlain: return "plain";
    case IclVariant::kEos: return "eos";
    case IclVariant::kEosPrefix: return "eos_prefix";
  }
  return "unknown";
}

inline IclVariant parse_icl_variant(const std::string& s) {
  for (auto v : {IclVariant::kPlain, IclVariant::kEos, IclVariant::kEosPrefix}) {
    if (s == icl_variant_name(v)) return v;
  }
  throw InvalidSpec("unknown icl variant '" + s + "'");
}

struct PromptTokens {
  Matrix eos;     // 1 x n_s, empty for plain
  Matrix prefix;  // kPrefixLength x n_s, empty unless eos_prefix
};

inline void check_prompt(IclVariant v, const PromptTokens& p) {
  if (v != IclVariant::kPlain && p.eos.empty()) {
    throw MissingPromptTokens(std::string("variant ") + icl_variant_name(v) + " needs an EOS token");
  }
  if (v == IclVariant::kEosPrefix && p.prefix.empty()) {
    throw MissingPromptTokens("variant eos_prefix needs prefix tokens");
  }
}

inline Matrix icl_variant_tokens(const IclTask& task, IclVariant v, const PromptTokens& p) {
  return icl_tokens(task, v == IclVariant::kPlain ? nullptr : &p.eos,
                    v == IclVariant::kEosPrefix ? &p.prefix : nullptr);
}

inline std::size_t icl_prefix_len(IclVariant v, const PromptTokens& p) {
  return v == IclVariant::kEosPrefix ? p.prefix.rows() : 0;
}

// L_i = mean over tasks of 1/2 ||y_i - f(x_i)||^2, where f reads the model's
// next-token prediction at the x_i token. Requires raw n_s-dim tokens.
inline std::vector<double> icl_eval(const ParamMap& params, const TransformerConfig& cfg,
                                    const std::vector<IclTask>& tasks, IclVariant variant,
                                    const PromptTokens& prompt = {}) {
  check_prompt(variant, prompt);
  if (tasks.empty()) throw InvalidSpec("icl_eval needs tasks");
  const std::size_t n = tasks.front().x.rows();
  const std::size_t pre = icl_prefix_len(variant, prompt);
  std::vector<double> curve(n, 0.0);
  for (const IclTask& task : tasks) {
    const Matrix pred = model_forward(params, cfg, icl_variant_tokens(task, variant, prompt)).predictions;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = icl_query_position(i, variant != IclVariant::kPlain, pre);
      double d = 0.0;
      for (std::size_t j = 0; j < task.y.cols(); ++j) d += std::pow(task.y(i, j) - pred(row, j), 2);
      curve[i] += 0.5 * d / static_cast<double>(tasks.size());
    }
  }
  return curve;
}

// Two tasks back to back; the curve has 2N entries.
inline std::vector<double> icl_eval_continual(const ParamMap& params, const TransformerConfig& cfg,
                                              const std::vector<IclTask>& first,
                                              const std::vector<IclTask>& second) {
  if (first.size() != second.size() || first.empty()) throw InvalidSpec("task lists must pair up");
  const std::size_t n = first.front().x.rows();
  std::vector<double> curve(2 * n, 0.0);
  for (std::size_t b = 0; b < first.size(); ++b) {
    const Matrix tokens = concat_rows(icl_tokens(first[b]), icl_tokens(second[b]));
    const Matrix pred = model_forward(params, cfg, tokens).predictions;
    for (std::size_t i = 0; i < 2 * n; ++i) {
      const IclTask& task = i < n ? first[b] : second[b];
      const std::size_t r = i % n;
      double d = 0.0;
      for (std::size_t j = 0; j < task.y.cols(); ++j) d += std::pow(task.y(r, j) - pred(2 * i, j), 2);
      curve[i] += 0.5 * d / static_cast<double>(first.size());
    }
  }
  return curve;
}

// Closed-form control: ridge regression over the pairs visible before y_i is
// predicted. With `spurious`, the pairs (y_j, x_{j+1}) formed by consecutive
// tokens are included alongside the correct (x_j, y_j).
inline std::vector<double> lsq_icl_curve(const std::vector<IclTask>& tasks, double lambda,
                                         bool spurious) {
  if (!(lambda > 0.0)) throw NonPositiveLambda("lsq_icl_curve requires lambda > 0");
  if (tasks.empty()) throw InvalidSpec("lsq_icl_curve needs tasks");
  const std::size_t n = tasks.front().x.rows(), d = tasks.front().x.cols();
  std::vector<double> curve(n, 0.0);
  for (const IclTask& task : tasks) {
    Matrix gram = Matrix::identity(d) * (1.0 / lambda);
    Matrix cross(d, d);
    auto add_pair = [&](const double* in, const double* out) {
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) {
          gram(a, b) += in[a] * in[b];
          cross(a, b) += in[a] * out[b];
        }
    };
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0) {
        add_pair(task.x.row(i - 1).data(), task.y.row(i - 1).data());
        if (spurious) add_pair(task.y.row(i - 1).data(), task.x.row(i).data());
      }
      const Matrix pred = matmul_tn(solve_spd(gram, cross), row_as_column(task.x, i));
      double l = 0.0;
      for (std::size_t j = 0; j < d; ++j) l += std::pow(task.y(i, j) - pred[j], 2);
      curve[i] += 0.5 * l / static_cast<double>(tasks.size());
    }
  }
  return curve;
}

// Peak over 1-based positions [2, 6] exceeds L_2 and L_N < L_2.
struct EarlyAscent {
  double l2 = 0.0;
  double peak = 0.0;
  double last = 0.0;
  bool ascent = false;
  bool net_learning = false;
};

inline EarlyAscent early_ascent(const std::vector<double>& curve) {
  if (curve.size() < 6) throw InvalidSpec("early ascent needs at least 6 pairs");
  EarlyAscent e;
  e.l2 = curve[1];
  e.peak = *std::max_element(curve.begin() + 1, curve.begin() + 6);
  e.last = curve.back();
  e.ascent = e.peak > e.l2;
  e.net_learning = e.last < e.l2;
  return e;
}

inline bool strictly_decreasing(const std::vector<double>& v, std::size_t from = 0) {
  for (std::size_t i = from + 1; i < v.size(); ++i) {
    if (!(v[i] < v[i - 1])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Prompt tuning with frozen model weights.

struct PromptTuneConfig {
  IclVariant mode = IclVariant::kEos;
  std::size_t steps = 5000;
  std::size_t batch_size = 256;
  double lr = 1e-2;
  std::size_t n_pairs = 25;
  std::size_t eval_tasks = 256;
  std::uint64_t seed = 0;
};

struct PromptTuneResult {
  PromptTokens tokens;
  std::vector<double> pre_curve;
  std::vector<double> post_curve;
  std::vector<double> loss_log;
};

inline PromptTokens init_prompt(IclVariant mode, std::size_t n_s, Rng& rng) {
  PromptTokens p;
  if (mode == IclVariant::kPlain) throw InvalidSpec("prompt tuning needs eos or eos_prefix mode");
  p.eos = rng.normal_matrix(1, n_s);
  if (mode == IclVariant::kEosPrefix) p.prefix = rng.normal_matrix(kPrefixLength, n_s);
  return p;
}

inline std::vector<IclTask> held_out_icl_tasks(std::size_t n_s, const PromptTuneConfig& pc) {
  Rng rng(pc.seed, stream_id(StreamPurpose::kIcl, 0));
  return gen_icl_tasks(n_s, pc.n_pairs, pc.eval_tasks, rng);
}

// Loss and prompt gradients on one batch; token gradients are summed over
// every position a prompt token occupies.
inline double prompt_loss_and_grad(const ParamMap& params, const TransformerConfig& cfg,
                                   const std::vector<IclTask>& tasks, IclVariant mode,
                                   const PromptTokens& prompt, GradMap& grads) {
  const std::size_t n = tasks.front().x.rows(), d = cfg.token_dim;
  const std::size_t pre = icl_prefix_len(mode, prompt);
  Matrix g_eos(1, d), g_prefix(pre, d);
  double total = 0.0;
  for (const IclTask& task : tasks) {
    Tape tape;
    const ParamVars vars = register_params(tape, params, false);
    const Var x = tape.leaf(icl_variant_tokens(task, mode, prompt), "tokens", true);
    const Var pred = model_forward_tape(tape, vars, cfg, x).predictions;
    Matrix target(pred.value().rows(), d);
    Matrix weight(pred.value().rows(), d);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = icl_query_position(i, true, pre);
      for (std::size_t j = 0; j < d; ++j) {
        target(row, j) = task.y(i, j);
        weight(row, j) = 1.0;
      }
    }
    const Var l = ad::scale(ad::squared_error(ad::mul(pred, tape.constant(weight)), tape.constant(target)),
                            1.0 / static_cast<double>(tasks.size() * n));
    total += l.value()[0];
    const Matrix gx = tape.backward(l).at("tokens");
    for (std::size_t i = 0; i < pre; ++i)
      for (std::size_t j = 0; j < d; ++j) g_prefix(i, j) += gx(i, j);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const std::size_t row = pre + 3 * i + 2;
      for (std::size_t j = 0; j < d; ++j) g_eos[j] += gx(row, j);
    }
  }
  grads.clear();
  grads["eos"] = g_eos;
  if (pre) grads["prefix"] = g_prefix;
  return total;
}

inline PromptTuneResult tune_prompt_tokens(const ParamMap& params, const TransformerConfig& cfg,
                                           const PromptTuneConfig& pc) {
  check_params(params, cfg);
  const std::size_t n_s = cfg.token_dim;
  Rng init_rng(pc.seed, stream_id(StreamPurpose::kPrompt, 0));
  PromptTuneResult res;
  res.tokens = init_prompt(pc.mode, n_s, init_rng);
  const auto held = held_out_icl_tasks(n_s, pc);
  res.pre_curve = icl_eval(params, cfg, held, pc.mode, res.tokens);

  ParamMap trainable{{"eos", res.tokens.eos}};
  if (pc.mode == IclVariant::kEosPrefix) trainable["prefix"] = res.tokens.prefix;
  TrainConfig opt_cfg;
  opt_cfg.weight_decay = 0.0;
  OptimizerState st = init_optimizer(trainable);
  GradMap g;
  for (std::size_t step = 0; step < pc.steps; ++step) {
    Rng rng(pc.seed, stream_id(StreamPurpose::kPrompt, step + 1));
    const auto tasks = gen_icl_tasks(n_s, pc.n_pairs, pc.batch_size, rng);
    PromptTokens cur{trainable.at("eos"),
                     pc.mode == IclVariant::kEosPrefix ? trainable.at("prefix") : Matrix()};
    res.loss_log.push_back(prompt_loss_and_grad(params, cfg, tasks, pc.mode, cur, g));
    adamw_step(trainable, g, st, pc.lr, opt_cfg);
  }
  res.tokens.eos = trainable.at("eos");
  if (pc.mode == IclVariant::kEosPrefix) res.tokens.prefix = trainable.at("prefix");
  res.post_curve = icl_eval(params, cfg, held, pc.mode, res.tokens);
  return res;
}

}  // namespace mesa
