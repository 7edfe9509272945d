#pragma once

#include <utility>
#include <vector>

#include "mesa/attention.hpp"
#include "mesa/linalg.hpp"
#include "mesa/model.hpp"
#include "mesa/seqgen.hpp"

namespace mesa {

enum class TokenChannels { kThree = 3, kFour = 4 };

struct ConstructedTokenSpec {
  TokenChannels channels = TokenChannels::kThree;
  std::size_t n_s = 0;

  std::size_t count() const { return static_cast<std::size_t>(channels); }
  std::size_t token_dim() const { return count() * n_s; }
};

// Three channels: [Phi0 s_t, s_t, s_{t-1}]; four: [Phi0 s_t, s_t, s_t, s_{t-1}].
// The first channel is zero unless phi0 is given; s_0 = 0.
inline Matrix build_constructed_tokens(const Matrix& seq, const ConstructedTokenSpec& spec,
                                       const Matrix* phi0 = nullptr) {
  const std::size_t n = seq.cols();
  if (n != spec.n_s) throw ShapeMismatch("sequence width does not match token spec");
  if (seq.rows() == 0) throw InvalidSpec("empty sequence");
  const std::size_t ch = spec.count();
  Matrix out(seq.rows(), spec.token_dim());
  const Matrix first = phi0 ? matmul_nt(seq, *phi0) : Matrix(seq.rows(), n);
  for (std::size_t t = 0; t < seq.rows(); ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      out(t, j) = first(t, j);
      for (std::size_t c = 1; c + 1 < ch; ++c) out(t, c * n + j) = seq(t, j);
      out(t, (ch - 1) * n + j) = t > 0 ? seq(t - 1, j) : 0.0;
    }
  }
  return out;
}

inline Matrix build_concat_tokens(const Matrix& seq, std::size_t k) {
  if (k == 0) throw InvalidSpec("k must be >= 1");
  Matrix out(seq.rows(), k * seq.cols());
  for (std::size_t t = 0; t < seq.rows(); ++t) {
    const Matrix z = concat_window(seq, t, k);
    for (std::size_t j = 0; j < z.rows(); ++j) out(t, j) = z[j];
  }
  return out;
}

// n_s x (channels n_s) matrix with scale * I in block `channel` (0-based).
inline Matrix channel_select(std::size_t n_s, std::size_t channels, std::size_t channel,
                             double scale = 1.0) {
  Matrix m(n_s, channels * n_s);
  for (std::size_t i = 0; i < n_s; ++i) m(i, channel * n_s + i) = scale;
  return m;
}

inline void add_block(Matrix& m, std::size_t br, std::size_t bc, const Matrix& block) {
  for (std::size_t i = 0; i < block.rows(); ++i)
    for (std::size_t j = 0; j < block.cols(); ++j)
      m(br * block.rows() + i, bc * block.cols() + j) += block(i, j);
}

// Single-head linear-attention config over constructed tokens.
inline TransformerConfig construction_config(const ConstructedTokenSpec& spec,
                                             std::size_t n_layers = 1) {
  TransformerConfig cfg;
  cfg.layers.assign(n_layers, AttentionKind::kLinear);
  cfg.heads = 1;
  cfg.key_size = spec.n_s;
  cfg.value_size = spec.n_s;
  cfg.token_dim = spec.token_dim();
  cfg.readout_dim = spec.n_s;
  cfg.readout = Readout::kFirstDims;
  return cfg;
}

inline void set_head(ParamMap& params, std::size_t l, std::size_t h, const HeadParams& hp) {
  const std::string p = head_prefix(l, h);
  params[p + "W_q"] = hp.w_q;
  params[p + "W_k"] = hp.w_k;
  params[p + "W_v"] = hp.w_v;
  params[p + "P"] = hp.p;
}

// W_k^T W_q has I in block (s_{t-1}, s_t); P W_v has first block row
// [0, eta I, -eta Phi0] (four channels: [0, eta I, 0, -eta Phi0]).
inline HeadParams prop1_weights(std::size_t n_s, double eta, const Matrix& phi0,
                                TokenChannels channels = TokenChannels::kThree) {
  const std::size_t ch = static_cast<std::size_t>(channels);
  if (phi0.rows() != n_s || phi0.cols() != n_s) throw ShapeMismatch("phi0 must be n_s x n_s");
  HeadParams h;
  h.w_q = channel_select(n_s, ch, 1);
  h.w_k = channel_select(n_s, ch, ch - 1);
  h.w_v = channel_select(n_s, ch, 1, eta);
  for (std::size_t i = 0; i < n_s; ++i)
    for (std::size_t j = 0; j < n_s; ++j) h.w_v(i, (ch - 1) * n_s + j) = -eta * phi0(i, j);
  h.p = transpose(channel_select(n_s, ch, 0));
  return h;
}

// Gradient of L_t(Phi) = sum_{t'<=t} 1/2 ||s_t' - Phi s_{t'-1}||^2 at Phi0.
inline Matrix prop1_gradient(const Matrix& seq, std::size_t t, const Matrix& phi0) {
  const std::size_t n = seq.cols();
  Matrix g(n, n);
  for (std::size_t tp = 1; tp <= t; ++tp) {
    const Matrix prev = row_as_column(seq, tp - 1);
    const Matrix r = matmul(phi0, prev) - row_as_column(seq, tp);
    g += matmul_nt(r, prev);
  }
  return g;
}

// Applies e_t <- e_t + [-eta grad L_t(Phi0) s_t, 0, ...] analytically.
inline Matrix prop1_oracle_step(const Matrix& tokens, const ConstructedTokenSpec& spec, double eta,
                                const Matrix& phi0) {
  const std::size_t n = spec.n_s;
  if (tokens.cols() != spec.token_dim()) throw ShapeMismatch("tokens do not match token spec");
  // Recover s_0..s_{T-1} with s_{-1} = 0 from the s_t channel.
  const Matrix seq = slice_cols(tokens, n, n);
  Matrix padded(seq.rows() + 1, n);
  for (std::size_t t = 0; t < seq.rows(); ++t)
    for (std::size_t j = 0; j < n; ++j) padded(t + 1, j) = seq(t, j);
  Matrix out = tokens;
  for (std::size_t t = 0; t < seq.rows(); ++t) {
    const Matrix upd = matmul(prop1_gradient(padded, t + 1, phi0), row_as_column(seq, t)) * (-eta);
    for (std::size_t j = 0; j < n; ++j) out(t, j) += upd[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Second-order Richardson (Chebyshev) iteration for (K_t K_t^T + I/lambda)^{-1} s_t.

struct IterationParams {
  std::vector<double> alphas;
  std::vector<double> betas;  // empty or same length as alphas
  double lambda = 1.0;
  bool normalize = true;  // divide each system by its operator-norm bound

  std::size_t depth() const { return alphas.size(); }
  void validate() const {
    if (!(lambda > 0.0)) throw NonPositiveLambda("iteration lambda must be > 0");
    if (!betas.empty() && betas.size() != alphas.size()) {
      throw InvalidSpec("alphas and betas must have equal length");
    }
  }
  double beta(std::size_t k) const { return betas.empty() ? 0.0 : betas[k]; }
};

// Rows of keys are k_t; row t of the result approximates
// (sum_{t'<=t} k_t' k_t'^T + I/lambda)^{-1} targets_t.
// x^{K+1} = x^K + alpha_K (s - A x^K) - beta_K (x^K - x^{K-1}), x^0 = x^{-1} = s.
inline Matrix chebyshev_solve(const Matrix& keys, const Matrix& targets,
                              const IterationParams& params) {
  params.validate();
  if (!keys.same_shape(targets)) throw ShapeMismatch("keys and targets must match");
  const std::size_t n = keys.cols();
  Matrix out(keys.rows(), n);
  Matrix gram(n, n);
  for (std::size_t t = 0; t < keys.rows(); ++t) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) gram(i, j) += keys(t, i) * keys(t, j);
    Matrix a = gram;
    for (std::size_t i = 0; i < n; ++i) a(i, i) += 1.0 / params.lambda;
    double c = 1.0;
    if (params.normalize) {
      c = max_abs(gram) == 0.0 ? 1.0 / params.lambda
                               : operator_norm(gram) + 1.0 / params.lambda;
      a = a * (1.0 / c);
    }
    const Matrix s = row_as_column(targets, t);
    Matrix x = s, prev = s;
    for (std::size_t k = 0; k < params.depth(); ++k) {
      Matrix next = x + (s - matmul(a, x)) * params.alphas[k] - (x - prev) * params.beta(k);
      prev = std::move(x);
      x = std::move(next);
    }
    for (std::size_t j = 0; j < n; ++j) out(t, j) = x[j] / c;
  }
  return out;
}

// Direct oracle for the same systems.
inline Matrix preconditioned_targets_direct(const Matrix& keys, const Matrix& targets,
                                            double lambda) {
  const std::size_t n = keys.cols();
  Matrix out(keys.rows(), n);
  Matrix a = Matrix::identity(n) * (1.0 / lambda);
  for (std::size_t t = 0; t < keys.rows(); ++t) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) a(i, j) += keys(t, i) * keys(t, j);
    const Matrix x = solve_spd(a, row_as_column(targets, t));
    for (std::size_t j = 0; j < n; ++j) out(t, j) = x[j];
  }
  return out;
}

// Computes -alpha S_{t-1} S_{t-1}^T x_t into the output channel: the query
// reads the iterate channel, keys and values read s_{t-1}.
// Three channels (x^K, x^{K-1}, s_{t-1}): query/output channel 0.
// Four channels (scratch, x^K, s_t, s_{t-1}): query channel 1, output channel 0.
inline HeadParams prop2_layer_weights(double alpha, const ConstructedTokenSpec& spec) {
  const std::size_t n = spec.n_s, ch = spec.count();
  const std::size_t q_ch = spec.channels == TokenChannels::kThree ? 0 : 1;
  HeadParams h;
  h.w_q = channel_select(n, ch, q_ch);
  h.w_k = channel_select(n, ch, ch - 1);
  h.w_v = channel_select(n, ch, ch - 1, -alpha);
  h.p = transpose(channel_select(n, ch, 0));
  return h;
}

// Per-token linear map on four-channel tokens (scratch, x, s, s_prev):
// x' = (1 - alpha/lambda - beta) x + alpha s + scratch, scratch' = beta_next x.
inline Matrix prop2_channel_map(std::size_t n_s, double alpha, double beta, double beta_next,
                                double lambda) {
  Matrix m(4 * n_s, 4 * n_s);
  const Matrix id = Matrix::identity(n_s);
  add_block(m, 0, 1, id * beta_next);
  add_block(m, 1, 1, id * (1.0 - alpha / lambda - beta));
  add_block(m, 1, 2, id * alpha);
  add_block(m, 1, 0, id);
  add_block(m, 2, 2, id);
  add_block(m, 3, 3, id);
  return m;
}

// Four-channel stack: K preconditioning layers with channel maps, then a GD readout
// layer writing eta sum_t' s_t' s_{t'-1}^T x_t into the first channel.
inline Matrix prop2_pipeline_forward(const Matrix& tokens, std::size_t n_s,
                                     const IterationParams& params, double eta) {
  params.validate();
  const ConstructedTokenSpec spec{TokenChannels::kFour, n_s};
  if (tokens.cols() != spec.token_dim()) throw ShapeMismatch("pipeline expects four-channel tokens");
  Matrix e = tokens;
  for (std::size_t k = 0; k < params.depth(); ++k) {
    e += linear_attention(e, {prop2_layer_weights(params.alphas[k], spec)});
    const double beta_next = k + 1 < params.depth() ? params.beta(k + 1) : 0.0;
    // x^{-1} = x^0, so the first momentum term vanishes.
    const double beta = k == 0 ? 0.0 : params.beta(k);
    e = matmul_nt(e, prop2_channel_map(n_s, params.alphas[k], beta, beta_next, params.lambda));
  }
  HeadParams out;
  out.w_q = channel_select(n_s, 4, 1);
  out.w_k = channel_select(n_s, 4, 3);
  out.w_v = channel_select(n_s, 4, 2, eta);
  out.p = transpose(channel_select(n_s, 4, 0));
  e += linear_attention(e, {out});
  return slice_cols(e, 0, n_s);
}

// Oracle for the pipeline: unnormalized Chebyshev solve, then one GD step
// from Phi = 0 applied to the preconditioned query.
inline Matrix prop2_pipeline_oracle(const Matrix& seq, const IterationParams& params, double eta) {
  const std::size_t n = seq.cols();
  Matrix keys(seq.rows(), n);
  for (std::size_t t = 1; t < seq.rows(); ++t)
    for (std::size_t j = 0; j < n; ++j) keys(t, j) = seq(t - 1, j);
  IterationParams p = params;
  p.normalize = false;
  const Matrix x = chebyshev_solve(keys, seq, p);
  Matrix out(seq.rows(), n);
  Matrix acc(n, n);
  for (std::size_t t = 0; t < seq.rows(); ++t) {
    acc += matmul_nt(row_as_column(seq, t), row_as_column(keys, t));
    const Matrix y = matmul(acc, row_as_column(x, t)) * eta;
    for (std::size_t j = 0; j < n; ++j) out(t, j) = y[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Product-space views of linear stacks.

struct HeadProducts {
  Matrix kq;  // W_k^T W_q
  Matrix pv;  // P W_v
};

inline HeadProducts head_products(const ParamMap& params, std::size_t l, std::size_t h) {
  const std::string p = head_prefix(l, h);
  return {matmul_tn(params.at(p + "W_k"), params.at(p + "W_q")),
          matmul(params.at(p + "P"), params.at(p + "W_v"))};
}

inline void require_linear_stack(const TransformerConfig& cfg) {
  for (auto k : cfg.layers) {
    if (k != AttentionKind::kLinear) throw NotLinearStack("all layers must be linear attention");
  }
  if (cfg.use_mlp || cfg.embedded() || cfg.use_layernorm) {
    throw NotLinearStack("stack must be attention-only over raw tokens");
  }
}

// Same config with key and value size equal to the token dim, so any
// product can be written as W_k = I, W_q = kq, P = I, W_v = pv.
inline TransformerConfig product_config(const TransformerConfig& cfg) {
  TransformerConfig out = cfg;
  out.key_size = cfg.token_dim;
  out.value_size = cfg.token_dim;
  return out;
}

inline ParamMap refactor_products(const TransformerConfig& cfg,
                                  const std::vector<std::vector<HeadProducts>>& products) {
  const TransformerConfig pc = product_config(cfg);
  ParamMap out = zero_params(pc);
  const Matrix id = Matrix::identity(cfg.token_dim);
  for (std::size_t l = 0; l < cfg.layers.size(); ++l)
    for (std::size_t h = 0; h < cfg.heads; ++h)
      set_head(out, l, h, HeadParams{products[l][h].kq, id, products[l][h].pv, id, 1.0});
  return out;
}

struct CompressedAlg {
  std::size_t n_s = 0;
  std::size_t channels = 0;
  // Per layer and head: channels x channels scalars for each product.
  std::vector<std::vector<Matrix>> kq, pv;

  std::size_t scalars_per_head() const { return 2 * channels * channels; }
};

inline Matrix block_diag_means(const Matrix& m, std::size_t n_s) {
  const std::size_t ch = m.rows() / n_s;
  Matrix c(ch, ch);
  for (std::size_t bi = 0; bi < ch; ++bi)
    for (std::size_t bj = 0; bj < ch; ++bj) {
      double s = 0.0;
      for (std::size_t i = 0; i < n_s; ++i) s += m(bi * n_s + i, bj * n_s + i);
      c(bi, bj) = s / static_cast<double>(n_s);
    }
  return c;
}

inline Matrix expand_scalars(const Matrix& c, std::size_t n_s) {
  Matrix m(c.rows() * n_s, c.cols() * n_s);
  for (std::size_t bi = 0; bi < c.rows(); ++bi)
    for (std::size_t bj = 0; bj < c.cols(); ++bj)
      for (std::size_t i = 0; i < n_s; ++i) m(bi * n_s + i, bj * n_s + i) = c(bi, bj);
  return m;
}

inline CompressedAlg compress_algorithm(const ParamMap& params, const TransformerConfig& cfg,
                                        std::size_t n_s) {
  require_linear_stack(cfg);
  check_params(params, cfg);
  if (n_s == 0 || cfg.token_dim % n_s != 0) {
    throw ShapeMismatch("token dim is not a multiple of n_s");
  }
  CompressedAlg alg{n_s, cfg.token_dim / n_s, {}, {}};
  for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
    alg.kq.emplace_back();
    alg.pv.emplace_back();
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const HeadProducts hp = head_products(params, l, h);
      alg.kq.back().push_back(block_diag_means(hp.kq, n_s));
      alg.pv.back().push_back(block_diag_means(hp.pv, n_s));
    }
  }
  return alg;
}

inline std::vector<std::vector<HeadProducts>> expand_products(const CompressedAlg& alg) {
  std::vector<std::vector<HeadProducts>> out;
  for (std::size_t l = 0; l < alg.kq.size(); ++l) {
    out.emplace_back();
    for (std::size_t h = 0; h < alg.kq[l].size(); ++h)
      out.back().push_back({expand_scalars(alg.kq[l][h], alg.n_s), expand_scalars(alg.pv[l][h], alg.n_s)});
  }
  return out;
}

// Executable model whose head products are the sparse reconstruction.
inline std::pair<TransformerConfig, ParamMap> compressed_model(const CompressedAlg& alg,
                                                               const TransformerConfig& cfg) {
  return {product_config(cfg), refactor_products(cfg, expand_products(alg))};
}

inline std::vector<std::vector<HeadProducts>> all_products(const ParamMap& params,
                                                           const TransformerConfig& cfg) {
  std::vector<std::vector<HeadProducts>> out;
  for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
    out.emplace_back();
    for (std::size_t h = 0; h < cfg.heads; ++h) out.back().push_back(head_products(params, l, h));
  }
  return out;
}

inline bool same_architecture(const TransformerConfig& a, const TransformerConfig& b) {
  return a.layers == b.layers && a.heads == b.heads && a.token_dim == b.token_dim &&
         a.readout_dim == b.readout_dim && a.readout == b.readout &&
         a.positional == b.positional && a.pos_dim == b.pos_dim &&
         a.activation_clip == b.activation_clip && a.qk_normalize == b.qk_normalize;
}

// Interpolates the per-head products (not the factors) and refactors.
inline std::pair<TransformerConfig, ParamMap> interpolate_products(
    const ParamMap& params_a, const TransformerConfig& cfg_a, const ParamMap& params_b,
    const TransformerConfig& cfg_b, double w) {
  if (!same_architecture(cfg_a, cfg_b)) throw ConfigMismatch("interpolation endpoints differ");
  if (!(w >= 0.0 && w <= 1.0)) throw InvalidSpec("interpolation weight must be in [0, 1]");
  require_linear_stack(cfg_a);
  check_params(params_a, cfg_a);
  check_params(params_b, cfg_b);
  auto pa = all_products(params_a, cfg_a);
  const auto pb = all_products(params_b, cfg_b);
  for (std::size_t l = 0; l < pa.size(); ++l)
    for (std::size_t h = 0; h < pa[l].size(); ++h) {
      pa[l][h].kq = pa[l][h].kq * (1.0 - w) + pb[l][h].kq * w;
      pa[l][h].pv = pa[l][h].pv * (1.0 - w) + pb[l][h].pv * w;
    }
  return {product_config(cfg_a), refactor_products(cfg_a, pa)};
}

}  // namespace mesa
