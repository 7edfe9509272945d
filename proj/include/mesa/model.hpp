#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mesa/attention.hpp"
#include "mesa/rng.hpp"
#include "mesa/tape.hpp"

namespace mesa {

enum class Positional { kNone, kFirstLayerConcat };
enum class Readout { kFirstDims, kOutputEmbedding };

inline AttentionKind parse_attention_kind(const std::string& s) {
  for (auto k : {AttentionKind::kSoftmax, AttentionKind::kLinear, AttentionKind::kMesa}) {
    if (s == attention_kind_name(k)) return k;
  }
  throw InvalidSpec("unknown layer kind '" + s + "'");
}

struct TransformerConfig {
  std::vector<AttentionKind> layers;
  std::size_t heads = 1;
  std::size_t key_size = 0;
  std::size_t value_size = 0;  // 0: same as key_size
  std::size_t token_dim = 0;
  std::size_t embed_dim = 0;  // 0: no embedding, residual stream = tokens
  bool use_mlp = false;
  std::size_t mlp_hidden = 0;  // 0: 4 x embed
  bool use_layernorm = false;
  Positional positional = Positional::kNone;
  std::size_t pos_dim = 40;
  std::optional<double> activation_clip;
  Readout readout = Readout::kFirstDims;
  std::size_t readout_dim = 0;  // n_s
  bool qk_normalize = false;
  double init_std = 0.05;

  std::size_t stream_dim() const { return embed_dim ? embed_dim : token_dim; }
  std::size_t values() const { return value_size ? value_size : key_size; }
  std::size_t hidden() const { return mlp_hidden ? mlp_hidden : 4 * stream_dim(); }
  bool embedded() const { return embed_dim != 0; }

  void validate() const {
    if (layers.empty()) throw InvalidSpec("config needs at least one layer");
    if (heads == 0 || key_size == 0 || token_dim == 0 || readout_dim == 0) {
      throw InvalidSpec("heads, key_size, token_dim and readout_dim must be positive");
    }
    if (key_size > stream_dim()) {
      throw InvalidSpec("key_size " + std::to_string(key_size) + " exceeds embed dim " +
                        std::to_string(stream_dim()));
    }
    if (readout == Readout::kFirstDims && readout_dim > stream_dim()) {
      throw InvalidSpec("readout_dim exceeds residual stream width");
    }
    if (activation_clip) {
      if (!(*activation_clip > 0.0)) throw InvalidSpec("activation clip must be positive");
      for (auto k : layers) {
        if (k != AttentionKind::kLinear) {
          throw InvalidSpec("activation clipping is only supported for linear-attention stacks");
        }
      }
    }
    if (!(init_std >= 0.0)) throw InvalidSpec("init_std must be >= 0");
  }
};

using ParamMap = std::map<std::string, Matrix>;

inline std::string head_prefix(std::size_t l, std::size_t h) {
  return "layer" + std::to_string(l) + ".head" + std::to_string(h) + ".";
}
inline std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

// Name -> shape for every parameter the config implies.
inline std::map<std::string, std::pair<std::size_t, std::size_t>> param_shapes(
    const TransformerConfig& cfg) {
  cfg.validate();
  std::map<std::string, std::pair<std::size_t, std::size_t>> s;
  const std::size_t d = cfg.stream_dim();
  if (cfg.embedded()) s["embed.W_in"] = {d, cfg.token_dim};
  if (cfg.readout == Readout::kOutputEmbedding) s["embed.W_out"] = {cfg.readout_dim, d};
  for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const std::string p = head_prefix(l, h);
      s[p + "W_q"] = {cfg.key_size, d};
      s[p + "W_k"] = {cfg.key_size, d};
      s[p + "W_v"] = {cfg.values(), d};
      s[p + "P"] = {d, cfg.values()};
      if (cfg.layers[l] == AttentionKind::kMesa) s[p + "lambda_raw"] = {1, 1};
    }
    const std::string lp = layer_prefix(l);
    if (cfg.use_layernorm) {
      s[lp + "ln1.scale"] = {1, d};
      s[lp + "ln1.offset"] = {1, d};
    }
    if (cfg.use_mlp) {
      s[lp + "mlp.W1"] = {cfg.hidden(), d};
      s[lp + "mlp.W2"] = {d, cfg.hidden()};
      if (cfg.use_layernorm) {
        s[lp + "ln2.scale"] = {1, d};
        s[lp + "ln2.offset"] = {1, d};
      }
    }
  }
  return s;
}

inline std::size_t param_count(const TransformerConfig& cfg) {
  std::size_t n = 0;
  for (const auto& [name, shape] : param_shapes(cfg)) n += shape.first * shape.second;
  return n;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline ParamMap init_params(const TransformerConfig& cfg, Rng& rng) {
  ParamMap p;
  for (const auto& [name, shape] : param_shapes(cfg)) {
    if (ends_with(name, "lambda_raw")) {
      p[name] = Matrix(1, 1, softplus_inverse(1.0));
    } else if (ends_with(name, ".scale")) {
      p[name] = Matrix(shape.first, shape.second, 1.0);
    } else if (ends_with(name, ".offset")) {
      p[name] = Matrix(shape.first, shape.second);
    } else {
      p[name] = rng.normal_matrix(shape.first, shape.second, cfg.init_std);
    }
  }
  return p;
}

inline ParamMap zero_params(const TransformerConfig& cfg) {
  ParamMap p;
  for (const auto& [name, shape] : param_shapes(cfg)) p[name] = Matrix(shape.first, shape.second);
  return p;
}

// Every name present with its config-derived shape, and nothing else.
inline void check_params(const ParamMap& params, const TransformerConfig& cfg) {
  const auto shapes = param_shapes(cfg);
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeMismatch("missing parameter " + name);
    if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
      throw ShapeMismatch("parameter " + name + " has shape " + it->second.shape_str());
    }
  }
  for (const auto& [name, m] : params) {
    if (!shapes.count(name)) throw ShapeMismatch("unexpected parameter " + name);
  }
}

inline double mesa_lambda(const ParamMap& params, std::size_t l, std::size_t h) {
  return softplus_scalar(params.at(head_prefix(l, h) + "lambda_raw")[0]);
}

inline HeadParams head_params(const ParamMap& params, std::size_t l, std::size_t h,
                              bool is_mesa) {
  const std::string p = head_prefix(l, h);
  HeadParams hp{params.at(p + "W_q"), params.at(p + "W_k"), params.at(p + "W_v"),
                params.at(p + "P"), 1.0};
  if (is_mesa) hp.lambda = softplus_scalar(params.at(p + "lambda_raw")[0]);
  return hp;
}

// ---------------------------------------------------------------------------
// Standalone building blocks.

inline Matrix layernorm(const Matrix& x, double eps = kLayerNormEps) {
  return detail::standardize_rows(x, eps, nullptr);
}

inline Matrix gelu(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.data()) v = gelu_scalar(v);
  return y;
}

// Rows of x are tokens; returns W2 GELU(W1 e) per token.
inline Matrix gelu_mlp(const Matrix& x, const Matrix& w1, const Matrix& w2) {
  return matmul_nt(gelu(matmul_nt(x, w1)), w2);
}

inline Matrix activation_clip(const Matrix& x, double c) {
  if (!(c > 0.0)) throw InvalidSpec("clip band must be positive");
  Matrix y = x;
  for (double& v : y.data()) v = std::clamp(v, -c, c);
  return y;
}

inline Matrix causal_mask(std::size_t t_len) {
  Matrix m(t_len, t_len);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t s = 0; s <= t; ++s) m(t, s) = 1.0;
  return m;
}

// Mesa analog of an attention map: entry (t, t') = k_t'^T R_t q_t for t' <= t.
inline Matrix mesa_scores(const Matrix& k, const Matrix& q, double lambda) {
  const auto fwd = mesa_head_forward(k, q, Matrix(k.rows(), 1), ones_gammas(k.rows()), lambda, true);
  Matrix s(k.rows(), k.rows());
  for (std::size_t t = 0; t < k.rows(); ++t) {
    const Matrix rq = matmul(fwd.r_trace[t + 1], row_as_column(q, t));
    for (std::size_t tp = 0; tp <= t; ++tp) s(t, tp) = dot(k.row(tp), rq.data());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Forward pass on a tape.

struct ActivationTrace {
  std::vector<Matrix> layer_outputs;                  // residual stream after each block
  std::vector<Matrix> attention_outputs;              // attention update per layer
  std::vector<std::vector<Matrix>> attention_weights; // T x T per head (mesa: score analog)
};

using ParamVars = std::map<std::string, Var>;

inline ParamVars register_params(Tape& tape, const ParamMap& params, bool requires_grad) {
  ParamVars v;
  for (const auto& [name, m] : params) v.emplace(name, tape.leaf(m, name, requires_grad));
  return v;
}

struct ModelOutput {
  Var predictions;  // T x readout_dim
  Var stream;       // final residual stream
};

// Tokens may be a differentiable leaf (sensitivity analysis, prompt tuning).
inline ModelOutput model_forward_tape(Tape& tape, const ParamVars& p, const TransformerConfig& cfg,
                                      Var tokens, ActivationTrace* trace = nullptr) {
  if (tokens.value().cols() != cfg.token_dim) {
    throw ShapeMismatch("tokens " + tokens.value().shape_str() + " vs token_dim " +
                        std::to_string(cfg.token_dim));
  }
  const std::size_t t_len = tokens.value().rows();
  Var e = tokens;
  if (cfg.embedded()) e = ad::matmul_nt(e, p.at("embed.W_in"));
  const Var mask = tape.constant(causal_mask(t_len));
  const Var gammas = tape.constant(ones_gammas(t_len));
  std::optional<Var> pe;
  if (cfg.positional == Positional::kFirstLayerConcat && cfg.pos_dim > 0) {
    pe = tape.constant(sinusoidal_table(t_len, cfg.pos_dim));
  }
  for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
    const std::string lp = layer_prefix(l);
    const AttentionKind kind = cfg.layers[l];
    Var x = cfg.use_layernorm ? ad::layernorm(e, p.at(lp + "ln1.scale"), p.at(lp + "ln1.offset"))
                              : e;
    std::optional<Var> delta;
    std::vector<Matrix> weights;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const std::string hp = head_prefix(l, h);
      Var q = ad::matmul_nt(x, p.at(hp + "W_q"));
      Var k = ad::matmul_nt(x, p.at(hp + "W_k"));
      const Var v = ad::matmul_nt(x, p.at(hp + "W_v"));
      if (cfg.qk_normalize) {
        q = ad::row_l2_normalize(q);
        k = ad::row_l2_normalize(k);
      }
      if (l == 0 && pe) {
        q = ad::concat_cols(q, *pe);
        k = ad::concat_cols(k, *pe);
      }
      Var y;
      switch (kind) {
        case AttentionKind::kSoftmax: {
          const Var a = ad::softmax(ad::matmul_nt(q, k), true);
          if (trace) weights.push_back(a.value());
          y = ad::matmul(a, v);
          break;
        }
        case AttentionKind::kLinear: {
          const Var a = ad::mul(ad::matmul_nt(q, k), mask);
          if (trace) weights.push_back(a.value());
          y = ad::matmul(a, v);
          break;
        }
        case AttentionKind::kMesa: {
          const Var lam = ad::softplus(p.at(hp + "lambda_raw"));
          y = ad::mesa_head(k, q, v, gammas, lam);
          if (trace) weights.push_back(mesa_scores(k.value(), q.value(), lam.value()[0]));
          break;
        }
      }
      const Var out = ad::matmul_nt(y, p.at(hp + "P"));
      delta = delta ? ad::add(*delta, out) : out;
    }
    e = ad::add(e, *delta);
    if (cfg.activation_clip) e = ad::clip(e, *cfg.activation_clip);
    if (cfg.use_mlp) {
      const Var xm = cfg.use_layernorm
                         ? ad::layernorm(e, p.at(lp + "ln2.scale"), p.at(lp + "ln2.offset"))
                         : e;
      const Var hid = ad::gelu(ad::matmul_nt(xm, p.at(lp + "mlp.W1")));
      e = ad::add(e, ad::matmul_nt(hid, p.at(lp + "mlp.W2")));
    }
    if (trace) {
      trace->attention_outputs.push_back(delta->value());
      trace->attention_weights.push_back(std::move(weights));
      trace->layer_outputs.push_back(e.value());
    }
  }
  Var pred = cfg.readout == Readout::kFirstDims ? ad::slice_cols(e, 0, cfg.readout_dim)
                                                : ad::matmul_nt(e, p.at("embed.W_out"));
  return {pred, e};
}

inline ModelOutput model_forward_tape(Tape& tape, const ParamVars& p, const TransformerConfig& cfg,
                                      const Matrix& tokens, ActivationTrace* trace = nullptr) {
  return model_forward_tape(tape, p, cfg, tape.constant(tokens), trace);
}

struct ForwardResult {
  Matrix predictions;
  ActivationTrace trace;
};

inline ForwardResult model_forward(const ParamMap& params, const TransformerConfig& cfg,
                                   const Matrix& tokens) {
  cfg.validate();
  check_params(params, cfg);
  Tape tape;
  const ParamVars vars = register_params(tape, params, false);
  ForwardResult r;
  r.predictions = model_forward_tape(tape, vars, cfg, tokens, &r.trace).predictions.value();
  return r;
}

}  // namespace mesa
