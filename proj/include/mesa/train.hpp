#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "mesa/constructions.hpp"
#include "mesa/model.hpp"
#include "mesa/seqgen.hpp"

namespace mesa {

// How observation sequences are turned into model input tokens.
enum class EncodingKind { kRaw, kConstructed3, kConstructed4, kConcat };

struct TokenEncoding {
  EncodingKind kind = EncodingKind::kRaw;
  std::size_t k = 1;  // window for kConcat

  std::size_t token_dim(std::size_t n_s) const {
    switch (kind) {
      case EncodingKind::kRaw: return n_s;
      case EncodingKind::kConstructed3: return 3 * n_s;
      case EncodingKind::kConstructed4: return 4 * n_s;
      case EncodingKind::kConcat: return k * n_s;
    }
    return n_s;
  }
};

inline const char* encoding_name(EncodingKind k) {
  switch (k) {
    case EncodingKind::kRaw: return "raw";
    case EncodingKind::kConstructed3: return "constructed3";
    case EncodingKind::kConstructed4: return "constructed4";
    case EncodingKind::kConcat: return "concat";
  }
  return "unknown";
}

inline EncodingKind parse_encoding(const std::string& s) {
  for (auto k : {EncodingKind::kRaw, EncodingKind::kConstructed3, EncodingKind::kConstructed4,
                 EncodingKind::kConcat}) {
    if (s == encoding_name(k)) return k;
  }
  throw InvalidSpec("unknown token encoding '" + s + "'");
}

inline Matrix encode_tokens(const Matrix& seq, const TokenEncoding& enc) {
  switch (enc.kind) {
    case EncodingKind::kRaw: return seq;
    case EncodingKind::kConstructed3:
      return build_constructed_tokens(seq, {TokenChannels::kThree, seq.cols()});
    case EncodingKind::kConstructed4:
      return build_constructed_tokens(seq, {TokenChannels::kFour, seq.cols()});
    case EncodingKind::kConcat: return build_concat_tokens(seq, enc.k);
  }
  return seq;
}

struct TrainConfig {
  std::size_t steps = 10000;
  std::size_t batch_size = 64;
  double peak_lr = 7e-4;
  std::size_t warmup_steps = 1000;
  std::size_t cosine_steps = 10000;
  double final_lr = 1e-5;
  double weight_decay = 0.05;
  double grad_clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1000;
  std::size_t eval_batch = 2048;
  bool log_wallclock = false;
  GeneratorSpec task;
  TokenEncoding encoding;
  TransformerConfig arch;

  void validate() const {
    if (warmup_steps < 1) throw InvalidSpec("warmup_steps must be >= 1");
    if (!(peak_lr > 0.0) || !(final_lr > 0.0) || !(grad_clip_norm > 0.0) || !(eps > 0.0)) {
      throw InvalidSpec("learning rates, clip norm and eps must be positive");
    }
    if (!(weight_decay >= 0.0)) throw InvalidSpec("weight decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw InvalidSpec("Adam betas must lie in [0, 1)");
    }
    if (batch_size == 0 || eval_every == 0 || eval_batch == 0) {
      throw InvalidSpec("batch sizes and eval_every must be positive");
    }
    task.validate();
    arch.validate();
    if (arch.token_dim != encoding.token_dim(task.n_s)) {
      throw ConfigMismatch("arch token_dim " + std::to_string(arch.token_dim) +
                           " does not match encoded token width " +
                           std::to_string(encoding.token_dim(task.n_s)));
    }
    if (arch.readout_dim != task.n_s) throw ConfigMismatch("readout_dim must equal n_s");
  }
};

// ---------------------------------------------------------------------------

inline double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  if (step < cfg.warmup_steps) return cfg.peak_lr * s / w;
  if (cfg.cosine_steps == 0) return cfg.final_lr;
  const double frac = (s - w) / static_cast<double>(cfg.cosine_steps);
  if (frac >= 1.0) return cfg.final_lr;
  return cfg.final_lr +
         (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

// L = mean over batch of 1/2 sum_t ||target_t - prediction_t||^2.
inline double autoregressive_loss(const std::vector<Matrix>& predictions,
                                  const std::vector<Matrix>& targets) {
  if (predictions.size() != targets.size() || predictions.empty()) {
    throw ShapeMismatch("prediction and target batches differ");
  }
  double total = 0.0;
  for (std::size_t b = 0; b < predictions.size(); ++b) {
    if (!predictions[b].same_shape(targets[b])) {
      throw ShapeMismatch("prediction " + predictions[b].shape_str() + " vs target " +
                          targets[b].shape_str());
    }
    const double d = frobenius_norm(predictions[b] - targets[b]);
    total += 0.5 * d * d;
  }
  return total / static_cast<double>(predictions.size());
}

inline double global_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.data()) s += v * v;
  return std::sqrt(s);
}

// Returns the pre-clip norm.
inline double clip_global_norm(GradMap& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw InvalidSpec("max_norm must be positive");
  const double n = global_norm(grads);
  if (n > max_norm) {
    const double s = max_norm / n;
    for (auto& [name, g] : grads) g *= s;
  }
  return n;
}

struct OptimizerState {
  ParamMap m, v;
  std::size_t step = 0;
};

inline OptimizerState init_optimizer(const ParamMap& params) {
  OptimizerState st;
  for (const auto& [name, p] : params) {
    st.m[name] = Matrix(p.rows(), p.cols());
    st.v[name] = Matrix(p.rows(), p.cols());
  }
  return st;
}

inline void adamw_step(ParamMap& params, const GradMap& grads, OptimizerState& st, double lr,
                       const TrainConfig& cfg) {
  for (const auto& [name, g] : grads) {
    for (double x : g.data()) {
      if (!std::isfinite(x)) throw NonFiniteGradient("gradient of " + name + " is not finite");
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (auto& [name, p] : params) {
    auto it = grads.find(name);
    Matrix& m = st.m.at(name);
    Matrix& v = st.v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = it == grads.end() ? 0.0 : it->second[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mh = m[i] / c1, vh = v[i] / c2;
      p[i] -= lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * p[i]);
    }
  }
}

// ---------------------------------------------------------------------------

inline Matrix next_token_targets(const Matrix& seq) { return slice_rows(seq, 1, seq.rows() - 1); }

// Loss and gradients for one batch of observation sequences.
struct BatchEval {
  double loss = 0.0;
  GradMap grads;
};

inline BatchEval loss_and_grad(const ParamMap& params, const TransformerConfig& arch,
                               const TokenEncoding& enc, const std::vector<Matrix>& seqs) {
  Tape tape;
  const ParamVars vars = register_params(tape, params, true);
  std::optional<Var> total;
  for (const Matrix& seq : seqs) {
    const Var pred = model_forward_tape(tape, vars, arch, encode_tokens(seq, enc)).predictions;
    const Var l = ad::squared_error(ad::slice_rows(pred, 0, seq.rows() - 1),
                                    tape.constant(next_token_targets(seq)));
    total = total ? ad::add(*total, l) : l;
  }
  const Var mean = ad::scale(*total, 1.0 / static_cast<double>(seqs.size()));
  return {mean.value()[0], tape.backward(mean)};
}

// Per-timestep mean loss: entry t is 1/2 ||s_{t+1} - f_t||^2 averaged over the batch.
inline std::vector<double> eval_loss_curve(const ParamMap& params, const TransformerConfig& arch,
                                           const TokenEncoding& enc,
                                           const std::vector<Matrix>& seqs) {
  std::vector<double> curve;
  for (const Matrix& seq : seqs) {
    const Matrix pred = model_forward(params, arch, encode_tokens(seq, enc)).predictions;
    if (curve.empty()) curve.assign(seq.rows() - 1, 0.0);
    for (std::size_t t = 0; t + 1 < seq.rows(); ++t) {
      double d = 0.0;
      for (std::size_t j = 0; j < seq.cols(); ++j) d += std::pow(seq(t + 1, j) - pred(t, j), 2);
      curve[t] += 0.5 * d / static_cast<double>(seqs.size());
    }
  }
  return curve;
}

inline double eval_loss(const ParamMap& params, const TransformerConfig& arch,
                        const TokenEncoding& enc, const std::vector<Matrix>& seqs) {
  double s = 0.0;
  for (double v : eval_loss_curve(params, arch, enc, seqs)) s += v;
  return s;
}

inline std::vector<Matrix> train_batch(const TrainConfig& cfg, std::size_t step) {
  Rng rng(cfg.seed, stream_id(StreamPurpose::kTrainData, step));
  return gen_sequences(cfg.task, cfg.batch_size, rng).observations;
}

inline std::vector<Matrix> eval_batch(const TrainConfig& cfg) {
  Rng rng(cfg.seed, stream_id(StreamPurpose::kEvalData, 0));
  return gen_sequences(cfg.task, cfg.eval_batch, rng).observations;
}

struct MetricsRow {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double grad_norm = 0.0;
  double wallclock_s = 0.0;
};

struct TrainState {
  ParamMap params;
  OptimizerState opt;
};

class TrainingDiverged : public DivergedTraining {
 public:
  TrainingDiverged(const std::string& what, std::size_t step, TrainState last_good)
      : DivergedTraining(what), step_(step), last_good_(std::move(last_good)) {}
  std::size_t step() const { return step_; }
  const TrainState& last_good() const { return last_good_; }

 private:
  std::size_t step_;
  TrainState last_good_;
};

struct TrainResult {
  TrainState state;
  std::vector<MetricsRow> log;
};

using CheckpointHook = std::function<void(std::size_t step, const TrainState&)>;

inline TrainState init_train_state(const TrainConfig& cfg) {
  Rng rng(cfg.seed, stream_id(StreamPurpose::kInit, 0));
  TrainState st{init_params(cfg.arch, rng), {}};
  st.opt = init_optimizer(st.params);
  return st;
}

// Online training; resumes from `resume` when given (its optimizer step
// counter is the number of completed steps).
inline TrainResult train_loop(const TrainConfig& cfg, std::optional<TrainState> resume = {},
                              const CheckpointHook& on_checkpoint = {}) {
  cfg.validate();
  TrainResult res{resume ? std::move(*resume) : init_train_state(cfg), {}};
  check_params(res.state.params, cfg.arch);
  const std::vector<Matrix> eval = eval_batch(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  auto wallclock = [&] {
    if (!cfg.log_wallclock) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  if (res.state.opt.step == 0) {
    const double tr = eval_loss(res.state.params, cfg.arch, cfg.encoding, train_batch(cfg, 0));
    const double e = eval_loss(res.state.params, cfg.arch, cfg.encoding, eval);
    res.log.push_back({0, lr_schedule(0, cfg), tr, e, 0.0, wallclock()});
  }
  while (res.state.opt.step < cfg.steps) {
    const std::size_t step = res.state.opt.step;
    const double lr = lr_schedule(step, cfg);
    TrainState before = res.state;
    BatchEval be;
    double gn = 0.0;
    try {
      be = loss_and_grad(res.state.params, cfg.arch, cfg.encoding, train_batch(cfg, step));
      if (!std::isfinite(be.loss)) throw NonFinite("training loss is not finite");
      gn = clip_global_norm(be.grads, cfg.grad_clip_norm);
      adamw_step(res.state.params, be.grads, res.state.opt, lr, cfg);
    } catch (const Error& e) {
      if (e.kind() != "NonFinite" && e.kind() != "NonFiniteGradient" &&
          e.kind() != "NotSPD") {
        throw;
      }
      throw TrainingDiverged("step " + std::to_string(step) + ": " + e.what(), step,
                             std::move(before));
    }
    const std::size_t done = res.state.opt.step;
    if (done % cfg.eval_every == 0 || done == cfg.steps) {
      const double e = eval_loss(res.state.params, cfg.arch, cfg.encoding, eval);
      if (!std::isfinite(e)) {
        throw TrainingDiverged("eval loss is not finite at step " + std::to_string(done), done,
                               std::move(before));
      }
      res.log.push_back({done, lr, be.loss, e, gn, wallclock()});
      if (on_checkpoint) on_checkpoint(done, res.state);
    }
  }
  return res;
}

}  // namespace mesa
