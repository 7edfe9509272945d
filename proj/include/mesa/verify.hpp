#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mesa/io.hpp"

namespace mesa {

// Equivalence and oracle suites run by `mesa verify`.

struct CheckResult {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string message;
};

struct VerifyReport {
  std::string suite;
  std::vector<CheckResult> checks;

  bool passed() const {
    for (const auto& c : checks) {
      if (!c.passed) return false;
    }
    return !checks.empty();
  }
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  bool inject_bad_lambda = false;  // error-path drill for the mesa suite
};

inline const std::vector<std::string>& verify_suites() {
  static const std::vector<std::string> s = {"prop1", "prop2", "mesa", "gradients", "oracles"};
  return s;
}

// Library errors inside a check become a failed verdict carrying the error kind.
inline CheckResult run_check(const std::string& name, double tol, const std::function<double()>& fn) {
  CheckResult r{name, 0.0, tol, false, ""};
  try {
    r.error = fn();
    r.passed = r.error <= tol;
  } catch (const Error& e) {
    r.error = std::numeric_limits<double>::infinity();
    r.message = e.what();
  }
  return r;
}

namespace verify_detail {

inline Rng rng_for(const VerifyOptions& o, std::uint64_t index) {
  return Rng(o.seed, stream_id(StreamPurpose::kVerify, index));
}

inline std::vector<Matrix> linear_batch(std::size_t n, std::size_t t_len, std::size_t batch,
                                        double sigma, Rng& rng) {
  GeneratorSpec spec;
  spec.n_h = spec.n_s = n;
  spec.T = t_len;
  spec.sigma_h = sigma;
  return gen_sequences(spec, batch, rng).observations;
}

inline HeadParams random_head(std::size_t n_e, std::size_t n_a, Rng& rng, double scale) {
  return {rng.normal_matrix(n_a, n_e, scale), rng.normal_matrix(n_a, n_e, scale),
          rng.normal_matrix(n_a, n_e, scale), rng.normal_matrix(n_e, n_a, scale), 1.0};
}

inline Matrix gammas_between(std::size_t t, double lo, Rng& rng) {
  Matrix g(t, 1);
  for (double& v : g.data()) v = lo + (1.0 - lo) * rng.uniform();
  return g;
}

}  // namespace verify_detail

inline VerifyReport verify_prop1(const VerifyOptions& o) {
  using namespace verify_detail;
  VerifyReport rep{"prop1", {}};
  for (auto ch : {TokenChannels::kThree, TokenChannels::kFour}) {
    for (bool zero_phi : {true, false}) {
      const std::string name = std::string("prop1_") + (ch == TokenChannels::kThree ? "3ch" : "4ch") +
                               (zero_phi ? "_phi0_zero" : "_phi0_random");
      rep.checks.push_back(run_check(name, 1e-10, [&] {
        Rng rng = rng_for(o, ch == TokenChannels::kThree ? (zero_phi ? 0 : 1) : (zero_phi ? 2 : 3));
        const ConstructedTokenSpec spec{ch, 10};
        double worst = 0.0;
        for (int b = 0; b < 25; ++b) {
          const Matrix seq = linear_batch(10, 50, 1, 0.01, rng)[0];
          const Matrix phi0 = zero_phi ? Matrix(10, 10) : rng.normal_matrix(10, 10, 0.3);
          const double eta = 0.01 + 0.1 * rng.uniform();
          const Matrix tokens = build_constructed_tokens(seq, spec, zero_phi ? nullptr : &phi0);
          const Matrix out = tokens + linear_attention(tokens, {prop1_weights(10, eta, phi0, ch)});
          worst = std::max(worst, max_abs_diff(out, prop1_oracle_step(tokens, spec, eta, phi0)));
        }
        return worst;
      }));
    }
  }
  return rep;
}

inline VerifyReport verify_prop2(const VerifyOptions& o) {
  using namespace verify_detail;
  VerifyReport rep{"prop2", {}};
  rep.checks.push_back(run_check("prop2_pipeline_vs_chebyshev_oracle", 1e-9, [&] {
    Rng rng = rng_for(o, 10);
    double worst = 0.0;
    for (int b = 0; b < 10; ++b) {
      const Matrix seq = linear_batch(5, 30, 1, 0.01, rng)[0];
      IterationParams p;
      p.lambda = 0.5 + rng.uniform();
      p.normalize = false;
      for (int k = 0; k < 4; ++k) {
        p.alphas.push_back(0.05 * rng.uniform());
        p.betas.push_back(0.2 * rng.uniform() - 0.1);
      }
      const Matrix tokens = build_constructed_tokens(seq, {TokenChannels::kFour, 5});
      const double eta = 0.05;
      const Matrix a = prop2_pipeline_forward(tokens, 5, p, eta);
      const Matrix ref = prop2_pipeline_oracle(seq, p, eta);
      worst = std::max(worst, max_abs_diff(a, ref) / std::max(1.0, max_abs(ref)));
    }
    return worst;
  }));
  rep.checks.push_back(run_check("chebyshev_converges_to_direct_solve", 1e-6, [&] {
    Rng rng = rng_for(o, 11);
    const Matrix seq = linear_batch(4, 30, 1, 0.01, rng)[0];
    const Matrix keys = shifted_keys(seq);
    const Matrix x = chebyshev_solve(keys, seq, chebyshev_schedule(80, 0.02, 1.0, 1.0));
    return max_abs_diff(x, preconditioned_targets_direct(keys, seq, 1.0));
  }));
  return rep;
}

inline VerifyReport verify_mesa(const VerifyOptions& o) {
  using namespace verify_detail;
  VerifyReport rep{"mesa", {}};
  const double bad = o.inject_bad_lambda ? -1.0 : 0.0;
  for (double lo : {1.0, 0.9}) {
    rep.checks.push_back(run_check(lo == 1.0 ? "recursive_vs_direct_inverse" : "recursive_vs_direct_inverse_forget", 1e-7, [&] {
      Rng rng = rng_for(o, lo == 1.0 ? 20 : 21);
      const Matrix k = rng.normal_matrix(200, 8);
      const Matrix g = lo == 1.0 ? ones_gammas(200) : gammas_between(200, lo, rng);
      const double lambda = bad < 0 ? bad : 0.5 + rng.uniform();
      const auto fwd = mesa_head_forward(k, k, Matrix(200, 1), g, lambda, true);
      double worst = 0.0;
      for (std::size_t t = 0; t < 200; ++t) {
        worst = std::max(worst, relative_error(fwd.r_trace[t + 1], mesa_direct_inverse(k, g, lambda, t)));
      }
      return worst;
    }));
  }
  rep.checks.push_back(run_check("output_is_ridge_prediction", 1e-7, [&] {
    Rng rng = rng_for(o, 22);
    const Matrix e = rng.normal_matrix(60, 8);
    HeadParams h = random_head(8, 8, rng, 0.4);
    h.lambda = 0.8;
    const Matrix delta = mesa_forward(e, {h}).delta;
    const auto pr = project(e, h);
    double worst = 0.0;
    for (std::size_t t = 0; t < 60; ++t) {
      const Matrix phi = ridge_regressor(transpose(slice_rows(pr.k, 0, t + 1)),
                                         transpose(slice_rows(pr.v, 0, t + 1)), h.lambda);
      const Matrix pred = transpose(matmul(h.p, matmul(phi, row_as_column(pr.q, t))));
      worst = std::max(worst, max_abs_diff(slice_rows(delta, t, 1), pred) / std::max(1.0, max_abs(pred)));
    }
    return worst;
  }));
  rep.checks.push_back(run_check("neumann_error_at_K32", 1e-3, [&] {
    Rng rng = rng_for(o, 23);
    const Matrix e = rng.normal_matrix(50, 6);
    // Truncation error decays like (1 - 1/cond)^K, so keys are kept well conditioned.
    std::vector<HeadParams> heads = {random_head(6, 4, rng, 0.05), random_head(6, 4, rng, 0.05)};
    const Matrix exact = mesa_forward(e, heads).delta;
    double prev = std::numeric_limits<double>::infinity();
    for (int k : {2, 4, 8, 16, 32}) {
      const double err = relative_error(mesa_forward_neumann(e, heads, k), exact);
      if (!(err < prev)) return std::numeric_limits<double>::infinity();
      prev = err;
    }
    return prev;
  }));
  rep.checks.push_back(run_check("small_lambda_is_linear_attention", 1e-4, [&] {
    Rng rng = rng_for(o, 24);
    const Matrix e = rng.normal_matrix(25, 6);
    std::vector<HeadParams> heads = {random_head(6, 4, rng, 0.3), random_head(6, 4, rng, 0.3)};
    for (auto& h : heads) h.lambda = 1e-8;
    return relative_error(mesa_forward(e, heads).delta * 1e8, linear_attention(e, heads));
  }));
  return rep;
}

inline VerifyReport verify_gradients(const VerifyOptions& o) {
  using namespace verify_detail;
  VerifyReport rep{"gradients", {}};
  rep.checks.push_back(run_check("mesa_backward_vs_store_everything", 1e-9, [&] {
    Rng rng = rng_for(o, 30);
    double worst = 0.0;
    for (int inst = 0; inst < 4; ++inst) {
      const std::size_t t_len = 10, n = 4;
      const Matrix k = rng.normal_matrix(t_len, n), q = rng.normal_matrix(t_len, n);
      const Matrix v = rng.normal_matrix(t_len, 3), dy = rng.normal_matrix(t_len, 3);
      const Matrix g = inst % 2 ? gammas_between(t_len, 0.9, rng) : ones_gammas(t_len);
      const double lambda = 0.5 + rng.uniform();
      const auto fwd = mesa_head_forward(k, q, v, g, lambda);
      MesaHeadGrads out;
      out.reset(t_len, n, 3);
      mesa_head_backward(k, q, v, g, lambda, fwd.r_final, dy, out);
      Tape tape;
      const Var kv = tape.leaf(k, "k"), qv = tape.leaf(q, "q"), vv = tape.leaf(v, "v");
      const Var gv = tape.leaf(g, "g"), lv = tape.leaf(Matrix(1, 1, lambda), "l");
      const GradMap ref = tape.backward(mesa_head_unrolled(tape, kv, qv, vv, gv, lv, dy));
      worst = std::max({worst, max_abs_diff(out.dk, ref.at("k")), max_abs_diff(out.dq, ref.at("q")),
                        max_abs_diff(out.dv, ref.at("v")), max_abs_diff(out.dgamma, ref.at("g")),
                        std::abs(out.dlambda - ref.at("l")[0])});
    }
    return worst;
  }));
  rep.checks.push_back(run_check("mesa_backward_vs_finite_differences", 1e-4, [&] {
    Rng rng = rng_for(o, 31);
    const std::size_t t_len = 8, n = 3;
    const Matrix dy = rng.normal_matrix(t_len, 2);
    const ScalarGraph f = [&](Tape& tp, const std::vector<Var>& x) {
      return ad::sum(ad::mul(ad::mesa_head(x[0], x[1], x[2], x[3], x[4]), tp.constant(dy)));
    };
    return finite_diff_check(f,
                             {rng.normal_matrix(t_len, n), rng.normal_matrix(t_len, n),
                              rng.normal_matrix(t_len, 2), gammas_between(t_len, 0.9, rng),
                              Matrix(1, 1, 0.9)},
                             1e-5, 1e-6);
  }));
  rep.checks.push_back(run_check("implicit_function_theorem_value_gradient", 1e-8, [&] {
    Rng rng = rng_for(o, 32);
    double worst = 0.0;
    for (int inst = 0; inst < 4; ++inst) {
      const Matrix g = inst % 2 ? gammas_between(10, 0.9, rng) : ones_gammas(10);
      worst = std::max(worst, mesa_ifth_gradient_check(rng.normal_matrix(10, 4), rng.normal_matrix(10, 4),
                                                       rng.normal_matrix(10, 3), g, 0.5 + rng.uniform(),
                                                       rng.normal_matrix(10, 3)));
    }
    return worst;
  }));
  for (auto kind : {AttentionKind::kSoftmax, AttentionKind::kLinear, AttentionKind::kMesa}) {
    rep.checks.push_back(run_check(std::string("model_tape_vs_finite_differences_") + attention_kind_name(kind), 1e-5, [&] {
      TransformerConfig cfg;
      cfg.layers = {kind, kind};
      cfg.heads = 2;
      cfg.key_size = 3;
      cfg.token_dim = 4;
      cfg.embed_dim = 6;
      cfg.use_mlp = true;
      cfg.use_layernorm = true;
      cfg.positional = Positional::kFirstLayerConcat;
      cfg.pos_dim = 4;
      cfg.readout = Readout::kOutputEmbedding;
      cfg.readout_dim = 4;
      cfg.init_std = 0.3;
      Rng rng = rng_for(o, 33 + static_cast<std::uint64_t>(kind));
      const ParamMap params = init_params(cfg, rng);
      const Matrix tokens = rng.normal_matrix(6, 4), target = rng.normal_matrix(6, 4);
      auto loss = [&](const ParamMap& p) {
        return 0.5 * std::pow(frobenius_norm(model_forward(p, cfg, tokens).predictions - target), 2);
      };
      Tape tape;
      const ParamVars vars = register_params(tape, params, true);
      const GradMap g = tape.backward(
          ad::squared_error(model_forward_tape(tape, vars, cfg, tokens).predictions, tape.constant(target)));
      ParamMap plus = params, minus = params;
      double analytic = 0.0;
      const double h = 1e-5;
      for (const auto& [name, m] : params) {
        const Matrix dir = rng.normal_matrix(m.rows(), m.cols());
        for (std::size_t i = 0; i < m.size(); ++i) analytic += g.at(name)[i] * dir[i];
        plus[name] = m + dir * h;
        minus[name] = m - dir * h;
      }
      const double numeric = (loss(plus) - loss(minus)) / (2.0 * h);
      return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
    }));
  }
  return rep;
}

inline VerifyReport verify_oracles(const VerifyOptions& o) {
  using namespace verify_detail;
  VerifyReport rep{"oracles", {}};
  rep.checks.push_back(run_check("solve_spd_residual", 1e-10, [&] {
    Rng rng = rng_for(o, 40);
    const Matrix b = rng.normal_matrix(12, 12);
    Matrix a = matmul_nt(b, b);
    for (std::size_t i = 0; i < 12; ++i) a(i, i) += 1.0;
    const Matrix rhs = rng.normal_matrix(12, 3);
    return max_abs_diff(matmul(a, solve_spd(a, rhs)), rhs);
  }));
  rep.checks.push_back(run_check("phi_k_noiseless_prediction", 1e-7, [&] {
    Rng rng = rng_for(o, 41);
    GeneratorSpec spec;
    spec.kind = GeneratorKind::kPartiallyObservedLinear;
    spec.n_h = 15;
    spec.n_s = 5;
    spec.T = 20;
    spec.sigma_h = 0.0;
    const auto b = gen_sequences(spec, 3, rng);
    double worst = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto p = phi_k_optimal(b.teachers[i].w, b.teachers[i].c, 3);
      for (std::size_t t = 2; t + 1 < spec.T; ++t) {
        const Matrix r = concat_window(b.observations[i], t + 1, 3) -
                         matmul(p.phi, concat_window(b.observations[i], t, 3));
        worst = std::max(worst, frobenius_norm(r));
      }
    }
    return worst;
  }));
  rep.checks.push_back(run_check("mle_latent_state_recovery", 1e-6, [&] {
    Rng rng = rng_for(o, 42);
    GeneratorSpec spec;
    spec.kind = GeneratorKind::kPartiallyObservedLinear;
    spec.n_h = 15;
    spec.n_s = 5;
    spec.T = 12;
    spec.sigma_h = 0.0;
    const auto b = gen_sequences(spec, 2, rng);
    double worst = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const Matrix u = mle_state_map(b.teachers[i].w, b.teachers[i].c, 3, 1e-4, 1e-4);
      for (std::size_t t = 2; t < spec.T; ++t) {
        worst = std::max(worst, max_abs_diff(matmul(u, concat_window(b.observations[i], t, 3)),
                                             row_as_column(b.states[i], t)));
      }
    }
    return worst;
  }));
  rep.checks.push_back(run_check("lsq_exact_recovery", 1e-8, [&] {
    Rng rng = rng_for(o, 43);
    const Matrix seq = linear_batch(5, 30, 1, 0.0, rng)[0];
    const auto c = lsq_autoregressive(seq, 1e10);
    double worst = 0.0;
    for (std::size_t t = 6; t < 30; ++t) {
      if (c.valid[t]) worst = std::max(worst, c.loss[t]);
    }
    return worst;
  }));
  rep.checks.push_back(run_check("icl_control_matches_ridge", 1e-12, [&] {
    Rng rng = rng_for(o, 44);
    const auto tasks = gen_icl_tasks(4, 8, 1, rng);
    const auto curve = lsq_icl_curve(tasks, 0.5, false);
    const auto& task = tasks[0];
    const Matrix w = ridge_regressor(transpose(slice_rows(task.x, 0, 5)), transpose(slice_rows(task.y, 0, 5)), 0.5);
    const Matrix pred = matmul(w, row_as_column(task.x, 5));
    double d = 0.0;
    for (std::size_t j = 0; j < 4; ++j) d += std::pow(task.y(5, j) - pred[j], 2);
    return std::abs(curve[5] - 0.5 * d);
  }));
  rep.checks.push_back(run_check("container_round_trip", 0.0, [&] {
    Rng rng = rng_for(o, 45);
    const TensorList t = {tensor_from_matrix("a", rng.normal_matrix(3, 4))};
    const TensorList back = parse_container(serialize_container(t));
    return back[0].data == t[0].data && back[0].dims == t[0].dims ? 0.0 : 1.0;
  }));
  return rep;
}

inline VerifyReport run_suite(const std::string& suite, const VerifyOptions& o = {}) {
  if (suite == "prop1") return verify_prop1(o);
  if (suite == "prop2") return verify_prop2(o);
  if (suite == "mesa") return verify_mesa(o);
  if (suite == "gradients") return verify_gradients(o);
  if (suite == "oracles") return verify_oracles(o);
  if (suite == "all") {
    VerifyReport all{"all", {}};
    for (const auto& s : verify_suites()) {
      for (auto& c : run_suite(s, o).checks) {
        c.name = s + "." + c.name;
        all.checks.push_back(std::move(c));
      }
    }
    return all;
  }
  throw ConfigError("unknown verification suite '" + suite + "'");
}

inline Json to_json(const VerifyReport& r) {
  Json checks = Json::array();
  for (const auto& c : r.checks) {
    checks.push_back({{"name", c.name},
                      {"error", std::isfinite(c.error) ? Json(c.error) : Json(nullptr)},
                      {"tolerance", c.tolerance},
                      {"passed", c.passed},
                      {"message", c.message}});
  }
  return {{"suite", r.suite}, {"passed", r.passed()}, {"checks", checks}};
}

}  // namespace mesa
