#include <gtest/gtest.h>

#include <cmath>

#include "mesa/constructions.hpp"

using namespace mesa;

namespace {

ParamMap single_head_params(const TransformerConfig& cfg, const HeadParams& h) {
  ParamMap p = zero_params(cfg);
  set_head(p, 0, 0, h);
  return p;
}

Matrix dense_prediction(const Matrix& seq, std::size_t t, double eta, const Matrix& phi0) {
  Matrix padded(seq.rows() + 1, seq.cols());
  for (std::size_t i = 0; i < seq.rows(); ++i)
    for (std::size_t j = 0; j < seq.cols(); ++j) padded(i + 1, j) = seq(i, j);
  // Independent dense gradient: sum over pairs of (Phi0 s_{t'-1} - s_t') s_{t'-1}^T.
  Matrix grad(seq.cols(), seq.cols());
  for (std::size_t tp = 1; tp <= t + 1; ++tp) {
    for (std::size_t i = 0; i < seq.cols(); ++i)
      for (std::size_t j = 0; j < seq.cols(); ++j) {
        double pred = 0.0;
        for (std::size_t m = 0; m < seq.cols(); ++m) pred += phi0(i, m) * padded(tp - 1, m);
        grad(i, j) += (pred - padded(tp, i)) * padded(tp - 1, j);
      }
  }
  return matmul(phi0 - grad * eta, row_as_column(seq, t));
}

}  // namespace

TEST(ConstructedTokens, Layout) {
  const Matrix seq = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
  const auto three = build_constructed_tokens(seq, {TokenChannels::kThree, 2});
  EXPECT_EQ(three, Matrix::from_rows({{0, 0, 1, 2, 0, 0}, {0, 0, 3, 4, 1, 2}, {0, 0, 5, 6, 3, 4}}));
  const auto four = build_constructed_tokens(seq, {TokenChannels::kFour, 2});
  EXPECT_EQ(four.cols(), 8u);
  EXPECT_EQ(four(2, 2), 5.0);
  EXPECT_EQ(four(2, 4), 5.0);
  EXPECT_EQ(four(2, 6), 3.0);
  Rng rng(1);
  EXPECT_EQ(build_constructed_tokens(rng.normal_matrix(4, 10), {TokenChannels::kThree, 10}).cols(), 30u);
  EXPECT_EQ(build_constructed_tokens(rng.normal_matrix(4, 10), {TokenChannels::kFour, 10}).cols(), 40u);
  const Matrix phi = Matrix::from_rows({{0, 1}, {1, 0}});
  EXPECT_EQ(build_constructed_tokens(seq, {TokenChannels::kThree, 2}, &phi)(1, 0), 4.0);
}

TEST(ConcatTokens, Layout) {
  const Matrix seq = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
  EXPECT_EQ(build_concat_tokens(seq, 1), seq);
  const Matrix z2 = build_concat_tokens(seq, 2);
  EXPECT_EQ(z2, Matrix::from_rows({{0, 0, 1, 2}, {1, 2, 3, 4}, {3, 4, 5, 6}}));
  Rng rng(2);
  EXPECT_EQ(build_concat_tokens(rng.normal_matrix(6, 5), 3).cols(), 15u);
  EXPECT_THROW(build_concat_tokens(seq, 0), InvalidSpec);
}

TEST(GdConstruction, ProductsMatchConstruction) {
  Rng rng(3);
  const std::size_t n = 3;
  const Matrix phi0 = rng.normal_matrix(n, n);
  const double eta = 0.7;
  const HeadParams h = prop1_weights(n, eta, phi0);
  const Matrix kq = matmul_tn(h.w_k, h.w_q);
  const Matrix pv = matmul(h.p, h.w_v);
  Matrix want_kq(3 * n, 3 * n), want_pv(3 * n, 3 * n);
  for (std::size_t i = 0; i < n; ++i) want_kq(2 * n + i, n + i) = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    want_pv(i, n + i) = eta;
    for (std::size_t j = 0; j < n; ++j) want_pv(i, 2 * n + j) = -eta * phi0(i, j);
  }
  EXPECT_EQ(kq, want_kq);
  EXPECT_EQ(pv, want_pv);
  const HeadParams z = prop1_weights(n, eta, Matrix(n, n));
  const Matrix pvz = matmul(z.p, z.w_v);
  std::size_t nonzero = 0;
  for (double v : pvz.data()) nonzero += v != 0.0;
  EXPECT_EQ(nonzero, n);
}

TEST(GdConstruction, OracleExamples) {
  const ConstructedTokenSpec spec{TokenChannels::kThree, 2};
  const Matrix zero(2, 2);
  auto first_channel = [&](const Matrix& seq) {
    const Matrix out = prop1_oracle_step(build_constructed_tokens(seq, spec), spec, 1.0, zero);
    return std::make_pair(out(1, 0), out(1, 1));
  };
  EXPECT_EQ(first_channel(Matrix::from_rows({{1, 0}, {0, 1}})), std::make_pair(0.0, 0.0));
  EXPECT_EQ(first_channel(Matrix::from_rows({{1, 0}, {1, 0}})), std::make_pair(1.0, 0.0));
}

TEST(GdConstruction, LinearAttentionEqualsGradientStep) {
  double worst = 0.0;
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(100, static_cast<std::uint64_t>(seed));
    const std::size_t n = 3;
    const Matrix seq = rng.normal_matrix(8, n);
    const Matrix phi0 = rng.normal_matrix(n, n, 0.3);
    const double eta = 0.2;
    for (auto ch : {TokenChannels::kThree, TokenChannels::kFour}) {
      const ConstructedTokenSpec spec{ch, n};
      const Matrix tokens = build_constructed_tokens(seq, spec, &phi0);
      const Matrix via_layer = tokens + linear_attention(tokens, {prop1_weights(n, eta, phi0, ch)});
      const Matrix via_oracle = prop1_oracle_step(tokens, spec, eta, phi0);
      worst = std::max(worst, max_abs_diff(via_layer, via_oracle));
    }
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(GdConstruction, ModelForwardGivesUpdatedPrediction) {
  Rng rng(4);
  const std::size_t n = 4;
  const ConstructedTokenSpec spec{TokenChannels::kThree, n};
  const TransformerConfig cfg = construction_config(spec);
  const Matrix seq = rng.normal_matrix(10, n);
  const Matrix phi0 = rng.normal_matrix(n, n, 0.3);
  const double eta = 0.1;
  const auto out = model_forward(single_head_params(cfg, prop1_weights(n, eta, phi0)), cfg,
                                 build_constructed_tokens(seq, spec, &phi0));
  for (std::size_t t = 0; t < 10; ++t) {
    const Matrix want = dense_prediction(seq, t, eta, phi0);
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(out.predictions(t, j), want[j], 1e-12);
  }
}

TEST(Chebyshev, InitializationAndIdentitySystem) {
  Rng rng(5);
  const Matrix targets = rng.normal_matrix(4, 3);
  Matrix keys = rng.normal_matrix(4, 3);
  const Matrix x0 = chebyshev_solve(keys, targets, IterationParams{{}, {}, 2.0, false});
  EXPECT_EQ(x0, targets);
  for (std::size_t j = 0; j < 3; ++j) keys(0, j) = 0.0;
  const double lambda = 2.5;
  const Matrix x1 = chebyshev_solve(keys, targets, IterationParams{{1.0}, {}, lambda, true});
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(x1(0, j), lambda * targets(0, j), 1e-14);
  EXPECT_THROW(chebyshev_solve(keys, targets, IterationParams{{1.0}, {}, 0.0, true}),
               NonPositiveLambda);
}

TEST(Chebyshev, ErrorDecreasesWithDepth) {
  Rng rng(6);
  const Matrix keys = rng.normal_matrix(30, 5, 0.4);
  const Matrix targets = rng.normal_matrix(30, 5);
  const double lambda = 1.0;
  const Matrix direct = preconditioned_targets_direct(keys, targets, lambda);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t depth : {1u, 3u, 6u}) {
    const IterationParams p{std::vector<double>(depth, 1.0), {}, lambda, true};
    const double err = max_abs_diff(chebyshev_solve(keys, targets, p), direct);
    EXPECT_LT(err, prev) << "K=" << depth;
    prev = err;
  }
}

TEST(PrecondConstruction, LayerMatchesDenseProduct) {
  Rng rng(7);
  const std::size_t n = 3;
  const ConstructedTokenSpec spec{TokenChannels::kThree, n};
  const double alpha = 0.4;
  const Matrix seq = rng.normal_matrix(6, n);
  const Matrix iterate = rng.normal_matrix(6, n);
  // Channels (x^K, x^{K-1}, s_{t-1}).
  Matrix tokens(6, 3 * n);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t j = 0; j < n; ++j) {
      tokens(t, j) = iterate(t, j);
      tokens(t, 2 * n + j) = t > 0 ? seq(t - 1, j) : 0.0;
    }
  const Matrix delta = linear_attention(tokens, {prop2_layer_weights(alpha, spec)});
  for (std::size_t j = 0; j < 3 * n; ++j) EXPECT_EQ(delta(0, j), 0.0);
  for (std::size_t t = 0; t < 6; ++t) {
    Matrix gram(n, n);
    for (std::size_t tp = 1; tp <= t; ++tp) {
      gram += matmul_nt(row_as_column(seq, tp - 1), row_as_column(seq, tp - 1));
    }
    const Matrix want = matmul(gram, row_as_column(iterate, t)) * (-alpha);
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(delta(t, j), want[j], 1e-12);
    for (std::size_t j = n; j < 3 * n; ++j) EXPECT_EQ(delta(t, j), 0.0);
  }
}

TEST(PrecondConstruction, StackMatchesChebyshevThenGradientStep) {
  Rng rng(8);
  const std::size_t n = 4;
  const Matrix seq = rng.normal_matrix(12, n, 0.5);
  const Matrix tokens = build_constructed_tokens(seq, {TokenChannels::kFour, n});
  for (std::size_t depth : {1u, 3u, 5u}) {
    IterationParams p;
    p.lambda = 2.0;
    p.normalize = false;
    for (std::size_t k = 0; k < depth; ++k) {
      p.alphas.push_back(0.15 + 0.01 * static_cast<double>(k));
      p.betas.push_back(k == 0 ? 0.0 : 0.2);
    }
    const Matrix stack = prop2_pipeline_forward(tokens, n, p, 0.5);
    const Matrix oracle = prop2_pipeline_oracle(seq, p, 0.5);
    EXPECT_LE(max_abs_diff(stack, oracle), 1e-8) << "K=" << depth;
  }
}

TEST(Compress, IdempotentOnScaledIdentityBlocks) {
  const std::size_t n = 3;
  const ConstructedTokenSpec spec{TokenChannels::kFour, n};
  TransformerConfig cfg = construction_config(spec, 2);
  cfg.key_size = cfg.value_size = spec.token_dim();
  Matrix kq_s = Matrix::from_rows({{0, 0, 0, 0}, {0, 0.5, 0, 0}, {0, 0, 0, 0}, {0, 1.25, 0, -2}});
  Matrix pv_s = Matrix::from_rows({{0, 0.3, 0, -0.7}, {0, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}});
  ParamMap p = zero_params(cfg);
  for (std::size_t l = 0; l < 2; ++l) {
    const Matrix id = Matrix::identity(spec.token_dim());
    set_head(p, l, 0, HeadParams{expand_scalars(kq_s, n), id, expand_scalars(pv_s, n), id, 1.0});
  }
  const CompressedAlg alg = compress_algorithm(p, cfg, n);
  EXPECT_EQ(alg.scalars_per_head(), 32u);
  EXPECT_LE(max_abs_diff(alg.kq[1][0], kq_s), 1e-15);
  EXPECT_LE(max_abs_diff(alg.pv[0][0], pv_s), 1e-15);
  const auto [ccfg, cparams] = compressed_model(alg, cfg);
  const CompressedAlg again = compress_algorithm(cparams, ccfg, n);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(again.kq[l][0], alg.kq[l][0]);
    EXPECT_EQ(again.pv[l][0], alg.pv[l][0]);
  }
  cfg.layers[1] = AttentionKind::kSoftmax;
  EXPECT_THROW(compress_algorithm(p, cfg, n), NotLinearStack);
}

TEST(Compress, AveragesBlockDiagonals) {
  Rng rng(9);
  const std::size_t n = 2;
  const ConstructedTokenSpec spec{TokenChannels::kThree, n};
  const TransformerConfig cfg = construction_config(spec);
  const ParamMap p = init_params(cfg, rng);
  const CompressedAlg alg = compress_algorithm(p, cfg, n);
  const HeadProducts hp = head_products(p, 0, 0);
  EXPECT_NEAR(alg.kq[0][0](2, 1), 0.5 * (hp.kq(4, 2) + hp.kq(5, 3)), 1e-15);
  EXPECT_NEAR(alg.pv[0][0](0, 2), 0.5 * (hp.pv(0, 4) + hp.pv(1, 5)), 1e-15);
}

TEST(Interpolate, EndpointsAndRefactorInvariance) {
  Rng rng(10);
  const std::size_t n = 3;
  const ConstructedTokenSpec spec{TokenChannels::kThree, n};
  const TransformerConfig cfg = construction_config(spec, 2);
  const ParamMap a = init_params(cfg, rng);
  const ParamMap b = init_params(cfg, rng);
  const Matrix tokens = build_constructed_tokens(rng.normal_matrix(8, n), spec);
  const Matrix fa = model_forward(a, cfg, tokens).predictions;
  const Matrix fb = model_forward(b, cfg, tokens).predictions;
  const auto [c0, p0] = interpolate_products(a, cfg, b, cfg, 0.0);
  const auto [c1, p1] = interpolate_products(a, cfg, b, cfg, 1.0);
  EXPECT_LE(max_abs_diff(model_forward(p0, c0, tokens).predictions, fa), 1e-10);
  EXPECT_LE(max_abs_diff(model_forward(p1, c1, tokens).predictions, fb), 1e-10);
  // Another factorization of the same products: W_q = I, W_k = product^T.
  ParamMap alt = p0;
  for (std::size_t l = 0; l < 2; ++l) {
    const std::string pre = head_prefix(l, 0);
    alt[pre + "W_k"] = transpose(p0.at(pre + "W_q"));
    alt[pre + "W_q"] = Matrix::identity(3 * n);
  }
  EXPECT_LE(max_abs_diff(model_forward(alt, c0, tokens).predictions, fa), 1e-10);
  TransformerConfig other = cfg;
  other.layers.push_back(AttentionKind::kLinear);
  EXPECT_THROW(interpolate_products(a, cfg, init_params(other, rng), other, 0.5), ConfigMismatch);
}
