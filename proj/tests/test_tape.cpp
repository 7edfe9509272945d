#include <gtest/gtest.h>

#include "mesa/attention.hpp"
#include "mesa/rng.hpp"
#include "mesa/tape.hpp"

using namespace mesa;

namespace {

Matrix positive(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.data()) v = 0.5 + std::abs(v);
  return out;
}

// Scalar test functions: a random linear functional of each primitive.
struct PrimitiveCase {
  const char* name;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  std::function<Var(Tape&, const std::vector<Var>&)> body;
  bool positive_inputs = false;
};

std::vector<PrimitiveCase> primitive_cases() {
  using V = const std::vector<Var>&;
  return {
      {"identity", {{3, 2}}, [](Tape&, V x) { return ad::identity(x[0]); }},
      {"matmul", {{3, 4}, {4, 2}}, [](Tape&, V x) { return ad::matmul(x[0], x[1]); }},
      {"matmul_nt", {{3, 4}, {2, 4}}, [](Tape&, V x) { return ad::matmul_nt(x[0], x[1]); }},
      {"add", {{3, 2}, {3, 2}}, [](Tape&, V x) { return ad::add(x[0], x[1]); }},
      {"sub", {{3, 2}, {3, 2}}, [](Tape&, V x) { return ad::sub(x[0], x[1]); }},
      {"mul", {{3, 2}, {3, 2}}, [](Tape&, V x) { return ad::mul(x[0], x[1]); }},
      {"scale", {{3, 2}}, [](Tape&, V x) { return ad::scale(x[0], -1.7); }},
      {"scale_by", {{3, 2}, {1, 1}}, [](Tape&, V x) { return ad::scale_by(x[0], x[1]); }},
      {"add_row", {{3, 2}, {1, 2}}, [](Tape&, V x) { return ad::add_row(x[0], x[1]); }},
      {"softmax", {{4, 4}}, [](Tape&, V x) { return ad::softmax(x[0], true); }},
      {"softmax_full", {{3, 5}}, [](Tape&, V x) { return ad::softmax(x[0], false); }},
      {"gelu", {{3, 3}}, [](Tape&, V x) { return ad::gelu(x[0]); }},
      {"layernorm", {{3, 5}, {1, 5}, {1, 5}},
       [](Tape&, V x) { return ad::layernorm(x[0], x[1], x[2]); }},
      {"sum", {{3, 2}}, [](Tape&, V x) { return ad::sum(x[0]); }},
      {"mean", {{3, 2}}, [](Tape&, V x) { return ad::mean(x[0]); }},
      {"slice_cols", {{3, 5}}, [](Tape&, V x) { return ad::slice_cols(x[0], 1, 3); }},
      {"slice_rows", {{5, 3}}, [](Tape&, V x) { return ad::slice_rows(x[0], 2, 2); }},
      {"concat_cols", {{3, 2}, {3, 1}}, [](Tape&, V x) { return ad::concat_cols(x[0], x[1]); }},
      {"transpose", {{3, 2}}, [](Tape&, V x) { return ad::transpose(x[0]); }},
      {"squared_error", {{3, 2}, {3, 2}}, [](Tape&, V x) { return ad::squared_error(x[0], x[1]); }},
      {"clip", {{4, 3}}, [](Tape&, V x) { return ad::clip(x[0], 0.8); }},
      {"softplus", {{3, 3}}, [](Tape&, V x) { return ad::softplus(x[0]); }},
      {"row_l2_normalize", {{3, 4}}, [](Tape&, V x) { return ad::row_l2_normalize(x[0]); }},
      {"reciprocal", {{2, 3}}, [](Tape&, V x) { return ad::reciprocal(x[0]); }, true},
  };
}

}  // namespace

TEST(Tape, IdentityGraph) {
  Tape tape;
  const Matrix x = Matrix::from_rows({{1, 2}, {3, 4}});
  const Var a = tape.leaf(x, "x");
  const Var y = ad::identity(a);
  EXPECT_EQ(tape.size(), 2u);
  EXPECT_EQ(y.value(), x);
}

TEST(Tape, IdentityMatmul) {
  Tape tape;
  const Matrix v = Matrix::column(std::vector<double>{3, -1});
  const Var y = ad::matmul(tape.constant(Matrix::identity(2)), tape.constant(v));
  EXPECT_EQ(y.value(), v);
}

TEST(Tape, SumGradientIsOnes) {
  Tape tape;
  const Var x = tape.leaf(Matrix(2, 3, 0.7), "x");
  const GradMap g = tape.backward(ad::sum(x));
  EXPECT_EQ(g.at("x"), Matrix(2, 3, 1.0));
}

TEST(Tape, QuadraticGradient) {
  Rng rng(3);
  Tape tape;
  const Matrix xv = rng.normal_matrix(4, 1);
  const Matrix cv = rng.normal_matrix(4, 1);
  const Var x = tape.leaf(xv, "x");
  const GradMap g = tape.backward(ad::squared_error(x, tape.constant(cv)));
  EXPECT_LE(max_abs_diff(g.at("x"), xv - cv), 1e-15);
}

TEST(Tape, UnknownPrimitiveRejected) {
  Tape tape;
  const Var x = tape.leaf(Matrix(1, 1, 1.0), "x");
  EXPECT_THROW(tape.apply(static_cast<Op>(999), {x}), UnknownPrimitive);
  EXPECT_THROW(tape.apply(Op::kLeaf, {x}), UnknownPrimitive);
}

TEST(Tape, CotangentShapeChecked) {
  Tape tape;
  const Var x = tape.leaf(Matrix(2, 2, 1.0), "x");
  EXPECT_THROW(tape.backward(ad::identity(x), Matrix(3, 1)), ShapeMismatch);
}

TEST(Tape, FiniteDiffOfQuadratic) {
  Rng rng(1);
  const ScalarGraph f = [](Tape&, const std::vector<Var>& x) {
    return ad::sum(ad::mul(x[0], x[0]));
  };
  EXPECT_LE(finite_diff_check(f, {rng.normal_matrix(5, 1)}), 1e-7);
}

TEST(Tape, EveryPrimitivePassesFiniteDifferences) {
  Rng rng(123);
  for (const auto& pc : primitive_cases()) {
    for (int point = 0; point < 10; ++point) {
      std::vector<Matrix> x;
      for (auto [r, c] : pc.shapes) {
        Matrix m = rng.normal_matrix(r, c);
        x.push_back(pc.positive_inputs ? positive(m) : m);
      }
      Tape probe;
      std::vector<Var> pl;
      for (const auto& m : x) pl.push_back(probe.constant(m));
      const Matrix out = pc.body(probe, pl).value();
      const Matrix w = rng.normal_matrix(out.rows(), out.cols());
      const ScalarGraph f = [&](Tape& t, const std::vector<Var>& leaves) {
        return ad::sum(ad::mul(pc.body(t, leaves), t.constant(w)));
      };
      EXPECT_LE(finite_diff_check(f, x, 1e-5, 1e-6), 1e-4) << pc.name << " point " << point;
    }
  }
}

TEST(Tape, ReplayMatchesRecordedValues) {
  Rng rng(5);
  for (const auto& pc : primitive_cases()) {
    Tape tape;
    std::vector<Var> leaves;
    for (auto [r, c] : pc.shapes) {
      Matrix m = rng.normal_matrix(r, c);
      leaves.push_back(tape.leaf(pc.positive_inputs ? positive(m) : m, "x"));
    }
    pc.body(tape, leaves);
    EXPECT_TRUE(tape.replay_matches()) << pc.name;
  }
}

// Eager evaluation with plain matrix functions is the oracle for recording.
TEST(Tape, RecordEqualsEagerEvaluation) {
  Rng rng(8);
  const Matrix a = rng.normal_matrix(4, 3), b = rng.normal_matrix(3, 5), c = rng.normal_matrix(4, 5);
  Tape tape;
  const Var y = ad::gelu(ad::add(ad::matmul(tape.leaf(a, "a"), tape.leaf(b, "b")), tape.leaf(c, "c")));
  Matrix eager = matmul(a, b) + c;
  for (double& v : eager.data()) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  EXPECT_EQ(y.value(), eager);
}

TEST(Tape, ThreeLayerCompositeFiniteDifferences) {
  Rng rng(42);
  const Matrix x = rng.normal_matrix(6, 4);
  const Matrix target = rng.normal_matrix(6, 4);
  const ScalarGraph f = [&](Tape& t, const std::vector<Var>& p) {
    Var h = ad::layernorm(t.constant(x), p[3], p[4]);
    h = ad::gelu(ad::matmul_nt(h, p[0]));
    h = ad::matmul(ad::softmax(ad::matmul_nt(h, h), true), h);
    h = ad::matmul_nt(ad::gelu(h), p[1]);
    h = ad::add(h, ad::matmul_nt(ad::softplus(h), p[2]));
    return ad::squared_error(h, t.constant(target));
  };
  std::vector<Matrix> point = {rng.normal_matrix(5, 4) * 0.5, rng.normal_matrix(4, 5) * 0.5,
                               rng.normal_matrix(4, 4) * 0.5, rng.normal_matrix(1, 4),
                               rng.normal_matrix(1, 4)};
  EXPECT_LE(finite_diff_check(f, point, 1e-5, 1e-6), 1e-5);
}

TEST(Tape, BackwardIsLinearInCotangent) {
  Rng rng(77);
  Tape tape;
  const Var w = tape.leaf(rng.normal_matrix(3, 3), "w");
  const Var x = tape.leaf(rng.normal_matrix(4, 3), "x");
  const Var y = ad::gelu(ad::matmul(ad::softmax(ad::matmul_nt(x, x), true), ad::transpose(ad::matmul(w, ad::transpose(x)))));
  const Matrix u = rng.normal_matrix(y.rows(), y.cols()), v = rng.normal_matrix(y.rows(), y.cols());
  const double al = 0.3, be = -1.9;
  const GradMap gu = tape.backward(y, u), gv = tape.backward(y, v);
  const GradMap gc = tape.backward(y, u * al + v * be);
  for (const auto& [name, g] : gc) {
    EXPECT_LE(max_abs_diff(g, gu.at(name) * al + gv.at(name) * be), 1e-10) << name;
  }
}

TEST(Tape, UnreachableParameterHasZeroGradient) {
  Tape tape;
  const Var a = tape.leaf(Matrix(2, 2, 1.5), "a");
  tape.leaf(Matrix(3, 1, 2.0), "unused");
  const GradMap g = tape.backward(ad::sum(ad::mul(a, a)));
  ASSERT_EQ(g.count("unused"), 1u);
  EXPECT_EQ(g.at("unused"), Matrix(3, 1));
}

TEST(Tape, ClipSubgradient) {
  Tape tape;
  const Var x = tape.leaf(Matrix::from_rows({{10.0, 1.0, -7.0}}), "x");
  const Var y = ad::clip(x, 4.0);
  EXPECT_EQ(y.value(), Matrix::from_rows({{4.0, 1.0, -4.0}}));
  EXPECT_EQ(tape.backward(ad::sum(y)).at("x"), Matrix::from_rows({{0.0, 1.0, 0.0}}));
}

TEST(Tape, SoftmaxIgnoresMaskedLogits) {
  Tape tape;
  const Var x = tape.leaf(Matrix::from_rows({{0.3, 100.0}, {0.1, 0.2}}), "x");
  const Var y = ad::softmax(x, true);
  EXPECT_EQ(y.value()(0, 0), 1.0);
  EXPECT_EQ(y.value()(0, 1), 0.0);
}

TEST(Tape, MesaPrimitiveFiniteDifferences) {
  Rng rng(31);
  for (int inst = 0; inst < 3; ++inst) {
    const std::size_t t = 6, n = 3;
    Matrix gam(t, 1);
    for (double& g : gam.data()) g = 0.85 + 0.15 * rng.uniform();
    std::vector<Matrix> point = {rng.normal_matrix(t, n), rng.normal_matrix(t, n),
                                 rng.normal_matrix(t, 2), gam, Matrix(1, 1, 0.8)};
    const Matrix w = rng.normal_matrix(t, 2);
    const ScalarGraph f = [&](Tape& tp, const std::vector<Var>& x) {
      return ad::sum(ad::mul(ad::mesa_head(x[0], x[1], x[2], x[3], x[4]), tp.constant(w)));
    };
    EXPECT_LE(finite_diff_check(f, point, 1e-5, 1e-6), 1e-4);
  }
}
