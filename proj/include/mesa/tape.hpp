#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "mesa/error.hpp"
#include "mesa/matrix.hpp"
#include "mesa/mesa_kernel.hpp"

namespace mesa {

using GradMap = std::map<std::string, Matrix>;

enum class Op : int {
  kLeaf = 0,
  kConstant,
  kIdentity,
  kMatMul,
  kMatMulNT,
  kAdd,
  kSub,
  kMul,
  kScale,
  kScaleBy,
  kAddRow,
  kSoftmax,
  kGelu,
  kLayerNorm,
  kSum,
  kMean,
  kSliceCols,
  kSliceRows,
  kConcatCols,
  kTranspose,
  kSquaredError,
  kClip,
  kSoftplus,
  kRowL2Normalize,
  kReciprocal,
  kMesaHead,
  kOpCount
};

inline const char* op_name(Op op) {
  static const char* names[] = {"leaf",      "constant",    "identity",  "matmul",
                                "matmul_nt", "add",         "sub",       "mul",
                                "scale",     "scale_by",    "add_row",   "softmax",
                                "gelu",      "layernorm",   "sum",       "mean",
                                "slice_cols", "slice_rows", "concat_cols", "transpose",
                                "squared_error", "clip",    "softplus",  "row_l2_normalize",
                                "reciprocal", "mesa_head"};
  const int i = static_cast<int>(op);
  return (i >= 0 && i < static_cast<int>(Op::kOpCount)) ? names[i] : "unknown";
}

struct OpAttr {
  double scalar = 0.0;
  std::size_t i0 = 0;
  std::size_t i1 = 0;
  bool flag = false;
};

inline constexpr double kMaskedLogit = -1e30;
inline constexpr double kLayerNormEps = 1e-6;

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
inline double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
inline double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid_scalar(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

namespace detail {

inline void require_shape(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) throw ShapeMismatch(std::string(op) + ": " + a.shape_str() + " vs " + b.shape_str());
}

inline Matrix softmax_rows(const Matrix& x, bool causal) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double z = x(i, j) + ((causal && j > i) ? kMaskedLogit : 0.0);
      y(i, j) = z;
      mx = std::max(mx, z);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      y(i, j) = std::exp(y(i, j) - mx);
      s += y(i, j);
    }
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) /= s;
  }
  return y;
}

// Row-wise standardization; fills rstd (rows x 1) when given.
inline Matrix standardize_rows(const Matrix& x, double eps, Matrix* rstd) {
  Matrix out(x.rows(), x.cols());
  if (rstd) *rstd = Matrix(x.rows(), 1);
  const double d = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mu = 0.0;
    for (double v : x.row(i)) mu += v;
    mu /= d;
    double var = 0.0;
    for (double v : x.row(i)) var += (v - mu) * (v - mu);
    var /= d;
    const double r = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = (x(i, j) - mu) * r;
    if (rstd) (*rstd)[i] = r;
  }
  return out;
}

}  // namespace detail

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  struct Node {
    Op op;
    std::vector<int> inputs;
    Matrix value;
    Matrix saved;
    OpAttr attr;
    std::string name;
    bool needs_grad = false;
  };

  Var leaf(Matrix value, std::string name, bool requires_grad = true) {
    Node n{Op::kLeaf, {}, std::move(value), {}, {}, std::move(name), requires_grad};
    return push(std::move(n));
  }

  Var constant(Matrix value) {
    Node n{Op::kConstant, {}, std::move(value), {}, {}, {}, false};
    return push(std::move(n));
  }

  // Records one primitive application. Every op in the vocabulary goes
  // through here; anything else raises UnknownPrimitive.
  Var apply(Op op, std::vector<Var> inputs, OpAttr attr = {}) {
    if (static_cast<int>(op) <= static_cast<int>(Op::kConstant) ||
        static_cast<int>(op) >= static_cast<int>(Op::kOpCount)) {
      throw UnknownPrimitive("op id " + std::to_string(static_cast<int>(op)));
    }
    Node n;
    n.op = op;
    n.attr = attr;
    for (const Var& v : inputs) {
      if (v.tape != this) throw ShapeMismatch("input belongs to another tape");
      n.inputs.push_back(v.id);
      n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(v.id)].needs_grad;
    }
    n.value = compute(n, &n.saved);
    return push(std::move(n));
  }

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }
  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  // Recomputes every non-leaf node from its recorded inputs and reports
  // whether all values are reproduced bit-exactly.
  bool replay_matches() const {
    std::vector<Matrix> vals(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.op == Op::kLeaf || n.op == Op::kConstant) {
        vals[i] = n.value;
        continue;
      }
      Matrix saved;
      vals[i] = compute_from(n, vals, &saved);
      if (!(vals[i] == n.value)) return false;
    }
    return true;
  }

  // Per-node adjoints of `out` under cotangent `cot`; empty matrices mean zero.
  std::vector<Matrix> adjoints(Var out, const Matrix& cot) const {
    const Node& root = nodes_.at(static_cast<std::size_t>(out.id));
    if (!cot.same_shape(root.value)) {
      throw ShapeMismatch("cotangent " + cot.shape_str() + " vs output " + root.value.shape_str());
    }
    std::vector<Matrix> g(nodes_.size());
    g[static_cast<std::size_t>(out.id)] = cot;
    for (std::size_t i = static_cast<std::size_t>(out.id) + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (g[i].empty() || !n.needs_grad || n.op == Op::kLeaf || n.op == Op::kConstant) continue;
      backprop(n, g[i], g);
    }
    return g;
  }

  // Gradients for every named leaf; unreachable leaves get exact zeros.
  GradMap backward(Var out, const Matrix& cot) const {
    const std::vector<Matrix> g = adjoints(out, cot);
    GradMap result;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.op != Op::kLeaf || n.name.empty() || !n.needs_grad) continue;
      Matrix gi = g[i].empty() ? Matrix(n.value.rows(), n.value.cols()) : g[i];
      auto it = result.find(n.name);
      if (it == result.end()) {
        result.emplace(n.name, std::move(gi));
      } else {
        it->second += gi;
      }
    }
    return result;
  }

  GradMap backward(Var out) const { return backward(out, Matrix(1, 1, 1.0)); }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  Matrix compute(const Node& n, Matrix* saved) const {
    std::vector<const Matrix*> in;
    for (int id : n.inputs) in.push_back(&nodes_[static_cast<std::size_t>(id)].value);
    return evaluate(n.op, in, n.attr, saved);
  }

  Matrix compute_from(const Node& n, const std::vector<Matrix>& vals, Matrix* saved) const {
    std::vector<const Matrix*> in;
    for (int id : n.inputs) in.push_back(&vals[static_cast<std::size_t>(id)]);
    return evaluate(n.op, in, n.attr, saved);
  }

  static void require_arity(Op op, const std::vector<const Matrix*>& in, std::size_t k) {
    if (in.size() != k) {
      throw ShapeMismatch(std::string(op_name(op)) + " expects " + std::to_string(k) + " inputs");
    }
  }

 public:
  static Matrix evaluate(Op op, const std::vector<const Matrix*>& in, const OpAttr& attr,
                         Matrix* saved) {
    switch (op) {
      case Op::kIdentity:
        require_arity(op, in, 1);
        return *in[0];
      case Op::kMatMul:
        require_arity(op, in, 2);
        return matmul(*in[0], *in[1]);
      case Op::kMatMulNT:
        require_arity(op, in, 2);
        return matmul_nt(*in[0], *in[1]);
      case Op::kAdd:
        require_arity(op, in, 2);
        return *in[0] + *in[1];
      case Op::kSub:
        require_arity(op, in, 2);
        return *in[0] - *in[1];
      case Op::kMul:
        require_arity(op, in, 2);
        return hadamard(*in[0], *in[1]);
      case Op::kScale:
        require_arity(op, in, 1);
        return *in[0] * attr.scalar;
      case Op::kScaleBy: {
        require_arity(op, in, 2);
        detail::require_shape(in[1]->rows() == 1 && in[1]->cols() == 1, "scale_by", *in[0], *in[1]);
        return *in[0] * (*in[1])[0];
      }
      case Op::kAddRow: {
        require_arity(op, in, 2);
        const Matrix& a = *in[0];
        const Matrix& b = *in[1];
        detail::require_shape(b.rows() == 1 && b.cols() == a.cols(), "add_row", a, b);
        Matrix y = a;
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j) y(i, j) += b[j];
        return y;
      }
      case Op::kSoftmax:
        require_arity(op, in, 1);
        return detail::softmax_rows(*in[0], attr.flag);
      case Op::kGelu: {
        require_arity(op, in, 1);
        Matrix y(in[0]->rows(), in[0]->cols());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = gelu_scalar((*in[0])[i]);
        return y;
      }
      case Op::kLayerNorm: {
        require_arity(op, in, 3);
        const Matrix& x = *in[0];
        const Matrix& s = *in[1];
        const Matrix& b = *in[2];
        detail::require_shape(s.rows() == 1 && s.cols() == x.cols() && b.same_shape(s),
                              "layernorm", x, s);
        Matrix y = detail::standardize_rows(x, attr.scalar, saved);
        for (std::size_t i = 0; i < y.rows(); ++i)
          for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) = y(i, j) * s[j] + b[j];
        return y;
      }
      case Op::kSum:
        require_arity(op, in, 1);
        return Matrix(1, 1, sum(*in[0]));
      case Op::kMean:
        require_arity(op, in, 1);
        return Matrix(1, 1, sum(*in[0]) / static_cast<double>(std::max<std::size_t>(in[0]->size(), 1)));
      case Op::kSliceCols:
        require_arity(op, in, 1);
        return slice_cols(*in[0], attr.i0, attr.i1);
      case Op::kSliceRows:
        require_arity(op, in, 1);
        return slice_rows(*in[0], attr.i0, attr.i1);
      case Op::kConcatCols:
        require_arity(op, in, 2);
        return concat_cols(*in[0], *in[1]);
      case Op::kTranspose:
        require_arity(op, in, 1);
        return transpose(*in[0]);
      case Op::kSquaredError: {
        require_arity(op, in, 2);
        detail::require_shape(in[0]->same_shape(*in[1]), "squared_error", *in[0], *in[1]);
        double s = 0.0;
        for (std::size_t i = 0; i < in[0]->size(); ++i) {
          const double d = (*in[0])[i] - (*in[1])[i];
          s += d * d;
        }
        return Matrix(1, 1, 0.5 * s);
      }
      case Op::kClip: {
        require_arity(op, in, 1);
        Matrix y = *in[0];
        for (double& v : y.data()) v = std::clamp(v, -attr.scalar, attr.scalar);
        return y;
      }
      case Op::kSoftplus: {
        require_arity(op, in, 1);
        Matrix y(in[0]->rows(), in[0]->cols());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = softplus_scalar((*in[0])[i]);
        return y;
      }
      case Op::kRowL2Normalize: {
        require_arity(op, in, 1);
        Matrix y = *in[0];
        for (std::size_t i = 0; i < y.rows(); ++i) {
          const double nrm = std::max(std::sqrt(dot(y.row(i), y.row(i))), 1e-12);
          for (double& v : y.row(i)) v /= nrm;
        }
        return y;
      }
      case Op::kReciprocal: {
        require_arity(op, in, 1);
        Matrix y(in[0]->rows(), in[0]->cols());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = 1.0 / (*in[0])[i];
        return y;
      }
      case Op::kMesaHead: {
        require_arity(op, in, 5);
        detail::require_shape(in[4]->size() == 1, "mesa_head lambda", *in[4], *in[4]);
        auto fwd = mesa_head_forward(*in[0], *in[1], *in[2], *in[3], (*in[4])[0]);
        if (saved) *saved = std::move(fwd.r_final);
        return std::move(fwd.y);
      }
      default:
        throw UnknownPrimitive(std::string("no forward rule for op ") + op_name(op));
    }
  }

 private:
  static void accumulate(std::vector<Matrix>& g, int id, Matrix m) {
    Matrix& slot = g[static_cast<std::size_t>(id)];
    if (slot.empty()) {
      slot = std::move(m);
    } else {
      slot += m;
    }
  }

  bool wants(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  const Matrix& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  void backprop(const Node& n, const Matrix& gy, std::vector<Matrix>& g) const {
    const auto& in = n.inputs;
    switch (n.op) {
      case Op::kIdentity:
        if (wants(in[0])) accumulate(g, in[0], gy);
        break;
      case Op::kMatMul:
        if (wants(in[0])) accumulate(g, in[0], matmul_nt(gy, val(in[1])));
        if (wants(in[1])) accumulate(g, in[1], matmul_tn(val(in[0]), gy));
        break;
      case Op::kMatMulNT:
        if (wants(in[0])) accumulate(g, in[0], matmul(gy, val(in[1])));
        if (wants(in[1])) accumulate(g, in[1], matmul_tn(gy, val(in[0])));
        break;
      case Op::kAdd:
        if (wants(in[0])) accumulate(g, in[0], gy);
        if (wants(in[1])) accumulate(g, in[1], gy);
        break;
      case Op::kSub:
        if (wants(in[0])) accumulate(g, in[0], gy);
        if (wants(in[1])) accumulate(g, in[1], gy * -1.0);
        break;
      case Op::kMul:
        if (wants(in[0])) accumulate(g, in[0], hadamard(gy, val(in[1])));
        if (wants(in[1])) accumulate(g, in[1], hadamard(gy, val(in[0])));
        break;
      case Op::kScale:
        if (wants(in[0])) accumulate(g, in[0], gy * n.attr.scalar);
        break;
      case Op::kScaleBy:
        if (wants(in[0])) accumulate(g, in[0], gy * val(in[1])[0]);
        if (wants(in[1])) accumulate(g, in[1], Matrix(1, 1, dot(gy.data(), val(in[0]).data())));
        break;
      case Op::kAddRow: {
        if (wants(in[0])) accumulate(g, in[0], gy);
        if (wants(in[1])) {
          Matrix gb(1, gy.cols());
          for (std::size_t i = 0; i < gy.rows(); ++i)
            for (std::size_t j = 0; j < gy.cols(); ++j) gb[j] += gy(i, j);
          accumulate(g, in[1], std::move(gb));
        }
        break;
      }
      case Op::kSoftmax: {
        if (!wants(in[0])) break;
        const Matrix& y = n.value;
        Matrix gx(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          const double s = dot(gy.row(i), y.row(i));
          for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) = y(i, j) * (gy(i, j) - s);
        }
        accumulate(g, in[0], std::move(gx));
        break;
      }
      case Op::kGelu: {
        if (!wants(in[0])) break;
        const Matrix& x = val(in[0]);
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = gy[i] * gelu_grad_scalar(x[i]);
        accumulate(g, in[0], std::move(gx));
        break;
      }
      case Op::kLayerNorm: {
        const Matrix& x = val(in[0]);
        const Matrix& s = val(in[1]);
        const Matrix& rstd = n.saved;
        const std::size_t d = x.cols();
        Matrix xhat = detail::standardize_rows(x, n.attr.scalar, nullptr);
        if (wants(in[1]) || wants(in[2])) {
          Matrix gs(1, d), gb(1, d);
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < d; ++j) {
              gs[j] += gy(i, j) * xhat(i, j);
              gb[j] += gy(i, j);
            }
          if (wants(in[1])) accumulate(g, in[1], std::move(gs));
          if (wants(in[2])) accumulate(g, in[2], std::move(gb));
        }
        if (wants(in[0])) {
          Matrix gx(x.rows(), d);
          for (std::size_t i = 0; i < x.rows(); ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = gy(i, j) * s[j];
              m1 += dh;
              m2 += dh * xhat(i, j);
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              gx(i, j) = rstd[i] * (gy(i, j) * s[j] - m1 - xhat(i, j) * m2);
            }
          }
          accumulate(g, in[0], std::move(gx));
        }
        break;
      }
      case Op::kSum:
        if (wants(in[0])) accumulate(g, in[0], Matrix(val(in[0]).rows(), val(in[0]).cols(), gy[0]));
        break;
      case Op::kMean: {
        const Matrix& x = val(in[0]);
        if (wants(in[0])) {
          accumulate(g, in[0], Matrix(x.rows(), x.cols(), gy[0] / static_cast<double>(x.size())));
        }
        break;
      }
      case Op::kSliceCols: {
        if (!wants(in[0])) break;
        const Matrix& x = val(in[0]);
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < n.attr.i1; ++j) gx(i, n.attr.i0 + j) = gy(i, j);
        accumulate(g, in[0], std::move(gx));
        break;
      }
      case Op::kSliceRows: {
        if (!wants(in[0])) break;
        const Matrix& x = val(in[0]);
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < n.attr.i1; ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) gx(n.attr.i0 + i, j) = gy(i, j);
        accumulate(g, in[0], std::move(gx));
        break;
      }
      case Op::kConcatCols: {
        const std::size_t ca = val(in[0]).cols();
        if (wants(in[0])) accumulate(g, in[0], slice_cols(gy, 0, ca));
        if (wants(in[1])) accumulate(g, in[1], slice_cols(gy, ca, val(in[1]).cols()));
        break;
      }
      case Op::kTranspose:
        if (wants(in[0])) accumulate(g, in[0], transpose(gy));
        break;
      case Op::kSquaredError: {
        Matrix diff = val(in[0]) - val(in[1]);
        diff *= gy[0];
        if (wants(in[1])) accumulate(g, in[1], diff * -1.0);
        if (wants(in[0])) accumulate(g, in[0], std::move(diff));
        break;
      }
      case Op::kClip: {
        if (!wants(in[0])) break;
        const Matrix& x = val(in[0]);
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) {
          gx[i] = (x[i] >= -n.attr.scalar && x[i] <= n.attr.scalar) ? gy[i] : 0.0;
        }
        accumulate(g, in[0], std::move(gx));
        break;
      }
      case Op::kSoftplus: {
        if (!wants(in[0])) break;
        const Matrix& x = val(in[0]);
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = gy[i] * sigmoid_scalar(x[i]);
        accumulate(g, in[0], std::move(gx));
        break;
      }
      case Op::kRowL2Normalize: {
        if (!wants(in[0])) break;
        const Matrix& x = val(in[0]);
        const Matrix& y = n.value;
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i) {
          const double nrm = std::max(std::sqrt(dot(x.row(i), x.row(i))), 1e-12);
          const double proj = dot(y.row(i), gy.row(i));
          for (std::size_t j = 0; j < x.cols(); ++j) gx(i, j) = (gy(i, j) - y(i, j) * proj) / nrm;
        }
        accumulate(g, in[0], std::move(gx));
        break;
      }
      case Op::kReciprocal: {
        if (!wants(in[0])) break;
        const Matrix& x = val(in[0]);
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = -gy[i] / (x[i] * x[i]);
        accumulate(g, in[0], std::move(gx));
        break;
      }
      case Op::kMesaHead: {
        MesaHeadGrads mg;
        mesa_head_backward_auto(val(in[0]), val(in[1]), val(in[2]), val(in[3]), val(in[4])[0],
                                n.saved, gy, mg);
        if (wants(in[0])) accumulate(g, in[0], std::move(mg.dk));
        if (wants(in[1])) accumulate(g, in[1], std::move(mg.dq));
        if (wants(in[2])) accumulate(g, in[2], std::move(mg.dv));
        if (wants(in[3])) accumulate(g, in[3], std::move(mg.dgamma));
        if (wants(in[4])) accumulate(g, in[4], Matrix(1, 1, mg.dlambda));
        break;
      }
      default:
        throw UnknownPrimitive(std::string("no adjoint for op ") + op_name(n.op));
    }
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

// Graph-building helpers. Each records exactly one primitive.
namespace ad {

inline Var identity(Var a) { return a.tape->apply(Op::kIdentity, {a}); }
inline Var matmul(Var a, Var b) { return a.tape->apply(Op::kMatMul, {a, b}); }
inline Var matmul_nt(Var a, Var b) { return a.tape->apply(Op::kMatMulNT, {a, b}); }
inline Var add(Var a, Var b) { return a.tape->apply(Op::kAdd, {a, b}); }
inline Var sub(Var a, Var b) { return a.tape->apply(Op::kSub, {a, b}); }
inline Var mul(Var a, Var b) { return a.tape->apply(Op::kMul, {a, b}); }
inline Var scale(Var a, double s) { return a.tape->apply(Op::kScale, {a}, OpAttr{s, 0, 0, false}); }
inline Var scale_by(Var a, Var s) { return a.tape->apply(Op::kScaleBy, {a, s}); }
inline Var add_row(Var a, Var b) { return a.tape->apply(Op::kAddRow, {a, b}); }
inline Var softmax(Var a, bool causal) {
  return a.tape->apply(Op::kSoftmax, {a}, OpAttr{0.0, 0, 0, causal});
}
inline Var gelu(Var a) { return a.tape->apply(Op::kGelu, {a}); }
inline Var layernorm(Var x, Var scale, Var offset, double eps = kLayerNormEps) {
  return x.tape->apply(Op::kLayerNorm, {x, scale, offset}, OpAttr{eps, 0, 0, false});
}
inline Var sum(Var a) { return a.tape->apply(Op::kSum, {a}); }
inline Var mean(Var a) { return a.tape->apply(Op::kMean, {a}); }
inline Var slice_cols(Var a, std::size_t c0, std::size_t n) {
  return a.tape->apply(Op::kSliceCols, {a}, OpAttr{0.0, c0, n, false});
}
inline Var slice_rows(Var a, std::size_t r0, std::size_t n) {
  return a.tape->apply(Op::kSliceRows, {a}, OpAttr{0.0, r0, n, false});
}
inline Var concat_cols(Var a, Var b) { return a.tape->apply(Op::kConcatCols, {a, b}); }
inline Var transpose(Var a) { return a.tape->apply(Op::kTranspose, {a}); }
inline Var squared_error(Var a, Var b) { return a.tape->apply(Op::kSquaredError, {a, b}); }
inline Var clip(Var a, double c) { return a.tape->apply(Op::kClip, {a}, OpAttr{c, 0, 0, false}); }
inline Var softplus(Var a) { return a.tape->apply(Op::kSoftplus, {a}); }
inline Var row_l2_normalize(Var a) { return a.tape->apply(Op::kRowL2Normalize, {a}); }
inline Var reciprocal(Var a) { return a.tape->apply(Op::kReciprocal, {a}); }
inline Var mesa_head(Var k, Var q, Var v, Var gammas, Var lambda) {
  return k.tape->apply(Op::kMesaHead, {k, q, v, gammas, lambda});
}

}  // namespace ad

// Builds a scalar graph from leaves x0, x1, ... holding `point`.
using ScalarGraph = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double eval_scalar_graph(const ScalarGraph& f, const std::vector<Matrix>& point) {
  Tape tape;
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < point.size(); ++i) {
    leaves.push_back(tape.leaf(point[i], "x" + std::to_string(i)));
  }
  const Var out = f(tape, leaves);
  if (out.value().size() != 1) throw ShapeMismatch("scalar graph returned " + out.value().shape_str());
  return out.value()[0];
}

inline std::vector<Matrix> scalar_graph_gradient(const ScalarGraph& f,
                                                 const std::vector<Matrix>& point) {
  Tape tape;
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < point.size(); ++i) {
    leaves.push_back(tape.leaf(point[i], "x" + std::to_string(i)));
  }
  const Var out = f(tape, leaves);
  const GradMap g = tape.backward(out);
  std::vector<Matrix> grads;
  for (std::size_t i = 0; i < point.size(); ++i) grads.push_back(g.at("x" + std::to_string(i)));
  return grads;
}

// max over coordinates of |analytic - central difference| / (|central difference| + floor).
inline double finite_diff_check(const ScalarGraph& f, const std::vector<Matrix>& point,
                                double h = 1e-5, double floor = 1e-8) {
  const std::vector<Matrix> analytic = scalar_graph_gradient(f, point);
  double worst = 0.0;
  std::vector<Matrix> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    for (std::size_t j = 0; j < point[i].size(); ++j) {
      const double x0 = point[i][j];
      probe[i][j] = x0 + h;
      const double fp = eval_scalar_graph(f, probe);
      probe[i][j] = x0 - h;
      const double fm = eval_scalar_graph(f, probe);
      probe[i][j] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[i][j] - fd) / (std::abs(fd) + floor));
    }
  }
  return worst;
}

}  // namespace mesa
