#include "avw2/autodiff/ops.h"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "avw2/error.h"

namespace avw2::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
using Grads = std::span<std::vector<T>*>;

[[noreturn]] void shapeError(const char* op, const Shape& a, const Shape& b,
                             const std::string& detail = "") {
  fail(ErrorKind::Shape, std::string(op) + ": incompatible shapes " + shapeString(a) +
                             " and " + shapeString(b) + (detail.empty() ? "" : " (" + detail + ")"));
}

[[noreturn]] void shapeError(const char* op, const Shape& a, const std::string& detail) {
  fail(ErrorKind::Shape, std::string(op) + ": bad shape " + shapeString(a) + " (" + detail + ")");
}

int normAxis(const char* op, const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    shapeError(op, s, "axis " + std::to_string(axis) + " out of range");
  }
  return a;
}

std::int64_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::int64_t n = 1;
  for (std::size_t i = from; i < to; ++i) {
    n *= s[i];
  }
  return n;
}

struct BroadcastPlan {
  Shape out;
  bool same = true;
  std::vector<std::int64_t> ia, ib;
};

BroadcastPlan planBroadcast(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  plan.same = false;
  const std::size_t r = std::max(a.size(), b.size());
  plan.out.assign(r, 1);
  std::vector<std::int64_t> sa(r, 0), sb(r, 0);
  std::int64_t stA = 1, stB = 1;
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t i = r - 1 - k;
    const std::int64_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::int64_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      shapeError(op, a, b, "not broadcastable");
    }
    plan.out[i] = std::max(da, db);
    sa[i] = da == 1 ? 0 : stA;
    sb[i] = db == 1 ? 0 : stB;
    stA *= da;
    stB *= db;
  }
  const std::int64_t n = numel(plan.out);
  plan.ia.resize(n);
  plan.ib.resize(n);
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t offA = 0, offB = 0;
  for (std::int64_t f = 0; f < n; ++f) {
    plan.ia[f] = offA;
    plan.ib[f] = offB;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      offA += sa[k];
      offB += sb[k];
      if (idx[k] < plan.out[k]) {
        break;
      }
      offA -= sa[k] * idx[k];
      offB -= sb[k] * idx[k];
      idx[k] = 0;
    }
  }
  return plan;
}

// f(x, y) forward; da(x, y) and db(x, y) partial derivatives.
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  auto plan = std::make_shared<BroadcastPlan>(planBroadcast(op, a.shape(), b.shape()));
  const auto& x = a.data();
  const auto& y = b.data();
  const std::int64_t n = numel(plan->out);
  std::vector<T> out(n);
  if (plan->same) {
    for (std::int64_t i = 0; i < n; ++i) {
      out[i] = f(x[i], y[i]);
    }
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      out[i] = f(x[plan->ia[i]], y[plan->ib[i]]);
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return makeResult<T>(op, plan->out, std::move(out), {a, b},
                       [plan, an, bn, da, db](const std::vector<T>& g, Grads<T> gi) {
                         const auto& x = an->value;
                         const auto& y = bn->value;
                         const std::size_t n = g.size();
                         for (std::size_t i = 0; i < n; ++i) {
                           const std::int64_t i0 = plan->same ? i : plan->ia[i];
                           const std::int64_t i1 = plan->same ? i : plan->ib[i];
                           if (gi[0]) {
                             (*gi[0])[i0] += g[i] * da(x[i0], y[i1]);
                           }
                           if (gi[1]) {
                             (*gi[1])[i1] += g[i] * db(x[i0], y[i1]);
                           }
                         }
                       });
}

// f(x) forward; d(x, y) derivative given input and output.
template <typename T, typename F, typename D>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, D d) {
  const auto& v = x.data();
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = f(v[i]);
  }
  auto xn = x.node();
  auto result = makeResult<T>(op, x.shape(), std::move(out), {x}, nullptr);
  if (result.requiresGrad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward = [xn, self, d](const std::vector<T>& g, Grads<T> gi) {
      const auto& v = xn->value;
      const auto& y = self.lock()->value;
      auto& gx = *gi[0];
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i] * d(v[i], y[i]);
      }
    };
  }
  return result;
}

template <typename T>
void requireRankAtLeast(const char* op, const Tensor<T>& x, int r) {
  if (x.rank() < r) {
    shapeError(op, x.shape(), "needs rank >= " + std::to_string(r));
  }
}

} // namespace

std::vector<std::string> opCatalogue() {
  return {"add",        "sub",       "mul",       "div",        "scale",      "exp",
          "log",        "relu",      "gelu",      "logAddExp",  "sum",        "mean",
          "sumLast",    "meanAxis",  "l2NormLast", "matmul",    "transpose",  "reshape",
          "concat",     "slice",     "gatherRows", "replaceRows", "take",     "maskedFill",
          "softmax",    "logSoftmax", "layerNorm", "conv1d",    "conv2d"};
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s) {
  const T k = static_cast<T>(s);
  return unary<T>(
      "scale", x, [k](T v) { return k * v; }, [k](T, T) { return k; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (auto v : x.data()) {
    if (!(v > T(0))) {
      fail(ErrorKind::Domain, "log: non-positive input");
    }
  }
  return unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return unary<T>(
      "gelu", x,
      [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2))); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
        const T pdf = std::exp(T(-0.5) * v * v) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
        return cdf + v * pdf;
      });
}

template <typename T>
Tensor<T> logAddExp(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    shapeError("logAddExp", a.shape(), b.shape());
  }
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T m = std::max(x[i], y[i]);
    out[i] = m + std::log(std::exp(x[i] - m) + std::exp(y[i] - m));
  }
  auto an = a.node();
  auto bn = b.node();
  auto result = makeResult<T>("logAddExp", a.shape(), std::move(out), {a, b}, nullptr);
  if (result.requiresGrad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward = [an, bn, self](const std::vector<T>& g, Grads<T> gi) {
      const auto& out = self.lock()->value;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (gi[0]) {
          (*gi[0])[i] += g[i] * std::exp(an->value[i] - out[i]);
        }
        if (gi[1]) {
          (*gi[1])[i] += g[i] * std::exp(bn->value[i] - out[i]);
        }
      }
    };
  }
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.data()) {
    s += v;
  }
  return makeResult<T>("sum", {}, {s}, {x}, [](const std::vector<T>& g, Grads<T> gi) {
    for (auto& v : *gi[0]) {
      v += g[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T n = static_cast<T>(x.numel());
  T s = 0;
  for (auto v : x.data()) {
    s += v;
  }
  return makeResult<T>("mean", {}, {s / n}, {x}, [n](const std::vector<T>& g, Grads<T> gi) {
    for (auto& v : *gi[0]) {
      v += g[0] / n;
    }
  });
}

template <typename T>
Tensor<T> sumLast(const Tensor<T>& x) {
  requireRankAtLeast("sumLast", x, 1);
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  Shape outShape(x.shape().begin(), x.shape().end() - 1);
  std::vector<T> out(rows, T(0));
  const auto& v = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      s += v[r * d + j];
    }
    out[r] = s;
  }
  return makeResult<T>("sumLast", outShape, std::move(out), {x},
                       [d, rows](const std::vector<T>& g, Grads<T> gi) {
                         auto& gx = *gi[0];
                         for (std::int64_t r = 0; r < rows; ++r) {
                           for (std::int64_t j = 0; j < d; ++j) {
                             gx[r * d + j] += g[r];
                           }
                         }
                       });
}

template <typename T>
Tensor<T> meanAxis(const Tensor<T>& x, int axis) {
  const int a = normAxis("meanAxis", x.shape(), axis);
  const auto& s = x.shape();
  const std::int64_t outer = prod(s, 0, a);
  const std::int64_t n = s[a];
  const std::int64_t inner = prod(s, a + 1, s.size());
  Shape outShape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (static_cast<int>(i) != a) {
      outShape.push_back(s[i]);
    }
  }
  std::vector<T> out(outer * inner, T(0));
  const auto& v = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t k = 0; k < n; ++k) {
      for (std::int64_t i = 0; i < inner; ++i) {
        out[o * inner + i] += v[(o * n + k) * inner + i];
      }
    }
  }
  for (auto& val : out) {
    val /= static_cast<T>(n);
  }
  return makeResult<T>("meanAxis", outShape, std::move(out), {x},
                       [outer, n, inner](const std::vector<T>& g, Grads<T> gi) {
                         auto& gx = *gi[0];
                         const T w = T(1) / static_cast<T>(n);
                         for (std::int64_t o = 0; o < outer; ++o) {
                           for (std::int64_t k = 0; k < n; ++k) {
                             for (std::int64_t i = 0; i < inner; ++i) {
                               gx[(o * n + k) * inner + i] += g[o * inner + i] * w;
                             }
                           }
                         }
                       });
}

template <typename T>
Tensor<T> l2NormLast(const Tensor<T>& x) {
  requireRankAtLeast("l2NormLast", x, 1);
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  Shape outShape = x.shape();
  outShape.back() = 1;
  std::vector<T> out(rows);
  const auto& v = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      s += v[r * d + j] * v[r * d + j];
    }
    out[r] = std::sqrt(s);
  }
  auto xn = x.node();
  auto result = makeResult<T>("l2NormLast", outShape, std::move(out), {x}, nullptr);
  if (result.requiresGrad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward = [xn, self, d, rows](const std::vector<T>& g, Grads<T> gi) {
      const auto& norms = self.lock()->value;
      const auto& v = xn->value;
      auto& gx = *gi[0];
      for (std::int64_t r = 0; r < rows; ++r) {
        if (norms[r] == T(0)) {
          continue;
        }
        for (std::int64_t j = 0; j < d; ++j) {
          gx[r * d + j] += g[r] * v[r * d + j] / norms[r];
        }
      }
    };
  }
  return result;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shapeError("matmul", a.shape(), b.shape());
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), m, n).noalias() =
      ConstMap<T>(a.data().data(), m, k) * ConstMap<T>(b.data().data(), k, n);
  auto an = a.node();
  auto bn = b.node();
  return makeResult<T>("matmul", {m, n}, std::move(out), {a, b},
                       [an, bn, m, k, n](const std::vector<T>& g, Grads<T> gi) {
                         ConstMap<T> gm(g.data(), m, n);
                         if (gi[0]) {
                           MutMap<T>(gi[0]->data(), m, k).noalias() +=
                               gm * ConstMap<T>(bn->value.data(), k, n).transpose();
                         }
                         if (gi[1]) {
                           MutMap<T>(gi[1]->data(), k, n).noalias() +=
                               ConstMap<T>(an->value.data(), m, k).transpose() * gm;
                         }
                       });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) {
    shapeError("transpose", x.shape(), "needs rank 2");
  }
  const std::int64_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  MutMap<T>(out.data(), c, r) = ConstMap<T>(x.data().data(), r, c).transpose();
  return makeResult<T>("transpose", {c, r}, std::move(out), {x},
                       [r, c](const std::vector<T>& g, Grads<T> gi) {
                         MutMap<T>(gi[0]->data(), r, c) += ConstMap<T>(g.data(), c, r).transpose();
                       });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    shapeError("reshape", x.shape(), shape);
  }
  return makeResult<T>("reshape", std::move(shape), x.data(), {x},
                       [](const std::vector<T>& g, Grads<T> gi) {
                         auto& gx = *gi[0];
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           gx[i] += g[i];
                         }
                       });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) {
    fail(ErrorKind::Shape, "concat: no inputs");
  }
  const Shape& s0 = xs[0].shape();
  const int a = normAxis("concat", s0, axis);
  Shape outShape = s0;
  outShape[a] = 0;
  std::vector<std::int64_t> widths;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size()) {
      shapeError("concat", s0, s);
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != a && s[i] != s0[i]) {
        shapeError("concat", s0, s);
      }
    }
    outShape[a] += s[a];
    widths.push_back(prod(s, a, s.size()));
  }
  const std::int64_t outer = prod(s0, 0, a);
  const std::int64_t total = prod(outShape, a, outShape.size());
  std::vector<T> out(outer * total);
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& v = xs[k].data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(v.begin() + o * widths[k], widths[k], out.begin() + o * total + offset);
    }
    offset += widths[k];
  }
  return makeResult<T>("concat", outShape, std::move(out), xs,
                       [widths, outer, total](const std::vector<T>& g, Grads<T> gi) {
                         std::int64_t offset = 0;
                         for (std::size_t k = 0; k < widths.size(); ++k) {
                           if (gi[k]) {
                             auto& gx = *gi[k];
                             for (std::int64_t o = 0; o < outer; ++o) {
                               for (std::int64_t j = 0; j < widths[k]; ++j) {
                                 gx[o * widths[k] + j] += g[o * total + offset + j];
                               }
                             }
                           }
                           offset += widths[k];
                         }
                       });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  const Shape& s = x.shape();
  const int a = normAxis("slice", s, axis);
  if (start < 0 || length <= 0 || start + length > s[a]) {
    shapeError("slice", s,
               "range [" + std::to_string(start) + "," + std::to_string(start + length) +
                   ") on axis " + std::to_string(a));
  }
  const std::int64_t outer = prod(s, 0, a);
  const std::int64_t inner = prod(s, a + 1, s.size());
  const std::int64_t full = s[a] * inner;
  const std::int64_t width = length * inner;
  const std::int64_t off = start * inner;
  Shape outShape = s;
  outShape[a] = length;
  std::vector<T> out(outer * width);
  const auto& v = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(v.begin() + o * full + off, width, out.begin() + o * width);
  }
  return makeResult<T>("slice", outShape, std::move(out), {x},
                       [outer, full, width, off](const std::vector<T>& g, Grads<T> gi) {
                         auto& gx = *gi[0];
                         for (std::int64_t o = 0; o < outer; ++o) {
                           for (std::int64_t j = 0; j < width; ++j) {
                             gx[o * full + off + j] += g[o * width + j];
                           }
                         }
                       });
}

template <typename T>
Tensor<T> gatherRows(const Tensor<T>& x, const std::vector<std::int64_t>& rows) {
  requireRankAtLeast("gatherRows", x, 1);
  const std::int64_t n = x.dim(0);
  const std::int64_t w = x.numel() / n;
  if (rows.empty()) {
    shapeError("gatherRows", x.shape(), "empty index list");
  }
  for (auto r : rows) {
    if (r < 0 || r >= n) {
      shapeError("gatherRows", x.shape(), "row " + std::to_string(r) + " out of range");
    }
  }
  Shape outShape = x.shape();
  outShape[0] = static_cast<std::int64_t>(rows.size());
  std::vector<T> out(rows.size() * w);
  const auto& v = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(v.begin() + rows[i] * w, w, out.begin() + i * w);
  }
  return makeResult<T>("gatherRows", outShape, std::move(out), {x},
                       [rows, w](const std::vector<T>& g, Grads<T> gi) {
                         auto& gx = *gi[0];
                         for (std::size_t i = 0; i < rows.size(); ++i) {
                           for (std::int64_t j = 0; j < w; ++j) {
                             gx[rows[i] * w + j] += g[i * w + j];
                           }
                         }
                       });
}

template <typename T>
Tensor<T> replaceRows(const Tensor<T>& x, const std::vector<std::int64_t>& rows,
                      const Tensor<T>& row) {
  if (x.rank() != 2 || row.rank() != 1 || row.dim(0) != x.dim(1)) {
    shapeError("replaceRows", x.shape(), row.shape());
  }
  const std::int64_t n = x.dim(0), w = x.dim(1);
  auto replaced = std::make_shared<std::vector<std::uint8_t>>(n, 0);
  for (auto r : rows) {
    if (r < 0 || r >= n) {
      shapeError("replaceRows", x.shape(), "row " + std::to_string(r) + " out of range");
    }
    (*replaced)[r] = 1;
  }
  std::vector<T> out = x.data();
  for (std::int64_t r = 0; r < n; ++r) {
    if ((*replaced)[r]) {
      std::copy_n(row.data().begin(), w, out.begin() + r * w);
    }
  }
  return makeResult<T>("replaceRows", x.shape(), std::move(out), {x, row},
                       [replaced, n, w](const std::vector<T>& g, Grads<T> gi) {
                         for (std::int64_t r = 0; r < n; ++r) {
                           auto* target = (*replaced)[r] ? gi[1] : gi[0];
                           if (!target) {
                             continue;
                           }
                           const std::int64_t base = (*replaced)[r] ? 0 : r * w;
                           for (std::int64_t j = 0; j < w; ++j) {
                             (*target)[base + j] += g[r * w + j];
                           }
                         }
                       });
}

template <typename T>
Tensor<T> take(const Tensor<T>& x, const std::vector<std::int64_t>& flatIndices, T fill) {
  const std::int64_t n = x.numel();
  if (flatIndices.empty()) {
    shapeError("take", x.shape(), "empty index list");
  }
  std::vector<T> out(flatIndices.size());
  for (std::size_t i = 0; i < flatIndices.size(); ++i) {
    const auto k = flatIndices[i];
    if (k < -1 || k >= n) {
      shapeError("take", x.shape(), "index " + std::to_string(k) + " out of range");
    }
    out[i] = k < 0 ? fill : x.data()[k];
  }
  const std::int64_t m = static_cast<std::int64_t>(flatIndices.size());
  return makeResult<T>("take", {m}, std::move(out), {x},
                       [flatIndices](const std::vector<T>& g, Grads<T> gi) {
                         auto& gx = *gi[0];
                         for (std::size_t i = 0; i < flatIndices.size(); ++i) {
                           if (flatIndices[i] >= 0) {
                             gx[flatIndices[i]] += g[i];
                           }
                         }
                       });
}

template <typename T>
Tensor<T> maskedFill(const Tensor<T>& x, const std::vector<std::uint8_t>& mask, T value) {
  if (static_cast<std::int64_t>(mask.size()) != x.numel()) {
    shapeError("maskedFill", x.shape(), "mask has " + std::to_string(mask.size()) + " entries");
  }
  std::vector<T> out = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) {
      out[i] = value;
    }
  }
  return makeResult<T>("maskedFill", x.shape(), std::move(out), {x},
                       [mask](const std::vector<T>& g, Grads<T> gi) {
                         auto& gx = *gi[0];
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           if (!mask[i]) {
                             gx[i] += g[i];
                           }
                         }
                       });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  requireRankAtLeast("softmax", x, 1);
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const auto& v = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * d;
    T* o = out.data() + r * d;
    const T m = *std::max_element(in, in + d);
    T s = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - m);
      s += o[j];
    }
    for (std::int64_t j = 0; j < d; ++j) {
      o[j] /= s;
    }
  }
  auto result = makeResult<T>("softmax", x.shape(), std::move(out), {x}, nullptr);
  if (result.requiresGrad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward = [self, d, rows](const std::vector<T>& g, Grads<T> gi) {
      const auto& y = self.lock()->value;
      auto& gx = *gi[0];
      for (std::int64_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::int64_t j = 0; j < d; ++j) {
          dot += g[r * d + j] * y[r * d + j];
        }
        for (std::int64_t j = 0; j < d; ++j) {
          gx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
        }
      }
    };
  }
  return result;
}

template <typename T>
Tensor<T> logSoftmax(const Tensor<T>& x) {
  requireRankAtLeast("logSoftmax", x, 1);
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const auto& v = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * d;
    const T m = *std::max_element(in, in + d);
    T s = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      s += std::exp(in[j] - m);
    }
    const T lse = m + std::log(s);
    for (std::int64_t j = 0; j < d; ++j) {
      out[r * d + j] = in[j] - lse;
    }
  }
  auto result = makeResult<T>("logSoftmax", x.shape(), std::move(out), {x}, nullptr);
  if (result.requiresGrad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward = [self, d, rows](const std::vector<T>& g, Grads<T> gi) {
      const auto& y = self.lock()->value;
      auto& gx = *gi[0];
      for (std::int64_t r = 0; r < rows; ++r) {
        T gs = 0;
        for (std::int64_t j = 0; j < d; ++j) {
          gs += g[r * d + j];
        }
        for (std::int64_t j = 0; j < d; ++j) {
          gx[r * d + j] += g[r * d + j] - std::exp(y[r * d + j]) * gs;
        }
      }
    };
  }
  return result;
}

template <typename T>
Tensor<T> layerNorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                    double eps) {
  requireRankAtLeast("layerNorm", x, 1);
  const std::int64_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    shapeError("layerNorm", x.shape(), gain.shape(), "gain/bias must match the last axis");
  }
  const std::int64_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto invStd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  const auto& v = x.data();
  const auto& ga = gain.data();
  const auto& be = bias.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T mu = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      mu += v[r * d + j];
    }
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const T c = v[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*invStd)[r] = is;
    for (std::int64_t j = 0; j < d; ++j) {
      const T h = (v[r * d + j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * ga[j] + be[j];
    }
  }
  auto gn = gain.node();
  return makeResult<T>(
      "layerNorm", x.shape(), std::move(out), {x, gain, bias},
      [xhat, invStd, gn, d, rows](const std::vector<T>& g, Grads<T> gi) {
        const auto& ga = gn->value;
        std::vector<T> dh(d);
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* h = xhat->data() + r * d;
          const T* gr = g.data() + r * d;
          if (gi[1] || gi[2]) {
            for (std::int64_t j = 0; j < d; ++j) {
              if (gi[1]) {
                (*gi[1])[j] += gr[j] * h[j];
              }
              if (gi[2]) {
                (*gi[2])[j] += gr[j];
              }
            }
          }
          if (gi[0]) {
            T meanDh = 0, meanDhH = 0;
            for (std::int64_t j = 0; j < d; ++j) {
              dh[j] = gr[j] * ga[j];
              meanDh += dh[j];
              meanDhH += dh[j] * h[j];
            }
            meanDh /= static_cast<T>(d);
            meanDhH /= static_cast<T>(d);
            auto& gx = *gi[0];
            for (std::int64_t j = 0; j < d; ++j) {
              gx[r * d + j] += (*invStd)[r] * (dh[j] - meanDh - h[j] * meanDhH);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv1dParams& p) {
  if (x.rank() != 2) {
    shapeError("conv1d", x.shape(), "input must be [time, channels]");
  }
  const std::int64_t len = x.dim(0), cin = x.dim(1);
  if (weight.rank() != 2 || weight.dim(0) != p.kernel * cin) {
    shapeError("conv1d", x.shape(), weight.shape(), "weight rows must be kernel*Cin");
  }
  const std::int64_t cout = weight.dim(1);
  if (bias.shape() != Shape{cout}) {
    shapeError("conv1d", weight.shape(), bias.shape(), "bias must be [Cout]");
  }
  const std::int64_t padded = len + p.padLeft + p.padRight;
  if (padded < p.kernel || p.stride < 1) {
    shapeError("conv1d", x.shape(), "input shorter than kernel " + std::to_string(p.kernel));
  }
  const std::int64_t outLen = (padded - p.kernel) / p.stride + 1;
  const std::int64_t pw = p.kernel * cin;
  auto patches = std::make_shared<std::vector<T>>(outLen * pw, T(0));
  const auto& v = x.data();
  for (std::int64_t t = 0; t < outLen; ++t) {
    for (std::int64_t j = 0; j < p.kernel; ++j) {
      const std::int64_t src = t * p.stride + j - p.padLeft;
      if (src >= 0 && src < len) {
        std::copy_n(v.begin() + src * cin, cin, patches->begin() + t * pw + j * cin);
      }
    }
  }
  std::vector<T> out(outLen * cout);
  MutMap<T> om(out.data(), outLen, cout);
  om.noalias() = ConstMap<T>(patches->data(), outLen, pw) * ConstMap<T>(weight.data().data(), pw, cout);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), cout);
  auto wn = weight.node();
  return makeResult<T>(
      "conv1d", {outLen, cout}, std::move(out), {x, weight, bias},
      [patches, wn, p, len, cin, cout, outLen, pw](const std::vector<T>& g, Grads<T> gi) {
        ConstMap<T> gm(g.data(), outLen, cout);
        if (gi[1]) {
          MutMap<T>(gi[1]->data(), pw, cout).noalias() +=
              ConstMap<T>(patches->data(), outLen, pw).transpose() * gm;
        }
        if (gi[2]) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gi[2]->data(), cout) += gm.colwise().sum();
        }
        if (gi[0]) {
          RowMat<T> dp = gm * ConstMap<T>(wn->value.data(), pw, cout).transpose();
          auto& gx = *gi[0];
          for (std::int64_t t = 0; t < outLen; ++t) {
            for (std::int64_t j = 0; j < p.kernel; ++j) {
              const std::int64_t src = t * p.stride + j - p.padLeft;
              if (src >= 0 && src < len) {
                for (std::int64_t c = 0; c < cin; ++c) {
                  gx[src * cin + c] += dp(t, j * cin + c);
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dParams& p) {
  if (x.rank() != 4) {
    shapeError("conv2d", x.shape(), "input must be [N, H, W, Cin]");
  }
  const std::int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  const std::int64_t pw = p.kernelH * p.kernelW * cin;
  if (weight.rank() != 2 || weight.dim(0) != pw) {
    shapeError("conv2d", x.shape(), weight.shape(), "weight rows must be kH*kW*Cin");
  }
  const std::int64_t cout = weight.dim(1);
  if (bias.shape() != Shape{cout}) {
    shapeError("conv2d", weight.shape(), bias.shape(), "bias must be [Cout]");
  }
  if (h < p.kernelH || w < p.kernelW || p.stride < 1) {
    shapeError("conv2d", x.shape(), "spatial size smaller than kernel");
  }
  const std::int64_t ho = (h - p.kernelH) / p.stride + 1;
  const std::int64_t wo = (w - p.kernelW) / p.stride + 1;
  const std::int64_t rowsOut = n * ho * wo;
  // Flat source offset of each patch element, shared by forward and backward.
  auto srcIndex = std::make_shared<std::vector<std::int64_t>>(rowsOut * pw);
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const std::int64_t row = (b * ho + oy) * wo + ox;
        std::int64_t col = 0;
        for (std::int64_t ky = 0; ky < p.kernelH; ++ky) {
          for (std::int64_t kx = 0; kx < p.kernelW; ++kx) {
            const std::int64_t base =
                ((b * h + oy * p.stride + ky) * w + ox * p.stride + kx) * cin;
            for (std::int64_t c = 0; c < cin; ++c) {
              (*srcIndex)[row * pw + col++] = base + c;
            }
          }
        }
      }
    }
  }
  auto patches = std::make_shared<std::vector<T>>(rowsOut * pw);
  const auto& v = x.data();
  for (std::size_t i = 0; i < srcIndex->size(); ++i) {
    (*patches)[i] = v[(*srcIndex)[i]];
  }
  std::vector<T> out(rowsOut * cout);
  MutMap<T> om(out.data(), rowsOut, cout);
  om.noalias() = ConstMap<T>(patches->data(), rowsOut, pw) * ConstMap<T>(weight.data().data(), pw, cout);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), cout);
  auto wn = weight.node();
  return makeResult<T>(
      "conv2d", {n, ho, wo, cout}, std::move(out), {x, weight, bias},
      [patches, srcIndex, wn, rowsOut, pw, cout](const std::vector<T>& g, Grads<T> gi) {
        ConstMap<T> gm(g.data(), rowsOut, cout);
        if (gi[1]) {
          MutMap<T>(gi[1]->data(), pw, cout).noalias() +=
              ConstMap<T>(patches->data(), rowsOut, pw).transpose() * gm;
        }
        if (gi[2]) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gi[2]->data(), cout) += gm.colwise().sum();
        }
        if (gi[0]) {
          RowMat<T> dp = gm * ConstMap<T>(wn->value.data(), pw, cout).transpose();
          auto& gx = *gi[0];
          const T* d = dp.data();
          for (std::size_t i = 0; i < srcIndex->size(); ++i) {
            gx[(*srcIndex)[i]] += d[i];
          }
        }
      });
}

#define AVW2_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, double);                                        \
  template Tensor<T> exp(const Tensor<T>&);                                                  \
  template Tensor<T> log(const Tensor<T>&);                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> gelu(const Tensor<T>&);                                                 \
  template Tensor<T> logAddExp(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> sumLast(const Tensor<T>&);                                              \
  template Tensor<T> meanAxis(const Tensor<T>&, int);                                        \
  template Tensor<T> l2NormLast(const Tensor<T>&);                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> transpose(const Tensor<T>&);                                            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                             \
  template Tensor<T> slice(const Tensor<T>&, int, std::int64_t, std::int64_t);               \
  template Tensor<T> gatherRows(const Tensor<T>&, const std::vector<std::int64_t>&);         \
  template Tensor<T> replaceRows(const Tensor<T>&, const std::vector<std::int64_t>&,         \
                                 const Tensor<T>&);                                          \
  template Tensor<T> take(const Tensor<T>&, const std::vector<std::int64_t>&, T);            \
  template Tensor<T> maskedFill(const Tensor<T>&, const std::vector<std::uint8_t>&, T);      \
  template Tensor<T> softmax(const Tensor<T>&);                                              \
  template Tensor<T> logSoftmax(const Tensor<T>&);                                           \
  template Tensor<T> layerNorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                            const Conv1dParams&);                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                            const Conv2dParams&);

AVW2_INSTANTIATE_OPS(float)
AVW2_INSTANTIATE_OPS(double)

} // namespace avw2::ad
