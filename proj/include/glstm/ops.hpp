#pragma once

// Differentiable tensor operations. Row-major storage throughout; "rows" are
// the leading dimension and an op that works row-wise treats the remaining
// dimensions as one flattened row.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "glstm/rng.hpp"
#include "glstm/tensor.hpp"

namespace glstm {

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

inline ConstMap cmap(const double* p, std::size_t r, std::size_t c) {
  return ConstMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap mmap(double* p, std::size_t r, std::size_t c) {
  return MutMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

inline void require_rank(const char* op, const Tensor& t, std::size_t r) {
  if (t.rank() != r) {
    throw ShapeError(op, "expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
  }
}

inline std::size_t row_width(const Tensor& t) {
  return t.rank() == 0 || t.dim(0) == 0 ? t.size() : t.size() / t.dim(0);
}

/// Elementwise unary op; `deriv(x, y)` returns dy/dx.
template <typename F, typename D>
Tensor unary(const char* op, const Tensor& x, F f, D deriv) {
  std::vector<double> y(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return make_op_result(op, x.shape(), std::move(y), {x},
                        [deriv](const Node& self, const double* g, std::span<double* const> gin) {
                          const auto& xv = self.inputs[0]->value;
                          const auto& yv = self.value;
                          double* gx = gin[0];
                          for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
                        });
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 * 0.5); }
inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  return make_op_result("add", a.shape(), std::move(y), {a, b},
                        [](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const std::size_t n = self.value.size();
                          for (int k = 0; k < 2; ++k)
                            if (gin[k])
                              for (std::size_t i = 0; i < n; ++i) gin[k][i] += g[i];
                        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  return make_op_result("sub", a.shape(), std::move(y), {a, b},
                        [](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const std::size_t n = self.value.size();
                          if (gin[0])
                            for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[i];
                          if (gin[1])
                            for (std::size_t i = 0; i < n; ++i) gin[1][i] -= g[i];
                        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  return make_op_result("mul", a.shape(), std::move(y), {a, b},
                        [](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const auto& av = self.inputs[0]->value;
                          const auto& bv = self.inputs[1]->value;
                          if (gin[0])
                            for (std::size_t i = 0; i < av.size(); ++i) gin[0][i] += g[i] * bv[i];
                          if (gin[1])
                            for (std::size_t i = 0; i < av.size(); ++i) gin[1][i] += g[i] * av[i];
                        });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("div", a, b);
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] / b[i];
  return make_op_result("div", a.shape(), std::move(y), {a, b},
                        [](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const auto& bv = self.inputs[1]->value;
                          const auto& yv = self.value;
                          if (gin[0])
                            for (std::size_t i = 0; i < bv.size(); ++i) gin[0][i] += g[i] / bv[i];
                          if (gin[1])
                            for (std::size_t i = 0; i < bv.size(); ++i) gin[1][i] -= g[i] * yv[i] / bv[i];
                        });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary("scale", x, [s](double v) { return s * v; },
                       [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary("add_scalar", x, [c](double v) { return v + c; },
                       [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

inline Tensor exp(const Tensor& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); },
                       [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary("log", x, [](double v) { return std::log(v); },
                       [](double v, double) { return 1.0 / v; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

/// Subgradient 0 at the kink.
inline Tensor relu(const Tensor& x) {
  return detail::unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
                       [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  return detail::unary("gelu", x, [](double v) { return v * detail::normal_cdf(v); },
                       [](double v, double) {
                         return detail::normal_cdf(v) + v * detail::normal_pdf(v);
                       });
}

/// Subgradient 0 at the kink.
inline Tensor abs(const Tensor& x) {
  return detail::unary("abs", x, [](double v) { return std::fabs(v); },
                       [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

inline Tensor square(const Tensor& x) {
  return detail::unary("square", x, [](double v) { return v * v; },
                       [](double v, double) { return 2.0 * v; });
}

/// max(x, c) elementwise. d/dx = 1 if x > c else 0 (ties take 0).
inline Tensor max_const(const Tensor& x, double c) {
  return detail::unary("max_const", x, [c](double v) { return v > c ? v : c; },
                       [c](double v, double) { return v > c ? 1.0 : 0.0; });
}

enum class Activation { kNone, kRelu, kGelu, kTanh };

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::kRelu: return relu(x);
    case Activation::kGelu: return gelu(x);
    case Activation::kTanh: return tanh(x);
    case Activation::kNone: break;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Reductions and norms

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op_result("sum", {}, {s}, {x},
                        [](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const std::size_t n = self.inputs[0]->value.size();
                          for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
                        });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// [n, w] -> [n], sum over each row.
inline Tensor row_sum(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("row_sum", "expected rank >= 1");
  const std::size_t n = x.dim(0), w = detail::row_width(x);
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i] += x[i * w + j];
  return make_op_result("row_sum", {n}, std::move(y), {x},
                        [n, w](const detail::Node&, const double* g, std::span<double* const> gin) {
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < w; ++j) gin[0][i * w + j] += g[i];
                        });
}

/// [n, w] -> [w], mean over rows.
inline Tensor row_mean(const Tensor& x) {
  detail::require_rank("row_mean", x, 2);
  const std::size_t n = x.dim(0), w = x.dim(1);
  std::vector<double> y(w, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) y[j] += x[i * w + j];
  for (double& v : y) v /= static_cast<double>(n);
  return make_op_result("row_mean", {w}, std::move(y), {x},
                        [n, w](const detail::Node&, const double* g, std::span<double* const> gin) {
                          const double inv = 1.0 / static_cast<double>(n);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < w; ++j) gin[0][i * w + j] += g[j] * inv;
                        });
}

inline Tensor l1_norm(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += std::fabs(v);
  return make_op_result("l1_norm", {}, {s}, {x},
                        [](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const auto& xv = self.inputs[0]->value;
                          for (std::size_t i = 0; i < xv.size(); ++i)
                            gin[0][i] += g[0] * (xv[i] > 0 ? 1.0 : (xv[i] < 0 ? -1.0 : 0.0));
                        });
}

/// Gradient at the origin is taken as zero.
inline Tensor l2_norm(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  return make_op_result("l2_norm", {}, {std::sqrt(s)}, {x},
                        [](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const double nrm = self.value[0];
                          if (nrm == 0.0) return;
                          const auto& xv = self.inputs[0]->value;
                          for (std::size_t i = 0; i < xv.size(); ++i) gin[0][i] += g[0] * xv[i] / nrm;
                        });
}

// ---------------------------------------------------------------------------
// Products

/// [m, k] x [k, n] -> [m, n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> y(m * n);
  detail::mmap(y.data(), m, n).noalias() =
      detail::cmap(a.data().data(), m, k) * detail::cmap(b.data().data(), k, n);
  return make_op_result(
      "matmul", {m, n}, std::move(y), {a, b},
      [m, k, n](const detail::Node& self, const double* g, std::span<double* const> gin) {
        auto G = detail::cmap(g, m, n);
        if (gin[0])
          detail::mmap(gin[0], m, k).noalias() +=
              G * detail::cmap(self.inputs[1]->value.data(), k, n).transpose();
        if (gin[1])
          detail::mmap(gin[1], k, n).noalias() +=
              detail::cmap(self.inputs[0]->value.data(), m, k).transpose() * G;
      });
}

/// x W^T (+ b): [n, d] x [o, d] -> [n, o]. `b` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
  detail::require_rank("linear", x, 2);
  detail::require_rank("linear", w, 2);
  if (x.dim(1) != w.dim(1)) throw ShapeError("linear", x.shape(), w.shape());
  const std::size_t n = x.dim(0), d = x.dim(1), o = w.dim(0);
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != o)) throw ShapeError("linear", w.shape(), b.shape());
  std::vector<double> y(n * o);
  auto Y = detail::mmap(y.data(), n, o);
  Y.noalias() = detail::cmap(x.data().data(), n, d) * detail::cmap(w.data().data(), o, d).transpose();
  if (has_bias) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < o; ++j) y[i * o + j] += b[j];
  }
  auto backward = [n, d, o](const detail::Node& self, const double* g,
                            std::span<double* const> gin) {
    auto G = detail::cmap(g, n, o);
    if (gin[0])
      detail::mmap(gin[0], n, d).noalias() += G * detail::cmap(self.inputs[1]->value.data(), o, d);
    if (gin[1])
      detail::mmap(gin[1], o, d).noalias() +=
          G.transpose() * detail::cmap(self.inputs[0]->value.data(), n, d);
    if (gin.size() > 2 && gin[2])
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < o; ++j) gin[2][j] += g[i * o + j];
  };
  if (has_bias) return make_op_result("linear", {n, o}, std::move(y), {x, w, b}, backward);
  return make_op_result("linear", {n, o}, std::move(y), {x, w}, backward);
}

/// [m, n] x [n] -> [m]
inline Tensor matvec(const Tensor& m, const Tensor& v) {
  detail::require_rank("matvec", m, 2);
  detail::require_rank("matvec", v, 1);
  if (m.dim(1) != v.dim(0)) throw ShapeError("matvec", m.shape(), v.shape());
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> y(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i] += m[i * c + j] * v[j];
  return make_op_result("matvec", {r}, std::move(y), {m, v},
                        [r, c](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const auto& mv = self.inputs[0]->value;
                          const auto& vv = self.inputs[1]->value;
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) {
                              if (gin[0]) gin[0][i * c + j] += g[i] * vv[j];
                              if (gin[1]) gin[1][j] += g[i] * mv[i * c + j];
                            }
                        });
}

/// a ⊗ b: [p] x [q] -> [p, q]
inline Tensor outer(const Tensor& a, const Tensor& b) {
  detail::require_rank("outer", a, 1);
  detail::require_rank("outer", b, 1);
  const std::size_t p = a.dim(0), q = b.dim(0);
  std::vector<double> y(p * q);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) y[i * q + j] = a[i] * b[j];
  return make_op_result("outer", {p, q}, std::move(y), {a, b},
                        [p, q](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const auto& av = self.inputs[0]->value;
                          const auto& bv = self.inputs[1]->value;
                          for (std::size_t i = 0; i < p; ++i)
                            for (std::size_t j = 0; j < q; ++j) {
                              if (gin[0]) gin[0][i] += g[i * q + j] * bv[j];
                              if (gin[1]) gin[1][j] += g[i * q + j] * av[i];
                            }
                        });
}

/// Row-wise outer products: [E, p] x [E, q] -> [E, p, q]
inline Tensor batched_outer(const Tensor& a, const Tensor& b) {
  detail::require_rank("batched_outer", a, 2);
  detail::require_rank("batched_outer", b, 2);
  if (a.dim(0) != b.dim(0)) throw ShapeError("batched_outer", a.shape(), b.shape());
  const std::size_t e = a.dim(0), p = a.dim(1), q = b.dim(1);
  std::vector<double> y(e * p * q);
  for (std::size_t r = 0; r < e; ++r)
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) y[(r * p + i) * q + j] = a[r * p + i] * b[r * q + j];
  return make_op_result(
      "batched_outer", {e, p, q}, std::move(y), {a, b},
      [e, p, q](const detail::Node& self, const double* g, std::span<double* const> gin) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        for (std::size_t r = 0; r < e; ++r)
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) {
              const double gg = g[(r * p + i) * q + j];
              if (gin[0]) gin[0][r * p + i] += gg * bv[r * q + j];
              if (gin[1]) gin[1][r * q + j] += gg * av[r * p + i];
            }
      });
}

/// Row-wise matrix-vector products: [E, p, q] x [E, q] -> [E, p]
inline Tensor batched_matvec(const Tensor& c, const Tensor& v) {
  detail::require_rank("batched_matvec", c, 3);
  detail::require_rank("batched_matvec", v, 2);
  if (c.dim(0) != v.dim(0) || c.dim(2) != v.dim(1))
    throw ShapeError("batched_matvec", c.shape(), v.shape());
  const std::size_t e = c.dim(0), p = c.dim(1), q = c.dim(2);
  std::vector<double> y(e * p, 0.0);
  for (std::size_t r = 0; r < e; ++r)
    for (std::size_t i = 0; i < p; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < q; ++j) s += c[(r * p + i) * q + j] * v[r * q + j];
      y[r * p + i] = s;
    }
  return make_op_result(
      "batched_matvec", {e, p}, std::move(y), {c, v},
      [e, p, q](const detail::Node& self, const double* g, std::span<double* const> gin) {
        const auto& cv = self.inputs[0]->value;
        const auto& vv = self.inputs[1]->value;
        for (std::size_t r = 0; r < e; ++r)
          for (std::size_t i = 0; i < p; ++i) {
            const double gg = g[r * p + i];
            if (gg == 0.0) continue;
            for (std::size_t j = 0; j < q; ++j) {
              if (gin[0]) gin[0][(r * p + i) * q + j] += gg * vv[r * q + j];
              if (gin[1]) gin[1][r * q + j] += gg * cv[(r * p + i) * q + j];
            }
          }
      });
}

/// Row-wise dot products: [n, d] x [n, d] -> [n]
inline Tensor row_dot(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("row_dot", a, b);
  if (a.rank() < 1) throw ShapeError("row_dot", "expected rank >= 1");
  const std::size_t n = a.dim(0), w = detail::row_width(a);
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i] += a[i * w + j] * b[i * w + j];
  return make_op_result("row_dot", {n}, std::move(y), {a, b},
                        [n, w](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const auto& av = self.inputs[0]->value;
                          const auto& bv = self.inputs[1]->value;
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < w; ++j) {
                              if (gin[0]) gin[0][i * w + j] += g[i] * bv[i * w + j];
                              if (gin[1]) gin[1][i * w + j] += g[i] * av[i * w + j];
                            }
                        });
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

/// [n, d] + [d] -> [n, d]
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  detail::require_rank("add_bias", x, 2);
  if (b.rank() != 1 || b.dim(0) != x.dim(1)) throw ShapeError("add_bias", x.shape(), b.shape());
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> y(x.values());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] += b[j];
  return make_op_result("add_bias", x.shape(), std::move(y), {x, b},
                        [n, d](const detail::Node&, const double* g, std::span<double* const> gin) {
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < d; ++j) {
                              if (gin[0]) gin[0][i * d + j] += g[i * d + j];
                              if (gin[1]) gin[1][j] += g[i * d + j];
                            }
                        });
}

/// Multiplies row i of x (any trailing shape) by s[i].
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
  if (x.rank() < 1 || s.rank() != 1 || s.dim(0) != x.dim(0))
    throw ShapeError("scale_rows", x.shape(), s.shape());
  const std::size_t n = x.dim(0), w = detail::row_width(x);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * w + j] = x[i * w + j] * s[i];
  return make_op_result("scale_rows", x.shape(), std::move(y), {x, s},
                        [n, w](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const auto& xv = self.inputs[0]->value;
                          const auto& sv = self.inputs[1]->value;
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < w; ++j) {
                              if (gin[0]) gin[0][i * w + j] += g[i * w + j] * sv[i];
                              if (gin[1]) gin[1][i] += g[i * w + j] * xv[i * w + j];
                            }
                        });
}

/// Divides row i of x by s[i].
inline Tensor div_rows(const Tensor& x, const Tensor& s) {
  if (x.rank() < 1 || s.rank() != 1 || s.dim(0) != x.dim(0))
    throw ShapeError("div_rows", x.shape(), s.shape());
  const std::size_t n = x.dim(0), w = detail::row_width(x);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * w + j] = x[i * w + j] / s[i];
  return make_op_result("div_rows", x.shape(), std::move(y), {x, s},
                        [n, w](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const auto& sv = self.inputs[1]->value;
                          const auto& yv = self.value;
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < w; ++j) {
                              if (gin[0]) gin[0][i * w + j] += g[i * w + j] / sv[i];
                              if (gin[1]) gin[1][i] -= g[i * w + j] * yv[i * w + j] / sv[i];
                            }
                        });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) throw ShapeError("reshape", x.shape(), shape);
  return make_op_result("reshape", std::move(shape), x.values(), {x},
                        [](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          for (std::size_t i = 0; i < self.value.size(); ++i) gin[0][i] += g[i];
                        });
}

/// Concatenation along the last axis; leading dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Shape& first = parts[0].shape();
  if (first.empty()) throw ShapeError("concat", "cannot concatenate scalars");
  const std::size_t rows = parts[0].size() / first.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size() ||
        !std::equal(first.begin(), first.end() - 1, p.shape().begin()))
      throw ShapeError("concat", first, p.shape());
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  Shape out_shape = first;
  out_shape.back() = total;
  std::vector<double> y(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < widths[k]; ++j) y[r * total + off + j] = parts[k][r * widths[k] + j];
    off += widths[k];
  }
  return make_op_result(
      "concat", std::move(out_shape), std::move(y), std::span<const Tensor>(parts),
      [rows, total, widths](const detail::Node&, const double* g, std::span<double* const> gin) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (gin[k])
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < widths[k]; ++j) gin[k][r * widths[k] + j] += g[r * total + off + j];
          off += widths[k];
        }
      });
}

inline Tensor concat(const Tensor& a, const Tensor& b) { return concat(std::vector<Tensor>{a, b}); }

/// Slice [begin, end) of the last axis.
inline Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 1 || begin > end || end > x.shape().back())
    throw ShapeError("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                  ") out of bounds for " + shape_str(x.shape()));
  const std::size_t w = x.shape().back(), rows = x.size() / w, sw = end - begin;
  Shape out_shape = x.shape();
  out_shape.back() = sw;
  std::vector<double> y(rows * sw);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < sw; ++j) y[r * sw + j] = x[r * w + begin + j];
  return make_op_result("slice", std::move(out_shape), std::move(y), {x},
                        [rows, w, sw, begin](const detail::Node&, const double* g, std::span<double* const> gin) {
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < sw; ++j) gin[0][r * w + begin + j] += g[r * sw + j];
                        });
}

/// Selects rows: out[i] = x[idx[i]].
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> idx) {
  if (x.rank() < 1) throw ShapeError("gather_rows", "expected rank >= 1");
  const std::size_t n = x.dim(0), w = detail::row_width(x);
  for (std::size_t i : idx)
    if (i >= n) throw ShapeError("gather_rows", "row index " + std::to_string(i) + " out of range");
  Shape out_shape = x.shape();
  out_shape[0] = idx.size();
  std::vector<double> y(idx.size() * w);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(x.data().data() + idx[r] * w, w, y.data() + r * w);
  return make_op_result("gather_rows", std::move(out_shape), std::move(y), {x},
                        [idx = std::move(idx), w](const detail::Node&, const double* g,
                                                  std::span<double* const> gin) {
                          for (std::size_t r = 0; r < idx.size(); ++r)
                            for (std::size_t j = 0; j < w; ++j) gin[0][idx[r] * w + j] += g[r * w + j];
                        });
}

/// out[idx[i]] += y[i]; out has n rows. Accumulation runs in input order.
inline Tensor scatter_add_rows(const Tensor& y, std::vector<std::size_t> idx, std::size_t n) {
  if (y.rank() < 1 || y.dim(0) != idx.size())
    throw ShapeError("scatter_add_rows", y.shape(), Shape{idx.size()});
  const std::size_t w = detail::row_width(y);
  for (std::size_t i : idx)
    if (i >= n) throw ShapeError("scatter_add_rows", "row index " + std::to_string(i) + " out of range");
  Shape out_shape = y.shape();
  out_shape[0] = n;
  std::vector<double> out(n * w, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < w; ++j) out[idx[r] * w + j] += y[r * w + j];
  return make_op_result("scatter_add_rows", std::move(out_shape), std::move(out), {y},
                        [idx = std::move(idx), w](const detail::Node&, const double* g,
                                                  std::span<double* const> gin) {
                          for (std::size_t r = 0; r < idx.size(); ++r)
                            for (std::size_t j = 0; j < w; ++j) gin[0][r * w + j] += g[idx[r] * w + j];
                        });
}

// ---------------------------------------------------------------------------
// Sparse aggregation

/// Constant CSR matrix used for message passing.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<std::size_t> col;
  std::vector<double> weight;

  std::size_t nnz() const { return col.size(); }
};

/// S x: [rows, cols] (constant) x [cols, w] -> [rows, w]
inline Tensor sparse_matmul(std::shared_ptr<const SparseMatrix> s, const Tensor& x) {
  if (x.rank() < 1 || x.dim(0) != s->cols)
    throw ShapeError("sparse_matmul", Shape{s->rows, s->cols}, x.shape());
  const std::size_t w = detail::row_width(x);
  Shape out_shape = x.shape();
  out_shape[0] = s->rows;
  std::vector<double> y(s->rows * w, 0.0);
  const double* xv = x.data().data();
  for (std::size_t r = 0; r < s->rows; ++r)
    for (std::size_t e = s->row_ptr[r]; e < s->row_ptr[r + 1]; ++e) {
      const double a = s->weight[e];
      const double* src = xv + s->col[e] * w;
      double* dst = y.data() + r * w;
      for (std::size_t j = 0; j < w; ++j) dst[j] += a * src[j];
    }
  return make_op_result("sparse_matmul", std::move(out_shape), std::move(y), {x},
                        [s, w](const detail::Node&, const double* g, std::span<double* const> gin) {
                          for (std::size_t r = 0; r < s->rows; ++r)
                            for (std::size_t e = s->row_ptr[r]; e < s->row_ptr[r + 1]; ++e) {
                              const double a = s->weight[e];
                              double* dst = gin[0] + s->col[e] * w;
                              const double* src = g + r * w;
                              for (std::size_t j = 0; j < w; ++j) dst[j] += a * src[j];
                            }
                        });
}

/// Directed (src -> dst) pairs for edge-wise aggregation.
struct EdgeList {
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;

  std::size_t size() const { return src.size(); }
};

namespace detail {

inline void require_edges(const char* op, const Tensor& w, const EdgeList& edges, std::size_t n_in,
                          std::size_t n_out) {
  if (w.rank() != 1 || w.dim(0) != edges.size()) throw ShapeError(op, w.shape(), Shape{edges.size()});
  for (std::size_t e = 0; e < edges.size(); ++e)
    if (edges.src[e] >= n_in || edges.dst[e] >= n_out)
      throw ShapeError(op, "edge " + std::to_string(e) + " endpoint out of range");
}

}  // namespace detail

/// out[dst[e]] += w[e] * x[src[e]]: [E], [n_in, d] -> [n_out, d]. Edges are
/// accumulated in list order.
inline Tensor edge_weighted_sum(const Tensor& w, const Tensor& x, std::shared_ptr<const EdgeList> edges,
                                std::size_t n_out) {
  detail::require_rank("edge_weighted_sum", x, 2);
  detail::require_edges("edge_weighted_sum", w, *edges, x.dim(0), n_out);
  const std::size_t d = x.dim(1);
  std::vector<double> y(n_out * d, 0.0);
  const double* xv = x.data().data();
  for (std::size_t e = 0; e < edges->size(); ++e) {
    const double a = w[e];
    const double* src = xv + edges->src[e] * d;
    double* dst = y.data() + edges->dst[e] * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] += a * src[j];
  }
  return make_op_result(
      "edge_weighted_sum", {n_out, d}, std::move(y), {w, x},
      [edges, d](const detail::Node& self, const double* g, std::span<double* const> gin) {
        const auto& wv = self.inputs[0]->value;
        const auto& xv = self.inputs[1]->value;
        for (std::size_t e = 0; e < edges->size(); ++e) {
          const double* ge = g + edges->dst[e] * d;
          const std::size_t s = edges->src[e] * d;
          if (gin[0]) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += ge[j] * xv[s + j];
            gin[0][e] += acc;
          }
          if (gin[1])
            for (std::size_t j = 0; j < d; ++j) gin[1][s + j] += wv[e] * ge[j];
        }
      });
}

/// out[dst[e]] += w[e] * a[src[e]] ⊗ b[src[e]]:
/// [E], [n_in, p], [n_in, q] -> [n_out, p, q]
inline Tensor edge_outer_sum(const Tensor& w, const Tensor& a, const Tensor& b,
                             std::shared_ptr<const EdgeList> edges, std::size_t n_out) {
  detail::require_rank("edge_outer_sum", a, 2);
  detail::require_rank("edge_outer_sum", b, 2);
  if (a.dim(0) != b.dim(0)) throw ShapeError("edge_outer_sum", a.shape(), b.shape());
  detail::require_edges("edge_outer_sum", w, *edges, a.dim(0), n_out);
  const std::size_t p = a.dim(1), q = b.dim(1);
  std::vector<double> y(n_out * p * q, 0.0);
  for (std::size_t e = 0; e < edges->size(); ++e) {
    const double* av = a.data().data() + edges->src[e] * p;
    const double* bv = b.data().data() + edges->src[e] * q;
    double* out = y.data() + edges->dst[e] * p * q;
    for (std::size_t i = 0; i < p; ++i) {
      const double s = w[e] * av[i];
      for (std::size_t j = 0; j < q; ++j) out[i * q + j] += s * bv[j];
    }
  }
  return make_op_result(
      "edge_outer_sum", {n_out, p, q}, std::move(y), {w, a, b},
      [edges, p, q](const detail::Node& self, const double* g, std::span<double* const> gin) {
        const auto& wv = self.inputs[0]->value;
        const auto& av = self.inputs[1]->value;
        const auto& bv = self.inputs[2]->value;
        std::vector<double> gb(p);
        for (std::size_t e = 0; e < edges->size(); ++e) {
          const double* ge = g + edges->dst[e] * p * q;
          const std::size_t sa = edges->src[e] * p, sb = edges->src[e] * q;
          // gb = G b, the gradient contracted with the key
          for (std::size_t i = 0; i < p; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < q; ++j) acc += ge[i * q + j] * bv[sb + j];
            gb[i] = acc;
          }
          if (gin[0]) {
            double acc = 0.0;
            for (std::size_t i = 0; i < p; ++i) acc += gb[i] * av[sa + i];
            gin[0][e] += acc;
          }
          if (gin[1])
            for (std::size_t i = 0; i < p; ++i) gin[1][sa + i] += wv[e] * gb[i];
          if (gin[2])
            for (std::size_t i = 0; i < p; ++i) {
              const double s = wv[e] * av[sa + i];
              for (std::size_t j = 0; j < q; ++j) gin[2][sb + j] += s * ge[i * q + j];
            }
        }
      });
}

/// Running max over a set, per output row and column:
///   out[u, c] = max( extra[u, c], values[s, c] for s in sets row u )
/// Candidates are visited as (extra, then set members in stored order) and the
/// first maximal one wins, so ties go to the lowest input index. The gradient
/// reaches only that argmax. `extra` may be undefined; `sets` weights unused.
inline Tensor set_max(const Tensor& values, std::shared_ptr<const SparseMatrix> sets,
                      const Tensor& extra = Tensor()) {
  if (values.rank() < 1 || values.dim(0) != sets->cols)
    throw ShapeError("set_max", values.shape(), Shape{sets->rows, sets->cols});
  const std::size_t w = detail::row_width(values), m = sets->rows;
  const bool has_extra = extra.defined();
  if (has_extra && (extra.rank() < 1 || extra.dim(0) != m || detail::row_width(extra) != w))
    throw ShapeError("set_max", values.shape(), extra.shape());
  Shape out_shape = values.shape();
  out_shape[0] = m;
  std::vector<double> y(m * w);
  // -1 marks `extra`, otherwise the winning row of `values`.
  std::vector<std::ptrdiff_t> arg(m * w);
  for (std::size_t u = 0; u < m; ++u)
    for (std::size_t c = 0; c < w; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      std::ptrdiff_t who = -2;
      if (has_extra) {
        best = extra[u * w + c];
        who = -1;
      }
      for (std::size_t e = sets->row_ptr[u]; e < sets->row_ptr[u + 1]; ++e) {
        const double v = values[sets->col[e] * w + c];
        if (who == -2 || v > best) {
          best = v;
          who = static_cast<std::ptrdiff_t>(sets->col[e]);
        }
      }
      if (who == -2) throw ShapeError("set_max", "empty candidate set for row " + std::to_string(u));
      y[u * w + c] = best;
      arg[u * w + c] = who;
    }
  auto backward = [arg = std::move(arg), w, m](const detail::Node&, const double* g,
                                               std::span<double* const> gin) {
    for (std::size_t u = 0; u < m; ++u)
      for (std::size_t c = 0; c < w; ++c) {
        const std::ptrdiff_t who = arg[u * w + c];
        if (who == -1) {
          if (gin.size() > 1 && gin[1]) gin[1][u * w + c] += g[u * w + c];
        } else if (gin[0]) {
          gin[0][static_cast<std::size_t>(who) * w + c] += g[u * w + c];
        }
      }
  };
  if (has_extra) return make_op_result("set_max", std::move(out_shape), std::move(y), {values, extra}, backward);
  return make_op_result("set_max", std::move(out_shape), std::move(y), {values}, backward);
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-row normalization of `groups` equal contiguous column groups with an
/// optional per-column affine map. gamma/beta may be undefined.
inline Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma = Tensor(),
                         const Tensor& beta = Tensor(), double eps = 1e-5) {
  detail::require_rank("group_norm", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (groups == 0 || d % groups != 0)
    throw ShapeError("group_norm", "width " + std::to_string(d) + " not divisible into " +
                                       std::to_string(groups) + " groups");
  if (gamma.defined() && (gamma.rank() != 1 || gamma.dim(0) != d)) throw ShapeError("group_norm", x.shape(), gamma.shape());
  if (beta.defined() && (beta.rank() != 1 || beta.dim(0) != d)) throw ShapeError("group_norm", x.shape(), beta.shape());
  const std::size_t gs = d / groups;
  std::vector<double> y(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < groups; ++g) {
      const double* xs = x.data().data() + i * d + g * gs;
      double mu = 0.0;
      for (std::size_t j = 0; j < gs; ++j) mu += xs[j];
      mu /= static_cast<double>(gs);
      double var = 0.0;
      for (std::size_t j = 0; j < gs; ++j) var += (xs[j] - mu) * (xs[j] - mu);
      var /= static_cast<double>(gs);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < gs; ++j) {
        const std::size_t col = g * gs + j;
        double v = (xs[j] - mu) * inv;
        if (gamma.defined()) v *= gamma[col];
        if (beta.defined()) v += beta[col];
        y[i * d + col] = v;
      }
    }
  const bool has_gamma = gamma.defined(), has_beta = beta.defined();
  auto backward = [n, d, gs, groups, eps, has_gamma, has_beta](
                      const detail::Node& self, const double* gout, std::span<double* const> gin) {
    const auto& xv = self.inputs[0]->value;
    const std::vector<double>* gam = has_gamma ? &self.inputs[1]->value : nullptr;
    double* g_gamma = has_gamma ? gin[1] : nullptr;
    double* g_beta = has_beta ? gin[has_gamma ? 2 : 1] : nullptr;
    std::vector<double> xhat(gs), dxhat(gs);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t g = 0; g < groups; ++g) {
        const double* xs = xv.data() + i * d + g * gs;
        double mu = 0.0;
        for (std::size_t j = 0; j < gs; ++j) mu += xs[j];
        mu /= static_cast<double>(gs);
        double var = 0.0;
        for (std::size_t j = 0; j < gs; ++j) var += (xs[j] - mu) * (xs[j] - mu);
        var /= static_cast<double>(gs);
        const double inv = 1.0 / std::sqrt(var + eps);
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < gs; ++j) {
          const std::size_t col = g * gs + j;
          const double go = gout[i * d + col];
          xhat[j] = (xs[j] - mu) * inv;
          dxhat[j] = go * (gam ? (*gam)[col] : 1.0);
          if (g_gamma) g_gamma[col] += go * xhat[j];
          if (g_beta) g_beta[col] += go;
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[j];
        }
        if (!gin[0]) continue;
        mean_d /= static_cast<double>(gs);
        mean_dx /= static_cast<double>(gs);
        for (std::size_t j = 0; j < gs; ++j)
          gin[0][i * d + g * gs + j] += inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
      }
  };
  if (has_gamma && has_beta) return make_op_result("group_norm", x.shape(), std::move(y), {x, gamma, beta}, backward);
  if (has_gamma) return make_op_result("group_norm", x.shape(), std::move(y), {x, gamma}, backward);
  if (has_beta) return make_op_result("group_norm", x.shape(), std::move(y), {x, beta}, backward);
  return make_op_result("group_norm", x.shape(), std::move(y), {x}, backward);
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma = Tensor(),
                         const Tensor& beta = Tensor(), double eps = 1e-5) {
  return group_norm(x, 1, gamma, beta, eps);
}

// ---------------------------------------------------------------------------
// Classification helpers

inline Tensor softmax(const Tensor& x) {
  detail::require_rank("softmax", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> y(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (y[i * c + j] = std::exp(x[i * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] /= s;
  }
  return make_op_result("softmax", x.shape(), std::move(y), {x},
                        [n, c](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const auto& yv = self.value;
                          for (std::size_t i = 0; i < n; ++i) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * yv[i * c + j];
                            for (std::size_t j = 0; j < c; ++j)
                              gin[0][i * c + j] += yv[i * c + j] * (g[i * c + j] - dot);
                          }
                        });
}

inline Tensor log_softmax(const Tensor& x) {
  detail::require_rank("log_softmax", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> y(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[i * c + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = x[i * c + j] - lse;
  }
  return make_op_result("log_softmax", x.shape(), std::move(y), {x},
                        [n, c](const detail::Node& self, const double* g, std::span<double* const> gin) {
                          const auto& yv = self.value;
                          for (std::size_t i = 0; i < n; ++i) {
                            double gs = 0.0;
                            for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
                            for (std::size_t j = 0; j < c; ++j)
                              gin[0][i * c + j] += g[i * c + j] - std::exp(yv[i * c + j]) * gs;
                          }
                        });
}

/// out[i] = x[i, labels[i]]
inline Tensor pick(const Tensor& x, std::vector<std::size_t> labels) {
  detail::require_rank("pick", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (labels.size() != n) throw ShapeError("pick", x.shape(), Shape{labels.size()});
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ShapeError("pick", "label " + std::to_string(labels[i]) + " out of range");
    y[i] = x[i * c + labels[i]];
  }
  return make_op_result("pick", {n}, std::move(y), {x},
                        [labels = std::move(labels), c](const detail::Node&, const double* g,
                                                        std::span<double* const> gin) {
                          for (std::size_t i = 0; i < labels.size(); ++i) gin[0][i * c + labels[i]] += g[i];
                        });
}

/// Mean softmax cross-entropy over rows.
inline Tensor cross_entropy(const Tensor& logits, std::vector<std::size_t> labels) {
  return neg(mean(pick(log_softmax(logits), std::move(labels))));
}

/// Mean squared error against a constant target of the same shape.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  return mean(square(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// Dropout

/// x ⊙ mask · scale with a constant mask.
inline Tensor apply_mask(const Tensor& x, std::vector<double> mask, double scale_by = 1.0) {
  if (mask.size() != x.size()) throw ShapeError("apply_mask", x.shape(), Shape{mask.size()});
  for (double& m : mask) m *= scale_by;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * mask[i];
  return make_op_result("apply_mask", x.shape(), std::move(y), {x},
                        [mask = std::move(mask)](const detail::Node&, const double* g,
                                                 std::span<double* const> gin) {
                          for (std::size_t i = 0; i < mask.size(); ++i) gin[0][i] += g[i] * mask[i];
                        });
}

/// Inverted dropout; identity when not training or rate is zero.
inline Tensor dropout(const Tensor& x, double rate, Rng* rng, bool training) {
  if (!training || rate <= 0.0 || rng == nullptr) return x;
  std::vector<double> mask(x.size());
  for (double& m : mask) m = rng->bernoulli(rate) ? 0.0 : 1.0;
  return apply_mask(x, std::move(mask), 1.0 / (1.0 - rate));
}

}  // namespace glstm
