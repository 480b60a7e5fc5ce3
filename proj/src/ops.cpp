// SPDX-License-Identifier: Apache-2.0
#include "ted/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ted/errors.hpp"

namespace ted {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

template <typename T>
using Node = detail::Node<T>;

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& p) {
  return p && p->requires_grad;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

std::size_t last_dim(const Shape& s, const char* op) {
  if (s.empty() || s.back() == 0) throw DimensionError(std::string(op) + ": needs a non-empty last axis");
  return s.back();
}

// Tolerance for the row-sum check on probability inputs. 1e-6 in double; in single precision
// a softmax row over V entries may drift by a few ulps per entry.
template <typename T>
double stochastic_tolerance(std::size_t width) {
  return std::max(1e-6, 8.0 * static_cast<double>(width) * std::numeric_limits<T>::epsilon());
}

template <typename T>
void check_row_stochastic(const Tensor<T>& p, const char* name) {
  const std::size_t v = last_dim(p.shape(), "kl_div");
  const auto vals = p.values();
  const double tol = stochastic_tolerance<T>(v);
  for (std::size_t r = 0; r < vals.size() / v; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
      const double x = vals[r * v + i];
      if (!(x >= 0.0)) throw ValidationError(std::string("kl_div: negative or NaN entry in ") + name);
      s += x;
    }
    if (std::abs(s - 1.0) > tol) {
      throw ValidationError(std::string("kl_div: row ") + std::to_string(r) + " of " + name + " sums to " +
                            std::to_string(s));
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!wants_grad<T>(p)) continue;
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (wants_grad<T>(self.parents[0])) {
      auto g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad<T>(self.parents[1])) {
      auto g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants_grad<T>(pa)) {
      auto g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (wants_grad<T>(pb)) {
      auto g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = last_dim(x.shape(), "add_bias");
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  auto xv = x.values();
  auto bv = bias.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % n];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, bias}, [n](Node<T>& self) {
    if (wants_grad<T>(self.parents[0])) {
      auto g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad<T>(self.parents[1])) {
      auto g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  Map<T>(out.data(), m, n).noalias() = MapC<T>(a.values().data(), m, k) * MapC<T>(b.values().data(), k, n);
  return Tensor<T>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    MapC<T> g(self.grad.data(), m, n);
    if (wants_grad<T>(pa)) {
      Map<T>(pa->grad_buffer().data(), m, k).noalias() += g * MapC<T>(pb->value.data(), k, n).transpose();
    }
    if (wants_grad<T>(pb)) {
      Map<T>(pb->grad_buffer().data(), k, n).noalias() += MapC<T>(pa->value.data(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> out(g * m * n);
  for (std::size_t i = 0; i < g; ++i) {
    Map<T>(out.data() + i * m * n, m, n).noalias() =
        MapC<T>(a.values().data() + i * m * k, m, k) * MapC<T>(b.values().data() + i * k * n, k, n);
  }
  return Tensor<T>::make_result({g, m, n}, std::move(out), {a, b}, [g, m, k, n](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (std::size_t i = 0; i < g; ++i) {
      MapC<T> gi(self.grad.data() + i * m * n, m, n);
      if (wants_grad<T>(pa)) {
        Map<T>(pa->grad_buffer().data() + i * m * k, m, k).noalias() +=
            gi * MapC<T>(pb->value.data() + i * k * n, k, n).transpose();
      }
      if (wants_grad<T>(pb)) {
        Map<T>(pb->grad_buffer().data() + i * k * n, k, n).noalias() +=
            MapC<T>(pa->value.data() + i * m * k, m, k).transpose() * gi;
      }
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.rank() != 2) throw DimensionError("linear: weight must be 2-D, got " + shape_str(w.shape()));
  const std::size_t k = last_dim(x.shape(), "linear");
  if (k != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  Tensor<T> y = matmul(x.rank() == 2 ? x : reshape(x, {rows, k}), w);
  if (bias.defined()) y = add_bias(y, bias);
  return x.rank() == 2 ? y : reshape(y, out_shape);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))));
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& p = self.parents[0];
    auto g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = p->value[i];
      const double t = std::tanh(c * (v + a * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
      g[i] += static_cast<T>(self.grad[i] * d);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  const std::size_t n = last_dim(x.shape(), "layer_norm");
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                         " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<T>(rs);
    for (std::size_t i = 0; i < n; ++i) {
      const T h = static_cast<T>((row[i] - mu) * rs);
      xhat[r * n + i] = h;
      out[r * n + i] = h * gv[i] + bv[i];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        if (wants_grad<T>(pg)) {
          auto g = pg->grad_buffer();
          for (std::size_t j = 0; j < self.grad.size(); ++j) g[j % n] += self.grad[j] * xhat[j];
        }
        if (wants_grad<T>(pb)) {
          auto g = pb->grad_buffer();
          for (std::size_t j = 0; j < self.grad.size(); ++j) g[j % n] += self.grad[j];
        }
        if (wants_grad<T>(px)) {
          auto g = px->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
              const double d = static_cast<double>(self.grad[r * n + i]) * pg->value[i];
              mean_d += d;
              mean_dx += d * xhat[r * n + i];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
              const double d = static_cast<double>(self.grad[r * n + i]) * pg->value[i];
              g[r * n + i] += static_cast<T>(rstd[r] * (d - mean_d - xhat[r * n + i] * mean_dx));
            }
          }
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  auto tv = table.values();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return Tensor<T>::make_result({ids.size(), d}, std::move(out), {table}, [d, saved = std::move(saved)](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      T* row = g.data() + static_cast<std::size_t>(saved[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
    }
  });
}

template <typename T>
Tensor<T> softmax_temp(const Tensor<T>& logits, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax_temp: temperature must be > 0");
  const std::size_t v = last_dim(logits.shape(), "softmax_temp");
  const std::size_t rows = logits.numel() / v;
  auto xv = logits.values();
  std::vector<T> out(xv.size());
  const double inv_t = 1.0 / temperature;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t i = 0; i < v; ++i) z += std::exp((row[i] - mx) * inv_t);
    for (std::size_t i = 0; i < v; ++i) out[r * v + i] = static_cast<T>(std::exp((row[i] - mx) * inv_t) / z);
  }
  return Tensor<T>::make_result(logits.shape(), std::move(out), {logits}, [v, rows, inv_t](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < v; ++i) dot += static_cast<double>(self.grad[r * v + i]) * self.value[r * v + i];
      for (std::size_t i = 0; i < v; ++i) {
        const std::size_t j = r * v + i;
        g[j] += static_cast<T>(inv_t * self.value[j] * (self.grad[j] - dot));
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  const std::size_t v = last_dim(logits.shape(), "log_softmax");
  const std::size_t rows = logits.numel() / v;
  auto xv = logits.values();
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t i = 0; i < v; ++i) z += std::exp(row[i] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t i = 0; i < v; ++i) out[r * v + i] = static_cast<T>(row[i] - lse);
  }
  return Tensor<T>::make_result(logits.shape(), std::move(out), {logits}, [v, rows](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t i = 0; i < v; ++i) gs += self.grad[r * v + i];
      for (std::size_t i = 0; i < v; ++i) {
        const std::size_t j = r * v + i;
        g[j] += static_cast<T>(self.grad[j] - std::exp(static_cast<double>(self.value[j])) * gs);
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto xv = x.values();
  double s = 0.0;
  for (T e : xv) s += e;
  return Tensor<T>::make_result({}, {static_cast<T>(s)}, {x}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (auto& e : g) e += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), static_cast<T>(1.0 / static_cast<double>(x.numel())));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mse");
  if (a.numel() == 0) throw DimensionError("mse of empty tensors");
  auto av = a.values();
  auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = static_cast<double>(av[i]) - bv[i];
    s += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(av.size());
  return Tensor<T>::make_result({}, {static_cast<T>(s * inv_n)}, {a, b}, [inv_n](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const double c = 2.0 * inv_n * self.grad[0];
    if (wants_grad<T>(pa)) {
      auto g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(c * (pa->value[i] - pb->value[i]));
    }
    if (wants_grad<T>(pb)) {
      auto g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= static_cast<T>(c * (pa->value[i] - pb->value[i]));
    }
  });
}

template <typename T>
Tensor<T> kl_div(const Tensor<T>& p_target, const Tensor<T>& q, double eps) {
  require_same_shape(p_target, q, "kl_div");
  check_row_stochastic(p_target, "p_target");
  check_row_stochastic(q, "q");
  const std::size_t v = p_target.shape().back();
  const std::size_t rows = p_target.numel() / v;
  auto pv = p_target.values();
  auto qv = q.values();
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] == T(0)) continue;
    s += pv[i] * (std::log(std::max<double>(pv[i], eps)) - std::log(std::max<double>(qv[i], eps)));
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return Tensor<T>::make_result({}, {static_cast<T>(s * inv_rows)}, {p_target, q}, [inv_rows, eps](Node<T>& self) {
    auto& pp = self.parents[0];
    auto& pq = self.parents[1];
    const double c = inv_rows * self.grad[0];
    if (wants_grad<T>(pp)) {
      auto g = pp->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double p = pp->value[i], qq = pq->value[i];
        const double d = std::log(std::max(p, eps)) - std::log(std::max(qq, eps)) + (p > eps ? 1.0 : 0.0);
        g[i] += static_cast<T>(c * d);
      }
    }
    if (wants_grad<T>(pq)) {
      auto g = pq->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double qq = pq->value[i];
        if (qq > eps) g[i] -= static_cast<T>(c * pp->value[i] / qq);
      }
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (n == 0) throw DimensionError("cross_entropy: empty batch");
  for (std::int32_t y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= v) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(v) + ")");
    }
  }
  auto xv = logits.values();
  std::vector<T> probs(xv.size());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = xv.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t i = 0; i < v; ++i) z += std::exp(row[i] - mx);
    for (std::size_t i = 0; i < v; ++i) probs[r * v + i] = static_cast<T>(std::exp(row[i] - mx) / z);
    total += mx + std::log(z) - row[labels[r]];
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<std::int32_t> saved(labels.begin(), labels.end());
  return Tensor<T>::make_result(
      {}, {static_cast<T>(total * inv_n)}, {logits},
      [n, v, inv_n, probs = std::move(probs), saved = std::move(saved)](Node<T>& self) {
        auto g = self.parents[0]->grad_buffer();
        const double c = inv_n * self.grad[0];
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t i = 0; i < v; ++i) {
            const double onehot = static_cast<std::size_t>(saved[r]) == i ? 1.0 : 0.0;
            g[r * v + i] += static_cast<T>(c * (probs[r * v + i] - onehot));
          }
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xv = x.values();
  return Tensor<T>::make_result(std::move(shape), std::vector<T>(xv.begin(), xv.end()), {x}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expects 2-D, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  if (axes.size() != rank) throw DimensionError("permute: axis list does not match " + shape_str(in));
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (axes[i] >= rank || seen[axes[i]]) throw DimensionError("permute: invalid axis list");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  // For each output flat index, the source flat index.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < rank; ++i) s += idx[i] * in_stride[axes[i]];
    src[o] = s;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  auto xv = x.values();
  std::vector<T> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = xv[src[o]];
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {x}, [src = std::move(src)](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
  });
}

template <typename T>
Tensor<T> masked_fill(const Tensor<T>& scores, std::span<const std::uint8_t> allowed, std::size_t heads) {
  if (scores.rank() != 3 || heads == 0 || scores.dim(0) % heads != 0) {
    throw DimensionError("masked_fill: scores " + shape_str(scores.shape()) + " incompatible with " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t groups = scores.dim(0), lm = scores.dim(1) * scores.dim(2);
  if (allowed.size() != (groups / heads) * lm) {
    throw DimensionError("masked_fill: mask has " + std::to_string(allowed.size()) + " entries for scores " +
                         shape_str(scores.shape()));
  }
  auto sv = scores.values();
  std::vector<T> out(sv.begin(), sv.end());
  std::vector<std::uint8_t> keep(groups * lm);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::uint8_t* m = allowed.data() + (gi / heads) * lm;
    for (std::size_t j = 0; j < lm; ++j) {
      keep[gi * lm + j] = m[j];
      if (!m[j]) out[gi * lm + j] = -std::numeric_limits<T>::infinity();
    }
  }
  return Tensor<T>::make_result(scores.shape(), std::move(out), {scores}, [keep = std::move(keep)](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (keep[i]) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> slice_positions(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 2 || begin > end || end > x.dim(1)) {
    throw DimensionError("slice_positions: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), l = x.dim(1), inner = b * l == 0 ? 0 : x.numel() / (b * l);
  const std::size_t len = end - begin;
  Shape out_shape = x.shape();
  out_shape[1] = len;
  auto xv = x.values();
  std::vector<T> out(b * len * inner);
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(xv.data() + (i * l + begin) * inner, len * inner, out.data() + i * len * inner);
  }
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {x},
                                [b, l, inner, begin, len](Node<T>& self) {
                                  auto g = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < b; ++i) {
                                    T* dst = g.data() + (i * l + begin) * inner;
                                    const T* s = self.grad.data() + i * len * inner;
                                    for (std::size_t j = 0; j < len * inner; ++j) dst[j] += s[j];
                                  }
                                });
}

template <typename T>
Tensor<T> select_position(const Tensor<T>& x, std::size_t index) {
  if (x.rank() != 3 || index >= x.dim(1)) {
    throw DimensionError("select_position: index " + std::to_string(index) + " invalid for " + shape_str(x.shape()));
  }
  Tensor<T> s = slice_positions(x, index, index + 1);
  return reshape(s, {x.dim(0), x.dim(2)});
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ParameterError("dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto xv = x.values();
  std::vector<T> mask(xv.size());
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < rate ? T(0) : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

#define TED_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                                        \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> gelu(const Tensor<T>&);                                                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);         \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>);                       \
  template Tensor<T> softmax_temp(const Tensor<T>&, double);                                            \
  template Tensor<T> log_softmax(const Tensor<T>&);                                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                             \
  template Tensor<T> mean(const Tensor<T>&);                                                            \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> kl_div(const Tensor<T>&, const Tensor<T>&, double);                               \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                  \
  template Tensor<T> transpose(const Tensor<T>&);                                                       \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                       \
  template Tensor<T> masked_fill(const Tensor<T>&, std::span<const std::uint8_t>, std::size_t);        \
  template Tensor<T> slice_positions(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> select_position(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);

TED_INSTANTIATE_OPS(float)
TED_INSTANTIATE_OPS(double)

}  // namespace ted
