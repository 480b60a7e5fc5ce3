// SPDX-License-Identifier: Apache-2.0
#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ted/ops.hpp"

namespace ted::testing {

FdReport fd_check(const Fn& f, std::vector<Tensor<double>> inputs, double h) {
  for (auto& t : inputs) t.clear_grad();
  f(inputs).backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad()) analytic.emplace_back(t.grad().begin(), t.grad().end());
    else analytic.emplace_back(t.numel(), 0.0);
  }
  FdReport r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    auto vals = inputs[i].mutable_values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double keep = vals[j];
      vals[j] = keep + h;
      const double up = f(inputs).item();
      vals[j] = keep - h;
      const double down = f(inputs).item();
      vals[j] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      r.max_err = std::max(r.max_err, err);
      ++r.checked;
    }
  }
  return r;
}

Tensor<double> random_tensor(Rng& rng, Shape shape, double stddev, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

Tensor<double> project(const Tensor<double>& x, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(x, random_tensor(rng, x.shape(), 1.0, false)));
}

namespace {

std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

FdReport unary(Rng& rng, Shape shape, const std::function<Tensor<double>(const Tensor<double>&)>& op) {
  const std::uint64_t w = rng.next();
  return fd_check([&](const auto& in) { return project(op(in[0]), w); }, {random_tensor(rng, shape)});
}

Shape small_shape(Rng& rng) { return {between(rng, 1, 3), between(rng, 2, 4)}; }

std::vector<GradCase> build_cases() {
  std::vector<GradCase> c;
  c.push_back({"add", [](Rng& rng) {
                 const Shape s = small_shape(rng);
                 const auto w = rng.next();
                 return fd_check([&](const auto& in) { return project(add(in[0], in[1]), w); },
                                 {random_tensor(rng, s), random_tensor(rng, s)});
               }});
  c.push_back({"sub", [](Rng& rng) {
                 const Shape s = small_shape(rng);
                 const auto w = rng.next();
                 return fd_check([&](const auto& in) { return project(sub(in[0], in[1]), w); },
                                 {random_tensor(rng, s), random_tensor(rng, s)});
               }});
  c.push_back({"mul", [](Rng& rng) {
                 const Shape s = small_shape(rng);
                 const auto w = rng.next();
                 return fd_check([&](const auto& in) { return project(mul(in[0], in[1]), w); },
                                 {random_tensor(rng, s), random_tensor(rng, s)});
               }});
  c.push_back({"scale", [](Rng& rng) {
                 const double f = rng.normal(0.0, 2.0);
                 return unary(rng, small_shape(rng), [f](const auto& x) { return scale(x, f); });
               }});
  c.push_back({"add_bias", [](Rng& rng) {
                 const Shape s{between(rng, 1, 2), between(rng, 1, 3), between(rng, 2, 4)};
                 const auto w = rng.next();
                 return fd_check([&](const auto& in) { return project(add_bias(in[0], in[1]), w); },
                                 {random_tensor(rng, s), random_tensor(rng, {s[2]})});
               }});
  c.push_back({"matmul", [](Rng& rng) {
                 const std::size_t m = between(rng, 1, 4), k = between(rng, 1, 4), n = between(rng, 1, 4);
                 const auto w = rng.next();
                 return fd_check([&](const auto& in) { return project(matmul(in[0], in[1]), w); },
                                 {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})});
               }});
  c.push_back({"bmm", [](Rng& rng) {
                 const std::size_t g = between(rng, 1, 3), m = between(rng, 1, 3), k = between(rng, 1, 3),
                                   n = between(rng, 1, 3);
                 const auto w = rng.next();
                 return fd_check([&](const auto& in) { return project(bmm(in[0], in[1]), w); },
                                 {random_tensor(rng, {g, m, k}), random_tensor(rng, {g, k, n})});
               }});
  c.push_back({"linear", [](Rng& rng) {
                 const std::size_t b = between(rng, 1, 2), l = between(rng, 1, 3), k = between(rng, 1, 4),
                                   n = between(rng, 1, 4);
                 const auto w = rng.next();
                 return fd_check([&](const auto& in) { return project(linear(in[0], in[1], in[2]), w); },
                                 {random_tensor(rng, {b, l, k}), random_tensor(rng, {k, n}), random_tensor(rng, {n})});
               }});
  c.push_back({"gelu", [](Rng& rng) {
                 return unary(rng, small_shape(rng), [](const auto& x) { return gelu(x); });
               }});
  c.push_back({"layer_norm", [](Rng& rng) {
                 const Shape s{between(rng, 1, 3), between(rng, 2, 5)};
                 const auto w = rng.next();
                 return fd_check([&](const auto& in) { return project(layer_norm(in[0], in[1], in[2]), w); },
                                 {random_tensor(rng, s), random_tensor(rng, {s[1]}), random_tensor(rng, {s[1]})});
               }});
  c.push_back({"embedding", [](Rng& rng) {
                 const std::size_t v = between(rng, 2, 5), d = between(rng, 1, 3);
                 std::vector<std::int32_t> ids(between(rng, 1, 6));
                 for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(v));
                 const auto w = rng.next();
                 return fd_check([&](const auto& in) { return project(embedding(in[0], std::span(ids)), w); },
                                 {random_tensor(rng, {v, d})});
               }});
  c.push_back({"softmax_temp", [](Rng& rng) {
                 const double temps[] = {0.5, 1.0, 2.0, 10.0};
                 const double t = temps[rng.below(4)];
                 return unary(rng, small_shape(rng), [t](const auto& x) { return softmax_temp(x, t); });
               }});
  c.push_back({"log_softmax", [](Rng& rng) {
                 return unary(rng, small_shape(rng), [](const auto& x) { return log_softmax(x); });
               }});
  c.push_back({"sum", [](Rng& rng) {
                 return fd_check([](const auto& in) { return scale(sum(in[0]), 0.7); }, {random_tensor(rng, small_shape(rng))});
               }});
  c.push_back({"mean", [](Rng& rng) {
                 return fd_check([](const auto& in) { return scale(mean(in[0]), 1.3); }, {random_tensor(rng, small_shape(rng))});
               }});
  c.push_back({"mse", [](Rng& rng) {
                 const Shape s = small_shape(rng);
                 return fd_check([](const auto& in) { return mse(in[0], in[1]); },
                                 {random_tensor(rng, s), random_tensor(rng, s)});
               }});
  c.push_back({"kl_div", [](Rng& rng) {
                 const Shape s = small_shape(rng);
                 return fd_check([](const auto& in) { return kl_div(softmax(in[0]), softmax(in[1])); },
                                 {random_tensor(rng, s), random_tensor(rng, s)});
               }});
  c.push_back({"cross_entropy", [](Rng& rng) {
                 const Shape s = small_shape(rng);
                 std::vector<std::int32_t> labels(s[0]);
                 for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(s[1]));
                 return fd_check([&](const auto& in) { return cross_entropy(in[0], std::span(labels)); },
                                 {random_tensor(rng, s, 2.0)});
               }});
  c.push_back({"reshape", [](Rng& rng) {
                 const std::size_t a = between(rng, 1, 3), b = between(rng, 1, 3), d = between(rng, 1, 2);
                 return unary(rng, {a, b, d}, [=](const auto& x) { return reshape(x, {b, a * d}); });
               }});
  c.push_back({"transpose", [](Rng& rng) {
                 return unary(rng, small_shape(rng), [](const auto& x) { return transpose(x); });
               }});
  c.push_back({"permute", [](Rng& rng) {
                 const Shape s{between(rng, 1, 2), between(rng, 1, 3), between(rng, 1, 2), between(rng, 1, 3)};
                 std::vector<std::size_t> axes{0, 1, 2, 3};
                 for (std::size_t i = 3; i > 0; --i) std::swap(axes[i], axes[rng.below(i + 1)]);
                 return unary(rng, s, [axes](const auto& x) { return permute(x, axes); });
               }});
  c.push_back({"masked_fill", [](Rng& rng) {
                 const std::size_t b = between(rng, 1, 2), h = between(rng, 1, 2), l = between(rng, 2, 4);
                 std::vector<std::uint8_t> allowed(b * l * l);
                 for (std::size_t i = 0; i < b; ++i) {
                   for (std::size_t r = 0; r < l; ++r) {
                     for (std::size_t m = 0; m < l; ++m) allowed[(i * l + r) * l + m] = m <= r;
                   }
                 }
                 return unary(rng, {b * h, l, l},
                              [&, h](const auto& x) { return softmax(masked_fill(x, std::span(allowed), h)); });
               }});
  c.push_back({"slice_positions", [](Rng& rng) {
                 const std::size_t l = between(rng, 2, 5), lo = rng.below(l - 1);
                 const std::size_t hi = lo + 1 + rng.below(l - lo - 1);
                 return unary(rng, {between(rng, 1, 2), l, 2}, [=](const auto& x) { return slice_positions(x, lo, hi); });
               }});
  c.push_back({"select_position", [](Rng& rng) {
                 const std::size_t l = between(rng, 1, 4), at = rng.below(l);
                 return unary(rng, {between(rng, 1, 3), l, 3}, [=](const auto& x) { return select_position(x, at); });
               }});
  c.push_back({"dropout", [](Rng& rng) {
                 const std::uint64_t seed = rng.next();
                 return unary(rng, small_shape(rng), [seed](const auto& x) {
                   Rng r(seed);
                   return dropout(x, 0.3, r);
                 });
               }});
  return c;
}

}  // namespace

const std::vector<GradCase>& grad_cases() {
  static const std::vector<GradCase> cases = build_cases();
  return cases;
}

}  // namespace ted::testing
