// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over ted::Tensor. Every op validates shapes up front and throws
// ted::DimensionError naming the offending shapes.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ted/rng.hpp"
#include "ted/tensor.hpp"

namespace ted {

/// Clamp applied inside logarithms of probabilities.
inline constexpr double kProbEpsilon = 1e-9;

// Elementwise (identical shapes).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

/// x[..., n] + bias[n], broadcast over all leading axes.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

/// a[m x k] . b[k x n]. dA = G.B^T, dB = A^T.G
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// Batched product a[g x m x k] . b[g x k x n].
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);
/// x[..., k] . w[k x n] (+ bias[n] when defined); leading axes are kept.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {});

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

/// Normalises over the last axis with biased variance, then applies gamma[n], beta[n].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5);

/// Rows of table[V x d] selected by ids -> [ids.size() x d]; gradient scatter-adds into the table.
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);

/// Softmax over the last axis of logits / temperature; max-subtracted. temperature > 0.
template <typename T> Tensor<T> softmax_temp(const Tensor<T>& logits, double temperature);
template <typename T> Tensor<T> softmax(const Tensor<T>& logits) { return softmax_temp(logits, 1.0); }
template <typename T> Tensor<T> log_softmax(const Tensor<T>& logits);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// Mean over all elements of (a - b)^2.
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

/// Mean over rows of sum_i p_i ln(p_i / q_i), both inputs row-stochastic along the last axis.
/// Probabilities are clamped at `eps` inside the logarithms.
template <typename T>
Tensor<T> kl_div(const Tensor<T>& p_target, const Tensor<T>& q, double eps = kProbEpsilon);

/// Mean negative log-softmax probability of labels; logits [N x V].
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// 2-D transpose.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
/// General axis permutation: out.shape[i] = x.shape[axes[i]].
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);

/// scores[(B*H) x L x M]: entries whose `allowed[b][l][m]` byte is zero are set to -inf.
/// `allowed` has B*L*M entries and is shared by the H heads of each batch row.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& scores, std::span<const std::uint8_t> allowed, std::size_t heads);

/// x[B x L x ...] restricted to positions [begin, end) of axis 1.
template <typename T> Tensor<T> slice_positions(const Tensor<T>& x, std::size_t begin, std::size_t end);
/// x[B x L x d] at position `index` of axis 1 -> [B x d].
template <typename T> Tensor<T> select_position(const Tensor<T>& x, std::size_t index);

/// Inverted dropout with keep probability 1 - rate. Identity when rate == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng);

}  // namespace ted
