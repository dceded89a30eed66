#pragma once

#include <array>
#include <span>
#include <vector>

#include "refseg/tensor.hpp"

namespace refseg {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

/// GELU, tanh approximation.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, int axis, bool keepdim = false);

/// Batched matrix product: [..., M, K] x [..., K, N]. A rank-2 right operand
/// is shared across all leading axes of the left one.
Tensor matmul(const Tensor& a, const Tensor& b);

/// x · W + b along the last axis; W is [C_in, C_out]. An undefined bias is skipped.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
/// Swaps the last two axes.
Tensor transpose_last(const Tensor& x);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
/// Zero padding along one axis.
Tensor pad(const Tensor& x, int axis, std::size_t before, std::size_t after);
Tensor concat(const std::vector<Tensor>& parts, int axis);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

/// Normalizes over the last axis, then applies gamma/beta (each [C]).
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Row lookup: table [V, C] -> [ids.size(), C].
Tensor embedding(const Tensor& table, std::span<const int> ids);

/// Nearest-neighbour upsampling of [B, C, D, H, W] by integer factors.
Tensor upsample_nearest3d(const Tensor& x, std::array<std::size_t, 3> factors);

/// Mean binary cross-entropy on logits; `targets` is treated as a constant.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

}  // namespace refseg
