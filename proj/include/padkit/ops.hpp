#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "padkit/prng.hpp"
#include "padkit/tensor.hpp"

// Differentiable operations. Each records a node on the active tape when
// any operand requires a gradient; otherwise it is a pure function.

namespace padkit {

// Linear algebra

/// [.., m, k] x [k, n] (shared right operand) or [.., m, k] x [.., k, n]
/// with identical leading dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor reshape(const Tensor& x, const Shape& shape);

// Elementwise

enum class ElementwiseKind { add, sub, mul, scale, relu };

/// `b` must match `a` for binary kinds; scale uses `factor`; relu ignores `b`.
Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor& b = {}, double factor = 1.0);

/// `b` may equal `a`'s shape, any trailing suffix of it, or hold a single
/// value (broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// Gradient at exactly zero is zero.
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor square(const Tensor& x);
/// sqrt with gradient defined as 0 at 0.
Tensor sqrt(const Tensor& x);

// Reductions

/// Removes `axis`; negative counts from the end.
Tensor reduce_sum(const Tensor& x, int axis);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Normalization

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
/// Normalizes over the last axis, then applies gamma * x + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
/// Divides every last-axis vector by max(norm, eps).
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

// Convolution

/// Cross-correlation. x is [C, H, W] or [B, C, H, W]; w is [O, C, kh, kw];
/// bias, when defined, is [O].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding);
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding);

// Indexing

/// Drops `axis`, keeping position `index`.
Tensor select(const Tensor& x, int axis, std::size_t index);
Tensor narrow(const Tensor& x, int axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Adds a leading axis of size `count` by repetition.
Tensor expand(const Tensor& x, std::size_t count);

// Losses and regularization primitives

/// Mean over rows of -logp[row, label].
Tensor nll_loss(const Tensor& log_probs, std::span<const std::size_t> labels);
/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Prng& prng);

}  // namespace padkit
