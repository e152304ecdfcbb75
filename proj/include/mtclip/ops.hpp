#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mtclip/tensor.hpp"

// Differentiable primitives. Every op validates shapes up front and throws
// DimensionError / ArgumentError naming the offending shapes.
namespace mtclip::ops {

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
// arccos(clamp(x, -1, 1)); the derivative is zero outside (-1, 1).
Tensor acos_clamped(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim = false);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose_last2(const Tensor& x);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// For x[B x T x D], picks row index[b] from each batch entry -> [B x D].
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);

// a[m x k] . b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched product over identical leading dims: [..., m, k] . [..., k, n].
Tensor bmm(const Tensor& a, const Tensor& b);
// x[..., in] . weight[in x out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
// Mean negative log-likelihood of labels under softmax(logits) along axis 1.
// logits: [N x C x ...]; labels: N * prod(...) ids in [0, C) or ignore_id.
// Returns 0 when every position is ignored; check count via the out-param.
Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::int32_t> labels,
                             std::int32_t ignore_id = -1,
                             std::size_t* counted = nullptr);

// Normalizes over the last dimension, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// x / sqrt(sum(x^2 along axis) + eps)
Tensor l2_normalize(const Tensor& x, std::size_t axis, double eps = 1e-12);

// ids index rows of table[V x D]; result shape is id_shape + [D].
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids,
                 const Shape& id_shape);

// Cross-correlation. input [B x C x H x W], kernel [O x C x k x k], bias [O]
// (may be undefined). Output extent is floor((H + 2p - k) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding);
Tensor adaptive_avg_pool2d(const Tensor& input, std::size_t out_h,
                           std::size_t out_w);
Tensor nearest_upsample(const Tensor& input, std::size_t out_h,
                        std::size_t out_w);

// [B x C x H x W] -> [B x (H/p * W/p) x (C*p*p)], patches in raster order.
Tensor patchify(const Tensor& images, std::size_t patch);

// Softmax attention over [B x H x T x d] heads. With causal set, position i
// only attends to positions <= i.
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                    const Tensor& v, bool causal);

}  // namespace mtclip::ops
