#pragma once

#include <cstdint>
#include <vector>

#include "ddis/tensor.hpp"

namespace ddis {

// Elementwise binary ops broadcast with numpy rules.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
/// Identity on [-knee, knee], tanh-saturating towards +-1 outside; C1 smooth.
Tensor smooth_clamp(const Tensor& a, double knee = 0.9);

/// 2-D x 2-D, batched 3-D x 3-D, or 3-D x 2-D (second operand shared across the batch).
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length);
/// Rows of a 2-D table: out[i] = table[ids[i]].
Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& ids);
/// out[b] = a[b, cols[b]] for a 2-D `a`.
Tensor pick(const Tensor& a, const std::vector<std::int64_t>& cols);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axes(const Tensor& a, const std::vector<int>& axes, bool keepdim);
Tensor mean_axes(const Tensor& a, const std::vector<int>& axes, bool keepdim);
/// Biased variance over the given axes.
Tensor var_axes(const Tensor& a, const std::vector<int>& axes, bool keepdim);
/// Euclidean norm of all entries; gradient defined as 0 at the origin.
Tensor l2_norm(const Tensor& a);

/// Softmax / log-softmax along the last axis.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);

/// x [B,C,H,W], w [O,C,K,K], bias [O] (may be empty Tensor()).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
/// x [B,C,H,W], w [C,O,K,K]; output side (H-1)*stride - 2*pad + K.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
Tensor avg_pool2d(const Tensor& x, int k);
Tensor max_pool2d(const Tensor& x, int k);
Tensor upsample_nearest2d(const Tensor& x, int factor);

/// x [.., in] times w[out,in]^T plus b[out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

bool is_finite(const Tensor& t);

}  // namespace ddis
