#pragma once

#include <cstddef>
#include <span>
#include <utility>

#include "chandiv/autograd.hpp"

// Differentiable tensor operations. Every op checks its output for NaN/Inf
// and throws NumericError if one escapes. Instantiated for float and double.
namespace chandiv {

struct Pair {
    std::size_t h = 1;
    std::size_t w = 1;
};

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T shift);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

// [m,k]x[k,n] or batched [b,m,k]x[b,k,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Cross-correlation (no kernel flip). Input [Cin,H,W] or [N,Cin,H,W],
// kernel [Cout,Cin,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, Pair stride = {}, Pair pad = {0, 0});

// y[n,c,...] + b[c] for y of rank >= 2 with channel axis 1.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& y, const Tensor<T>& bias);

template <typename T>
Tensor<T> softmax(const Tensor<T>& t, std::size_t axis);

// [C,H,W] -> [C,1]; [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

// Concatenation along the last axis; all leading extents must agree.
template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b);

// out[...,i,k] = m[...,i,k] + v[...,i,0]
template <typename T>
Tensor<T> add_column_broadcast(const Tensor<T>& m, const Tensor<T>& v);

// out[n,c,...] = x[n,c,...] * s[n,c]; s may carry trailing unit extents.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);

// out[...,c,0] = a[...,c,0] * w[c] + b[0]
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& a, const Tensor<T>& w, const Tensor<T>& b);

// x[N,in] * w[out,in]^T + b[out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Batch normalization over axis 1 of [N,C] or [N,C,H,W]. In training mode
// batch statistics are used and the running estimates in `running_mean` /
// `running_var` are updated as r = momentum * r + (1 - momentum) * batch.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Array<T>& running_mean,
                     Array<T>& running_var, bool training, T momentum = T(0.9), T eps = T(1e-5));

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Mean softmax cross-entropy of logits [N,K] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace chandiv
