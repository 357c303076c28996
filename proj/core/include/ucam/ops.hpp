#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "ucam/tensor.hpp"

namespace ucam {

class Rng;

// Differentiable primitives. Every shape mismatch throws ShapeError; the only
// broadcast is add_bias along the last axis.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);  // [m,k] x [k,n]

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);  // [n,m,k] x [n,k,p]

template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b);  // [n,m,k] x [n,p,k]^T

// x[..., in] * weight[out, in]^T + bias[out]; bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {});

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

enum class Activation { swish, sigmoid, relu, elu, glu };

Activation parse_activation(std::string_view name);

// glu gates along the last axis: first half is the value, second half the gate.
template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x);

template <typename T>
Tensor<T> swish(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> elu(const Tensor<T>& x);
template <typename T>
Tensor<T> glu(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// out.shape[i] = x.shape[axes[i]]
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);

// Inverted dropout: kept values are scaled by 1/(1-p).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);

// x[B,Cin,F,T] with weight[Cout,Cin,KF,KT]. Stride only along F; zero padding
// of pad_f / pad_t on both sides.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride_f, std::size_t pad_f,
                 std::size_t pad_t);

// x[B,C,T] with weight[C,K]; pad_left zeros before, K-1-pad_left after, so
// the output keeps T frames.
template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t pad_left);

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x);  // over the last axis

namespace testing {
// Flips the sign of the swish backward rule. Exists so the gradient checker
// can be shown to catch a broken rule.
void set_swish_backward_sign_flip(bool on);
}  // namespace testing

}  // namespace ucam
