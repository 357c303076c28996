#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ucam/norm.hpp"
#include "ucam/random.hpp"
#include "ucam/tensor.hpp"

namespace ucam {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Per-call switches of a forward pass. Dropout fires only when train is set,
/// and then needs an rng.
struct ForwardOptions {
    bool train = false;
    double dropout = 0.0;
    double attention_dropout = 0.0;
    Rng* rng = nullptr;
};

template <typename T>
Tensor<T> train_dropout(const Tensor<T>& x, double p, const ForwardOptions& opts);

template <typename T>
struct LinearParams {
    Tensor<T> weight;  // [out, in]
    Tensor<T> bias;    // [out] or undefined

    Tensor<T> operator()(const Tensor<T>& x) const;
    void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

// Glorot-uniform weight, zero bias.
template <typename T>
LinearParams<T> init_linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng);

template <typename T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

template <typename T>
void collect_norm(const std::string& prefix, const NormParams<T>& p, NamedTensors<T>& out);

}  // namespace ucam
