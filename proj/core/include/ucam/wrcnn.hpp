#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ucam/layers.hpp"
#include "ucam/norm.hpp"
#include "ucam/tensor.hpp"

namespace ucam {

/// Wide residual convolutional frontend. A stem convolution is followed by
/// exactly three residual blocks; frequency may be strided, time never is.
struct WrcnnConfig {
    std::size_t in_channels = 3;
    std::size_t base_channels = 16;
    std::size_t width_factor = 1;
    std::array<std::size_t, 3> multipliers{1, 2, 4};
    std::array<std::size_t, 3> freq_strides{1, 2, 2};
    std::size_t kernel = 3;
    std::size_t out_dim = 256;
    double bn_eps = 1e-5;
    bool preactivation = true;  // BN -> ELU -> conv inside blocks

    void validate() const;
    std::size_t block_channels(std::size_t i) const { return base_channels * width_factor * multipliers[i]; }
    // Frequency extent after all strides (ceil division per block).
    std::size_t output_freq(std::size_t feature_dim) const;
};

template <typename T>
struct ResidualBlockParams {
    NormParams<T> bn1;
    Tensor<T> conv1;  // [Cout, Cin, k, k], strided along frequency
    NormParams<T> bn2;
    Tensor<T> conv2;  // [Cout, Cout, k, k]
    Tensor<T> proj;   // [Cout, Cin, 1, 1] when the skip must change shape; undefined otherwise
    std::size_t stride = 1;

    void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct WrcnnParams {
    Tensor<T> stem;  // [C0, in_channels, k, k]
    std::vector<ResidualBlockParams<T>> blocks;
    NormParams<T> out_norm;
    LinearParams<T> out;  // C_last * F_last -> out_dim

    void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
ResidualBlockParams<T> init_residual_block(std::size_t in_channels, std::size_t out_channels, std::size_t stride,
                                           const WrcnnConfig& cfg, Rng& rng);

template <typename T>
WrcnnParams<T> init_wrcnn(const WrcnnConfig& cfg, std::size_t feature_dim, Rng& rng);

// x[B,C,F,T] -> [B,C',ceil(F/stride),T]; y = skip(x) + branch(x).
template <typename T>
Tensor<T> residual_block_forward(const Tensor<T>& x, const ResidualBlockParams<T>& p, const WrcnnConfig& cfg,
                                 const SequenceMask& mask);

// x[B,in_channels,F,T] -> [B,T,out_dim]
template <typename T>
Tensor<T> wrcnn_forward(const Tensor<T>& x, const WrcnnParams<T>& p, const WrcnnConfig& cfg,
                        const SequenceMask& mask);

}  // namespace ucam
