#pragma once

#include <cstddef>
#include <string>

#include "ucam/layers.hpp"
#include "ucam/norm.hpp"
#include "ucam/tensor.hpp"

namespace ucam {

enum class PositionPlacement {
    per_block,      // added before every block's attention module
    encoder_input,  // added once in front of the first block
};

struct ConformerConfig {
    std::size_t d_attn = 256;
    std::size_t heads = 4;
    std::size_t conv_kernel = 16;
    double ln_eps = 1e-5;
    double bn_eps = 1e-5;
    LayerNormStats ln_stats = LayerNormStats::per_frame;
    PositionPlacement position = PositionPlacement::per_block;
    bool final_layernorm = true;

    void validate() const;
};

// Pre-norm macaron feed-forward half-step. d_ff = 4 d_attn.
template <typename T>
struct FFNParams {
    NormParams<T> norm;
    LinearParams<T> w1;  // [d_ff, d_attn] + b1
    LinearParams<T> w2;  // [d_attn, d_ff] + b2

    void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

// Q/K/V weights hold the H per-head projections stacked row-wise, so rows
// [h*d_head, (h+1)*d_head) are head h. No biases.
template <typename T>
struct MHSAParams {
    NormParams<T> norm;
    Tensor<T> wq, wk, wv;  // [d_attn, d_attn]
    Tensor<T> wout;        // [d_attn, d_attn]

    void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct ConvModuleParams {
    NormParams<T> norm;
    LinearParams<T> pointwise1;  // d_attn -> 2 d_attn, feeds the GLU
    Tensor<T> depthwise;         // [d_attn, kernel], no bias: a batchnorm follows
    NormParams<T> batchnorm;
    LinearParams<T> pointwise2;  // d_attn -> d_attn

    void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct ConformerBlockParams {
    FFNParams<T> ffn1;
    MHSAParams<T> mhsa;
    ConvModuleParams<T> conv;
    FFNParams<T> ffn2;
    NormParams<T> final_norm;  // undefined tensors when final_layernorm is off

    void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
FFNParams<T> init_ffn(const ConformerConfig& cfg, Rng& rng);
template <typename T>
MHSAParams<T> init_mhsa(const ConformerConfig& cfg, Rng& rng);
template <typename T>
ConvModuleParams<T> init_conv_module(const ConformerConfig& cfg, Rng& rng);
template <typename T>
ConformerBlockParams<T> init_conformer_block(const ConformerConfig& cfg, Rng& rng);

/// Sinusoidal table: PE[t,2i] = sin(t / 10000^(2i/d)), PE[t,2i+1] = cos(same).
template <typename T>
Tensor<T> positional_encoding(std::size_t frames, std::size_t d_attn);

/// x + PE / sqrt(d_attn): the encoding is scaled down, the input is left
/// alone. Padded frames are re-masked.
template <typename T>
Tensor<T> add_position(const Tensor<T>& x, const SequenceMask& mask);

// Each sub-module returns its input plus the (dropped-out) branch.
template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FFNParams<T>& p, const ConformerConfig& cfg, const SequenceMask& mask,
                      const ForwardOptions& opts);

template <typename T>
Tensor<T> mhsa_forward(const Tensor<T>& x, const MHSAParams<T>& p, const ConformerConfig& cfg,
                       const SequenceMask& mask, const ForwardOptions& opts);

template <typename T>
Tensor<T> conv_module_forward(const Tensor<T>& x, const ConvModuleParams<T>& p, const ConformerConfig& cfg,
                              const SequenceMask& mask, const ForwardOptions& opts);

template <typename T>
Tensor<T> conformer_block_forward(const Tensor<T>& x, const ConformerBlockParams<T>& p, const ConformerConfig& cfg,
                                  const SequenceMask& mask, const ForwardOptions& opts);

}  // namespace ucam
