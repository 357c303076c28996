#pragma once

#include <cstddef>
#include <vector>

#include "ucam/conformer.hpp"
#include "ucam/data.hpp"
#include "ucam/layers.hpp"
#include "ucam/wrcnn.hpp"

namespace ucam {

/// WRCNN -> linear to d_attn -> N conformer blocks -> linear(head_dim) +
/// ReLU + dropout -> linear(senones) -> log-softmax.
struct AcousticModelConfig {
    std::size_t feature_dim = 80;
    std::size_t delta_channels = 3;
    std::size_t d_attn = 256;
    std::size_t blocks = 2;
    std::size_t conv_kernel = 16;
    std::size_t heads = 4;
    std::size_t head_dim = 1024;
    std::size_t senones = 2042;
    double dropout = 0.15;
    double attention_dropout = 0.15;
    double ln_eps = 1e-5;
    double bn_eps = 1e-5;
    LayerNormStats ln_stats = LayerNormStats::per_frame;
    PositionPlacement position = PositionPlacement::per_block;
    bool final_layernorm = true;
    WrcnnConfig wrcnn;

    void validate() const;
    ConformerConfig conformer() const;
    WrcnnConfig frontend() const;  // wrcnn with in_channels tied to delta_channels

    // The d_attn=64, H=2, N=2, k=16 configuration used for desk-scale runs.
    static AcousticModelConfig micro(std::size_t feature_dim = 16, std::size_t senones = 8);
};

template <typename T>
struct ModelParams {
    WrcnnParams<T> wrcnn;
    LinearParams<T> projection;
    std::vector<ConformerBlockParams<T>> blocks;
    LinearParams<T> head_hidden;
    LinearParams<T> head_out;

    /// Handles to every learnable tensor in a fixed order with stable names.
    NamedTensors<T> named() const;
    std::vector<Tensor<T>> tensors() const;

    ModelParams clone() const;
    void set_requires_grad(bool on);
    void zero_grad();

    template <typename U>
    ModelParams<U> cast(const AcousticModelConfig& cfg) const;
};

template <typename T>
ModelParams<T> init_model_params(const AcousticModelConfig& cfg, std::uint64_t seed);

/// Throws StructureError naming the first tensor whose name or shape
/// differs from what cfg implies.
template <typename T>
void validate_params(const ModelParams<T>& params, const AcousticModelConfig& cfg);

// Copies values in named() order; structures must match.
template <typename T, typename U>
void copy_values(const ModelParams<T>& from, ModelParams<U>& to);

/// Per-frame log-posteriors [B,T,senones]; padded frames are zero.
/// features: [B,3,F,T] constant input.
template <typename T>
Tensor<T> model_forward_features(const Tensor<T>& features, const SequenceMask& mask, const ModelParams<T>& params,
                                 const AcousticModelConfig& cfg, const ForwardOptions& opts);

/// Runs the model on a batch. With lin, the mean-normalized statics are
/// multiplied frame-wise by lin [F,F] and the deltas are recomputed.
template <typename T>
Tensor<T> model_forward(const Batch& batch, const ModelParams<T>& params, const AcousticModelConfig& cfg,
                        const ForwardOptions& opts, const Tensor<T>* lin = nullptr);

template <typename T>
std::size_t count_params(const ModelParams<T>& params);

}  // namespace ucam
