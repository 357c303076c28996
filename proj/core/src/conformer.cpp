#include "ucam/conformer.hpp"

#include <cmath>

#include "ucam/error.hpp"
#include "ucam/ops.hpp"

namespace ucam {

void ConformerConfig::validate() const {
    if (d_attn == 0 || heads == 0 || conv_kernel == 0) throw ConfigError("conformer dimensions must be positive");
    if (d_attn % heads != 0) {
        throw ConfigError("heads (" + std::to_string(heads) + ") must divide d_attn (" + std::to_string(d_attn) + ")");
    }
    if (d_attn % 2 != 0) throw ConfigError("d_attn must be even for the sinusoidal encoding");
    if (!(ln_eps > 0.0) || !(bn_eps > 0.0)) throw ConfigError("normalization eps must be positive");
}

template <typename T>
void FFNParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
    collect_norm(prefix + ".norm", norm, out);
    w1.collect(prefix + ".w1", out);
    w2.collect(prefix + ".w2", out);
}

template <typename T>
void MHSAParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
    collect_norm(prefix + ".norm", norm, out);
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".wout", wout);
}

template <typename T>
void ConvModuleParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
    collect_norm(prefix + ".norm", norm, out);
    pointwise1.collect(prefix + ".pointwise1", out);
    out.emplace_back(prefix + ".depthwise", depthwise);
    collect_norm(prefix + ".batchnorm", batchnorm, out);
    pointwise2.collect(prefix + ".pointwise2", out);
}

template <typename T>
void ConformerBlockParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
    ffn1.collect(prefix + ".ffn1", out);
    mhsa.collect(prefix + ".mhsa", out);
    conv.collect(prefix + ".conv", out);
    ffn2.collect(prefix + ".ffn2", out);
    if (final_norm.gamma.defined()) collect_norm(prefix + ".final_norm", final_norm, out);
}

template <typename T>
FFNParams<T> init_ffn(const ConformerConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.d_attn, dff = 4 * cfg.d_attn;
    return FFNParams<T>{NormParams<T>::identity(d, cfg.ln_eps), init_linear<T>(d, dff, true, rng),
                        init_linear<T>(dff, d, true, rng)};
}

template <typename T>
MHSAParams<T> init_mhsa(const ConformerConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.d_attn;
    MHSAParams<T> p;
    p.norm = NormParams<T>::identity(d, cfg.ln_eps);
    p.wq = glorot_uniform<T>({d, d}, d, d, rng);
    p.wk = glorot_uniform<T>({d, d}, d, d, rng);
    p.wv = glorot_uniform<T>({d, d}, d, d, rng);
    p.wout = glorot_uniform<T>({d, d}, d, d, rng);
    return p;
}

template <typename T>
ConvModuleParams<T> init_conv_module(const ConformerConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.d_attn, k = cfg.conv_kernel;
    ConvModuleParams<T> p;
    p.norm = NormParams<T>::identity(d, cfg.ln_eps);
    p.pointwise1 = init_linear<T>(d, 2 * d, true, rng);
    p.depthwise = glorot_uniform<T>({d, k}, k, k, rng);
    p.batchnorm = NormParams<T>::identity(d, cfg.bn_eps);
    p.pointwise2 = init_linear<T>(d, d, true, rng);
    return p;
}

template <typename T>
ConformerBlockParams<T> init_conformer_block(const ConformerConfig& cfg, Rng& rng) {
    ConformerBlockParams<T> p;
    p.ffn1 = init_ffn<T>(cfg, rng);
    p.mhsa = init_mhsa<T>(cfg, rng);
    p.conv = init_conv_module<T>(cfg, rng);
    p.ffn2 = init_ffn<T>(cfg, rng);
    if (cfg.final_layernorm) p.final_norm = NormParams<T>::identity(cfg.d_attn, cfg.ln_eps);
    return p;
}

template <typename T>
Tensor<T> positional_encoding(std::size_t frames, std::size_t d_attn) {
    if (d_attn == 0 || d_attn % 2 != 0) {
        throw ConfigError("positional encoding needs an even dimension, got " + std::to_string(d_attn));
    }
    std::vector<T> pe(frames * d_attn);
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t i = 0; i < d_attn / 2; ++i) {
            const double angle =
                static_cast<double>(t) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_attn));
            pe[t * d_attn + 2 * i] = static_cast<T>(std::sin(angle));
            pe[t * d_attn + 2 * i + 1] = static_cast<T>(std::cos(angle));
        }
    }
    return Tensor<T>::from({frames, d_attn}, std::move(pe));
}

template <typename T>
Tensor<T> add_position(const Tensor<T>& x, const SequenceMask& mask) {
    if (x.rank() != 3) throw ShapeError("add_position expects [B,T,D], got " + shape_str(x.shape()));
    const std::size_t nb = x.dim(0), nt = x.dim(1), d = x.dim(2);
    const auto pe = positional_encoding<T>(nt, d);
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(d));
    std::vector<T> tiled(x.numel());
    auto pv = pe.data();
    for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < nt * d; ++i) tiled[b * nt * d + i] = pv[i] * inv_scale;
    return apply_mask(add(x, Tensor<T>::from(x.shape(), std::move(tiled))), mask, 1);
}

template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FFNParams<T>& p, const ConformerConfig& cfg, const SequenceMask& mask,
                      const ForwardOptions& opts) {
    if (p.w1.weight.dim(0) != 4 * p.w1.weight.dim(1)) {
        throw ConfigError("feed-forward inner size " + std::to_string(p.w1.weight.dim(0)) + " must be 4 x " +
                          std::to_string(p.w1.weight.dim(1)));
    }
    auto h = utterance_layernorm(x, mask, p.norm, cfg.ln_stats);
    h = apply_mask(p.w1(h), mask);
    h = train_dropout(swish(h), opts.dropout, opts);
    h = apply_mask(p.w2(h), mask);
    h = train_dropout(h, opts.dropout, opts);
    return add(x, scale(h, T(0.5)));
}

template <typename T>
Tensor<T> mhsa_forward(const Tensor<T>& x, const MHSAParams<T>& p, const ConformerConfig& cfg,
                       const SequenceMask& mask, const ForwardOptions& opts) {
    if (x.rank() != 3 || x.dim(0) != mask.batch() || x.dim(1) != mask.max_len()) {
        throw ShapeError("mhsa_forward: input " + shape_str(x.shape()) + " does not match mask");
    }
    const std::size_t nb = x.dim(0), nt = x.dim(1), d = x.dim(2), nh = cfg.heads;
    if (d % nh != 0) throw ConfigError("heads must divide d_attn");
    const std::size_t dh = d / nh;

    auto h = utterance_layernorm(x, mask, p.norm, cfg.ln_stats);
    auto split = [&](const Tensor<T>& w) {
        auto y = linear(h, w);
        return reshape(permute(reshape(y, {nb, nt, nh, dh}), {0, 2, 1, 3}), {nb * nh, nt, dh});
    };
    auto q = split(p.wq);
    auto k = split(p.wk);
    auto v = split(p.wv);
    auto scores = scale(bmm_nt(q, k), T(1) / std::sqrt(static_cast<T>(d)));
    auto weights = masked_softmax(reshape(scores, {nb, nh, nt, nt}), mask);
    weights = train_dropout(weights, opts.attention_dropout, opts);
    auto ctx = bmm(reshape(weights, {nb * nh, nt, nt}), v);
    ctx = reshape(permute(reshape(ctx, {nb, nh, nt, dh}), {0, 2, 1, 3}), {nb, nt, d});
    auto out = apply_mask(linear(ctx, p.wout), mask);
    return add(x, train_dropout(out, opts.dropout, opts));
}

template <typename T>
Tensor<T> conv_module_forward(const Tensor<T>& x, const ConvModuleParams<T>& p, const ConformerConfig& cfg,
                              const SequenceMask& mask, const ForwardOptions& opts) {
    const std::size_t k = p.depthwise.dim(1);
    auto h = utterance_layernorm(x, mask, p.norm, cfg.ln_stats);
    h = apply_mask(p.pointwise1(h), mask);
    h = glu(h, 2);
    h = permute(h, {0, 2, 1});  // [B, D, T]
    h = apply_mask(depthwise_conv1d(h, p.depthwise, (k - 1) / 2), mask, 2);
    h = swish(utterance_batchnorm(h, mask, p.batchnorm));
    h = permute(h, {0, 2, 1});
    h = apply_mask(p.pointwise2(h), mask);
    return add(x, train_dropout(h, opts.dropout, opts));
}

template <typename T>
Tensor<T> conformer_block_forward(const Tensor<T>& x, const ConformerBlockParams<T>& p, const ConformerConfig& cfg,
                                  const SequenceMask& mask, const ForwardOptions& opts) {
    auto h = ffn_forward(x, p.ffn1, cfg, mask, opts);
    if (cfg.position == PositionPlacement::per_block) h = add_position(h, mask);
    h = mhsa_forward(h, p.mhsa, cfg, mask, opts);
    h = conv_module_forward(h, p.conv, cfg, mask, opts);
    h = ffn_forward(h, p.ffn2, cfg, mask, opts);
    if (cfg.final_layernorm) h = utterance_layernorm(h, mask, p.final_norm, cfg.ln_stats);
    return apply_mask(h, mask);
}

#define UCAM_INSTANTIATE_CONFORMER(T)                                                                         \
    template struct FFNParams<T>;                                                                             \
    template struct MHSAParams<T>;                                                                            \
    template struct ConvModuleParams<T>;                                                                      \
    template struct ConformerBlockParams<T>;                                                                  \
    template FFNParams<T> init_ffn<T>(const ConformerConfig&, Rng&);                                          \
    template MHSAParams<T> init_mhsa<T>(const ConformerConfig&, Rng&);                                        \
    template ConvModuleParams<T> init_conv_module<T>(const ConformerConfig&, Rng&);                           \
    template ConformerBlockParams<T> init_conformer_block<T>(const ConformerConfig&, Rng&);                   \
    template Tensor<T> positional_encoding<T>(std::size_t, std::size_t);                                      \
    template Tensor<T> add_position(const Tensor<T>&, const SequenceMask&);                                   \
    template Tensor<T> ffn_forward(const Tensor<T>&, const FFNParams<T>&, const ConformerConfig&,             \
                                   const SequenceMask&, const ForwardOptions&);                               \
    template Tensor<T> mhsa_forward(const Tensor<T>&, const MHSAParams<T>&, const ConformerConfig&,           \
                                    const SequenceMask&, const ForwardOptions&);                              \
    template Tensor<T> conv_module_forward(const Tensor<T>&, const ConvModuleParams<T>&, const ConformerConfig&, \
                                           const SequenceMask&, const ForwardOptions&);                       \
    template Tensor<T> conformer_block_forward(const Tensor<T>&, const ConformerBlockParams<T>&,              \
                                               const ConformerConfig&, const SequenceMask&, const ForwardOptions&);

UCAM_INSTANTIATE_CONFORMER(float)
UCAM_INSTANTIATE_CONFORMER(double)

}  // namespace ucam
