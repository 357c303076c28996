#include "ucam/wrcnn.hpp"

#include "ucam/error.hpp"
#include "ucam/ops.hpp"

namespace ucam {

namespace {

template <typename T>
Tensor<T> conv_weight(std::size_t cout, std::size_t cin, std::size_t kf, std::size_t kt, Rng& rng) {
    return glorot_uniform<T>({cout, cin, kf, kt}, cin * kf * kt, cout * kf * kt, rng);
}

// Same-size convolution along time, strided along frequency; padded frames
// are zeroed again so the next layer reads true zeros there.
template <typename T>
Tensor<T> masked_conv(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, const SequenceMask& mask) {
    const std::size_t k = w.dim(2);
    return apply_mask(conv2d(x, w, stride, (k - 1) / 2, (w.dim(3) - 1) / 2), mask, 3);
}

}  // namespace

void WrcnnConfig::validate() const {
    if (in_channels == 0 || base_channels == 0 || width_factor == 0 || out_dim == 0) {
        throw ConfigError("wrcnn channel counts must be positive");
    }
    for (std::size_t i = 0; i < 3; ++i) {
        if (multipliers[i] == 0 || freq_strides[i] == 0) throw ConfigError("wrcnn multipliers and strides must be positive");
    }
    if (kernel == 0 || kernel % 2 == 0) {
        throw ConfigError("wrcnn kernel must be odd to preserve the time extent, got " + std::to_string(kernel));
    }
    if (!(bn_eps > 0.0)) throw ConfigError("wrcnn bn_eps must be positive");
}

std::size_t WrcnnConfig::output_freq(std::size_t feature_dim) const {
    std::size_t f = feature_dim;
    for (auto s : freq_strides) f = (f + s - 1) / s;
    return f;
}

template <typename T>
void ResidualBlockParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
    collect_norm(prefix + ".bn1", bn1, out);
    out.emplace_back(prefix + ".conv1", conv1);
    collect_norm(prefix + ".bn2", bn2, out);
    out.emplace_back(prefix + ".conv2", conv2);
    if (proj.defined()) out.emplace_back(prefix + ".proj", proj);
}

template <typename T>
void WrcnnParams<T>::collect(const std::string& prefix, NamedTensors<T>& named) const {
    named.emplace_back(prefix + ".stem", stem);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), named);
    collect_norm(prefix + ".out_norm", out_norm, named);
    out.collect(prefix + ".out", named);
}

template <typename T>
ResidualBlockParams<T> init_residual_block(std::size_t in_channels, std::size_t out_channels, std::size_t stride,
                                           const WrcnnConfig& cfg, Rng& rng) {
    ResidualBlockParams<T> p;
    const std::size_t k = cfg.kernel;
    p.bn1 = NormParams<T>::identity(cfg.preactivation ? in_channels : out_channels, cfg.bn_eps);
    p.conv1 = conv_weight<T>(out_channels, in_channels, k, k, rng);
    p.bn2 = NormParams<T>::identity(out_channels, cfg.bn_eps);
    p.conv2 = conv_weight<T>(out_channels, out_channels, k, k, rng);
    if (in_channels != out_channels || stride != 1) p.proj = conv_weight<T>(out_channels, in_channels, 1, 1, rng);
    p.stride = stride;
    return p;
}

template <typename T>
WrcnnParams<T> init_wrcnn(const WrcnnConfig& cfg, std::size_t feature_dim, Rng& rng) {
    cfg.validate();
    WrcnnParams<T> p;
    p.stem = conv_weight<T>(cfg.base_channels, cfg.in_channels, cfg.kernel, cfg.kernel, rng);
    std::size_t cin = cfg.base_channels;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t cout = cfg.block_channels(i);
        p.blocks.push_back(init_residual_block<T>(cin, cout, cfg.freq_strides[i], cfg, rng));
        cin = cout;
    }
    p.out_norm = NormParams<T>::identity(cin, cfg.bn_eps);
    p.out = init_linear<T>(cin * cfg.output_freq(feature_dim), cfg.out_dim, true, rng);
    return p;
}

template <typename T>
Tensor<T> residual_block_forward(const Tensor<T>& x, const ResidualBlockParams<T>& p, const WrcnnConfig& cfg,
                                 const SequenceMask& mask) {
    if (x.rank() != 4 || x.dim(1) != p.conv1.dim(1)) {
        throw ShapeError("residual block expects [B," + std::to_string(p.conv1.dim(1)) + ",F,T], got " +
                         shape_str(x.shape()));
    }
    if (cfg.preactivation) {
        auto h = elu(utterance_batchnorm(x, mask, p.bn1));
        auto branch = masked_conv(h, p.conv1, p.stride, mask);
        branch = masked_conv(elu(utterance_batchnorm(branch, mask, p.bn2)), p.conv2, 1, mask);
        auto skip = p.proj.defined() ? masked_conv(h, p.proj, p.stride, mask) : x;
        return add(skip, branch);
    }
    auto branch = elu(utterance_batchnorm(masked_conv(x, p.conv1, p.stride, mask), mask, p.bn1));
    branch = utterance_batchnorm(masked_conv(branch, p.conv2, 1, mask), mask, p.bn2);
    auto skip = p.proj.defined() ? masked_conv(x, p.proj, p.stride, mask) : x;
    return apply_mask(elu(add(skip, branch)), mask, 3);
}

template <typename T>
Tensor<T> wrcnn_forward(const Tensor<T>& x, const WrcnnParams<T>& p, const WrcnnConfig& cfg,
                        const SequenceMask& mask) {
    if (x.rank() != 4 || x.dim(1) != cfg.in_channels) {
        throw ShapeError("wrcnn expects [B," + std::to_string(cfg.in_channels) + ",F,T], got " + shape_str(x.shape()));
    }
    auto h = masked_conv(apply_mask(x, mask, 3), p.stem, 1, mask);
    for (const auto& block : p.blocks) h = residual_block_forward(h, block, cfg, mask);
    h = utterance_batchnorm(h, mask, p.out_norm);
    const std::size_t nb = h.dim(0), nc = h.dim(1), nf = h.dim(2), nt = h.dim(3);
    if (nc * nf != p.out.weight.dim(1)) {
        throw ShapeError("wrcnn output projection expects " + std::to_string(p.out.weight.dim(1)) +
                         " inputs per frame, frontend produced " + std::to_string(nc * nf));
    }
    h = reshape(permute(h, {0, 3, 1, 2}), {nb, nt, nc * nf});
    return apply_mask(elu(p.out(h)), mask);
}

#define UCAM_INSTANTIATE_WRCNN(T)                                                                                  \
    template struct ResidualBlockParams<T>;                                                                        \
    template struct WrcnnParams<T>;                                                                                \
    template ResidualBlockParams<T> init_residual_block<T>(std::size_t, std::size_t, std::size_t,                 \
                                                           const WrcnnConfig&, Rng&);                              \
    template WrcnnParams<T> init_wrcnn<T>(const WrcnnConfig&, std::size_t, Rng&);                                  \
    template Tensor<T> residual_block_forward(const Tensor<T>&, const ResidualBlockParams<T>&, const WrcnnConfig&, \
                                              const SequenceMask&);                                                \
    template Tensor<T> wrcnn_forward(const Tensor<T>&, const WrcnnParams<T>&, const WrcnnConfig&,                  \
                                     const SequenceMask&);

UCAM_INSTANTIATE_WRCNN(float)
UCAM_INSTANTIATE_WRCNN(double)

}  // namespace ucam
