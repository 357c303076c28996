#include "ucam/model.hpp"

#include "ucam/deltas.hpp"
#include "ucam/error.hpp"
#include "ucam/ops.hpp"

namespace ucam {

void AcousticModelConfig::validate() const {
    if (feature_dim == 0 || delta_channels == 0 || d_attn == 0 || heads == 0 || head_dim == 0 || senones == 0 ||
        conv_kernel == 0) {
        throw ConfigError("model dimensions must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0) || !(attention_dropout >= 0.0 && attention_dropout < 1.0)) {
        throw ConfigError("dropout rates must be in [0, 1)");
    }
    conformer().validate();
    frontend().validate();
}

ConformerConfig AcousticModelConfig::conformer() const {
    ConformerConfig c;
    c.d_attn = d_attn;
    c.heads = heads;
    c.conv_kernel = conv_kernel;
    c.ln_eps = ln_eps;
    c.bn_eps = bn_eps;
    c.ln_stats = ln_stats;
    c.position = position;
    c.final_layernorm = final_layernorm;
    return c;
}

WrcnnConfig AcousticModelConfig::frontend() const {
    WrcnnConfig w = wrcnn;
    w.in_channels = delta_channels;
    return w;
}

AcousticModelConfig AcousticModelConfig::micro(std::size_t feature_dim, std::size_t senones) {
    AcousticModelConfig c;
    c.feature_dim = feature_dim;
    c.d_attn = 64;
    c.heads = 2;
    c.blocks = 2;
    c.conv_kernel = 16;
    c.head_dim = 128;
    c.senones = senones;
    c.wrcnn.base_channels = 4;
    c.wrcnn.multipliers = {1, 2, 2};
    c.wrcnn.freq_strides = {1, 2, 2};
    c.wrcnn.out_dim = 64;
    return c;
}

template <typename T>
NamedTensors<T> ModelParams<T>::named() const {
    NamedTensors<T> out;
    wrcnn.collect("wrcnn", out);
    projection.collect("projection", out);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("blocks." + std::to_string(i), out);
    head_hidden.collect("head.hidden", out);
    head_out.collect("head.out", out);
    return out;
}

template <typename T>
std::vector<Tensor<T>> ModelParams<T>::tensors() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
}

namespace {

template <typename T>
void clone_into(Tensor<T>& t) {
    if (t.defined()) t = t.clone();
}

template <typename T>
void clone_norm(NormParams<T>& n) {
    clone_into(n.gamma);
    clone_into(n.beta);
}

template <typename T>
void clone_linear(LinearParams<T>& l) {
    clone_into(l.weight);
    clone_into(l.bias);
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
    ModelParams<T> c = *this;  // shallow handles, replaced below
    clone_into(c.wrcnn.stem);
    for (auto& b : c.wrcnn.blocks) {
        clone_norm(b.bn1);
        clone_into(b.conv1);
        clone_norm(b.bn2);
        clone_into(b.conv2);
        clone_into(b.proj);
    }
    clone_norm(c.wrcnn.out_norm);
    clone_linear(c.wrcnn.out);
    clone_linear(c.projection);
    for (auto& b : c.blocks) {
        for (auto* f : {&b.ffn1, &b.ffn2}) {
            clone_norm(f->norm);
            clone_linear(f->w1);
            clone_linear(f->w2);
        }
        clone_norm(b.mhsa.norm);
        clone_into(b.mhsa.wq);
        clone_into(b.mhsa.wk);
        clone_into(b.mhsa.wv);
        clone_into(b.mhsa.wout);
        clone_norm(b.conv.norm);
        clone_linear(b.conv.pointwise1);
        clone_into(b.conv.depthwise);
        clone_norm(b.conv.batchnorm);
        clone_linear(b.conv.pointwise2);
        clone_norm(b.final_norm);
    }
    clone_linear(c.head_hidden);
    clone_linear(c.head_out);
    return c;
}

template <typename T>
void ModelParams<T>::set_requires_grad(bool on) {
    for (auto& [name, t] : named()) t.set_requires_grad(on);
}

template <typename T>
void ModelParams<T>::zero_grad() {
    for (auto& [name, t] : named()) t.zero_grad();
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast(const AcousticModelConfig& cfg) const {
    auto out = init_model_params<U>(cfg, 0);
    copy_values(*this, out);
    return out;
}

template <typename T>
ModelParams<T> init_model_params(const AcousticModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed, 0x6d6f64656cULL);
    ModelParams<T> p;
    const auto wcfg = cfg.frontend();
    p.wrcnn = init_wrcnn<T>(wcfg, cfg.feature_dim, rng);
    p.projection = init_linear<T>(wcfg.out_dim, cfg.d_attn, true, rng);
    const auto ccfg = cfg.conformer();
    for (std::size_t i = 0; i < cfg.blocks; ++i) p.blocks.push_back(init_conformer_block<T>(ccfg, rng));
    p.head_hidden = init_linear<T>(cfg.d_attn, cfg.head_dim, true, rng);
    p.head_out = init_linear<T>(cfg.head_dim, cfg.senones, true, rng);
    return p;
}

template <typename T>
void validate_params(const ModelParams<T>& params, const AcousticModelConfig& cfg) {
    const auto expected = init_model_params<T>(cfg, 0).named();
    const auto actual = params.named();
    const std::size_t n = std::min(expected.size(), actual.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (expected[i].first != actual[i].first) {
            throw StructureError("parameter #" + std::to_string(i) + " is '" + actual[i].first + "', config expects '" +
                                 expected[i].first + "'");
        }
        if (expected[i].second.shape() != actual[i].second.shape()) {
            throw StructureError("parameter '" + actual[i].first + "' has shape " +
                                 shape_str(actual[i].second.shape()) + ", config expects " +
                                 shape_str(expected[i].second.shape()));
        }
    }
    if (expected.size() != actual.size()) {
        const auto& extra = expected.size() > actual.size() ? expected[n].first : actual[n].first;
        throw StructureError("parameter count differs from config starting at '" + extra + "'");
    }
}

template <typename T, typename U>
void copy_values(const ModelParams<T>& from, ModelParams<U>& to) {
    auto src = from.named();
    auto dst = to.named();
    if (src.size() != dst.size()) throw StructureError("copy_values: parameter lists differ in length");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape()) {
            throw StructureError("copy_values: '" + src[i].first + "' does not match '" + dst[i].first + "'");
        }
        auto in = src[i].second.data();
        auto out = dst[i].second.data_mut();
        for (std::size_t j = 0; j < in.size(); ++j) out[j] = static_cast<U>(in[j]);
    }
}

template <typename T>
Tensor<T> model_forward_features(const Tensor<T>& features, const SequenceMask& mask, const ModelParams<T>& params,
                                 const AcousticModelConfig& cfg, const ForwardOptions& opts) {
    if (features.rank() != 4 || features.dim(1) != cfg.delta_channels || features.dim(2) != cfg.feature_dim) {
        throw ShapeError("model expects features [B," + std::to_string(cfg.delta_channels) + "," +
                         std::to_string(cfg.feature_dim) + ",T], got " + shape_str(features.shape()));
    }
    if (params.blocks.size() != cfg.blocks) {
        throw StructureError("config has " + std::to_string(cfg.blocks) + " conformer blocks, parameters have " +
                             std::to_string(params.blocks.size()));
    }
    if (params.head_out.weight.dim(0) != cfg.senones) {
        throw StructureError("head.out produces " + std::to_string(params.head_out.weight.dim(0)) +
                             " outputs, config expects " + std::to_string(cfg.senones) + " senones");
    }
    ForwardOptions o = opts;
    o.dropout = cfg.dropout;
    o.attention_dropout = cfg.attention_dropout;
    const auto ccfg = cfg.conformer();

    auto h = wrcnn_forward(features, params.wrcnn, cfg.frontend(), mask);
    h = apply_mask(params.projection(h), mask);
    if (ccfg.position == PositionPlacement::encoder_input) h = add_position(h, mask);
    for (const auto& block : params.blocks) h = conformer_block_forward(h, block, ccfg, mask, o);
    h = apply_mask(relu(params.head_hidden(h)), mask);
    h = train_dropout(h, o.dropout, o);
    return apply_mask(log_softmax(params.head_out(h)), mask);
}

template <typename T>
Tensor<T> model_forward(const Batch& batch, const ModelParams<T>& params, const AcousticModelConfig& cfg,
                        const ForwardOptions& opts, const Tensor<T>* lin) {
    if (batch.feature_dim != cfg.feature_dim) {
        throw ShapeError("batch feature_dim " + std::to_string(batch.feature_dim) + " differs from model " +
                         std::to_string(cfg.feature_dim));
    }
    const auto mask = batch.mask();
    const std::size_t nb = batch.size(), nf = batch.feature_dim, nt = batch.max_len;
    std::vector<T> feats(batch.features.begin(), batch.features.end());
    auto features = Tensor<T>::from({nb, 3, nf, nt}, std::move(feats));
    if (lin == nullptr) return model_forward_features(features, mask, params, cfg, opts);

    if (lin->rank() != 2 || lin->dim(0) != nf || lin->dim(1) != nf) {
        throw ShapeError("LIN transform must be [" + std::to_string(nf) + "," + std::to_string(nf) + "], got " +
                         shape_str(lin->shape()));
    }
    // channel 0 of the features holds the mean-normalized statics
    std::vector<T> statics(nb * nf * nt);
    auto fv = features.data();
    for (std::size_t b = 0; b < nb; ++b)
        std::copy_n(&fv[b * 3 * nf * nt], nf * nt, &statics[b * nf * nt]);
    auto s = Tensor<T>::from({nb, nf, nt}, std::move(statics));
    auto warped = permute(linear(permute(s, {0, 2, 1}), *lin), {0, 2, 1});
    return model_forward_features(stack_deltas(warped, mask), mask, params, cfg, opts);
}

template <typename T>
std::size_t count_params(const ModelParams<T>& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params.named()) n += t.numel();
    return n;
}

#define UCAM_INSTANTIATE_MODEL(T)                                                                                \
    template struct ModelParams<T>;                                                                              \
    template ModelParams<T> init_model_params<T>(const AcousticModelConfig&, std::uint64_t);                     \
    template void validate_params(const ModelParams<T>&, const AcousticModelConfig&);                            \
    template Tensor<T> model_forward_features(const Tensor<T>&, const SequenceMask&, const ModelParams<T>&,      \
                                              const AcousticModelConfig&, const ForwardOptions&);                \
    template Tensor<T> model_forward(const Batch&, const ModelParams<T>&, const AcousticModelConfig&,            \
                                     const ForwardOptions&, const Tensor<T>*);                                   \
    template std::size_t count_params(const ModelParams<T>&);

UCAM_INSTANTIATE_MODEL(float)
UCAM_INSTANTIATE_MODEL(double)

template void copy_values(const ModelParams<float>&, ModelParams<float>&);
template void copy_values(const ModelParams<float>&, ModelParams<double>&);
template void copy_values(const ModelParams<double>&, ModelParams<float>&);
template void copy_values(const ModelParams<double>&, ModelParams<double>&);
template ModelParams<double> ModelParams<float>::cast<double>(const AcousticModelConfig&) const;
template ModelParams<float> ModelParams<double>::cast<float>(const AcousticModelConfig&) const;

}  // namespace ucam
