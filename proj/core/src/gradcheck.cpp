#include "ucam/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ucam/conformer.hpp"
#include "ucam/deltas.hpp"
#include "ucam/error.hpp"
#include "ucam/ops.hpp"
#include "ucam/random.hpp"
#include "ucam/wrcnn.hpp"

namespace ucam {

GradCheckResult grad_check(const std::function<Tensor<double>()>& f, const std::vector<Tensor<double>>& params,
                           const GradCheckOptions& options, const std::vector<std::string>& names) {
    if (!(options.eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
    for (const auto& p : params) {
        if (!p.requires_grad()) throw ContractError("grad_check: every checked tensor must require gradients");
    }
    FiniteCheckGuard finite;
    for (auto p : params) p.zero_grad();
    backward(f());
    std::vector<std::vector<double>> analytic;
    for (const auto& p : params) {
        analytic.emplace_back(p.numel(), 0.0);
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.back().begin());
    }
    for (auto p : params) p.zero_grad();

    GradCheckResult result;
    Rng pick(options.seed, 9ULL << 32);
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<double> p = params[i];
        std::vector<std::size_t> idx(p.numel());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (options.max_coords > 0 && options.max_coords < idx.size()) {
            pick.shuffle(std::span<std::size_t>(idx));
            idx.resize(options.max_coords);
            std::sort(idx.begin(), idx.end());
        }
        for (std::size_t j : idx) {
            auto v = p.data_mut();
            const double orig = v[j];
            v[j] = orig + options.eps;
            const double fp = f().item();
            p.data_mut()[j] = orig - options.eps;
            const double fm = f().item();
            p.data_mut()[j] = orig;
            const double numeric = (fp - fm) / (2.0 * options.eps);
            const double a = analytic[i][j];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
            ++result.coordinates;
            if (result.worst.empty() || err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst = (i < names.size() ? names[i] : "#" + std::to_string(i)) + "[" + std::to_string(j) + "]";
            }
        }
    }
    return result;
}

AcousticModelConfig gradcheck_model_config() {
    AcousticModelConfig c;
    c.feature_dim = 8;
    c.d_attn = 8;
    c.heads = 2;
    c.blocks = 1;
    c.conv_kernel = 16;
    c.head_dim = 16;
    c.senones = 5;
    c.wrcnn.base_channels = 2;
    c.wrcnn.multipliers = {1, 2, 2};
    c.wrcnn.freq_strides = {1, 2, 2};
    c.wrcnn.out_dim = 8;
    return c;
}

namespace {

using Td = Tensor<double>;

Td randn(const Shape& shape, Rng& rng, bool requires_grad, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = scale * rng.normal();
    return Td::from(shape, std::move(v), requires_grad);
}

// Moves norm parameters off their identity initialization.
void jitter_norms(const NamedTensors<double>& named, Rng& rng) {
    for (const auto& [name, t] : named) {
        const bool gamma = name.ends_with(".gamma"), beta = name.ends_with(".beta");
        if (!gamma && !beta) continue;
        Td h = t;
        for (auto& v : h.data_mut()) v = (gamma ? 1.0 : 0.0) + 0.2 * rng.normal();
    }
}

class Suite {
  public:
    Suite(const GradSuiteOptions& o) : opts_(o), rng_(o.seed, 10ULL << 32) {}

    // Checks sum(forward() * R) for a fixed random R, so every output
    // coordinate gets its own weight.
    void check(const std::string& name, const std::function<Td()>& forward, const NamedTensors<double>& params) {
        Td probe;
        {
            NoGradGuard g;
            probe = forward();
        }
        Td weights = randn(probe.shape(), rng_, false);
        std::vector<Td> tensors;
        std::vector<std::string> names;
        for (const auto& [n, t] : params) {
            tensors.push_back(t);
            names.push_back(n);
        }
        auto r = grad_check([&] { return sum(mul(forward(), weights)); }, tensors, opts_.check, names);
        r.name = name;
        results_.push_back(std::move(r));
    }

    Rng& rng() { return rng_; }
    std::vector<GradCheckResult> take() { return std::move(results_); }

  private:
    GradSuiteOptions opts_;
    Rng rng_;
    std::vector<GradCheckResult> results_;
};

}  // namespace

std::vector<GradCheckResult> gradcheck_suite(const GradSuiteOptions& options) {
    Suite s(options);
    Rng& rng = s.rng();
    const auto& mcfg = options.model;
    mcfg.validate();
    const auto ccfg = mcfg.conformer();
    const std::size_t d = ccfg.d_attn;
    const SequenceMask mask({4, 3}, 4);

    // tensor-core ops
    {
        auto a = randn({5, 4}, rng, true), b = randn({4, 3}, rng, true);
        s.check("ops.matmul", [=] { return matmul(a, b); }, {{"a", a}, {"b", b}});
        auto x = randn({2, 3, 4}, rng, true), y = randn({2, 4, 5}, rng, true), z = randn({2, 5, 4}, rng, true);
        s.check("ops.bmm", [=] { return bmm(x, y); }, {{"x", x}, {"y", y}});
        s.check("ops.bmm_nt", [=] { return bmm_nt(x, z); }, {{"x", x}, {"z", z}});
        auto w = randn({6, 4}, rng, true), bias = randn({6}, rng, true);
        s.check("ops.linear", [=] { return linear(x, w, bias); }, {{"x", x}, {"w", w}, {"bias", bias}});
        auto u = randn({3, 4}, rng, true), v = randn({3, 4}, rng, true);
        s.check("ops.elementwise", [=] { return mul(add(u, scale(v, 0.5)), sub(u, v)); }, {{"u", u}, {"v", v}});
        s.check("ops.mean", [=] { return mean(mul(u, u)); }, {{"u", u}});
        auto row = randn({4}, rng, true);
        s.check("ops.add_bias", [=] { return add_bias(u, row); }, {{"u", u}, {"row", row}});
        auto h = randn({3, 8}, rng, true);
        s.check("ops.swish", [=] { return swish(h); }, {{"h", h}});
        s.check("ops.sigmoid", [=] { return sigmoid(h); }, {{"h", h}});
        s.check("ops.relu", [=] { return relu(h); }, {{"h", h}});
        s.check("ops.elu", [=] { return elu(h); }, {{"h", h}});
        s.check("ops.glu", [=] { return glu(h, 1); }, {{"h", h}});
        s.check("ops.permute_reshape", [=] { return reshape(permute(x, {2, 0, 1}), {8, 3}); }, {{"x", x}});
        s.check("ops.log_softmax", [=] { return log_softmax(h); }, {{"h", h}});
        auto img = randn({2, 3, 5, 4}, rng, true), k = randn({2, 3, 3, 3}, rng, true);
        s.check("ops.conv2d", [=] { return conv2d(img, k, 2, 1, 1); }, {{"x", img}, {"w", k}});
        auto seq = randn({2, 3, 6}, rng, true), dk = randn({3, 4}, rng, true);
        s.check("ops.depthwise_conv1d", [=] { return depthwise_conv1d(seq, dk, 1); }, {{"x", seq}, {"w", dk}});
        auto st = randn({2, 3, 4}, rng, true);
        s.check("ops.stack_deltas", [=] { return stack_deltas(st, mask); }, {{"x", st}});
    }

    // normalization and attention weights
    {
        auto x = randn({2, 4, d}, rng, true);
        auto np = NormParams<double>::identity(d, ccfg.ln_eps);
        NamedTensors<double> ln{{"x", x}};
        collect_norm("ln", np, ln);
        jitter_norms(ln, rng);
        s.check("layernorm", [=] { return utterance_layernorm(x, mask, np, LayerNormStats::per_frame); }, ln);
        s.check("layernorm.per_utterance", [=] { return utterance_layernorm(x, mask, np, LayerNormStats::per_utterance); },
                ln);
        auto x3 = randn({2, 3, 4}, rng, true);
        auto bp = NormParams<double>::identity(3, ccfg.bn_eps);
        NamedTensors<double> bn{{"x", x3}};
        collect_norm("bn", bp, bn);
        jitter_norms(bn, rng);
        s.check("batchnorm", [=] { return utterance_batchnorm(x3, mask, bp); }, bn);
        auto x4 = randn({2, 3, 5, 4}, rng, true);
        NamedTensors<double> bn4{{"x", x4}};
        collect_norm("bn", bp, bn4);
        s.check("batchnorm.4d", [=] { return utterance_batchnorm(x4, mask, bp); }, bn4);
        auto scores = randn({2, 2, 4, 4}, rng, true);
        s.check("masked_softmax", [=] { return masked_softmax(scores, mask); }, {{"scores", scores}});
    }

    // conformer modules
    {
        const ForwardOptions eval;
        auto x = randn({2, 4, d}, rng, true);
        auto block = init_conformer_block<double>(ccfg, rng);
        NamedTensors<double> all;
        block.collect("block", all);
        jitter_norms(all, rng);
        auto with_x = [&](auto collect) {
            NamedTensors<double> out{{"x", x}};
            collect(out);
            return out;
        };
        s.check("ffn", [=] { return ffn_forward(x, block.ffn1, ccfg, mask, eval); },
                with_x([&](auto& o) { block.ffn1.collect("ffn", o); }));
        s.check("mhsa", [=] { return mhsa_forward(x, block.mhsa, ccfg, mask, eval); },
                with_x([&](auto& o) { block.mhsa.collect("mhsa", o); }));
        s.check("conv_module", [=] { return conv_module_forward(x, block.conv, ccfg, mask, eval); },
                with_x([&](auto& o) { block.conv.collect("conv", o); }));
        s.check("conformer_block", [=] { return conformer_block_forward(x, block, ccfg, mask, eval); },
                with_x([&](auto& o) { block.collect("block", o); }));
    }

    // WRCNN
    {
        const auto wcfg = mcfg.frontend();
        auto x = randn({2, 2, 5, 4}, rng, true);
        auto rb = init_residual_block<double>(2, 4, 2, wcfg, rng);
        NamedTensors<double> named{{"x", x}};
        rb.collect("block", named);
        jitter_norms(named, rng);
        s.check("wrcnn_block", [=] { return residual_block_forward(x, rb, wcfg, mask); }, named);
        auto feats = randn({2, wcfg.in_channels, mcfg.feature_dim, 4}, rng, true);
        auto wp = init_wrcnn<double>(wcfg, mcfg.feature_dim, rng);
        NamedTensors<double> wn{{"x", feats}};
        wp.collect("wrcnn", wn);
        jitter_norms(wn, rng);
        s.check("wrcnn", [=] { return wrcnn_forward(feats, wp, wcfg, mask); }, wn);
    }

    // full model and LIN
    {
        auto params = init_model_params<double>(mcfg, options.seed);
        auto named = params.named();
        jitter_norms(named, rng);
        auto feats = randn({2, mcfg.delta_channels, mcfg.feature_dim, 4}, rng, false);
        s.check("model", [=] { return model_forward_features(feats, mask, params, mcfg, ForwardOptions{}); }, named);

        SynthConfig sc;
        sc.seed = options.seed;
        sc.feature_dim = mcfg.feature_dim;
        sc.classes = mcfg.senones;
        sc.utterances = 2;
        sc.speakers = 1;
        sc.min_frames = 3;
        sc.max_frames = 4;
        const auto corpus = synth_corpus(sc);
        const auto batch = make_batch(corpus.utterances);
        auto frozen = params.clone();
        frozen.set_requires_grad(false);
        auto lin = randn({mcfg.feature_dim, mcfg.feature_dim}, rng, true, 0.1);
        for (std::size_t i = 0; i < mcfg.feature_dim; ++i) lin.data_mut()[i * mcfg.feature_dim + i] += 1.0;
        s.check("lin", [=] { return model_forward(batch, frozen, mcfg, ForwardOptions{}, &lin); }, {{"lin", lin}});
    }
    return s.take();
}

}  // namespace ucam
