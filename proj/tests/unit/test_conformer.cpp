#include <gtest/gtest.h>

#include <cmath>

#include "ucam/conformer.hpp"
#include "ucam/error.hpp"
#include "ucam/gradcheck.hpp"
#include "ucam/ops.hpp"

using namespace ucam;

namespace {

Tensord randn(Shape shape, Rng& rng, bool grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal();
    return Tensord::from(std::move(shape), std::move(v), grad);
}

template <typename P>
std::size_t count(const P& p) {
    NamedTensors<double> named;
    p.collect("x", named);
    std::size_t n = 0;
    for (auto& [name, t] : named) n += t.numel();
    return n;
}

ConformerConfig small() {
    ConformerConfig c;
    c.d_attn = 8;
    c.heads = 2;
    c.conv_kernel = 4;
    return c;
}

}  // namespace

TEST(Position, TableValues) {
    auto pe = positional_encoding<double>(3, 4);
    EXPECT_DOUBLE_EQ(pe[0], 0.0);
    EXPECT_DOUBLE_EQ(pe[1], 1.0);
    EXPECT_DOUBLE_EQ(pe[4], std::sin(1.0));
    EXPECT_DOUBLE_EQ(pe[5], std::cos(1.0));
    EXPECT_NEAR(pe[6], std::sin(1.0 / 100.0), 1e-15);
    EXPECT_THROW(positional_encoding<double>(3, 5), ConfigError);
}

TEST(Position, ZeroInputGivesScaledTable) {
    for (std::size_t d : {8, 64}) {
        auto y = add_position(Tensord::zeros({1, 5, d}), SequenceMask({5}, 5));
        auto pe = positional_encoding<double>(5, d);
        for (std::size_t i = 0; i < pe.numel(); ++i) EXPECT_NEAR(y[i], pe[i] / std::sqrt(double(d)), 1e-15);
    }
}

TEST(Position, MatchesScaledSumIdentityIn32Bit) {
    Rng rng(1);
    for (std::size_t d : {8, 64, 256}) {
        std::vector<float> x(4 * d);
        for (auto& v : x) v = static_cast<float>(rng.normal());
        auto y = add_position(Tensorf::from({1, 4, d}, x), SequenceMask({4}, 4));
        auto pe = positional_encoding<float>(4, d);
        const float r = std::sqrt(static_cast<float>(d));
        for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], (r * x[i] + pe[i]) / r, 1e-6);
    }
}

TEST(Counts, FullSizedModules) {
    ConformerConfig c;
    Rng rng(1);
    EXPECT_EQ(count(init_ffn<double>(c, rng)), 526080u);
    EXPECT_EQ(count(init_mhsa<double>(c, rng)), 262656u);
    // LN + pointwise(d->2d) + depthwise d*k + BN + pointwise(d->d)
    EXPECT_EQ(count(init_conv_module<double>(c, rng)), 512u + 131584u + 4096u + 512u + 65792u);
    auto no_final = c;
    no_final.final_layernorm = false;
    EXPECT_EQ(count(init_conformer_block<double>(c, rng)) - count(init_conformer_block<double>(no_final, rng)), 512u);
}

TEST(Config, Validation) {
    auto c = small();
    EXPECT_NO_THROW(c.validate());
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small();
    c.d_attn = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small();
    c.ln_eps = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Mhsa, MatchesNaiveAttention) {
    auto c = small();
    Rng rng(2);
    auto p = init_mhsa<double>(c, rng);
    const std::size_t T = 5, d = 8, H = 2, dh = 4;
    auto x = randn({1, T, d}, rng);
    SequenceMask m({4}, T);
    auto y = mhsa_forward(x, p, c, m, ForwardOptions{});

    auto xn = utterance_layernorm(x, m, p.norm);
    auto proj = [&](const Tensord& w) { return matmul(reshape(xn, {T, d}), permute(w, {1, 0})); };
    auto q = proj(p.wq), k = proj(p.wk), v = proj(p.wv);
    std::vector<double> ctx(T * d, 0.0);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < 4; ++i) {
            std::vector<double> s(4);
            double mx = -1e300, z = 0;
            for (std::size_t j = 0; j < 4; ++j) {
                double dot = 0;
                for (std::size_t e = 0; e < dh; ++e) dot += q[i * d + h * dh + e] * k[j * d + h * dh + e];
                s[j] = dot / std::sqrt(double(d));
                mx = std::max(mx, s[j]);
            }
            for (auto& sj : s) z += (sj = std::exp(sj - mx));
            for (std::size_t j = 0; j < 4; ++j)
                for (std::size_t e = 0; e < dh; ++e) ctx[i * d + h * dh + e] += s[j] / z * v[j * d + h * dh + e];
        }
    auto out = matmul(Tensord::from({T, d}, ctx), permute(p.wout, {1, 0}));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t e = 0; e < d; ++e) {
            const double want = t < 4 ? x[t * d + e] + out[t * d + e] : x[t * d + e];
            EXPECT_NEAR(y[t * d + e], want, 1e-12) << t << "," << e;
        }
}

TEST(Block, PaddingDoesNotChangeValidFrames) {
    auto c = small();
    Rng rng(3);
    auto p = init_conformer_block<double>(c, rng);
    auto x = randn({1, 6, 8}, rng);
    auto alone = conformer_block_forward(x, p, c, SequenceMask({6}, 6), ForwardOptions{});
    // same utterance padded to 11 frames with garbage after frame 6
    auto padded = randn({1, 11, 8}, rng);
    for (std::size_t i = 0; i < 48; ++i) padded.data_mut()[i] = x[i];
    auto y = conformer_block_forward(padded, p, c, SequenceMask({6}, 11), ForwardOptions{});
    for (std::size_t i = 0; i < 48; ++i) EXPECT_NEAR(y[i], alone[i], 1e-12);
    for (std::size_t i = 48; i < 88; ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(Block, DropoutOnlyInTraining) {
    auto c = small();
    Rng rng(4);
    auto p = init_conformer_block<double>(c, rng);
    auto x = randn({1, 5, 8}, rng);
    SequenceMask m({5}, 5);
    ForwardOptions eval;
    eval.dropout = 0.5;
    eval.attention_dropout = 0.5;
    auto a = conformer_block_forward(x, p, c, m, eval);
    auto b = conformer_block_forward(x, p, c, m, ForwardOptions{});
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
    Rng drop(5);
    ForwardOptions train = eval;
    train.train = true;
    train.rng = &drop;
    auto t = conformer_block_forward(x, p, c, m, train);
    bool differs = false;
    for (std::size_t i = 0; i < a.numel(); ++i) differs = differs || t[i] != a[i];
    EXPECT_TRUE(differs);
}

TEST(Block, ComposesMacaronOrder) {
    auto c = small();
    Rng rng(6);
    auto p = init_conformer_block<double>(c, rng);
    auto x = randn({1, 4, 8}, rng);
    SequenceMask m({3}, 4);
    const ForwardOptions o;
    auto h = ffn_forward(x, p.ffn1, c, m, o);
    h = conv_module_forward(mhsa_forward(add_position(h, m), p.mhsa, c, m, o), p.conv, c, m, o);
    auto want = apply_mask(utterance_layernorm(ffn_forward(h, p.ffn2, c, m, o), m, p.final_norm), m);
    auto got = conformer_block_forward(x, p, c, m, o);
    for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_EQ(got[i], want[i]);

    // encoder-input placement leaves the encoding out of the block
    auto enc = c;
    enc.position = PositionPlacement::encoder_input;
    h = conv_module_forward(mhsa_forward(ffn_forward(x, p.ffn1, c, m, o), p.mhsa, c, m, o), p.conv, c, m, o);
    want = apply_mask(utterance_layernorm(ffn_forward(h, p.ffn2, c, m, o), m, p.final_norm), m);
    got = conformer_block_forward(x, p, enc, m, o);
    for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_EQ(got[i], want[i]);
}

TEST(ConformerGrad, SubModules) {
    auto c = small();
    c.ln_stats = LayerNormStats::per_utterance;
    Rng rng(7);
    SequenceMask m({4, 3}, 4);
    auto x = randn({2, 4, 8}, rng, true);
    auto r = randn({2, 4, 8}, rng);
    auto run = [&](auto&& f, const NamedTensors<double>& named) {
        std::vector<Tensord> ps{x};
        for (auto& [n, t] : named) ps.push_back(t);
        GradCheckOptions o;
        o.max_coords = 8;
        return grad_check([&] { return sum(mul(f(), r)); }, ps, o).max_rel_error;
    };
    auto block = init_conformer_block<double>(c, rng);
    for (auto* n : {&block.ffn1.norm, &block.mhsa.norm, &block.conv.norm, &block.conv.batchnorm, &block.final_norm})
        for (auto& v : n->gamma.data_mut()) v += 0.3 * rng.normal();
    NamedTensors<double> named;
    block.collect("b", named);
    EXPECT_LT(run([&] { return conformer_block_forward(x, block, c, m, ForwardOptions{}); }, named), 1e-5);

    NamedTensors<double> f;
    block.ffn1.collect("f", f);
    EXPECT_LT(run([&] { return ffn_forward(x, block.ffn1, c, m, ForwardOptions{}); }, f), 1e-5);
    NamedTensors<double> a;
    block.mhsa.collect("a", a);
    EXPECT_LT(run([&] { return mhsa_forward(x, block.mhsa, c, m, ForwardOptions{}); }, a), 1e-5);
    NamedTensors<double> cv;
    block.conv.collect("c", cv);
    EXPECT_LT(run([&] { return conv_module_forward(x, block.conv, c, m, ForwardOptions{}); }, cv), 1e-5);
}
