#include <gtest/gtest.h>

#include <cstring>

#include "ucam/adaptation.hpp"
#include "ucam/data.hpp"
#include "ucam/error.hpp"
#include "ucam/gradcheck.hpp"
#include "ucam/ops.hpp"
#include "ucam/training.hpp"

using namespace ucam;

namespace {

std::vector<Utterance> speaker_utts(std::size_t n, std::size_t feature_dim = 16, std::size_t classes = 8) {
    SynthConfig c;
    c.classes = classes;
    c.speakers = 1;
    c.first_speaker = 50;
    c.utterances = n;
    c.feature_dim = feature_dim;
    c.min_frames = 6;
    c.max_frames = 10;
    c.warp_strength = 0.5;
    return synth_corpus(c).utterances;
}

AcousticModelConfig tiny_model() {
    auto c = AcousticModelConfig::micro();
    c.d_attn = 16;
    c.blocks = 1;
    c.head_dim = 16;
    c.wrcnn.out_dim = 16;
    return c;
}

}  // namespace

TEST(Lin, InitIsTrackedIdentity) {
    for (std::size_t f : {80, 3}) {
        auto lin = lin_init(f, "spk");
        ASSERT_EQ(lin.weight.shape(), (Shape{f, f}));
        EXPECT_TRUE(lin.weight.requires_grad());
        for (std::size_t i = 0; i < f; ++i)
            for (std::size_t j = 0; j < f; ++j) EXPECT_EQ(lin.weight[i * f + j], i == j ? 1.0f : 0.0f);
    }
    EXPECT_THROW(lin_init(0), ConfigError);
}

TEST(Lin, IdentityForwardIsBitExact) {
    const auto cfg = tiny_model();
    const auto params = init_model_params<float>(cfg, 1);
    const auto batch = make_batch(speaker_utts(3));
    const auto lin = lin_init(cfg.feature_dim);
    auto a = model_forward(batch, params, cfg, ForwardOptions{});
    auto b = model_forward(batch, params, cfg, ForwardOptions{}, &lin.weight);
    ASSERT_EQ(a.numel(), b.numel());
    EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)), 0);
    auto wrong = Tensorf::zeros({3, 3});
    EXPECT_THROW(model_forward(batch, params, cfg, ForwardOptions{}, &wrong), ShapeError);
}

TEST(Lin, GradientReachesOnlyW) {
    auto cfg = gradcheck_model_config();
    auto params = init_model_params<double>(cfg, 3).clone();
    params.set_requires_grad(false);
    const auto batch = make_batch(speaker_utts(2, cfg.feature_dim, cfg.senones));
    Rng rng(4);
    std::vector<double> w(cfg.feature_dim * cfg.feature_dim);
    for (std::size_t i = 0; i < cfg.feature_dim; ++i)
        for (std::size_t j = 0; j < cfg.feature_dim; ++j) w[i * cfg.feature_dim + j] = (i == j) + 0.1 * rng.normal();
    auto lin = Tensord::from({cfg.feature_dim, cfg.feature_dim}, w, true);
    const auto mask = batch.mask();
    auto f = [&] { return masked_cross_entropy(model_forward(batch, params, cfg, ForwardOptions{}, &lin), batch.labels, mask); };
    EXPECT_LT(grad_check(f, {lin}).max_rel_error, 1e-5);
    // frozen model tensors receive no gradient
    for (const auto& [name, t] : params.named()) EXPECT_FALSE(t.has_grad()) << name;
}

TEST(Adapt, ThreeIterationsFromIdentityModelUntouched) {
    const auto cfg = tiny_model();
    const auto params = init_model_params<float>(cfg, 2);
    const auto before = params.clone();
    const auto utts = speaker_utts(6);
    const auto [adapt_set, heldout] = split_heldout(utts, 0.5);
    AdaptConfig ac;
    ac.epochs = 2;
    const auto r = adapt_speaker(params, cfg, adapt_set, heldout, ac, "spk00050");
    ASSERT_EQ(r.report.iterations.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(r.report.iterations[i].iteration, i + 1);
        EXPECT_TRUE(r.report.iterations[i].started_from_identity);
    }
    EXPECT_EQ(r.lin.iteration, 3u);
    EXPECT_EQ(r.lin.speaker, "spk00050");
    EXPECT_EQ(r.report.speaker, "spk00050");
    const auto a = params.named(), b = before.named();
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_EQ(std::memcmp(a[i].second.data().data(), b[i].second.data().data(), a[i].second.numel() * 4), 0);
    // W moved away from the identity
    bool moved = false;
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j) moved = moved || r.lin.weight[i * 16 + j] != (i == j ? 1.0f : 0.0f);
    EXPECT_TRUE(moved);
}

TEST(Adapt, ZeroIterationsKeepsIdentity) {
    const auto cfg = tiny_model();
    const auto params = init_model_params<float>(cfg, 2);
    const auto utts = speaker_utts(4);
    AdaptConfig ac;
    ac.iterations = 0;
    const auto r = adapt_speaker(params, cfg, utts, {}, ac);
    EXPECT_TRUE(r.report.iterations.empty());
    EXPECT_EQ(r.report.final_heldout_error(), r.report.initial_heldout_error);
    EXPECT_NEAR(r.report.initial_heldout_error, evaluate(params, cfg, utts).frame_error(), 1e-12);
}

TEST(Adapt, Contracts) {
    const auto cfg = tiny_model();
    const auto params = init_model_params<float>(cfg, 2);
    EXPECT_THROW(adapt_speaker(params, cfg, {}, {}, AdaptConfig{}), ContractError);
    AdaptConfig bad;
    bad.batch_size = 0;
    EXPECT_THROW(adapt_speaker(params, cfg, speaker_utts(2), {}, bad), ConfigError);
}

TEST(PseudoLabel, ArgmaxOfValidFrames) {
    const auto cfg = tiny_model();
    const auto params = init_model_params<float>(cfg, 5);
    const auto utts = speaker_utts(3);
    const auto labels = pseudo_label(params, cfg, utts, nullptr, 2);
    ASSERT_EQ(labels.size(), 3u);
    for (std::size_t u = 0; u < 3; ++u) {
        ASSERT_EQ(labels[u].size(), utts[u].frames);
        std::vector<Utterance> one{utts[u]};
        auto lp = model_forward(make_batch(one), params, cfg, ForwardOptions{});
        for (std::size_t t = 0; t < utts[u].frames; ++t) {
            const float* row = &lp.data()[t * cfg.senones];
            EXPECT_EQ(labels[u][t], std::max_element(row, row + cfg.senones) - row);
        }
    }
}

TEST(Split, TrailingShareHeldOut) {
    const auto utts = speaker_utts(5);
    auto [a, h] = split_heldout(utts, 0.5);
    EXPECT_EQ(a.size() + h.size(), 5u);
    EXPECT_GE(a.size(), 1u);
    EXPECT_GE(h.size(), 1u);
    EXPECT_EQ(h.back().id, utts.back().id);
    auto [all, none] = split_heldout(utts, 0.0);
    EXPECT_EQ(all.size(), 5u);
    EXPECT_TRUE(none.empty());
    std::vector<Utterance> one{utts[0]};
    EXPECT_TRUE(split_heldout(one, 0.5).second.empty());
}
