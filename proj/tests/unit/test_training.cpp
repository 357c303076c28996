#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <unistd.h>

#include "ucam/checkpoint.hpp"
#include "ucam/data.hpp"
#include "ucam/error.hpp"
#include "ucam/gradcheck.hpp"
#include "ucam/model.hpp"
#include "ucam/ops.hpp"
#include "ucam/training.hpp"

namespace fs = std::filesystem;
using namespace ucam;

namespace {

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("ucam_test_training_" + std::to_string(::getpid())) / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<Utterance> tiny_corpus() {
    SynthConfig c;
    c.utterances = 8;
    c.min_frames = 6;
    c.max_frames = 10;
    return synth_corpus(c).utterances;
}

AcousticModelConfig tiny_model() {
    auto c = AcousticModelConfig::micro();
    c.d_attn = 16;
    c.heads = 2;
    c.blocks = 1;
    c.head_dim = 16;
    c.wrcnn.out_dim = 16;
    return c;
}

TrainConfig quick(std::size_t steps) {
    TrainConfig t;
    t.steps = steps;
    t.warmup_steps = 50;
    t.lr_factor = 1.0;
    t.eval_every = 4;
    return t;
}

bool same_bits(const ModelParams<float>& a, const ModelParams<float>& b) {
    auto na = a.named(), nb = b.named();
    for (std::size_t i = 0; i < na.size(); ++i) {
        auto x = na[i].second.data(), y = nb[i].second.data();
        if (std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
    }
    return na.size() == nb.size();
}

}  // namespace

TEST(Schedule, ClosedFormValues) {
    const LRSchedule s{256, 20000, 5.0};
    EXPECT_NEAR(lr_at(20000, s), 5.0 / 16.0 / std::sqrt(20000.0), 1e-12);
    EXPECT_NEAR(lr_at(1, s), 5.0 / 16.0 * std::pow(20000.0, -1.5), 1e-15);
    EXPECT_NEAR(lr_at(80000, s), 5.0 / 16.0 / std::sqrt(80000.0), 1e-12);
    EXPECT_THROW(lr_at(0, s), ContractError);
    EXPECT_THROW(lr_at(1, LRSchedule{256, 0, 5.0}), ConfigError);
}

TEST(Schedule, RisesThenFalls) {
    const LRSchedule s{64, 100, 2.0};
    for (std::size_t t = 2; t <= 100; ++t) EXPECT_GT(lr_at(t, s), lr_at(t - 1, s));
    for (std::size_t t = 101; t <= 1000; ++t) EXPECT_LT(lr_at(t, s), lr_at(t - 1, s));
}

TEST(Adam, ZeroGradientLeavesParameters) {
    auto w = Tensord::from({3}, {1.0, -2.0, 3.0}, true);
    NamedTensors<double> p{{"w", w}};
    auto st = AdamState<double>::init(p);
    adam_step(p, st, 0.1);
    EXPECT_EQ(w[0], 1.0);
    EXPECT_EQ(w[1], -2.0);
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ConstantGradientStepsBySign) {
    auto w = Tensord::from({2}, {0.0, 0.0}, true);
    NamedTensors<double> p{{"w", w}};
    auto st = AdamState<double>::init(p);
    for (int i = 1; i <= 5; ++i) {
        w.zero_grad();
        backward(sum(mul(w, Tensord::from({2}, {3.0, -0.5}))));
        adam_step(p, st, 0.01);
        EXPECT_NEAR(w[0], -0.01 * i, 1e-9);
        EXPECT_NEAR(w[1], 0.01 * i, 1e-9);
    }
}

TEST(Adam, HandTraceThreeSteps) {
    const double lr = 0.1, b1 = 0.9, b2 = 0.98, eps = 1e-9;
    const double grads[3] = {1.0, -2.0, 0.5};
    auto w = Tensord::from({1}, {0.0}, true);
    NamedTensors<double> p{{"w", w}};
    auto st = AdamState<double>::init(p, b1, b2, eps);
    double m = 0, v = 0, x = 0;
    for (int i = 0; i < 3; ++i) {
        w.zero_grad();
        backward(scale(sum(w), grads[i]));
        adam_step(p, st, lr);
        m = b1 * m + (1 - b1) * grads[i];
        v = b2 * v + (1 - b2) * grads[i] * grads[i];
        x -= lr * (m / (1 - std::pow(b1, i + 1))) / (std::sqrt(v / (1 - std::pow(b2, i + 1))) + eps);
        EXPECT_NEAR(w[0], x, 1e-10);
    }
}

TEST(Adam, LearningRateZeroChangesNothing) {
    auto w = Tensord::from({2}, {0.3, 0.7}, true);
    NamedTensors<double> p{{"w", w}};
    auto st = AdamState<double>::init(p);
    backward(sum(mul(w, w)));
    adam_step(p, st, 0.0);
    EXPECT_EQ(w[0], 0.3);
    EXPECT_EQ(w[1], 0.7);
}

TEST(Adam, NonFiniteGradientNamesParameterAndLeavesState) {
    auto a = Tensord::from({1}, {1.0}, true);
    auto b = Tensord::from({1}, {2.0}, true);
    NamedTensors<double> p{{"a", a}, {"bad.weight", b}};
    auto st = AdamState<double>::init(p);
    backward(add(sum(a), sum(mul(b, Tensord::from({1}, {std::numeric_limits<double>::infinity()})))));
    try {
        adam_step(p, st, 0.1);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("bad.weight"), std::string::npos);
    }
    EXPECT_EQ(a[0], 1.0);
    EXPECT_EQ(st.step, 0u);
    EXPECT_EQ(st.m[0][0], 0.0);
}

TEST(Ema, FixedPointAndSingleUpdate) {
    auto w = Tensord::from({2}, {1.0, 1.0});
    NamedTensors<double> p{{"w", w}};
    auto ema = EmaState<double>::init(p, 0.999);
    ema_update(ema, p);
    EXPECT_EQ(ema.shadow[0][0], 1.0);

    auto z = Tensord::from({2}, {0.0, 0.0});
    auto from_zero = EmaState<double>::init({{"w", z}}, 0.999);
    ema_update(from_zero, p);
    EXPECT_NEAR(from_zero.shadow[0][0], 0.001, 1e-15);
    EXPECT_THROW(EmaState<double>::init(p, 1.0), ConfigError);
}

TEST(Ema, GeometricSeries) {
    auto p0 = Tensord::from({1}, {2.0});
    auto p1 = Tensord::from({1}, {-1.0});
    auto ema = EmaState<double>::init({{"w", p0}}, 0.99);
    for (int k = 1; k <= 300; ++k) {
        ema_update(ema, {{"w", p1}});
        const double dk = std::pow(0.99, k);
        EXPECT_NEAR(ema.shadow[0][0], dk * 2.0 + (1 - dk) * -1.0, 1e-9);
    }
    auto target = Tensord::zeros({1});
    ema_export(ema, {{"w", target}});
    EXPECT_EQ(target[0], ema.shadow[0][0]);
}

TEST(CrossEntropy, UniformPosteriorsGiveLogK) {
    const std::size_t K = 5;
    auto lp = log_softmax(Tensord::zeros({2, 3, K}));
    std::vector<std::int32_t> labels{0, 1, 2, 3, 4, 0};
    auto loss = masked_cross_entropy(lp, labels, SequenceMask({3, 2}, 3));
    EXPECT_NEAR(loss.item(), std::log(5.0), 1e-12);
}

TEST(CrossEntropy, IgnoresPaddingAndChecksLabels) {
    std::vector<double> v(2 * 2 * 3, -1e3);
    v[0 * 3 + 1] = 0.0;  // (0,0) -> class 1
    v[1 * 3 + 2] = 0.0;  // (0,1) -> class 2
    v[2 * 3 + 0] = 0.0;  // (1,0) -> class 0
    auto lp = Tensord::from({2, 2, 3}, v);
    // label at padded (1,1) is garbage and must not be read
    std::vector<std::int32_t> labels{1, 2, 0, 77};
    SequenceMask m({2, 1}, 2);
    EXPECT_NEAR(masked_cross_entropy(lp, labels, m).item(), 0.0, 1e-12);
    EXPECT_EQ(count_correct(lp, labels, m), 3u);

    labels[1] = 7;
    try {
        masked_cross_entropy(lp, labels, m);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("b=0, t=1"), std::string::npos) << e.what();
    }
    EXPECT_THROW(masked_cross_entropy(lp, std::vector<std::int32_t>{1, 2}, m), ShapeError);
}

TEST(CrossEntropy, GradCheck) {
    Rng rng(4);
    std::vector<double> v(2 * 3 * 4);
    for (auto& x : v) x = rng.normal();
    auto z = Tensord::from({2, 3, 4}, v, true);
    std::vector<std::int32_t> labels{0, 3, 1, 2, 2, 0};
    SequenceMask m({3, 2}, 3);
    EXPECT_LT(grad_check([&] { return masked_cross_entropy(log_softmax(z), labels, m); }, {z}).max_rel_error, 1e-5);
}

TEST(Fit, SeededRunsAreIdentical) {
    const auto utts = tiny_corpus();
    const auto cfg = tiny_model();
    auto a = init_model_params<float>(cfg, 1), b = init_model_params<float>(cfg, 1);
    const auto ra = fit(a, cfg, quick(12), utts, {});
    const auto rb = fit(b, cfg, quick(12), utts, {});
    ASSERT_EQ(ra.log.size(), 12u);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(ra.log[i].train_loss, rb.log[i].train_loss);
    EXPECT_TRUE(same_bits(a, b));
    EXPECT_LT(ra.log.back().train_loss, ra.log.front().train_loss);
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
    const auto utts = tiny_corpus();
    const auto cfg = tiny_model();
    const auto full_dir = temp_dir("full"), split_dir = temp_dir("split");
    auto full = init_model_params<float>(cfg, 1);
    FitOptions fo;
    fo.out_dir = full_dir;
    fit(full, cfg, quick(10), utts, utts, fo);

    auto first = init_model_params<float>(cfg, 1);
    fo.out_dir = split_dir;
    fit(first, cfg, quick(8), utts, utts, fo);  // stop on an evaluation step
    auto resumed = init_model_params<float>(cfg, 99);  // overwritten by the checkpoint
    fo.resume = true;
    const auto r = fit(resumed, cfg, quick(10), utts, utts, fo);
    EXPECT_EQ(r.start_step, 8u);
    EXPECT_TRUE(same_bits(full, resumed));
    EXPECT_EQ(read_file(full_dir / "train_log.csv"), read_file(split_dir / "train_log.csv"));
    const auto log = read_file(full_dir / "train_log.csv");
    EXPECT_EQ(log.substr(0, log.find('\n')), kTrainLogHeader);
    EXPECT_TRUE(fs::exists(full_dir / "best.ckpt"));
    EXPECT_TRUE(fs::exists(full_dir / "model.ckpt"));
}

TEST(Fit, DivergenceLeavesNoCheckpoint) {
    const auto utts = tiny_corpus();
    const auto cfg = tiny_model();
    auto params = init_model_params<float>(cfg, 1);
    params.head_out.bias.data_mut()[0] = std::numeric_limits<float>::quiet_NaN();
    const auto dir = temp_dir("nan");
    FitOptions fo;
    fo.out_dir = dir;
    EXPECT_THROW(fit(params, cfg, quick(5), utts, {}, fo), DivergenceError);
    EXPECT_FALSE(fs::exists(dir / "last.ckpt"));
    EXPECT_FALSE(fs::exists(dir / "model.ckpt"));
}

TEST(Fit, FineTuneExportsEmaWeights) {
    const auto utts = tiny_corpus();
    const auto cfg = tiny_model();
    auto params = init_model_params<float>(cfg, 1);
    auto tc = quick(6);
    tc.finetune_steps = 4;
    tc.finetune_lr = 1e-3;
    const auto dir = temp_dir("ft");
    FitOptions fo;
    fo.out_dir = dir;
    const auto report = fit(params, cfg, tc, utts, {}, fo);
    EXPECT_TRUE(report.finetuned);
    EXPECT_EQ(report.final_step, 10u);
    const auto last = load_checkpoint(dir / "last.ckpt");
    for (const auto& [name, t] : params.named()) {
        const auto* shadow = last.extra("ema." + name);
        ASSERT_NE(shadow, nullptr) << name;
        EXPECT_EQ(std::memcmp(shadow->data().data(), t.data().data(), t.numel() * sizeof(float)), 0) << name;
    }
    const auto model = load_checkpoint(dir / "model.ckpt");
    EXPECT_TRUE(same_bits(model.params, params));
}

TEST(Fit, StopsAtTargetAccuracy) {
    const auto utts = tiny_corpus();
    const auto cfg = tiny_model();
    auto params = init_model_params<float>(cfg, 1);
    auto tc = quick(40);
    tc.stop_at_train_accuracy = 0.01;  // reached at the first evaluation
    const auto r = fit(params, cfg, tc, utts, {});
    EXPECT_EQ(r.first_step_at_target, 4u);
    EXPECT_EQ(r.final_step, 4u);
}

TEST(Evaluate, MatchesManualCount) {
    const auto utts = tiny_corpus();
    const auto cfg = tiny_model();
    const auto params = init_model_params<float>(cfg, 2);
    const auto e = evaluate(params, cfg, utts, 3);
    std::size_t frames = 0;
    for (const auto& u : utts) frames += u.frames;
    EXPECT_EQ(e.frames, frames);
    const auto e1 = evaluate(params, cfg, utts, 1);
    EXPECT_NEAR(e.loss, e1.loss, 1e-5);
    EXPECT_EQ(e.frame_accuracy, e1.frame_accuracy);
    EXPECT_THROW(evaluate(params, cfg, std::span<const Utterance>{}), ContractError);
}
