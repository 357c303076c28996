#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "ucam/checkpoint.hpp"
#include "ucam/data.hpp"
#include "ucam/error.hpp"
#include "ucam/model.hpp"
#include "ucam/ops.hpp"
#include "ucam/training.hpp"

namespace fs = std::filesystem;
using namespace ucam;

namespace {

fs::path temp_file(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("ucam_test_model_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    return dir / name;
}

std::vector<Utterance> corpus(std::size_t n = 6) {
    SynthConfig c;
    c.utterances = n;
    c.min_frames = 5;
    c.max_frames = 12;
    return synth_corpus(c).utterances;
}

std::string bytes_of(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void put(const fs::path& p, const std::string& b) { std::ofstream(p, std::ios::binary | std::ios::trunc) << b; }

bool same_bits(const ModelParams<float>& a, const ModelParams<float>& b) {
    auto na = a.named(), nb = b.named();
    if (na.size() != nb.size()) return false;
    for (std::size_t i = 0; i < na.size(); ++i) {
        auto x = na[i].second.data(), y = nb[i].second.data();
        if (na[i].first != nb[i].first || x.size() != y.size() ||
            std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0)
            return false;
    }
    return true;
}

}  // namespace

TEST(Model, PosteriorsNormalizeAndPaddingIsZero) {
    const auto cfg = AcousticModelConfig::micro();
    const auto params = init_model_params<float>(cfg, 1);
    const auto utts = corpus(4);
    const auto batch = make_batch(utts);
    auto lp = model_forward(batch, params, cfg, ForwardOptions{});
    ASSERT_EQ(lp.shape(), (Shape{4, batch.max_len, 8}));
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t t = 0; t < batch.max_len; ++t) {
            double s = 0;
            for (std::size_t k = 0; k < 8; ++k) {
                const float v = lp[(b * batch.max_len + t) * 8 + k];
                s += t < batch.lengths[b] ? std::exp(v) : std::fabs(v);
            }
            EXPECT_NEAR(s, t < batch.lengths[b] ? 1.0 : 0.0, 1e-5);
        }
}

TEST(Model, EvalForwardIsDeterministic) {
    const auto cfg = AcousticModelConfig::micro();
    const auto params = init_model_params<float>(cfg, 2);
    const auto batch = make_batch(corpus(3));
    auto a = model_forward(batch, params, cfg, ForwardOptions{});
    auto b = model_forward(batch, params, cfg, ForwardOptions{});
    EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)), 0);
}

TEST(Model, BatchingDoesNotChangePosteriors) {
    const auto cfg = AcousticModelConfig::micro();
    const auto params = init_model_params<float>(cfg, 3);
    const auto utts = corpus(5);
    auto together = model_forward(make_batch(utts), params, cfg, ForwardOptions{});
    const std::size_t T = together.dim(1);
    for (std::size_t b = 0; b < utts.size(); ++b) {
        std::vector<Utterance> one{utts[b]};
        auto alone = model_forward(make_batch(one), params, cfg, ForwardOptions{});
        for (std::size_t t = 0; t < utts[b].frames; ++t)
            for (std::size_t k = 0; k < 8; ++k)
                EXPECT_NEAR(alone[t * 8 + k], together[(b * T + t) * 8 + k], 1e-5);
    }
}

TEST(Model, TrainingModeUsesDropout) {
    const auto cfg = AcousticModelConfig::micro();
    const auto params = init_model_params<float>(cfg, 4);
    const auto batch = make_batch(corpus(2));
    Rng rng(1);
    ForwardOptions train;
    train.train = true;
    train.rng = &rng;
    auto a = model_forward(batch, params, cfg, train);
    auto b = model_forward(batch, params, cfg, ForwardOptions{});
    bool differs = false;
    for (std::size_t i = 0; i < a.numel(); ++i) differs = differs || a[i] != b[i];
    EXPECT_TRUE(differs);
}

TEST(Model, InputChecks) {
    const auto cfg = AcousticModelConfig::micro();
    const auto params = init_model_params<float>(cfg, 1);
    SynthConfig c;
    c.feature_dim = 10;
    c.utterances = 1;
    const auto wrong = synth_corpus(c).utterances;
    EXPECT_THROW(model_forward(make_batch(wrong), params, cfg, ForwardOptions{}), ShapeError);

    auto other = cfg;
    other.senones = 9;
    EXPECT_THROW(model_forward(make_batch(corpus(1)), params, other, ForwardOptions{}), StructureError);
    EXPECT_THROW(validate_params(params, other), StructureError);
    EXPECT_NO_THROW(validate_params(params, cfg));

    auto bad = cfg;
    bad.heads = 3;
    EXPECT_THROW(init_model_params<float>(bad, 1), ConfigError);
    bad = cfg;
    bad.dropout = 1.0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Model, ParameterCounts) {
    EXPECT_EQ(count_params(init_model_params<float>(AcousticModelConfig::micro(), 1)), 211884u);
    auto cfg = AcousticModelConfig::micro();
    auto none = cfg;
    none.blocks = 0;
    const std::size_t d = cfg.d_attn, k = cfg.conv_kernel;
    const std::size_t ffn = 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
    const std::size_t mhsa = 2 * d + 4 * d * d;
    const std::size_t conv = 2 * d + (d * 2 * d + 2 * d) + d * k + 2 * d + (d * d + d);
    const std::size_t block = 2 * ffn + mhsa + conv + 2 * d;
    EXPECT_EQ(count_params(init_model_params<float>(cfg, 1)) - count_params(init_model_params<float>(none, 1)),
              2 * block);
    // N = 0 still runs
    EXPECT_NO_THROW(model_forward(make_batch(corpus(1)), init_model_params<float>(none, 1), none, ForwardOptions{}));
}

TEST(Model, InitIsSeededAndCastRoundTrips) {
    const auto cfg = AcousticModelConfig::micro();
    auto a = init_model_params<float>(cfg, 5), b = init_model_params<float>(cfg, 5), c = init_model_params<float>(cfg, 6);
    EXPECT_TRUE(same_bits(a, b));
    EXPECT_FALSE(same_bits(a, c));
    auto back = a.cast<double>(cfg).cast<float>(cfg);
    EXPECT_TRUE(same_bits(a, back));
    auto copy = a.clone();
    copy.named()[0].second.data_mut()[0] += 1.0f;
    EXPECT_TRUE(same_bits(a, b));
}

TEST(Checkpoint, RoundTripIsBitExact) {
    Checkpoint ck;
    ck.config = AcousticModelConfig::micro();
    ck.step = 17;
    ck.params = init_model_params<float>(ck.config, 7);
    ck.extras.emplace_back("lin.spk1", Tensorf::from({2, 2}, {1.0f, 0.5f, -0.25f, 1.0f}));
    ck.meta = {{"phase", "train"}, {"best", 0.125}};
    const auto path = temp_file("rt.ckpt");
    save_checkpoint(path, ck);
    auto back = load_checkpoint(path, ck.config);
    EXPECT_TRUE(same_bits(ck.params, back.params));
    EXPECT_EQ(back.step, 17u);
    EXPECT_EQ(back.meta, ck.meta);
    ASSERT_NE(back.extra("lin.spk1"), nullptr);
    EXPECT_EQ(back.extra("lin.spk1")->data()[1], 0.5f);
    EXPECT_EQ(back.extra("missing"), nullptr);
    EXPECT_FALSE(fs::exists(path.string() + ".tmp"));

    // identical evaluation after reload
    const auto utts = corpus(4);
    const auto e1 = evaluate(ck.params, ck.config, utts), e2 = evaluate(back.params, back.config, utts);
    EXPECT_EQ(e1.loss, e2.loss);
    EXPECT_EQ(e1.frame_accuracy, e2.frame_accuracy);
}

TEST(Checkpoint, StructureMismatches) {
    Checkpoint ck;
    ck.config = AcousticModelConfig::micro();
    ck.params = init_model_params<float>(ck.config, 1);
    const auto path = temp_file("s.ckpt");
    save_checkpoint(path, ck);
    auto other = ck.config;
    other.senones = 9;
    EXPECT_THROW(load_checkpoint(path, other), StructureError);

    // tensors written for 8 senones under a header claiming 9
    Checkpoint lie = ck;
    lie.config = other;
    const auto lie_path = temp_file("lie.ckpt");
    try {
        save_checkpoint(lie_path, lie);
        EXPECT_THROW(load_checkpoint(lie_path), StructureError);
    } catch (const StructureError&) {
        SUCCEED();
    }
}

TEST(Checkpoint, DamagedFiles) {
    Checkpoint ck;
    ck.config = AcousticModelConfig::micro();
    ck.params = init_model_params<float>(ck.config, 1);
    const auto good = temp_file("g.ckpt");
    save_checkpoint(good, ck);
    const auto bytes = bytes_of(good);
    const auto bad = temp_file("b.ckpt");

    put(bad, bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(load_checkpoint(bad), TruncatedFileError);
    auto v = bytes;
    v[4] = 2;
    put(bad, v);
    EXPECT_THROW(load_checkpoint(bad), VersionMismatchError);
    auto m = bytes;
    m[1] = 'Z';
    put(bad, m);
    EXPECT_THROW(load_checkpoint(bad), BadMagicError);
    put(bad, bytes + "xx");
    EXPECT_THROW(load_checkpoint(bad), PayloadError);
    auto j = bytes;
    j[12] = '!';  // first byte of the JSON header
    put(bad, j);
    EXPECT_THROW(load_checkpoint(bad), PayloadError);
    EXPECT_THROW(load_checkpoint(temp_file("none.ckpt")), IoError);
}
