#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <unistd.h>

#include "ucam/data.hpp"
#include "ucam/deltas.hpp"
#include "ucam/error.hpp"
#include "ucam/gradcheck.hpp"
#include "ucam/ops.hpp"
#include "ucam/random.hpp"

namespace fs = std::filesystem;
using namespace ucam;

namespace {

fs::path temp_file(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("ucam_test_data_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    return dir / name;
}

Utterance make_utt(std::string id, std::size_t f, std::size_t t, float base) {
    Utterance u;
    u.id = std::move(id);
    u.speaker = "spk";
    u.feature_dim = f;
    u.frames = t;
    for (std::size_t i = 0; i < f * t; ++i) u.features.push_back(base + static_cast<float>(i));
    u.labels.assign(t, 1);
    return u;
}

SynthConfig small_synth() {
    SynthConfig c;
    c.utterances = 12;
    c.feature_dim = 6;
    c.min_frames = 5;
    c.max_frames = 9;
    return c;
}

}  // namespace

TEST(Deltas, ConstantGivesZero) {
    std::vector<float> x(2 * 7, 3.5f);
    auto d = compute_deltas(x, 2, 7);
    for (std::size_t i = 14; i < 42; ++i) EXPECT_EQ(d[i], 0.0f);
    for (std::size_t i = 0; i < 14; ++i) EXPECT_EQ(d[i], 3.5f);
}

TEST(Deltas, RampGivesOneAwayFromEdges) {
    std::vector<float> x(9);
    for (std::size_t t = 0; t < 9; ++t) x[t] = static_cast<float>(t);
    auto d = compute_deltas(x, 1, 9);
    for (std::size_t t = 2; t < 7; ++t) EXPECT_FLOAT_EQ(d[9 + t], 1.0f);
    // edges replicate: t=0 sees x[-1]=x[-2]=0
    EXPECT_FLOAT_EQ(d[9], (1.0f + 2.0f * 2.0f) / 10.0f);
}

TEST(Deltas, SingleFrameGivesZero) {
    auto d = compute_deltas(std::vector<float>{4.0f, -1.0f}, 2, 1);
    EXPECT_EQ(d[2], 0.0f);
    EXPECT_EQ(d[3], 0.0f);
    EXPECT_THROW(compute_deltas(std::vector<float>{}, 2, 0), ShapeError);
}

TEST(Deltas, Linear) {
    Rng rng(1);
    std::vector<float> a(24), b(24), ab(24);
    for (std::size_t i = 0; i < 24; ++i) {
        a[i] = static_cast<float>(rng.normal());
        b[i] = static_cast<float>(rng.normal());
        ab[i] = 2.0f * a[i] - b[i];
    }
    auto da = compute_deltas(a, 3, 8), db = compute_deltas(b, 3, 8), dab = compute_deltas(ab, 3, 8);
    for (std::size_t i = 0; i < dab.size(); ++i) EXPECT_NEAR(dab[i], 2.0f * da[i] - db[i], 1e-5);
}

TEST(Deltas, DifferentiableOpMatchesPipeline) {
    const std::size_t F = 3, T = 6;
    Rng rng(2);
    std::vector<float> statics(F * T);
    for (auto& v : statics) v = static_cast<float>(rng.normal());
    auto want = compute_deltas(statics, F, T);
    // batch of two: the second copy is padded by 2 frames
    std::vector<float> batch(2 * F * (T + 2), 99.0f);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t t = 0; t < T; ++t) batch[(b * F + f) * (T + 2) + t] = statics[f * T + t];
    auto got = stack_deltas(Tensorf::from({2, F, T + 2}, batch), SequenceMask({T, T}, T + 2));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t t = 0; t < T + 2; ++t) {
                    const float g = got[((b * 3 + c) * F + f) * (T + 2) + t];
                    if (t < T) {
                        EXPECT_EQ(g, want[(c * F + f) * T + t]);
                    } else {
                        EXPECT_EQ(g, 0.0f);
                    }
                }
}

TEST(Deltas, GradCheck) {
    Rng rng(3);
    std::vector<double> v(2 * 2 * 5);
    for (auto& x : v) x = rng.normal();
    auto s = Tensord::from({2, 2, 5}, v, true);
    std::vector<double> r(2 * 3 * 2 * 5);
    for (auto& x : r) x = rng.normal();
    auto w = Tensord::from({2, 3, 2, 5}, r);
    SequenceMask m({5, 3}, 5);
    EXPECT_LT(grad_check([&] { return sum(mul(stack_deltas(s, m), w)); }, {s}).max_rel_error, 1e-5);
}

TEST(Synth, Deterministic) {
    auto a = synth_corpus(small_synth()), b = synth_corpus(small_synth());
    ASSERT_EQ(a.utterances.size(), 12u);
    for (std::size_t i = 0; i < a.utterances.size(); ++i) {
        EXPECT_EQ(a.utterances[i].features, b.utterances[i].features);
        EXPECT_EQ(a.utterances[i].labels, b.utterances[i].labels);
        EXPECT_EQ(a.utterances[i].id, b.utterances[i].id);
    }
    auto c = small_synth();
    c.seed = 2;
    EXPECT_NE(synth_corpus(c).utterances[0].features, a.utterances[0].features);
}

TEST(Synth, RespectsShapeAndLabelRanges) {
    auto corpus = synth_corpus(small_synth());
    for (const auto& u : corpus.utterances) {
        EXPECT_GE(u.frames, 5u);
        EXPECT_LE(u.frames, 9u);
        EXPECT_NO_THROW(u.validate(corpus.num_classes));
    }
    EXPECT_EQ(corpus.by_speaker("spk00001").size(), 3u);
}

TEST(Synth, SingleClass) {
    auto c = small_synth();
    c.classes = 1;
    for (const auto& u : synth_corpus(c).utterances)
        for (auto l : u.labels) EXPECT_EQ(l, 0);
}

TEST(Synth, LaterUtterancesDoNotDependOnCount) {
    auto c = small_synth();
    auto full = synth_corpus(c);
    c.utterances = 4;
    c.first_utterance = 8;
    c.first_speaker = 0;
    auto tail = synth_corpus(c);
    // utterance 8 belongs to local speaker 0 in both corpora
    EXPECT_EQ(tail.utterances[0].features, full.utterances[8].features);
}

TEST(Synth, NearestMeanClassifierSeparatesClasses) {
    // unwarped speaker, class means 6 noise units apart
    auto c = small_synth();
    c.feature_dim = 16;
    c.warp_strength = 0.0;
    c.speaker_offset = 0.0;
    c.onset_blend = 0.0;
    c.utterances = 40;
    auto corpus = synth_corpus(c);
    auto means = synth_class_means(c);
    std::size_t right = 0, total = 0;
    for (const auto& u : corpus.utterances)
        for (std::size_t t = 0; t < u.frames; ++t) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < means.size(); ++k) {
                double d = 0;
                for (std::size_t f = 0; f < u.feature_dim; ++f) d += std::pow(u.at(f, t) - means[k][f], 2);
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            right += static_cast<std::int32_t>(best) == u.labels[t];
            ++total;
        }
    EXPECT_GT(static_cast<double>(right) / total, 0.95);
}

TEST(Synth, RejectsBadConfig) {
    auto c = small_synth();
    c.max_frames = 2;
    EXPECT_THROW(synth_corpus(c), ConfigError);
    c = small_synth();
    c.noise = 0.0;
    EXPECT_THROW(synth_corpus(c), ConfigError);
}

TEST(Batching, TwoUtterances) {
    std::vector<Utterance> utts{make_utt("a", 2, 5, 0.0f), make_utt("b", 2, 3, 100.0f)};
    auto batch = make_batch(utts);
    EXPECT_EQ(batch.max_len, 5u);
    EXPECT_EQ(batch.lengths, (std::vector<std::size_t>{5, 3}));
    EXPECT_EQ(batch.valid_frames(), 8u);
    // padding of utterance b is zero in every channel and labels are zero there
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t f = 0; f < 2; ++f)
            for (std::size_t t = 3; t < 5; ++t) EXPECT_EQ(batch.features[((1 * 3 + c) * 2 + f) * 5 + t], 0.0f);
    EXPECT_EQ(batch.labels[5 + 3], 0);
}

TEST(Batching, FourUtterancesAndRoundTrip) {
    std::vector<Utterance> utts{make_utt("a", 3, 10, 0.0f), make_utt("b", 3, 7, 1.0f), make_utt("c", 3, 5, 2.0f),
                                make_utt("d", 3, 3, 3.0f)};
    auto batches = batch_pad(utts, 4);
    ASSERT_EQ(batches.size(), 1u);
    EXPECT_EQ(batches[0].max_len, 10u);
    EXPECT_EQ(batches[0].valid_frames(), 25u);
    auto back = unpad(batches[0]);
    ASSERT_EQ(back.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(back[i].features, utts[i].features);
        EXPECT_EQ(back[i].labels, utts[i].labels);
        EXPECT_EQ(back[i].id, utts[i].id);
    }
    EXPECT_EQ(batch_pad(utts, 3).size(), 2u);
    EXPECT_THROW(batch_pad(utts, 0), ConfigError);
}

TEST(Batching, FeaturesAreMeanNormalizedStatics) {
    std::vector<Utterance> utts{make_utt("a", 2, 4, 1.0f)};
    auto batch = make_batch(utts);
    for (std::size_t f = 0; f < 2; ++f) {
        float s = 0;
        for (std::size_t t = 0; t < 4; ++t) s += batch.features[f * 4 + t];
        EXPECT_NEAR(s, 0.0f, 1e-6);
    }
}

TEST(Batching, RejectsMixedDims) {
    std::vector<Utterance> utts{make_utt("a", 2, 4, 0.0f), make_utt("b", 3, 4, 0.0f)};
    EXPECT_THROW(make_batch(utts), ShapeError);
    EXPECT_THROW(make_batch(std::span<const Utterance>{}), ContractError);
}

TEST(FeatureFile, RoundTrip) {
    auto corpus = synth_corpus(small_synth());
    const auto path = temp_file("rt.ucfd");
    write_features(path, corpus);
    auto back = read_features(path);
    EXPECT_EQ(back.feature_dim, corpus.feature_dim);
    EXPECT_EQ(back.num_classes, corpus.num_classes);
    ASSERT_EQ(back.utterances.size(), corpus.utterances.size());
    for (std::size_t i = 0; i < back.utterances.size(); ++i) {
        EXPECT_EQ(back.utterances[i].features, corpus.utterances[i].features);
        EXPECT_EQ(back.utterances[i].labels, corpus.utterances[i].labels);
        EXPECT_EQ(back.utterances[i].speaker, corpus.utterances[i].speaker);
    }
}

namespace {

std::string bytes_of(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void put(const fs::path& p, const std::string& b) {
    std::ofstream(p, std::ios::binary | std::ios::trunc) << b;
}

}  // namespace

TEST(FeatureFile, DamagedFiles) {
    auto corpus = synth_corpus(small_synth());
    const auto good = temp_file("good.ucfd");
    write_features(good, corpus);
    const auto bytes = bytes_of(good);
    const auto bad = temp_file("bad.ucfd");

    put(bad, bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_features(bad), TruncatedFileError);

    auto magic = bytes;
    magic[0] = 'X';
    put(bad, magic);
    EXPECT_THROW(read_features(bad), BadMagicError);

    auto version = bytes;
    version[4] = 9;
    put(bad, version);
    EXPECT_THROW(read_features(bad), VersionMismatchError);

    // first feature value of the first utterance: header 20 bytes, two strings, frame count
    auto nan = bytes;
    const std::size_t off = 20 + 4 + corpus.utterances[0].id.size() + 4 + corpus.utterances[0].speaker.size() + 4;
    const float q = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(&nan[off], &q, 4);
    put(bad, nan);
    EXPECT_THROW(read_features(bad), PayloadError);

    EXPECT_THROW(read_features(temp_file("missing.ucfd")), IoError);
}

#if defined(UCAM_PYTHON) && defined(UCAM_READER_SCRIPT)
TEST(FeatureFile, IndependentReaderAgrees) {
    auto corpus = synth_corpus(small_synth());
    const auto path = temp_file("py.ucfd");
    write_features(path, corpus);
    const auto out = temp_file("py.txt");
    const std::string cmd =
        std::string(UCAM_PYTHON) + " " + UCAM_READER_SCRIPT + " " + path.string() + " > " + out.string();
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    // one line per utterance: id speaker frames sum_of_features sum_of_labels
    std::ifstream in(out);
    for (const auto& u : corpus.utterances) {
        std::string id, spk;
        std::size_t frames = 0;
        double fsum = 0, lsum = 0;
        ASSERT_TRUE(in >> id >> spk >> frames >> fsum >> lsum);
        EXPECT_EQ(id, u.id);
        EXPECT_EQ(spk, u.speaker);
        EXPECT_EQ(frames, u.frames);
        double want = 0, lwant = 0;
        for (float v : u.features) want += v;
        for (auto l : u.labels) lwant += l;
        EXPECT_NEAR(fsum, want, 1e-6 * (1 + std::fabs(want)));
        EXPECT_EQ(lsum, lwant);
    }
}
#endif
