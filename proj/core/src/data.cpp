#include "ucam/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ucam/binary_io.hpp"
#include "ucam/deltas.hpp"
#include "ucam/error.hpp"
#include "ucam/random.hpp"

namespace ucam {

namespace {

constexpr std::uint64_t kMeansStream = 1ULL << 32;
constexpr std::uint64_t kSpeakerStream = 2ULL << 32;
constexpr std::uint64_t kUtteranceStream = 3ULL << 32;

std::string numbered(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%05zu", prefix, i);
    return buf;
}

}  // namespace

void Utterance::validate(std::size_t num_classes) const {
    if (frames == 0) throw DataError("utterance '" + id + "' has no frames");
    if (features.size() != feature_dim * frames) throw DataError("utterance '" + id + "' feature size mismatch");
    if (labels.size() != frames) throw DataError("utterance '" + id + "' label count differs from frame count");
    for (float v : features) {
        if (!std::isfinite(v)) throw DataError("utterance '" + id + "' has non-finite features");
    }
    for (std::size_t t = 0; t < frames; ++t) {
        if (labels[t] < 0 || static_cast<std::size_t>(labels[t]) >= num_classes) {
            throw DataError("utterance '" + id + "' label " + std::to_string(labels[t]) + " at frame " +
                            std::to_string(t) + " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
}

std::vector<Utterance> Corpus::by_speaker(const std::string& speaker) const {
    std::vector<Utterance> out;
    for (const auto& u : utterances) {
        if (u.speaker == speaker) out.push_back(u);
    }
    return out;
}

void SynthConfig::validate() const {
    if (speakers == 0 || classes == 0 || utterances == 0 || feature_dim == 0 || min_frames == 0) {
        throw ConfigError("synth counts must all be at least 1");
    }
    if (max_frames < min_frames) throw ConfigError("synth max_frames below min_frames");
    if (!(noise > 0.0)) throw ConfigError("synth noise must be positive");
    if (!(stay_prob >= 0.0 && stay_prob <= 1.0)) throw ConfigError("synth stay_prob must be in [0, 1]");
    if (!(onset_blend >= 0.0 && onset_blend < 1.0)) throw ConfigError("synth onset_blend must be in [0, 1)");
}

std::vector<std::vector<double>> synth_class_means(const SynthConfig& cfg) {
    Rng rng(cfg.seed, kMeansStream);
    const std::size_t nf = cfg.feature_dim, nk = cfg.classes;
    std::vector<std::vector<double>> means(nk, std::vector<double>(nf));
    for (auto& m : means)
        for (auto& v : m) v = rng.normal();
    if (nk <= nf) {
        // Orthonormalize, then every pair sits exactly `separation` noise units apart.
        for (std::size_t k = 0; k < nk; ++k) {
            for (std::size_t j = 0; j < k; ++j) {
                double dot = 0;
                for (std::size_t f = 0; f < nf; ++f) dot += means[k][f] * means[j][f];
                for (std::size_t f = 0; f < nf; ++f) means[k][f] -= dot * means[j][f];
            }
            double norm = 0;
            for (double v : means[k]) norm += v * v;
            norm = std::sqrt(norm);
            for (auto& v : means[k]) v /= norm;
        }
        const double r = cfg.separation * cfg.noise / std::sqrt(2.0);
        for (auto& m : means)
            for (auto& v : m) v *= r;
    } else {
        const double r = cfg.separation * cfg.noise / std::sqrt(2.0 * static_cast<double>(nf));
        for (auto& m : means)
            for (auto& v : m) v *= r;
    }
    return means;
}

std::vector<double> synth_speaker_warp(const SynthConfig& cfg, std::size_t speaker_index) {
    Rng rng(cfg.seed, kSpeakerStream + speaker_index);
    const std::size_t nf = cfg.feature_dim;
    const double s = cfg.warp_strength / std::sqrt(static_cast<double>(nf));
    std::vector<double> a(nf * nf);
    for (std::size_t i = 0; i < nf; ++i)
        for (std::size_t j = 0; j < nf; ++j) a[i * nf + j] = (i == j ? 1.0 : 0.0) + s * rng.normal();
    return a;
}

Corpus synth_corpus(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t nf = cfg.feature_dim;
    const auto means = synth_class_means(cfg);

    std::vector<std::vector<double>> warps, offsets;
    for (std::size_t s = 0; s < cfg.speakers; ++s) {
        const std::size_t global = cfg.first_speaker + s;
        warps.push_back(synth_speaker_warp(cfg, global));
        // offset draws come after the warp draws on the same stream
        Rng rng(cfg.seed, kSpeakerStream + global);
        for (std::size_t i = 0; i < nf * nf; ++i) rng.normal();
        std::vector<double> b(nf);
        for (auto& v : b) v = cfg.speaker_offset * rng.normal();
        offsets.push_back(std::move(b));
    }

    Corpus corpus;
    corpus.feature_dim = nf;
    corpus.num_classes = cfg.classes;
    std::vector<double> z(nf);
    for (std::size_t i = 0; i < cfg.utterances; ++i) {
        const std::size_t global = cfg.first_utterance + i;
        Rng rng(cfg.seed, kUtteranceStream + global);
        const std::size_t local_speaker = i % cfg.speakers;
        Utterance u;
        u.id = numbered("utt", global);
        u.speaker = numbered("spk", cfg.first_speaker + local_speaker);
        u.feature_dim = nf;
        u.frames = cfg.min_frames + rng.below(cfg.max_frames - cfg.min_frames + 1);
        u.features.assign(nf * u.frames, 0.0f);
        u.labels.resize(u.frames);
        const auto& a = warps[local_speaker];
        const auto& b = offsets[local_speaker];
        std::size_t label = rng.below(cfg.classes);
        for (std::size_t t = 0; t < u.frames; ++t) {
            std::size_t prev = label;
            if (t > 0 && cfg.classes > 1 && rng.uniform() >= cfg.stay_prob) {
                label = (label + 1 + rng.below(cfg.classes - 1)) % cfg.classes;
            }
            const double w_prev = (t > 0 && prev != label) ? cfg.onset_blend : 0.0;
            for (std::size_t f = 0; f < nf; ++f) {
                z[f] = (1.0 - w_prev) * means[label][f] + w_prev * means[prev][f] + cfg.noise * rng.normal();
            }
            for (std::size_t f = 0; f < nf; ++f) {
                double acc = b[f];
                for (std::size_t j = 0; j < nf; ++j) acc += a[f * nf + j] * z[j];
                u.features[f * u.frames + t] = static_cast<float>(acc);
            }
            u.labels[t] = static_cast<std::int32_t>(label);
        }
        corpus.utterances.push_back(std::move(u));
    }
    return corpus;
}

std::vector<float> compute_deltas(std::span<const float> statics, std::size_t feature_dim, std::size_t frames) {
    if (frames == 0) throw ShapeError("compute_deltas needs at least one frame");
    if (statics.size() != feature_dim * frames) throw ShapeError("compute_deltas: statics size mismatch");
    const std::size_t plane = feature_dim * frames;
    std::vector<float> out(3 * plane);
    std::copy(statics.begin(), statics.end(), out.begin());
    regression_delta(out.data(), feature_dim, frames, frames, out.data() + plane);
    regression_delta(out.data() + plane, feature_dim, frames, frames, out.data() + 2 * plane);
    return out;
}

void mean_normalize(std::span<float> statics, std::size_t feature_dim, std::size_t frames) {
    for (std::size_t f = 0; f < feature_dim; ++f) {
        float* row = statics.data() + f * frames;
        float m = 0;
        for (std::size_t t = 0; t < frames; ++t) m += row[t];
        m /= static_cast<float>(frames);
        for (std::size_t t = 0; t < frames; ++t) row[t] -= m;
    }
}

std::size_t Batch::valid_frames() const { return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0}); }

Batch make_batch(std::span<const Utterance> pool, std::span<const std::size_t> order) {
    if (order.empty()) throw ContractError("make_batch needs at least one utterance");
    Batch batch;
    batch.feature_dim = pool[order[0]].feature_dim;
    for (auto i : order) {
        const auto& u = pool[i];
        if (u.feature_dim != batch.feature_dim) throw ShapeError("utterances in a batch must share feature_dim");
        batch.max_len = std::max(batch.max_len, u.frames);
    }
    const std::size_t nb = order.size(), nf = batch.feature_dim, nt = batch.max_len;
    batch.features.assign(nb * 3 * nf * nt, 0.0f);
    batch.raw_statics.assign(nb * nf * nt, 0.0f);
    batch.labels.assign(nb * nt, 0);
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& u = pool[order[b]];
        batch.lengths.push_back(u.frames);
        batch.ids.push_back(u.id);
        batch.speakers.push_back(u.speaker);
        std::vector<float> normalized = u.features;
        mean_normalize(normalized, nf, u.frames);
        const auto stacked = compute_deltas(normalized, nf, u.frames);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t f = 0; f < nf; ++f)
                std::copy_n(&stacked[(c * nf + f) * u.frames], u.frames, &batch.features[((b * 3 + c) * nf + f) * nt]);
        for (std::size_t f = 0; f < nf; ++f)
            std::copy_n(&u.features[f * u.frames], u.frames, &batch.raw_statics[(b * nf + f) * nt]);
        std::copy(u.labels.begin(), u.labels.end(), batch.labels.begin() + static_cast<long>(b * nt));
    }
    return batch;
}

Batch make_batch(std::span<const Utterance> utts) {
    std::vector<std::size_t> order(utts.size());
    std::iota(order.begin(), order.end(), 0);
    return make_batch(utts, order);
}

std::vector<Batch> batch_pad(std::span<const Utterance> utts, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    std::vector<Batch> out;
    for (std::size_t start = 0; start < utts.size(); start += batch_size) {
        out.push_back(make_batch(utts.subspan(start, std::min(batch_size, utts.size() - start))));
    }
    return out;
}

std::vector<Utterance> unpad(const Batch& batch) {
    std::vector<Utterance> out;
    const std::size_t nf = batch.feature_dim, nt = batch.max_len;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        Utterance u;
        u.id = batch.ids[b];
        u.speaker = batch.speakers[b];
        u.feature_dim = nf;
        u.frames = batch.lengths[b];
        u.features.resize(nf * u.frames);
        for (std::size_t f = 0; f < nf; ++f)
            std::copy_n(&batch.raw_statics[(b * nf + f) * nt], u.frames, &u.features[f * u.frames]);
        u.labels.assign(batch.labels.begin() + static_cast<long>(b * nt),
                        batch.labels.begin() + static_cast<long>(b * nt + u.frames));
        out.push_back(std::move(u));
    }
    return out;
}

void write_features(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    binary::Writer w(os);
    w.bytes("UCFD", 4);
    w.u32(kFeatureFormatVersion);
    w.u32(static_cast<std::uint32_t>(corpus.feature_dim));
    w.u32(static_cast<std::uint32_t>(corpus.num_classes));
    w.u32(static_cast<std::uint32_t>(corpus.utterances.size()));
    for (const auto& u : corpus.utterances) {
        if (u.feature_dim != corpus.feature_dim) throw ShapeError("utterance '" + u.id + "' feature_dim differs from corpus");
        w.str(u.id);
        w.str(u.speaker);
        w.u32(static_cast<std::uint32_t>(u.frames));
        w.f32s(u.features.data(), u.features.size());
        w.u32(static_cast<std::uint32_t>(u.frames));
        for (auto l : u.labels) w.u32(static_cast<std::uint32_t>(l));
    }
    os.flush();
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

Corpus read_features(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    binary::Reader r(is, path.string());
    r.magic("UCFD");
    const auto version = r.u32();
    if (version != kFeatureFormatVersion) {
        throw VersionMismatchError(path.string() + ": feature format version " + std::to_string(version) +
                                   ", expected " + std::to_string(kFeatureFormatVersion));
    }
    Corpus corpus;
    corpus.feature_dim = r.u32();
    corpus.num_classes = r.u32();
    const auto count = r.u32();
    if (corpus.feature_dim == 0) throw PayloadError(path.string() + ": zero feature dimension");
    for (std::uint32_t i = 0; i < count; ++i) {
        Utterance u;
        u.id = r.str();
        u.speaker = r.str();
        u.feature_dim = corpus.feature_dim;
        u.frames = r.u32();
        if (u.frames == 0 || u.frames > (1u << 24)) {
            throw PayloadError(path.string() + ": implausible frame count " + std::to_string(u.frames));
        }
        u.features.resize(u.feature_dim * u.frames);
        r.f32s(u.features.data(), u.features.size());
        for (float v : u.features) {
            if (std::isnan(v) || std::isinf(v)) throw PayloadError(path.string() + ": non-finite feature in '" + u.id + "'");
        }
        const auto nlabels = r.u32();
        if (nlabels != u.frames) throw PayloadError(path.string() + ": label count mismatch in '" + u.id + "'");
        u.labels.resize(nlabels);
        for (auto& l : u.labels) {
            const auto v = r.u32();
            if (v >= corpus.num_classes) throw PayloadError(path.string() + ": label out of range in '" + u.id + "'");
            l = static_cast<std::int32_t>(v);
        }
        corpus.utterances.push_back(std::move(u));
    }
    return corpus;
}

}  // namespace ucam
