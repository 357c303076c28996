#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ucam/norm.hpp"

namespace ucam {

/// One utterance: static features stored [F, T] row-major plus a label per
/// frame.
struct Utterance {
    std::string id;
    std::string speaker;
    std::size_t feature_dim = 0;
    std::size_t frames = 0;
    std::vector<float> features;
    std::vector<std::int32_t> labels;

    float at(std::size_t f, std::size_t t) const { return features[f * frames + t]; }
    void validate(std::size_t num_classes) const;
};

struct Corpus {
    std::size_t feature_dim = 0;
    std::size_t num_classes = 0;
    std::vector<Utterance> utterances;

    std::vector<Utterance> by_speaker(const std::string& speaker) const;
};

struct SynthConfig {
    std::uint64_t seed = 1;
    std::size_t speakers = 4;
    std::size_t first_speaker = 0;  // global index of the first speaker; later indices get unseen warps
    std::size_t classes = 8;
    std::size_t utterances = 32;
    std::size_t first_utterance = 0;
    std::size_t feature_dim = 16;
    std::size_t min_frames = 16;
    std::size_t max_frames = 32;
    double separation = 6.0;   // distance between class means, in noise standard deviations
    double noise = 1.0;
    double stay_prob = 0.85;   // Markov probability of keeping the previous label
    double onset_blend = 0.25; // weight of the previous class mean on the first frame of a segment
    double warp_strength = 0.1;
    double speaker_offset = 1.0;

    void validate() const;
};

/// Deterministic synthetic corpus: class-conditional Gaussian frames with
/// Markov label sequences, each speaker applying its own affine warp
/// x -> A_s x + b_s with A_s = I + warp_strength * G / sqrt(F).
Corpus synth_corpus(const SynthConfig& cfg);

/// Class means used by synth_corpus for this seed, [classes][F], before warping.
std::vector<std::vector<double>> synth_class_means(const SynthConfig& cfg);

/// Speaker warp matrix A_s, [F*F] row-major, for a global speaker index.
std::vector<double> synth_speaker_warp(const SynthConfig& cfg, std::size_t speaker_index);

/// statics [F, T] -> [3, F, T] = (static, delta, delta-delta).
std::vector<float> compute_deltas(std::span<const float> statics, std::size_t feature_dim, std::size_t frames);

/// Subtracts the per-feature mean over time, in place.
void mean_normalize(std::span<float> statics, std::size_t feature_dim, std::size_t frames);

/// Zero-padded batch. features[B,3,F,T] holds mean-normalized statics and
/// their deltas; raw_statics[B,F,T] keeps the untouched input so a batch can
/// be unpadded losslessly.
struct Batch {
    std::size_t feature_dim = 0;
    std::size_t max_len = 0;
    std::vector<std::size_t> lengths;
    std::vector<std::string> ids;
    std::vector<std::string> speakers;
    std::vector<float> features;
    std::vector<float> raw_statics;
    std::vector<std::int32_t> labels;

    std::size_t size() const { return lengths.size(); }
    SequenceMask mask() const { return SequenceMask(lengths, max_len); }
    std::size_t valid_frames() const;
};

Batch make_batch(std::span<const Utterance> pool, std::span<const std::size_t> order);
Batch make_batch(std::span<const Utterance> utts);

/// Consecutive batches of batch_size (last one may be smaller).
std::vector<Batch> batch_pad(std::span<const Utterance> utts, std::size_t batch_size = 4);

std::vector<Utterance> unpad(const Batch& batch);

void write_features(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_features(const std::filesystem::path& path);

inline constexpr std::uint32_t kFeatureFormatVersion = 1;

}  // namespace ucam
