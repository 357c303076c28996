#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ucam/data.hpp"
#include "ucam/model.hpp"

namespace ucam {

/// Linear input network: a square matrix applied to every mean-normalized
/// static frame before the deltas are computed.
struct LinTransform {
    std::string speaker;
    std::size_t iteration = 0;
    Tensor<float> weight;  // [F, F]
};

LinTransform lin_init(std::size_t feature_dim, std::string speaker = {});

struct AdaptConfig {
    std::size_t iterations = 3;
    std::size_t epochs = 10;
    double lr = 1e-4;
    std::size_t batch_size = 4;
    std::uint64_t seed = 1;
    double heldout_fraction = 0.5;  // trailing share of a speaker's utterances scored, never trained on

    void validate() const;
};

/// Argmax label of every valid frame, one vector per utterance.
std::vector<std::vector<std::int32_t>> pseudo_label(const ModelParams<float>& params, const AcousticModelConfig& cfg,
                                                    std::span<const Utterance> utts, const Tensor<float>* lin = nullptr,
                                                    std::size_t batch_size = 4);

struct AdaptIteration {
    std::size_t iteration = 0;     // 1-based
    bool started_from_identity = false;
    double pseudo_label_error = 0.0;  // pseudo-labels vs. true labels on the adaptation split
    double final_train_loss = 0.0;
    double heldout_error = 0.0;
};

struct AdaptReport {
    std::string speaker;
    double initial_heldout_error = 0.0;  // identity LIN
    std::vector<AdaptIteration> iterations;

    double final_heldout_error() const {
        return iterations.empty() ? initial_heldout_error : iterations.back().heldout_error;
    }
};

struct AdaptResult {
    LinTransform lin;
    AdaptReport report;
};

/// Iterative LIN adaptation. Each iteration decodes pseudo-labels for
/// adapt_utts with the current LIN, resets the LIN to the identity and trains
/// it alone for cfg.epochs epochs of Adam against those labels. The model
/// is evaluated without dropout and never modified.
AdaptResult adapt_speaker(const ModelParams<float>& params, const AcousticModelConfig& model_cfg,
                          std::span<const Utterance> adapt_utts, std::span<const Utterance> heldout,
                          const AdaptConfig& cfg, const std::string& speaker = {});

/// Splits one speaker's utterances into (adaptation, held-out) by
/// cfg.heldout_fraction; both parts are non-empty when there are at least two.
std::pair<std::vector<Utterance>, std::vector<Utterance>> split_heldout(std::span<const Utterance> utts,
                                                                        double heldout_fraction);

}  // namespace ucam
