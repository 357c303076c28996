#include "ucam/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ucam/error.hpp"
#include "ucam/training.hpp"

namespace ucam {

namespace {

constexpr std::uint64_t kAdaptShuffleStream = 8ULL << 32;

Tensor<float> identity(std::size_t n) {
    std::vector<float> v(n * n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0f;
    return Tensor<float>::from({n, n}, std::move(v), true);
}

bool is_identity(const Tensor<float>& w) {
    const std::size_t n = w.dim(0);
    auto v = w.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (v[i * n + j] != (i == j ? 1.0f : 0.0f)) return false;
        }
    }
    return true;
}

}  // namespace

LinTransform lin_init(std::size_t feature_dim, std::string speaker) {
    if (feature_dim == 0) throw ConfigError("LIN feature dimension must be >= 1");
    return {std::move(speaker), 0, identity(feature_dim)};
}

void AdaptConfig::validate() const {
    if (batch_size == 0) throw ConfigError("adapt.batch_size must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("adapt.lr must be >= 0");
    if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) {
        throw ConfigError("adapt.heldout_fraction must be in [0, 1)");
    }
}

std::vector<std::vector<std::int32_t>> pseudo_label(const ModelParams<float>& params, const AcousticModelConfig& cfg,
                                                    std::span<const Utterance> utts, const Tensor<float>* lin,
                                                    std::size_t batch_size) {
    NoGradGuard no_grad;
    std::vector<std::vector<std::int32_t>> out;
    out.reserve(utts.size());
    for (const auto& batch : batch_pad(utts, batch_size)) {
        auto lp = model_forward(batch, params, cfg, ForwardOptions{}, lin);
        const std::size_t nt = lp.dim(1), nk = lp.dim(2);
        auto v = lp.data();
        for (std::size_t b = 0; b < batch.size(); ++b) {
            std::vector<std::int32_t> labels(batch.lengths[b]);
            for (std::size_t t = 0; t < labels.size(); ++t) {
                const float* row = &v[(b * nt + t) * nk];
                labels[t] = static_cast<std::int32_t>(std::max_element(row, row + nk) - row);
            }
            out.push_back(std::move(labels));
        }
    }
    return out;
}

std::pair<std::vector<Utterance>, std::vector<Utterance>> split_heldout(std::span<const Utterance> utts,
                                                                        double heldout_fraction) {
    const std::size_t n = utts.size();
    std::size_t held = static_cast<std::size_t>(std::llround(static_cast<double>(n) * heldout_fraction));
    if (n >= 2 && heldout_fraction > 0.0) held = std::clamp<std::size_t>(held, 1, n - 1);
    if (n < 2) held = 0;
    return {std::vector<Utterance>(utts.begin(), utts.end() - static_cast<long>(held)),
            std::vector<Utterance>(utts.end() - static_cast<long>(held), utts.end())};
}

AdaptResult adapt_speaker(const ModelParams<float>& params, const AcousticModelConfig& model_cfg,
                          std::span<const Utterance> adapt_utts, std::span<const Utterance> heldout,
                          const AdaptConfig& cfg, const std::string& speaker) {
    cfg.validate();
    if (adapt_utts.empty()) throw ContractError("adapt_speaker: no adaptation utterances for speaker '" + speaker + "'");
    const auto scored = heldout.empty() ? adapt_utts : heldout;

    auto frozen = params.clone();
    frozen.set_requires_grad(false);

    AdaptResult result;
    result.lin = lin_init(model_cfg.feature_dim, speaker);
    result.report.speaker = speaker;
    result.report.initial_heldout_error =
        evaluate(frozen, model_cfg, scored, cfg.batch_size, &result.lin.weight).frame_error();

    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        AdaptIteration rec;
        rec.iteration = it;

        // decode with the LIN of the previous iteration
        const auto labels = pseudo_label(frozen, model_cfg, adapt_utts, &result.lin.weight, cfg.batch_size);
        std::vector<Utterance> relabeled(adapt_utts.begin(), adapt_utts.end());
        std::size_t wrong = 0, frames = 0;
        for (std::size_t u = 0; u < relabeled.size(); ++u) {
            for (std::size_t t = 0; t < labels[u].size(); ++t) wrong += labels[u][t] != relabeled[u].labels[t];
            frames += labels[u].size();
            relabeled[u].labels = labels[u];
        }
        rec.pseudo_label_error = static_cast<double>(wrong) / static_cast<double>(frames);

        Tensor<float> w = identity(model_cfg.feature_dim);
        rec.started_from_identity = is_identity(w);
        const NamedTensors<float> trainable{{"lin", w}};
        auto adam = AdamState<float>::init(trainable);

        std::vector<std::size_t> order(relabeled.size());
        double epoch_loss = 0.0;
        for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            Rng(cfg.seed, kAdaptShuffleStream + it * 65536 + epoch).shuffle(std::span<std::size_t>(order));
            double loss_sum = 0.0;
            std::size_t loss_frames = 0;
            for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
                const std::size_t count = std::min(cfg.batch_size, order.size() - first);
                const auto batch =
                    make_batch(relabeled, std::span<const std::size_t>(order).subspan(first, count));
                const auto mask = batch.mask();
                auto loss = masked_cross_entropy(model_forward(batch, frozen, model_cfg, ForwardOptions{}, &w),
                                                 batch.labels, mask);
                const double lv = loss.item();
                if (!std::isfinite(lv)) throw DivergenceError("LIN adaptation loss became non-finite");
                loss_sum += lv * static_cast<double>(mask.valid_frames());
                loss_frames += mask.valid_frames();
                backward(loss);
                adam_step(trainable, adam, cfg.lr);
                w.zero_grad();
            }
            epoch_loss = loss_sum / static_cast<double>(loss_frames);
        }
        rec.final_train_loss = epoch_loss;
        result.lin.weight = w;
        result.lin.iteration = it;
        rec.heldout_error = evaluate(frozen, model_cfg, scored, cfg.batch_size, &w).frame_error();
        result.report.iterations.push_back(rec);
    }
    return result;
}

}  // namespace ucam
