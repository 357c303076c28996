#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ucam/data.hpp"
#include "ucam/model.hpp"

namespace ucam {

struct LRSchedule {
    std::size_t d_attn = 256;
    std::size_t warmup_steps = 20000;
    double factor = 5.0;

    void validate() const;
};

/// factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5); step counts from 1.
double lr_at(std::size_t step, const LRSchedule& schedule);

template <typename T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    std::size_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    /// Zero moments shaped like params.
    static AdamState init(const NamedTensors<T>& params, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9);
};

/// One bias-corrected Adam update using the gradients stored on params (a
/// parameter without a gradient counts as a zero gradient). Every gradient is
/// checked before anything is written, so a NumericError leaves params and
/// state untouched.
template <typename T>
void adam_step(const NamedTensors<T>& params, AdamState<T>& state, double lr);

/// Shadow copy of the parameters. Updates are computed in double and
/// rounded to T.
template <typename T>
struct EmaState {
    double decay = 0.999;
    std::vector<std::vector<T>> shadow;

    static EmaState init(const NamedTensors<T>& params, double decay = 0.999);
};

// shadow <- decay * shadow + (1 - decay) * params
template <typename T>
void ema_update(EmaState<T>& ema, const NamedTensors<T>& params);

// Copies the shadow into params.
template <typename T>
void ema_export(const EmaState<T>& ema, const NamedTensors<T>& params);

/// Mean negative log-likelihood over valid frames. Labels at padded frames are
/// never read. log_post [B,T,K], labels [B*T] row-major.
template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& log_post, std::span<const std::int32_t> labels,
                               const SequenceMask& mask);

// Valid frames whose argmax equals the label.
template <typename T>
std::size_t count_correct(const Tensor<T>& log_post, std::span<const std::int32_t> labels, const SequenceMask& mask);

struct EvalResult {
    double loss = 0.0;
    double frame_accuracy = 0.0;
    std::size_t frames = 0;

    double frame_error() const { return 1.0 - frame_accuracy; }
};

/// Eval-mode pass over utts in order, batch_size at a time.
EvalResult evaluate(const ModelParams<float>& params, const AcousticModelConfig& cfg, std::span<const Utterance> utts,
                    std::size_t batch_size = 4, const Tensor<float>* lin = nullptr);

struct TrainConfig {
    std::uint64_t seed = 1;
    std::size_t batch_size = 4;
    std::size_t steps = 2000;
    std::size_t warmup_steps = 20000;
    double lr_factor = 5.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-9;
    double clip_norm = 0.0;            // global gradient-norm clip; 0 disables
    std::size_t eval_every = 100;      // 0: evaluate only after the last step
    std::size_t checkpoint_every = 0;  // 0: checkpoint only at the end of the run
    std::size_t finetune_steps = 0;
    double finetune_lr = 1e-5;
    double ema_decay = 0.999;
    double stop_at_train_accuracy = 0.0;  // > 0: stop at the first evaluation reaching it

    void validate() const;
    LRSchedule schedule(std::size_t d_attn) const { return {d_attn, warmup_steps, lr_factor}; }
};

struct LogRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    std::optional<double> dev_loss;
    std::optional<double> dev_frame_acc;

    std::string csv() const;
};

struct EvalRecord {
    std::size_t step = 0;
    double train_frame_acc = 0.0;
    std::optional<EvalResult> dev;
};

struct TrainReport {
    std::vector<LogRecord> log;
    std::vector<EvalRecord> evals;
    std::size_t start_step = 0;  // nonzero when resumed
    std::size_t final_step = 0;
    std::size_t first_step_at_target = 0;  // 0 when stop_at_train_accuracy was never reached
    double best_dev_loss = std::numeric_limits<double>::infinity();
    std::size_t best_step = 0;
    bool finetuned = false;
};

struct FitOptions {
    std::filesystem::path out_dir;  // empty: nothing written
    bool resume = false;            // continue from out_dir/last.ckpt
    std::function<void(const LogRecord&)> on_log;
    std::function<void(const EvalRecord&)> on_eval;
};

/// Training loop. Step s draws its batch from the shuffle of epoch
/// (s-1)/batches_per_epoch and its dropout masks from stream s, so a run
/// resumed from a checkpoint replays exactly the steps it would have taken.
///
/// Steps 1..steps follow lr_at; steps..steps+finetune_steps restart from the
/// best dev weights with a fresh Adam state, fixed finetune_lr and an EMA
/// shadow, and params end up holding the EMA weights.
///
/// Files in out_dir: train_log.csv, last.ckpt (full training state),
/// best.ckpt (lowest dev loss) and model.ckpt (exported weights).
/// A non-finite loss throws DivergenceError and leaves the checkpoints alone.
TrainReport fit(ModelParams<float>& params, const AcousticModelConfig& model_cfg, const TrainConfig& cfg,
                std::span<const Utterance> train, std::span<const Utterance> dev, const FitOptions& options = {});

inline constexpr const char* kTrainLogHeader = "step,lr,train_loss,dev_loss,dev_frame_acc";

}  // namespace ucam
