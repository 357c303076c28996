#include "ucam/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "ucam/checkpoint.hpp"
#include "ucam/error.hpp"
#include "ucam/ops.hpp"

namespace ucam {

void LRSchedule::validate() const {
    if (d_attn == 0) throw ConfigError("lr schedule: d_attn must be positive");
    if (warmup_steps < 1) throw ConfigError("lr schedule: warmup_steps must be >= 1");
    if (!(factor > 0.0)) throw ConfigError("lr schedule: factor must be > 0");
}

double lr_at(std::size_t step, const LRSchedule& s) {
    s.validate();
    if (step == 0) throw ContractError("lr_at: steps count from 1");
    const double st = static_cast<double>(step);
    const double w = static_cast<double>(s.warmup_steps);
    return s.factor / std::sqrt(static_cast<double>(s.d_attn)) * std::min(1.0 / std::sqrt(st), st * std::pow(w, -1.5));
}

template <typename T>
AdamState<T> AdamState<T>::init(const NamedTensors<T>& params, double beta1, double beta2, double eps) {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
        throw ConfigError("adam: need 0 <= beta < 1 and eps > 0");
    }
    AdamState st;
    st.beta1 = beta1;
    st.beta2 = beta2;
    st.eps = eps;
    for (const auto& [name, t] : params) {
        st.m.emplace_back(t.numel(), T(0));
        st.v.emplace_back(t.numel(), T(0));
    }
    return st;
}

template <typename T>
void adam_step(const NamedTensors<T>& params, AdamState<T>& state, double lr) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ContractError("adam: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                            std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, t] = params[i];
        if (state.m[i].size() != t.numel() || state.v[i].size() != t.numel()) {
            throw ShapeError("adam: moment size differs from parameter '" + name + "'");
        }
        if (!t.has_grad()) continue;
        for (T g : t.grad()) {
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
        }
    }
    state.step += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T> t = params[i].second;
        auto p = t.data_mut();
        auto& m = state.m[i];
        auto& v = state.v[i];
        const bool has = t.has_grad();
        std::span<const T> g = has ? t.grad() : std::span<const T>();
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = has ? static_cast<double>(g[j]) : 0.0;
            const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
            const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + state.eps);
            p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
        }
    }
}

template <typename T>
EmaState<T> EmaState<T>::init(const NamedTensors<T>& params, double decay) {
    if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("ema decay must be in (0, 1)");
    EmaState st;
    st.decay = decay;
    for (const auto& [name, t] : params) st.shadow.emplace_back(t.data().begin(), t.data().end());
    return st;
}

template <typename T>
void ema_update(EmaState<T>& ema, const NamedTensors<T>& params) {
    if (ema.shadow.size() != params.size()) throw ContractError("ema: shadow does not match the parameter list");
    const double d = ema.decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].second.data();
        auto& s = ema.shadow[i];
        if (s.size() != p.size()) throw ShapeError("ema: shadow size differs from '" + params[i].first + "'");
        for (std::size_t j = 0; j < p.size(); ++j) {
            s[j] = static_cast<T>(d * static_cast<double>(s[j]) + (1.0 - d) * static_cast<double>(p[j]));
        }
    }
}

template <typename T>
void ema_export(const EmaState<T>& ema, const NamedTensors<T>& params) {
    if (ema.shadow.size() != params.size()) throw ContractError("ema: shadow does not match the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T> t = params[i].second;
        if (ema.shadow[i].size() != t.numel()) throw ShapeError("ema: shadow size differs from '" + params[i].first + "'");
        std::copy(ema.shadow[i].begin(), ema.shadow[i].end(), t.data_mut().begin());
    }
}

template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& log_post, std::span<const std::int32_t> labels,
                               const SequenceMask& mask) {
    if (log_post.rank() != 3 || log_post.dim(0) != mask.batch() || log_post.dim(1) != mask.max_len()) {
        throw ShapeError("cross entropy expects log-posteriors [" + std::to_string(mask.batch()) + "," +
                         std::to_string(mask.max_len()) + ",K], got " + shape_str(log_post.shape()));
    }
    const std::size_t nb = log_post.dim(0), nt = log_post.dim(1), nk = log_post.dim(2);
    if (labels.size() != nb * nt) {
        throw ShapeError("cross entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(nb * nt) +
                         " frames");
    }
    const std::size_t frames = mask.valid_frames();
    auto lp = log_post.data();
    double total = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t t = 0; t < mask.length(b); ++t) {
            const auto y = labels[b * nt + t];
            if (y < 0 || static_cast<std::size_t>(y) >= nk) {
                throw DataError("label " + std::to_string(y) + " at (b=" + std::to_string(b) + ", t=" +
                                std::to_string(t) + ") is outside [0, " + std::to_string(nk) + ")");
            }
            total -= static_cast<double>(lp[(b * nt + t) * nk + static_cast<std::size_t>(y)]);
        }
    }
    const T value = static_cast<T>(total / static_cast<double>(frames));
    std::vector<std::int32_t> kept(labels.begin(), labels.end());
    return make_op<T>("masked_cross_entropy", {}, {value}, {log_post},
                      [kept = std::move(kept), mask, nt, nk, frames](Node<T>& o) {
                          auto& g = o.inputs[0]->grad_buffer();
                          const T w = o.grad[0] / static_cast<T>(frames);
                          for (std::size_t b = 0; b < mask.batch(); ++b) {
                              for (std::size_t t = 0; t < mask.length(b); ++t) {
                                  g[(b * nt + t) * nk + static_cast<std::size_t>(kept[b * nt + t])] -= w;
                              }
                          }
                      });
}

template <typename T>
std::size_t count_correct(const Tensor<T>& log_post, std::span<const std::int32_t> labels, const SequenceMask& mask) {
    const std::size_t nt = log_post.dim(1), nk = log_post.dim(2);
    auto lp = log_post.data();
    std::size_t correct = 0;
    for (std::size_t b = 0; b < mask.batch(); ++b) {
        for (std::size_t t = 0; t < mask.length(b); ++t) {
            const T* row = &lp[(b * nt + t) * nk];
            const auto best = static_cast<std::int32_t>(std::max_element(row, row + nk) - row);
            if (best == labels[b * nt + t]) ++correct;
        }
    }
    return correct;
}

EvalResult evaluate(const ModelParams<float>& params, const AcousticModelConfig& cfg, std::span<const Utterance> utts,
                    std::size_t batch_size, const Tensor<float>* lin) {
    if (utts.empty()) throw ContractError("evaluate: no utterances");
    NoGradGuard no_grad;
    double loss_sum = 0.0;
    std::size_t correct = 0, frames = 0;
    for (const auto& batch : batch_pad(utts, batch_size)) {
        const auto mask = batch.mask();
        auto out = model_forward(batch, params, cfg, ForwardOptions{}, lin);
        const auto n = mask.valid_frames();
        loss_sum += static_cast<double>(masked_cross_entropy(out, batch.labels, mask).item()) * static_cast<double>(n);
        correct += count_correct(out, batch.labels, mask);
        frames += n;
    }
    return {loss_sum / static_cast<double>(frames), static_cast<double>(correct) / static_cast<double>(frames), frames};
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    schedule(1).validate();
    AdamState<float>::init({}, adam_beta1, adam_beta2, adam_eps);
    if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be >= 0");
    if (!(finetune_lr >= 0.0)) throw ConfigError("train.finetune_lr must be >= 0");
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("train.ema_decay must be in (0, 1)");
    if (!(stop_at_train_accuracy >= 0.0 && stop_at_train_accuracy <= 1.0)) {
        throw ConfigError("train.stop_at_train_accuracy must be in [0, 1]");
    }
}

namespace {

std::string fmt(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

constexpr std::uint64_t kShuffleStream = 6ULL << 32;
constexpr std::uint64_t kDropoutStream = 7ULL << 32;

void clip_gradients(const NamedTensors<float>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (float g : t.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (!(norm > max_norm)) return;
    const auto k = static_cast<float>(max_norm / norm);
    for (const auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (auto& g : t.node().grad) g *= k;
    }
}

NamedTensors<float> prefixed(const std::string& prefix, const NamedTensors<float>& named,
                             const std::vector<std::vector<float>>& values) {
    NamedTensors<float> out;
    for (std::size_t i = 0; i < named.size(); ++i) {
        out.emplace_back(prefix + named[i].first, Tensor<float>::from(named[i].second.shape(), values[i]));
    }
    return out;
}

std::vector<std::vector<float>> restore(const Checkpoint& ckpt, const std::string& prefix,
                                        const NamedTensors<float>& named) {
    std::vector<std::vector<float>> out;
    for (const auto& [name, t] : named) {
        const auto* e = ckpt.extra(prefix + name);
        if (!e) throw StructureError("checkpoint lacks '" + prefix + name + "' needed to resume");
        if (e->shape() != t.shape()) throw StructureError("checkpoint tensor '" + prefix + name + "' has wrong shape");
        out.emplace_back(e->data().begin(), e->data().end());
    }
    return out;
}

std::vector<std::vector<float>> snapshot(const NamedTensors<float>& named) {
    std::vector<std::vector<float>> out;
    for (const auto& [name, t] : named) out.emplace_back(t.data().begin(), t.data().end());
    return out;
}

void load_snapshot(const NamedTensors<float>& named, const std::vector<std::vector<float>>& values) {
    for (std::size_t i = 0; i < named.size(); ++i) {
        Tensor<float> t = named[i].second;
        std::copy(values[i].begin(), values[i].end(), t.data_mut().begin());
    }
}

// Mutable state of a run; everything here goes into last.ckpt.
struct RunState {
    std::size_t step = 0;
    bool finetune = false;
    AdamState<float> adam;
    EmaState<float> ema;
    std::optional<std::vector<std::vector<float>>> best;
    double best_dev_loss = std::numeric_limits<double>::infinity();
    std::size_t best_step = 0;
    std::size_t first_step_at_target = 0;
};

Checkpoint make_checkpoint(const ModelParams<float>& params, const AcousticModelConfig& cfg, const RunState& st,
                           bool full) {
    Checkpoint c;
    c.config = cfg;
    c.step = st.step;
    c.params = params;
    c.meta = {{"phase", st.finetune ? "finetune" : "train"},
              {"adam_step", st.adam.step},
              {"best_step", st.best_step},
              {"first_step_at_target", st.first_step_at_target}};
    c.meta["best_dev_loss"] = std::isfinite(st.best_dev_loss) ? Json(st.best_dev_loss) : Json(nullptr);
    if (full) {
        const auto named = params.named();
        for (auto& e : prefixed("adam.m.", named, st.adam.m)) c.extras.push_back(std::move(e));
        for (auto& e : prefixed("adam.v.", named, st.adam.v)) c.extras.push_back(std::move(e));
        if (st.finetune) {
            for (auto& e : prefixed("ema.", named, st.ema.shadow)) c.extras.push_back(std::move(e));
        }
        if (st.best) {
            for (auto& e : prefixed("best.", named, *st.best)) c.extras.push_back(std::move(e));
        }
    }
    return c;
}

class CsvLog {
  public:
    CsvLog(const std::filesystem::path& path, std::size_t keep_up_to, bool resume) : path_(path) {
        std::vector<std::string> kept;
        if (resume) {
            std::ifstream in(path);
            std::string line;
            std::getline(in, line);  // header
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                if (std::stoull(line.substr(0, line.find(','))) <= keep_up_to) kept.push_back(line);
            }
        }
        out_.open(path, std::ios::trunc);
        if (!out_) throw IoError("cannot write " + path.string());
        out_ << kTrainLogHeader << '\n';
        for (const auto& l : kept) out_ << l << '\n';
        out_.flush();
    }
    void write(const LogRecord& r) {
        out_ << r.csv() << '\n';
        out_.flush();
        if (!out_) throw IoError("write failed for " + path_.string());
    }

  private:
    std::filesystem::path path_;
    std::ofstream out_;
};

}  // namespace

std::string LogRecord::csv() const {
    std::string s = std::to_string(step) + "," + fmt(lr) + "," + fmt(train_loss);
    if (dev_loss) s += "," + fmt(*dev_loss) + "," + fmt(dev_frame_acc.value_or(0.0));
    return s;
}

TrainReport fit(ModelParams<float>& params, const AcousticModelConfig& model_cfg, const TrainConfig& cfg,
                std::span<const Utterance> train, std::span<const Utterance> dev, const FitOptions& options) {
    model_cfg.validate();
    cfg.validate();
    if (train.empty()) throw ContractError("fit: training set is empty");
    validate_params(params, model_cfg);
    for (const auto& u : train) u.validate(model_cfg.senones);
    for (const auto& u : dev) u.validate(model_cfg.senones);

    const bool writes = !options.out_dir.empty();
    if (writes) std::filesystem::create_directories(options.out_dir);
    const auto last_path = options.out_dir / "last.ckpt";
    const auto named = params.named();

    RunState st;
    st.adam = AdamState<float>::init(named, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    if (options.resume) {
        if (!writes) throw ContractError("fit: resume needs an out_dir");
        if (!std::filesystem::exists(last_path)) throw IoError("nothing to resume: " + last_path.string() + " is missing");
        const auto ckpt = load_checkpoint(last_path, model_cfg);
        copy_values(ckpt.params, params);
        st.step = ckpt.step;
        st.finetune = ckpt.meta.value("phase", "train") == "finetune";
        st.adam.m = restore(ckpt, "adam.m.", named);
        st.adam.v = restore(ckpt, "adam.v.", named);
        st.adam.step = ckpt.meta.value("adam_step", std::size_t{0});
        if (st.finetune) {
            st.ema.decay = cfg.ema_decay;
            st.ema.shadow = restore(ckpt, "ema.", named);
        }
        if (ckpt.extra("best." + named.front().first)) st.best = restore(ckpt, "best.", named);
        if (ckpt.meta.contains("best_dev_loss") && ckpt.meta["best_dev_loss"].is_number()) {
            st.best_dev_loss = ckpt.meta["best_dev_loss"].get<double>();
        }
        st.best_step = ckpt.meta.value("best_step", std::size_t{0});
        st.first_step_at_target = ckpt.meta.value("first_step_at_target", std::size_t{0});
    }
    std::optional<CsvLog> log;
    if (writes) log.emplace(options.out_dir / "train_log.csv", st.step, options.resume);

    TrainReport report;
    report.start_step = st.step;
    const std::size_t total = cfg.steps + cfg.finetune_steps;
    const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const auto schedule = cfg.schedule(model_cfg.d_attn);
    std::size_t order_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> order;

    auto eval_params = [&]() {
        if (!st.finetune) return params;
        auto copy = params.clone();
        ema_export(st.ema, copy.named());
        return copy;
    };

    bool stop = false;
    for (std::size_t s = st.step + 1; s <= total && !stop; ++s) {
        if (!st.finetune && s > cfg.steps) {
            if (st.best) load_snapshot(named, *st.best);
            st.adam = AdamState<float>::init(named, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
            st.ema = EmaState<float>::init(named, cfg.ema_decay);
            st.finetune = true;
        }
        const std::size_t epoch = (s - 1) / per_epoch;
        if (epoch != order_epoch) {
            order.resize(train.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            Rng(cfg.seed, kShuffleStream + epoch).shuffle(std::span<std::size_t>(order));
            order_epoch = epoch;
        }
        const std::size_t first = ((s - 1) % per_epoch) * cfg.batch_size;
        const std::size_t count = std::min(cfg.batch_size, train.size() - first);
        const auto batch = make_batch(train, std::span<const std::size_t>(order).subspan(first, count));

        Rng dropout_rng(cfg.seed, kDropoutStream + s);
        ForwardOptions opts;
        opts.train = true;
        opts.rng = &dropout_rng;
        const auto mask = batch.mask();
        auto loss = masked_cross_entropy(model_forward(batch, params, model_cfg, opts), batch.labels, mask);
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            params.zero_grad();
            throw DivergenceError("training loss became " + fmt(loss_value) + " at step " + std::to_string(s) +
                                  (writes && std::filesystem::exists(last_path)
                                       ? "; last good checkpoint kept at " + last_path.string()
                                       : std::string()));
        }
        backward(loss);
        if (cfg.clip_norm > 0.0) clip_gradients(named, cfg.clip_norm);
        const double lr = st.finetune ? cfg.finetune_lr : lr_at(s, schedule);
        try {
            adam_step(named, st.adam, lr);
        } catch (const NumericError& e) {
            params.zero_grad();
            throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(s));
        }
        params.zero_grad();
        if (st.finetune) ema_update(st.ema, named);
        st.step = s;

        LogRecord rec{s, lr, loss_value, std::nullopt, std::nullopt};
        const bool eval_now = (cfg.eval_every > 0 && s % cfg.eval_every == 0) || s == total;
        if (eval_now) {
            const auto ep = eval_params();
            EvalRecord ev;
            ev.step = s;
            ev.train_frame_acc = evaluate(ep, model_cfg, train, cfg.batch_size).frame_accuracy;
            if (!dev.empty()) {
                ev.dev = evaluate(ep, model_cfg, dev, cfg.batch_size);
                rec.dev_loss = ev.dev->loss;
                rec.dev_frame_acc = ev.dev->frame_accuracy;
                if (!st.finetune && ev.dev->loss < st.best_dev_loss) {
                    st.best_dev_loss = ev.dev->loss;
                    st.best_step = s;
                    st.best = snapshot(named);
                }
            }
            if (cfg.stop_at_train_accuracy > 0.0 && ev.train_frame_acc >= cfg.stop_at_train_accuracy) {
                if (st.first_step_at_target == 0) st.first_step_at_target = s;
                stop = true;
            }
            report.evals.push_back(ev);
            if (options.on_eval) options.on_eval(ev);
        }
        report.log.push_back(rec);
        if (log) log->write(rec);
        if (options.on_log) options.on_log(rec);
        if (writes && cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) {
            save_checkpoint(last_path, make_checkpoint(params, model_cfg, st, true));
        }
    }

    report.final_step = st.step;
    report.first_step_at_target = st.first_step_at_target;
    report.best_dev_loss = st.best_dev_loss;
    report.best_step = st.best_step;
    report.finetuned = st.finetune;

    if (writes) {
        save_checkpoint(last_path, make_checkpoint(params, model_cfg, st, true));
        if (st.best) {
            auto best = params.clone();
            load_snapshot(best.named(), *st.best);
            auto c = make_checkpoint(best, model_cfg, st, false);
            c.step = st.best_step;
            save_checkpoint(options.out_dir / "best.ckpt", c);
        }
    }
    if (st.finetune) ema_export(st.ema, named);
    if (writes) save_checkpoint(options.out_dir / "model.ckpt", make_checkpoint(params, model_cfg, st, false));
    return report;
}

#define UCAM_INSTANTIATE_TRAINING(T)                                                                        \
    template struct AdamState<T>;                                                                           \
    template void adam_step(const NamedTensors<T>&, AdamState<T>&, double);                                 \
    template struct EmaState<T>;                                                                            \
    template void ema_update(EmaState<T>&, const NamedTensors<T>&);                                         \
    template void ema_export(const EmaState<T>&, const NamedTensors<T>&);                                   \
    template Tensor<T> masked_cross_entropy(const Tensor<T>&, std::span<const std::int32_t>,                \
                                            const SequenceMask&);                                           \
    template std::size_t count_correct(const Tensor<T>&, std::span<const std::int32_t>, const SequenceMask&);

UCAM_INSTANTIATE_TRAINING(float)
UCAM_INSTANTIATE_TRAINING(double)

}  // namespace ucam
