#include "commands.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ucam/adaptation.hpp"
#include "ucam/checkpoint.hpp"
#include "ucam/data.hpp"
#include "ucam/error.hpp"
#include "ucam/gradcheck.hpp"
#include "ucam/ops.hpp"
#include "ucam/training.hpp"

namespace ucam::cli {

namespace {

std::string num(double v, int precision = 6) {
    std::ostringstream s;
    s << std::setprecision(precision) << v;
    return s.str();
}

Json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_json(ss.str(), path.string());
}

void check_dims(const Corpus& corpus, const AcousticModelConfig& model, const std::string& what) {
    if (corpus.feature_dim != model.feature_dim) {
        throw ConfigError(what + " has feature_dim " + std::to_string(corpus.feature_dim) + ", model expects " +
                          std::to_string(model.feature_dim));
    }
    if (corpus.num_classes > model.senones) {
        throw ConfigError(what + " has " + std::to_string(corpus.num_classes) + " classes, model outputs only " +
                          std::to_string(model.senones));
    }
}

std::vector<std::string> speakers_in(const Corpus& corpus) {
    std::vector<std::string> out;
    for (const auto& u : corpus.utterances) {
        if (std::find(out.begin(), out.end(), u.speaker) == out.end()) out.push_back(u.speaker);
    }
    return out;
}

std::string eval_line(const std::string& weights, const EvalResult& r) {
    return "weights=" + weights + " frames=" + std::to_string(r.frames) + " loss=" + num(r.loss, 9) +
           " frame_acc=" + num(r.frame_accuracy, 9) + " frame_error=" + num(r.frame_error(), 9);
}

}  // namespace

Json ConfigSource::load() const {
    Json j = file ? read_json_file(*file) : Json::object();
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& o : overrides) apply_override(j, o);
    return j;
}

int run_synth(const SynthArgs& args, std::ostream& out) {
    const auto cfg = run_config_from_json(args.config.load());
    const auto corpus = synth_corpus(cfg.data);
    write_features(args.out, corpus);
    out << "wrote " << corpus.utterances.size() << " utterances (" << cfg.data.speakers << " speakers, "
        << corpus.num_classes << " classes, F=" << corpus.feature_dim << ") to " << args.out.string() << '\n';
    return kOk;
}

int run_train(const TrainArgs& args, std::ostream& out) {
    Json j = args.config.load();
    const auto corpus = read_features(args.data);
    // the model's input and output sizes follow the data unless set explicitly
    Json& model = j["model"];
    if (!model.is_object()) model = Json::object();
    if (!model.contains("feature_dim")) model["feature_dim"] = corpus.feature_dim;
    if (!model.contains("senones")) model["senones"] = corpus.num_classes;
    const auto cfg = run_config_from_json(j);
    check_dims(corpus, cfg.model, args.data.string());

    std::optional<Corpus> dev;
    if (args.dev) {
        dev = read_features(*args.dev);
        check_dims(*dev, cfg.model, args.dev->string());
    }

    std::filesystem::create_directories(args.out_dir);
    write_json(args.out_dir / "effective_config.json", to_json(cfg));

    auto params = init_model_params<float>(cfg.model, cfg.train.seed);
    FitOptions opts;
    opts.out_dir = args.out_dir;
    opts.resume = args.resume;
    if (!args.quiet) {
        opts.on_eval = [&out](const EvalRecord& e) {
            out << "step " << e.step << " train_frame_acc " << num(e.train_frame_acc);
            if (e.dev) out << " dev_loss " << num(e.dev->loss) << " dev_frame_acc " << num(e.dev->frame_accuracy);
            out << '\n';
        };
    }
    std::span<const Utterance> dev_utts;
    if (dev) dev_utts = dev->utterances;
    const auto report = fit(params, cfg.model, cfg.train, corpus.utterances, dev_utts, opts);

    out << "params " << count_params(params) << '\n';
    out << "steps " << report.start_step << ".." << report.final_step << '\n';
    if (report.first_step_at_target > 0) out << "reached target accuracy at step " << report.first_step_at_target << '\n';
    if (!report.evals.empty()) out << "final train_frame_acc " << num(report.evals.back().train_frame_acc) << '\n';
    if (report.finetuned) out << "exported EMA weights after fine-tuning\n";
    out << "model " << (args.out_dir / "model.ckpt").string() << '\n';
    return kOk;
}

int run_eval(const EvalArgs& args, std::ostream& out) {
    const auto ckpt = load_checkpoint(args.ckpt);
    const auto corpus = read_features(args.data);
    check_dims(corpus, ckpt.config, args.data.string());
    out << eval_line("params", evaluate(ckpt.params, ckpt.config, corpus.utterances, args.batch_size)) << '\n';
    const auto named = ckpt.params.named();
    if (ckpt.extra("ema." + named.front().first)) {
        auto ema = ckpt.params.clone();
        for (auto& [name, t] : ema.named()) {
            const auto* shadow = ckpt.extra("ema." + name);
            if (!shadow || shadow->shape() != t.shape()) throw StructureError("incomplete EMA shadow for '" + name + "'");
            std::copy(shadow->data().begin(), shadow->data().end(), t.data_mut().begin());
        }
        out << eval_line("ema", evaluate(ema, ckpt.config, corpus.utterances, args.batch_size)) << '\n';
    }
    return kOk;
}

int run_gradcheck(const GradcheckArgs& args, std::ostream& out) {
    Json j = {{"model", to_json(gradcheck_model_config())}};
    j.merge_patch(args.config.load());
    const auto cfg = run_config_from_json(j);

    GradSuiteOptions opts;
    opts.seed = args.seed;
    opts.model = cfg.model;
    opts.check.eps = args.eps;
    opts.check.max_coords = args.max_coords;
    opts.check.seed = args.seed;
    testing::set_swish_backward_sign_flip(args.inject_swish_sign_flip);
    const auto results = gradcheck_suite(opts);
    testing::set_swish_backward_sign_flip(false);

    bool all = true;
    double worst = 0.0;
    out << std::left << std::setw(26) << "module" << std::setw(16) << "max_rel_error" << std::setw(8) << "coords"
        << "result\n";
    for (const auto& r : results) {
        const bool ok = r.max_rel_error < args.tolerance;
        all = all && ok;
        worst = std::max(worst, r.max_rel_error);
        out << std::left << std::setw(26) << r.name << std::setw(16) << num(r.max_rel_error, 3) << std::setw(8)
            << r.coordinates << (ok ? "PASS" : "FAIL  worst at " + r.worst) << '\n';
    }
    out << "overall " << (all ? "PASS" : "FAIL") << " max_rel_error " << num(worst, 3) << " tolerance "
        << num(args.tolerance, 3) << '\n';
    return all ? kOk : kNumericError;
}

int run_adapt(const AdaptArgs& args, std::ostream& out) {
    const auto ckpt = load_checkpoint(args.ckpt);
    const auto cfg = run_config_from_json(args.config.load());
    const auto corpus = read_features(args.data);
    check_dims(corpus, ckpt.config, args.data.string());

    auto speakers = args.speakers.empty() ? speakers_in(corpus) : args.speakers;
    Checkpoint lin_out;
    lin_out.config = ckpt.config;
    lin_out.step = ckpt.step;
    lin_out.params = ckpt.params;

    out << "speaker,iteration,pseudo_label_error,train_loss,heldout_error\n";
    for (const auto& spk : speakers) {
        const auto utts = corpus.by_speaker(spk);
        if (utts.empty()) throw ConfigError("speaker '" + spk + "' does not occur in " + args.data.string());
        const auto [adapt_set, heldout] = split_heldout(utts, cfg.adapt.heldout_fraction);
        const auto result = adapt_speaker(ckpt.params, ckpt.config, adapt_set, heldout, cfg.adapt, spk);
        out << spk << ",0,,," << num(result.report.initial_heldout_error, 9) << '\n';
        for (const auto& it : result.report.iterations) {
            out << spk << ',' << it.iteration << ',' << num(it.pseudo_label_error, 9) << ','
                << num(it.final_train_loss, 9) << ',' << num(it.heldout_error, 9) << '\n';
        }
        lin_out.extras.emplace_back("lin." + spk, result.lin.weight.detach());
    }
    if (args.out) {
        save_checkpoint(*args.out, lin_out);
        out << "wrote " << speakers.size() << " LIN transform(s) to " << args.out->string() << '\n';
    }
    return kOk;
}

}  // namespace ucam::cli
