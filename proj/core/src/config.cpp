#include "ucam/config.hpp"

#include <concepts>
#include <fstream>
#include <set>
#include <sstream>

#include "ucam/error.hpp"

namespace ucam {

namespace {

std::string ln_stats_name(LayerNormStats s) {
    return s == LayerNormStats::per_frame ? "per_frame" : "per_utterance";
}

std::string position_name(PositionPlacement p) {
    return p == PositionPlacement::per_block ? "per_block" : "encoder_input";
}

// Reads the keys of one JSON object, remembering which were consumed so the
// leftovers can be reported.
class ObjectReader {
  public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected a JSON object");
    }

    const Json* find(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    template <std::unsigned_integral U>
    void get(const char* key, U& out) {
        if (auto* v = find(key)) {
            if (!v->is_number_integer() || v->get<long long>() < 0) throw type_error(key, "a non-negative integer");
            out = v->get<U>();
        }
    }
    void get(const char* key, double& out) {
        if (auto* v = find(key)) {
            if (!v->is_number()) throw type_error(key, "a number");
            out = v->get<double>();
        }
    }
    void get(const char* key, bool& out) {
        if (auto* v = find(key)) {
            if (!v->is_boolean()) throw type_error(key, "true or false");
            out = v->get<bool>();
        }
    }
    void get(const char* key, std::array<std::size_t, 3>& out) {
        if (auto* v = find(key)) {
            if (!v->is_array() || v->size() != 3) throw type_error(key, "an array of 3 integers");
            for (std::size_t i = 0; i < 3; ++i) {
                if (!(*v)[i].is_number_integer() || (*v)[i].get<long long>() < 0) {
                    throw type_error(key, "an array of 3 non-negative integers");
                }
                out[i] = (*v)[i].get<std::size_t>();
            }
        }
    }
    void get(const char* key, LayerNormStats& out) {
        if (auto* v = find(key)) {
            const auto s = v->is_string() ? v->get<std::string>() : std::string();
            if (s == "per_frame") out = LayerNormStats::per_frame;
            else if (s == "per_utterance") out = LayerNormStats::per_utterance;
            else throw type_error(key, "\"per_frame\" or \"per_utterance\"");
        }
    }
    void get(const char* key, PositionPlacement& out) {
        if (auto* v = find(key)) {
            const auto s = v->is_string() ? v->get<std::string>() : std::string();
            if (s == "per_block") out = PositionPlacement::per_block;
            else if (s == "encoder_input") out = PositionPlacement::encoder_input;
            else throw type_error(key, "\"per_block\" or \"encoder_input\"");
        }
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + path_ + "." + it.key() + "'");
        }
    }

    const std::string& path() const { return path_; }

  private:
    ConfigError type_error(const char* key, const char* expected) const {
        return ConfigError("config key '" + path_ + "." + key + "' must be " + expected);
    }

    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

void RunConfig::validate() const {
    model.validate();
    train.validate();
    data.validate();
    adapt.validate();
}

Json to_json(const WrcnnConfig& c) {
    return {{"base_channels", c.base_channels}, {"width_factor", c.width_factor},
            {"multipliers", c.multipliers},     {"freq_strides", c.freq_strides},
            {"kernel", c.kernel},               {"out_dim", c.out_dim},
            {"bn_eps", c.bn_eps},               {"preactivation", c.preactivation}};
}

Json to_json(const AcousticModelConfig& c) {
    return {{"feature_dim", c.feature_dim},
            {"delta_channels", c.delta_channels},
            {"d_attn", c.d_attn},
            {"blocks", c.blocks},
            {"conv_kernel", c.conv_kernel},
            {"heads", c.heads},
            {"head_dim", c.head_dim},
            {"senones", c.senones},
            {"dropout", c.dropout},
            {"attention_dropout", c.attention_dropout},
            {"ln_eps", c.ln_eps},
            {"bn_eps", c.bn_eps},
            {"ln_stats", ln_stats_name(c.ln_stats)},
            {"position", position_name(c.position)},
            {"final_layernorm", c.final_layernorm},
            {"wrcnn", to_json(c.wrcnn)}};
}

Json to_json(const TrainConfig& c) {
    return {{"seed", c.seed},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"warmup_steps", c.warmup_steps},
            {"lr_factor", c.lr_factor},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"clip_norm", c.clip_norm},
            {"eval_every", c.eval_every},
            {"checkpoint_every", c.checkpoint_every},
            {"finetune_steps", c.finetune_steps},
            {"finetune_lr", c.finetune_lr},
            {"ema_decay", c.ema_decay},
            {"stop_at_train_accuracy", c.stop_at_train_accuracy}};
}

Json to_json(const SynthConfig& c) {
    return {{"seed", c.seed},
            {"speakers", c.speakers},
            {"first_speaker", c.first_speaker},
            {"classes", c.classes},
            {"utterances", c.utterances},
            {"first_utterance", c.first_utterance},
            {"feature_dim", c.feature_dim},
            {"min_frames", c.min_frames},
            {"max_frames", c.max_frames},
            {"separation", c.separation},
            {"noise", c.noise},
            {"stay_prob", c.stay_prob},
            {"onset_blend", c.onset_blend},
            {"warp_strength", c.warp_strength},
            {"speaker_offset", c.speaker_offset}};
}

Json to_json(const AdaptConfig& c) {
    return {{"iterations", c.iterations}, {"epochs", c.epochs},
            {"lr", c.lr},                 {"batch_size", c.batch_size},
            {"seed", c.seed},             {"heldout_fraction", c.heldout_fraction}};
}

Json to_json(const RunConfig& c) {
    return {{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"data", to_json(c.data)},
            {"adapt", to_json(c.adapt)}};
}

WrcnnConfig wrcnn_config_from_json(const Json& j, const std::string& path) {
    WrcnnConfig c;
    ObjectReader r(j, path);
    r.get("base_channels", c.base_channels);
    r.get("width_factor", c.width_factor);
    r.get("multipliers", c.multipliers);
    r.get("freq_strides", c.freq_strides);
    r.get("kernel", c.kernel);
    r.get("out_dim", c.out_dim);
    r.get("bn_eps", c.bn_eps);
    r.get("preactivation", c.preactivation);
    r.finish();
    return c;
}

AcousticModelConfig model_config_from_json(const Json& j, const std::string& path) {
    AcousticModelConfig c;
    ObjectReader r(j, path);
    r.get("feature_dim", c.feature_dim);
    r.get("delta_channels", c.delta_channels);
    r.get("d_attn", c.d_attn);
    r.get("blocks", c.blocks);
    r.get("conv_kernel", c.conv_kernel);
    r.get("heads", c.heads);
    r.get("head_dim", c.head_dim);
    r.get("senones", c.senones);
    r.get("dropout", c.dropout);
    r.get("attention_dropout", c.attention_dropout);
    r.get("ln_eps", c.ln_eps);
    r.get("bn_eps", c.bn_eps);
    r.get("ln_stats", c.ln_stats);
    r.get("position", c.position);
    r.get("final_layernorm", c.final_layernorm);
    if (auto* w = r.find("wrcnn")) c.wrcnn = wrcnn_config_from_json(*w, path + ".wrcnn");
    r.finish();
    return c;
}

TrainConfig train_config_from_json(const Json& j, const std::string& path) {
    TrainConfig c;
    ObjectReader r(j, path);
    r.get("seed", c.seed);
    r.get("batch_size", c.batch_size);
    r.get("steps", c.steps);
    r.get("warmup_steps", c.warmup_steps);
    r.get("lr_factor", c.lr_factor);
    r.get("adam_beta1", c.adam_beta1);
    r.get("adam_beta2", c.adam_beta2);
    r.get("adam_eps", c.adam_eps);
    r.get("clip_norm", c.clip_norm);
    r.get("eval_every", c.eval_every);
    r.get("checkpoint_every", c.checkpoint_every);
    r.get("finetune_steps", c.finetune_steps);
    r.get("finetune_lr", c.finetune_lr);
    r.get("ema_decay", c.ema_decay);
    r.get("stop_at_train_accuracy", c.stop_at_train_accuracy);
    r.finish();
    return c;
}

SynthConfig synth_config_from_json(const Json& j, const std::string& path) {
    SynthConfig c;
    ObjectReader r(j, path);
    r.get("seed", c.seed);
    r.get("speakers", c.speakers);
    r.get("first_speaker", c.first_speaker);
    r.get("classes", c.classes);
    r.get("utterances", c.utterances);
    r.get("first_utterance", c.first_utterance);
    r.get("feature_dim", c.feature_dim);
    r.get("min_frames", c.min_frames);
    r.get("max_frames", c.max_frames);
    r.get("separation", c.separation);
    r.get("noise", c.noise);
    r.get("stay_prob", c.stay_prob);
    r.get("onset_blend", c.onset_blend);
    r.get("warp_strength", c.warp_strength);
    r.get("speaker_offset", c.speaker_offset);
    r.finish();
    return c;
}

AdaptConfig adapt_config_from_json(const Json& j, const std::string& path) {
    AdaptConfig c;
    ObjectReader r(j, path);
    r.get("iterations", c.iterations);
    r.get("epochs", c.epochs);
    r.get("lr", c.lr);
    r.get("batch_size", c.batch_size);
    r.get("seed", c.seed);
    r.get("heldout_fraction", c.heldout_fraction);
    r.finish();
    return c;
}

RunConfig run_config_from_json(const Json& j) {
    RunConfig c;
    ObjectReader r(j, "config");
    if (auto* v = r.find("model")) c.model = model_config_from_json(*v);
    if (auto* v = r.find("train")) c.train = train_config_from_json(*v);
    if (auto* v = r.find("data")) c.data = synth_config_from_json(*v);
    if (auto* v = r.find("adapt")) c.adapt = adapt_config_from_json(*v);
    r.finish();
    c.validate();
    return c;
}

Json parse_json(std::string_view text, const std::string& what) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ConfigError(what + ": " + e.what());
    }
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return run_config_from_json(parse_json(ss.str(), path.string()));
}

void apply_override(Json& j, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    Json value;
    try {
        value = Json::parse(text);
    } catch (const Json::parse_error&) {
        value = text;
    }
    Json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (!node->is_object()) *node = Json::object();
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

void write_json(const std::filesystem::path& path, const Json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace ucam
