#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "ucam/data.hpp"
#include "ucam/model.hpp"
#include "ucam/training.hpp"
#include "ucam/adaptation.hpp"

namespace ucam {

using Json = nlohmann::json;

/// Everything one experiment needs. Serialized as a JSON object with the
/// sections "model", "train", "data" and "adapt"; every key is optional and
/// falls back to the struct default, unknown keys are a ConfigError.
struct RunConfig {
    AcousticModelConfig model;
    TrainConfig train;
    SynthConfig data;
    AdaptConfig adapt;

    void validate() const;
};

Json to_json(const WrcnnConfig& c);
Json to_json(const AcousticModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const SynthConfig& c);
Json to_json(const AdaptConfig& c);
Json to_json(const RunConfig& c);

// The from_json family validates types and rejects unknown keys; the path
// argument only prefixes error messages.
WrcnnConfig wrcnn_config_from_json(const Json& j, const std::string& path = "wrcnn");
AcousticModelConfig model_config_from_json(const Json& j, const std::string& path = "model");
TrainConfig train_config_from_json(const Json& j, const std::string& path = "train");
SynthConfig synth_config_from_json(const Json& j, const std::string& path = "data");
AdaptConfig adapt_config_from_json(const Json& j, const std::string& path = "adapt");
RunConfig run_config_from_json(const Json& j);

Json parse_json(std::string_view text, const std::string& what);
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "section.key=value" (nested as deep as needed, e.g.
/// model.wrcnn.kernel=5). The value is parsed as JSON, falling back to a
/// plain string.
void apply_override(Json& j, std::string_view assignment);

void write_json(const std::filesystem::path& path, const Json& j);

}  // namespace ucam
