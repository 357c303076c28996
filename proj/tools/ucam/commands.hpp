#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ucam/config.hpp"

namespace ucam::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kConfigError = 2,
    kIoError = 3,
    kNumericError = 4,
};

/// Config file plus "key=value" overrides, applied in order.
struct ConfigSource {
    std::optional<std::filesystem::path> file;
    std::vector<std::string> overrides;

    Json load() const;
};

struct SynthArgs {
    ConfigSource config;
    std::filesystem::path out;
};

struct TrainArgs {
    ConfigSource config;
    std::filesystem::path data;
    std::optional<std::filesystem::path> dev;
    std::filesystem::path out_dir;
    bool resume = false;
    bool quiet = false;
};

struct EvalArgs {
    std::filesystem::path ckpt;
    std::filesystem::path data;
    std::size_t batch_size = 4;
};

struct GradcheckArgs {
    ConfigSource config;
    std::uint64_t seed = 1;
    double tolerance = 1e-4;
    double eps = 1e-5;
    std::size_t max_coords = 16;
    bool inject_swish_sign_flip = false;
};

struct AdaptArgs {
    ConfigSource config;
    std::filesystem::path ckpt;
    std::filesystem::path data;
    std::vector<std::string> speakers;  // empty: every speaker in the file
    std::optional<std::filesystem::path> out;
};

int run_synth(const SynthArgs& args, std::ostream& out);
int run_train(const TrainArgs& args, std::ostream& out);
int run_eval(const EvalArgs& args, std::ostream& out);
int run_gradcheck(const GradcheckArgs& args, std::ostream& out);
int run_adapt(const AdaptArgs& args, std::ostream& out);

}  // namespace ucam::cli
