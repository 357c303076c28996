#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "ucam/error.hpp"

namespace {

using namespace ucam::cli;

void add_config_options(CLI::App& cmd, ConfigSource& src) {
    cmd.add_option("--config", src.file, "JSON run config")->check(CLI::ExistingFile);
    cmd.add_option("--set", src.overrides, "Override a config key, e.g. --set train.steps=500")
        ->type_name("KEY=VALUE")
        ->allow_extra_args(false);
}

int report(const std::exception& e, int code) {
    std::cerr << "ucam: error: " << e.what() << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conformer acoustic model toolkit: synthetic corpora, training, evaluation, gradient checks and "
                 "LIN speaker adaptation"};
    app.require_subcommand(1);

    SynthArgs synth;
    std::optional<std::uint64_t> synth_seed;
    std::optional<std::size_t> synth_speakers, synth_classes, synth_utts, synth_first;
    std::optional<double> synth_warp;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic feature file");
    add_config_options(*synth_cmd, synth.config);
    synth_cmd->add_option("--out", synth.out, "Output feature file")->required();
    synth_cmd->add_option("--seed", synth_seed, "data.seed");
    synth_cmd->add_option("--speakers", synth_speakers, "data.speakers");
    synth_cmd->add_option("--classes", synth_classes, "data.classes");
    synth_cmd->add_option("--utts", synth_utts, "data.utterances");
    synth_cmd->add_option("--first-speaker", synth_first, "data.first_speaker");
    synth_cmd->add_option("--warp-strength", synth_warp, "data.warp_strength");

    TrainArgs train;
    std::optional<std::uint64_t> train_seed;
    std::optional<std::size_t> train_steps;
    auto* train_cmd = app.add_subcommand("train", "Train an acoustic model");
    add_config_options(*train_cmd, train.config);
    train_cmd->add_option("--data", train.data, "Training feature file")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--dev", train.dev, "Held-out feature file")->check(CLI::ExistingFile);
    train_cmd->add_option("--out-dir", train.out_dir, "Directory for checkpoints and logs")->required();
    train_cmd->add_flag("--resume", train.resume, "Continue from <out-dir>/last.ckpt");
    train_cmd->add_flag("--quiet", train.quiet, "Only print the summary");
    train_cmd->add_option("--seed", train_seed, "train.seed");
    train_cmd->add_option("--steps", train_steps, "train.steps");

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Frame-level evaluation of a checkpoint");
    eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--data", eval.data, "Feature file")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--batch-size", eval.batch_size, "Utterances per batch")->check(CLI::PositiveNumber);

    GradcheckArgs grad;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every module in double precision");
    add_config_options(*grad_cmd, grad.config);
    grad_cmd->add_option("--seed", grad.seed, "Seed for inputs, weights and sampled coordinates");
    grad_cmd->add_option("--tolerance", grad.tolerance, "Maximum accepted relative error");
    grad_cmd->add_option("--eps", grad.eps, "Central-difference step");
    grad_cmd->add_option("--max-coords", grad.max_coords, "Coordinates sampled per tensor (0 = all)");
    grad_cmd->add_flag("--inject-swish-sign-flip", grad.inject_swish_sign_flip,
                       "Break the swish backward rule to show the check fails");

    AdaptArgs adapt;
    std::optional<std::size_t> adapt_iterations, adapt_epochs;
    std::optional<double> adapt_lr;
    std::optional<std::uint64_t> adapt_seed;
    auto* adapt_cmd = app.add_subcommand("adapt", "Iterative LIN speaker adaptation");
    add_config_options(*adapt_cmd, adapt.config);
    adapt_cmd->add_option("--ckpt", adapt.ckpt, "Trained model checkpoint")->required()->check(CLI::ExistingFile);
    adapt_cmd->add_option("--data", adapt.data, "Feature file with the speakers to adapt")
        ->required()
        ->check(CLI::ExistingFile);
    adapt_cmd->add_option("--speaker", adapt.speakers, "Speaker id (repeatable; default all)");
    adapt_cmd->add_option("--iterations", adapt_iterations, "adapt.iterations");
    adapt_cmd->add_option("--epochs", adapt_epochs, "adapt.epochs");
    adapt_cmd->add_option("--lr", adapt_lr, "adapt.lr");
    adapt_cmd->add_option("--seed", adapt_seed, "adapt.seed");
    adapt_cmd->add_option("--out", adapt.out, "Write the LIN transforms (lin.<speaker>) to this checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }

    // dedicated flags become overrides that win over --config and --set
    auto set = [](ConfigSource& src, const std::string& key, const auto& value) {
        if (value) src.overrides.push_back(key + "=" + ucam::Json(*value).dump());
    };

    try {
        if (*synth_cmd) {
            set(synth.config, "data.seed", synth_seed);
            set(synth.config, "data.speakers", synth_speakers);
            set(synth.config, "data.classes", synth_classes);
            set(synth.config, "data.utterances", synth_utts);
            set(synth.config, "data.first_speaker", synth_first);
            set(synth.config, "data.warp_strength", synth_warp);
            return run_synth(synth, std::cout);
        }
        if (*train_cmd) {
            set(train.config, "train.seed", train_seed);
            set(train.config, "train.steps", train_steps);
            return run_train(train, std::cout);
        }
        if (*eval_cmd) return run_eval(eval, std::cout);
        if (*grad_cmd) return run_gradcheck(grad, std::cout);
        if (*adapt_cmd) {
            set(adapt.config, "adapt.iterations", adapt_iterations);
            set(adapt.config, "adapt.epochs", adapt_epochs);
            set(adapt.config, "adapt.lr", adapt_lr);
            set(adapt.config, "adapt.seed", adapt_seed);
            return run_adapt(adapt, std::cout);
        }
    } catch (const ucam::ConfigError& e) {
        return report(e, kConfigError);
    } catch (const ucam::StructureError& e) {
        return report(e, kConfigError);
    } catch (const ucam::ContractError& e) {
        return report(e, kConfigError);
    } catch (const ucam::ShapeError& e) {
        return report(e, kConfigError);
    } catch (const ucam::IoError& e) {
        return report(e, kIoError);
    } catch (const ucam::DataError& e) {
        return report(e, kIoError);
    } catch (const ucam::NumericError& e) {
        return report(e, kNumericError);
    } catch (const std::filesystem::filesystem_error& e) {
        return report(e, kIoError);
    } catch (const std::exception& e) {
        return report(e, kFailure);
    }
    return kFailure;
}
