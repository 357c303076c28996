#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ucam/model.hpp"
#include "ucam/tensor.hpp"

namespace ucam {

struct GradCheckOptions {
    double eps = 1e-5;
    std::size_t max_coords = 0;  // per tensor; 0 checks every coordinate
    std::uint64_t seed = 1;      // picks the sampled coordinates
};

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst;  // "tensor[index]" of the largest error
};

/// Compares the reverse-mode gradient of f with central differences at
/// sampled coordinates of every tensor in params. Error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12). f must be
/// deterministic; a non-finite value anywhere throws NumericError naming the
/// operation.
GradCheckResult grad_check(const std::function<Tensor<double>()>& f, const std::vector<Tensor<double>>& params,
                           const GradCheckOptions& options = {}, const std::vector<std::string>& names = {});

// F=8, d_attn=8, H=2, N=1, 5 senones.
AcousticModelConfig gradcheck_model_config();

struct GradSuiteOptions {
    std::uint64_t seed = 1;
    GradCheckOptions check;
    AcousticModelConfig model = gradcheck_model_config();
};

/// One result per module: tensor-core ops, layernorm, batchnorm, masked
/// softmax, FFN, MHSA, conv module, conformer block, WRCNN block, full model
/// and LIN. Everything runs in double with dropout off on padded batches.
std::vector<GradCheckResult> gradcheck_suite(const GradSuiteOptions& options);

}  // namespace ucam
