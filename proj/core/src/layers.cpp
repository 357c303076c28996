#include "ucam/layers.hpp"

#include <cmath>

#include "ucam/error.hpp"
#include "ucam/ops.hpp"

namespace ucam {

template <typename T>
Tensor<T> train_dropout(const Tensor<T>& x, double p, const ForwardOptions& opts) {
    if (!opts.train || p <= 0.0) return x;
    if (!opts.rng) throw ContractError("training-mode dropout needs an rng");
    return dropout(x, p, *opts.rng);
}

template <typename T>
Tensor<T> LinearParams<T>::operator()(const Tensor<T>& x) const {
    return linear(x, weight, bias);
}

template <typename T>
void LinearParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
LinearParams<T> init_linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    LinearParams<T> p;
    p.weight = glorot_uniform<T>({out, in}, in, out, rng);
    if (with_bias) p.bias = Tensor<T>::zeros({out}, true);
    return p;
}

template <typename T>
void collect_norm(const std::string& prefix, const NormParams<T>& p, NamedTensors<T>& out) {
    out.emplace_back(prefix + ".gamma", p.gamma);
    out.emplace_back(prefix + ".beta", p.beta);
}

#define UCAM_INSTANTIATE_LAYERS(T)                                                                  \
    template Tensor<T> train_dropout(const Tensor<T>&, double, const ForwardOptions&);              \
    template struct LinearParams<T>;                                                                \
    template LinearParams<T> init_linear<T>(std::size_t, std::size_t, bool, Rng&);                  \
    template Tensor<T> glorot_uniform<T>(Shape, std::size_t, std::size_t, Rng&);                    \
    template void collect_norm(const std::string&, const NormParams<T>&, NamedTensors<T>&);

UCAM_INSTANTIATE_LAYERS(float)
UCAM_INSTANTIATE_LAYERS(double)

}  // namespace ucam
