#include "ucam/norm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "ucam/error.hpp"

namespace ucam {

namespace {

constexpr double kMaskedScore = -1e9;

void check_eps(double eps) {
    if (!(eps > 0.0)) throw ConfigError("normalization eps must be positive, got " + std::to_string(eps));
}

template <typename T>
void check_batch_time(const char* op, const Tensor<T>& x, const SequenceMask& mask, std::size_t time_axis) {
    if (x.rank() <= time_axis || time_axis == 0 || x.dim(0) != mask.batch() || x.dim(time_axis) != mask.max_len()) {
        throw ShapeError(std::string(op) + ": tensor " + shape_str(x.shape()) + " does not match mask with batch " +
                         std::to_string(mask.batch()) + " and max_len " + std::to_string(mask.max_len()));
    }
}

template <typename T>
void check_norm_params(const char* op, const NormParams<T>& p, std::size_t dim) {
    check_eps(p.eps);
    if (p.gamma.numel() != dim || p.beta.numel() != dim) {
        throw ShapeError(std::string(op) + ": gamma/beta of length " + std::to_string(p.gamma.numel()) + "/" +
                         std::to_string(p.beta.numel()) + " for normalized dimension " + std::to_string(dim));
    }
}

}  // namespace

SequenceMask::SequenceMask(std::vector<std::size_t> lengths, std::size_t max_len)
    : lengths_(std::move(lengths)), max_len_(max_len) {
    for (std::size_t b = 0; b < lengths_.size(); ++b) {
        if (lengths_[b] < 1 || lengths_[b] > max_len_) {
            throw ShapeError("sequence length " + std::to_string(lengths_[b]) + " of utterance " + std::to_string(b) +
                             " outside [1, " + std::to_string(max_len_) + "]");
        }
    }
}

SequenceMask SequenceMask::from_lengths(std::vector<std::size_t> lengths) {
    std::size_t mx = lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());
    return SequenceMask(std::move(lengths), mx);
}

std::size_t SequenceMask::valid_frames() const {
    std::size_t n = 0;
    for (auto l : lengths_) n += l;
    return n;
}

template <typename T>
NormParams<T> NormParams<T>::identity(std::size_t dim, double eps) {
    return NormParams{Tensor<T>::full({dim}, T(1), true), Tensor<T>::zeros({dim}, true), eps};
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& x, const SequenceMask& mask, std::size_t time_axis) {
    check_batch_time("apply_mask", x, mask, time_axis);
    const auto& s = x.shape();
    std::size_t mid = 1, inner = 1;
    for (std::size_t i = 1; i < time_axis; ++i) mid *= s[i];
    for (std::size_t i = time_axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t nt = mask.max_len();
    std::vector<std::uint8_t> keep(x.numel());
    for (std::size_t b = 0; b < mask.batch(); ++b)
        for (std::size_t m = 0; m < mid; ++m)
            for (std::size_t t = 0; t < nt; ++t) {
                auto first = keep.begin() + static_cast<long>(((b * mid + m) * nt + t) * inner);
                std::fill(first, first + static_cast<long>(inner), mask.valid(b, t) ? 1 : 0);
            }
    std::vector<T> out(x.numel());
    auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? in[i] : T(0);
    return make_op<T>("apply_mask", s, std::move(out), {x}, [keep = std::move(keep)](Node<T>& o) {
        auto& g = o.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (keep[i]) g[i] += o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> utterance_layernorm(const Tensor<T>& x, const SequenceMask& mask, const NormParams<T>& p,
                              LayerNormStats stats) {
    check_batch_time("utterance_layernorm", x, mask, 1);
    if (x.rank() != 3) throw ShapeError("utterance_layernorm expects [B,T,D], got " + shape_str(x.shape()));
    const std::size_t nb = x.dim(0), nt = x.dim(1), d = x.dim(2);
    check_norm_params("utterance_layernorm", p, d);

    // Each normalization group is a run of frames [t0, t1) of one utterance.
    struct Group {
        std::size_t b, t0, t1;
        T mean, inv_std;
    };
    std::vector<Group> groups;
    for (std::size_t b = 0; b < nb; ++b) {
        const std::size_t len = mask.length(b);
        if (stats == LayerNormStats::per_frame) {
            for (std::size_t t = 0; t < len; ++t) groups.push_back({b, t, t + 1, 0, 0});
        } else {
            groups.push_back({b, 0, len, 0, 0});
        }
    }
    auto in = x.data();
    auto gamma = p.gamma.data();
    auto beta = p.beta.data();
    std::vector<T> xhat(x.numel(), T(0));
    std::vector<T> out(x.numel(), T(0));
    for (auto& g : groups) {
        const std::size_t begin = (g.b * nt + g.t0) * d, end = (g.b * nt + g.t1) * d;
        const T n = static_cast<T>(end - begin);
        T m = 0;
        for (std::size_t i = begin; i < end; ++i) m += in[i];
        m /= n;
        T var = 0;
        for (std::size_t i = begin; i < end; ++i) var += (in[i] - m) * (in[i] - m);
        var /= n;
        g.mean = m;
        g.inv_std = T(1) / std::sqrt(var + static_cast<T>(p.eps));
        for (std::size_t i = begin; i < end; ++i) {
            xhat[i] = (in[i] - m) * g.inv_std;
            out[i] = xhat[i] * gamma[i % d] + beta[i % d];
        }
    }
    return make_op<T>(
        "utterance_layernorm", x.shape(), std::move(out), {x, p.gamma, p.beta},
        [groups = std::move(groups), xhat = std::move(xhat), nt, d](Node<T>& o) {
            auto& X = *o.inputs[0];
            auto& G = *o.inputs[1];
            auto& Bt = *o.inputs[2];
            T* gx = X.requires_grad ? X.grad_buffer().data() : nullptr;
            T* gg = G.requires_grad ? G.grad_buffer().data() : nullptr;
            T* gb = Bt.requires_grad ? Bt.grad_buffer().data() : nullptr;
            for (const auto& g : groups) {
                const std::size_t begin = (g.b * nt + g.t0) * d, end = (g.b * nt + g.t1) * d;
                const T n = static_cast<T>(end - begin);
                T mean_dxhat = 0, mean_dxhat_xhat = 0;
                for (std::size_t i = begin; i < end; ++i) {
                    const T dy = o.grad[i];
                    if (gg) gg[i % d] += dy * xhat[i];
                    if (gb) gb[i % d] += dy;
                    const T dxh = dy * G.value[i % d];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat[i];
                }
                if (!gx) continue;
                mean_dxhat /= n;
                mean_dxhat_xhat /= n;
                for (std::size_t i = begin; i < end; ++i) {
                    const T dxh = o.grad[i] * G.value[i % d];
                    gx[i] += g.inv_std * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                }
            }
        });
}

template <typename T>
Tensor<T> utterance_batchnorm(const Tensor<T>& x, const SequenceMask& mask, const NormParams<T>& p) {
    if (x.rank() != 3 && x.rank() != 4) {
        throw ShapeError("utterance_batchnorm expects [B,C,T] or [B,C,F,T], got " + shape_str(x.shape()));
    }
    check_batch_time("utterance_batchnorm", x, mask, x.rank() - 1);
    const std::size_t nb = x.dim(0), nc = x.dim(1), nt = x.shape().back();
    const std::size_t nf = x.rank() == 4 ? x.dim(2) : 1;
    check_norm_params("utterance_batchnorm", p, nc);

    auto in = x.data();
    auto gamma = p.gamma.data();
    auto beta = p.beta.data();
    std::vector<T> xhat(x.numel(), T(0));
    std::vector<T> out(x.numel(), T(0));
    std::vector<T> inv_std(nb * nc);
    for (std::size_t b = 0; b < nb; ++b) {
        const std::size_t len = mask.length(b);
        const T n = static_cast<T>(len * nf);
        for (std::size_t c = 0; c < nc; ++c) {
            const std::size_t base = (b * nc + c) * nf * nt;
            T m = 0;
            for (std::size_t f = 0; f < nf; ++f)
                for (std::size_t t = 0; t < len; ++t) m += in[base + f * nt + t];
            m /= n;
            T var = 0;
            for (std::size_t f = 0; f < nf; ++f)
                for (std::size_t t = 0; t < len; ++t) {
                    const T dv = in[base + f * nt + t] - m;
                    var += dv * dv;
                }
            var /= n;
            const T is = T(1) / std::sqrt(var + static_cast<T>(p.eps));
            inv_std[b * nc + c] = is;
            for (std::size_t f = 0; f < nf; ++f)
                for (std::size_t t = 0; t < len; ++t) {
                    const std::size_t i = base + f * nt + t;
                    xhat[i] = (in[i] - m) * is;
                    out[i] = xhat[i] * gamma[c] + beta[c];
                }
        }
    }
    std::vector<std::size_t> lengths = mask.lengths();
    return make_op<T>(
        "utterance_batchnorm", x.shape(), std::move(out), {x, p.gamma, p.beta},
        [xhat = std::move(xhat), inv_std = std::move(inv_std), lengths = std::move(lengths), nb, nc, nf,
         nt](Node<T>& o) {
            auto& X = *o.inputs[0];
            auto& G = *o.inputs[1];
            auto& Bt = *o.inputs[2];
            T* gx = X.requires_grad ? X.grad_buffer().data() : nullptr;
            T* gg = G.requires_grad ? G.grad_buffer().data() : nullptr;
            T* gb = Bt.requires_grad ? Bt.grad_buffer().data() : nullptr;
            for (std::size_t b = 0; b < nb; ++b) {
                const std::size_t len = lengths[b];
                const T n = static_cast<T>(len * nf);
                for (std::size_t c = 0; c < nc; ++c) {
                    const std::size_t base = (b * nc + c) * nf * nt;
                    const T gam = G.value[c];
                    T mean_dxhat = 0, mean_dxhat_xhat = 0;
                    for (std::size_t f = 0; f < nf; ++f)
                        for (std::size_t t = 0; t < len; ++t) {
                            const std::size_t i = base + f * nt + t;
                            const T dy = o.grad[i];
                            if (gg) gg[c] += dy * xhat[i];
                            if (gb) gb[c] += dy;
                            mean_dxhat += dy * gam;
                            mean_dxhat_xhat += dy * gam * xhat[i];
                        }
                    if (!gx) continue;
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    const T is = inv_std[b * nc + c];
                    for (std::size_t f = 0; f < nf; ++f)
                        for (std::size_t t = 0; t < len; ++t) {
                            const std::size_t i = base + f * nt + t;
                            gx[i] += is * (o.grad[i] * gam - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                        }
                }
            }
        });
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const SequenceMask& mask) {
    if (scores.rank() != 4 || scores.dim(2) != scores.dim(3)) {
        throw ShapeError("masked_softmax expects [B,H,T,T], got " + shape_str(scores.shape()));
    }
    check_batch_time("masked_softmax", scores, mask, 2);
    const std::size_t nb = scores.dim(0), nh = scores.dim(1), nt = scores.dim(2);
    auto in = scores.data();
    std::vector<T> out(scores.numel(), T(0));
    std::vector<T> row(nt);
    for (std::size_t b = 0; b < nb; ++b) {
        const std::size_t len = mask.length(b);
        for (std::size_t h = 0; h < nh; ++h)
            for (std::size_t q = 0; q < len; ++q) {
                const std::size_t base = ((b * nh + h) * nt + q) * nt;
                for (std::size_t k = 0; k < nt; ++k) row[k] = k < len ? in[base + k] : static_cast<T>(kMaskedScore);
                const T mx = *std::max_element(row.begin(), row.end());
                T s = 0;
                for (std::size_t k = 0; k < nt; ++k) {
                    row[k] = std::exp(row[k] - mx);
                    s += row[k];
                }
                for (std::size_t k = 0; k < len; ++k) out[base + k] = row[k] / s;
                // keys at k >= len stay exactly zero
            }
    }
    return make_op<T>("masked_softmax", scores.shape(), std::move(out), {scores}, [nb, nh, nt](Node<T>& o) {
        auto& g = o.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < nb * nh * nt; ++r) {
            const std::size_t base = r * nt;
            T dot = 0;
            for (std::size_t k = 0; k < nt; ++k) dot += o.grad[base + k] * o.value[base + k];
            for (std::size_t k = 0; k < nt; ++k) g[base + k] += o.value[base + k] * (o.grad[base + k] - dot);
        }
    });
}

template struct NormParams<float>;
template struct NormParams<double>;

#define UCAM_INSTANTIATE_NORM(T)                                                                            \
    template Tensor<T> apply_mask(const Tensor<T>&, const SequenceMask&, std::size_t);                      \
    template Tensor<T> utterance_layernorm(const Tensor<T>&, const SequenceMask&, const NormParams<T>&,     \
                                           LayerNormStats);                                                 \
    template Tensor<T> utterance_batchnorm(const Tensor<T>&, const SequenceMask&, const NormParams<T>&);    \
    template Tensor<T> masked_softmax(const Tensor<T>&, const SequenceMask&);

UCAM_INSTANTIATE_NORM(float)
UCAM_INSTANTIATE_NORM(double)

}  // namespace ucam
