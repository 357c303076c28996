#include "ucam/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "ucam/error.hpp"
#include "ucam/random.hpp"

namespace ucam {

namespace {

std::atomic<bool> g_flip_swish{false};

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;
template <typename T>
using MMap = Eigen::Map<MatR<T>>;

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
T sigmoid_scalar(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// Elementwise op with derivative expressed through input and output.
template <typename T, typename F, typename D>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, D df) {
    auto in = x.data();
    std::vector<T> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    return make_op<T>(name, x.shape(), std::move(out), {x}, [df](Node<T>& o) {
        auto& xin = *o.inputs[0];
        if (!xin.requires_grad) return;
        auto& g = xin.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * df(xin.value[i], o.value[i]);
    });
}

}  // namespace

namespace testing {
void set_swish_backward_sign_flip(bool on) { g_flip_swish = on; }
}  // namespace testing

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
            "matmul: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n);
    MMap<T>(out.data(), m, n).noalias() = CMap<T>(a.data().data(), m, k) * CMap<T>(b.data().data(), k, n);
    return make_op<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& o) {
        auto& A = *o.inputs[0];
        auto& B = *o.inputs[1];
        CMap<T> dC(o.grad.data(), m, n);
        if (A.requires_grad) MMap<T>(A.grad_buffer().data(), m, k).noalias() += dC * CMap<T>(B.value.data(), k, n).transpose();
        if (B.requires_grad) MMap<T>(B.grad_buffer().data(), k, n).noalias() += CMap<T>(A.value.data(), m, k).transpose() * dC;
    });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
            "bmm: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const auto nb = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(2);
    std::vector<T> out(nb * m * p);
    for (std::size_t i = 0; i < nb; ++i) {
        MMap<T>(out.data() + i * m * p, m, p).noalias() =
            CMap<T>(a.data().data() + i * m * k, m, k) * CMap<T>(b.data().data() + i * k * p, k, p);
    }
    return make_op<T>("bmm", {nb, m, p}, std::move(out), {a, b}, [nb, m, k, p](Node<T>& o) {
        auto& A = *o.inputs[0];
        auto& B = *o.inputs[1];
        for (std::size_t i = 0; i < nb; ++i) {
            CMap<T> dC(o.grad.data() + i * m * p, m, p);
            if (A.requires_grad) {
                MMap<T>(A.grad_buffer().data() + i * m * k, m, k).noalias() +=
                    dC * CMap<T>(B.value.data() + i * k * p, k, p).transpose();
            }
            if (B.requires_grad) {
                MMap<T>(B.grad_buffer().data() + i * k * p, k, p).noalias() +=
                    CMap<T>(A.value.data() + i * m * k, m, k).transpose() * dC;
            }
        }
    });
}

template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
            "bmm_nt: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    const auto nb = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(1);
    std::vector<T> out(nb * m * p);
    for (std::size_t i = 0; i < nb; ++i) {
        MMap<T>(out.data() + i * m * p, m, p).noalias() =
            CMap<T>(a.data().data() + i * m * k, m, k) * CMap<T>(b.data().data() + i * p * k, p, k).transpose();
    }
    return make_op<T>("bmm_nt", {nb, m, p}, std::move(out), {a, b}, [nb, m, k, p](Node<T>& o) {
        auto& A = *o.inputs[0];
        auto& B = *o.inputs[1];
        for (std::size_t i = 0; i < nb; ++i) {
            CMap<T> dC(o.grad.data() + i * m * p, m, p);
            if (A.requires_grad) {
                MMap<T>(A.grad_buffer().data() + i * m * k, m, k).noalias() +=
                    dC * CMap<T>(B.value.data() + i * p * k, p, k);
            }
            if (B.requires_grad) {
                MMap<T>(B.grad_buffer().data() + i * p * k, p, k).noalias() +=
                    dC.transpose() * CMap<T>(A.value.data() + i * m * k, m, k);
            }
        }
    });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    require(x.rank() >= 1 && weight.rank() == 2 && x.shape().back() == weight.dim(1),
            "linear: dimension mismatch " + shape_str(x.shape()) + " x " + shape_str(weight.shape()) + "^T");
    const bool has_bias = bias.defined();
    if (has_bias) {
        require(bias.rank() == 1 && bias.dim(0) == weight.dim(0),
                "linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
    }
    const auto in = weight.dim(1), out_dim = weight.dim(0);
    const auto rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    std::vector<T> out(rows * out_dim);
    MMap<T> Y(out.data(), rows, out_dim);
    Y.noalias() = CMap<T>(x.data().data(), rows, in) * CMap<T>(weight.data().data(), out_dim, in).transpose();
    if (has_bias) {
        Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), out_dim);
    }
    std::vector<Tensor<T>> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    return make_op<T>("linear", std::move(out_shape), std::move(out), inputs, [rows, in, out_dim](Node<T>& o) {
        auto& X = *o.inputs[0];
        auto& W = *o.inputs[1];
        CMap<T> dY(o.grad.data(), rows, out_dim);
        if (X.requires_grad) {
            MMap<T>(X.grad_buffer().data(), rows, in).noalias() += dY * CMap<T>(W.value.data(), out_dim, in);
        }
        if (W.requires_grad) {
            MMap<T>(W.grad_buffer().data(), out_dim, in).noalias() += dY.transpose() * CMap<T>(X.value.data(), rows, in);
        }
        if (o.inputs.size() > 2 && o.inputs[2]->requires_grad) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(o.inputs[2]->grad_buffer().data(), out_dim) +=
                dY.colwise().sum();
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same("add", a, b);
    std::vector<T> out(a.numel());
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& o) {
        for (int k = 0; k < 2; ++k) {
            if (!o.input_needs_grad(k)) continue;
            auto& g = o.inputs[k]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same("sub", a, b);
    std::vector<T> out(a.numel());
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_op<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& o) {
        if (o.input_needs_grad(0)) {
            auto& g = o.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (o.input_needs_grad(1)) {
            auto& g = o.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same("mul", a, b);
    std::vector<T> out(a.numel());
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& o) {
        auto& A = *o.inputs[0];
        auto& B = *o.inputs[1];
        if (A.requires_grad) {
            auto& g = A.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * B.value[i];
        }
        if (B.requires_grad) {
            auto& g = B.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * A.value[i];
        }
    });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    require(x.rank() >= 1 && bias.rank() == 1 && bias.dim(0) == x.shape().back(),
            "add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " + shape_str(x.shape()));
    const auto d = bias.dim(0);
    std::vector<T> out(x.data().begin(), x.data().end());
    auto bv = bias.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % d];
    return make_op<T>("add_bias", x.shape(), std::move(out), {x, bias}, [d](Node<T>& o) {
        if (o.input_needs_grad(0)) {
            auto& g = o.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (o.input_needs_grad(1)) {
            auto& g = o.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % d] += o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    return unary<T>("scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.data()) s += v;
    return make_op<T>("sum", {}, {s}, {x}, [](Node<T>& o) {
        auto& g = o.inputs[0]->grad_buffer();
        for (auto& v : g) v += o.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

Activation parse_activation(std::string_view name) {
    if (name == "swish") return Activation::swish;
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "relu") return Activation::relu;
    if (name == "elu") return Activation::elu;
    if (name == "glu") return Activation::glu;
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

template <typename T>
Tensor<T> swish(const Tensor<T>& x) {
    return unary<T>(
        "swish", x, [](T v) { return v * sigmoid_scalar(v); },
        [](T v, T) {
            T s = sigmoid_scalar(v);
            T d = s * (T(1) + v * (T(1) - s));
            return g_flip_swish.load(std::memory_order_relaxed) ? -d : d;
        });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary<T>("sigmoid", x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
    return unary<T>(
        "elu", x, [](T v) { return v > T(0) ? v : std::expm1(v); }, [](T v, T y) { return v > T(0) ? T(1) : y + T(1); });
}

template <typename T>
Tensor<T> glu(const Tensor<T>& x, std::size_t axis) {
    const auto& s = x.shape();
    require(axis < s.size(), "glu: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    require(s[axis] % 2 == 0, "glu: gated axis of " + shape_str(s) + " must have even extent");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t half = s[axis] / 2;
    Shape out_shape = s;
    out_shape[axis] = half;
    std::vector<T> out(outer * half * inner);
    auto in = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < half; ++c) {
            const T* a = &in[(o * 2 * half + c) * inner];
            const T* g = &in[(o * 2 * half + half + c) * inner];
            T* y = &out[(o * half + c) * inner];
            for (std::size_t i = 0; i < inner; ++i) y[i] = a[i] * sigmoid_scalar(g[i]);
        }
    }
    return make_op<T>("glu", std::move(out_shape), std::move(out), {x}, [outer, half, inner](Node<T>& o) {
        auto& X = *o.inputs[0];
        auto& gx = X.grad_buffer();
        for (std::size_t ou = 0; ou < outer; ++ou) {
            for (std::size_t c = 0; c < half; ++c) {
                const std::size_t ia = (ou * 2 * half + c) * inner;
                const std::size_t ig = (ou * 2 * half + half + c) * inner;
                const std::size_t iy = (ou * half + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    const T sg = sigmoid_scalar(X.value[ig + i]);
                    const T dy = o.grad[iy + i];
                    gx[ia + i] += dy * sg;
                    gx[ig + i] += dy * X.value[ia + i] * sg * (T(1) - sg);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
    switch (kind) {
        case Activation::swish: return swish(x);
        case Activation::sigmoid: return sigmoid(x);
        case Activation::relu: return relu(x);
        case Activation::elu: return elu(x);
        case Activation::glu: return glu(x, x.rank() - 1);
    }
    throw ConfigError("unhandled activation");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    require(shape_numel(shape) == x.numel(), "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    std::vector<T> out(x.data().begin(), x.data().end());
    return make_op<T>("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& o) {
        auto& g = o.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    const auto& s = x.shape();
    const std::size_t r = s.size();
    require(axes.size() == r, "permute: " + std::to_string(axes.size()) + " axes for rank-" + std::to_string(r) + " tensor");
    std::vector<bool> used(r, false);
    for (auto a : axes) {
        require(a < r && !used[a], "permute: axes are not a permutation");
        used[a] = true;
    }
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[axes[i]];
    // source offset of every output element, in output order
    const std::size_t n = x.numel();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[axes[i]];
        src[flat] = off;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<T> out(n);
    auto in = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = in[src[i]];
    return make_op<T>("permute", std::move(out_shape), std::move(out), {x}, [src = std::move(src)](Node<T>& o) {
        auto& g = o.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += o.grad[i];
    });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
    if (p == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> factor(x.numel());
    for (auto& f : factor) f = rng.uniform() < p ? T(0) : keep_scale;
    std::vector<T> out(x.numel());
    auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * factor[i];
    return make_op<T>("dropout", x.shape(), std::move(out), {x}, [factor = std::move(factor)](Node<T>& o) {
        auto& g = o.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor[i];
    });
}

namespace {

struct ConvGeometry {
    std::size_t batch, cin, f, t, cout, kf, kt, stride_f, pad_f, pad_t, fo, to;
    std::size_t patch() const { return cin * kf * kt; }
    std::size_t cols() const { return fo * to; }
};

// cols[(c*kf + i)*kt + j, fo_idx*to + to_idx] = x[c, fo_idx*stride + i - pad_f, to_idx + j - pad_t]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t i = 0; i < g.kf; ++i)
            for (std::size_t j = 0; j < g.kt; ++j) {
                T* row = cols + ((c * g.kf + i) * g.kt + j) * g.cols();
                for (std::size_t fo = 0; fo < g.fo; ++fo) {
                    const long fi = static_cast<long>(fo * g.stride_f + i) - static_cast<long>(g.pad_f);
                    T* dst = row + fo * g.to;
                    if (fi < 0 || fi >= static_cast<long>(g.f)) {
                        std::fill(dst, dst + g.to, T(0));
                        continue;
                    }
                    const T* src = x + (c * g.f + fi) * g.t;
                    for (std::size_t to = 0; to < g.to; ++to) {
                        const long ti = static_cast<long>(to + j) - static_cast<long>(g.pad_t);
                        dst[to] = (ti < 0 || ti >= static_cast<long>(g.t)) ? T(0) : src[ti];
                    }
                }
            }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, T* x) {
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t i = 0; i < g.kf; ++i)
            for (std::size_t j = 0; j < g.kt; ++j) {
                const T* row = cols + ((c * g.kf + i) * g.kt + j) * g.cols();
                for (std::size_t fo = 0; fo < g.fo; ++fo) {
                    const long fi = static_cast<long>(fo * g.stride_f + i) - static_cast<long>(g.pad_f);
                    if (fi < 0 || fi >= static_cast<long>(g.f)) continue;
                    T* dst = x + (c * g.f + fi) * g.t;
                    const T* src = row + fo * g.to;
                    for (std::size_t to = 0; to < g.to; ++to) {
                        const long ti = static_cast<long>(to + j) - static_cast<long>(g.pad_t);
                        if (ti >= 0 && ti < static_cast<long>(g.t)) dst[ti] += src[to];
                    }
                }
            }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride_f, std::size_t pad_f,
                 std::size_t pad_t) {
    require(x.rank() == 4 && weight.rank() == 4 && x.dim(1) == weight.dim(1),
            "conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()));
    require(stride_f >= 1, "conv2d: stride must be positive");
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3),
                   stride_f, pad_f, pad_t, 0, 0};
    require(g.f + 2 * pad_f >= g.kf && g.t + 2 * pad_t >= g.kt,
            "conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " + shape_str(x.shape()));
    g.fo = (g.f + 2 * pad_f - g.kf) / stride_f + 1;
    g.to = g.t + 2 * pad_t - g.kt + 1;
    std::vector<T> out(g.batch * g.cout * g.cols());
    std::vector<T> cols(g.patch() * g.cols());
    CMap<T> W(weight.data().data(), g.cout, g.patch());
    for (std::size_t b = 0; b < g.batch; ++b) {
        im2col(g, x.data().data() + b * g.cin * g.f * g.t, cols.data());
        MMap<T>(out.data() + b * g.cout * g.cols(), g.cout, g.cols()).noalias() =
            W * CMap<T>(cols.data(), g.patch(), g.cols());
    }
    return make_op<T>("conv2d", {g.batch, g.cout, g.fo, g.to}, std::move(out), {x, weight}, [g](Node<T>& o) {
        auto& X = *o.inputs[0];
        auto& Wn = *o.inputs[1];
        std::vector<T> cols(g.patch() * g.cols());
        std::vector<T> dcols(X.requires_grad ? cols.size() : 0);
        CMap<T> W(Wn.value.data(), g.cout, g.patch());
        for (std::size_t b = 0; b < g.batch; ++b) {
            CMap<T> dY(o.grad.data() + b * g.cout * g.cols(), g.cout, g.cols());
            if (Wn.requires_grad) {
                im2col(g, X.value.data() + b * g.cin * g.f * g.t, cols.data());
                MMap<T>(Wn.grad_buffer().data(), g.cout, g.patch()).noalias() +=
                    dY * CMap<T>(cols.data(), g.patch(), g.cols()).transpose();
            }
            if (X.requires_grad) {
                MMap<T>(dcols.data(), g.patch(), g.cols()).noalias() = W.transpose() * dY;
                col2im_add(g, dcols.data(), X.grad_buffer().data() + b * g.cin * g.f * g.t);
            }
        }
    });
}

template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t pad_left) {
    require(x.rank() == 3 && weight.rank() == 2 && x.dim(1) == weight.dim(0),
            "depthwise_conv1d: input " + shape_str(x.shape()) + " incompatible with weight " +
                shape_str(weight.shape()));
    const auto nb = x.dim(0), nc = x.dim(1), nt = x.dim(2), k = weight.dim(1);
    require(k >= 1 && pad_left < k, "depthwise_conv1d: left padding must be smaller than the kernel");
    std::vector<T> out(x.numel(), T(0));
    auto in = x.data();
    auto w = weight.data();
    for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t c = 0; c < nc; ++c) {
            const T* xr = &in[(b * nc + c) * nt];
            const T* wr = &w[c * k];
            T* yr = &out[(b * nc + c) * nt];
            for (std::size_t t = 0; t < nt; ++t) {
                T acc = 0;
                for (std::size_t j = 0; j < k; ++j) {
                    const long s = static_cast<long>(t + j) - static_cast<long>(pad_left);
                    if (s >= 0 && s < static_cast<long>(nt)) acc += wr[j] * xr[s];
                }
                yr[t] = acc;
            }
        }
    return make_op<T>("depthwise_conv1d", x.shape(), std::move(out), {x, weight}, [nb, nc, nt, k, pad_left](Node<T>& o) {
        auto& X = *o.inputs[0];
        auto& Wn = *o.inputs[1];
        T* gx = X.requires_grad ? X.grad_buffer().data() : nullptr;
        T* gw = Wn.requires_grad ? Wn.grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t c = 0; c < nc; ++c) {
                const std::size_t row = (b * nc + c) * nt;
                for (std::size_t t = 0; t < nt; ++t) {
                    const T dy = o.grad[row + t];
                    for (std::size_t j = 0; j < k; ++j) {
                        const long s = static_cast<long>(t + j) - static_cast<long>(pad_left);
                        if (s < 0 || s >= static_cast<long>(nt)) continue;
                        if (gx) gx[row + s] += dy * Wn.value[c * k + j];
                        if (gw) gw[c * k + j] += dy * X.value[row + s];
                    }
                }
            }
    });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
    require(x.rank() >= 1 && x.shape().back() > 0, "log_softmax: empty last axis in " + shape_str(x.shape()));
    const auto k = x.shape().back();
    const auto rows = x.numel() / k;
    std::vector<T> out(x.numel());
    auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = &in[r * k];
        T mx = *std::max_element(xr, xr + k);
        T s = 0;
        for (std::size_t i = 0; i < k; ++i) s += std::exp(xr[i] - mx);
        const T lse = mx + std::log(s);
        for (std::size_t i = 0; i < k; ++i) out[r * k + i] = xr[i] - lse;
    }
    return make_op<T>("log_softmax", x.shape(), std::move(out), {x}, [rows, k](Node<T>& o) {
        auto& g = o.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            T gs = 0;
            for (std::size_t i = 0; i < k; ++i) gs += o.grad[r * k + i];
            for (std::size_t i = 0; i < k; ++i) g[r * k + i] += o.grad[r * k + i] - std::exp(o.value[r * k + i]) * gs;
        }
    });
}

#define UCAM_INSTANTIATE_OPS(T)                                                                   \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> bmm_nt(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> scale(const Tensor<T>&, T);                                                \
    template Tensor<T> sum(const Tensor<T>&);                                                     \
    template Tensor<T> mean(const Tensor<T>&);                                                    \
    template Tensor<T> activation(Activation, const Tensor<T>&);                                  \
    template Tensor<T> swish(const Tensor<T>&);                                                   \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
    template Tensor<T> relu(const Tensor<T>&);                                                    \
    template Tensor<T> elu(const Tensor<T>&);                                                     \
    template Tensor<T> glu(const Tensor<T>&, std::size_t);                                        \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
    template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                \
    template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                   \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t); \
    template Tensor<T> depthwise_conv1d(const Tensor<T>&, const Tensor<T>&, std::size_t);         \
    template Tensor<T> log_softmax(const Tensor<T>&);

UCAM_INSTANTIATE_OPS(float)
UCAM_INSTANTIATE_OPS(double)

}  // namespace ucam
