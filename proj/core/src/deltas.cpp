#include "ucam/deltas.hpp"

#include <vector>

#include "ucam/error.hpp"

namespace ucam {

template <typename T>
Tensor<T> stack_deltas(const Tensor<T>& statics, const SequenceMask& mask) {
    if (statics.rank() != 3 || statics.dim(0) != mask.batch() || statics.dim(2) != mask.max_len()) {
        throw ShapeError("stack_deltas: statics " + shape_str(statics.shape()) + " do not match mask");
    }
    const std::size_t nb = statics.dim(0), nf = statics.dim(1), nt = statics.dim(2);
    const std::size_t plane = nf * nt;
    std::vector<T> out(nb * 3 * plane, T(0));
    auto in = statics.data();
    for (std::size_t b = 0; b < nb; ++b) {
        const std::size_t len = mask.length(b);
        const T* x = in.data() + b * plane;
        T* y0 = out.data() + (b * 3) * plane;
        for (std::size_t f = 0; f < nf; ++f)
            for (std::size_t t = 0; t < len; ++t) y0[f * nt + t] = x[f * nt + t];
        regression_delta(y0, nf, len, nt, y0 + plane);
        regression_delta(y0 + plane, nf, len, nt, y0 + 2 * plane);
    }
    std::vector<std::size_t> lengths = mask.lengths();
    return make_op<T>("stack_deltas", {nb, 3, nf, nt}, std::move(out), {statics},
                      [lengths = std::move(lengths), nf, nt, plane](Node<T>& o) {
                          auto& gx = o.inputs[0]->grad_buffer();
                          std::vector<T> gd(plane);
                          for (std::size_t b = 0; b < lengths.size(); ++b) {
                              const std::size_t len = lengths[b];
                              const T* g = o.grad.data() + b * 3 * plane;
                              // g_delta = g1 + adj(g2); g_x = g0 + adj(g_delta)
                              for (std::size_t i = 0; i < plane; ++i) gd[i] = g[plane + i];
                              regression_delta_adjoint(g + 2 * plane, nf, len, nt, gd.data());
                              T* gxb = gx.data() + b * plane;
                              for (std::size_t f = 0; f < nf; ++f)
                                  for (std::size_t t = 0; t < len; ++t) gxb[f * nt + t] += g[f * nt + t];
                              regression_delta_adjoint(gd.data(), nf, len, nt, gxb);
                          }
                      });
}

template Tensor<float> stack_deltas(const Tensor<float>&, const SequenceMask&);
template Tensor<double> stack_deltas(const Tensor<double>&, const SequenceMask&);

}  // namespace ucam
