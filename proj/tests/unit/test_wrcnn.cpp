#include <gtest/gtest.h>

#include "ucam/error.hpp"
#include "ucam/gradcheck.hpp"
#include "ucam/ops.hpp"
#include "ucam/wrcnn.hpp"

using namespace ucam;

namespace {

Tensord randn(Shape shape, Rng& rng, bool grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal();
    return Tensord::from(std::move(shape), std::move(v), grad);
}

WrcnnConfig small() {
    WrcnnConfig c;
    c.base_channels = 2;
    c.multipliers = {1, 2, 2};
    c.freq_strides = {1, 2, 2};
    c.out_dim = 6;
    return c;
}

}  // namespace

TEST(Wrcnn, OutputFrequencyUsesCeil) {
    auto c = small();
    EXPECT_EQ(c.output_freq(16), 4u);
    EXPECT_EQ(c.output_freq(7), 2u);  // 7 -> 4 -> 2
    EXPECT_EQ(c.output_freq(1), 1u);
    c.freq_strides = {1, 1, 1};
    EXPECT_EQ(c.output_freq(7), 7u);
}

TEST(Wrcnn, Shapes) {
    auto c = small();
    Rng rng(1);
    auto p = init_wrcnn<double>(c, 7, rng);
    auto x = randn({2, 3, 7, 5}, rng);
    auto y = wrcnn_forward(x, p, c, SequenceMask({5, 3}, 5));
    EXPECT_EQ(y.shape(), (Shape{2, 5, 6}));
    EXPECT_EQ(p.out.weight.dim(1), 4u * 2u);  // last block channels x ceil frequency

    auto blk = residual_block_forward(randn({1, 2, 7, 5}, rng), p.blocks[1], c, SequenceMask({5}, 5));
    EXPECT_EQ(blk.shape(), (Shape{1, 4, 4, 5}));
    EXPECT_THROW(wrcnn_forward(randn({1, 3, 10, 5}, rng), p, c, SequenceMask({5}, 5)), ShapeError);
}

TEST(Wrcnn, ProjectionOnlyWhenShapeChanges) {
    auto c = small();
    Rng rng(2);
    auto p = init_wrcnn<double>(c, 8, rng);
    EXPECT_FALSE(p.blocks[0].proj.defined());  // 2 -> 2, stride 1
    EXPECT_TRUE(p.blocks[1].proj.defined());
    EXPECT_TRUE(p.blocks[2].proj.defined());  // stride 2 even with equal channels
}

TEST(Wrcnn, PaddingInvariance) {
    auto c = small();
    Rng rng(3);
    auto p = init_wrcnn<double>(c, 6, rng);
    auto x = randn({1, 3, 6, 4}, rng);
    auto alone = wrcnn_forward(x, p, c, SequenceMask({4}, 4));
    auto padded = randn({1, 3, 6, 9}, rng);  // garbage beyond frame 4
    for (std::size_t row = 0; row < 18; ++row)
        for (std::size_t t = 0; t < 4; ++t) padded.data_mut()[row * 9 + t] = x[row * 4 + t];
    auto y = wrcnn_forward(padded, p, c, SequenceMask({4}, 9));
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t e = 0; e < 6; ++e) EXPECT_NEAR(y[t * 6 + e], alone[t * 6 + e], 1e-12);
    for (std::size_t i = 4 * 6; i < 9 * 6; ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(Wrcnn, ConfigValidation) {
    auto c = small();
    c.kernel = 4;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small();
    c.freq_strides = {1, 0, 2};
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(WrcnnGrad, BlockAndFrontend) {
    auto c = small();
    Rng rng(4);
    auto p = init_wrcnn<double>(c, 5, rng);
    for (auto& b : p.blocks)
        for (auto* n : {&b.bn1, &b.bn2})
            for (auto& v : n->gamma.data_mut()) v += 0.3 * rng.normal();
    SequenceMask m({4, 3}, 4);
    auto x = randn({2, 3, 5, 4}, rng, true);
    GradCheckOptions o;
    o.max_coords = 8;

    NamedTensors<double> all;
    p.collect("w", all);
    std::vector<Tensord> ps{x};
    for (auto& [n, t] : all) ps.push_back(t);
    auto r = randn({2, 4, 6}, rng);
    EXPECT_LT(grad_check([&] { return sum(mul(wrcnn_forward(x, p, c, m), r)); }, ps, o).max_rel_error, 1e-5);

    auto bx = randn({2, 2, 5, 4}, rng, true);
    NamedTensors<double> bn;
    p.blocks[1].collect("b", bn);
    std::vector<Tensord> bps{bx};
    for (auto& [n, t] : bn) bps.push_back(t);
    auto br = randn({2, 4, 3, 4}, rng);
    EXPECT_LT(grad_check([&] { return sum(mul(apply_mask(residual_block_forward(bx, p.blocks[1], c, m), m, 3), br)); },
                         bps, o)
                  .max_rel_error,
              1e-5);
}
