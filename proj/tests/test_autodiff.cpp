#include <doctest.h>

#include <cmath>
#include <random>

#include "uda/autodiff.hpp"
#include "uda/nets.hpp"

using namespace uda;
using ad::Parameter;
using ad::Var;

namespace {

Tensor<double> rand_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(s));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.data) v = u(rng);
    return t;
}

// Probes every parameter entry (instances here are tiny).
GradCheckResult check(std::vector<Parameter<double>*> ps, const std::function<Var<double>()>& f, double tol = 1e-6) {
    return grad_check(ps, f, 10000, 1e-5, tol, 3);
}

// Fixed random projection so that vector-valued ops reduce to a scalar with a
// nontrivial gradient.
Var<double> project(const Var<double>& x, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return ad::sum(ad::mul(x, ad::constant(rand_tensor(x.shape(), rng))));
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
    std::mt19937_64 rng(1);
    Parameter<double> a("a", rand_tensor({2, 3}, rng));
    Parameter<double> b("b", rand_tensor({2, 3}, rng, 0.5, 2.0));
    auto r = check({&a, &b}, [&] {
        auto x = a.var(true), y = b.var(true);
        auto t = ad::add(ad::mul(x, y), ad::sub(ad::exp(x), ad::log(y)));
        t = ad::add(t, ad::mul_scalar(ad::square(x), 0.3));
        t = ad::add(t, ad::sigmoid(x));
        t = ad::add(t, ad::leaky_relu(ad::add_scalar(x, 0.05), 0.2));
        t = ad::add(t, ad::abs(ad::add_scalar(y, -1.01)));
        return project(t, 9);
    });
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("reductions and reshape") {
    std::mt19937_64 rng(2);
    Parameter<double> a("a", rand_tensor({2, 2, 2}, rng));
    auto r = check({&a}, [&] {
        auto x = a.var(true);
        auto m = ad::mean(ad::square(x));
        auto s = project(ad::reshape(x, {4, 2}), 4);
        return ad::weighted_sum<double>({m, s}, {2.0, 0.5});
    });
    CHECK(r.passed);
}

TEST_CASE("conv2d gradients for stride, padding and dilation") {
    std::mt19937_64 rng(3);
    for (auto spec : {ad::ConvSpec{1, 1, 1}, ad::ConvSpec{2, 1, 1}, ad::ConvSpec{1, 2, 2}, ad::ConvSpec{1, 0, 1}}) {
        Parameter<double> x("x", rand_tensor({2, 2, 6, 6}, rng));
        Parameter<double> w("w", rand_tensor({3, 2, 3, 3}, rng));
        Parameter<double> b("b", rand_tensor({3}, rng));
        auto r =
            check({&x, &w, &b}, [&] { return project(ad::conv2d(x.var(true), w.var(true), b.var(true), spec), 5); });
        CHECK(r.passed);
    }
}

TEST_CASE("conv2d forward matches a direct loop") {
    std::mt19937_64 rng(4);
    const auto x = rand_tensor({1, 2, 5, 5}, rng);
    const auto w = rand_tensor({2, 2, 3, 3}, rng);
    const auto b = rand_tensor({2}, rng);
    const ad::ConvSpec spec{2, 1, 1};
    auto y = ad::conv2d(ad::constant(x), ad::constant(w), ad::constant(b), spec).value();
    REQUIRE(y.shape == Shape{1, 2, 3, 3});
    for (int co = 0; co < 2; ++co)
        for (int oy = 0; oy < 3; ++oy)
            for (int ox = 0; ox < 3; ++ox) {
                double acc = b[static_cast<std::size_t>(co)];
                for (int ci = 0; ci < 2; ++ci)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                            acc +=
                                w[((static_cast<std::size_t>(co) * 2 + ci) * 3 + ky) * 3 + kx] * x.at4(0, ci, iy, ix);
                        }
                CHECK(y.at4(0, co, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
            }
}

TEST_CASE("transposed convolution is the adjoint of convolution") {
    // <conv(x), y> == <x, convT(y)> with shared weights and zero bias.
    std::mt19937_64 rng(5);
    const auto x = rand_tensor({1, 2, 8, 8}, rng);
    const auto y = rand_tensor({1, 3, 4, 4}, rng);
    const auto w = rand_tensor({3, 2, 4, 4}, rng);  // conv: Co=3, Ci=2; convT reads it as [Ci=3, Co=2]
    auto cx = ad::conv2d(ad::constant(x), ad::constant(w), ad::constant(Tensor<double>({3})), {2, 1, 1}).value();
    auto ty = ad::conv_transpose2d(ad::constant(y), ad::constant(w), ad::constant(Tensor<double>({2})), 2, 1).value();
    REQUIRE(cx.shape == y.shape);
    REQUIRE(ty.shape == x.shape);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) lhs += cx[i] * y[i];
    for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("conv_transpose2d gradients") {
    std::mt19937_64 rng(6);
    Parameter<double> x("x", rand_tensor({1, 2, 3, 3}, rng));
    Parameter<double> w("w", rand_tensor({2, 3, 4, 4}, rng));
    Parameter<double> b("b", rand_tensor({3}, rng));
    auto r = check({&x, &w, &b},
                   [&] { return project(ad::conv_transpose2d(x.var(true), w.var(true), b.var(true), 2, 1), 7); });
    CHECK(r.passed);
}

TEST_CASE("instance norm, upsampling, softmax, pooling and linear gradients") {
    std::mt19937_64 rng(7);
    Parameter<double> x("x", rand_tensor({2, 3, 4, 4}, rng));
    Parameter<double> g("g", rand_tensor({3}, rng, 0.5, 1.5));
    Parameter<double> be("be", rand_tensor({3}, rng));
    SUBCASE("instance norm") {
        auto r =
            check({&x, &g, &be}, [&] { return project(ad::instance_norm(x.var(true), g.var(true), be.var(true)), 1); });
        CHECK(r.passed);
    }
    SUBCASE("bilinear upsampling") {
        auto r = check({&x}, [&] { return project(ad::upsample_bilinear(x.var(true), 4), 2); });
        CHECK(r.passed);
    }
    SUBCASE("channel softmax") {
        auto r = check({&x}, [&] { return project(ad::softmax_channels(x.var(true)), 3); });
        CHECK(r.passed);
    }
    SUBCASE("global average pool and linear") {
        Parameter<double> w("w", rand_tensor({2, 3}, rng));
        Parameter<double> b("b", rand_tensor({2}, rng));
        auto r = check({&x, &w, &b}, [&] {
            auto p = ad::reshape(ad::global_avg_pool(x.var(true)), {2, 3});
            return project(ad::linear(p, w.var(true), b.var(true)), 4);
        });
        CHECK(r.passed);
    }
}

TEST_CASE("bilinear upsampling of a constant is constant") {
    Tensor<double> t({1, 1, 3, 3}, 0.7);
    auto u = ad::upsample_bilinear(ad::constant(t), 4).value();
    CHECK(u.shape == Shape{1, 1, 12, 12});
    for (double v : u.data) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("frozen parameters pass gradients through but do not accumulate") {
    std::mt19937_64 rng(8);
    Parameter<double> w("w", rand_tensor({3}, rng));
    auto x = ad::leaf(rand_tensor({3}, rng));
    auto loss = ad::sum(ad::mul(x, w.var(false)));
    ad::backward(loss);
    CHECK_FALSE(w.has_grad());
    REQUIRE(x.node()->has_grad());
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(w.value()[i]));
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
    Parameter<double> w("w", Tensor<double>({1}, 2.0));
    for (int i = 0; i < 2; ++i) ad::backward(ad::sum(ad::square(w.var(true))));
    CHECK(w.grad()[0] == doctest::Approx(8.0));
    w.zero_grad();
    CHECK_FALSE(w.has_grad());
}

TEST_CASE("shape errors") {
    auto a = ad::constant(Tensor<double>({2, 3}));
    auto b = ad::constant(Tensor<double>({3, 2}));
    CHECK_THROWS_AS(ad::add(a, b), ShapeError);
    CHECK_THROWS_AS(ad::conv2d(ad::constant(Tensor<double>({1, 2, 4, 4})), ad::constant(Tensor<double>({1, 3, 3, 3})),
                               ad::constant(Tensor<double>({1})), {1, 1, 1}),
                    ShapeError);
}
