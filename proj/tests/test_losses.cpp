#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "uda/losses.hpp"

using namespace uda;
using ad::Parameter;
using ad::Var;

namespace {

Tensor<double> rand_tensor(Shape s, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    Tensor<double> t(std::move(s));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.data) v = u(rng);
    return t;
}

LabelMap rand_labels(int n, int h, int w, int k, std::mt19937_64& rng) {
    LabelMap y({n, h, w});
    std::uniform_int_distribution<int> u(0, k - 1);
    for (auto& v : y.data) v = static_cast<std::uint8_t>(u(rng));
    return y;
}

Tensor<double> one_hot(const LabelMap& y, int k) {
    const int n = y.dim(0), h = y.dim(1), w = y.dim(2);
    Tensor<double> p({n, k, h, w});
    for (int b = 0; b < n; ++b)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) p.at4(b, y[(static_cast<std::size_t>(b) * h + i) * w + j], i, j) = 1.0;
    return p;
}

Tensor<double> rand_probs(int n, int k, int h, int w, std::mt19937_64& rng) {
    return ad::softmax_channels(ad::constant(rand_tensor({n, k, h, w}, rng, -2, 2))).value();
}

// Scalar-loop seg loss: (1 - mean foreground soft Dice) + weighted CE.
double seg_loss_oracle(const Tensor<double>& p, const LabelMap& y, const std::vector<double>& w) {
    const int n = p.dim(0), k = p.dim(1), h = p.dim(2), wd = p.dim(3);
    std::vector<double> inter(k), ps(k), gs(k);
    double ce = 0;
    for (int b = 0; b < n; ++b)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < wd; ++j) {
                const int c = y[(static_cast<std::size_t>(b) * h + i) * wd + j];
                ce += -w[static_cast<std::size_t>(c)] * std::log(p.at4(b, c, i, j));
                for (int q = 0; q < k; ++q) {
                    const double g = q == c ? 1.0 : 0.0;
                    inter[q] += p.at4(b, q, i, j) * g;
                    ps[q] += p.at4(b, q, i, j);
                    gs[q] += g;
                }
            }
    double dice = 0;
    for (int q = 1; q < k; ++q) dice += (2 * inter[q] + kDiceSmooth) / (ps[q] + gs[q] + kDiceSmooth);
    return (1.0 - dice / (k - 1)) + ce / (static_cast<double>(n) * h * wd);
}

}  // namespace

TEST_CASE("recon and cycle losses") {
    std::mt19937_64 rng(1);
    const auto x = rand_tensor({2, 1, 4, 4}, rng);
    auto shifted = x;
    for (auto& v : shifted.data) v += 0.1;
    CHECK(recon_loss(ad::constant(x), ad::constant(x)).item() == 0.0);
    CHECK(recon_loss(ad::constant(shifted), ad::constant(x)).item() == doctest::Approx(0.1));
    for (auto& v : shifted.data) v += 0.1;
    CHECK(cycle_loss(ad::constant(shifted), ad::constant(x)).item() == doctest::Approx(0.2));

    const auto y = rand_tensor({2, 1, 4, 4}, rng);
    double ref = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) ref += std::abs(x[i] - y[i]);
    ref /= static_cast<double>(x.numel());
    CHECK(recon_loss(ad::constant(x), ad::constant(y)).item() == doctest::Approx(ref).epsilon(1e-12));
    CHECK(cycle_loss(ad::constant(x), ad::constant(y)).item() == doctest::Approx(ref).epsilon(1e-12));
    CHECK_THROWS_AS(recon_loss(ad::constant(x), ad::constant(Tensor<double>({2, 1, 4, 5}))), ShapeError);
    CHECK_THROWS_AS(cycle_loss(ad::constant(x), ad::constant(Tensor<double>({1, 1, 4, 4}))), ShapeError);
}

namespace {

double kl_of(double mu, double lv, Shape s = {1, 1, 1, 1}) {
    return kl_loss(LatentPosterior<double>{ad::constant(Tensor<double>(s, mu)), ad::constant(Tensor<double>(s, lv))})
        .item();
}

}  // namespace

TEST_CASE("kl_loss closed-form examples") {
    CHECK(kl_of(0.0, 0.0, {2, 3, 4, 4}) == 0.0);
    CHECK(kl_of(1.0, 0.0) == doctest::Approx(0.5));
    CHECK(kl_of(0.0, std::log(4.0)) == doctest::Approx(0.5 * (4.0 - std::log(4.0) - 1.0)));
    CHECK(kl_of(0.0, std::log(4.0)) == doctest::Approx(0.8069).epsilon(1e-4));

    // Sum over latent elements, mean over the batch.
    CHECK(kl_of(1.0, 0.0, {3, 2, 2, 2}) == doctest::Approx(0.5 * 8));
    auto mean = kl_loss(LatentPosterior<double>{ad::constant(Tensor<double>({3, 2, 2, 2}, 1.0)),
                                                ad::constant(Tensor<double>({3, 2, 2, 2}, 0.0))},
                        KlReduction::mean);
    CHECK(mean.item() == doctest::Approx(0.5));
}

TEST_CASE("kl_loss matches Monte-Carlo examples") {
    std::mt19937_64 rng(2);
    CHECK(std::abs(oracle::mc_kl(1.0, 0.0, 1000000, rng) - kl_of(1.0, 0.0)) < 1e-2);
    CHECK(std::abs(oracle::mc_kl(0.0, std::log(4.0), 1000000, rng) - kl_of(0.0, std::log(4.0))) < 1e-2);
}

TEST_CASE("kl_loss agrees with Monte-Carlo on 100 random Gaussians") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> um(-3, 3), ul(-2, 2);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const double mu = um(rng), lv = ul(rng);
        const double exact = kl_of(mu, lv);
        const double mc = oracle::mc_kl(mu, lv, 1000000, rng);
        worst = std::max(worst, std::abs(mc - exact) / exact);
    }
    CHECK(worst < 0.01);
}

TEST_CASE("kl_loss is nonnegative and zero only at the prior") {
    for (double mu = -2; mu <= 2.0001; mu += 0.5)
        for (double lv = -3; lv <= 3.0001; lv += 0.5) {
            const double v = kl_of(mu, lv);
            CHECK(v >= 0.0);
            const bool at_prior = std::abs(mu) < 1e-9 && std::abs(lv) < 1e-9;
            CHECK((v == 0.0) == at_prior);
        }
}

TEST_CASE("soft Dice hand example") {
    // Two classes, channel 1 at p = 0.5 on 2x2 pixels, ground truth on 2 of them.
    Tensor<double> p({1, 2, 2, 2}, 0.5);
    LabelMap y({1, 2, 2}, {1, 1, 0, 0});
    auto d = soft_dice(ad::constant(p), y).value();
    CHECK(d[1] == doctest::Approx((2 * 1.0 + kDiceSmooth) / (2 + 2 + kDiceSmooth)));
    CHECK(d[1] == doctest::Approx(0.5));
}

TEST_CASE("seg_loss examples") {
    std::mt19937_64 rng(4);
    const auto y = rand_labels(2, 6, 6, 5, rng);
    const auto uni = ClassWeights::uniform(5);
    for (auto fn : {&seg_loss<double>, &task_consistency_loss<double>}) {
        CHECK(fn(ad::constant(one_hot(y, 5)), y, uni).item() < 1e-4);

        Tensor<double> flat({2, 5, 6, 6}, 0.2);
        CHECK(weighted_cross_entropy(ad::constant(flat), y, uni).item() == doctest::Approx(std::log(5.0)));

        const auto p = rand_probs(2, 5, 6, 6, rng);
        const auto cw = ClassWeights::defaults(5);
        CHECK(fn(ad::constant(p), y, cw).item() == doctest::Approx(seg_loss_oracle(p, y, cw.w)).epsilon(1e-12));
    }
    LabelMap bad({1, 2, 2}, {0, 1, 2, 7});
    CHECK_THROWS_AS(seg_loss(ad::constant(Tensor<double>({1, 5, 2, 2}, 0.2)), bad, uni), ValidationError);
}

TEST_CASE("class weights normalize to mean one") {
    auto d = ClassWeights::defaults(5);
    CHECK(std::accumulate(d.w.begin(), d.w.end(), 0.0) / 5 == doctest::Approx(1.0));
    CHECK(d.w[0] == doctest::Approx(0.2 * d.w[1]));
    ClassWeights raw({2.0, 4.0});
    CHECK(raw.w[0] == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(ClassWeights({0.0, 0.0}), ConfigError);
}

TEST_CASE("seg_loss is invariant under a joint pixel shuffle") {
    std::mt19937_64 rng(5);
    const auto p = rand_probs(1, 5, 8, 8, rng);
    const auto y = rand_labels(1, 8, 8, 5, rng);
    std::vector<int> perm(64);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> p2 = p;
    LabelMap y2 = y;
    for (int i = 0; i < 64; ++i) {
        y2[static_cast<std::size_t>(perm[i])] = y[static_cast<std::size_t>(i)];
        for (int c = 0; c < 5; ++c)
            p2[static_cast<std::size_t>(c * 64 + perm[i])] = p[static_cast<std::size_t>(c * 64 + i)];
    }
    const auto cw = ClassWeights::defaults(5);
    CHECK(seg_loss(ad::constant(p2), y2, cw).item() ==
          doctest::Approx(seg_loss(ad::constant(p), y, cw).item()).epsilon(1e-12));
}

TEST_CASE("adversarial losses") {
    Tensor<double> half({4}, 0.5);
    CHECK(adv_loss_disc(ad::constant(half), ad::constant(half)).item() == doctest::Approx(2 * std::log(2.0)));
    CHECK(adv_loss_gen(ad::constant(half)).item() == doctest::Approx(std::log(2.0)));
    CHECK(adv_loss_gen(ad::constant(half), GanMode::minimax).item() == doctest::Approx(-std::log(2.0)));

    std::mt19937_64 rng(6);
    const auto r = rand_tensor({5}, rng, 0.01, 0.99), f = rand_tensor({3}, rng, 0.01, 0.99);
    double er = 0, ef = 0, eg = 0;
    for (double v : r.data) er += std::log(v);
    for (double v : f.data) {
        ef += std::log(1 - v);
        eg += -std::log(v);
    }
    CHECK(adv_loss_disc(ad::constant(r), ad::constant(f)).item() == doctest::Approx(-(er / 5 + ef / 3)).epsilon(1e-12));
    CHECK(adv_loss_gen(ad::constant(f)).item() == doctest::Approx(eg / 3).epsilon(1e-12));

    CHECK_THROWS_AS(adv_loss_gen(ad::constant(Tensor<double>({2}, 1.0))), ValidationError);
    CHECK_THROWS_AS(adv_loss_disc(ad::constant(Tensor<double>({2}, 0.0)), ad::constant(half)), ValidationError);
}

namespace {

LossTerms<double> unit_terms(double v = 1.0) {
    auto c = [v] { return ad::constant(Tensor<double>({1}, v)); };
    return {c(), c(), c(), c(), c(), c(), c(), c(), c()};
}

}  // namespace

TEST_CASE("total_loss arithmetic") {
    const LossWeights w;
    CHECK(total_loss(unit_terms(0.0), w).item() == 0.0);
    // 1*2 + 0.1*2 + 1*2 + 1*2 + 10*1
    CHECK(total_loss(unit_terms(), w).item() == doctest::Approx(16.2));

    std::mt19937_64 rng(7);
    auto t = unit_terms();
    t.cyc = ad::constant(Tensor<double>({1}, 0.37));
    LossWeights w2 = w;
    w2.cyc *= 2;
    CHECK(total_loss(t, w2).item() - total_loss(t, w).item() == doctest::Approx(10 * 0.37));

    LossTerms<double> partial;
    partial.seg = ad::constant(Tensor<double>({1}, 2.0));
    CHECK(total_loss(partial, w).item() == doctest::Approx(2.0));

    t.kl_t = ad::constant(Tensor<double>({1}, std::nan("")));
    try {
        (void)total_loss(t, w);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("kl_t") != std::string::npos);
    }
}

TEST_CASE("loss gradients match finite differences") {
    std::mt19937_64 rng(8);
    const double tol = 1e-5;
    Parameter<double> a("a", rand_tensor({2, 1, 3, 3}, rng));
    const auto b = rand_tensor({2, 1, 3, 3}, rng);
    SUBCASE("recon and cycle") {
        CHECK(grad_check({&a}, [&] { return recon_loss(a.var(true), ad::constant(b)); }, 100, 1e-5, tol, 1).passed);
        CHECK(grad_check({&a}, [&] { return cycle_loss(a.var(true), ad::constant(b)); }, 100, 1e-5, tol, 1).passed);
    }
    SUBCASE("kl, both reductions") {
        Parameter<double> mu("mu", rand_tensor({2, 2, 2, 2}, rng, -1, 1));
        Parameter<double> lv("lv", rand_tensor({2, 2, 2, 2}, rng, -1, 1));
        for (auto red : {KlReduction::sum, KlReduction::mean}) {
            CHECK(grad_check(
                      {&mu, &lv}, [&] { return kl_loss(LatentPosterior<double>{mu.var(true), lv.var(true)}, red); },
                      100, 1e-5, tol, 2)
                      .passed);
        }
    }
    SUBCASE("seg and task consistency through softmax") {
        Parameter<double> logits("logits", rand_tensor({2, 5, 3, 3}, rng, -2, 2));
        const auto y = rand_labels(2, 3, 3, 5, rng);
        const auto cw = ClassWeights::defaults(5);
        CHECK(grad_check(
                  {&logits}, [&] { return seg_loss(ad::softmax_channels(logits.var(true)), y, cw); }, 200, 1e-5, tol, 3)
                  .passed);
        CHECK(grad_check(
                  {&logits}, [&] { return task_consistency_loss(ad::softmax_channels(logits.var(true)), y, cw); }, 200,
                  1e-5, tol, 3)
                  .passed);
    }
    SUBCASE("adversarial through sigmoid") {
        Parameter<double> r("r", rand_tensor({4}, rng, -2, 2)), f("f", rand_tensor({3}, rng, -2, 2));
        CHECK(grad_check(
                  {&r, &f}, [&] { return adv_loss_disc(ad::sigmoid(r.var(true)), ad::sigmoid(f.var(true))); }, 100,
                  1e-5, tol, 4)
                  .passed);
        for (auto mode : {GanMode::non_saturating, GanMode::minimax}) {
            CHECK(grad_check(
                      {&f}, [&] { return adv_loss_gen(ad::sigmoid(f.var(true)), mode); }, 100, 1e-5, tol, 4)
                      .passed);
        }
    }
    SUBCASE("total") {
        Parameter<double> s("s", rand_tensor({9}, rng));
        CHECK(grad_check(
                  {&s},
                  [&] {
                      auto v = s.var(true);
                      auto pick = [&](int i) {
                          Tensor<double> e({9});
                          e[static_cast<std::size_t>(i)] = 1.0;
                          return ad::sum(ad::mul(v, ad::constant(e)));
                      };
                      LossTerms<double> t{pick(0), pick(1), pick(2), pick(3), pick(4),
                                          pick(5), pick(6), pick(7), pick(8)};
                      return total_loss(t, LossWeights{});
                  },
                  100, 1e-5, tol, 5)
                  .passed);
    }
}
