#pragma once

// Brute-force reference implementations shared by unit and acceptance tests.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "uda/metrics.hpp"

namespace oracle {

using uda::Mask3;

// Standard normal quantile: Acklam's rational approximation refined by one
// Halley step on erfc.
inline double normal_quantile(double p) {
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,  -2.759285104469687e+02,
                               1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                               6.680131188771972e+01, -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                               -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                               3.754408661907416e+00};
    const double lo = 0.02425;
    double x;
    if (p < lo) {
        const double q = std::sqrt(-2 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    } else if (p > 1 - lo) {
        const double q = std::sqrt(-2 * std::log(1 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    } else {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
    }
    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
    return x - u / (1 + x * u / 2);
}

// Monte-Carlo KL(N(mu, s^2) || N(0, 1)) as E_q[log q(x) - log p(x)].
// Stratified: one uniform draw per stratum of [0, 1/2), each mapped through
// the normal quantile and paired with its antithetic partner.
inline double mc_kl(double mu, double log_var, int n, std::mt19937_64& rng) {
    const double s = std::exp(0.5 * log_var);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto term = [&](double e) {
        const double x = mu + s * e;
        return -0.5 * e * e - std::log(s) + 0.5 * x * x;
    };
    const int m = n / 2;
    double acc = 0.0;
    for (int i = 0; i < m; ++i) {
        const double e = normal_quantile(0.5 * (i + uni(rng)) / m);
        acc += term(e) + term(-e);
    }
    return acc / (2.0 * m);
}

inline double dice(const Mask3& p, const Mask3& g) {
    double a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        a += p[i];
        b += g[i];
        both += p[i] && g[i];
    }
    return a + b == 0 ? 1.0 : 2 * both / (a + b);
}

// Repeated relaxation labeling: each voxel takes the minimum label of its
// neighbours until nothing changes. Labels are seed raster indices, so the
// label of a component is the raster index of its first voxel.
inline std::vector<long> relax_labels(const Mask3& m, int connectivity) {
    const int D = m.dim(0), H = m.dim(1), W = m.dim(2);
    std::vector<long> lab(m.data.size(), -1);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        if (m[i]) lab[i] = static_cast<long>(i);
    }
    bool changed = true;
    while (changed) {
        changed = false;
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const std::size_t i = (static_cast<std::size_t>(z) * H + y) * W + x;
                    if (!m[i]) continue;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                const int md = std::abs(dz) + std::abs(dy) + std::abs(dx);
                                if (md == 0 || (connectivity == 6 && md > 1)) continue;
                                const int zz = z + dz, yy = y + dy, xx = x + dx;
                                if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                                const std::size_t j = (static_cast<std::size_t>(zz) * H + yy) * W + xx;
                                if (m[j] && lab[j] < lab[i]) {
                                    lab[i] = lab[j];
                                    changed = true;
                                }
                            }
                }
    }
    return lab;
}

inline Mask3 largest_component(const Mask3& m, int connectivity) {
    const auto lab = relax_labels(m, connectivity);
    std::vector<long> count(m.data.size(), 0);
    for (long l : lab) {
        if (l >= 0) ++count[static_cast<std::size_t>(l)];
    }
    long best = -1, best_n = 0;
    for (std::size_t i = 0; i < count.size(); ++i) {
        if (count[i] > best_n) {
            best_n = count[i];
            best = static_cast<long>(i);
        }
    }
    Mask3 out(m.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out[i] = best >= 0 && lab[i] == best;
    return out;
}

struct P3 {
    int z, y, x;
};

inline std::vector<P3> surface(const Mask3& m) {
    const int D = m.dim(0), H = m.dim(1), W = m.dim(2);
    auto on = [&](int z, int y, int x) {
        return z >= 0 && z < D && y >= 0 && y < H && x >= 0 && x < W &&
               m[(static_cast<std::size_t>(z) * H + y) * W + x];
    };
    std::vector<P3> s;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!on(z, y, x)) continue;
                if (!on(z - 1, y, x) || !on(z + 1, y, x) || !on(z, y - 1, x) || !on(z, y + 1, x) || !on(z, y, x - 1) ||
                    !on(z, y, x + 1))
                    s.push_back({z, y, x});
            }
    return s;
}

// All-pairs nearest surface distances.
inline double assd(const Mask3& p, const Mask3& g, const uda::Spacing& sp = {1, 1, 1}) {
    const auto a = surface(p), b = surface(g);
    if (a.empty() || b.empty()) return std::numeric_limits<double>::quiet_NaN();
    auto nearest = [&](const P3& q, const std::vector<P3>& set) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& r : set) {
            const double dz = (q.z - r.z) * sp[0], dy = (q.y - r.y) * sp[1], dx = (q.x - r.x) * sp[2];
            best = std::min(best, dz * dz + dy * dy + dx * dx);
        }
        return std::sqrt(best);
    };
    double total = 0;
    for (const auto& q : a) total += nearest(q, b);
    for (const auto& q : b) total += nearest(q, a);
    return total / static_cast<double>(a.size() + b.size());
}

// Random blobby mask: union of a few random boxes plus salt noise.
inline Mask3 random_mask(int D, int H, int W, std::mt19937_64& rng, double salt = 0.02) {
    Mask3 m({D, H, W});
    std::uniform_int_distribution<int> nbox(0, 3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int boxes = nbox(rng);
    for (int b = 0; b < boxes; ++b) {
        const int z0 = static_cast<int>(u(rng) * D), y0 = static_cast<int>(u(rng) * H),
                  x0 = static_cast<int>(u(rng) * W);
        const int dz = 1 + static_cast<int>(u(rng) * D / 2), dy = 1 + static_cast<int>(u(rng) * H / 2),
                  dx = 1 + static_cast<int>(u(rng) * W / 2);
        for (int z = z0; z < std::min(D, z0 + dz); ++z)
            for (int y = y0; y < std::min(H, y0 + dy); ++y)
                for (int x = x0; x < std::min(W, x0 + dx); ++x) m[(static_cast<std::size_t>(z) * H + y) * W + x] = 1;
    }
    for (auto& v : m.data) {
        if (u(rng) < salt) v = 1;
    }
    return m;
}

}  // namespace oracle
