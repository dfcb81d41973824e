#include "uda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace uda {

namespace {

void require_volume(const Mask3& m, const char* what) {
    if (m.rank() != 3) throw ShapeError(std::string(what) + ": expected a (D, H, W) volume, got " + shape_str(m.shape));
}

// Exact squared distance transform along one line with sample spacing `s`
// (lower envelope of parabolas).
void edt_line(const double* f, double* d, int n, double s, std::vector<int>& v, std::vector<double>& z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    int k = 0;
    int first = -1;
    for (int q = 0; q < n; ++q) {
        if (std::isfinite(f[q])) {
            first = q;
            break;
        }
    }
    if (first < 0) {
        std::fill(d, d + n, inf);
        return;
    }
    v[0] = first;
    z[0] = -inf;
    z[1] = inf;
    for (int q = first + 1; q < n; ++q) {
        if (!std::isfinite(f[q])) continue;
        const double xq = q * s;
        double sv;
        while (true) {
            const double xv = v[static_cast<std::size_t>(k)] * s;
            sv = ((f[q] + xq * xq) - (f[v[static_cast<std::size_t>(k)]] + xv * xv)) / (2 * xq - 2 * xv);
            if (sv <= z[static_cast<std::size_t>(k)]) {
                --k;
                if (k < 0) break;
            } else {
                break;
            }
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = k == 0 ? -inf : sv;
        z[static_cast<std::size_t>(k) + 1] = inf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        const double xq = q * s;
        while (z[static_cast<std::size_t>(k) + 1] < xq) ++k;
        const double xv = v[static_cast<std::size_t>(k)] * s;
        d[q] = (xq - xv) * (xq - xv) + f[v[static_cast<std::size_t>(k)]];
    }
}

// Squared Euclidean distance from every voxel to the nearest seed voxel.
std::vector<double> squared_edt(const std::vector<std::size_t>& seeds, int D, int H, int W, const Spacing& sp) {
    const std::size_t n = static_cast<std::size_t>(D) * H * W;
    std::vector<double> g(n, std::numeric_limits<double>::infinity());
    for (auto i : seeds) g[i] = 0.0;
    const int maxn = std::max({D, H, W});
    std::vector<double> f(static_cast<std::size_t>(maxn)), d(static_cast<std::size_t>(maxn));
    std::vector<int> v(static_cast<std::size_t>(maxn));
    std::vector<double> z(static_cast<std::size_t>(maxn) + 1);
    auto pass = [&](int len, double s, auto index) {
        for (int i = 0; i < len; ++i) f[static_cast<std::size_t>(i)] = g[index(i)];
        edt_line(f.data(), d.data(), len, s, v, z);
        for (int i = 0; i < len; ++i) g[index(i)] = d[static_cast<std::size_t>(i)];
    };
    for (int zz = 0; zz < D; ++zz)
        for (int y = 0; y < H; ++y)
            pass(W, sp[2], [&](int x) { return (static_cast<std::size_t>(zz) * H + y) * W + x; });
    for (int zz = 0; zz < D; ++zz)
        for (int x = 0; x < W; ++x)
            pass(H, sp[1], [&](int y) { return (static_cast<std::size_t>(zz) * H + y) * W + x; });
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            pass(D, sp[0], [&](int zz) { return (static_cast<std::size_t>(zz) * H + y) * W + x; });
    return g;
}

}  // namespace

double dice_3d(const Mask3& pred, const Mask3& gt) {
    require_same_shape(pred.shape, gt.shape, "dice_3d");
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool a = pred[i] != 0, b = gt[i] != 0;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

Mask3 largest_component(const Mask3& mask, int connectivity) {
    require_volume(mask, "largest_component");
    if (connectivity != 6 && connectivity != 26) throw ConfigError("connectivity must be 6 or 26");
    const int D = mask.dim(0), H = mask.dim(1), W = mask.dim(2);
    std::vector<std::array<int, 3>> offsets;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int m = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (m == 0 || (connectivity == 6 && m != 1)) continue;
                offsets.push_back({dz, dy, dx});
            }

    std::vector<int> comp(mask.data.size(), -1);
    std::vector<std::size_t> stack;
    int best = -1;
    std::size_t best_size = 0;
    int next = 0;
    for (std::size_t start = 0; start < mask.data.size(); ++start) {
        if (!mask[start] || comp[start] >= 0) continue;
        const int id = next++;
        std::size_t size = 0;
        comp[start] = id;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            ++size;
            const int x = static_cast<int>(i % W), y = static_cast<int>((i / W) % H), z = static_cast<int>(i / (W * H));
            for (const auto& o : offsets) {
                const int zz = z + o[0], yy = y + o[1], xx = x + o[2];
                if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                const std::size_t j = (static_cast<std::size_t>(zz) * H + yy) * W + xx;
                if (mask[j] && comp[j] < 0) {
                    comp[j] = id;
                    stack.push_back(j);
                }
            }
        }
        // Components are discovered in raster order of their first voxel, so a
        // strict comparison keeps the earliest on ties.
        if (size > best_size) {
            best_size = size;
            best = id;
        }
    }
    Mask3 out(mask.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out[i] = (best >= 0 && comp[i] == best) ? 1 : 0;
    return out;
}

std::vector<std::size_t> surface_voxels(const Mask3& mask) {
    require_volume(mask, "surface_voxels");
    const int D = mask.dim(0), H = mask.dim(1), W = mask.dim(2);
    std::vector<std::size_t> out;
    auto on = [&](int z, int y, int x) {
        if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
        return mask[(static_cast<std::size_t>(z) * H + y) * W + x] != 0;
    };
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!on(z, y, x)) continue;
                if (!on(z - 1, y, x) || !on(z + 1, y, x) || !on(z, y - 1, x) || !on(z, y + 1, x) || !on(z, y, x - 1) ||
                    !on(z, y, x + 1)) {
                    out.push_back((static_cast<std::size_t>(z) * H + y) * W + x);
                }
            }
    return out;
}

double assd(const Mask3& pred, const Mask3& gt, const Spacing& spacing) {
    require_same_shape(pred.shape, gt.shape, "assd");
    require_volume(pred, "assd");
    const auto sp = surface_voxels(pred), sg = surface_voxels(gt);
    if (sp.empty() || sg.empty()) return kAssdUndefined;
    const int D = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
    const auto dist_to_g = squared_edt(sg, D, H, W, spacing);
    const auto dist_to_p = squared_edt(sp, D, H, W, spacing);
    double total = 0.0;
    for (auto i : sp) total += std::sqrt(dist_to_g[i]);
    for (auto i : sg) total += std::sqrt(dist_to_p[i]);
    return total / static_cast<double>(sp.size() + sg.size());
}

Mask3 binarize(const Tensor<std::uint8_t>& labels, int cls) {
    Mask3 out(labels.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out[i] = labels[i] == cls ? 1 : 0;
    return out;
}

Aggregate aggregate(const std::vector<double>& values) {
    Aggregate a;
    double sum = 0;
    for (double v : values) {
        if (std::isnan(v)) continue;
        sum += v;
        ++a.count;
    }
    if (a.count == 0) {
        a.mean = a.std = kAssdUndefined;
        return a;
    }
    a.mean = sum / a.count;
    double ss = 0;
    for (double v : values) {
        if (!std::isnan(v)) ss += (v - a.mean) * (v - a.mean);
    }
    a.std = std::sqrt(ss / a.count);
    return a;
}

std::string class_name(int cls) {
    switch (cls) {
        case 0:
            return "background";
        case 1:
            return "LV-M";
        case 2:
            return "LA-B";
        case 3:
            return "LV-B";
        case 4:
            return "A-A";
        default:
            return "class" + std::to_string(cls);
    }
}

MetricsReport evaluate_scans(const std::vector<Tensor<std::uint8_t>>& preds,
                             const std::vector<Tensor<std::uint8_t>>& gts, const std::vector<std::string>& scan_ids,
                             const EvalOptions& opt) {
    if (preds.size() != gts.size() || preds.size() != scan_ids.size()) {
        throw ShapeError("evaluate_scans: prediction, ground truth and id counts differ");
    }
    if (opt.num_classes < 2) throw ConfigError("evaluate_scans: need at least 2 classes");
    MetricsReport r;
    r.num_classes = opt.num_classes;
    const int fg = opt.num_classes - 1;
    std::vector<std::vector<double>> dice_by_class(static_cast<std::size_t>(fg)),
        assd_by_class(static_cast<std::size_t>(fg));
    std::vector<double> dice_overall, assd_overall;
    for (std::size_t s = 0; s < preds.size(); ++s) {
        require_same_shape(preds[s].shape, gts[s].shape, ("evaluate_scans[" + scan_ids[s] + "]").c_str());
        double dsum = 0, asum = 0;
        int adef = 0;
        for (int c = 1; c <= fg; ++c) {
            Mask3 p = binarize(preds[s], c);
            if (opt.filtering == Filtering::pred) p = largest_component(p, opt.connectivity);
            const Mask3 g = binarize(gts[s], c);
            ScanClassResult e{scan_ids[s], c, dice_3d(p, g), assd(p, g, opt.spacing)};
            dice_by_class[static_cast<std::size_t>(c - 1)].push_back(e.dice);
            assd_by_class[static_cast<std::size_t>(c - 1)].push_back(e.assd);
            dsum += e.dice;
            if (std::isnan(e.assd)) {
                ++r.assd_undefined;
            } else {
                asum += e.assd;
                ++adef;
            }
            r.entries.push_back(std::move(e));
        }
        dice_overall.push_back(dsum / fg);
        assd_overall.push_back(adef ? asum / adef : kAssdUndefined);
    }
    for (int c = 0; c < fg; ++c) {
        r.dice.push_back(aggregate(dice_by_class[static_cast<std::size_t>(c)]));
        r.assd.push_back(aggregate(assd_by_class[static_cast<std::size_t>(c)]));
    }
    r.dice.push_back(aggregate(dice_overall));
    r.assd.push_back(aggregate(assd_overall));
    return r;
}

namespace {

std::string fmt(double v) {
    if (std::isnan(v)) return "undefined";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string fmt_ms(const Aggregate& a, double scale, int digits) {
    if (a.count == 0) return "undefined";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f (%.*f)", digits, a.mean * scale, digits, a.std * scale);
    return buf;
}

}  // namespace

std::string MetricsReport::per_scan_csv() const {
    std::ostringstream os;
    os << "scan_id,class,dice,assd\n";
    for (const auto& e : entries)
        os << e.scan_id << ',' << class_name(e.cls) << ',' << fmt(e.dice) << ',' << fmt(e.assd) << '\n';
    return os.str();
}

std::string MetricsReport::summary_csv() const {
    std::ostringstream os;
    os << "metric,statistic";
    for (int c = 1; c < num_classes; ++c) os << ',' << class_name(c);
    os << ",mean\n";
    auto row = [&](const char* metric, const std::vector<Aggregate>& a) {
        os << metric << ",mean";
        for (const auto& x : a) os << ',' << fmt(x.mean);
        os << '\n' << metric << ",std";
        for (const auto& x : a) os << ',' << fmt(x.std);
        os << '\n' << metric << ",count";
        for (const auto& x : a) os << ',' << x.count;
        os << '\n';
    };
    row("dice", dice);
    row("assd", assd);
    return os.str();
}

std::string MetricsReport::table() const {
    std::ostringstream os;
    os << "metric";
    for (int c = 1; c < num_classes; ++c) os << " | " << class_name(c);
    os << " | mean\n";
    os << "Dice (%)";
    for (const auto& a : dice) os << " | " << fmt_ms(a, 100.0, 2);
    os << "\nASSD (vox)";
    for (const auto& a : assd) os << " | " << fmt_ms(a, 1.0, 2);
    os << '\n';
    if (assd_undefined > 0)
        os << "note: " << assd_undefined << " scan/class ASSD values undefined (empty surface), excluded\n";
    return os.str();
}

}  // namespace uda
