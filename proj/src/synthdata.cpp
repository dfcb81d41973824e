#include "uda/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "uda/rng.hpp"

namespace uda {

std::string_view modality_name(Modality m) { return m == Modality::source ? "source" : "target"; }

Modality parse_modality(std::string_view s) {
    if (s == "source") return Modality::source;
    if (s == "target") return Modality::target;
    throw ConfigError("unknown modality '" + std::string(s) + "'");
}

void PhantomConfig::validate() const {
    if (height < 16 || width < 16) {
        throw ConfigError("grid size must be at least 16x16, got " + std::to_string(height) + "x" +
                          std::to_string(width));
    }
    if (height % 4 != 0 || width % 4 != 0) throw ConfigError("grid size must be divisible by 4");
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (num_classes != 5) throw ConfigError("phantoms define exactly 5 classes (background + 4 structures)");
    if (min_class_pixels < 0 || max_attempts < 1) throw ConfigError("invalid phantom size constraints");
}

double Phantom::slice_scale(int z) const {
    const double mid = 0.5 * (depth - 1);
    const double u = (z - mid) / (0.5 * depth + 2.0);
    return 0.7 + 0.3 * std::sqrt(std::max(0.0, 1.0 - u * u));
}

namespace {

bool inside_ellipse(double dy, double dx, double ry, double rx, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
}

bool inside_structure(const Structure& st, double y, double x, double cy, double cx, double scale) {
    const double dy = y - cy, dx = x - cx;
    switch (st.kind) {
        case Structure::Kind::ellipse:
            return inside_ellipse(dy, dx, st.ry * scale, st.rx * scale, st.orientation);
        case Structure::Kind::annulus:
            return inside_ellipse(dy, dx, st.ry * scale, st.rx * scale, st.orientation) &&
                   !inside_ellipse(dy, dx, st.inner_ry * scale, st.inner_rx * scale, st.orientation);
        case Structure::Kind::capsule: {
            // Distance to the core segment along the orientation axis.
            const double c = std::cos(st.orientation), s = std::sin(st.orientation);
            const double half = st.ry * scale;
            const double t = std::clamp(c * dx + s * dy, -half, half);
            const double ex = dx - t * c, ey = dy - t * s;
            const double r = st.rx * scale;
            return ex * ex + ey * ey <= r * r;
        }
    }
    return false;
}

Phantom build_phantom(std::uint64_t seed, int attempt, const PhantomConfig& cfg) {
    std::mt19937_64 rng(derive_seed(seed, {0x50484E54ULL, static_cast<std::uint64_t>(attempt)}));
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    const double sy = cfg.height / 64.0, sx = cfg.width / 64.0;
    const double s = std::min(sy, sx);
    const double pi = std::numbers::pi;

    Phantom ph;
    ph.seed = seed;
    ph.attempt = attempt;
    ph.height = cfg.height;
    ph.width = cfg.width;
    ph.depth = cfg.depth;
    ph.body_cy = (32.0 + uni(-1.5, 1.5)) * sy;
    ph.body_cx = (32.0 + uni(-1.5, 1.5)) * sx;
    ph.body_ry = uni(25.0, 29.0) * sy;
    ph.body_rx = uni(24.0, 29.0) * sx;

    // Heart frame: LV centre, rotation and scale shared by all structures so
    // that position alone is a weak cue.
    const double k = uni(0.85, 1.15);
    const double theta = uni(-0.7, 0.7);
    const double lv_cy = (35.0 + uni(-6.0, 6.0)) * sy;
    const double lv_cx = (36.0 + uni(-6.0, 6.0)) * sx;
    auto place = [&](Structure& st, double dy, double dx) {
        const double ry = dy * k, rx = dx * k;
        st.cy = lv_cy + (std::cos(theta) * ry + std::sin(theta) * rx) * sy;
        st.cx = lv_cx + (-std::sin(theta) * ry + std::cos(theta) * rx) * sx;
    };
    const double lv_ry = uni(7.0, 9.0) * s * k, lv_rx = uni(6.0, 8.0) * s * k;
    const double lv_angle = uni(0.0, pi);
    const double wall = uni(3.0, 4.0) * s * k;
    auto drift = [&] { return uni(-0.15, 0.15) * s; };

    Structure la;
    la.kind = Structure::Kind::ellipse;
    la.label = kLaBlood;
    place(la, -(13.0 + uni(-2.0, 2.0)), -(11.0 + uni(-2.0, 2.0)));
    la.ry = uni(6.0, 8.0) * s * k;
    la.rx = uni(5.0, 7.0) * s * k;
    la.orientation = uni(0.0, pi);
    la.drift_y = drift();
    la.drift_x = drift();

    Structure aa;
    aa.kind = Structure::Kind::capsule;
    aa.label = kAscAorta;
    place(aa, -(15.0 + uni(-2.0, 2.0)), 5.0 + uni(-2.0, 2.0));
    aa.ry = uni(1.0, 3.5) * s * k;
    aa.rx = uni(3.8, 4.8) * s * k;
    aa.orientation = uni(0.0, pi);
    aa.drift_y = drift();
    aa.drift_x = drift();

    Structure myo;
    myo.kind = Structure::Kind::annulus;
    myo.label = kLvMyocardium;
    myo.cy = lv_cy;
    myo.cx = lv_cx;
    myo.inner_ry = lv_ry;
    myo.inner_rx = lv_rx;
    myo.ry = lv_ry + wall;
    myo.rx = lv_rx + wall;
    myo.orientation = lv_angle;
    myo.drift_y = drift();
    myo.drift_x = drift();

    Structure lv = myo;
    lv.kind = Structure::Kind::ellipse;
    lv.label = kLvBlood;
    lv.ry = lv_ry;
    lv.rx = lv_rx;
    lv.inner_ry = lv.inner_rx = 0;

    ph.structures = {la, aa, myo, lv};

    const int d = cfg.depth, h = cfg.height, w = cfg.width;
    ph.labels = LabelMap({d, h, w});
    ph.body = Tensor<std::uint8_t>({d, h, w});
    const double mid = 0.5 * (d - 1);
    for (int z = 0; z < d; ++z) {
        const double scale = ph.slice_scale(z);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const std::size_t idx = (static_cast<std::size_t>(z) * h + y) * w + x;
                ph.body[idx] = inside_ellipse(y - ph.body_cy, x - ph.body_cx, ph.body_ry, ph.body_rx, 0.0) ? 1 : 0;
                std::uint8_t lab = kBackground;
                for (const auto& st : ph.structures) {
                    const double cy = st.cy + st.drift_y * (z - mid);
                    const double cx = st.cx + st.drift_x * (z - mid);
                    if (inside_structure(st, y, x, cy, cx, scale)) lab = static_cast<std::uint8_t>(st.label);
                }
                ph.labels[idx] = lab;
                if (lab != kBackground) ph.body[idx] = 1;
            }
        }
    }
    return ph;
}

bool satisfies_size_invariant(const Phantom& ph, const PhantomConfig& cfg) {
    const std::size_t plane = static_cast<std::size_t>(ph.height) * ph.width;
    for (int z = 0; z < ph.depth; ++z) {
        std::array<int, 5> counts{};
        for (std::size_t i = 0; i < plane; ++i) ++counts[ph.labels[static_cast<std::size_t>(z) * plane + i]];
        for (int c = 1; c < cfg.num_classes; ++c) {
            if (counts[static_cast<std::size_t>(c)] < cfg.min_class_pixels) return false;
        }
    }
    return true;
}

// Bilinearly interpolated random field on a coarse grid, values ~ N(0, 1).
std::vector<double> smooth_field(int h, int w, double spacing, std::mt19937_64& rng) {
    const int gh = static_cast<int>(std::ceil((h - 1) / spacing)) + 2;
    const int gw = static_cast<int>(std::ceil((w - 1) / spacing)) + 2;
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> grid(static_cast<std::size_t>(gh) * gw);
    for (auto& v : grid) v = nd(rng);
    std::vector<double> out(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        const double gy = y / spacing;
        const int y0 = static_cast<int>(gy);
        const double fy = gy - y0;
        for (int x = 0; x < w; ++x) {
            const double gx = x / spacing;
            const int x0 = static_cast<int>(gx);
            const double fx = gx - x0;
            auto g = [&](int yy, int xx) { return grid[static_cast<std::size_t>(yy) * gw + xx]; };
            out[static_cast<std::size_t>(y) * w + x] = (1 - fy) * ((1 - fx) * g(y0, x0) + fx * g(y0, x0 + 1)) +
                                                       fy * ((1 - fx) * g(y0 + 1, x0) + fx * g(y0 + 1, x0 + 1));
        }
    }
    return out;
}

void gaussian_blur_2d(std::vector<double>& img, int h, int w, double sigma) {
    if (sigma <= 0) return;
    const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double ks = 0;
    for (int i = -r; i <= r; ++i) ks += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= ks;
    std::vector<double> tmp(img.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -r; i <= r; ++i) {
                const int xx = std::clamp(x + i, 0, w - 1);
                acc += k[static_cast<std::size_t>(i + r)] * img[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -r; i <= r; ++i) {
                const int yy = std::clamp(y + i, 0, h - 1);
                acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            img[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }
}

}  // namespace

Phantom make_phantom(std::uint64_t seed, const PhantomConfig& config) {
    config.validate();
    for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
        Phantom ph = build_phantom(seed, attempt, config);
        if (satisfies_size_invariant(ph, config)) return ph;
    }
    throw ConfigError("could not generate a phantom satisfying the minimum class size for seed " +
                      std::to_string(seed));
}

ModalityRendering ModalityRendering::source_default(int num_classes) {
    ModalityRendering r;
    r.modality = Modality::source;
    r.class_intensity = {0.0, 0.45, 0.80, 0.92, 0.66};
    r.class_intensity.resize(static_cast<std::size_t>(num_classes), 0.5);
    r.contrast = Contrast::identity;
    r.gamma = 1.0;
    r.noise_sigma = 0.03;
    r.bias_amplitude = 0.10;
    r.texture_scale = 3.0;
    r.texture_amplitude = 0.0;
    r.blur_sigma = 0.6;
    return r;
}

ModalityRendering ModalityRendering::target_default(int num_classes) {
    ModalityRendering r = source_default(num_classes);
    r.modality = Modality::target;
    r.contrast = Contrast::invert_gamma;
    r.gamma = 0.6;
    r.noise_sigma = 0.02;
    r.bias_amplitude = 0.0;
    r.texture_scale = 3.0;
    r.texture_amplitude = 0.05;
    r.blur_sigma = 0.8;
    return r;
}

double ModalityRendering::apply_contrast(double v) const {
    v = std::clamp(v, 0.0, 1.0);
    if (contrast == Contrast::invert_gamma) return std::pow(1.0 - v, gamma);
    return v;
}

Tensor<float> render(const Phantom& ph, const ModalityRendering& r, std::uint64_t noise_seed) {
    if (static_cast<int>(r.class_intensity.size()) < 5) throw ConfigError("rendering: intensity table too short");
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    const int d = ph.depth, h = ph.height, w = ph.width;

    // Per-scan jitter of the base table, then the modality contrast.
    std::vector<double> table(r.class_intensity.size() + 2);
    table[0] = r.air + r.intensity_jitter * nd(rng);
    table[1] = r.tissue + r.intensity_jitter * nd(rng);
    for (std::size_t c = 1; c < r.class_intensity.size(); ++c) {
        table[c + 1] = r.class_intensity[c] + r.intensity_jitter * nd(rng);
    }
    for (auto& v : table) v = r.apply_contrast(v);

    const auto bias0 = smooth_field(h, w, 24.0, rng);
    const auto bias1 = smooth_field(h, w, 24.0, rng);
    Tensor<float> out({d, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int z = 0; z < d; ++z) {
        std::vector<double> img(plane);
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t idx = static_cast<std::size_t>(z) * plane + i;
            const int lab = ph.labels[idx];
            img[i] =
                lab != kBackground ? table[static_cast<std::size_t>(lab) + 1] : (ph.body[idx] ? table[1] : table[0]);
        }
        gaussian_blur_2d(img, h, w, r.blur_sigma);
        const double t = d > 1 ? static_cast<double>(z) / (d - 1) : 0.0;
        std::vector<double> texture;
        if (r.texture_amplitude > 0) texture = smooth_field(h, w, std::max(1.0, r.texture_scale), rng);
        for (std::size_t i = 0; i < plane; ++i) {
            double v = img[i];
            if (r.bias_amplitude > 0) v *= 1.0 + r.bias_amplitude * ((1 - t) * bias0[i] + t * bias1[i]);
            if (!texture.empty()) v += r.texture_amplitude * texture[i];
            v += r.noise_sigma * nd(rng);
            out[static_cast<std::size_t>(z) * plane + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

Tensor<float> Volume::slice_image(int z) const {
    const std::size_t plane = static_cast<std::size_t>(height()) * width();
    Tensor<float> s({height(), width()});
    std::copy_n(image.data.begin() + static_cast<std::ptrdiff_t>(z * plane), plane, s.data.begin());
    return s;
}

LabelMap Volume::slice_labels(int z) const {
    const std::size_t plane = static_cast<std::size_t>(height()) * width();
    LabelMap s({height(), width()});
    std::copy_n(labels.data.begin() + static_cast<std::ptrdiff_t>(z * plane), plane, s.data.begin());
    return s;
}

Volume Volume::sub_volume(int z0, int count) const {
    if (z0 < 0 || count < 1 || z0 + count > depth()) throw ConfigError("sub_volume: slice range out of bounds");
    const std::size_t plane = static_cast<std::size_t>(height()) * width();
    Volume v;
    v.modality = modality;
    v.scan_id = scan_id + "_z" + std::to_string(z0) + "-" + std::to_string(z0 + count - 1);
    v.seed = seed;
    v.image = Tensor<float>({count, height(), width()});
    v.labels = LabelMap({count, height(), width()});
    const auto off = static_cast<std::ptrdiff_t>(z0 * plane);
    std::copy_n(image.data.begin() + off, count * plane, v.image.data.begin());
    std::copy_n(labels.data.begin() + off, count * plane, v.labels.data.begin());
    return v;
}

void Volume::validate() const {
    if (image.rank() != 3 || labels.rank() != 3) throw ShapeError("volume " + scan_id + ": expected rank-3 arrays");
    require_same_shape(image.shape, labels.shape, ("volume " + scan_id).c_str());
}

std::string DatasetManifest::to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries) os << k << '=' << v << '\n';
    return os.str();
}

namespace {

std::string rendering_summary(const ModalityRendering& r) {
    std::ostringstream os;
    os << "air:" << r.air << ";tissue:" << r.tissue << ";classes:";
    for (std::size_t i = 1; i < r.class_intensity.size(); ++i) os << (i > 1 ? "," : "") << r.class_intensity[i];
    os << ";contrast:" << (r.contrast == ModalityRendering::Contrast::identity ? "identity" : "invert_gamma")
       << ";gamma:" << r.gamma << ";noise:" << r.noise_sigma << ";bias:" << r.bias_amplitude
       << ";texture_scale:" << r.texture_scale << ";texture_amplitude:" << r.texture_amplitude
       << ";blur:" << r.blur_sigma << ";jitter:" << r.intensity_jitter;
    return os.str();
}

}  // namespace

Dataset generate_dataset(std::uint64_t seed, int n_source, int n_target, const DatasetConfig& config) {
    if (n_source < 1 || n_target < 1) throw ConfigError("generate_dataset: n_source and n_target must be >= 1");
    config.phantom.validate();

    Dataset ds;
    std::set<std::uint64_t> used;
    auto fresh_seed = [&](std::uint64_t tag, int index) {
        std::uint64_t s = derive_seed(seed, {tag, static_cast<std::uint64_t>(index)});
        while (!used.insert(s).second) s = splitmix64(s);
        return s;
    };
    auto make = [&](Modality m, int index, const ModalityRendering& rendering) {
        const std::uint64_t tag = m == Modality::source ? 0x53524300ULL : 0x54475400ULL;
        Volume v;
        v.modality = m;
        v.seed = fresh_seed(tag, index);
        char id[32];
        std::snprintf(id, sizeof(id), "%s_%03d", m == Modality::source ? "src" : "tgt", index);
        v.scan_id = id;
        const Phantom ph = make_phantom(v.seed, config.phantom);
        v.labels = ph.labels;
        v.image = render(ph, rendering, derive_seed(v.seed, {0x4E4F495345ULL}));
        return v;
    };
    for (int i = 0; i < n_source; ++i) ds.source.push_back(make(Modality::source, i, config.source));
    for (int i = 0; i < n_target; ++i) ds.target.push_back(make(Modality::target, i, config.target));

    auto& m = ds.manifest;
    m.add("format", "uda-dataset-1");
    m.add("seed", std::to_string(seed));
    m.add("n_source", std::to_string(n_source));
    m.add("n_target", std::to_string(n_target));
    m.add("grid", std::to_string(config.phantom.height) + "x" + std::to_string(config.phantom.width));
    m.add("depth", std::to_string(config.phantom.depth));
    m.add("num_classes", std::to_string(config.phantom.num_classes));
    m.add("min_class_pixels", std::to_string(config.phantom.min_class_pixels));
    m.add("source_rendering", rendering_summary(config.source));
    m.add("target_rendering", rendering_summary(config.target));
    for (const auto& v : ds.source) m.add("volume_seed." + v.scan_id, std::to_string(v.seed));
    for (const auto& v : ds.target) m.add("volume_seed." + v.scan_id, std::to_string(v.seed));
    return ds;
}

AugmentationSpec AugmentationSpec::identity() {
    AugmentationSpec s;
    s.rotation_deg = 0;
    s.translation_px = 0;
    s.shear = 0;
    s.elastic_sigma = 0;
    s.gamma_lo = s.gamma_hi = 1.0;
    s.normalization = IntensityNorm::none;
    return s;
}

void AugmentationSpec::validate() const {
    if (rotation_deg < 0 || translation_px < 0 || shear < 0 || elastic_sigma < 0) {
        throw ConfigError("augmentation ranges must be >= 0");
    }
    if (elastic_spacing < 1) throw ConfigError("elastic_spacing must be >= 1");
    if (!(gamma_lo > 0) || gamma_hi < gamma_lo) throw ConfigError("gamma range must satisfy 0 < lo <= hi");
}

AugmentParams sample_augment(const AugmentationSpec& spec, int height, int width, std::mt19937_64& rng) {
    spec.validate();
    auto uni = [&](double lo, double hi) { return hi > lo ? std::uniform_real_distribution<double>(lo, hi)(rng) : lo; };
    AugmentParams p;
    p.angle_rad = uni(-spec.rotation_deg, spec.rotation_deg) * std::numbers::pi / 180.0;
    p.tx = uni(-spec.translation_px, spec.translation_px);
    p.ty = uni(-spec.translation_px, spec.translation_px);
    p.shear = uni(-spec.shear, spec.shear);
    // Log-uniform so that gamma and 1/gamma are equally likely when the range is symmetric.
    p.gamma = std::exp(uni(std::log(spec.gamma_lo), std::log(spec.gamma_hi)));
    p.spacing = spec.elastic_spacing;
    p.grid_h = (height - 1) / spec.elastic_spacing + 2;
    p.grid_w = (width - 1) / spec.elastic_spacing + 2;
    const std::size_t n = static_cast<std::size_t>(p.grid_h) * p.grid_w;
    p.elastic_dy.assign(n, 0.0);
    p.elastic_dx.assign(n, 0.0);
    if (spec.elastic_sigma > 0) {
        std::normal_distribution<double> nd(0.0, spec.elastic_sigma);
        std::vector<double> ry(n), rx(n);
        for (std::size_t i = 0; i < n; ++i) {
            ry[i] = nd(rng);
            rx[i] = nd(rng);
        }
        // [1 2 1] smoothing across the control grid, renormalized to keep sigma.
        auto smooth = [&](const std::vector<double>& in, std::vector<double>& out) {
            for (int y = 0; y < p.grid_h; ++y) {
                for (int x = 0; x < p.grid_w; ++x) {
                    double acc = 0, wsum = 0, w2 = 0;
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = y + dy, xx = x + dx;
                            if (yy < 0 || yy >= p.grid_h || xx < 0 || xx >= p.grid_w) continue;
                            const double wgt = (2 - std::abs(dy)) * (2 - std::abs(dx));
                            acc += wgt * in[static_cast<std::size_t>(yy) * p.grid_w + xx];
                            wsum += wgt;
                            w2 += wgt * wgt;
                        }
                    }
                    out[static_cast<std::size_t>(y) * p.grid_w + x] = acc / std::sqrt(w2) * (wsum > 0 ? 1.0 : 0.0);
                }
            }
        };
        smooth(ry, p.elastic_dy);
        smooth(rx, p.elastic_dx);
    }
    return p;
}

std::pair<Tensor<float>, LabelMap> apply_augment(const Tensor<float>& image, const LabelMap& label,
                                                 const AugmentParams& p, const AugmentationSpec& spec) {
    if (image.rank() != 2 || label.rank() != 2) throw ShapeError("augment: expected (H, W) image and label");
    require_same_shape(image.shape, label.shape, "augment");
    const int h = image.dim(0), w = image.dim(1);
    const double cy = 0.5 * (h - 1), cx = 0.5 * (w - 1);

    // Inverse of A = R * S, where S = [[1, shear], [0, 1]].
    const double c = std::cos(p.angle_rad), s = std::sin(p.angle_rad);
    const double a00 = c, a01 = c * p.shear - s, a10 = s, a11 = s * p.shear + c;
    const double det = a00 * a11 - a01 * a10;
    const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;

    const bool has_elastic = std::any_of(p.elastic_dx.begin(), p.elastic_dx.end(), [](double v) { return v != 0; }) ||
                             std::any_of(p.elastic_dy.begin(), p.elastic_dy.end(), [](double v) { return v != 0; });
    auto elastic = [&](const std::vector<double>& g, double y, double x) {
        const double gy = y / p.spacing, gx = x / p.spacing;
        const int y0 = std::min(static_cast<int>(gy), p.grid_h - 2);
        const int x0 = std::min(static_cast<int>(gx), p.grid_w - 2);
        const double fy = gy - y0, fx = gx - x0;
        auto at = [&](int yy, int xx) { return g[static_cast<std::size_t>(yy) * p.grid_w + xx]; };
        return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
               fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
    };

    Tensor<float> out_img({h, w});
    LabelMap out_lbl({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double qx = x - cx - p.tx, qy = y - cy - p.ty;
            if (has_elastic) {
                qx -= elastic(p.elastic_dx, y, x);
                qy -= elastic(p.elastic_dy, y, x);
            }
            const double sx = std::clamp(cx + i00 * qx + i01 * qy, 0.0, w - 1.0);
            const double sy = std::clamp(cy + i10 * qx + i11 * qy, 0.0, h - 1.0);

            const int x0 = std::min(static_cast<int>(sx), w - 1), y0 = std::min(static_cast<int>(sy), h - 1);
            const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
            const double fx = sx - x0, fy = sy - y0;
            const double v = (1 - fy) * ((1 - fx) * image[static_cast<std::size_t>(y0) * w + x0] +
                                         fx * image[static_cast<std::size_t>(y0) * w + x1]) +
                             fy * ((1 - fx) * image[static_cast<std::size_t>(y1) * w + x0] +
                                   fx * image[static_cast<std::size_t>(y1) * w + x1]);
            out_img[static_cast<std::size_t>(y) * w + x] = static_cast<float>(v);
            const int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, w - 1);
            const int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, h - 1);
            out_lbl[static_cast<std::size_t>(y) * w + x] = label[static_cast<std::size_t>(ny) * w + nx];
        }
    }

    if (p.gamma != 1.0) {
        for (auto& v : out_img.data)
            v = static_cast<float>(std::pow(std::clamp(static_cast<double>(v), 0.0, 1.0), p.gamma));
    }
    if (spec.normalization == IntensityNorm::minmax) {
        const auto [mn, mx] = std::minmax_element(out_img.data.begin(), out_img.data.end());
        const float lo = *mn, range = *mx - *mn;
        if (range > 1e-6f) {
            for (auto& v : out_img.data) v = (v - lo) / range;
        }
    }
    for (auto& v : out_img.data) v = std::clamp(v, 0.0f, 1.0f);
    return {std::move(out_img), std::move(out_lbl)};
}

std::pair<Tensor<float>, LabelMap> augment(const Tensor<float>& image, const LabelMap& label,
                                           const AugmentationSpec& spec, std::mt19937_64& rng) {
    if (image.rank() != 2) throw ShapeError("augment: expected (H, W) image");
    return apply_augment(image, label, sample_augment(spec, image.dim(0), image.dim(1), rng), spec);
}

std::vector<std::vector<SliceRef>> plan_epoch(const std::vector<Volume>& volumes, int batch_size, std::uint64_t seed,
                                              int epoch) {
    if (volumes.empty()) throw ConfigError("iterate_batches: empty volume list");
    if (batch_size < 1) throw ConfigError("iterate_batches: batch_size must be >= 1");
    std::vector<SliceRef> all;
    for (int v = 0; v < static_cast<int>(volumes.size()); ++v) {
        for (int z = 0; z < volumes[static_cast<std::size_t>(v)].depth(); ++z) all.push_back({v, z});
    }
    std::mt19937_64 rng(derive_seed(seed, {0x4F52444552ULL, static_cast<std::uint64_t>(epoch)}));
    // Fisher-Yates with an explicit draw keeps the order independent of the
    // standard library's shuffle implementation.
    for (std::size_t i = all.size(); i > 1; --i) {
        const std::size_t j = rng() % i;
        std::swap(all[i - 1], all[j]);
    }
    std::vector<std::vector<SliceRef>> batches;
    for (std::size_t i = 0; i < all.size(); i += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(all.size(), i + static_cast<std::size_t>(batch_size));
        batches.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(i),
                             all.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

Batch make_batch(const std::vector<Volume>& volumes, const std::vector<SliceRef>& refs, const AugmentationSpec* spec,
                 std::uint64_t seed, int epoch) {
    if (refs.empty()) throw ConfigError("make_batch: empty batch");
    const auto& first = volumes.at(static_cast<std::size_t>(refs[0].volume));
    const int h = first.height(), w = first.width();
    const int n = static_cast<int>(refs.size());
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Batch b;
    b.images = Tensor<float>({n, 1, h, w});
    b.labels = LabelMap({n, h, w});
    b.refs = refs;
    for (int i = 0; i < n; ++i) {
        const auto& ref = refs[static_cast<std::size_t>(i)];
        const auto& vol = volumes.at(static_cast<std::size_t>(ref.volume));
        if (vol.height() != h || vol.width() != w) throw ShapeError("make_batch: volumes differ in slice size");
        auto img = vol.slice_image(ref.slice);
        auto lbl = vol.slice_labels(ref.slice);
        if (spec) {
            std::mt19937_64 rng(derive_seed(seed, {hash_string(vol.scan_id), static_cast<std::uint64_t>(ref.slice),
                                                   static_cast<std::uint64_t>(epoch)}));
            std::tie(img, lbl) = augment(img, lbl, *spec, rng);
        }
        std::copy(img.data.begin(), img.data.end(), b.images.data.begin() + static_cast<std::ptrdiff_t>(i * plane));
        std::copy(lbl.data.begin(), lbl.data.end(), b.labels.data.begin() + static_cast<std::ptrdiff_t>(i * plane));
    }
    return b;
}

std::vector<Batch> iterate_batches(const std::vector<Volume>& volumes, int batch_size, std::uint64_t seed, int epoch,
                                   const AugmentationSpec* spec) {
    std::vector<Batch> out;
    for (const auto& refs : plan_epoch(volumes, batch_size, seed, epoch)) {
        out.push_back(make_batch(volumes, refs, spec, seed, epoch));
    }
    return out;
}

double histogram_l1(const std::vector<float>& a, const std::vector<float>& b, int bins) {
    auto hist = [bins](const std::vector<float>& v) {
        std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
        for (float x : v) {
            const int i = std::clamp(static_cast<int>(x * bins), 0, bins - 1);
            h[static_cast<std::size_t>(i)] += 1.0;
        }
        for (auto& c : h) c /= std::max<std::size_t>(1, v.size());
        return h;
    };
    const auto ha = hist(a), hb = hist(b);
    double d = 0;
    for (int i = 0; i < bins; ++i) d += std::abs(ha[static_cast<std::size_t>(i)] - hb[static_cast<std::size_t>(i)]);
    return d;
}

}  // namespace uda
