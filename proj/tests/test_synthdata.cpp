#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "uda/synthdata.hpp"

using namespace uda;

namespace {

Volume small_volume(std::uint64_t seed, const std::string& id, int depth = 16) {
    PhantomConfig pc;
    pc.depth = depth;
    const Phantom ph = make_phantom(seed, pc);
    Volume v;
    v.image = render(ph, ModalityRendering::source_default(), seed + 1);
    v.labels = ph.labels;
    v.scan_id = id;
    v.seed = seed;
    return v;
}

std::set<int> classes_in(const LabelMap& y) { return {y.data.begin(), y.data.end()}; }

}  // namespace

TEST_CASE("generate_dataset cardinality, disjoint seeds and determinism") {
    const DatasetConfig cfg;
    const Dataset a = generate_dataset(7, 16, 16, cfg);
    REQUIRE(a.source.size() == 16);
    REQUIRE(a.target.size() == 16);
    std::set<std::uint64_t> src, tgt;
    for (const auto& v : a.source) {
        CHECK(v.modality == Modality::source);
        src.insert(v.seed);
        v.validate();
    }
    for (const auto& v : a.target) {
        CHECK(v.modality == Modality::target);
        tgt.insert(v.seed);
    }
    CHECK(src.size() == 16);
    CHECK(tgt.size() == 16);
    for (auto s : src) CHECK(tgt.count(s) == 0);

    const Dataset b = generate_dataset(7, 16, 16, cfg);
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(a.source[i].image.data == b.source[i].image.data);
        CHECK(a.source[i].labels.data == b.source[i].labels.data);
        CHECK(a.target[i].image.data == b.target[i].image.data);
    }
    CHECK(a.manifest.to_text() == b.manifest.to_text());
    CHECK(a.manifest.to_text().find("volume_seed.src_000") != std::string::npos);

    // Another seed moves at least one structure centre.
    const Dataset c = generate_dataset(8, 1, 1, cfg);
    const Phantom p7 = make_phantom(a.source[0].seed, cfg.phantom);
    const Phantom p8 = make_phantom(c.source[0].seed, cfg.phantom);
    bool moved = false;
    for (std::size_t i = 0; i < p7.structures.size(); ++i)
        moved = moved || p7.structures[i].cy != p8.structures[i].cy || p7.structures[i].cx != p8.structures[i].cx;
    CHECK(moved);
    CHECK(a.source[0].image.data != c.source[0].image.data);
}

TEST_CASE("generate_dataset argument errors") {
    DatasetConfig cfg;
    CHECK_THROWS_AS(generate_dataset(7, 0, 1, cfg), ConfigError);
    cfg.phantom.height = 12;
    cfg.phantom.width = 12;
    CHECK_THROWS_AS(generate_dataset(7, 1, 1, cfg), ConfigError);
    CHECK_THROWS_AS(make_phantom(1, cfg.phantom), ConfigError);
}

TEST_CASE("phantoms carry every class above the size floor") {
    const PhantomConfig pc;
    for (std::uint64_t s = 0; s < 40; ++s) {
        const Phantom ph = make_phantom(s, pc);
        std::vector<int> counts(5, 0);
        const int mid = pc.depth / 2;
        const std::size_t plane = static_cast<std::size_t>(pc.height) * pc.width;
        for (std::size_t i = 0; i < plane; ++i) ++counts[ph.labels[static_cast<std::size_t>(mid) * plane + i]];
        for (int c = 1; c < 5; ++c) CHECK(counts[static_cast<std::size_t>(c)] >= pc.min_class_pixels);
    }
}

TEST_CASE("source and target renderings share geometry and differ in appearance") {
    const PhantomConfig pc;
    std::vector<float> src, tgt;
    for (std::uint64_t s = 100; s < 104; ++s) {
        const Phantom ph = make_phantom(s, pc);
        const auto a = render(ph, ModalityRendering::source_default(), 1);
        const auto b = render(ph, ModalityRendering::target_default(), 2);
        CHECK(a.shape == ph.labels.shape);
        CHECK(b.shape == ph.labels.shape);
        for (float v : a.data) CHECK((v >= 0.0f && v <= 1.0f));
        src.insert(src.end(), a.data.begin(), a.data.end());
        tgt.insert(tgt.end(), b.data.begin(), b.data.end());
    }
    CHECK(histogram_l1(src, tgt, 32) > 0.2);
    CHECK(histogram_l1(src, src, 32) == 0.0);
}

TEST_CASE("augmentation identity and gamma") {
    const Volume v = small_volume(3, "v");
    const auto img = v.slice_image(8);
    const auto lbl = v.slice_labels(8);
    std::mt19937_64 rng(1);
    auto [oi, ol] = augment(img, lbl, AugmentationSpec::identity(), rng);
    CHECK(oi.data == img.data);
    CHECK(ol.data == lbl.data);

    AugmentParams p;
    p.gamma = 2.0;
    auto spec = AugmentationSpec::identity();
    Tensor<float> flat({8, 8}, 0.5f);
    auto [gi, gl] = apply_augment(flat, LabelMap({8, 8}), p, spec);
    for (float x : gi.data) CHECK(x == doctest::Approx(0.25));
}

TEST_CASE("rotation matches the analytic affine map") {
    // 3x3 blob of class 3 away from the centre, rotated by 10 degrees.
    const int h = 32, w = 32;
    Tensor<float> img({h, w}, 0.0f);
    LabelMap lbl({h, w});
    const int by = 8, bx = 22;
    for (int y = by - 1; y <= by + 1; ++y)
        for (int x = bx - 1; x <= bx + 1; ++x) lbl[static_cast<std::size_t>(y) * w + x] = 3;
    AugmentParams p;
    p.angle_rad = 10.0 * std::numbers::pi / 180.0;
    auto [oi, ol] = apply_augment(img, lbl, p, AugmentationSpec::identity());

    const double cy = 0.5 * (h - 1), cx = 0.5 * (w - 1);
    const double c = std::cos(p.angle_rad), s = std::sin(p.angle_rad);
    const double ex = cx + c * (bx - cx) - s * (by - cy);
    const double ey = cy + s * (bx - cx) + c * (by - cy);
    double sy = 0, sx = 0;
    int n = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (ol[static_cast<std::size_t>(y) * w + x] != 3) continue;
            sy += y;
            sx += x;
            ++n;
            // Inverse image of every labelled output pixel lies in the blob's pixel cells.
            const double qx = x - cx, qy = y - cy;
            const double px = cx + c * qx + s * qy, py = cy - s * qx + c * qy;
            CHECK(std::abs(px - bx) <= 1.5 + 1e-9);
            CHECK(std::abs(py - by) <= 1.5 + 1e-9);
        }
    REQUIRE(n > 0);
    CHECK(std::hypot(sy / n - ey, sx / n - ex) < 0.5);
}

TEST_CASE("sampled augmentation parameters stay inside declared ranges") {
    AugmentationSpec spec;
    std::mt19937_64 rng(5);
    for (int i = 0; i < 500; ++i) {
        const auto p = sample_augment(spec, 64, 64, rng);
        CHECK(std::abs(p.angle_rad) <= spec.rotation_deg * std::numbers::pi / 180.0);
        CHECK(std::abs(p.tx) <= spec.translation_px);
        CHECK(std::abs(p.ty) <= spec.translation_px);
        CHECK(std::abs(p.shear) <= spec.shear);
        CHECK(p.gamma >= spec.gamma_lo - 1e-12);
        CHECK(p.gamma <= spec.gamma_hi + 1e-12);
        CHECK(p.elastic_dx.size() == static_cast<std::size_t>(p.grid_h * p.grid_w));
    }
    AugmentationSpec bad;
    bad.gamma_lo = 2.0;
    bad.gamma_hi = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("augmentation never introduces a new label class") {
    const Volume v = small_volume(4, "v");
    AugmentationSpec spec;
    spec.rotation_deg = 30;
    spec.translation_px = 12;
    spec.shear = 0.3;
    spec.elastic_sigma = 4;
    std::mt19937_64 rng(6);
    for (int z = 0; z < v.depth(); ++z) {
        const auto lbl = v.slice_labels(z);
        const auto before = classes_in(lbl);
        for (int k = 0; k < 5; ++k) {
            auto [oi, ol] = augment(v.slice_image(z), lbl, spec, rng);
            for (int c : classes_in(ol)) CHECK(before.count(c) == 1);
            for (float x : oi.data) CHECK((x >= 0.0f && x <= 1.0f));
        }
    }
}

TEST_CASE("batch serving") {
    const std::vector<Volume> vols{small_volume(10, "a"), small_volume(11, "b")};
    const auto batches = iterate_batches(vols, 4, 7, 0);
    CHECK(batches.size() == 8);
    std::set<std::pair<int, int>> seen;
    for (const auto& b : batches) {
        CHECK(b.images.shape == Shape{4, 1, 64, 64});
        CHECK(b.labels.shape == Shape{4, 64, 64});
        for (const auto& r : b.refs) seen.insert({r.volume, r.slice});
    }
    CHECK(seen.size() == 32);

    auto order = [](const std::vector<Batch>& bs) {
        std::vector<std::pair<int, int>> o;
        for (const auto& b : bs)
            for (const auto& r : b.refs) o.emplace_back(r.volume, r.slice);
        return o;
    };
    CHECK(order(iterate_batches(vols, 4, 7, 0)) == order(batches));
    CHECK(order(iterate_batches(vols, 4, 7, 1)) != order(batches));
    CHECK(iterate_batches(vols, 5, 7, 0).size() == 7);

    // Augmented batches depend only on (seed, scan, slice, epoch).
    AugmentationSpec spec;
    const auto refs = plan_epoch(vols, 4, 7, 2).front();
    std::vector<SliceRef> reversed(refs.rbegin(), refs.rend());
    const Batch x = make_batch(vols, refs, &spec, 7, 2);
    const Batch y = make_batch(vols, reversed, &spec, 7, 2);
    const std::size_t plane = 64 * 64;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const std::size_t j = refs.size() - 1 - i;
        CHECK(std::equal(x.images.data.begin() + static_cast<std::ptrdiff_t>(i * plane),
                         x.images.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * plane),
                         y.images.data.begin() + static_cast<std::ptrdiff_t>(j * plane)));
    }

    CHECK_THROWS_AS(iterate_batches({}, 4, 7, 0), ConfigError);
    CHECK_THROWS_AS(iterate_batches(vols, 0, 7, 0), ConfigError);
}

TEST_CASE("volume helpers") {
    const Volume v = small_volume(12, "v", 8);
    const Volume sub = v.sub_volume(2, 3);
    CHECK(sub.depth() == 3);
    CHECK(sub.slice_labels(0).data == v.slice_labels(2).data);
    CHECK_THROWS((void)v.sub_volume(6, 5));
    Volume broken = v;
    broken.labels = LabelMap({7, 64, 64});
    CHECK_THROWS_AS(broken.validate(), ShapeError);
}
