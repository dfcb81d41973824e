#include <doctest.h>

#include <filesystem>

#include "uda/config.hpp"
#include "uda/io.hpp"

using namespace uda;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("uda_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("config text round-trips") {
    ExperimentConfig a;
    a.set("seed", "123");
    a.set("lr", "0.00031");
    a.set("class_weights", "0.1,1,1,2,1");
    a.set("kl_reduction", "sum");
    a.set("target.gamma", "0.7");
    a.set("metric_filtering", "none");
    a.set("aug.rotation_deg", "12.5");

    ExperimentConfig b;
    b.apply_text(a.to_text(), "roundtrip");
    CHECK(b.to_text() == a.to_text());
    CHECK(b.hash() == a.hash());
    CHECK(b.hash() != ExperimentConfig{}.hash());
    CHECK(b.train.lr == 0.00031);
    CHECK(b.eval.filtering == Filtering::none);

    // Every key printed is accepted back.
    for (const auto& k : a.keys()) CHECK(a.to_text().find(k + "=") != std::string::npos);
}

TEST_CASE("config errors") {
    ExperimentConfig c;
    CHECK_THROWS_AS(c.set("no_such_key", "1"), ConfigError);
    CHECK_THROWS_AS(c.set("batch_size", "eight"), ConfigError);
    CHECK_THROWS_AS(c.set("lr", "1e-3x"), ConfigError);
    CHECK_THROWS_AS(c.set("early_stop", "maybe"), ConfigError);
    CHECK_THROWS_AS(c.set("kl_reduction", "max"), ConfigError);
    CHECK_THROWS_AS(c.apply_text("lr 0.1\n", "inline"), ConfigError);
    CHECK_THROWS_AS(c.apply_file("/nonexistent/uda.cfg"), ConfigError);
    c.set("seeds", "0");
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("key=value parsing skips comments and blanks") {
    const auto kv = parse_key_values("# header\n\nseed = 5 # trailing\n  lr=0.1\n", "t");
    REQUIRE(kv.size() == 2);
    CHECK(kv[0] == std::pair<std::string, std::string>{"seed", "5"});
    CHECK(kv[1] == std::pair<std::string, std::string>{"lr", "0.1"});
}

TEST_CASE("volume and dataset files round-trip") {
    const fs::path dir = scratch("io");
    ExperimentConfig cfg;
    cfg.data.phantom.height = cfg.data.phantom.width = 32;
    cfg.data.phantom.depth = 3;
    cfg.data.phantom.min_class_pixels = 4;
    const Dataset d = generate_dataset(3, 2, 2, cfg.data);

    write_volume(dir, d.source[0]);
    const Volume v = read_volume(dir / d.source[0].scan_id);
    CHECK(v.image.data == d.source[0].image.data);
    CHECK(v.labels.data == d.source[0].labels.data);
    CHECK(v.scan_id == d.source[0].scan_id);
    CHECK(v.seed == d.source[0].seed);
    CHECK(v.modality == Modality::source);

    const Volume raw = import_raw_volume(dir / (v.scan_id + ".img.f32"), {}, 3, 32, 32, Modality::target, "ext");
    CHECK(raw.image.data == v.image.data);
    CHECK(raw.modality == Modality::target);
    CHECK_THROWS_AS(import_raw_volume(dir / (v.scan_id + ".img.f32"), {}, 3, 32, 31, Modality::target, "ext"),
                    ShapeError);

    DatasetSplits s;
    s.source_train = {d.source[0]};
    s.source_val = {d.source[1]};
    s.target_train = {d.target[0]};
    s.target_test = {d.target[1]};
    s.manifest = d.manifest.entries;
    write_dataset(dir / "ds", s);
    const DatasetSplits r = read_dataset(dir / "ds");
    CHECK(r.source_train.size() == 1);
    CHECK(r.source_val.size() == 1);
    CHECK(r.target_train.size() == 1);
    CHECK(r.target_val.empty());
    CHECK(r.target_test.size() == 1);
    CHECK(r.target_test[0].image.data == d.target[1].image.data);
    CHECK(r.manifest == s.manifest);

    CHECK_THROWS_AS(read_dataset(dir / "missing"), ConfigError);
    CHECK_THROWS(read_volume(dir / "missing"));
    fs::remove_all(dir);
}
