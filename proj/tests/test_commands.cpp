#include <doctest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <stdexcept>

#include "uda/commands.hpp"

using namespace uda;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("uda_cmd_" + name);
    fs::remove_all(p);
    return p;
}

ExperimentConfig tiny() {
    ExperimentConfig c;
    c.apply_text(
        "n_source=3\nn_target=3\nn_source_val=1\nn_target_val=1\nn_target_test=2\n"
        "height=32\nwidth=32\ndepth=4\nmin_class_pixels=4\n"
        "net.base_channels=4\nnet.latent_channels=4\nnet.seg_channels=4\nnet.disc_channels=4\n"
        "source_epochs=1\nuda_epochs=2\nuda_steps_per_epoch=2\noracle_epochs=1\nbatch_size=4\n",
        "tiny");
    return c;
}

std::size_t lines(const std::string& s) {
    std::size_t n = 0;
    for (char c : s) n += c == '\n';
    return n;
}

std::size_t count(const std::string& s, const std::string& what) {
    std::size_t n = 0;
    for (auto p = s.find(what); p != std::string::npos; p = s.find(what, p + 1)) ++n;
    return n;
}

// Synthesises a dataset and trains a source model once per process.
struct Fixture {
    fs::path root = scratch("fixture");
    fs::path data = root / "data";
    fs::path source = root / "source";
    Fixture() {
        cmd_synth(tiny(), data, {});
        cmd_train_source(tiny(), data, source, false, {});
    }
    ~Fixture() { fs::remove_all(root); }
};

const Fixture& fixture() {
    static Fixture f;
    return f;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(UDA_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("exit codes") {
    CHECK(exit_code_for(ConfigError("x")) == 2);
    CHECK(exit_code_for(ShapeError("x")) == 2);
    CHECK(exit_code_for(ValidationError("x")) == 2);
    CHECK(exit_code_for(IoError("x")) == 2);
    CHECK(exit_code_for(NumericalError("x")) == 3);
    CHECK(exit_code_for(std::logic_error("x")) == 1);
}

TEST_CASE("synth writes the configured splits reproducibly") {
    const fs::path a = scratch("synth_a"), b = scratch("synth_b");
    ExperimentConfig def;
    const DatasetSplits s = make_splits(def);
    CHECK(s.source_train.size() == 16);
    CHECK(s.target_train.size() == 16);
    CHECK(s.source_val.size() == 2);
    CHECK(s.target_val.size() == 1);
    CHECK(s.target_test.size() == 4);

    auto cfg = tiny();
    cfg.set("n_target", "1");
    cmd_synth(cfg, a, {});
    cmd_synth(cfg, b, {});
    const DatasetSplits r = read_dataset(a);
    CHECK(r.target_train.size() == 1);
    CHECK(read_text(a / kManifestName) == read_text(b / kManifestName));
    for (const auto& v : r.target_test) {
        CHECK(read_text(a / (v.scan_id + ".img.f32")) == read_text(b / (v.scan_id + ".img.f32")));
    }
    CHECK_THROWS_AS(cmd_synth(cfg, a, {}), ConfigError);  // append-only
    CommandOptions force;
    force.force = true;
    CHECK_NOTHROW(cmd_synth(cfg, a, force));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("train-source outputs and resume") {
    const auto& f = fixture();
    const LogTable log = parse_log_csv(read_text(f.source / "train_log.csv"));
    // 3 volumes x 4 slices, batch 4: 3 steps per epoch.
    CHECK(log.rows.size() == 3);
    CHECK(fs::exists(f.source / "model.bin"));
    CHECK(fs::exists(f.source / "source_val" / "per_scan.csv"));
    CHECK(lines(read_text(f.source / "val_dice.csv")) == 2);
    CHECK(read_text(f.source / "experiment.manifest").find("config_hash=") != std::string::npos);
    ExperimentConfig back;
    back.apply_file(f.source / "config.resolved");
    CHECK(back.to_text() == read_text(f.source / "config.resolved"));

    CHECK_THROWS_AS(cmd_train_source(tiny(), f.root / "nowhere", scratch("ts_missing"), false, {}), ConfigError);

    // Two epochs straight versus one epoch then a resumed second.
    auto two = tiny();
    two.set("source_epochs", "2");
    const fs::path straight = scratch("ts_straight"), resumed = scratch("ts_resumed");
    cmd_train_source(two, f.data, straight, false, {});
    cmd_train_source(tiny(), f.data, resumed, false, {});
    cmd_train_source(two, f.data, resumed, true, {});
    CHECK(read_text(straight / "model.bin") == read_text(resumed / "model.bin"));
    const LogTable a = parse_log_csv(read_text(straight / "train_log.csv"));
    const LogTable b = parse_log_csv(read_text(resumed / "train_log.csv"));
    REQUIRE(a.rows.size() == 6);
    REQUIRE(b.rows.size() == 6);
    const int wall = a.column("wall_ms");
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        for (std::size_t j = 0; j < a.columns.size(); ++j) {
            if (static_cast<int>(j) == wall || std::isnan(a.rows[i][j])) continue;
            CHECK(a.rows[i][j] == b.rows[i][j]);
        }
    }
    fs::remove_all(straight);
    fs::remove_all(resumed);
}

TEST_CASE("adapt: seeds, ablation, parallel equivalence") {
    const auto& f = fixture();
    auto cfg = tiny();
    cfg.set("seeds", "2");
    const fs::path out = scratch("adapt");
    const auto rs = cmd_adapt(cfg, f.source, f.data, out, {}, {});
    REQUIRE(rs.size() == 2);
    CHECK(rs[0].seed == cfg.seed);
    CHECK(rs[1].seed == cfg.seed + 1);
    for (const char* d : {"seed_0", "seed_1"}) {
        CHECK(fs::exists(out / d / "model.bin"));
        CHECK(fs::exists(out / d / "adapted" / "summary.csv"));
        CHECK(fs::exists(out / d / "unadapted" / "summary.csv"));
        const LogTable log = parse_log_csv(read_text(out / d / "train_log.csv"));
        CHECK(log.rows.size() == 4);
        for (const char* term : {"rec_s", "rec_t", "kl_s", "kl_t", "seg", "task", "adv_s", "adv_t", "cyc"}) {
            CHECK(log.column(term) >= 0);
        }
    }
    const LogTable summary = parse_log_csv(read_text(out / "summary.csv"));
    CHECK(summary.rows.size() == 4);  // two runs, mean, std
    ExperimentConfig back;
    back.apply_file(out / "seed_1" / "config.resolved");
    CHECK(back.seed == cfg.seed + 1);
    CHECK(back.seeds == 1);

    SUBCASE("jobs do not change outputs") {
        const fs::path par = scratch("adapt_par");
        AdaptOptions a;
        a.jobs = 2;
        cmd_adapt(cfg, f.source, f.data, par, a, {});
        for (const char* d : {"seed_0", "seed_1"}) {
            CHECK(read_text(out / d / "model.bin") == read_text(par / d / "model.bin"));
            CHECK(read_text(out / d / "val_dice.csv") == read_text(par / d / "val_dice.csv"));
        }
        fs::remove_all(par);
    }
    SUBCASE("ablating kl zeroes the weighted kl column") {
        const fs::path abl = scratch("adapt_kl");
        cfg.set("seeds", "1");
        AdaptOptions a;
        a.ablate = Ablation::kl;
        cmd_adapt(cfg, f.source, f.data, abl, a, {});
        const LogTable log = parse_log_csv(read_text(abl / "seed_0" / "train_log.csv"));
        const int wkl = log.column("w_kl");
        REQUIRE(wkl >= 0);
        for (const auto& r : log.rows) CHECK(r[static_cast<std::size_t>(wkl)] == 0.0);
        CHECK(parse_ablation("adv") == Ablation::adv);
        CHECK_THROWS_AS(parse_ablation("cyc"), ConfigError);
        fs::remove_all(abl);
    }
    SUBCASE("few-shot draws consecutive slices") {
        const fs::path fsd = scratch("adapt_fs");
        cfg.set("seeds", "1");
        cfg.set("few_shot", "1");
        const auto r = cmd_adapt(cfg, f.source, f.data, fsd, {}, {});
        REQUIRE(r.size() == 1);
        CHECK(read_text(fsd / "seed_0" / "experiment.manifest").find("few_shot_slices=3") != std::string::npos);
        ExperimentConfig fb;
        fb.apply_file(fsd / "seed_0" / "config.resolved");
        CHECK(fb.train.early_stop);
        fs::remove_all(fsd);
    }
    SUBCASE("preconditions") {
        cfg.set("target_scans", "4");
        CHECK_THROWS_AS(cmd_adapt(cfg, f.source, f.data, scratch("adapt_bad"), {}, {}), ConfigError);
        CHECK_THROWS_AS(cmd_adapt(tiny(), f.root / "none", f.data, scratch("adapt_none"), {}, {}), ConfigError);
        fs::remove_all(scratch("adapt_bad"));
    }
    fs::remove_all(out);
}

TEST_CASE("oracle uses every labelled target training volume") {
    const auto& f = fixture();
    const fs::path out = scratch("oracle");
    const auto rs = cmd_oracle(tiny(), f.source, f.data, out, 1, {});
    REQUIRE(rs.size() == 1);
    CHECK(rs[0].target_scans.size() == 3);
    CHECK(fs::exists(out / "seed_0" / "oracle" / "table.txt"));
    fs::remove_all(out);
}

TEST_CASE("evaluate matches in-process evaluation byte for byte") {
    const auto& f = fixture();
    const fs::path out = scratch("eval");
    const MetricsReport r = cmd_evaluate(tiny(), f.source, f.data, "target_test", DomainChoice::automatic, out, {});

    ExperimentConfig cfg = tiny();
    const CheckpointInfo info = read_checkpoint_info(f.source / "model");
    Trainer<float> tr(NetworkSet<float>(info.net, info.init_seed), cfg.train);
    tr.load_checkpoint(f.source / "model");
    const DatasetSplits ds = read_dataset(f.data);
    std::vector<Tensor<std::uint8_t>> preds, gts;
    std::vector<std::string> ids;
    for (const auto& v : ds.target_test) {
        preds.push_back(tr.infer(v, Domain::source));
        gts.push_back(v.labels);
        ids.push_back(v.scan_id);
    }
    const MetricsReport direct = evaluate_scans(preds, gts, ids, cfg.eval);
    CHECK(read_text(out / "per_scan.csv") == direct.per_scan_csv());
    CHECK(read_text(out / "summary.csv") == direct.summary_csv());
    CHECK(read_text(out / "table.txt") == direct.table());
    CHECK(r.per_scan_csv() == direct.per_scan_csv());
    // Header plus K - 1 rows per scan.
    CHECK(lines(direct.per_scan_csv()) == 1 + 4 * ds.target_test.size());

    CHECK_THROWS_AS(cmd_evaluate(tiny(), f.source, f.data, "nope", DomainChoice::automatic, scratch("eval2"), {}),
                    ConfigError);
    fs::remove_all(out);
    fs::remove_all(scratch("eval2"));
}

TEST_CASE("plot emits one file per log and one overlay series per run") {
    const auto& f = fixture();
    const fs::path runs = scratch("plot_runs");
    auto cfg = tiny();
    cfg.set("seeds", "2");
    cmd_adapt(cfg, f.source, f.data, runs, {}, {});

    const fs::path one = scratch("plot_one");
    const auto w1 = cmd_plot({f.source / "train_log.csv"}, one, {});
    CHECK(w1.size() == 1);
    CHECK(read_text(w1[0]).rfind("<svg", 0) == 0);

    const fs::path overlay = scratch("plot_overlay");
    const auto w2 = cmd_plot({runs / "seed_0", runs / "seed_1", runs}, overlay, {});
    CHECK(count(read_text(overlay / "val_dice.svg"), "<polyline") == 2);
    CHECK(fs::exists(overlay / "dice_bars.svg"));
    CHECK(w2.size() == 4);

    const fs::path empty = scratch("plot_empty");
    fs::create_directories(empty);
    write_text(empty / "log.csv", "");
    CHECK_THROWS_AS(cmd_plot({empty / "log.csv"}, empty / "out", {}), ValidationError);
    write_text(empty / "bad.csv", "a,b\n1\n");
    CHECK_THROWS_AS(cmd_plot({empty / "bad.csv"}, empty / "out", {}), ValidationError);
    for (const auto& p : {runs, one, overlay, empty}) fs::remove_all(p);
}

TEST_CASE("command-line exit codes") {
    const auto& f = fixture();
    const fs::path out = scratch("cli");
    CHECK(run_cli("synth --out " + out.string() + " --set n_source=1 --set n_target=1 --set n_target_test=1") == 0);
    CHECK(run_cli("synth --out " + out.string()) == 2);  // not empty
    CHECK(run_cli("synth --out " + (out / "x").string() + " --set bogus=1") == 2);
    CHECK(run_cli("train-source --data " + (out / "none").string() + " --out " + (out / "t").string()) == 2);
    CHECK(run_cli("adapt --data " + f.data.string() + " --source " + f.source.string() + " --ablate=cyc --out " +
                  (out / "a").string()) == 2);
    CHECK(run_cli("frobnicate") == 2);
    const fs::path empty = out / "empty.csv";
    write_text(empty, "");
    CHECK(run_cli("plot " + empty.string() + " --out " + (out / "p").string()) == 2);
    fs::remove_all(out);
}
