// uda: dataset synthesis, training, adaptation, evaluation and plotting.

#include <CLI11.hpp>
#include <iostream>

#include "uda/commands.hpp"

namespace {

using namespace uda;

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
    std::uint64_t seed = 0;
    bool force = false;
    bool quiet = false;
    std::string filtering;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", c.sets, "override one config key (key=value); repeatable");
    sub->add_option("--out", c.out, "output directory")->required();
    sub->add_option("--seed", c.seed, "experiment seed");
    sub->add_flag("--force", c.force, "write into a non-empty output directory");
    sub->add_flag("-q,--quiet", c.quiet, "no progress output");
    sub->add_option("--metric-filtering", c.filtering, "largest-component filtering before metrics")
        ->check(CLI::IsMember({"pred", "none"}));
}

ExperimentConfig resolve(const Common& c, CLI::App* sub) {
    ExperimentConfig cfg;
    if (!c.config.empty()) cfg.apply_file(c.config);
    for (const auto& kv : c.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (sub->count("--seed")) cfg.set("seed", std::to_string(c.seed));
    if (!c.filtering.empty()) cfg.set("metric_filtering", c.filtering);
    return cfg;
}

CommandOptions options(const Common& c) {
    CommandOptions o;
    o.force = c.force;
    o.progress = c.quiet ? nullptr : &std::cerr;
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Data-efficient unsupervised domain adaptation on synthetic volumes"};
    app.require_subcommand(1);

    Common c;
    std::string data, source, checkpoint, split = "target_test", domain = "auto", ablate;
    int seeds = 0, target_scans = 0, jobs = 1;
    bool few_shot = false, resume = false;
    std::vector<std::string> inputs;

    auto* synth = app.add_subcommand("synth", "generate the synthetic dataset");
    add_common(synth, c);

    auto* train = app.add_subcommand("train-source", "supervised training on labelled source volumes");
    add_common(train, c);
    train->add_option("--data", data, "dataset directory")->required();
    train->add_flag("--resume", resume, "continue from <out>/model");

    auto* adapt = app.add_subcommand("adapt", "unsupervised adaptation to the target domain");
    add_common(adapt, c);
    adapt->add_option("--data", data, "dataset directory")->required();
    adapt->add_option("--source", source, "source checkpoint (stem or run directory)")->required();
    adapt->add_option("--seeds", seeds, "number of repeated draws")->check(CLI::PositiveNumber);
    adapt->add_option("--jobs", jobs, "concurrent draws")->check(CLI::PositiveNumber);
    adapt->add_option("--ablate", ablate, "drop one loss group")->check(CLI::IsMember({"kl", "adv"}));
    adapt->add_flag("--few-shot", few_shot, "adapt on consecutive target slices with early stopping");
    adapt->add_option("--target-scans", target_scans, "target volumes drawn from the pool")->check(CLI::PositiveNumber);

    auto* oracle = app.add_subcommand("oracle", "supervised fine-tuning on all labelled target volumes");
    add_common(oracle, c);
    oracle->add_option("--data", data, "dataset directory")->required();
    oracle->add_option("--source", source, "source checkpoint (stem or run directory)")->required();
    oracle->add_option("--seeds", seeds, "number of repeated runs")->check(CLI::PositiveNumber);
    oracle->add_option("--jobs", jobs, "concurrent runs")->check(CLI::PositiveNumber);

    auto* eval = app.add_subcommand("evaluate", "Dice and ASSD of a checkpoint on one split");
    add_common(eval, c);
    eval->add_option("--checkpoint", checkpoint, "checkpoint (stem or run directory)")->required();
    eval->add_option("--data", data, "dataset directory")->required();
    eval->add_option("--split", split, "dataset split")
        ->check(CLI::IsMember({"source_train", "source_val", "target_train", "target_val", "target_test"}));
    eval->add_option("--domain", domain, "encoder route")->check(CLI::IsMember({"auto", "source", "target"}));

    auto* plot = app.add_subcommand("plot", "SVG loss curves, validation overlays and Dice bars");
    plot->add_option("inputs", inputs, "log CSVs or run directories")->required();
    plot->add_option("--out", c.out, "output directory")->required();
    plot->add_flag("--force", c.force, "write into a non-empty output directory");
    plot->add_flag("-q,--quiet", c.quiet, "no progress output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const CommandOptions opt = options(c);
        if (synth->parsed()) {
            cmd_synth(resolve(c, synth), c.out, opt);
        } else if (train->parsed()) {
            cmd_train_source(resolve(c, train), data, c.out, resume, opt);
        } else if (adapt->parsed()) {
            ExperimentConfig cfg = resolve(c, adapt);
            if (seeds > 0) cfg.set("seeds", std::to_string(seeds));
            if (target_scans > 0) cfg.set("target_scans", std::to_string(target_scans));
            if (few_shot) cfg.set("few_shot", "1");
            AdaptOptions a;
            a.ablate = parse_ablation(ablate);
            a.jobs = jobs;
            cmd_adapt(cfg, source, data, c.out, a, opt);
            std::cout << read_text(fs::path(c.out) / "summary.csv");
        } else if (oracle->parsed()) {
            ExperimentConfig cfg = resolve(c, oracle);
            if (seeds > 0) cfg.set("seeds", std::to_string(seeds));
            cmd_oracle(cfg, source, data, c.out, jobs, opt);
            std::cout << read_text(fs::path(c.out) / "summary.csv");
        } else if (eval->parsed()) {
            const DomainChoice d = domain == "source"   ? DomainChoice::source
                                   : domain == "target" ? DomainChoice::target
                                                        : DomainChoice::automatic;
            const auto r = cmd_evaluate(resolve(c, eval), checkpoint, data, split, d, c.out, opt);
            std::cout << r.table();
        } else if (plot->parsed()) {
            cmd_plot(std::vector<fs::path>(inputs.begin(), inputs.end()), c.out, opt);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return 0;
}
