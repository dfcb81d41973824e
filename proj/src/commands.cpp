#include "uda/commands.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include "uda/plot.hpp"
#include "uda/rng.hpp"

#ifndef UDA_REVISION
#define UDA_REVISION "unknown"
#endif

namespace uda {
namespace {

std::mutex g_progress_mu;

void say(const CommandOptions& opt, const std::string& line) {
    if (!opt.progress) return;
    std::lock_guard<std::mutex> lock(g_progress_mu);
    *opt.progress << line << std::endl;
}

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string join(const std::vector<std::string>& xs, char sep) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? std::string(1, sep) : "") + xs[i];
    return s;
}

std::string val_csv(const std::vector<EvalRecord>& evals) {
    std::string s = "epoch,step,mean_dice\n";
    for (const auto& e : evals)
        s += std::to_string(e.epoch) + "," + std::to_string(e.step) + "," + num(e.mean_dice) + "\n";
    return s;
}

double cv_last(const std::vector<EvalRecord>& evals, std::size_t n) {
    std::vector<double> xs;
    const std::size_t start = evals.size() > n ? evals.size() - n : 0;
    for (std::size_t i = start; i < evals.size(); ++i) xs.push_back(evals[i].mean_dice);
    return coefficient_of_variation(xs);
}

void write_provenance(const fs::path& dir, const ExperimentConfig& cfg, const std::string& command,
                      const KeyValues& extra) {
    write_text(dir / "config.resolved", cfg.to_text());
    std::ostringstream m;
    m << "command=" << command << "\nconfig_hash=" << cfg.hash() << "\nseed=" << cfg.seed
      << "\nprecision=" << (deterministic_mode() ? "f64" : "f32") << "\nrevision=" << UDA_REVISION << "\n";
    for (const auto& [k, v] : extra) m << k << '=' << v << '\n';
    write_text(dir / "experiment.manifest", m.str());
}

KeyValues dataset_provenance(const fs::path& data) {
    const fs::path mpath = data / kManifestName;
    return {{"dataset_manifest", fs::absolute(mpath).lexically_normal().string()},
            {"dataset_digest", digest_hex(read_text(mpath))}};
}

// Keeps the header and rows with step <= last_step.
std::string truncate_log(const std::string& text, std::int64_t last_step) {
    std::istringstream is(text);
    std::string line, out;
    bool header = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (header) {
            out += line + "\n";
            header = false;
            continue;
        }
        if (std::stoll(line.substr(0, line.find(','))) <= last_step) out += line + "\n";
    }
    return out;
}

template <class T>
Trainer<T> trainer_from_checkpoint(const fs::path& stem, ExperimentConfig& cfg) {
    const CheckpointInfo info = read_checkpoint_info(stem);
    cfg.net = info.net;  // the checkpoint layout wins over the config
    Trainer<T> tr(NetworkSet<T>(info.net, info.init_seed), cfg.train);
    tr.load_checkpoint(stem);
    return tr;
}

std::string checkpoint_phase(const fs::path& stem) {
    const std::string mpath = stem.string() + ".manifest";
    for (const auto& [k, v] : parse_key_values(read_text(mpath), mpath))
        if (k == "phase") return v;
    throw IoError(mpath + ": missing phase");
}

template <class T>
SourceResult train_source_impl(const ExperimentConfig& cfg, const DatasetSplits& ds, const fs::path& out, bool resume,
                               const CommandOptions& opt) {
    const fs::path stem = out / "model";
    Trainer<T> tr(NetworkSet<T>(cfg.net, cfg.seed), cfg.train);
    const fs::path log_path = out / "train_log.csv";
    bool header = true;
    if (resume && fs::exists(stem.string() + ".manifest")) {
        tr.load_checkpoint(stem);
        if (tr.state().phase != Phase::source) throw ConfigError(stem.string() + ": not a source-phase checkpoint");
        if (fs::exists(log_path)) {
            write_text(log_path, truncate_log(read_text(log_path), tr.state().step));
            header = false;
        }
        say(opt, "resuming source training at epoch " + std::to_string(tr.state().epoch));
    }
    std::ofstream log(log_path, header ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot write " + log_path.string());
    tr.set_log_stream(&log, header);
    tr.set_deterministic_log(deterministic_mode());
    tr.set_epoch_callback([&] {
        log.flush();
        tr.save_checkpoint(stem);
        const auto& ev = tr.state().evals;
        say(opt, "source epoch " + std::to_string(tr.state().epoch) +
                     (ev.empty() ? "" : " val_dice " + num(ev.back().mean_dice)));
    });
    tr.train_source(ds.source_train, ds.source_val.empty() ? nullptr : &ds.source_val);
    tr.save_checkpoint(stem);
    write_text(out / "val_dice.csv", val_csv(tr.state().evals));

    SourceResult res;
    if (!ds.source_val.empty()) {
        const auto rep = tr.evaluate(ds.source_val, Domain::source, cfg.eval);
        write_report(out / "source_val", rep);
        res.val_mean_dice = rep.mean_dice().mean;
    }
    return res;
}

enum class RunKind { adapt, oracle };

template <class T>
RunResult run_one(const ExperimentConfig& base, const fs::path& source_stem, const DatasetSplits& ds,
                  const fs::path& dir, RunKind kind, int index, const KeyValues& provenance,
                  const CommandOptions& opt) {
    ExperimentConfig cfg = base;
    RunResult res;
    res.index = index;
    res.seed = base.seed + static_cast<std::uint64_t>(index);
    cfg.seed = res.seed;
    cfg.train.seed = res.seed;
    cfg.seeds = 1;  // the resolved config describes this run alone

    std::vector<Volume> target;
    if (kind == RunKind::adapt) {
        const auto& pool = ds.target_train;
        if (cfg.target_scans < 1 || static_cast<std::size_t>(cfg.target_scans) > pool.size()) {
            throw ConfigError("target_scans must be in [1, " + std::to_string(pool.size()) + "]");
        }
        std::vector<std::size_t> order(pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 rng(derive_seed(res.seed, {hash_string("target-draw")}));
        std::shuffle(order.begin(), order.end(), rng);
        for (int i = 0; i < cfg.target_scans; ++i) target.push_back(pool[order[static_cast<std::size_t>(i)]]);
        if (cfg.few_shot) {
            target = {few_shot_slices(target.front(), cfg.few_shot_slices)};
            cfg.train.early_stop = true;
        }
    } else {
        target = ds.target_train;
        if (target.empty()) throw ConfigError("oracle needs labelled target training volumes");
    }
    for (const auto& v : target) res.target_scans.push_back(v.scan_id);

    Trainer<T> tr = trainer_from_checkpoint<T>(source_stem, cfg);
    if (tr.state().phase != Phase::source) throw ConfigError(source_stem.string() + ": not a source-phase checkpoint");

    KeyValues extra = provenance;
    extra.emplace_back("source_checkpoint", fs::absolute(source_stem).lexically_normal().string());
    extra.emplace_back("run_seed", std::to_string(res.seed));
    extra.emplace_back("target_scans", join(res.target_scans, ';'));
    if (cfg.few_shot && kind == RunKind::adapt) {
        extra.emplace_back("few_shot_slices", std::to_string(target.front().depth()));
    }
    write_provenance(dir, cfg, kind == RunKind::adapt ? "adapt" : "oracle", extra);

    const auto unadapted = tr.evaluate(ds.target_test, Domain::source, cfg.eval);
    write_report(dir / "unadapted", unadapted);
    res.unadapted_mean_dice = unadapted.mean_dice().mean;

    std::ofstream log(dir / "train_log.csv");
    if (!log) throw IoError("cannot write " + (dir / "train_log.csv").string());
    tr.set_log_stream(&log, true);
    tr.set_deterministic_log(deterministic_mode());
    const std::string tag =
        (kind == RunKind::adapt ? "adapt" : "oracle") + std::string(" seed ") + std::to_string(res.seed);
    tr.set_epoch_callback([&] {
        const auto& ev = tr.state().evals;
        if (tr.state().epoch % 10 == 0 && !ev.empty()) {
            say(opt, tag + " epoch " + std::to_string(tr.state().epoch) + " val_dice " + num(ev.back().mean_dice));
        }
    });
    const auto* val = ds.target_val.empty() ? nullptr : &ds.target_val;
    if (kind == RunKind::adapt) {
        tr.adapt(ds.source_train, target, val);
    } else {
        tr.finetune_oracle(target, val);
    }
    log.flush();
    tr.save_checkpoint(dir / "model");
    write_text(dir / "val_dice.csv", val_csv(tr.state().evals));

    const auto fin = tr.evaluate(ds.target_test, Domain::target, cfg.eval);
    write_report(dir / (kind == RunKind::adapt ? "adapted" : "oracle"), fin);
    res.final_mean_dice = fin.mean_dice().mean;
    res.cv_last20 = cv_last(tr.state().evals, 20);
    res.evaluations = static_cast<int>(tr.state().evals.size());
    res.stopped_early = tr.state().stopped_early;
    say(opt, tag + " done: unadapted " + num(res.unadapted_mean_dice) + " final " + num(res.final_mean_dice));
    return res;
}

std::string summary_csv(const std::vector<RunResult>& rs) {
    std::string s =
        "run,seed,target_scans,unadapted_mean_dice,final_mean_dice,improvement,cv_last20,evaluations,"
        "stopped_early\n";
    std::vector<double> u, f, d, c;
    for (const auto& r : rs) {
        s += "seed_" + std::to_string(r.index) + "," + std::to_string(r.seed) + "," + join(r.target_scans, ';') + "," +
             num(r.unadapted_mean_dice) + "," + num(r.final_mean_dice) + "," +
             num(r.final_mean_dice - r.unadapted_mean_dice) + "," + num(r.cv_last20) + "," +
             std::to_string(r.evaluations) + "," + (r.stopped_early ? "1" : "0") + "\n";
        u.push_back(r.unadapted_mean_dice);
        f.push_back(r.final_mean_dice);
        d.push_back(r.final_mean_dice - r.unadapted_mean_dice);
        c.push_back(r.cv_last20);
    }
    const auto au = aggregate(u), af = aggregate(f), ad = aggregate(d), ac = aggregate(c);
    s += "mean,,," + num(au.mean) + "," + num(af.mean) + "," + num(ad.mean) + "," + num(ac.mean) + ",,\n";
    s += "std,,," + num(au.std) + "," + num(af.std) + "," + num(ad.std) + "," + num(ac.std) + ",,\n";
    return s;
}

std::vector<RunResult> run_seeds(const ExperimentConfig& cfg, const fs::path& source_checkpoint, const fs::path& data,
                                 const fs::path& out, RunKind kind, int jobs, const CommandOptions& opt) {
    cfg.validate();
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    const fs::path stem = resolve_checkpoint(source_checkpoint);
    const DatasetSplits ds = read_dataset(data);
    if (ds.source_train.empty()) throw ConfigError("dataset has no source training volumes");
    if (ds.target_test.empty()) throw ConfigError("dataset has no target test volumes");
    prepare_run_dir(out, opt.force);
    const KeyValues prov = dataset_provenance(data);

    const int n = cfg.seeds;
    std::vector<fs::path> dirs;
    for (int k = 0; k < n; ++k) {
        dirs.push_back(out / ("seed_" + std::to_string(k)));
        prepare_run_dir(dirs.back(), opt.force);
    }
    std::vector<RunResult> results(static_cast<std::size_t>(n));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    auto work = [&](int k) {
        try {
            const auto i = static_cast<std::size_t>(k);
            results[i] = deterministic_mode() ? run_one<double>(cfg, stem, ds, dirs[i], kind, k, prov, opt)
                                              : run_one<float>(cfg, stem, ds, dirs[i], kind, k, prov, opt);
        } catch (...) {
            errors[static_cast<std::size_t>(k)] = std::current_exception();
        }
    };
    if (jobs == 1) {
        for (int k = 0; k < n; ++k) {
            work(k);
            if (errors[static_cast<std::size_t>(k)]) std::rethrow_exception(errors[static_cast<std::size_t>(k)]);
        }
    } else {
        std::mutex mu;
        int next = 0;
        std::vector<std::thread> pool;
        for (int j = 0; j < std::min(jobs, n); ++j) {
            pool.emplace_back([&] {
                for (;;) {
                    int k;
                    {
                        std::lock_guard<std::mutex> lock(mu);
                        if (next >= n) return;
                        k = next++;
                    }
                    work(k);
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    write_text(out / "summary.csv", summary_csv(results));
    return results;
}

template <class T>
MetricsReport evaluate_impl(ExperimentConfig cfg, const fs::path& stem, const std::vector<Volume>& vols,
                            Domain domain) {
    Trainer<T> tr = trainer_from_checkpoint<T>(stem, cfg);
    return tr.evaluate(vols, domain, cfg.eval);
}

// --- plotting helpers ---

LogTable load_table(const fs::path& p) {
    const LogTable t = parse_log_csv(read_text(p));
    if (t.columns.empty() || t.rows.empty()) throw ValidationError(p.string() + ": empty CSV");
    return t;
}

std::vector<double> column_values(const LogTable& t, const std::string& name, const fs::path& p) {
    const int c = t.column(name);
    if (c < 0) throw ValidationError(p.string() + ": missing column '" + name + "'");
    std::vector<double> v;
    for (const auto& r : t.rows) v.push_back(r[static_cast<std::size_t>(c)]);
    return v;
}

enum class CsvKind { loss, val, summary };

CsvKind classify(const LogTable& t, const fs::path& p) {
    if (t.column("total") >= 0 && t.column("step") >= 0) return CsvKind::loss;
    if (t.column("final_mean_dice") >= 0) return CsvKind::summary;
    if (t.column("mean_dice") >= 0 && t.column("epoch") >= 0) return CsvKind::val;
    throw ValidationError(p.string() + ": not a training log, validation or summary CSV");
}

std::string safe_name(std::string s) {
    for (char& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
    return s.empty() ? "run" : s;
}

}  // namespace

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericalError*>(&e)) return 3;
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
        dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const IoError*>(&e) ||
        dynamic_cast<const fs::filesystem_error*>(&e)) {
        return 2;
    }
    return 1;
}

DatasetSplits make_splits(const ExperimentConfig& cfg) {
    cfg.validate();
    Dataset d = generate_dataset(cfg.seed, cfg.n_source + cfg.n_source_val,
                                 cfg.n_target + cfg.n_target_val + cfg.n_target_test, cfg.data);
    DatasetSplits s;
    auto take = [](std::vector<Volume>& from, std::size_t& at, int n, std::vector<Volume>& to) {
        for (int i = 0; i < n; ++i) to.push_back(std::move(from[at++]));
    };
    std::size_t a = 0, b = 0;
    take(d.source, a, cfg.n_source, s.source_train);
    take(d.source, a, cfg.n_source_val, s.source_val);
    take(d.target, b, cfg.n_target, s.target_train);
    take(d.target, b, cfg.n_target_val, s.target_val);
    take(d.target, b, cfg.n_target_test, s.target_test);
    s.manifest = d.manifest.entries;
    s.manifest.emplace_back("config_hash", cfg.hash());
    return s;
}

void prepare_run_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw IoError(dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir) && !force) {
            throw ConfigError(dir.string() + " is not empty; run directories are append-only (use --force)");
        }
    }
    fs::create_directories(dir);
}

fs::path resolve_checkpoint(const fs::path& p) {
    if (fs::is_directory(p)) return p / "model";
    return p;
}

void cmd_synth(const ExperimentConfig& cfg, const fs::path& out, const CommandOptions& opt) {
    const DatasetSplits s = make_splits(cfg);
    prepare_run_dir(out, opt.force);
    write_dataset(out, s);
    write_text(out / "config.resolved", cfg.to_text());
    say(opt, "wrote " + std::to_string(s.source_train.size() + s.source_val.size()) + " source and " +
                 std::to_string(s.target_train.size() + s.target_val.size() + s.target_test.size()) +
                 " target volumes to " + out.string());
}

SourceResult cmd_train_source(const ExperimentConfig& base, const fs::path& data, const fs::path& out, bool resume,
                              const CommandOptions& opt) {
    ExperimentConfig cfg = base;
    cfg.train.seed = cfg.seed;
    cfg.validate();
    const DatasetSplits ds = read_dataset(data);
    if (ds.source_train.empty()) throw ConfigError("dataset has no source training volumes");
    for (const auto& v : ds.source_train) v.validate();
    if (!resume) prepare_run_dir(out, opt.force);
    fs::create_directories(out);
    write_provenance(out, cfg, "train-source", dataset_provenance(data));
    const auto res = deterministic_mode() ? train_source_impl<double>(cfg, ds, out, resume, opt)
                                          : train_source_impl<float>(cfg, ds, out, resume, opt);
    say(opt, "source validation mean dice " + num(res.val_mean_dice));
    return res;
}

Ablation parse_ablation(const std::string& s) {
    if (s.empty() || s == "none") return Ablation::none;
    if (s == "kl") return Ablation::kl;
    if (s == "adv") return Ablation::adv;
    throw ConfigError("--ablate: expected kl|adv, got '" + s + "'");
}

std::vector<RunResult> cmd_adapt(const ExperimentConfig& base, const fs::path& source_checkpoint, const fs::path& data,
                                 const fs::path& out, const AdaptOptions& aopt, const CommandOptions& opt) {
    ExperimentConfig cfg = base;
    if (aopt.ablate == Ablation::kl) cfg.train.disable_kl = true;
    if (aopt.ablate == Ablation::adv) cfg.train.disable_adv = true;
    return run_seeds(cfg, source_checkpoint, data, out, RunKind::adapt, aopt.jobs, opt);
}

std::vector<RunResult> cmd_oracle(const ExperimentConfig& cfg, const fs::path& source_checkpoint, const fs::path& data,
                                  const fs::path& out, int jobs, const CommandOptions& opt) {
    return run_seeds(cfg, source_checkpoint, data, out, RunKind::oracle, jobs, opt);
}

MetricsReport cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& data,
                           const std::string& split, DomainChoice domain, const fs::path& out,
                           const CommandOptions& opt) {
    const fs::path stem = resolve_checkpoint(checkpoint);
    DatasetSplits ds = read_dataset(data);
    const std::vector<Volume>* vols = nullptr;
    if (split == "source_train")
        vols = &ds.source_train;
    else if (split == "source_val")
        vols = &ds.source_val;
    else if (split == "target_train")
        vols = &ds.target_train;
    else if (split == "target_val")
        vols = &ds.target_val;
    else if (split == "target_test")
        vols = &ds.target_test;
    else
        throw ConfigError("unknown split '" + split + "'");
    if (vols->empty()) throw ConfigError("split '" + split + "' is empty");

    Domain d = Domain::target;
    if (domain == DomainChoice::source || (domain == DomainChoice::automatic && checkpoint_phase(stem) == "source")) {
        d = Domain::source;
    }
    prepare_run_dir(out, opt.force);
    const MetricsReport r =
        deterministic_mode() ? evaluate_impl<double>(cfg, stem, *vols, d) : evaluate_impl<float>(cfg, stem, *vols, d);
    write_report(out, r);
    return r;
}

std::vector<fs::path> cmd_plot(const std::vector<fs::path>& inputs, const fs::path& out, const CommandOptions& opt) {
    if (inputs.empty()) throw ConfigError("plot needs at least one CSV or run directory");
    struct Item {
        fs::path path;
        std::string name;
    };
    std::vector<Item> files;
    for (const auto& in : inputs) {
        if (fs::is_directory(in)) {
            const fs::path norm = fs::absolute(in).lexically_normal();
            const fs::path leaf = norm.filename().empty() ? norm.parent_path() : norm;
            const std::string name = safe_name(leaf.parent_path().filename().string() + "_" + leaf.filename().string());
            bool any = false;
            for (const char* f : {"train_log.csv", "val_dice.csv", "summary.csv"}) {
                if (fs::exists(in / f)) {
                    files.push_back({in / f, name});
                    any = true;
                }
            }
            if (!any) throw ConfigError(in.string() + ": no train_log.csv, val_dice.csv or summary.csv");
        } else {
            if (!fs::exists(in)) throw ConfigError(in.string() + ": no such file");
            files.push_back({in, safe_name(in.parent_path().filename().string() + "_" + in.stem().string())});
        }
    }

    std::vector<Series> val_series;
    std::vector<BarGroup> bars;
    std::vector<std::pair<std::string, std::string>> loss_charts;  // name, svg
    for (const auto& f : files) {
        const LogTable t = load_table(f.path);
        switch (classify(t, f.path)) {
            case CsvKind::loss: {
                const auto step = column_values(t, "step", f.path);
                std::vector<Series> ss;
                for (const auto& c : t.columns) {
                    if (c == "step" || c == "epoch" || c == "phase" || c == "wall_ms" || c.rfind("w_", 0) == 0)
                        continue;
                    auto y = column_values(t, c, f.path);
                    if (std::all_of(y.begin(), y.end(), [](double v) { return v == 0.0 || std::isnan(v); })) continue;
                    ss.push_back({c, step, std::move(y)});
                }
                loss_charts.emplace_back(f.name,
                                         line_chart_svg(ss, {"Training losses: " + f.name, "step", "loss"}, true));
                break;
            }
            case CsvKind::val: {
                val_series.push_back(
                    {f.name, column_values(t, "epoch", f.path), column_values(t, "mean_dice", f.path)});
                break;
            }
            case CsvKind::summary: {
                std::vector<double> u, fin;
                for (const auto& r : t.rows) {
                    // Per-seed rows only; "mean" and "std" parse as NaN in the seed column.
                    if (std::isnan(r[static_cast<std::size_t>(t.column("seed"))])) continue;
                    u.push_back(100.0 * r[static_cast<std::size_t>(t.column("unadapted_mean_dice"))]);
                    fin.push_back(100.0 * r[static_cast<std::size_t>(t.column("final_mean_dice"))]);
                }
                if (u.empty()) throw ValidationError(f.path.string() + ": summary has no run rows");
                const auto au = aggregate(u), af = aggregate(fin);
                bars.push_back({f.name, {au.mean, af.mean}, {au.std, af.std}});
                break;
            }
        }
    }

    prepare_run_dir(out, opt.force);
    std::vector<fs::path> written;
    std::vector<std::string> used;
    for (const auto& [name, svg] : loss_charts) {
        std::string n = name;
        for (int k = 2; std::find(used.begin(), used.end(), n) != used.end(); ++k) n = name + "_" + std::to_string(k);
        used.push_back(n);
        written.push_back(out / ("loss_" + n + ".svg"));
        write_text(written.back(), svg);
    }
    if (!val_series.empty()) {
        written.push_back(out / "val_dice.svg");
        write_text(written.back(),
                   line_chart_svg(val_series, {"Validation mean Dice per epoch", "epoch", "mean Dice"}, false));
    }
    if (!bars.empty()) {
        written.push_back(out / "dice_bars.svg");
        write_text(written.back(),
                   bar_chart_svg(bars, {"unadapted", "final"}, {"Target test mean Dice (%)", "run", "mean Dice (%)"}));
    }
    for (const auto& p : written) say(opt, "wrote " + p.string());
    return written;
}

void write_report(const fs::path& dir, const MetricsReport& r) {
    fs::create_directories(dir);
    write_text(dir / "per_scan.csv", r.per_scan_csv());
    write_text(dir / "summary.csv", r.summary_csv());
    write_text(dir / "table.txt", r.table());
}

}  // namespace uda
