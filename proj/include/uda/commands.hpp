#pragma once

// Command implementations behind the `uda` executable. Each writes into a run
// directory and throws on failure; exit_code_for maps the exception.

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "uda/config.hpp"
#include "uda/io.hpp"

namespace uda {

namespace fs = std::filesystem;

// 2 for input/validation errors, 3 for numerical failures, 1 otherwise.
int exit_code_for(const std::exception& e);

// Splits a freshly generated dataset by index (see DatasetSplits).
DatasetSplits make_splits(const ExperimentConfig& cfg);

// Creates `dir`. A non-empty existing directory is an error unless `force`.
void prepare_run_dir(const fs::path& dir, bool force);

// Accepts either a checkpoint stem or a run directory holding `model.*`.
fs::path resolve_checkpoint(const fs::path& p);

struct CommandOptions {
    bool force = false;
    std::ostream* progress = nullptr;  // one line per milestone; null for silence
};

void cmd_synth(const ExperimentConfig& cfg, const fs::path& out, const CommandOptions& opt);

struct SourceResult {
    double val_mean_dice = 0.0;  // fraction, on source_val
};

// `resume` continues from out/model when it exists.
SourceResult cmd_train_source(const ExperimentConfig& cfg, const fs::path& data, const fs::path& out, bool resume,
                              const CommandOptions& opt);

enum class Ablation { none, kl, adv };
Ablation parse_ablation(const std::string& s);

struct RunResult {
    int index = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> target_scans;
    double unadapted_mean_dice = 0.0;  // source route on target_test
    double final_mean_dice = 0.0;      // target route on target_test
    double cv_last20 = 0.0;            // over the last 20 validation evaluations
    int evaluations = 0;
    bool stopped_early = false;
};

struct AdaptOptions {
    Ablation ablate = Ablation::none;
    int jobs = 1;  // concurrent seeds; results do not depend on it
};

// Runs cfg.seeds draws into out/seed_<k> and writes out/summary.csv.
std::vector<RunResult> cmd_adapt(const ExperimentConfig& cfg, const fs::path& source_checkpoint, const fs::path& data,
                                 const fs::path& out, const AdaptOptions& aopt, const CommandOptions& opt);

// Supervised fine-tuning on every labelled target training volume; same
// layout as cmd_adapt.
std::vector<RunResult> cmd_oracle(const ExperimentConfig& cfg, const fs::path& source_checkpoint, const fs::path& data,
                                  const fs::path& out, int jobs, const CommandOptions& opt);

enum class DomainChoice { automatic, source, target };

// `split` names a DatasetSplits member. automatic uses the source route for
// source-phase checkpoints and the target route otherwise.
MetricsReport cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& data,
                           const std::string& split, DomainChoice domain, const fs::path& out,
                           const CommandOptions& opt);

// Inputs are log CSVs or run directories (searched for train_log.csv,
// val_dice.csv and summary.csv).
std::vector<fs::path> cmd_plot(const std::vector<fs::path>& inputs, const fs::path& out, const CommandOptions& opt);

// Writes per_scan.csv, summary.csv and table.txt.
void write_report(const fs::path& dir, const MetricsReport& r);

}  // namespace uda
