#pragma once

// Flat key=value experiment configuration shared by every command.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uda/metrics.hpp"
#include "uda/nets.hpp"
#include "uda/synthdata.hpp"
#include "uda/trainer.hpp"

namespace uda {

struct ExperimentConfig {
    std::uint64_t seed = 7;

    // Dataset sizes; see DatasetSplits.
    int n_source = 16;
    int n_target = 16;
    int n_source_val = 2;
    int n_target_val = 1;
    int n_target_test = 4;
    DatasetConfig data;

    NetConfig net;
    TrainConfig train;
    EvalOptions eval;

    // Adaptation scenario.
    int target_scans = 1;
    bool few_shot = false;
    int few_shot_slices = 3;
    int seeds = 1;

    // Throws ConfigError for unknown keys or unparsable values.
    void set(const std::string& key, const std::string& value);
    void apply_text(const std::string& text, const std::string& origin);
    void apply_file(const std::filesystem::path& path);
    void validate() const;

    // Every key, one per line, in a fixed order. Re-applying it reproduces the config.
    [[nodiscard]] std::string to_text() const;
    [[nodiscard]] std::vector<std::string> keys() const;
    [[nodiscard]] std::string hash() const;
};

// Reads DETERMINISTIC from the environment.
bool deterministic_mode();

}  // namespace uda
