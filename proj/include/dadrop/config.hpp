#pragma once

// Run configuration files.
//
// INI-style text with four sections:
//
//   [backbone]  architecture (scale_preset first, then per-field overrides)
//   [train]     TrainConfig fields
//   [data]      SyntheticSpec fields and split sizes
//   [eval]      threshold, batch_size, probe_seed, plot
//
// Unknown sections or keys are rejected. Lists are comma separated. When the
// environment variable DADROP_SEED is set it replaces train.seed, data.seed
// and eval.probe_seed.

#include <cstdint>
#include <filesystem>
#include <string>

#include "dadrop/synthdata.hpp"
#include "dadrop/training.hpp"

namespace dadrop {

struct SplitSizes {
    int train = 640;
    int val = 128;
    int test = 400;
};

struct EvalSettings {
    double threshold = 0.5;
    int batch_size = 64;
    std::uint64_t probe_seed = 0;
    bool plot = false;
};

struct RunConfig {
    TrainConfig train;
    synth::SyntheticSpec data = synth::SyntheticSpec::defaults();
    SplitSizes sizes;
    EvalSettings eval;

    // Cross-section checks: data and backbone must agree on image size and J.
    void validate() const;
    // Split sizes large enough for batching and diagnostics. Throws DataError.
    void check_split_sizes() const;
};

// Throws ConfigError for unreadable files, syntax errors, unknown keys and
// invalid values.
RunConfig parse_run_config(const std::string& text, bool apply_env = true);
RunConfig load_run_config(const std::filesystem::path& path, bool apply_env = true);
std::string format_run_config(const RunConfig& config);

// Fixed split seeds shared by gen-data and the in-memory benchmark.
std::uint64_t split_seed(const std::string& split, Domain domain);

}  // namespace dadrop
