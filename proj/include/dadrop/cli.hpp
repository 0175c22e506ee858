#pragma once

// Command-line driver: gen-data, train, eval, diagnose, ablation.
//
// Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or
// configuration error.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dadrop/config.hpp"
#include "dadrop/eval.hpp"
#include "dadrop/synthdata.hpp"
#include "dadrop/training.hpp"

namespace dadrop::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// The six splits of a benchmark directory.
struct Benchmark {
    synth::Dataset source_train;
    synth::Dataset target_train;  // unlabelled
    synth::Dataset source_val;
    synth::Dataset target_val;
    synth::Dataset source_test;
    synth::Dataset target_test;
};

std::filesystem::path manifest_path(const std::filesystem::path& data_dir, const std::string& split, Domain domain);

// Writes every split under out_dir; returns the manifest hashes in split order.
std::vector<synth::ManifestInfo> generate_benchmark(const RunConfig& config, const std::filesystem::path& out_dir);
Benchmark load_benchmark(const std::filesystem::path& data_dir);
// Same content as generate_benchmark followed by load_benchmark, in memory.
Benchmark make_benchmark(const RunConfig& config);

eval::EvalReport evaluate(Backbone& backbone, const synth::Dataset& data, double threshold);

struct ExperimentResult {
    Mode mode = Mode::baseline;
    std::uint64_t seed = 0;
    eval::EvalReport target_test;
    eval::EvalReport source_test;
    std::vector<double> probe_accuracy;  // blocks 1..6
    double mean_probe_accuracy = 0.0;
    double median_discrepancy = 0.0;
    std::string final_checkpoint_hash;
    double train_seconds = 0.0;
};

// Trains one run and scores the final model on the test splits.
ExperimentResult run_experiment(const RunConfig& config, const Benchmark& data,
                                const std::optional<std::filesystem::path>& out_dir);

std::string ablation_csv(const std::vector<ExperimentResult>& results, int num_labels);
// Per-mode means over seeds, one row per mode in run order.
std::string ablation_summary_csv(const std::vector<ExperimentResult>& results, int num_labels);

}  // namespace dadrop::cli
