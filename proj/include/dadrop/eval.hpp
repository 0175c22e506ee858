#pragma once

// Detection metrics and domain diagnostics.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dadrop/backbone.hpp"
#include "dadrop/synthdata.hpp"

namespace dadrop::eval {

struct LabelCounts {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;
};

struct EvalReport {
    std::vector<double> per_label_f1;
    std::vector<double> precision;
    std::vector<double> recall;
    double macro_f1 = 0.0;
    std::vector<LabelCounts> counts;
    double threshold = 0.5;
};

// A prediction is positive when probability >= threshold. P, R and F1 that
// would be 0/0 are reported as 0.
EvalReport f1_scores(std::span<const float> probabilities, std::span<const float> labels, int batch,
                     int num_labels, double threshold = 0.5);

struct DiscrepancyReport {
    std::vector<double> per_token_d;  // percent, [0,100]
    std::vector<double> source_means;
    std::vector<double> target_means;

    double median() const;
};

// D_i = |a_s - a_t| / max(|a_s|, |a_t|) * 100, 0 when both are 0, capped at 100.
DiscrepancyReport discrepancy_from_means(std::span<const double> source_means, std::span<const double> target_means);

// Per-token mean activation of the final transformer block output, averaged
// over the dataset: a_i = mean_images mean_dims x_i.
std::vector<double> token_activation_means(Backbone& backbone, const synth::Dataset& data, int batch_size = 64);

DiscrepancyReport domain_discrepancy(Backbone& backbone, const synth::Dataset& source, const synth::Dataset& target);

inline constexpr int kProbeSteps = 200;
inline constexpr double kProbeLr = 0.1;
inline constexpr int kProbeMinPerDomain = 32;

// Fresh logistic-regression probe on standardized features (n, width):
// stratified 50/50 split, 200 full-batch gradient steps at lr 0.1, returns
// held-out accuracy. domains[i] in {0,1}.
double probe_accuracy(std::span<const float> features, int width, std::span<const int> domains, std::uint64_t seed);

// GAP'd features of block 1..6, pooled as the block's discriminator pools them:
// channel means of residual outputs 1-3, per-token means of transformer outputs 4-6.
std::vector<float> block_features(Backbone& backbone, const synth::Dataset& data, int block_id, int& width,
                                  int batch_size = 64);

double block_probe_accuracy(Backbone& backbone, const synth::Dataset& source, const synth::Dataset& target,
                            int block_id, std::uint64_t seed);

// Probe accuracy for all six blocks with one feature pass over the data.
std::vector<double> all_block_probe_accuracies(Backbone& backbone, const synth::Dataset& source,
                                               const synth::Dataset& target, std::uint64_t seed);

// CSV + JSON summary writers. Directories are created as needed.
void write_eval_report(const EvalReport& report, const std::filesystem::path& csv_path,
                       const std::filesystem::path& summary_path);
void write_discrepancy_report(const DiscrepancyReport& report, const std::filesystem::path& csv_path,
                              const std::filesystem::path& summary_path);
void write_probe_report(std::span<const double> accuracies, const std::filesystem::path& csv_path);
// Bar chart of the per-token D_i as a PNG.
void write_discrepancy_plot(const DiscrepancyReport& report, const std::filesystem::path& png_path);

EvalReport read_eval_csv(const std::filesystem::path& csv_path);
DiscrepancyReport read_discrepancy_csv(const std::filesystem::path& csv_path);

}  // namespace dadrop::eval
