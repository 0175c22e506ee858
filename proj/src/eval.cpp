#include "dadrop/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dadrop/drop_units.hpp"
#include "dadrop/errors.hpp"
#include "dadrop/io.hpp"
#include "dadrop/ops.hpp"

namespace dadrop::eval {

using nlohmann::json;

namespace {
double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}
}  // namespace

EvalReport f1_scores(std::span<const float> probabilities, std::span<const float> labels, int batch, int num_labels,
                     double threshold) {
    const auto n = static_cast<std::size_t>(batch) * static_cast<std::size_t>(num_labels);
    if (probabilities.size() != n || labels.size() != n) throw ShapeError("f1_scores: expected (B,J) inputs");
    EvalReport r;
    r.threshold = threshold;
    r.counts.assign(static_cast<std::size_t>(num_labels), {});
    for (int b = 0; b < batch; ++b) {
        for (int j = 0; j < num_labels; ++j) {
            const std::size_t i = static_cast<std::size_t>(b) * num_labels + j;
            const float y = labels[i];
            if (y != 0.0f && y != 1.0f) throw ConfigError("f1_scores: labels must be binary");
            const bool pred = probabilities[i] >= threshold;
            auto& c = r.counts[j];
            if (pred && y == 1.0f) ++c.tp;
            else if (pred) ++c.fp;
            else if (y == 1.0f) ++c.fn;
        }
    }
    double sum = 0.0;
    for (const auto& c : r.counts) {
        const double p = safe_ratio(c.tp, c.tp + c.fp);
        const double rec = safe_ratio(c.tp, c.tp + c.fn);
        const double f1 = safe_ratio(2.0 * p * rec, p + rec);
        r.precision.push_back(p);
        r.recall.push_back(rec);
        r.per_label_f1.push_back(f1);
        sum += f1;
    }
    r.macro_f1 = num_labels > 0 ? sum / num_labels : 0.0;
    return r;
}

double DiscrepancyReport::median() const {
    if (per_token_d.empty()) return 0.0;
    auto v = per_token_d;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

DiscrepancyReport discrepancy_from_means(std::span<const double> source_means, std::span<const double> target_means) {
    if (source_means.size() != target_means.size()) throw ShapeError("discrepancy: token count mismatch");
    DiscrepancyReport r;
    r.source_means.assign(source_means.begin(), source_means.end());
    r.target_means.assign(target_means.begin(), target_means.end());
    for (std::size_t i = 0; i < source_means.size(); ++i) {
        const double as = source_means[i], at = target_means[i];
        const double den = std::max(std::abs(as), std::abs(at));
        const double d = den == 0.0 ? 0.0 : std::abs(as - at) / den * 100.0;
        r.per_token_d.push_back(std::min(d, 100.0));
    }
    return r;
}

std::vector<double> token_activation_means(Backbone& backbone, const synth::Dataset& data, int batch_size) {
    if (data.size() == 0) throw DataError("discrepancy needs a non-empty image set");
    NoGradGuard no_grad;
    const auto n_tokens = static_cast<std::size_t>(backbone.config().num_tokens());
    std::vector<double> sums(n_tokens, 0.0);
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        const auto out = backbone.forward(synth::stack_images(data, idx), {}, false);
        const Tensor per_token = ops::mean_features(out.block_outputs[2]);
        const auto v = per_token.data();
        for (std::size_t b = 0; b < idx.size(); ++b)
            for (std::size_t t = 0; t < n_tokens; ++t) sums[t] += v[b * n_tokens + t];
    }
    for (auto& s : sums) s /= static_cast<double>(data.size());
    return sums;
}

DiscrepancyReport domain_discrepancy(Backbone& backbone, const synth::Dataset& source, const synth::Dataset& target) {
    const auto as = token_activation_means(backbone, source);
    const auto at = token_activation_means(backbone, target);
    return discrepancy_from_means(as, at);
}

double probe_accuracy(std::span<const float> features, int width, std::span<const int> domains, std::uint64_t seed) {
    const std::size_t n = domains.size();
    if (width < 1 || features.size() != n * static_cast<std::size_t>(width)) throw ShapeError("probe: feature shape mismatch");
    std::vector<std::size_t> by_domain[2];
    for (std::size_t i = 0; i < n; ++i) {
        if (domains[i] != 0 && domains[i] != 1) throw ConfigError("probe: domain label must be 0 or 1");
        by_domain[domains[i]].push_back(i);
    }
    for (int d = 0; d < 2; ++d) {
        if (static_cast<int>(by_domain[d].size()) < kProbeMinPerDomain) {
            throw DataError("probe needs >= " + std::to_string(kProbeMinPerDomain) + " images per domain, got " +
                            std::to_string(by_domain[d].size()));
        }
    }
    Rng rng(derive_seed(seed, {kStreamProbe}));
    std::vector<std::size_t> train, test;
    for (auto& idx : by_domain) {
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
        const std::size_t half = idx.size() / 2;
        train.insert(train.end(), idx.begin(), idx.begin() + half);
        test.insert(test.end(), idx.begin() + half, idx.end());
    }
    const auto w_n = static_cast<std::size_t>(width);
    std::vector<double> mean(w_n, 0.0), stdev(w_n, 0.0);
    for (auto i : train)
        for (std::size_t k = 0; k < w_n; ++k) mean[k] += features[i * w_n + k];
    for (auto& m : mean) m /= static_cast<double>(train.size());
    for (auto i : train)
        for (std::size_t k = 0; k < w_n; ++k) {
            const double d = features[i * w_n + k] - mean[k];
            stdev[k] += d * d;
        }
    for (auto& s : stdev) s = std::max(std::sqrt(s / static_cast<double>(train.size())), 1e-6);
    auto feature = [&](std::size_t i, std::size_t k) { return (features[i * w_n + k] - mean[k]) / stdev[k]; };

    std::vector<double> w(w_n, 0.0), grad(w_n);
    double bias = 0.0;
    for (int step = 0; step < kProbeSteps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double gb = 0.0;
        for (auto i : train) {
            double z = bias;
            for (std::size_t k = 0; k < w_n; ++k) z += w[k] * feature(i, k);
            const double err = 1.0 / (1.0 + std::exp(-z)) - domains[i];
            for (std::size_t k = 0; k < w_n; ++k) grad[k] += err * feature(i, k);
            gb += err;
        }
        const double scale = kProbeLr / static_cast<double>(train.size());
        for (std::size_t k = 0; k < w_n; ++k) w[k] -= scale * grad[k];
        bias -= scale * gb;
    }
    std::size_t correct = 0;
    for (auto i : test) {
        double z = bias;
        for (std::size_t k = 0; k < w_n; ++k) z += w[k] * feature(i, k);
        if ((z >= 0.0 ? 1 : 0) == domains[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

namespace {
// Features for all six blocks in one pass: out[block-1] is (n, width[block-1]).
std::array<std::vector<float>, 6> collect_block_features(Backbone& backbone, const synth::Dataset& data,
                                                         std::array<int, 6>& widths, int batch_size) {
    NoGradGuard no_grad;
    std::array<std::vector<float>, 6> feats;
    const auto& c = backbone.config();
    for (int i = 0; i < 3; ++i) {
        widths[i] = c.stage_channels[i];
        widths[3 + i] = c.num_tokens();
    }
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        const auto out = backbone.forward(synth::stack_images(data, idx), {}, false);
        for (int i = 0; i < 3; ++i) {
            const Tensor g = ops::mean_spatial(out.channel_features[i]);
            feats[i].insert(feats[i].end(), g.data().begin(), g.data().end());
            const Tensor t = gap(out.block_outputs[i]);
            feats[3 + i].insert(feats[3 + i].end(), t.data().begin(), t.data().end());
        }
    }
    return feats;
}
}  // namespace

std::vector<float> block_features(Backbone& backbone, const synth::Dataset& data, int block_id, int& width,
                                  int batch_size) {
    if (block_id < 1 || block_id > 6) throw ConfigError("block_id must be in 1..6");
    std::array<int, 6> widths{};
    auto feats = collect_block_features(backbone, data, widths, batch_size);
    width = widths[block_id - 1];
    return std::move(feats[block_id - 1]);
}

std::vector<double> all_block_probe_accuracies(Backbone& backbone, const synth::Dataset& source,
                                               const synth::Dataset& target, std::uint64_t seed) {
    if (static_cast<int>(source.size()) < kProbeMinPerDomain || static_cast<int>(target.size()) < kProbeMinPerDomain) {
        throw DataError("probe needs >= " + std::to_string(kProbeMinPerDomain) + " images per domain");
    }
    std::array<int, 6> widths{};
    auto fs = collect_block_features(backbone, source, widths, 64);
    auto ft = collect_block_features(backbone, target, widths, 64);
    std::vector<int> domains(source.size(), 0);
    domains.resize(source.size() + target.size(), 1);
    std::vector<double> acc;
    for (int b = 0; b < 6; ++b) {
        std::vector<float> joined = std::move(fs[b]);
        joined.insert(joined.end(), ft[b].begin(), ft[b].end());
        acc.push_back(probe_accuracy(joined, widths[b], domains, seed));
    }
    return acc;
}

double block_probe_accuracy(Backbone& backbone, const synth::Dataset& source, const synth::Dataset& target,
                            int block_id, std::uint64_t seed) {
    if (block_id < 1 || block_id > 6) throw ConfigError("block_id must be in 1..6");
    return all_block_probe_accuracies(backbone, source, target, seed).at(block_id - 1);
}

void write_eval_report(const EvalReport& r, const std::filesystem::path& csv_path,
                       const std::filesystem::path& summary_path) {
    std::string csv = "label,tp,fp,fn,precision,recall,f1\n";
    for (std::size_t j = 0; j < r.per_label_f1.size(); ++j) {
        csv += std::to_string(j) + "," + std::to_string(r.counts[j].tp) + "," + std::to_string(r.counts[j].fp) + "," +
               std::to_string(r.counts[j].fn) + "," + fmt(r.precision[j]) + "," + fmt(r.recall[j]) + "," +
               fmt(r.per_label_f1[j]) + "\n";
    }
    csv += "macro,,,,,," + fmt(r.macro_f1) + "\n";
    io::write_text(csv_path, csv);
    json summary = {{"threshold", r.threshold}, {"macro_f1", r.macro_f1}, {"per_label_f1", r.per_label_f1}};
    io::write_text(summary_path, summary.dump(2) + "\n");
}

void write_discrepancy_report(const DiscrepancyReport& r, const std::filesystem::path& csv_path,
                              const std::filesystem::path& summary_path) {
    std::string csv = "token,a_source,a_target,d_percent\n";
    for (std::size_t i = 0; i < r.per_token_d.size(); ++i) {
        csv += std::to_string(i) + "," + fmt(r.source_means[i]) + "," + fmt(r.target_means[i]) + "," +
               fmt(r.per_token_d[i]) + "\n";
    }
    io::write_text(csv_path, csv);
    json summary = {{"tokens", r.per_token_d.size()}, {"median_d", r.median()}, {"per_token_d", r.per_token_d}};
    io::write_text(summary_path, summary.dump(2) + "\n");
}

void write_probe_report(std::span<const double> accuracies, const std::filesystem::path& csv_path) {
    std::string csv = "block,accuracy\n";
    for (std::size_t b = 0; b < accuracies.size(); ++b) csv += std::to_string(b + 1) + "," + fmt(accuracies[b]) + "\n";
    io::write_text(csv_path, csv);
}

void write_discrepancy_plot(const DiscrepancyReport& r, const std::filesystem::path& png_path) {
    const int n = static_cast<int>(r.per_token_d.size());
    const int bar = 6, gap = 2, margin = 10, plot_h = 160;
    io::RgbImage img;
    img.width = std::max(64, 2 * margin + n * (bar + gap));
    img.height = plot_h + 2 * margin;
    img.pixels.assign(static_cast<std::size_t>(img.width * img.height * 3), 255);
    auto put = [&](int x, int y, std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
        if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
        auto* p = &img.pixels[static_cast<std::size_t>((y * img.width + x) * 3)];
        p[0] = r8;
        p[1] = g8;
        p[2] = b8;
    };
    for (int x = margin; x < img.width - margin; ++x) put(x, margin + plot_h, 0, 0, 0);
    for (int i = 0; i < n; ++i) {
        const int h = static_cast<int>(std::lround(r.per_token_d[i] / 100.0 * plot_h));
        const int x0 = margin + i * (bar + gap);
        for (int y = margin + plot_h - h; y < margin + plot_h; ++y)
            for (int x = x0; x < x0 + bar; ++x) put(x, y, 40, 90, 200);
    }
    io::write_png(png_path, img);
}

EvalReport read_eval_csv(const std::filesystem::path& csv_path) {
    std::istringstream in(io::read_text(csv_path));
    std::string line;
    std::getline(in, line);
    EvalReport r;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 7) throw DataError("malformed eval CSV row: " + line);
        if (cells[0] == "macro") {
            r.macro_f1 = std::stod(cells[6]);
            continue;
        }
        r.counts.push_back({std::stoll(cells[1]), std::stoll(cells[2]), std::stoll(cells[3])});
        r.precision.push_back(std::stod(cells[4]));
        r.recall.push_back(std::stod(cells[5]));
        r.per_label_f1.push_back(std::stod(cells[6]));
    }
    return r;
}

DiscrepancyReport read_discrepancy_csv(const std::filesystem::path& csv_path) {
    std::istringstream in(io::read_text(csv_path));
    std::string line;
    std::getline(in, line);
    DiscrepancyReport r;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 4) throw DataError("malformed discrepancy CSV row: " + line);
        r.source_means.push_back(std::stod(cells[1]));
        r.target_means.push_back(std::stod(cells[2]));
        r.per_token_d.push_back(std::stod(cells[3]));
    }
    return r;
}

}  // namespace dadrop::eval
