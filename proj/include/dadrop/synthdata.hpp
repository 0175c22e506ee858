#pragma once

// Two-domain multi-label synthetic benchmark.
//
// Each label owns one cell of a 2x3 grid; an active label draws an oriented
// bar in its cell. Domains differ by global nuisances (tint, contrast,
// background gradient, band-limited texture) and the source domain carries a
// spurious global colour cue correlated with one label.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dadrop/drop_units.hpp"
#include "dadrop/rng.hpp"
#include "dadrop/tensor.hpp"

namespace dadrop::synth {

inline constexpr int kGeneratorVersion = 1;

struct Box {
    int x0, y0, x1, y1;  // half-open pixel bounds
};

struct DomainNuisance {
    std::array<double, 3> tint{0.0, 0.0, 0.0};
    double noise_freq = 0.1;  // cycles per pixel
    double noise_amplitude = 0.05;
    double contrast = 1.0;
    double bg_gradient_angle = 0.0;  // degrees
    double bg_gradient_strength = 0.15;
};

struct SpuriousCue {
    int label_index = 0;
    double cue_strength = 0.9;
    std::array<double, 3> color{0.15, 0.0, -0.05};
};

struct SyntheticSpec {
    int image_size = 64;
    int num_labels = 6;
    std::vector<double> cooccurrence;  // J*J row-major, symmetric, zero diagonal
    double base_rate = 0.3;
    double glyph_intensity = 0.35;
    double glyph_intensity_jitter = 0.1;
    DomainNuisance source;
    DomainNuisance target;
    SpuriousCue spurious_cue;
    std::uint64_t seed = 0;

    static SyntheticSpec defaults();

    // J regions tiling the 2x3 grid.
    std::vector<Box> regions() const;
    double coupling(int i, int j) const { return cooccurrence[static_cast<std::size_t>(i * num_labels + j)]; }
    const DomainNuisance& nuisance(Domain d) const { return d == Domain::source ? source : target; }

    void validate() const;
    // Canonical hash over the serialized spec.
    std::string hash() const;
};

nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec spec_from_json(const nlohmann::json& j);

struct LabeledSample {
    std::vector<float> image;  // (3,H,W) in [0,1]
    std::optional<std::vector<std::uint8_t>> labels;
    Domain domain = Domain::source;
    std::string sample_id;
};

std::vector<std::uint8_t> sample_labels(const SyntheticSpec& spec, Rng& rng);

// Glyph draws come first, then texture draws, then the cue draw, so paired
// renders with the same rng seed share glyph geometry across domains.
LabeledSample render(const SyntheticSpec& spec, const std::vector<std::uint8_t>& labels, Domain domain, Rng& rng);

// Rounds to 8-bit and back, the exact values a stored sample reloads as.
void quantize(std::vector<float>& image);

struct Dataset {
    std::vector<LabeledSample> samples;
    Domain domain = Domain::source;
    int image_size = 0;

    std::size_t size() const { return samples.size(); }
    bool labeled() const { return !samples.empty() && samples.front().labels.has_value(); }
};

// In-memory split: a pure function of (spec, domain, split, n, split_seed).
// Images are quantized exactly as generate_dataset stores them. Labels are
// dropped when keep_labels is false.
Dataset make_split(const SyntheticSpec& spec, Domain domain, const std::string& split, int n,
                   std::uint64_t split_seed, bool keep_labels = true);

struct ManifestInfo {
    std::filesystem::path manifest_path;
    std::string manifest_hash;
};

// Writes <out_dir>/<split>/<domain>/NNNNNN.png plus <out_dir>/<split>_<domain>.manifest.json
// and <out_dir>/spec.json.
ManifestInfo generate_dataset(const SyntheticSpec& spec, Domain domain, const std::string& split, int n,
                              std::uint64_t split_seed, const std::filesystem::path& out_dir,
                              bool keep_labels = true);

Dataset load_manifest(const std::filesystem::path& manifest_path);

std::string domain_name(Domain d);
Domain parse_domain(const std::string& text);

struct Batch {
    Tensor source_images;  // (B,3,H,W)
    std::vector<float> source_labels;  // (B,J)
    Tensor target_images;  // (B,3,H,W)
    std::vector<std::uint64_t> source_keys;  // per-sample rng keys
    std::vector<std::uint64_t> target_keys;
    std::vector<std::string> source_ids;
    std::vector<std::string> target_ids;
};

// Stacks images of the given samples into (B,3,H,W).
Tensor stack_images(const Dataset& data, std::span<const std::size_t> indices);
std::vector<float> stack_labels(const Dataset& data, std::span<const std::size_t> indices);

// One epoch of mixed batches: batch_per_domain labelled source samples plus
// batch_per_domain unlabelled target samples per step. Each domain follows
// its own seeded permutation; the shorter one wraps around.
class MixedBatches {
public:
    MixedBatches(const Dataset& source, const Dataset& target, int batch_per_domain, std::uint64_t epoch_seed);

    std::size_t steps() const { return steps_; }
    Batch batch(std::size_t step) const;

private:
    const Dataset& source_;
    const Dataset& target_;
    int batch_;
    std::size_t steps_;
    std::vector<std::size_t> source_order_;
    std::vector<std::size_t> target_order_;
};

}  // namespace dadrop::synth
