#pragma once

// Progressive doubly adaptive dropout training.
//
// Every step draws one residual block i and one transformer block j. In the
// adaptive modes, the discriminator at each drawn point scores its
// channels/tokens per sample, the highest-keyed units are zeroed in the
// forward pass, and the discriminator's domain loss (through gradient
// reversal) joins the detection loss.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "dadrop/backbone.hpp"
#include "dadrop/drop_units.hpp"
#include "dadrop/losses.hpp"
#include "dadrop/synthdata.hpp"

namespace dadrop {

enum class Mode { baseline, baseline_da, cd_only, td_only, audd };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& text);
inline constexpr std::array<Mode, 5> kAllModes{Mode::baseline, Mode::baseline_da, Mode::cd_only, Mode::td_only,
                                               Mode::audd};

struct TrainConfig {
    Mode mode = Mode::audd;
    double lambda = 0.25;
    double gamma = 0.33;
    double alpha = 1.0;
    double beta = 1.0;
    double lr = 0.001;
    double momentum = 0.9;
    int epochs = 20;
    int batch_per_domain = 16;
    std::uint64_t seed = 0;
    bool rescale_kept = false;
    losses::Reduction au_reduction = losses::Reduction::batch_mean;
    BackboneConfig backbone = BackboneConfig::toy();

    static TrainConfig full_scale();
    void validate() const;

    bool cd_active() const { return mode == Mode::cd_only || mode == Mode::audd; }
    bool td_active() const { return mode == Mode::td_only || mode == Mode::audd; }
};

nlohmann::json to_json(const BackboneConfig& c);
BackboneConfig backbone_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct LossBundle {
    double au_loss = 0.0;
    double cd_domain_loss = 0.0;
    double td_domain_loss = 0.0;
    double total = 0.0;  // value of the objective that was backpropagated
    int sampled_cnn_block = 0;
    int sampled_tf_block = 0;
    std::vector<DropMask> channel_masks;  // per sample, empty when no CD hook ran
    std::vector<DropMask> token_masks;
};

struct BlockPair {
    int cnn = 1;
    int tf = 1;
};

// Two uniform draws over {1,2,3}: residual block first, then transformer block.
BlockPair sample_blocks(Rng& rng);

// Backbone plus the six domain discriminators (three channel, three token).
class Model {
public:
    Model(const BackboneConfig& backbone_config, float grl_lambda, std::uint64_t seed);

    Backbone backbone;
    std::array<DomainDiscriminator, 3> channel_discs;
    std::array<DomainDiscriminator, 3> token_discs;

    std::vector<NamedParameter> parameters() const;
    std::vector<NamedBuffer> buffers() { return backbone.buffers(); }
};

// SGD with classical momentum; parameters without a gradient this step are
// left untouched (including their velocity).
class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

    void step(const std::vector<NamedParameter>& params);
    std::unordered_map<std::string, std::vector<float>>& velocity() { return velocity_; }
    const std::unordered_map<std::string, std::vector<float>>& velocity() const { return velocity_; }

private:
    double lr_;
    double momentum_;
    std::unordered_map<std::string, std::vector<float>> velocity_;
};

struct TrainingState {
    int epochs_completed = 0;
    std::uint64_t step = 0;
    double best_val_f1 = -1.0;
    int best_epoch = 0;
};

class Trainer {
public:
    Trainer(Model& model, TrainConfig config);

    // One optimizer step on a mixed batch (source half labelled).
    LossBundle step(const synth::Batch& batch);

    const TrainConfig& config() const { return config_; }
    TrainingState& state() { return state_; }
    const TrainingState& state() const { return state_; }
    SgdMomentum& optimizer() { return optimizer_; }
    Model& model() { return model_; }

private:
    Model& model_;
    TrainConfig config_;
    SgdMomentum optimizer_;
    TrainingState state_;
};

struct EpochMetrics {
    int epoch = 0;
    double au_loss = 0.0;
    double cd_domain_loss = 0.0;
    double td_domain_loss = 0.0;
    double total = 0.0;
    double val_macro_f1 = 0.0;
    std::array<std::array<int, 3>, 3> pair_histogram{};  // [cnn-1][tf-1]
};

struct TrainOptions {
    std::optional<std::filesystem::path> out_dir;  // checkpoints + metrics CSV when set
    std::function<void(const LossBundle&, std::uint64_t step)> on_step;
    bool verbose = false;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    std::optional<std::filesystem::path> best_checkpoint;
    std::optional<std::filesystem::path> final_checkpoint;
};

// Runs config.epochs epochs (continuing the trainer's epoch numbering).
// Throws NumericError naming the step and loss component on a non-finite loss.
TrainResult train(Trainer& trainer, const synth::Dataset& source_train, const synth::Dataset& target_train,
                  const synth::Dataset& source_val, const TrainOptions& options = {});

// Deterministic 10% hold-out of a labelled dataset: {train, validation}.
std::pair<synth::Dataset, synth::Dataset> holdout_split(const synth::Dataset& data, double fraction,
                                                        std::uint64_t seed);

// Predicted probabilities over a dataset, evaluated in batches.
std::vector<float> predict_dataset(Backbone& backbone, const synth::Dataset& data, int batch_size = 64);

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

}  // namespace dadrop
