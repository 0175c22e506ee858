#pragma once

// Hybrid CNN -> transformer feature extractor.
//
// stem -> residual blocks 1..3 -> pointwise projection + flatten + position
// embedding -> transformer blocks 1..3 -> mean over tokens -> linear head.
// Channel insertion points sit after each residual block; token insertion
// points sit before each transformer block. No class token is used.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dadrop/ops.hpp"
#include "dadrop/rng.hpp"
#include "dadrop/tensor.hpp"

namespace dadrop {

enum class ScalePreset { table1, toy };

std::string to_string(ScalePreset preset);
ScalePreset parse_scale_preset(const std::string& text);

struct BackboneConfig {
    int image_size = 64;
    int in_channels = 3;
    std::array<int, 3> stage_channels{16, 32, 64};
    std::array<int, 3> stage_depths{2, 2, 2};
    int token_dim = 48;
    int transformer_blocks = 3;
    int layers_per_block = 2;
    int heads = 4;
    int num_labels = 6;
    ScalePreset scale_preset = ScalePreset::toy;

    static BackboneConfig toy();
    // Full-size layout: ResNet-50 stages with the fourth folded into the
    // third, then 12 ViT-B/16 encoders in three groups of four.
    static BackboneConfig table1();

    // Throws ConfigError naming the first violated invariant.
    void validate() const;

    int stem_channels() const { return stage_channels[0] / 4; }
    int bottleneck_width(int stage) const { return stage_channels.at(stage) / 4; }
    // Spatial side after stage (0-based); stem divides by 4, stages 2 and 3 by 2.
    int stage_side(int stage) const;
    int num_tokens() const;

    bool operator==(const BackboneConfig&) const = default;
};

// Field-by-field differences, formatted "name: a != b".
std::vector<std::string> config_differences(const BackboneConfig& a, const BackboneConfig& b);

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

struct NamedBuffer {
    std::string name;
    std::vector<float>* values;
};

// Maps a feature to a masked feature of identical shape.
using FeatureHook = std::function<Tensor(const Tensor&)>;

// At most one channel hook (after residual block channel_block) and one
// token hook (before transformer block token_block). Blocks are 1-based.
struct InsertionHooks {
    int channel_block = 0;
    FeatureHook channel;
    int token_block = 0;
    FeatureHook token;

    bool empty() const { return !channel && !token; }
};

struct ForwardOutput {
    Tensor logits;                        // (B, J)
    std::array<Tensor, 3> channel_features;  // residual block outputs, before any hook
    std::array<Tensor, 3> token_features;    // transformer block inputs, before any hook
    std::array<Tensor, 3> block_outputs;     // transformer block outputs
};

class Backbone {
public:
    Backbone(const BackboneConfig& config, std::uint64_t seed);
    // Parameters are shared handles; copying would alias them.
    Backbone(const Backbone&) = delete;
    Backbone& operator=(const Backbone&) = delete;
    Backbone(Backbone&&) = default;
    Backbone& operator=(Backbone&&) = default;

    const BackboneConfig& config() const { return config_; }

    // images (B, in_channels, image_size, image_size). training selects batch
    // statistics in the CNN normalization layers.
    ForwardOutput forward(const Tensor& images, const InsertionHooks& hooks = {}, bool training = false);

    // Logistic of the hook-free, evaluation-mode logits, (B, J) row-major.
    std::vector<float> predict(const Tensor& images);

    std::vector<NamedParameter> parameters() const;
    std::vector<NamedBuffer> buffers();

private:
    struct Conv {
        Tensor weight;
        Tensor bias;  // undefined when the conv has no bias
        int stride = 1;
        int pad = 0;
    };
    struct Norm {
        Tensor gamma;
        Tensor beta;
        ops::BatchNormState state;
    };
    struct Bottleneck {
        Conv reduce, spatial, expand, shortcut;
        Norm reduce_norm, spatial_norm, expand_norm, shortcut_norm;
        bool has_shortcut = false;
    };
    struct Linear {
        Tensor weight;
        Tensor bias;
    };
    struct LayerNorm {
        Tensor gamma;
        Tensor beta;
    };
    struct Encoder {
        LayerNorm attn_norm, mlp_norm;
        Linear qkv, attn_out, mlp_in, mlp_out;
    };

    Conv make_conv(int cin, int cout, int k, int stride, int pad, bool bias, Rng& rng);
    Norm make_norm(int channels);
    Linear make_linear(int in, int out, Rng& rng);
    LayerNorm make_layer_norm(int width);

    Tensor conv(const Conv& c, const Tensor& x) const;
    Tensor norm(Norm& n, const Tensor& x, bool training);
    Tensor bottleneck(Bottleneck& b, const Tensor& x, bool training);
    Tensor encoder(const Encoder& e, const Tensor& x) const;

    BackboneConfig config_;
    Conv stem_;
    Norm stem_norm_;
    std::array<std::vector<Bottleneck>, 3> stages_;
    Conv projection_;
    Tensor position_;
    std::array<std::vector<Encoder>, 3> transformer_;
    Linear head_;
};

// Shapes of the intermediate features for a batch size, from stride arithmetic.
struct FeatureShapes {
    std::array<Shape, 3> channel;
    std::array<Shape, 3> token;
};
FeatureShapes expected_shapes(const BackboneConfig& config, std::int64_t batch);

}  // namespace dadrop
