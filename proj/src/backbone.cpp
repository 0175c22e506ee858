#include "dadrop/backbone.hpp"

#include <cmath>
#include <sstream>

#include "dadrop/errors.hpp"
#include "dadrop/losses.hpp"

namespace dadrop {

std::string to_string(ScalePreset preset) { return preset == ScalePreset::table1 ? "table1" : "toy"; }

ScalePreset parse_scale_preset(const std::string& text) {
    if (text == "table1") return ScalePreset::table1;
    if (text == "toy") return ScalePreset::toy;
    throw ConfigError("scale_preset must be 'table1' or 'toy', got '" + text + "'");
}

BackboneConfig BackboneConfig::toy() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::table1() {
    BackboneConfig c;
    c.image_size = 224;
    c.stage_channels = {256, 512, 1024};
    c.stage_depths = {3, 4, 9};
    c.token_dim = 768;
    c.layers_per_block = 4;
    c.heads = 12;
    c.num_labels = 12;
    c.scale_preset = ScalePreset::table1;
    return c;
}

void BackboneConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid backbone config: " + what); };
    if (image_size <= 0 || in_channels <= 0 || token_dim <= 0 || layers_per_block <= 0 || heads <= 0 ||
        num_labels <= 0) {
        fail("all counts must be strictly positive");
    }
    for (int s = 0; s < 3; ++s) {
        if (stage_channels[s] <= 0 || stage_depths[s] <= 0) fail("all counts must be strictly positive");
        if (stage_channels[s] % 4 != 0) {
            fail("stage_channels[" + std::to_string(s) + "]=" + std::to_string(stage_channels[s]) +
                 " must be divisible by 4 (bottleneck expansion)");
        }
    }
    if (transformer_blocks != 3) fail("transformer_blocks must be 3");
    if (token_dim % heads != 0) {
        fail("heads (" + std::to_string(heads) + ") must divide token_dim (" + std::to_string(token_dim) + ")");
    }
    if (image_size % 16 != 0) fail("image_size must be a multiple of 16 (total stride)");
}

int BackboneConfig::stage_side(int stage) const {
    int side = image_size / 4;
    for (int s = 1; s <= stage; ++s) side /= 2;
    return side;
}

int BackboneConfig::num_tokens() const {
    const int side = stage_side(2);
    return side * side;
}

std::vector<std::string> config_differences(const BackboneConfig& a, const BackboneConfig& b) {
    std::vector<std::string> out;
    auto cmp = [&](const char* name, const auto& x, const auto& y) {
        if (x == y) return;
        std::ostringstream os;
        os << name << ": ";
        if constexpr (requires { x.size(); }) {
            for (auto v : x) os << v << ' ';
            os << "!= ";
            for (auto v : y) os << v << ' ';
        } else {
            os << x << " != " << y;
        }
        out.push_back(os.str());
    };
    cmp("image_size", a.image_size, b.image_size);
    cmp("in_channels", a.in_channels, b.in_channels);
    cmp("stage_channels", a.stage_channels, b.stage_channels);
    cmp("stage_depths", a.stage_depths, b.stage_depths);
    cmp("token_dim", a.token_dim, b.token_dim);
    cmp("transformer_blocks", a.transformer_blocks, b.transformer_blocks);
    cmp("layers_per_block", a.layers_per_block, b.layers_per_block);
    cmp("heads", a.heads, b.heads);
    cmp("num_labels", a.num_labels, b.num_labels);
    cmp("scale_preset", to_string(a.scale_preset), to_string(b.scale_preset));
    return out;
}

FeatureShapes expected_shapes(const BackboneConfig& config, std::int64_t batch) {
    FeatureShapes s;
    for (int i = 0; i < 3; ++i) {
        const std::int64_t side = config.stage_side(i);
        s.channel[i] = {batch, config.stage_channels[i], side, side};
        s.token[i] = {batch, config.num_tokens(), config.token_dim};
    }
    return s;
}

namespace {

std::vector<float> normal_values(std::int64_t n, double stddev, Rng& rng) {
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<float>(normal(rng, 0.0, stddev));
    return v;
}

std::vector<float> uniform_values(std::int64_t n, double bound, Rng& rng) {
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<float>((2.0 * uniform_open(rng) - 1.0) * bound);
    return v;
}

}  // namespace

Backbone::Conv Backbone::make_conv(int cin, int cout, int k, int stride, int pad, bool bias, Rng& rng) {
    Conv c;
    const std::int64_t fan_in = static_cast<std::int64_t>(cin) * k * k;
    c.weight = Tensor::parameter({cout, cin, k, k},
                                 normal_values(fan_in * cout, std::sqrt(2.0 / static_cast<double>(fan_in)), rng));
    if (bias) c.bias = Tensor::parameter({cout}, std::vector<float>(static_cast<std::size_t>(cout), 0.0f));
    c.stride = stride;
    c.pad = pad;
    return c;
}

Backbone::Norm Backbone::make_norm(int channels) {
    Norm n;
    const auto c = static_cast<std::size_t>(channels);
    n.gamma = Tensor::parameter({channels}, std::vector<float>(c, 1.0f));
    n.beta = Tensor::parameter({channels}, std::vector<float>(c, 0.0f));
    n.state.running_mean.assign(c, 0.0f);
    n.state.running_var.assign(c, 1.0f);
    return n;
}

Backbone::Linear Backbone::make_linear(int in, int out, Rng& rng) {
    Linear l;
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    l.weight = Tensor::parameter({out, in}, uniform_values(static_cast<std::int64_t>(in) * out, bound, rng));
    l.bias = Tensor::parameter({out}, std::vector<float>(static_cast<std::size_t>(out), 0.0f));
    return l;
}

Backbone::LayerNorm Backbone::make_layer_norm(int width) {
    LayerNorm n;
    const auto w = static_cast<std::size_t>(width);
    n.gamma = Tensor::parameter({width}, std::vector<float>(w, 1.0f));
    n.beta = Tensor::parameter({width}, std::vector<float>(w, 0.0f));
    return n;
}

Backbone::Backbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(derive_seed(seed, {kStreamInit}));
    const auto& c = config_;

    stem_ = make_conv(c.in_channels, c.stem_channels(), 7, 2, 3, false, rng);
    stem_norm_ = make_norm(c.stem_channels());
    int in = c.stem_channels();
    for (int s = 0; s < 3; ++s) {
        const int width = c.bottleneck_width(s);
        const int out = c.stage_channels[s];
        for (int d = 0; d < c.stage_depths[s]; ++d) {
            const int stride = (d == 0 && s > 0) ? 2 : 1;
            Bottleneck b;
            b.reduce = make_conv(in, width, 1, 1, 0, false, rng);
            b.reduce_norm = make_norm(width);
            b.spatial = make_conv(width, width, 3, stride, 1, false, rng);
            b.spatial_norm = make_norm(width);
            b.expand = make_conv(width, out, 1, 1, 0, false, rng);
            b.expand_norm = make_norm(out);
            if (d == 0) {
                b.has_shortcut = true;
                b.shortcut = make_conv(in, out, 1, stride, 0, false, rng);
                b.shortcut_norm = make_norm(out);
            }
            stages_[s].push_back(std::move(b));
            in = out;
        }
    }

    projection_ = make_conv(in, c.token_dim, 1, 1, 0, true, rng);
    position_ = Tensor::parameter({c.num_tokens(), c.token_dim},
                                  normal_values(static_cast<std::int64_t>(c.num_tokens()) * c.token_dim, 0.02, rng));
    for (int t = 0; t < 3; ++t) {
        for (int l = 0; l < c.layers_per_block; ++l) {
            Encoder e;
            e.attn_norm = make_layer_norm(c.token_dim);
            e.qkv = make_linear(c.token_dim, 3 * c.token_dim, rng);
            e.attn_out = make_linear(c.token_dim, c.token_dim, rng);
            e.mlp_norm = make_layer_norm(c.token_dim);
            e.mlp_in = make_linear(c.token_dim, 4 * c.token_dim, rng);
            e.mlp_out = make_linear(4 * c.token_dim, c.token_dim, rng);
            transformer_[t].push_back(std::move(e));
        }
    }
    head_ = make_linear(c.token_dim, c.num_labels, rng);
}

Tensor Backbone::conv(const Conv& c, const Tensor& x) const {
    return ops::conv2d(x, c.weight, c.bias.defined() ? &c.bias : nullptr, c.stride, c.pad);
}

Tensor Backbone::norm(Norm& n, const Tensor& x, bool training) {
    return ops::batch_norm(x, n.gamma, n.beta, n.state, training);
}

Tensor Backbone::bottleneck(Bottleneck& b, const Tensor& x, bool training) {
    Tensor h = ops::relu(norm(b.reduce_norm, conv(b.reduce, x), training));
    h = ops::relu(norm(b.spatial_norm, conv(b.spatial, h), training));
    h = norm(b.expand_norm, conv(b.expand, h), training);
    Tensor skip = b.has_shortcut ? norm(b.shortcut_norm, conv(b.shortcut, x), training) : x;
    return ops::relu(ops::add(h, skip));
}

Tensor Backbone::encoder(const Encoder& e, const Tensor& x) const {
    Tensor h = ops::layer_norm(x, e.attn_norm.gamma, e.attn_norm.beta);
    h = ops::linear(h, e.qkv.weight, &e.qkv.bias);
    h = ops::attention(h, config_.heads);
    h = ops::linear(h, e.attn_out.weight, &e.attn_out.bias);
    Tensor x1 = ops::add(x, h);
    h = ops::layer_norm(x1, e.mlp_norm.gamma, e.mlp_norm.beta);
    h = ops::gelu(ops::linear(h, e.mlp_in.weight, &e.mlp_in.bias));
    h = ops::linear(h, e.mlp_out.weight, &e.mlp_out.bias);
    return ops::add(x1, h);
}

namespace {
Tensor run_hook(const FeatureHook& hook, const Tensor& x, const char* where) {
    Tensor y = hook(x);
    if (!y.defined() || y.shape() != x.shape()) {
        throw HookContractError(std::string(where) + " hook must return shape " + shape_str(x.shape()) +
                                (y.defined() ? ", got " + shape_str(y.shape()) : ", got nothing"));
    }
    return y;
}
}  // namespace

ForwardOutput Backbone::forward(const Tensor& images, const InsertionHooks& hooks, bool training) {
    const auto& c = config_;
    if (images.rank() != 4 || images.dim(1) != c.in_channels || images.dim(2) != c.image_size ||
        images.dim(3) != c.image_size) {
        throw ShapeError("forward: expected images (B," + std::to_string(c.in_channels) + "," +
                         std::to_string(c.image_size) + "," + std::to_string(c.image_size) + "), got " +
                         shape_str(images.shape()));
    }
    if (hooks.channel && (hooks.channel_block < 1 || hooks.channel_block > 3)) {
        throw ConfigError("channel hook block must be in 1..3");
    }
    if (hooks.token && (hooks.token_block < 1 || hooks.token_block > 3)) {
        throw ConfigError("token hook block must be in 1..3");
    }

    ForwardOutput out;
    Tensor x = ops::relu(norm(stem_norm_, conv(stem_, images), training));
    x = ops::max_pool2d(x, 3, 2, 1);
    for (int s = 0; s < 3; ++s) {
        for (auto& b : stages_[s]) x = bottleneck(b, x, training);
        out.channel_features[s] = x;
        if (hooks.channel && hooks.channel_block == s + 1) x = run_hook(hooks.channel, x, "channel");
    }
    x = ops::to_tokens(conv(projection_, x));
    x = ops::add_position(x, position_);
    for (int t = 0; t < 3; ++t) {
        out.token_features[t] = x;
        if (hooks.token && hooks.token_block == t + 1) x = run_hook(hooks.token, x, "token");
        for (const auto& e : transformer_[t]) x = encoder(e, x);
        out.block_outputs[t] = x;
    }
    out.logits = ops::linear(ops::mean_tokens(x), head_.weight, &head_.bias);
    return out;
}

std::vector<float> Backbone::predict(const Tensor& images) {
    NoGradGuard no_grad;
    const auto out = forward(images, {}, false);
    std::vector<float> probs(out.logits.data().begin(), out.logits.data().end());
    for (auto& p : probs) p = static_cast<float>(losses::logistic(p));
    return probs;
}

std::vector<NamedParameter> Backbone::parameters() const {
    std::vector<NamedParameter> p;
    auto conv_params = [&](const std::string& name, const Conv& c) {
        p.push_back({name + ".weight", c.weight});
        if (c.bias.defined()) p.push_back({name + ".bias", c.bias});
    };
    auto norm_params = [&](const std::string& name, const Norm& n) {
        p.push_back({name + ".gamma", n.gamma});
        p.push_back({name + ".beta", n.beta});
    };
    auto linear_params = [&](const std::string& name, const Linear& l) {
        p.push_back({name + ".weight", l.weight});
        p.push_back({name + ".bias", l.bias});
    };
    auto ln_params = [&](const std::string& name, const LayerNorm& n) {
        p.push_back({name + ".gamma", n.gamma});
        p.push_back({name + ".beta", n.beta});
    };
    conv_params("backbone.stem.conv", stem_);
    norm_params("backbone.stem.norm", stem_norm_);
    for (int s = 0; s < 3; ++s) {
        for (std::size_t d = 0; d < stages_[s].size(); ++d) {
            const auto& b = stages_[s][d];
            const std::string base = "backbone.res" + std::to_string(s + 1) + "." + std::to_string(d);
            conv_params(base + ".reduce", b.reduce);
            norm_params(base + ".reduce_norm", b.reduce_norm);
            conv_params(base + ".spatial", b.spatial);
            norm_params(base + ".spatial_norm", b.spatial_norm);
            conv_params(base + ".expand", b.expand);
            norm_params(base + ".expand_norm", b.expand_norm);
            if (b.has_shortcut) {
                conv_params(base + ".shortcut", b.shortcut);
                norm_params(base + ".shortcut_norm", b.shortcut_norm);
            }
        }
    }
    conv_params("backbone.projection", projection_);
    p.push_back({"backbone.position", position_});
    for (int t = 0; t < 3; ++t) {
        for (std::size_t l = 0; l < transformer_[t].size(); ++l) {
            const auto& e = transformer_[t][l];
            const std::string base = "backbone.tf" + std::to_string(t + 1) + "." + std::to_string(l);
            ln_params(base + ".attn_norm", e.attn_norm);
            linear_params(base + ".qkv", e.qkv);
            linear_params(base + ".attn_out", e.attn_out);
            ln_params(base + ".mlp_norm", e.mlp_norm);
            linear_params(base + ".mlp_in", e.mlp_in);
            linear_params(base + ".mlp_out", e.mlp_out);
        }
    }
    linear_params("backbone.head", head_);
    return p;
}

std::vector<NamedBuffer> Backbone::buffers() {
    std::vector<NamedBuffer> out;
    auto add = [&](const std::string& name, Norm& n) {
        out.push_back({name + ".running_mean", &n.state.running_mean});
        out.push_back({name + ".running_var", &n.state.running_var});
    };
    add("backbone.stem.norm", stem_norm_);
    for (int s = 0; s < 3; ++s) {
        for (std::size_t d = 0; d < stages_[s].size(); ++d) {
            auto& b = stages_[s][d];
            const std::string base = "backbone.res" + std::to_string(s + 1) + "." + std::to_string(d);
            add(base + ".reduce_norm", b.reduce_norm);
            add(base + ".spatial_norm", b.spatial_norm);
            add(base + ".expand_norm", b.expand_norm);
            if (b.has_shortcut) add(base + ".shortcut_norm", b.shortcut_norm);
        }
    }
    return out;
}

}  // namespace dadrop
