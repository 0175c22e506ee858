#include "dadrop/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dadrop/checkpoint.hpp"
#include "dadrop/errors.hpp"
#include "dadrop/eval.hpp"
#include "dadrop/io.hpp"
#include "dadrop/ops.hpp"

namespace dadrop {

using nlohmann::json;

std::string to_string(Mode mode) {
    switch (mode) {
        case Mode::baseline: return "baseline";
        case Mode::baseline_da: return "baseline_da";
        case Mode::cd_only: return "cd_only";
        case Mode::td_only: return "td_only";
        case Mode::audd: return "audd";
    }
    return "?";
}

Mode parse_mode(const std::string& text) {
    for (auto m : kAllModes) {
        if (to_string(m) == text) return m;
    }
    throw ConfigError("unknown mode '" + text + "' (expected baseline, baseline_da, cd_only, td_only or audd)");
}

TrainConfig TrainConfig::full_scale() {
    TrainConfig c;
    c.epochs = 50;
    c.batch_per_domain = 36;
    c.backbone = BackboneConfig::table1();
    return c;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid train config: " + what); };
    if (!(gamma >= 0.0 && gamma < 1.0)) fail("gamma must be in [0, 1)");
    if (!(lambda >= 0.0)) fail("lambda must be >= 0");
    if (!(alpha >= 0.0) || !(beta >= 0.0)) fail("alpha and beta must be >= 0");
    if (batch_per_domain < 1) fail("batch_per_domain must be >= 1");
    if (epochs < 0) fail("epochs must be >= 0");
    if (!(lr > 0.0)) fail("lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0, 1)");
    backbone.validate();
}

json to_json(const BackboneConfig& c) {
    return {{"image_size", c.image_size},
            {"in_channels", c.in_channels},
            {"stage_channels", c.stage_channels},
            {"stage_depths", c.stage_depths},
            {"token_dim", c.token_dim},
            {"transformer_blocks", c.transformer_blocks},
            {"layers_per_block", c.layers_per_block},
            {"heads", c.heads},
            {"num_labels", c.num_labels},
            {"scale_preset", to_string(c.scale_preset)}};
}

BackboneConfig backbone_from_json(const json& j) {
    BackboneConfig c;
    c.image_size = j.at("image_size");
    c.in_channels = j.at("in_channels");
    c.stage_channels = j.at("stage_channels").get<std::array<int, 3>>();
    c.stage_depths = j.at("stage_depths").get<std::array<int, 3>>();
    c.token_dim = j.at("token_dim");
    c.transformer_blocks = j.at("transformer_blocks");
    c.layers_per_block = j.at("layers_per_block");
    c.heads = j.at("heads");
    c.num_labels = j.at("num_labels");
    c.scale_preset = parse_scale_preset(j.at("scale_preset"));
    return c;
}

json to_json(const TrainConfig& c) {
    return {{"mode", to_string(c.mode)},
            {"lambda", c.lambda},
            {"gamma", c.gamma},
            {"alpha", c.alpha},
            {"beta", c.beta},
            {"lr", c.lr},
            {"momentum", c.momentum},
            {"epochs", c.epochs},
            {"batch_per_domain", c.batch_per_domain},
            {"seed", c.seed},
            {"rescale_kept", c.rescale_kept},
            {"au_reduction", c.au_reduction == losses::Reduction::sum ? "sum" : "batch_mean"},
            {"backbone", to_json(c.backbone)}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.mode = parse_mode(j.at("mode"));
    c.lambda = j.at("lambda");
    c.gamma = j.at("gamma");
    c.alpha = j.at("alpha");
    c.beta = j.at("beta");
    c.lr = j.at("lr");
    c.momentum = j.at("momentum");
    c.epochs = j.at("epochs");
    c.batch_per_domain = j.at("batch_per_domain");
    c.seed = j.at("seed");
    c.rescale_kept = j.at("rescale_kept");
    c.au_reduction = j.at("au_reduction") == "sum" ? losses::Reduction::sum : losses::Reduction::batch_mean;
    c.backbone = backbone_from_json(j.at("backbone"));
    return c;
}

BlockPair sample_blocks(Rng& rng) {
    BlockPair p;
    p.cnn = 1 + static_cast<int>(uniform_index(rng, 3));
    p.tf = 1 + static_cast<int>(uniform_index(rng, 3));
    return p;
}

Model::Model(const BackboneConfig& backbone_config, float grl_lambda, std::uint64_t seed)
    : backbone(backbone_config, seed) {
    Rng rng(derive_seed(seed, {kStreamInit, 0xd15c}));
    const auto& c = backbone.config();
    for (int i = 0; i < 3; ++i) {
        channel_discs[i] = DomainDiscriminator::create(Granularity::channel, i + 1, c.stage_channels[i], grl_lambda, rng);
    }
    for (int j = 0; j < 3; ++j) {
        token_discs[j] = DomainDiscriminator::create(Granularity::token, j + 1, c.num_tokens(), grl_lambda, rng);
    }
}

std::vector<NamedParameter> Model::parameters() const {
    auto p = backbone.parameters();
    for (const auto* discs : {&channel_discs, &token_discs}) {
        for (const auto& d : *discs) {
            p.push_back({"disc." + d.name() + ".fc.weight", d.fc_weight});
            p.push_back({"disc." + d.name() + ".fc.bias", d.fc_bias});
        }
    }
    return p;
}

void SgdMomentum::step(const std::vector<NamedParameter>& params) {
    for (const auto& [name, tensor] : params) {
        if (!tensor.has_grad()) continue;
        auto& v = velocity_[name];
        auto t = tensor;
        if (v.empty()) v.assign(t.data().size(), 0.0f);
        const auto g = t.grad();
        auto d = t.data();
        const auto mu = static_cast<float>(momentum_);
        const auto lr = static_cast<float>(lr_);
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = mu * v[i] + g[i];
            d[i] -= lr * v[i];
        }
    }
}

Trainer::Trainer(Model& model, TrainConfig config)
    : model_(model), config_(std::move(config)), optimizer_(config_.lr, config_.momentum) {
    config_.validate();
    if (model_.backbone.config() != config_.backbone) {
        throw ConfigError("trainer config does not match the model's backbone config");
    }
    for (auto* discs : {&model_.channel_discs, &model_.token_discs}) {
        for (auto& d : *discs) d.grl_lambda = static_cast<float>(config_.lambda);
    }
}

namespace {

void check_finite(double v, const char* component, std::uint64_t step) {
    if (!std::isfinite(v)) {
        throw NumericError("non-finite " + std::string(component) + " (" + std::to_string(v) + ") at step " +
                           std::to_string(step));
    }
}

std::vector<DropMask> make_masks(const DomainDiscriminator& disc, const Tensor& feature, std::span<const int> domains,
                                 std::span<const std::uint64_t> keys, double gamma, std::uint64_t seed,
                                 std::uint64_t step) {
    const auto scores = sensitivity_scores(disc, feature, domains);
    std::vector<DropMask> masks;
    masks.reserve(scores.size());
    const std::uint64_t granularity = disc.granularity == Granularity::channel ? 0 : 1;
    for (std::size_t b = 0; b < scores.size(); ++b) {
        Rng rng(derive_seed(seed, {kStreamWrs, step, granularity, keys[b]}));
        masks.push_back(wrs_mask(scores[b].scores, gamma, rng));
    }
    return masks;
}

}  // namespace

LossBundle Trainer::step(const synth::Batch& batch) {
    const auto& cfg = config_;
    const std::int64_t n_src = batch.source_images.defined() ? batch.source_images.dim(0) : 0;
    if (n_src < 1) throw DataError("training step needs a non-empty source half");
    const std::int64_t n_tgt = batch.target_images.dim(0);
    const std::uint64_t step_index = state_.step;

    std::vector<int> domains(static_cast<std::size_t>(n_src + n_tgt), 0);
    std::fill(domains.begin() + n_src, domains.end(), 1);
    std::vector<std::uint64_t> keys(batch.source_keys);
    keys.insert(keys.end(), batch.target_keys.begin(), batch.target_keys.end());
    if (keys.size() != domains.size()) throw DataError("batch sample keys do not match batch size");

    Rng block_rng(derive_seed(cfg.seed, {kStreamBlocks, step_index}));
    const BlockPair pair = sample_blocks(block_rng);

    LossBundle bundle;
    bundle.sampled_cnn_block = pair.cnn;
    bundle.sampled_tf_block = pair.tf;

    const MaskOptions mask_opts{cfg.rescale_kept, cfg.gamma};
    InsertionHooks hooks;
    if (cfg.cd_active()) {
        hooks.channel_block = pair.cnn;
        hooks.channel = [&](const Tensor& x) {
            bundle.channel_masks = make_masks(model_.channel_discs[pair.cnn - 1], x, domains, keys, cfg.gamma,
                                              cfg.seed, step_index);
            return apply_channel_mask(x, bundle.channel_masks, mask_opts);
        };
    }
    if (cfg.td_active()) {
        hooks.token_block = pair.tf;
        hooks.token = [&](const Tensor& x) {
            bundle.token_masks = make_masks(model_.token_discs[pair.tf - 1], x, domains, keys, cfg.gamma,
                                            cfg.seed, step_index);
            return apply_token_mask(x, bundle.token_masks, mask_opts);
        };
    }

    const Tensor images = ops::concat_batch(batch.source_images, batch.target_images);
    const ForwardOutput out = model_.backbone.forward(images, hooks, true);

    const Tensor src_logits = ops::slice_batch(out.logits, 0, n_src);
    Tensor au = ops::au_loss(src_logits, batch.source_labels);
    if (cfg.au_reduction == losses::Reduction::sum) au = ops::scale(au, static_cast<float>(n_src));

    Tensor cd, td;
    switch (cfg.mode) {
        case Mode::baseline:
            break;
        case Mode::baseline_da: {
            for (int k = 0; k < 3; ++k) {
                Tensor c = domain_loss(model_.channel_discs[k], out.channel_features[k], domains);
                Tensor t = domain_loss(model_.token_discs[k], out.token_features[k], domains);
                cd = cd.defined() ? ops::add(cd, c) : c;
                td = td.defined() ? ops::add(td, t) : t;
            }
            cd = ops::scale(cd, 1.0f / 3.0f);
            td = ops::scale(td, 1.0f / 3.0f);
            break;
        }
        case Mode::cd_only:
        case Mode::td_only:
        case Mode::audd:
            if (cfg.cd_active()) {
                cd = domain_loss(model_.channel_discs[pair.cnn - 1], out.channel_features[pair.cnn - 1], domains);
            }
            if (cfg.td_active()) {
                td = domain_loss(model_.token_discs[pair.tf - 1], out.token_features[pair.tf - 1], domains);
            }
            break;
    }

    Tensor total = au;
    if (cd.defined()) total = ops::add(total, ops::scale(cd, static_cast<float>(cfg.alpha)));
    if (td.defined()) total = ops::add(total, ops::scale(td, static_cast<float>(cfg.beta)));

    bundle.au_loss = au.item();
    bundle.cd_domain_loss = cd.defined() ? cd.item() : 0.0;
    bundle.td_domain_loss = td.defined() ? td.item() : 0.0;
    bundle.total = total.item();
    check_finite(bundle.au_loss, "au_loss", step_index);
    check_finite(bundle.cd_domain_loss, "cd_domain_loss", step_index);
    check_finite(bundle.td_domain_loss, "td_domain_loss", step_index);
    check_finite(bundle.total, "total loss", step_index);

    const auto params = model_.parameters();
    for (const auto& p : params) p.tensor.node().grad.clear();
    total.backward();
    optimizer_.step(params);
    for (const auto& p : params) p.tensor.node().grad.clear();
    ++state_.step;
    return bundle;
}

std::pair<synth::Dataset, synth::Dataset> holdout_split(const synth::Dataset& data, double fraction,
                                                        std::uint64_t seed) {
    const std::size_t n = data.size();
    const auto n_val = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
    if (n_val < 1 || n_val >= n) throw DataError("hold-out split leaves an empty part");
    Rng rng(derive_seed(seed, {kStreamSplit}));
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
    synth::Dataset train, val;
    train.domain = val.domain = data.domain;
    train.image_size = val.image_size = data.image_size;
    for (std::size_t i = 0; i < n; ++i) {
        (i < n_val ? val : train).samples.push_back(data.samples[idx[i]]);
    }
    return {std::move(train), std::move(val)};
}

std::vector<float> predict_dataset(Backbone& backbone, const synth::Dataset& data, int batch_size) {
    std::vector<float> probs;
    probs.reserve(data.size() * static_cast<std::size_t>(backbone.config().num_labels));
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        const auto p = backbone.predict(synth::stack_images(data, idx));
        probs.insert(probs.end(), p.begin(), p.end());
    }
    return probs;
}

std::string metrics_csv_header() {
    return "epoch,au_loss,cd_do,td_do,total,val_macro_f1,sampled_pair_histogram";
}

std::string metrics_csv_row(const EpochMetrics& m) {
    json hist = json::array();
    for (const auto& row : m.pair_histogram) hist.push_back(row);
    std::string h = hist.dump();
    // CSV-quote the JSON string.
    std::string quoted = "\"";
    for (char c : h) {
        if (c == '"') quoted += '"';
        quoted += c;
    }
    quoted += '"';
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,", m.epoch, m.au_loss, m.cd_domain_loss,
                  m.td_domain_loss, m.total, m.val_macro_f1);
    return buf + quoted;
}

TrainResult train(Trainer& trainer, const synth::Dataset& source_train, const synth::Dataset& target_train,
                  const synth::Dataset& source_val, const TrainOptions& options) {
    const auto& cfg = trainer.config();
    if (!source_val.labeled()) throw DataError("validation split must be labelled");
    TrainResult result;
    std::filesystem::path csv_path;
    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        csv_path = *options.out_dir / "metrics.csv";
        const bool append = trainer.state().epochs_completed > 0 && std::filesystem::exists(csv_path);
        if (!append) io::write_text(csv_path, metrics_csv_header() + "\n");
    }
    auto& state = trainer.state();
    for (int e = 0; e < cfg.epochs; ++e) {
        const int epoch = state.epochs_completed + 1;
        synth::MixedBatches batches(source_train, target_train, cfg.batch_per_domain,
                                    derive_seed(cfg.seed, {kStreamDataOrder, static_cast<std::uint64_t>(epoch)}));
        EpochMetrics m;
        m.epoch = epoch;
        for (std::size_t s = 0; s < batches.steps(); ++s) {
            const auto bundle = trainer.step(batches.batch(s));
            m.au_loss += bundle.au_loss;
            m.cd_domain_loss += bundle.cd_domain_loss;
            m.td_domain_loss += bundle.td_domain_loss;
            m.total += bundle.total;
            ++m.pair_histogram[bundle.sampled_cnn_block - 1][bundle.sampled_tf_block - 1];
            if (options.on_step) options.on_step(bundle, state.step - 1);
        }
        const auto steps = static_cast<double>(batches.steps());
        m.au_loss /= steps;
        m.cd_domain_loss /= steps;
        m.td_domain_loss /= steps;
        m.total /= steps;
        const auto probs = predict_dataset(trainer.model().backbone, source_val);
        const auto labels = synth::stack_labels(source_val, [&] {
            std::vector<std::size_t> all(source_val.size());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
            return all;
        }());
        m.val_macro_f1 = eval::f1_scores(probs, labels, static_cast<int>(source_val.size()),
                                         cfg.backbone.num_labels)
                             .macro_f1;
        state.epochs_completed = epoch;
        const bool best = m.val_macro_f1 > state.best_val_f1;
        if (best) {
            state.best_val_f1 = m.val_macro_f1;
            state.best_epoch = epoch;
        }
        if (options.verbose) {
            std::cerr << "epoch " << epoch << " au " << m.au_loss << " cd " << m.cd_domain_loss << " td "
                      << m.td_domain_loss << " val_f1 " << m.val_macro_f1 << "\n";
        }
        if (options.out_dir) {
            std::ofstream(csv_path, std::ios::app) << metrics_csv_row(m) << "\n";
            if (best) {
                result.best_checkpoint = *options.out_dir / "best.ckpt";
                save_checkpoint(capture(trainer), *result.best_checkpoint);
            }
        }
        result.history.push_back(m);
    }
    if (options.out_dir) {
        result.final_checkpoint = *options.out_dir / "final.ckpt";
        save_checkpoint(capture(trainer), *result.final_checkpoint);
        if (!result.best_checkpoint && std::filesystem::exists(*options.out_dir / "best.ckpt")) {
            result.best_checkpoint = *options.out_dir / "best.ckpt";
        }
    }
    return result;
}

}  // namespace dadrop
