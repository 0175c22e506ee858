#include "dadrop/cli.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>

#include <CLI11.hpp>

#include "dadrop/checkpoint.hpp"
#include "dadrop/errors.hpp"
#include "dadrop/io.hpp"

namespace dadrop::cli {

namespace fs = std::filesystem;

namespace {

const std::array<std::string, 3> kSplits{"train", "val", "test"};

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::size_t> all_indices(const synth::Dataset& d) {
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

void print_report(std::ostream& out, const eval::EvalReport& r) {
    for (std::size_t j = 0; j < r.per_label_f1.size(); ++j) {
        out << "label " << j << "  f1 " << fixed(r.per_label_f1[j]) << "  tp " << r.counts[j].tp << "  fp "
            << r.counts[j].fp << "  fn " << r.counts[j].fn << "\n";
    }
    out << "macro_f1 " << fixed(r.macro_f1) << "\n";
}

std::string manifest_stem(const fs::path& manifest) {
    auto stem = manifest.filename().string();
    const std::string suffix = ".manifest.json";
    if (stem.size() > suffix.size() && stem.ends_with(suffix)) stem.resize(stem.size() - suffix.size());
    return stem;
}

int cmd_gen_data(const fs::path& config_path, const fs::path& out_dir, std::ostream& out) {
    const auto config = load_run_config(config_path);
    config.check_split_sizes();
    const auto infos = generate_benchmark(config, out_dir);
    io::write_text(out_dir / "run_config.ini", format_run_config(config));
    out << "spec_hash " << config.data.hash() << "\n";
    for (const auto& info : infos) out << info.manifest_hash << "  " << info.manifest_path.filename().string() << "\n";
    return kExitOk;
}

int cmd_train(const fs::path& config_path, const fs::path& data_dir, const fs::path& out_dir,
              const std::string& mode_override, const std::string& resume, std::ostream& out) {
    auto config = load_run_config(config_path);
    if (!mode_override.empty()) config.train.mode = parse_mode(mode_override);
    config.validate();
    const auto data = load_benchmark(data_dir);

    Model model(config.train.backbone, static_cast<float>(config.train.lambda), config.train.seed);
    Trainer trainer(model, config.train);
    if (!resume.empty()) {
        const auto ckpt = load_checkpoint(resume);
        restore(model, ckpt, &trainer.optimizer());
        trainer.state() = ckpt.state;
        out << "resumed from " << resume << " at epoch " << ckpt.state.epochs_completed << "\n";
    }
    io::write_text(out_dir / "run_config.ini", format_run_config(config));
    TrainOptions options;
    options.out_dir = out_dir;
    options.verbose = true;
    const auto result = train(trainer, data.source_train, data.target_train, data.source_val, options);
    if (!result.history.empty()) {
        const auto& m = result.history.back();
        out << "epoch " << m.epoch << "  au " << fixed(m.au_loss) << "  cd " << fixed(m.cd_domain_loss) << "  td "
            << fixed(m.td_domain_loss) << "  val_macro_f1 " << fixed(m.val_macro_f1) << "\n";
    }
    if (result.final_checkpoint) {
        out << "final " << checkpoint_hash(*result.final_checkpoint) << "  " << result.final_checkpoint->string()
            << "\n";
    }
    if (result.best_checkpoint) {
        out << "best " << checkpoint_hash(*result.best_checkpoint) << "  " << result.best_checkpoint->string() << "\n";
    }
    return kExitOk;
}

int cmd_eval(const fs::path& checkpoint_path, const fs::path& split_manifest, double threshold, fs::path out_dir,
             std::ostream& out) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("--threshold must be in [0,1]");
    const auto ckpt = load_checkpoint(checkpoint_path);
    auto model = model_from_checkpoint(ckpt);
    const auto data = synth::load_manifest(split_manifest);
    if (!data.labeled()) throw DataError("eval needs a labelled split, " + split_manifest.string() + " has no labels");
    const auto report = evaluate(model->backbone, data, threshold);
    if (out_dir.empty()) out_dir = checkpoint_path.parent_path();
    const auto stem = "eval_" + manifest_stem(split_manifest);
    eval::write_eval_report(report, out_dir / (stem + ".csv"), out_dir / (stem + ".json"));
    print_report(out, report);
    return kExitOk;
}

int cmd_diagnose(const fs::path& checkpoint_path, const fs::path& data_dir, fs::path out_dir, bool plot,
                 std::uint64_t probe_seed, std::ostream& out) {
    const auto ckpt = load_checkpoint(checkpoint_path);
    auto model = model_from_checkpoint(ckpt);
    const auto source = synth::load_manifest(manifest_path(data_dir, "test", Domain::source));
    const auto target = synth::load_manifest(manifest_path(data_dir, "test", Domain::target));
    if (out_dir.empty()) out_dir = checkpoint_path.parent_path() / "diagnose";
    if (const char* env = std::getenv("DADROP_SEED"); env && *env) probe_seed = std::stoull(env);

    const auto disc = eval::domain_discrepancy(model->backbone, source, target);
    eval::write_discrepancy_report(disc, out_dir / "discrepancy.csv", out_dir / "discrepancy.json");
    if (plot) eval::write_discrepancy_plot(disc, out_dir / "discrepancy.png");
    const auto probes = eval::all_block_probe_accuracies(model->backbone, source, target, probe_seed);
    eval::write_probe_report(probes, out_dir / "probe.csv");

    out << "median_discrepancy " << fixed(disc.median(), 2) << "\n";
    for (std::size_t b = 0; b < probes.size(); ++b) out << "probe_block" << b + 1 << " " << fixed(probes[b]) << "\n";
    out << "mean_probe_accuracy " << fixed(std::accumulate(probes.begin(), probes.end(), 0.0) / 6.0) << "\n";
    return kExitOk;
}

int cmd_ablation(const fs::path& config_path, const fs::path& data_dir, const fs::path& out_dir,
                 const std::vector<std::uint64_t>& seeds, const std::vector<std::string>& mode_names,
                 std::ostream& out) {
    const auto config = load_run_config(config_path);
    std::vector<Mode> modes;
    for (const auto& m : mode_names) modes.push_back(parse_mode(m));
    if (modes.empty()) modes.assign(kAllModes.begin(), kAllModes.end());
    std::vector<std::uint64_t> run_seeds = seeds;
    if (run_seeds.empty()) run_seeds.push_back(config.train.seed);
    const auto data = load_benchmark(data_dir);

    std::vector<ExperimentResult> results;
    for (auto seed : run_seeds) {
        for (auto mode : modes) {
            auto run_config = config;
            run_config.train.mode = mode;
            run_config.train.seed = seed;
            const auto dir = out_dir / (to_string(mode) + "_seed" + std::to_string(seed));
            auto r = run_experiment(run_config, data, dir);
            out << to_string(mode) << " seed " << seed << "  target_f1 " << fixed(r.target_test.macro_f1)
                << "  source_f1 " << fixed(r.source_test.macro_f1) << "  probe " << fixed(r.mean_probe_accuracy)
                << "  median_d " << fixed(r.median_discrepancy, 2) << "  (" << fixed(r.train_seconds, 1) << " s)"
                << std::endl;
            results.push_back(std::move(r));
            io::write_text(out_dir / "ablation.csv", ablation_csv(results, config.train.backbone.num_labels));
        }
    }
    const auto summary = ablation_summary_csv(results, config.train.backbone.num_labels);
    io::write_text(out_dir / "ablation_summary.csv", summary);
    out << summary;
    return kExitOk;
}

int dispatch(std::ostream& err, const std::function<int()>& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const CheckpointError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace

fs::path manifest_path(const fs::path& data_dir, const std::string& split, Domain domain) {
    return data_dir / (split + "_" + synth::domain_name(domain) + ".manifest.json");
}

std::vector<synth::ManifestInfo> generate_benchmark(const RunConfig& config, const fs::path& out_dir) {
    config.check_split_sizes();
    const std::map<std::string, int> sizes{{"train", config.sizes.train}, {"val", config.sizes.val},
                                           {"test", config.sizes.test}};
    std::vector<synth::ManifestInfo> infos;
    for (const auto& split : kSplits) {
        for (auto domain : {Domain::source, Domain::target}) {
            const bool labeled = !(split == "train" && domain == Domain::target);
            infos.push_back(synth::generate_dataset(config.data, domain, split, sizes.at(split),
                                                    split_seed(split, domain), out_dir, labeled));
        }
    }
    return infos;
}

Benchmark load_benchmark(const fs::path& data_dir) {
    if (!fs::is_directory(data_dir)) throw DataError("data directory " + data_dir.string() + " does not exist");
    Benchmark b;
    b.source_train = synth::load_manifest(manifest_path(data_dir, "train", Domain::source));
    b.target_train = synth::load_manifest(manifest_path(data_dir, "train", Domain::target));
    b.source_val = synth::load_manifest(manifest_path(data_dir, "val", Domain::source));
    b.target_val = synth::load_manifest(manifest_path(data_dir, "val", Domain::target));
    b.source_test = synth::load_manifest(manifest_path(data_dir, "test", Domain::source));
    b.target_test = synth::load_manifest(manifest_path(data_dir, "test", Domain::target));
    return b;
}

Benchmark make_benchmark(const RunConfig& config) {
    config.check_split_sizes();
    auto split = [&](const std::string& name, Domain d, int n, bool labeled) {
        return synth::make_split(config.data, d, name, n, split_seed(name, d), labeled);
    };
    Benchmark b;
    b.source_train = split("train", Domain::source, config.sizes.train, true);
    b.target_train = split("train", Domain::target, config.sizes.train, false);
    b.source_val = split("val", Domain::source, config.sizes.val, true);
    b.target_val = split("val", Domain::target, config.sizes.val, true);
    b.source_test = split("test", Domain::source, config.sizes.test, true);
    b.target_test = split("test", Domain::target, config.sizes.test, true);
    return b;
}

eval::EvalReport evaluate(Backbone& backbone, const synth::Dataset& data, double threshold) {
    const auto probs = predict_dataset(backbone, data);
    const auto labels = synth::stack_labels(data, all_indices(data));
    return eval::f1_scores(probs, labels, static_cast<int>(data.size()), backbone.config().num_labels, threshold);
}

ExperimentResult run_experiment(const RunConfig& config, const Benchmark& data,
                                const std::optional<fs::path>& out_dir) {
    config.validate();
    ExperimentResult r;
    r.mode = config.train.mode;
    r.seed = config.train.seed;
    Model model(config.train.backbone, static_cast<float>(config.train.lambda), config.train.seed);
    Trainer trainer(model, config.train);
    TrainOptions options;
    options.out_dir = out_dir;
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = train(trainer, data.source_train, data.target_train, data.source_val, options);
    r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (result.final_checkpoint) r.final_checkpoint_hash = checkpoint_hash(*result.final_checkpoint);

    r.target_test = evaluate(model.backbone, data.target_test, config.eval.threshold);
    r.source_test = evaluate(model.backbone, data.source_test, config.eval.threshold);
    r.probe_accuracy =
        eval::all_block_probe_accuracies(model.backbone, data.source_test, data.target_test, config.eval.probe_seed);
    r.mean_probe_accuracy = std::accumulate(r.probe_accuracy.begin(), r.probe_accuracy.end(), 0.0) /
                            static_cast<double>(r.probe_accuracy.size());
    const auto disc = eval::domain_discrepancy(model.backbone, data.source_test, data.target_test);
    r.median_discrepancy = disc.median();
    if (out_dir) {
        eval::write_eval_report(r.target_test, *out_dir / "eval_test_target.csv", *out_dir / "eval_test_target.json");
        eval::write_eval_report(r.source_test, *out_dir / "eval_test_source.csv", *out_dir / "eval_test_source.json");
        eval::write_probe_report(r.probe_accuracy, *out_dir / "probe.csv");
        eval::write_discrepancy_report(disc, *out_dir / "discrepancy.csv", *out_dir / "discrepancy.json");
    }
    return r;
}

namespace {
std::string ablation_header(int num_labels) {
    std::string h = "mode";
    for (int j = 0; j < num_labels; ++j) h += ",f1_label" + std::to_string(j);
    return h + ",target_macro_f1,source_macro_f1,mean_probe_accuracy,median_discrepancy";
}
}  // namespace

std::string ablation_csv(const std::vector<ExperimentResult>& results, int num_labels) {
    std::string csv = "seed," + ablation_header(num_labels) + "\n";
    for (const auto& r : results) {
        csv += std::to_string(r.seed) + "," + to_string(r.mode);
        for (double f : r.target_test.per_label_f1) csv += "," + full(f);
        csv += "," + full(r.target_test.macro_f1) + "," + full(r.source_test.macro_f1) + "," +
               full(r.mean_probe_accuracy) + "," + full(r.median_discrepancy) + "\n";
    }
    return csv;
}

std::string ablation_summary_csv(const std::vector<ExperimentResult>& results, int num_labels) {
    std::vector<Mode> order;
    for (const auto& r : results) {
        if (std::find(order.begin(), order.end(), r.mode) == order.end()) order.push_back(r.mode);
    }
    std::string csv = ablation_header(num_labels) + ",seeds\n";
    for (auto mode : order) {
        std::vector<double> acc(static_cast<std::size_t>(num_labels) + 4, 0.0);
        int n = 0;
        for (const auto& r : results) {
            if (r.mode != mode) continue;
            ++n;
            for (int j = 0; j < num_labels; ++j) acc[j] += r.target_test.per_label_f1.at(j);
            acc[num_labels] += r.target_test.macro_f1;
            acc[num_labels + 1] += r.source_test.macro_f1;
            acc[num_labels + 2] += r.mean_probe_accuracy;
            acc[num_labels + 3] += r.median_discrepancy;
        }
        csv += to_string(mode);
        for (double v : acc) csv += "," + full(v / n);
        csv += "," + std::to_string(n) + "\n";
    }
    return csv;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Doubly adaptive dropout for cross-domain multi-label detection"};
    app.require_subcommand(1);

    fs::path config_path, out_dir, data_dir, checkpoint_path, split_manifest;
    std::string mode, resume;
    double threshold = 0.5;
    bool plot = false;
    std::uint64_t probe_seed = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> modes;

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic two-domain benchmark");
    gen->add_option("--config", config_path, "Run config file")->required();
    gen->add_option("--out", out_dir, "Output data directory")->required();

    auto* tr = app.add_subcommand("train", "Train one model");
    tr->add_option("--config", config_path, "Run config file")->required();
    tr->add_option("--data", data_dir, "Data directory written by gen-data")->required();
    tr->add_option("--out", out_dir, "Run directory for checkpoints and metrics")->required();
    tr->add_option("--mode", mode, "Override train.mode");
    tr->add_option("--resume", resume, "Checkpoint to continue from");

    auto* ev = app.add_subcommand("eval", "Per-label and macro F1 of a checkpoint");
    ev->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
    ev->add_option("--data-split", split_manifest, "Manifest of a labelled split")->required();
    ev->add_option("--threshold", threshold, "Positive iff probability >= threshold");
    ev->add_option("--out", out_dir, "Report directory (default: next to the checkpoint)");

    auto* dg = app.add_subcommand("diagnose", "Per-token discrepancy and per-block domain probes");
    dg->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
    dg->add_option("--data", data_dir, "Data directory written by gen-data")->required();
    dg->add_option("--out", out_dir, "Report directory (default: <checkpoint dir>/diagnose)");
    dg->add_flag("--plot", plot, "Also write discrepancy.png");
    dg->add_option("--probe-seed", probe_seed, "Seed of the probe split");

    auto* ab = app.add_subcommand("ablation", "Train and score every mode");
    ab->add_option("--config", config_path, "Run config file")->required();
    ab->add_option("--data", data_dir, "Data directory written by gen-data")->required();
    ab->add_option("--out", out_dir, "Output directory")->required();
    ab->add_option("--seeds", seeds, "Training seeds (default: train.seed)")->delimiter(',');
    ab->add_option("--modes", modes, "Subset of modes (default: all five)")->delimiter(',');

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    return dispatch(err, [&]() -> int {
        if (*gen) return cmd_gen_data(config_path, out_dir, out);
        if (*tr) return cmd_train(config_path, data_dir, out_dir, mode, resume, out);
        if (*ev) return cmd_eval(checkpoint_path, split_manifest, threshold, out_dir, out);
        if (*dg) return cmd_diagnose(checkpoint_path, data_dir, out_dir, plot, probe_seed, out);
        return cmd_ablation(config_path, data_dir, out_dir, seeds, modes, out);
    });
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, out, err);
}

}  // namespace dadrop::cli
