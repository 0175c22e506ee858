#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "dadrop/checkpoint.hpp"
#include "dadrop/cli.hpp"
#include "dadrop/errors.hpp"
#include "dadrop/io.hpp"

using namespace dadrop;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"(# small run for tests
[backbone]
scale_preset = toy

[train]
mode = audd
epochs = 1
batch_per_domain = 16
seed = 0

[data]
seed = 0
n_train = 32
n_val = 16
n_test = 64

[eval]
threshold = 0.5
)";

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("dadrop_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_config(const fs::path& dir, const std::string& text, const std::string& name = "run.ini") {
    io::write_text(dir / name, text);
    return dir / name;
}

std::string with_epochs(int epochs) {
    std::string text = kSmallConfig;
    const auto at = text.find("epochs = 1");
    return text.replace(at, 10, "epochs = " + std::to_string(epochs));
}

// First whitespace-separated field after `key ` on the line that starts with key.
std::string field(const std::string& text, const std::string& key) {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind(key + " ", 0) == 0) {
            std::istringstream words(line.substr(key.size()));
            std::string v;
            words >> v;
            return v;
        }
    }
    return "";
}

struct ScopedEnv {
    explicit ScopedEnv(const char* value) { ::setenv("DADROP_SEED", value, 1); }
    ~ScopedEnv() { ::unsetenv("DADROP_SEED"); }
};

}  // namespace

TEST_CASE("config parsing") {
    const auto c = parse_run_config(kSmallConfig, false);
    CHECK(c.train.mode == Mode::audd);
    CHECK(c.train.epochs == 1);
    CHECK(c.sizes.train == 32);
    CHECK(c.sizes.test == 64);
    CHECK(c.train.lambda == 0.25);

    CHECK_THROWS_AS(parse_run_config("[train]\nmystery = 1\n", false), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[extra]\nx = 1\n", false), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[train]\nmode = dropall\n", false), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[train]\ngamma = 1.5\n", false), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[data]\nnum_labels = 5\n", false), ConfigError);

    const auto lists = parse_run_config("[data]\nsource_tint = 0.1, 0.0, -0.1\n", false);
    CHECK(lists.data.source.tint[0] == doctest::Approx(0.1));
    CHECK(lists.data.source.tint[2] == doctest::Approx(-0.1));

    const auto again = parse_run_config(format_run_config(c), false);
    CHECK(format_run_config(again) == format_run_config(c));
    CHECK(again.data.hash() == c.data.hash());
    CHECK(to_json(again.train) == to_json(c.train));

    CHECK_THROWS_AS(load_run_config("/nonexistent/run.ini"), ConfigError);
}

TEST_CASE("DADROP_SEED overrides every seed") {
    ScopedEnv env("7");
    const auto c = parse_run_config(kSmallConfig);
    CHECK(c.train.seed == 7);
    CHECK(c.data.seed == 7);
    CHECK(c.eval.probe_seed == 7);
    CHECK(parse_run_config(kSmallConfig, false).train.seed == 0);
}

TEST_CASE("split size checks") {
    auto c = parse_run_config(kSmallConfig, false);
    c.check_split_sizes();
    c.sizes.train = 8;
    CHECK_THROWS_AS(c.check_split_sizes(), DataError);
    c.sizes.train = 32;
    c.sizes.test = 10;
    CHECK_THROWS_AS(c.check_split_sizes(), DataError);
}

TEST_CASE("gen-data is reproducible and validates its inputs") {
    const auto dir = temp_dir("cli_gen");
    const auto config = write_config(dir, kSmallConfig);
    const auto a = run({"gen-data", "--config", config.string(), "--out", (dir / "a").string()});
    const auto b = run({"gen-data", "--config", config.string(), "--out", (dir / "b").string()});
    REQUIRE(a.code == cli::kExitOk);
    CHECK(b.code == cli::kExitOk);
    CHECK(a.out == b.out);
    CHECK(!field(a.out, "spec_hash").empty());
    for (const char* split : {"train", "val", "test"})
        for (Domain d : {Domain::source, Domain::target}) CHECK(fs::exists(cli::manifest_path(dir / "a", split, d)));
    CHECK(fs::exists(dir / "a" / "run_config.ini"));

    const auto loaded = cli::load_benchmark(dir / "a");
    const auto memory = cli::make_benchmark(parse_run_config(kSmallConfig, false));
    CHECK_FALSE(loaded.target_train.labeled());
    CHECK(loaded.target_test.labeled());
    CHECK(loaded.source_train.samples[5].image == memory.source_train.samples[5].image);
    CHECK(loaded.target_test.samples[9].image == memory.target_test.samples[9].image);

    const auto missing = run({"gen-data", "--config", (dir / "none.ini").string(), "--out", (dir / "c").string()});
    CHECK(missing.code == cli::kExitUsage);
    CHECK(missing.err.find("none.ini") != std::string::npos);

    std::string tiny = kSmallConfig;
    tiny.replace(tiny.find("n_test = 64"), 11, "n_test = 8");
    const auto small = run({"gen-data", "--config", write_config(dir, tiny, "tiny.ini").string(), "--out",
                            (dir / "d").string()});
    CHECK(small.code == cli::kExitRuntime);
    CHECK(small.err.find("n_test") != std::string::npos);

    CHECK(run({"gen-data", "--config"}).code == cli::kExitUsage);
    CHECK(run({"frobnicate"}).code == cli::kExitUsage);
    CHECK(run({"--help"}).code == cli::kExitOk);
}

TEST_CASE("train, eval and diagnose on a small benchmark") {
    const auto dir = temp_dir("cli_train");
    const auto config = write_config(dir, kSmallConfig);
    const auto data = dir / "data";
    REQUIRE(run({"gen-data", "--config", config.string(), "--out", data.string()}).code == cli::kExitOk);

    const auto audd = run({"train", "--config", config.string(), "--data", data.string(), "--out",
                           (dir / "audd").string()});
    REQUIRE(audd.code == cli::kExitOk);
    const auto base = run({"train", "--config", config.string(), "--data", data.string(), "--out",
                           (dir / "base").string(), "--mode", "baseline"});
    REQUIRE(base.code == cli::kExitOk);
    CHECK(field(audd.out, "final") != field(base.out, "final"));
    CHECK(load_checkpoint(dir / "base" / "final.ckpt").config.mode == Mode::baseline);
    CHECK(load_checkpoint(dir / "audd" / "final.ckpt").config.mode == Mode::audd);
    CHECK(io::read_text(dir / "base" / "run_config.ini").find("mode = baseline") != std::string::npos);

    SUBCASE("same inputs give the same checkpoint") {
        const auto again = run({"train", "--config", config.string(), "--data", data.string(), "--out",
                                (dir / "audd2").string()});
        CHECK(field(again.out, "final") == field(audd.out, "final"));
    }

    SUBCASE("resume continues the epoch numbering") {
        const auto resumed = run({"train", "--config", config.string(), "--data", data.string(), "--out",
                                  (dir / "audd").string(), "--resume", (dir / "audd" / "final.ckpt").string()});
        REQUIRE(resumed.code == cli::kExitOk);
        CHECK(field(resumed.out, "epoch") == "2");
        const auto metrics = io::read_text(dir / "audd" / "metrics.csv");
        CHECK(metrics.find("\n1,") != std::string::npos);
        CHECK(metrics.find("\n2,") != std::string::npos);
    }

    SUBCASE("eval writes a report and honours the threshold") {
        const auto split = cli::manifest_path(data, "test", Domain::target);
        const auto ckpt = (dir / "audd" / "final.ckpt").string();
        const auto r = run({"eval", "--checkpoint", ckpt, "--data-split", split.string()});
        REQUIRE(r.code == cli::kExitOk);
        CHECK(fs::exists(dir / "audd" / "eval_test_target.csv"));
        const auto report = eval::read_eval_csv(dir / "audd" / "eval_test_target.csv");
        auto model = model_from_checkpoint(load_checkpoint(ckpt));
        const auto direct = cli::evaluate(model->backbone, synth::load_manifest(split), 0.5);
        CHECK(std::abs(report.macro_f1 - direct.macro_f1) < 1e-9);

        auto positives = [&](const std::string& t) {
            const auto out = dir / ("t" + t);
            REQUIRE(run({"eval", "--checkpoint", ckpt, "--data-split", split.string(), "--threshold", t, "--out",
                         out.string()})
                        .code == cli::kExitOk);
            std::int64_t n = 0;
            for (const auto& c : eval::read_eval_csv(out / "eval_test_target.csv").counts) n += c.tp + c.fp;
            return n;
        };
        CHECK(positives("0") == 64 * 6);
        CHECK(positives("0.3") >= positives("0.7"));
        CHECK(positives("0.7") == positives("0.7"));

        CHECK(run({"eval", "--checkpoint", (dir / "nope.ckpt").string(), "--data-split", split.string()}).code ==
              cli::kExitUsage);
        CHECK(run({"eval", "--checkpoint", ckpt, "--data-split", split.string(), "--threshold", "2"}).code ==
              cli::kExitUsage);
        const auto unlabeled = cli::manifest_path(data, "train", Domain::target);
        CHECK(run({"eval", "--checkpoint", ckpt, "--data-split", unlabeled.string()}).code == cli::kExitRuntime);
    }

    SUBCASE("diagnose emits one row per token and per block") {
        const auto r = run({"diagnose", "--checkpoint", (dir / "audd" / "final.ckpt").string(), "--data",
                            data.string(), "--plot"});
        REQUIRE(r.code == cli::kExitOk);
        const auto disc = eval::read_discrepancy_csv(dir / "audd" / "diagnose" / "discrepancy.csv");
        CHECK(disc.per_token_d.size() == 16);
        CHECK(fs::exists(dir / "audd" / "diagnose" / "discrepancy.png"));
        const auto probe = io::read_text(dir / "audd" / "diagnose" / "probe.csv");
        CHECK(std::count(probe.begin(), probe.end(), '\n') == 7);
        const auto again = run({"diagnose", "--checkpoint", (dir / "audd" / "final.ckpt").string(), "--data",
                                data.string(), "--out", (dir / "diag2").string()});
        CHECK(again.out == r.out);
    }
}

TEST_CASE("untrained model scores inside the pinned band") {
    const auto dir = temp_dir("cli_untrained");
    const auto config = write_config(dir, with_epochs(0));
    const auto data = dir / "data";
    REQUIRE(run({"gen-data", "--config", config.string(), "--out", data.string()}).code == cli::kExitOk);
    REQUIRE(run({"train", "--config", config.string(), "--data", data.string(), "--out", (dir / "run").string()})
                .code == cli::kExitOk);
    const auto r = run({"eval", "--checkpoint", (dir / "run" / "final.ckpt").string(), "--data-split",
                        cli::manifest_path(data, "test", Domain::source).string()});
    REQUIRE(r.code == cli::kExitOk);
    const double macro = std::stod(field(r.out, "macro_f1"));
    CHECK(macro >= 0.2);
    CHECK(macro <= 0.6);
}
