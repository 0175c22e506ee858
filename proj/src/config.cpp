#include "dadrop/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dadrop/errors.hpp"
#include "dadrop/eval.hpp"
#include "dadrop/io.hpp"

namespace dadrop {

namespace pt = boost::property_tree;

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& text, const std::string& expected) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as " + expected);
}

double to_double(const std::string& key, const std::string& text) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        bad_value(key, text, "a number");
    }
    if (used != text.size()) bad_value(key, text, "a number");
    return v;
}

long long to_integer(const std::string& key, const std::string& text) {
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(text, &used);
    } catch (const std::exception&) {
        bad_value(key, text, "an integer");
    }
    if (used != text.size()) bad_value(key, text, "an integer");
    return v;
}

int to_int(const std::string& key, const std::string& text) {
    const auto v = to_integer(key, text);
    if (v < INT32_MIN || v > INT32_MAX) bad_value(key, text, "a 32-bit integer");
    return static_cast<int>(v);
}

std::uint64_t to_u64(const std::string& key, const std::string& text) {
    const auto v = to_integer(key, text);
    if (v < 0) bad_value(key, text, "a non-negative integer");
    return static_cast<std::uint64_t>(v);
}

bool to_bool(const std::string& key, const std::string& text) {
    const auto t = boost::algorithm::to_lower_copy(text);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    bad_value(key, text, "a boolean");
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> parts;
    boost::algorithm::split(parts, text, boost::is_any_of(","));
    for (auto& p : parts) boost::algorithm::trim(p);
    return parts;
}

std::vector<double> to_doubles(const std::string& key, const std::string& text, std::size_t expected) {
    std::vector<double> out;
    for (const auto& p : split_list(text)) out.push_back(to_double(key, p));
    if (expected && out.size() != expected) {
        throw ConfigError("config key '" + key + "': expected " + std::to_string(expected) + " values, got " +
                          std::to_string(out.size()));
    }
    return out;
}

std::array<int, 3> to_int3(const std::string& key, const std::string& text) {
    const auto parts = split_list(text);
    if (parts.size() != 3) throw ConfigError("config key '" + key + "': expected 3 values");
    return {to_int(key, parts[0]), to_int(key, parts[1]), to_int(key, parts[2])};
}

std::array<double, 3> to_rgb(const std::string& key, const std::string& text) {
    const auto v = to_doubles(key, text, 3);
    return {v[0], v[1], v[2]};
}

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename Range>
std::string join(const Range& values) {
    std::string out;
    for (const auto& v : values) {
        if (!out.empty()) out += ",";
        if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>) {
            out += num(v);
        } else {
            out += std::to_string(v);
        }
    }
    return out;
}

struct Field {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

using Section = std::vector<std::pair<std::string, Field>>;

// Every addressable key, in output order. scale_preset comes first so the
// per-field overrides that follow apply on top of the preset.
std::vector<std::pair<std::string, Section>> field_table(RunConfig& c) {
    auto& b = c.train.backbone;
    auto& t = c.train;
    auto& d = c.data;
    auto& e = c.eval;

    auto int_field = [](const std::string& key, int& ref) {
        return std::pair{key, Field{[&ref, key](const std::string& s) { ref = to_int(key, s); },
                                    [&ref] { return std::to_string(ref); }}};
    };
    auto real_field = [](const std::string& key, double& ref) {
        return std::pair{key, Field{[&ref, key](const std::string& s) { ref = to_double(key, s); },
                                    [&ref] { return num(ref); }}};
    };
    auto u64_field = [](const std::string& key, std::uint64_t& ref) {
        return std::pair{key, Field{[&ref, key](const std::string& s) { ref = to_u64(key, s); },
                                    [&ref] { return std::to_string(ref); }}};
    };
    auto bool_field = [](const std::string& key, bool& ref) {
        return std::pair{key, Field{[&ref, key](const std::string& s) { ref = to_bool(key, s); },
                                    [&ref] { return std::string(ref ? "true" : "false"); }}};
    };
    auto int3_field = [](const std::string& key, std::array<int, 3>& ref) {
        return std::pair{key, Field{[&ref, key](const std::string& s) { ref = to_int3(key, s); },
                                    [&ref] { return join(ref); }}};
    };
    auto rgb_field = [](const std::string& key, std::array<double, 3>& ref) {
        return std::pair{key, Field{[&ref, key](const std::string& s) { ref = to_rgb(key, s); },
                                    [&ref] { return join(ref); }}};
    };
    auto nuisance = [&](const std::string& prefix, synth::DomainNuisance& n, Section& out) {
        out.push_back(rgb_field(prefix + "_tint", n.tint));
        out.push_back(real_field(prefix + "_noise_freq", n.noise_freq));
        out.push_back(real_field(prefix + "_noise_amplitude", n.noise_amplitude));
        out.push_back(real_field(prefix + "_contrast", n.contrast));
        out.push_back(real_field(prefix + "_bg_gradient_angle", n.bg_gradient_angle));
        out.push_back(real_field(prefix + "_bg_gradient_strength", n.bg_gradient_strength));
    };

    Section backbone{
        {"scale_preset",
         {[&b](const std::string& s) {
              const auto preset = parse_scale_preset(s);
              b = preset == ScalePreset::table1 ? BackboneConfig::table1() : BackboneConfig::toy();
          },
          [&b] { return to_string(b.scale_preset); }}},
        int_field("image_size", b.image_size),
        int_field("in_channels", b.in_channels),
        int3_field("stage_channels", b.stage_channels),
        int3_field("stage_depths", b.stage_depths),
        int_field("token_dim", b.token_dim),
        int_field("transformer_blocks", b.transformer_blocks),
        int_field("layers_per_block", b.layers_per_block),
        int_field("heads", b.heads),
        int_field("num_labels", b.num_labels),
    };

    Section train{
        {"mode", {[&t](const std::string& s) { t.mode = parse_mode(s); }, [&t] { return to_string(t.mode); }}},
        real_field("lambda", t.lambda),
        real_field("gamma", t.gamma),
        real_field("alpha", t.alpha),
        real_field("beta", t.beta),
        real_field("lr", t.lr),
        real_field("momentum", t.momentum),
        int_field("epochs", t.epochs),
        int_field("batch_per_domain", t.batch_per_domain),
        u64_field("seed", t.seed),
        bool_field("rescale_kept", t.rescale_kept),
        {"au_reduction",
         {[&t](const std::string& s) {
              if (s == "batch_mean") t.au_reduction = losses::Reduction::batch_mean;
              else if (s == "sum") t.au_reduction = losses::Reduction::sum;
              else bad_value("au_reduction", s, "batch_mean or sum");
          },
          [&t] { return std::string(t.au_reduction == losses::Reduction::sum ? "sum" : "batch_mean"); }}},
    };

    Section data{
        u64_field("seed", d.seed),
        int_field("image_size", d.image_size),
        int_field("num_labels", d.num_labels),
        {"cooccurrence",
         {[&d](const std::string& s) { d.cooccurrence = to_doubles("cooccurrence", s, 0); },
          [&d] { return join(d.cooccurrence); }}},
        real_field("base_rate", d.base_rate),
        real_field("glyph_intensity", d.glyph_intensity),
        real_field("glyph_intensity_jitter", d.glyph_intensity_jitter),
    };
    nuisance("source", d.source, data);
    nuisance("target", d.target, data);
    data.push_back(int_field("cue_label", d.spurious_cue.label_index));
    data.push_back(real_field("cue_strength", d.spurious_cue.cue_strength));
    data.push_back(rgb_field("cue_color", d.spurious_cue.color));
    data.push_back(int_field("n_train", c.sizes.train));
    data.push_back(int_field("n_val", c.sizes.val));
    data.push_back(int_field("n_test", c.sizes.test));

    Section eval{
        real_field("threshold", e.threshold),
        int_field("batch_size", e.batch_size),
        u64_field("probe_seed", e.probe_seed),
        bool_field("plot", e.plot),
    };

    return {{"backbone", std::move(backbone)}, {"train", std::move(train)}, {"data", std::move(data)},
            {"eval", std::move(eval)}};
}

}  // namespace

void RunConfig::validate() const {
    train.validate();
    data.validate();
    if (data.image_size != train.backbone.image_size) {
        throw ConfigError("data.image_size (" + std::to_string(data.image_size) + ") must equal backbone.image_size (" +
                          std::to_string(train.backbone.image_size) + ")");
    }
    if (data.num_labels != train.backbone.num_labels) {
        throw ConfigError("data.num_labels (" + std::to_string(data.num_labels) + ") must equal backbone.num_labels (" +
                          std::to_string(train.backbone.num_labels) + ")");
    }
    if (!(eval.threshold >= 0.0 && eval.threshold <= 1.0)) throw ConfigError("eval.threshold must be in [0,1]");
    if (eval.batch_size < 1) throw ConfigError("eval.batch_size must be >= 1");
}

void RunConfig::check_split_sizes() const {
    if (sizes.train < train.batch_per_domain) {
        throw DataError("n_train (" + std::to_string(sizes.train) + ") must be >= batch_per_domain (" +
                        std::to_string(train.batch_per_domain) + ")");
    }
    if (sizes.val < 1) throw DataError("n_val (" + std::to_string(sizes.val) + ") must be >= 1");
    if (sizes.test < eval::kProbeMinPerDomain) {
        throw DataError("n_test (" + std::to_string(sizes.test) + ") must be >= " +
                        std::to_string(eval::kProbeMinPerDomain) + " for the domain probe");
    }
}

RunConfig parse_run_config(const std::string& text, bool apply_env) {
    pt::ptree tree;
    try {
        std::istringstream in(text);
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config syntax error: ") + e.what());
    }
    RunConfig config;
    auto table = field_table(config);
    for (const auto& [section_name, section] : tree) {
        if (section.data().size() && section.empty()) {
            throw ConfigError("config key '" + section_name + "' must be inside a section");
        }
        auto sec = std::find_if(table.begin(), table.end(), [&](const auto& s) { return s.first == section_name; });
        if (sec == table.end()) throw ConfigError("unknown config section [" + section_name + "]");
        // Preset first, whatever the order in the file.
        std::vector<std::pair<std::string, std::string>> entries;
        for (const auto& [key, value] : section) {
            auto v = boost::algorithm::trim_copy(value.data());
            if (key == "scale_preset") entries.insert(entries.begin(), {key, v});
            else entries.emplace_back(key, v);
        }
        for (const auto& [key, value] : entries) {
            auto f = std::find_if(sec->second.begin(), sec->second.end(), [&](const auto& p) { return p.first == key; });
            if (f == sec->second.end()) throw ConfigError("unknown config key '" + key + "' in [" + section_name + "]");
            f->second.set(value);
        }
    }
    if (apply_env) {
        if (const char* env = std::getenv("DADROP_SEED"); env && *env) {
            const auto seed = to_u64("DADROP_SEED", env);
            config.train.seed = seed;
            config.data.seed = seed;
            config.eval.probe_seed = seed;
        }
    }
    config.validate();
    return config;
}

RunConfig load_run_config(const std::filesystem::path& path, bool apply_env) {
    std::string text;
    try {
        text = io::read_text(path);
    } catch (const Error& e) {
        throw ConfigError("cannot read config file " + path.string());
    }
    return parse_run_config(text, apply_env);
}

std::string format_run_config(const RunConfig& config) {
    RunConfig copy = config;
    std::string out;
    for (const auto& [section_name, section] : field_table(copy)) {
        if (!out.empty()) out += "\n";
        out += "[" + section_name + "]\n";
        for (const auto& [key, field] : section) out += key + " = " + field.get() + "\n";
    }
    return out;
}

std::uint64_t split_seed(const std::string& split, Domain domain) {
    return derive_seed(io::fnv1a64(split), {static_cast<std::uint64_t>(domain) + 1});
}

}  // namespace dadrop
