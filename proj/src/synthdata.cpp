#include "dadrop/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "dadrop/errors.hpp"
#include "dadrop/io.hpp"
#include "dadrop/losses.hpp"

namespace dadrop::synth {

using nlohmann::json;

SyntheticSpec SyntheticSpec::defaults() {
    SyntheticSpec s;
    s.cooccurrence.assign(36, 0.0);
    auto couple = [&](int i, int j, double v) {
        s.cooccurrence[i * 6 + j] = v;
        s.cooccurrence[j * 6 + i] = v;
    };
    couple(0, 1, 2.0);
    couple(2, 3, 1.5);
    couple(4, 5, -1.5);
    couple(1, 4, 1.0);
    s.source.tint = {0.05, 0.0, -0.03};
    s.source.noise_freq = 0.08;
    s.source.noise_amplitude = 0.05;
    s.source.contrast = 1.0;
    s.source.bg_gradient_angle = 0.0;
    s.target.tint = {-0.04, 0.02, 0.06};
    s.target.noise_freq = 0.3;
    s.target.noise_amplitude = 0.08;
    s.target.contrast = 0.75;
    s.target.bg_gradient_angle = 90.0;
    return s;
}

std::vector<Box> SyntheticSpec::regions() const {
    std::vector<Box> boxes;
    for (int j = 0; j < num_labels; ++j) {
        const int row = j / 3, col = j % 3;
        boxes.push_back({col * image_size / 3, row * image_size / 2, (col + 1) * image_size / 3,
                         (row + 1) * image_size / 2});
    }
    return boxes;
}

void SyntheticSpec::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid synthetic spec: " + what); };
    if (image_size < 6) fail("image_size must be at least 6");
    if (num_labels < 1 || num_labels > 6) fail("num_labels must be in 1..6 (2x3 region grid)");
    if (static_cast<int>(cooccurrence.size()) != num_labels * num_labels) fail("cooccurrence must be JxJ");
    for (int i = 0; i < num_labels; ++i) {
        if (coupling(i, i) != 0.0) fail("cooccurrence diagonal must be zero");
        for (int j = 0; j < num_labels; ++j) {
            if (coupling(i, j) != coupling(j, i)) fail("cooccurrence must be symmetric");
            if (!std::isfinite(coupling(i, j))) fail("cooccurrence entries must be finite");
        }
    }
    if (!(base_rate >= 0.0 && base_rate <= 1.0)) fail("base_rate must be in [0,1]");
    if (!(spurious_cue.cue_strength >= 0.0 && spurious_cue.cue_strength <= 1.0)) fail("cue_strength must be in [0,1]");
    if (spurious_cue.label_index < 0 || spurious_cue.label_index >= num_labels) fail("spurious cue label out of range");
    for (const auto& b : regions()) {
        if (b.x0 < 0 || b.y0 < 0 || b.x1 > image_size || b.y1 > image_size || b.x1 <= b.x0 || b.y1 <= b.y0) {
            fail("regions must be non-empty and inside the image");
        }
    }
}

std::string SyntheticSpec::hash() const { return io::sha256_hex(to_json(*this).dump()); }

namespace {
json nuisance_json(const DomainNuisance& n) {
    return {{"tint", n.tint},
            {"noise_freq", n.noise_freq},
            {"noise_amplitude", n.noise_amplitude},
            {"contrast", n.contrast},
            {"bg_gradient_angle", n.bg_gradient_angle},
            {"bg_gradient_strength", n.bg_gradient_strength}};
}

DomainNuisance nuisance_from_json(const json& j) {
    DomainNuisance n;
    n.tint = j.at("tint").get<std::array<double, 3>>();
    n.noise_freq = j.at("noise_freq");
    n.noise_amplitude = j.at("noise_amplitude");
    n.contrast = j.at("contrast");
    n.bg_gradient_angle = j.at("bg_gradient_angle");
    n.bg_gradient_strength = j.at("bg_gradient_strength");
    return n;
}
}  // namespace

json to_json(const SyntheticSpec& s) {
    return {{"image_size", s.image_size},
            {"num_labels", s.num_labels},
            {"cooccurrence", s.cooccurrence},
            {"base_rate", s.base_rate},
            {"glyph_intensity", s.glyph_intensity},
            {"glyph_intensity_jitter", s.glyph_intensity_jitter},
            {"source", nuisance_json(s.source)},
            {"target", nuisance_json(s.target)},
            {"spurious_cue",
             {{"label_index", s.spurious_cue.label_index},
              {"cue_strength", s.spurious_cue.cue_strength},
              {"color", s.spurious_cue.color}}},
            {"seed", s.seed}};
}

SyntheticSpec spec_from_json(const json& j) {
    SyntheticSpec s;
    s.image_size = j.at("image_size");
    s.num_labels = j.at("num_labels");
    s.cooccurrence = j.at("cooccurrence").get<std::vector<double>>();
    s.base_rate = j.at("base_rate");
    s.glyph_intensity = j.at("glyph_intensity");
    s.glyph_intensity_jitter = j.at("glyph_intensity_jitter");
    s.source = nuisance_from_json(j.at("source"));
    s.target = nuisance_from_json(j.at("target"));
    const auto& cue = j.at("spurious_cue");
    s.spurious_cue.label_index = cue.at("label_index");
    s.spurious_cue.cue_strength = cue.at("cue_strength");
    s.spurious_cue.color = cue.at("color").get<std::array<double, 3>>();
    s.seed = j.at("seed");
    return s;
}

std::vector<std::uint8_t> sample_labels(const SyntheticSpec& spec, Rng& rng) {
    const int j_n = spec.num_labels;
    std::vector<std::uint8_t> y(static_cast<std::size_t>(j_n));
    for (auto& v : y) v = uniform_open(rng) < spec.base_rate ? 1 : 0;
    // One Gibbs sweep: each label resampled given the others under the
    // pairwise log-odds model.
    const double base_logit = std::log(spec.base_rate) - std::log1p(-spec.base_rate);
    for (int j = 0; j < j_n; ++j) {
        double logit = base_logit;
        for (int k = 0; k < j_n; ++k) {
            if (k != j && y[k]) logit += spec.coupling(j, k);
        }
        const double p = std::isinf(logit) ? (logit > 0 ? 1.0 : 0.0) : losses::logistic(logit);
        y[j] = uniform_open(rng) < p ? 1 : 0;
    }
    return y;
}

LabeledSample render(const SyntheticSpec& spec, const std::vector<std::uint8_t>& labels, Domain domain, Rng& rng) {
    if (static_cast<int>(labels.size()) != spec.num_labels) throw ShapeError("render: label count mismatch");
    const int size = spec.image_size;
    const auto plane = static_cast<std::size_t>(size * size);
    const DomainNuisance& nz = spec.nuisance(domain);
    std::vector<double> lum(plane, 0.0);

    // Background gradient along the domain's angle, zero mean over the image.
    const double angle = nz.bg_gradient_angle * std::numbers::pi / 180.0;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double u = ((x + 0.5) / size - 0.5) * ca + ((y + 0.5) / size - 0.5) * sa;
            lum[y * size + x] = 0.45 + nz.bg_gradient_strength * u;
        }
    }

    const auto boxes = spec.regions();
    for (int j = 0; j < spec.num_labels; ++j) {
        if (!labels[j]) continue;
        const Box& b = boxes[j];
        const double w = b.x1 - b.x0, h = b.y1 - b.y0;
        const double cx = b.x0 + w * (0.5 + 0.3 * (uniform_open(rng) - 0.5));
        const double cy = b.y0 + h * (0.5 + 0.3 * (uniform_open(rng) - 0.5));
        const double theta = std::numbers::pi * uniform_open(rng);
        const double intensity = spec.glyph_intensity + spec.glyph_intensity_jitter * (2.0 * uniform_open(rng) - 1.0);
        const double half = 0.32 * std::min(w, h);
        const double dx = std::cos(theta) * half, dy = std::sin(theta) * half;
        for (int y = b.y0; y < b.y1; ++y) {
            for (int x = b.x0; x < b.x1; ++x) {
                // Distance from pixel centre to the bar's centre segment.
                const double px = x + 0.5 - cx, py = y + 0.5 - cy;
                const double t = std::clamp((px * dx + py * dy) / (half * half), -1.0, 1.0);
                const double ex = px - t * dx, ey = py - t * dy;
                const double dist = std::sqrt(ex * ex + ey * ey);
                lum[y * size + x] += intensity * std::clamp(1.6 - dist, 0.0, 1.0);
            }
        }
    }

    // Band-limited texture: three plane waves at the domain frequency.
    std::array<double, 3> wave_angle{}, wave_phase{};
    for (int k = 0; k < 3; ++k) {
        wave_angle[k] = std::numbers::pi * uniform_open(rng);
        wave_phase[k] = 2.0 * std::numbers::pi * uniform_open(rng);
    }
    const bool cue = domain == Domain::source && labels[spec.spurious_cue.label_index] &&
                     uniform_open(rng) < spec.spurious_cue.cue_strength;

    LabeledSample s;
    s.domain = domain;
    s.labels = labels;
    s.image.resize(3 * plane);
    const double amp = nz.noise_amplitude / std::sqrt(3.0);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double tex = 0.0;
            for (int k = 0; k < 3; ++k) {
                const double proj = x * std::cos(wave_angle[k]) + y * std::sin(wave_angle[k]);
                tex += std::sin(2.0 * std::numbers::pi * nz.noise_freq * proj + wave_phase[k]);
            }
            const double base = 0.5 + nz.contrast * (lum[y * size + x] - 0.5);
            for (int c = 0; c < 3; ++c) {
                double v = base + nz.tint[c] + amp * tex;
                if (cue) v += spec.spurious_cue.color[c];
                s.image[c * plane + y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return s;
}

void quantize(std::vector<float>& image) {
    for (auto& v : image) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
}

std::string domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(const std::string& text) {
    if (text == "source") return Domain::source;
    if (text == "target") return Domain::target;
    throw ConfigError("domain must be 'source' or 'target', got '" + text + "'");
}

namespace {
std::string sample_id(Domain domain, const std::string& split, int index) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s-%s-%06d", domain == Domain::source ? "src" : "tgt", split.c_str(), index);
    return buf;
}

LabeledSample make_sample(const SyntheticSpec& spec, Domain domain, const std::string& split, int index,
                          std::uint64_t split_seed) {
    const std::string id = sample_id(domain, split, index);
    const std::uint64_t key = io::fnv1a64(id);
    Rng label_rng(derive_seed(spec.seed, {kStreamLabels, split_seed, key}));
    Rng render_rng(derive_seed(spec.seed, {kStreamRender, split_seed, key}));
    auto labels = sample_labels(spec, label_rng);
    auto s = render(spec, labels, domain, render_rng);
    quantize(s.image);
    s.sample_id = id;
    return s;
}
}  // namespace

Dataset make_split(const SyntheticSpec& spec, Domain domain, const std::string& split, int n,
                   std::uint64_t split_seed, bool keep_labels) {
    spec.validate();
    if (n < 1) throw ConfigError("dataset size must be >= 1");
    Dataset d;
    d.domain = domain;
    d.image_size = spec.image_size;
    d.samples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto s = make_sample(spec, domain, split, i, split_seed);
        if (!keep_labels) s.labels.reset();
        d.samples.push_back(std::move(s));
    }
    return d;
}

ManifestInfo generate_dataset(const SyntheticSpec& spec, Domain domain, const std::string& split, int n,
                              std::uint64_t split_seed, const std::filesystem::path& out_dir, bool keep_labels) {
    const Dataset d = make_split(spec, domain, split, n, split_seed, keep_labels);
    const int size = spec.image_size;
    const auto plane = static_cast<std::size_t>(size * size);
    json rows = json::array();
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        const auto& s = d.samples[i];
        io::RgbImage img;
        img.width = img.height = size;
        img.pixels.resize(3 * plane);
        for (std::size_t p = 0; p < plane; ++p) {
            for (std::size_t c = 0; c < 3; ++c) {
                img.pixels[3 * p + c] = static_cast<std::uint8_t>(std::lround(s.image[c * plane + p] * 255.0f));
            }
        }
        const std::string rel = split + "/" + domain_name(domain) + "/" + s.sample_id + ".png";
        try {
            io::write_png(out_dir / rel, img);
        } catch (const std::filesystem::filesystem_error& e) {
            throw DataError("cannot write " + (out_dir / rel).string() + ": " + e.what());
        }
        json row = {{"sample_id", s.sample_id}, {"path", rel}, {"domain", domain_name(domain)}};
        if (s.labels) row["labels"] = *s.labels;
        rows.push_back(std::move(row));
    }
    json manifest = {{"format", "dadrop-manifest"},
                     {"generator_version", kGeneratorVersion},
                     {"spec_hash", spec.hash()},
                     {"domain", domain_name(domain)},
                     {"split", split},
                     {"split_seed", split_seed},
                     {"image_size", size},
                     {"num_labels", spec.num_labels},
                     {"labeled", keep_labels},
                     {"samples", std::move(rows)}};
    io::write_text(out_dir / "spec.json", to_json(spec).dump(2) + "\n");
    ManifestInfo info;
    info.manifest_path = out_dir / (split + "_" + domain_name(domain) + ".manifest.json");
    const std::string text = manifest.dump(2) + "\n";
    io::write_text(info.manifest_path, text);
    info.manifest_hash = io::sha256_hex(text);
    return info;
}

Dataset load_manifest(const std::filesystem::path& manifest_path) {
    json m;
    try {
        m = json::parse(io::read_text(manifest_path));
    } catch (const json::exception& e) {
        throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    if (m.value("format", "") != "dadrop-manifest") throw DataError("not a dataset manifest: " + manifest_path.string());
    if (m.at("generator_version").get<int>() != kGeneratorVersion) {
        throw DataError("manifest generator version mismatch in " + manifest_path.string());
    }
    Dataset d;
    d.domain = parse_domain(m.at("domain"));
    d.image_size = m.at("image_size");
    const auto base = manifest_path.parent_path();
    const auto plane = static_cast<std::size_t>(d.image_size * d.image_size);
    for (const auto& row : m.at("samples")) {
        LabeledSample s;
        s.sample_id = row.at("sample_id");
        s.domain = parse_domain(row.at("domain"));
        if (row.contains("labels")) s.labels = row.at("labels").get<std::vector<std::uint8_t>>();
        const auto img = io::read_png(base / row.at("path").get<std::string>());
        if (img.width != d.image_size || img.height != d.image_size) {
            throw DataError("image size mismatch for " + s.sample_id);
        }
        s.image.resize(3 * plane);
        for (std::size_t p = 0; p < plane; ++p) {
            for (std::size_t c = 0; c < 3; ++c) s.image[c * plane + p] = img.pixels[3 * p + c] / 255.0f;
        }
        d.samples.push_back(std::move(s));
    }
    return d;
}

Tensor stack_images(const Dataset& data, std::span<const std::size_t> indices) {
    const auto per = static_cast<std::size_t>(3 * data.image_size * data.image_size);
    std::vector<float> v;
    v.reserve(per * indices.size());
    for (auto i : indices) {
        const auto& img = data.samples.at(i).image;
        v.insert(v.end(), img.begin(), img.end());
    }
    return Tensor({static_cast<std::int64_t>(indices.size()), 3, data.image_size, data.image_size}, std::move(v));
}

std::vector<float> stack_labels(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<float> v;
    for (auto i : indices) {
        const auto& s = data.samples.at(i);
        if (!s.labels) throw DataError("sample " + s.sample_id + " has no labels");
        for (auto y : *s.labels) v.push_back(static_cast<float>(y));
    }
    return v;
}

namespace {
std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_index(rng, i)]);
    return p;
}
}  // namespace

MixedBatches::MixedBatches(const Dataset& source, const Dataset& target, int batch_per_domain,
                           std::uint64_t epoch_seed)
    : source_(source), target_(target), batch_(batch_per_domain) {
    if (source.size() == 0 || target.size() == 0) throw DataError("mixed batches need non-empty source and target");
    if (batch_per_domain < 1) throw ConfigError("batch_per_domain must be >= 1");
    if (static_cast<std::size_t>(batch_per_domain) > source.size() ||
        static_cast<std::size_t>(batch_per_domain) > target.size()) {
        throw DataError("batch_per_domain " + std::to_string(batch_per_domain) + " exceeds dataset size (source " +
                        std::to_string(source.size()) + ", target " + std::to_string(target.size()) + ")");
    }
    if (!source.labeled()) throw DataError("source dataset has no labels");
    Rng rng(epoch_seed);
    source_order_ = permutation(source.size(), rng);
    target_order_ = permutation(target.size(), rng);
    const std::size_t longest = std::max(source.size(), target.size());
    steps_ = (longest + batch_ - 1) / batch_;
}

Batch MixedBatches::batch(std::size_t step) const {
    std::vector<std::size_t> si, ti;
    for (int i = 0; i < batch_; ++i) {
        const std::size_t pos = step * batch_ + i;
        si.push_back(source_order_[pos % source_order_.size()]);
        ti.push_back(target_order_[pos % target_order_.size()]);
    }
    Batch b;
    b.source_images = stack_images(source_, si);
    b.source_labels = stack_labels(source_, si);
    b.target_images = stack_images(target_, ti);
    for (auto i : si) {
        b.source_ids.push_back(source_.samples[i].sample_id);
        b.source_keys.push_back(io::fnv1a64(source_.samples[i].sample_id));
    }
    for (auto i : ti) {
        b.target_ids.push_back(target_.samples[i].sample_id);
        b.target_keys.push_back(io::fnv1a64(target_.samples[i].sample_id));
    }
    return b;
}

}  // namespace dadrop::synth
