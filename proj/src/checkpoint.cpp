#include "dadrop/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dadrop/errors.hpp"
#include "dadrop/io.hpp"

namespace dadrop {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'A', 'D', 'R', 'O', 'P', 'C', 'K'};
const std::string kVelocityPrefix = "optim.velocity.";

template <typename T>
void put_le(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw CheckpointError("corrupt checkpoint: truncated header");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += sizeof(T);
    return v;
}

json state_json(const TrainingState& s) {
    return {{"epochs_completed", s.epochs_completed},
            {"step", s.step},
            {"best_val_f1", s.best_val_f1},
            {"best_epoch", s.best_epoch}};
}

TrainingState state_from_json(const json& j) {
    TrainingState s;
    s.epochs_completed = j.at("epochs_completed");
    s.step = j.at("step");
    s.best_val_f1 = j.at("best_val_f1");
    s.best_epoch = j.at("best_epoch");
    return s;
}

}  // namespace

Checkpoint capture(Model& model, const TrainConfig& config, const TrainingState& state, const SgdMomentum* optimizer) {
    Checkpoint c;
    c.config = config;
    c.state = state;
    for (const auto& p : model.parameters()) {
        c.arrays[p.name] = {p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())};
    }
    for (const auto& b : model.buffers()) {
        c.arrays[b.name] = {{static_cast<std::int64_t>(b.values->size())}, *b.values};
    }
    if (optimizer) {
        for (const auto& [name, v] : optimizer->velocity()) {
            c.arrays[kVelocityPrefix + name] = {{static_cast<std::int64_t>(v.size())}, v};
        }
    }
    return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    json index = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, arr] : checkpoint.arrays) {
        index.push_back({{"name", name}, {"shape", arr.shape}, {"offset", offset}, {"count", arr.values.size()}});
        offset += arr.values.size();
    }
    json header = {{"format_version", checkpoint.format_version},
                   {"backbone_config", to_json(checkpoint.config.backbone)},
                   {"train_config", to_json(checkpoint.config)},
                   {"training_state", state_json(checkpoint.state)},
                   {"arrays", std::move(index)}};
    const std::string header_text = header.dump();

    std::string out(kMagic, sizeof kMagic);
    put_le<std::uint32_t>(out, checkpoint.format_version);
    put_le<std::uint64_t>(out, header_text.size());
    out += header_text;
    out.reserve(out.size() + offset * 4);
    for (const auto& [name, arr] : checkpoint.arrays) {
        for (float f : arr.values) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_le<std::uint32_t>(out, bits);
        }
    }
    io::write_text(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::string raw;
    try {
        raw = io::read_text(path);
    } catch (const DataError& e) {
        throw CheckpointError(std::string("cannot open checkpoint: ") + e.what());
    }
    if (raw.size() < sizeof kMagic || std::memcmp(raw.data(), kMagic, sizeof kMagic) != 0) {
        throw CheckpointError("corrupt checkpoint " + path.string() + ": bad magic");
    }
    std::size_t pos = sizeof kMagic;
    const auto version = get_le<std::uint32_t>(raw, pos);
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint format version " + std::to_string(version) + " not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    const auto header_len = get_le<std::uint64_t>(raw, pos);
    if (pos + header_len > raw.size()) throw CheckpointError("corrupt checkpoint: truncated header");
    json header;
    try {
        header = json::parse(raw.substr(pos, header_len));
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
    }
    pos += header_len;
    Checkpoint c;
    c.format_version = version;
    try {
        c.config = train_config_from_json(header.at("train_config"));
        c.config.backbone = backbone_from_json(header.at("backbone_config"));
        c.state = state_from_json(header.at("training_state"));
        for (const auto& entry : header.at("arrays")) {
            StoredArray arr;
            arr.shape = entry.at("shape").get<Shape>();
            const auto offset = entry.at("offset").get<std::uint64_t>();
            const auto count = entry.at("count").get<std::uint64_t>();
            const std::size_t begin = pos + offset * 4;
            if (begin + count * 4 > raw.size()) throw CheckpointError("corrupt checkpoint: truncated data");
            arr.values.resize(count);
            std::size_t p = begin;
            for (auto& f : arr.values) {
                const auto bits = get_le<std::uint32_t>(raw, p);
                std::memcpy(&f, &bits, 4);
            }
            c.arrays[entry.at("name").get<std::string>()] = std::move(arr);
        }
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
    }
    return c;
}

void restore(Model& model, const Checkpoint& checkpoint, SgdMomentum* optimizer) {
    const auto diffs = config_differences(model.backbone.config(), checkpoint.config.backbone);
    if (!diffs.empty()) {
        std::string msg = "checkpoint config mismatch:";
        for (const auto& d : diffs) msg += "\n  " + d;
        throw CheckpointError(msg);
    }
    auto fetch = [&](const std::string& name, std::size_t expected) -> const std::vector<float>& {
        const auto it = checkpoint.arrays.find(name);
        if (it == checkpoint.arrays.end()) throw CheckpointError("checkpoint is missing array " + name);
        if (it->second.values.size() != expected) throw CheckpointError("checkpoint array " + name + " has wrong size");
        return it->second.values;
    };
    for (const auto& p : model.parameters()) {
        auto t = p.tensor;
        const auto& v = fetch(p.name, t.data().size());
        std::copy(v.begin(), v.end(), t.data().begin());
    }
    for (const auto& b : model.buffers()) {
        const auto& v = fetch(b.name, b.values->size());
        *b.values = v;
    }
    if (optimizer) {
        optimizer->velocity().clear();
        for (const auto& [name, arr] : checkpoint.arrays) {
            if (name.rfind(kVelocityPrefix, 0) == 0) optimizer->velocity()[name.substr(kVelocityPrefix.size())] = arr.values;
        }
    }
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& checkpoint) {
    auto model = std::make_unique<Model>(checkpoint.config.backbone, static_cast<float>(checkpoint.config.lambda),
                                         checkpoint.config.seed);
    restore(*model, checkpoint);
    return model;
}

std::string checkpoint_hash(const std::filesystem::path& path) { return io::sha256_file(path); }

}  // namespace dadrop
