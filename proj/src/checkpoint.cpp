#include "iceseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "iceseg/serde.hpp"

namespace iceseg {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'I', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

struct Entry {
    std::string name;
    std::string kind;  // param | buffer
    std::vector<int> shape;
    std::int64_t offset = 0;
    std::int64_t count = 0;
};

struct Slot {
    float* data = nullptr;
    std::int64_t count = 0;
    std::vector<int> shape;
    std::string kind;
};

std::vector<std::pair<std::string, Slot>> collect_slots(Net& net) {
    std::vector<std::pair<std::string, Slot>> slots;
    for_each_param<float>(net, [&slots](const std::string& name, Tensor& p) {
        const Shape4 s = p.shape();
        slots.emplace_back(name, Slot{p.data(), p.numel(), {s.n, s.c, s.h, s.w}, "param"});
    });
    for_each_buffer<float>(net, [&slots](const std::string& name, std::vector<float>& b) {
        slots.emplace_back(name, Slot{b.data(), static_cast<std::int64_t>(b.size()),
                                      {static_cast<int>(b.size())}, "buffer"});
    });
    return slots;
}

json meta_to_json(const CheckpointMeta& meta) {
    json j;
    j["format"] = "iceseg-checkpoint";
    j["version"] = 1;
    j["architecture"] = arch_name(meta.config.architecture);
    j["config"] = meta.config;
    if (meta.norm_stats) j["norm_stats"] = *meta.norm_stats;
    if (meta.history)
        j["history"] = {{"epochs", meta.history->epochs},
                        {"best_epoch", meta.history->best_epoch},
                        {"best_val_loss", meta.history->best_val_loss}};
    if (!meta.run_config_json.empty()) j["run_config"] = json::parse(meta.run_config_json);
    return j;
}

CheckpointMeta meta_from_json(const json& j) {
    CheckpointMeta meta;
    meta.config = j.at("config").get<ModelConfig>();
    if (j.contains("norm_stats")) meta.norm_stats = j["norm_stats"].get<NormStats>();
    if (j.contains("history")) {
        HistorySummary h;
        h.epochs = j["history"].value("epochs", 0);
        h.best_epoch = j["history"].value("best_epoch", -1);
        h.best_val_loss = j["history"].value("best_val_loss", 0.0);
        meta.history = h;
    }
    if (j.contains("run_config")) meta.run_config_json = j["run_config"].dump();
    return meta;
}

struct RawCheckpoint {
    json manifest;
    std::vector<Entry> entries;
    std::vector<float> blob;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open checkpoint " + path.string());
    char magic[8];
    f.read(magic, 8);
    require(f.gcount() == 8 && std::memcmp(magic, kMagic, 8) == 0,
            "not a checkpoint file: " + path.string());
    std::uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), 8);
    require(f.good(), "truncated checkpoint header in " + path.string());
    std::string mtext(mlen, '\0');
    f.read(mtext.data(), static_cast<std::streamsize>(mlen));
    require(f.gcount() == static_cast<std::streamsize>(mlen),
            "truncated checkpoint manifest in " + path.string());

    RawCheckpoint raw;
    raw.manifest = json::parse(mtext);
    std::int64_t total = 0;
    for (const auto& ej : raw.manifest.at("entries")) {
        Entry e;
        e.name = ej.at("name").get<std::string>();
        e.kind = ej.at("kind").get<std::string>();
        e.shape = ej.at("shape").get<std::vector<int>>();
        e.offset = ej.at("offset").get<std::int64_t>();
        e.count = ej.at("count").get<std::int64_t>();
        require(e.offset == total * static_cast<std::int64_t>(sizeof(float)),
                "checkpoint entry " + e.name + " has inconsistent offset");
        total += e.count;
        raw.entries.push_back(std::move(e));
    }
    raw.blob.resize(static_cast<std::size_t>(total));
    f.read(reinterpret_cast<char*>(raw.blob.data()),
           static_cast<std::streamsize>(total * static_cast<std::int64_t>(sizeof(float))));
    require(f.gcount() == static_cast<std::streamsize>(total * static_cast<std::int64_t>(sizeof(float))),
            "truncated checkpoint blob in " + path.string());
    return raw;
}

void fill_from_raw(Net& net, const RawCheckpoint& raw) {
    auto slots = collect_slots(net);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < slots.size(); ++i) index[slots[i].first] = i;

    std::vector<bool> seen(slots.size(), false);
    for (const Entry& e : raw.entries) {
        auto it = index.find(e.name);
        require(it != index.end(), "checkpoint entry " + e.name + " does not exist in the model");
        Slot& slot = slots[it->second].second;
        require(!seen[it->second], "checkpoint lists " + e.name + " twice");
        require(e.count == slot.count && e.shape == slot.shape,
                "checkpoint entry " + e.name + " shape mismatch");
        std::memcpy(slot.data, raw.blob.data() + e.offset / sizeof(float),
                    static_cast<std::size_t>(e.count) * sizeof(float));
        seen[it->second] = true;
    }
    for (std::size_t i = 0; i < slots.size(); ++i)
        require(seen[i], "checkpoint is missing parameter path " + slots[i].first);
}

}  // namespace

void save_checkpoint(Net& net, const CheckpointMeta& meta, const std::filesystem::path& path) {
    auto slots = collect_slots(net);
    json manifest = meta_to_json(meta);
    json entries = json::array();
    std::int64_t offset = 0;
    for (const auto& [name, slot] : slots) {
        entries.push_back({{"name", name},
                           {"kind", slot.kind},
                           {"shape", slot.shape},
                           {"offset", offset},
                           {"count", slot.count}});
        offset += slot.count * static_cast<std::int64_t>(sizeof(float));
    }
    manifest["entries"] = std::move(entries);
    const std::string mtext = manifest.dump();

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(f.good(), "cannot write checkpoint " + path.string());
        f.write(kMagic, 8);
        const std::uint64_t mlen = mtext.size();
        f.write(reinterpret_cast<const char*>(&mlen), 8);
        f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
        for (const auto& [name, slot] : slots)
            f.write(reinterpret_cast<const char*>(slot.data),
                    static_cast<std::streamsize>(slot.count * static_cast<std::int64_t>(sizeof(float))));
        require(f.good(), "short write on checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    RawCheckpoint raw = read_raw(path);
    LoadedCheckpoint out;
    out.meta = meta_from_json(raw.manifest);
    out.net = build_model<float>(out.meta.config);
    fill_from_raw(out.net, raw);
    return out;
}

void load_checkpoint_into(Net& net, const std::filesystem::path& path) {
    RawCheckpoint raw = read_raw(path);
    const ModelConfig stored = raw.manifest.at("config").get<ModelConfig>();
    require(stored.architecture == net.config.architecture,
            "checkpoint/model mismatch: architecture " +
                std::string(arch_name(stored.architecture)) + " vs " +
                arch_name(net.config.architecture));
    require(stored.num_classes == net.config.num_classes,
            "checkpoint/model mismatch: num_classes " + std::to_string(stored.num_classes) +
                " vs " + std::to_string(net.config.num_classes));
    require(stored.in_channels == net.config.in_channels,
            "checkpoint/model mismatch: in_channels differ");
    require(stored.base_width == net.config.base_width,
            "checkpoint/model mismatch: base_width differs");
    fill_from_raw(net, raw);
}

void import_encoder_weights(Net& net, const std::filesystem::path& path) {
    RawCheckpoint raw = read_raw(path);
    auto slots = collect_slots(net);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < slots.size(); ++i) index[slots[i].first] = i;

    std::vector<bool> seen(slots.size(), false);
    for (const Entry& e : raw.entries) {
        if (!e.name.starts_with("encoder.")) continue;
        auto it = index.find(e.name);
        require(it != index.end(),
                "import_encoder_weights: blob path " + e.name + " does not exist in the model");
        Slot& slot = slots[it->second].second;
        require(e.count == slot.count && e.shape == slot.shape,
                "import_encoder_weights: shape mismatch at " + e.name);
        std::memcpy(slot.data, raw.blob.data() + e.offset / sizeof(float),
                    static_cast<std::size_t>(e.count) * sizeof(float));
        seen[it->second] = true;
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (!slots[i].first.starts_with("encoder.")) continue;
        require(seen[i], "import_encoder_weights: blob is missing parameter path " + slots[i].first);
    }
}

}  // namespace iceseg
