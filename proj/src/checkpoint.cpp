#include "eegdg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace eegdg {
namespace ckpt {

using nlohmann::json;

namespace {

constexpr char kMagic[6] = {'E', 'E', 'G', 'D', 'G', '1'};

json shape_table(nn::Network<float>& net) {
    json entries = json::array();
    auto add = [&](const NamedParam<float>& p) {
        json e;
        e["name"] = p.name;
        e["shape"] = p.tensor->shape();
        entries.push_back(e);
    };
    for (const auto& p : net.parameters()) add(p);
    for (const auto& b : net.buffers()) add(b);
    return entries;
}

}  // namespace

void save_checkpoint(nn::Network<float>& net, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
    json header;
    header["model"] = meta.model;
    header["channels"] = meta.channels;
    header["samples"] = meta.samples;
    header["num_classes"] = meta.num_classes;
    header["excluded_subject"] = meta.excluded_subject;
    header["entries"] = shape_table(net);
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    }
    f.write(kMagic, sizeof(kMagic));
    const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));

    auto blob = [&f](const NamedParam<float>& p) {
        f.write(reinterpret_cast<const char*>(p.tensor->data()),
                static_cast<std::streamsize>(p.tensor->size() * sizeof(float)));
    };
    for (const auto& p : net.parameters()) blob(p);
    for (const auto& b : net.buffers()) blob(b);
    if (!f) {
        throw std::runtime_error("save_checkpoint: write failed for " +
                                 path.string());
    }
}

namespace {

json read_header(std::ifstream& f, const std::filesystem::path& path) {
    char magic[6];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    }
    std::uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string hs(len, '\0');
    f.read(hs.data(), len);
    if (!f) {
        throw std::runtime_error("checkpoint: truncated header in " +
                                 path.string());
    }
    return json::parse(hs);
}

CheckpointMeta meta_from(const json& header) {
    CheckpointMeta meta;
    meta.model = header.at("model").get<std::string>();
    meta.channels = header.at("channels").get<int>();
    meta.samples = header.at("samples").get<int>();
    meta.num_classes = header.at("num_classes").get<int>();
    meta.excluded_subject = header.at("excluded_subject").get<int>();
    return meta;
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("checkpoint: cannot open " + path.string());
    }
    return meta_from(read_header(f, path));
}

nn::Network<float> load_checkpoint(const std::filesystem::path& path,
                                   CheckpointMeta* meta_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("checkpoint: cannot open " + path.string());
    }
    const json header = read_header(f, path);
    const CheckpointMeta meta = meta_from(header);
    if (meta_out) *meta_out = meta;

    auto cfg = nn::build_model(nn::parse_model_name(meta.model), meta.channels,
                               meta.samples, meta.num_classes);
    nn::Network<float> net(cfg, 0);

    std::vector<NamedParam<float>> slots;
    for (auto& p : net.parameters()) slots.push_back(p);
    for (auto& b : net.buffers()) slots.push_back(b);

    const auto& entries = header.at("entries");
    if (entries.size() != slots.size()) {
        throw std::runtime_error(
            "checkpoint: " + path.string() + " holds " +
            std::to_string(entries.size()) + " arrays, model needs " +
            std::to_string(slots.size()));
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& e = entries[i];
        const auto name = e.at("name").get<std::string>();
        const auto shape = e.at("shape").get<Shape>();
        if (name != slots[i].name || shape != slots[i].tensor->shape()) {
            throw std::runtime_error("checkpoint: entry " + std::to_string(i) +
                                     " is " + name + shape_str(shape) +
                                     ", expected " + slots[i].name +
                                     shape_str(slots[i].tensor->shape()));
        }
        f.read(reinterpret_cast<char*>(slots[i].tensor->data()),
               static_cast<std::streamsize>(slots[i].tensor->size() *
                                            sizeof(float)));
        if (!f) {
            throw std::runtime_error("checkpoint: truncated blob for " + name +
                                     " in " + path.string());
        }
    }
    return net;
}

}  // namespace ckpt
}  // namespace eegdg
