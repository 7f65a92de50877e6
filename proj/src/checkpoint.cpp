#include "tora2/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "tora2/tensor.hpp"

namespace tora2 {

namespace {

constexpr char kMagic[8] = {'T', 'O', 'R', 'A', '2', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ValueError(std::string("checkpoint: truncated while reading ") + what);
    return v;
}

void write_doubles(std::ostream& out, const std::vector<double>& d) {
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(double)));
}

void read_doubles(std::istream& in, std::vector<double>& d, const std::string& what) {
    in.read(reinterpret_cast<char*>(d.data()),
            static_cast<std::streamsize>(d.size() * sizeof(double)));
    if (!in) throw ValueError("checkpoint: truncated while reading " + what);
}

nlohmann::json read_header(std::istream& in) {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw ValueError("checkpoint: bad magic, not a checkpoint file");
    uint32_t version = read_pod<uint32_t>(in, "version");
    if (version != kVersion)
        throw ValueError("checkpoint: unsupported format version " + std::to_string(version));
    uint64_t hlen = read_pod<uint64_t>(in, "header length");
    std::string text(hlen, '\0');
    in.read(text.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw ValueError("checkpoint: truncated while reading header");
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValueError(std::string("checkpoint: corrupt header: ") + e.what());
    }
}

CheckpointMeta meta_from_header(const nlohmann::json& h) {
    CheckpointMeta meta;
    meta.step = h.at("step").get<int64_t>();
    meta.config_hash = h.at("config_hash").get<uint64_t>();
    return meta;
}

}  // namespace

void CheckpointIO::save(const std::string& path, const ParamStore& ps, const CheckpointMeta& meta,
                        const AdamW* opt) {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& e : ps.entries_)
        params.push_back(
            {{"name", e.name}, {"shape", e.value.shape}, {"frozen", e.frozen}});
    nlohmann::json header = {{"step", meta.step},
                             {"config_hash", meta.config_hash},
                             {"params", params},
                             {"optimizer", opt != nullptr},
                             {"optimizer_steps", opt ? opt->t_ : 0}};
    std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValueError("checkpoint: cannot write '" + path + "'");
    out.write(kMagic, 8);
    write_pod(out, kVersion);
    write_pod(out, static_cast<uint64_t>(htext.size()));
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& e : ps.entries_) write_doubles(out, e.value.data);
    if (opt)
        for (const auto& e : ps.entries_) {
            write_doubles(out, e.m.data);
            write_doubles(out, e.v.data);
        }
    if (!out) throw ValueError("checkpoint: write failed for '" + path + "'");
}

CheckpointMeta CheckpointIO::load(const std::string& path, ParamStore& ps, AdamW* opt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValueError("checkpoint: cannot read '" + path + "'");
    nlohmann::json header = read_header(in);

    const auto& params = header.at("params");
    if (params.size() != static_cast<size_t>(ps.count()))
        throw ValueError("checkpoint: holds " + std::to_string(params.size()) +
                         " parameters, store has " + std::to_string(ps.count()));
    for (int i = 0; i < ps.count(); ++i) {
        const auto& pj = params[static_cast<size_t>(i)];
        std::string name = pj.at("name").get<std::string>();
        if (name != ps.name(i))
            throw ValueError("checkpoint: parameter " + std::to_string(i) + " is '" + name +
                             "', store expects '" + ps.name(i) + "'");
        std::vector<int64_t> shape = pj.at("shape").get<std::vector<int64_t>>();
        if (shape != ps.value(i).shape)
            throw ValueError("checkpoint: shape mismatch for parameter '" + name + "'");
    }

    for (auto& e : ps.entries_) read_doubles(in, e.value.data, "parameter '" + e.name + "'");
    bool has_opt = header.at("optimizer").get<bool>();
    if (has_opt && opt) {
        for (auto& e : ps.entries_) {
            read_doubles(in, e.m.data, "optimizer state of '" + e.name + "'");
            read_doubles(in, e.v.data, "optimizer state of '" + e.name + "'");
        }
        opt->t_ = header.at("optimizer_steps").get<int64_t>();
    }
    return meta_from_header(header);
}

CheckpointMeta CheckpointIO::peek(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValueError("checkpoint: cannot read '" + path + "'");
    return meta_from_header(read_header(in));
}

}  // namespace tora2
