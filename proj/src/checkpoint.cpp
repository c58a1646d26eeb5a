#include "sparsebridge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sparsebridge/errors.hpp"

namespace sparsebridge {

namespace {

constexpr char kMagic[6] = {'S', 'B', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T> void put(std::string &out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T> T get(const std::string &in, std::size_t &pos) {
    if (pos + sizeof(T) > in.size()) throw LoadError("checkpoint: unexpected end of data");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace

const Tensor &Checkpoint::tensor(const std::string &name) const {
    for (const auto &[n, t] : tensors)
        if (n == name) return t;
    throw LoadError("checkpoint: missing tensor '" + name + "'");
}

std::string encode_checkpoint(const Checkpoint &ckpt) {
    nlohmann::json header;
    header["kind"] = ckpt.kind;
    header["config"] = ckpt.config;
    header["tensors"] = nlohmann::json::array();
    for (const auto &[name, t] : ckpt.tensors) header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
    const std::string hdr = header.dump();

    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, Checkpoint::kVersion);
    put<std::uint64_t>(out, hdr.size());
    out += hdr;
    for (const auto &[name, t] : ckpt.tensors)
        out.append(reinterpret_cast<const char *>(t.data()), t.size() * sizeof(double));
    return out;
}

Checkpoint decode_checkpoint(const std::string &bytes) {
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw LoadError("checkpoint: bad magic");
    std::size_t pos = sizeof(kMagic);
    const auto version = get<std::uint32_t>(bytes, pos);
    if (version != Checkpoint::kVersion) throw LoadError("checkpoint: unsupported version " + std::to_string(version));
    const auto hlen = get<std::uint64_t>(bytes, pos);
    if (pos + hlen > bytes.size()) throw LoadError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(pos, hlen));
    } catch (const nlohmann::json::exception &e) {
        throw LoadError(std::string("checkpoint: malformed header: ") + e.what());
    }
    pos += hlen;

    Checkpoint ckpt;
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.config = header.at("config");
    for (const auto &entry : header.at("tensors")) {
        Tensor t(entry.at("shape").get<std::vector<int>>());
        const std::size_t nbytes = t.size() * sizeof(double);
        if (pos + nbytes > bytes.size()) throw LoadError("checkpoint: truncated tensor data");
        std::memcpy(t.data(), bytes.data() + pos, nbytes);
        pos += nbytes;
        ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
    if (pos != bytes.size()) throw LoadError("checkpoint: trailing bytes");
    return ckpt;
}

void save_checkpoint(const Checkpoint &ckpt, const std::filesystem::path &path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot write checkpoint " + path.string());
    const std::string bytes = encode_checkpoint(ckpt);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("missing checkpoint " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return decode_checkpoint(ss.str());
}

} // namespace sparsebridge
