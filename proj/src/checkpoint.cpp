#include "odhn/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "odhn/image.hpp"

namespace odhn {

using nlohmann::json;

namespace {

static_assert(sizeof(double) == 8);

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void put_doubles_le(std::vector<std::uint8_t>& out, const double* v, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, v + i, 8);
        put_u64_le(out, bits);
    }
}

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) {
    for (const auto& [n, _] : tensors_)
        if (n == name) throw IntegrityError("checkpoint: duplicate tensor name " + name);
    tensors_.emplace_back(name, t.detach());
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, _] : tensors_)
        if (n == name) return true;
    return false;
}

Tensor Checkpoint::require(const std::string& name, const Shape& expect) const {
    for (const auto& [n, t] : tensors_) {
        if (n != name) continue;
        if (t.shape() != expect)
            throw VersionError("checkpoint: tensor " + name + " has shape " + shape_str(t.shape()) +
                               ", model expects " + shape_str(expect));
        return t.detach();
    }
    throw VersionError("checkpoint: missing tensor " + name);
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
    json header;
    header["phase"] = phase;
    header["config"] = config.is_null() ? json::object() : config;
    header["tensors"] = json::array();
    for (const auto& [name, t] : tensors_) {
        json jt;
        jt["name"] = name;
        jt["shape"] = t.shape();
        jt["dtype"] = "f64";
        header["tensors"].push_back(std::move(jt));
    }
    const std::string hs = header.dump();

    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'O', 'D', 'H', 'N'});
    put_u32_le(out, kVersion);
    put_u64_le(out, hs.size());
    out.insert(out.end(), hs.begin(), hs.end());
    for (const auto& [name, t] : tensors_) put_doubles_le(out, t.data(), t.numel());
    return out;
}

Checkpoint Checkpoint::deserialize(const std::uint8_t* data, std::size_t size) {
    if (size < 16 || std::memcmp(data, "ODHN", 4) != 0)
        throw ParseError("checkpoint: bad magic bytes");
    const std::uint32_t version = get_u32_le(data + 4);
    if (version != kVersion)
        throw VersionError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint64_t hlen = get_u64_le(data + 8);
    if (16 + hlen > size) throw ParseError("checkpoint: truncated header");
    json header = json::parse(std::string(reinterpret_cast<const char*>(data) + 16, hlen));

    Checkpoint cp;
    cp.phase = header.at("phase").get<std::string>();
    cp.config = header.at("config");
    std::size_t pos = 16 + hlen;
    for (const auto& jt : header.at("tensors")) {
        const std::string name = jt.at("name").get<std::string>();
        const Shape shape = jt.at("shape").get<Shape>();
        if (jt.at("dtype").get<std::string>() != "f64")
            throw VersionError("checkpoint: tensor " + name + " has unsupported dtype");
        Tensor t = Tensor::zeros(shape);
        const std::size_t bytes = static_cast<std::size_t>(t.numel()) * 8;
        if (pos + bytes > size) throw ParseError("checkpoint: truncated payload for " + name);
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const std::uint64_t bits = get_u64_le(data + pos + static_cast<std::size_t>(i) * 8);
            double v;
            std::memcpy(&v, &bits, 8);
            t.data()[i] = v;
        }
        pos += bytes;
        cp.tensors_.emplace_back(name, std::move(t));
    }
    if (pos != size) throw ParseError("checkpoint: trailing bytes");
    return cp;
}

void Checkpoint::save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    atomic_write_file(path, bytes.data(), bytes.size());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return deserialize(bytes.data(), bytes.size());
}

}  // namespace odhn
