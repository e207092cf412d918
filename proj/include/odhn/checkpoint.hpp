#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "odhn/tensor.hpp"

namespace odhn {

// Container: magic "ODHN", u32 version (LE), u64 header length (LE), UTF-8
// JSON header (tensor names/shapes/dtype, phase tag, config echo), then the
// float64 payloads concatenated little-endian in header order.
class Checkpoint {
public:
    static constexpr std::uint32_t kVersion = 1;

    std::string phase;      // pretrain | regression | classifier | clinical
    nlohmann::json config;  // verbatim pipeline-config echo

    void add(const std::string& name, const Tensor& t);
    bool has(const std::string& name) const;
    // Copies the stored values; VersionError when absent or shape-mismatched.
    Tensor require(const std::string& name, const Shape& expect) const;
    const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

    std::vector<std::uint8_t> serialize() const;
    static Checkpoint deserialize(const std::uint8_t* data, std::size_t size);

    void save(const std::filesystem::path& path) const;  // atomic write
    static Checkpoint load(const std::filesystem::path& path);

private:
    std::vector<std::pair<std::string, Tensor>> tensors_;
};

}  // namespace odhn
