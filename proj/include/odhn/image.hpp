#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "odhn/error.hpp"

namespace odhn {

// 8-bit RGB image, row-major, 3 bytes per pixel.
struct ImageRGB {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::vector<std::uint8_t> pixels;

    ImageRGB() = default;
    ImageRGB(std::int64_t w, std::int64_t h, std::uint8_t r = 0, std::uint8_t g = 0, std::uint8_t b = 0)
        : width(w), height(h), pixels(static_cast<std::size_t>(w * h * 3)) {
        for (std::size_t i = 0; i + 2 < pixels.size() + 1; i += 3) {
            pixels[i] = r;
            pixels[i + 1] = g;
            pixels[i + 2] = b;
        }
    }

    std::uint8_t* at(std::int64_t x, std::int64_t y) { return pixels.data() + (y * width + x) * 3; }
    const std::uint8_t* at(std::int64_t x, std::int64_t y) const {
        return pixels.data() + (y * width + x) * 3;
    }

    ImageRGB crop(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h) const;
    void paste(const ImageRGB& src, std::int64_t x, std::int64_t y);
};

// Hue/saturation/value of one RGB pixel, s and v in [0,1].
void rgb_to_sv(std::uint8_t r, std::uint8_t g, std::uint8_t b, double& s, double& v);

// Minimal PNG container over zlib: 8-bit RGB (color type 2), non-interlaced.
std::vector<std::uint8_t> encode_png(const ImageRGB& img);
ImageRGB decode_png(const std::uint8_t* data, std::size_t size);

void write_png(const std::filesystem::path& path, const ImageRGB& img);
ImageRGB read_png(const std::filesystem::path& path);

// write-temp-then-rename file replacement
void atomic_write_file(const std::filesystem::path& path, const void* data, std::size_t size);
void atomic_write_file(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);

}  // namespace odhn
