#include "odhn/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace odhn {

namespace fs = std::filesystem;

ImageRGB ImageRGB::crop(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h) const {
    if (x < 0 || y < 0 || w <= 0 || h <= 0 || x + w > width || y + h > height)
        throw DomainError("crop: rectangle out of image bounds");
    ImageRGB out;
    out.width = w;
    out.height = h;
    out.pixels.resize(static_cast<std::size_t>(w * h * 3));
    for (std::int64_t row = 0; row < h; ++row)
        std::memcpy(out.pixels.data() + row * w * 3, at(x, y + row), static_cast<std::size_t>(w * 3));
    return out;
}

void ImageRGB::paste(const ImageRGB& src, std::int64_t x, std::int64_t y) {
    if (x < 0 || y < 0 || x + src.width > width || y + src.height > height)
        throw DomainError("paste: rectangle out of image bounds");
    for (std::int64_t row = 0; row < src.height; ++row)
        std::memcpy(at(x, y + row), src.pixels.data() + row * src.width * 3,
                    static_cast<std::size_t>(src.width * 3));
}

void rgb_to_sv(std::uint8_t r, std::uint8_t g, std::uint8_t b, double& s, double& v) {
    const double rf = r / 255.0, gf = g / 255.0, bf = b / 255.0;
    const double mx = std::max({rf, gf, bf});
    const double mn = std::min({rf, gf, bf});
    v = mx;
    s = mx > 0.0 ? (mx - mn) / mx : 0.0;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::uint8_t* data,
               std::size_t len) {
    put_u32(out, static_cast<std::uint32_t>(len));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    if (len) out.insert(out.end(), data, data + len);
    std::uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, out.data() + start, static_cast<uInt>(4 + len));
    put_u32(out, crc);
}

constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
    if (pb <= pc) return static_cast<std::uint8_t>(b);
    return static_cast<std::uint8_t>(c);
}

}  // namespace

std::vector<std::uint8_t> encode_png(const ImageRGB& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.pixels.size() != static_cast<std::size_t>(img.width * img.height * 3))
        throw DomainError("encode_png: inconsistent image buffer");

    // scanlines with filter byte 0
    const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
    std::vector<std::uint8_t> raw((stride + 1) * static_cast<std::size_t>(img.height));
    for (std::int64_t y = 0; y < img.height; ++y) {
        raw[(stride + 1) * static_cast<std::size_t>(y)] = 0;
        std::memcpy(raw.data() + (stride + 1) * static_cast<std::size_t>(y) + 1,
                    img.pixels.data() + stride * static_cast<std::size_t>(y), stride);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("encode_png: deflate failed");
    compressed.resize(bound);

    std::vector<std::uint8_t> out(kPngSig, kPngSig + 8);
    std::uint8_t ihdr[13];
    ihdr[0] = static_cast<std::uint8_t>(img.width >> 24);
    ihdr[1] = static_cast<std::uint8_t>(img.width >> 16);
    ihdr[2] = static_cast<std::uint8_t>(img.width >> 8);
    ihdr[3] = static_cast<std::uint8_t>(img.width);
    ihdr[4] = static_cast<std::uint8_t>(img.height >> 24);
    ihdr[5] = static_cast<std::uint8_t>(img.height >> 16);
    ihdr[6] = static_cast<std::uint8_t>(img.height >> 8);
    ihdr[7] = static_cast<std::uint8_t>(img.height);
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // color type RGB
    ihdr[10] = 0;  // compression
    ihdr[11] = 0;  // filter
    ihdr[12] = 0;  // interlace
    put_chunk(out, "IHDR", ihdr, 13);
    put_chunk(out, "IDAT", compressed.data(), compressed.size());
    put_chunk(out, "IEND", nullptr, 0);
    return out;
}

ImageRGB decode_png(const std::uint8_t* data, std::size_t size) {
    if (size < 8 || std::memcmp(data, kPngSig, 8) != 0) throw ParseError("decode_png: bad signature");
    std::size_t pos = 8;
    std::int64_t width = 0, height = 0;
    bool have_ihdr = false;
    std::vector<std::uint8_t> idat;
    while (pos + 12 <= size) {
        const std::uint32_t len = get_u32(data + pos);
        if (pos + 12 + len > size) throw ParseError("decode_png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(data + pos + 4);
        const std::uint8_t* body = data + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw ParseError("decode_png: bad IHDR");
            width = get_u32(body);
            height = get_u32(body + 4);
            if (body[8] != 8 || body[9] != 2 || body[12] != 0)
                throw ParseError("decode_png: only 8-bit non-interlaced RGB supported");
            have_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), body, body + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (!have_ihdr || width <= 0 || height <= 0) throw ParseError("decode_png: missing IHDR");

    const std::size_t stride = static_cast<std::size_t>(width) * 3;
    std::vector<std::uint8_t> raw((stride + 1) * static_cast<std::size_t>(height));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw ParseError("decode_png: inflate failed");

    ImageRGB img;
    img.width = width;
    img.height = height;
    img.pixels.resize(stride * static_cast<std::size_t>(height));
    for (std::int64_t y = 0; y < height; ++y) {
        const std::uint8_t filter = raw[(stride + 1) * static_cast<std::size_t>(y)];
        const std::uint8_t* in = raw.data() + (stride + 1) * static_cast<std::size_t>(y) + 1;
        std::uint8_t* cur = img.pixels.data() + stride * static_cast<std::size_t>(y);
        const std::uint8_t* up = y > 0 ? cur - stride : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= 3 ? cur[i - 3] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= 3) ? up[i - 3] : 0;
            int v = in[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw ParseError("decode_png: unknown filter type");
            }
            cur[i] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
    return img;
}

void write_png(const fs::path& path, const ImageRGB& img) {
    const auto bytes = encode_png(img);
    atomic_write_file(path, bytes.data(), bytes.size());
}

ImageRGB read_png(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    return decode_png(bytes.data(), bytes.size());
}

void atomic_write_file(const fs::path& path, const void* data, std::size_t size) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
        f.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!f) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

void atomic_write_file(const fs::path& path, const std::string& text) {
    atomic_write_file(path, text.data(), text.size());
}

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    f.seekg(0, std::ios::end);
    const auto size = f.tellg();
    f.seekg(0);
    std::vector<std::uint8_t> out(static_cast<std::size_t>(size));
    f.read(reinterpret_cast<char*>(out.data()), size);
    if (!f) throw IoError("short read from " + path.string());
    return out;
}

std::string read_file_text(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

}  // namespace odhn
