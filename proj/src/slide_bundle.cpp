#include "odhn/slide_bundle.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace odhn {

namespace fs = std::filesystem;
using nlohmann::json;

SlideBundle SlideBundle::open(const fs::path& dir) {
    const fs::path manifest = dir / "manifest.json";
    if (!fs::exists(manifest)) throw IoError("slide bundle manifest missing: " + manifest.string());
    json j = json::parse(read_file_text(manifest));
    SlideBundle b;
    b.dir_ = dir;
    b.slide_id_ = j.at("slide_id").get<std::string>();
    b.width_ = j.at("width").get<std::int64_t>();
    b.height_ = j.at("height").get<std::int64_t>();
    b.tile_size_ = j.at("tile_size").get<std::int64_t>();
    b.microns_per_pixel_ = j.at("microns_per_pixel").get<double>();
    if (b.width_ <= 0 || b.height_ <= 0 || b.tile_size_ <= 0 || b.microns_per_pixel_ <= 0.0)
        throw IntegrityError("slide bundle " + b.slide_id_ + ": nonpositive geometry");
    const std::int64_t rows = (b.height_ + b.tile_size_ - 1) / b.tile_size_;
    const std::int64_t cols = (b.width_ + b.tile_size_ - 1) / b.tile_size_;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c) {
            const fs::path t = dir / "tiles" / (std::to_string(r) + "_" + std::to_string(c) + ".png");
            if (!fs::exists(t))
                throw IntegrityError("slide bundle " + b.slide_id_ + ": missing tile " + t.string());
        }
    return b;
}

SlideBundle SlideBundle::create(const fs::path& dir, const std::string& slide_id, const ImageRGB& full,
                                std::int64_t tile_size, double microns_per_pixel) {
    if (tile_size <= 0) throw DomainError("SlideBundle::create: tile_size must be positive");
    fs::create_directories(dir / "tiles");
    const std::int64_t rows = (full.height + tile_size - 1) / tile_size;
    const std::int64_t cols = (full.width + tile_size - 1) / tile_size;
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < cols; ++c) {
            const std::int64_t w = std::min(tile_size, full.width - c * tile_size);
            const std::int64_t h = std::min(tile_size, full.height - r * tile_size);
            write_png(dir / "tiles" / (std::to_string(r) + "_" + std::to_string(c) + ".png"),
                      full.crop(c * tile_size, r * tile_size, w, h));
        }
    }
    json j;
    j["slide_id"] = slide_id;
    j["width"] = full.width;
    j["height"] = full.height;
    j["tile_size"] = tile_size;
    j["microns_per_pixel"] = microns_per_pixel;
    atomic_write_file(dir / "manifest.json", j.dump(2) + "\n");
    return open(dir);
}

const ImageRGB& SlideBundle::tile(std::int64_t row, std::int64_t col) const {
    std::lock_guard<std::mutex> lock(cache_->mutex);
    auto it = cache_->tiles.find({row, col});
    if (it != cache_->tiles.end()) return it->second;
    const fs::path t = dir_ / "tiles" / (std::to_string(row) + "_" + std::to_string(col) + ".png");
    ImageRGB img = read_png(t);
    return cache_->tiles.emplace(std::make_pair(row, col), std::move(img)).first->second;
}

ImageRGB SlideBundle::read_region(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h) const {
    if (x < 0 || y < 0 || w <= 0 || h <= 0 || x + w > width_ || y + h > height_)
        throw DomainError("read_region: window out of slide bounds");
    ImageRGB out(w, h);
    const std::int64_t r0 = y / tile_size_, r1 = (y + h - 1) / tile_size_;
    const std::int64_t c0 = x / tile_size_, c1 = (x + w - 1) / tile_size_;
    for (std::int64_t r = r0; r <= r1; ++r) {
        for (std::int64_t c = c0; c <= c1; ++c) {
            const ImageRGB& t = tile(r, c);
            const std::int64_t tx = c * tile_size_, ty = r * tile_size_;
            const std::int64_t sx = std::max(x, tx), sy = std::max(y, ty);
            const std::int64_t ex = std::min(x + w, tx + t.width), ey = std::min(y + h, ty + t.height);
            for (std::int64_t yy = sy; yy < ey; ++yy)
                std::copy_n(t.at(sx - tx, yy - ty), (ex - sx) * 3, out.at(sx - x, yy - y));
        }
    }
    return out;
}

double tissue_fraction(const ImageRGB& img, const TissueParams& params) {
    if (img.pixels.empty()) throw DomainError("tissue_fraction: empty pixel buffer");
    std::int64_t hits = 0;
    const std::int64_t n = img.width * img.height;
    for (std::int64_t i = 0; i < n; ++i) {
        double s, v;
        rgb_to_sv(img.pixels[i * 3], img.pixels[i * 3 + 1], img.pixels[i * 3 + 2], s, v);
        if (s >= params.min_saturation && v <= params.max_value) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

std::vector<Region> sample_regions(const SlideBundle& bundle, std::size_t n, std::int64_t side,
                                   std::uint64_t seed, double min_tissue, const TissueParams& params) {
    if (side <= 0 || side > bundle.width() || side > bundle.height())
        throw DomainError("sample_regions: slide " + bundle.slide_id() + " smaller than region side " +
                          std::to_string(side));
    const std::int64_t stride = std::max<std::int64_t>(1, side / 2);
    std::vector<Region> candidates;
    for (std::int64_t y = 0; y + side <= bundle.height(); y += stride) {
        for (std::int64_t x = 0; x + side <= bundle.width(); x += stride) {
            const double frac = tissue_fraction(bundle.read_region(x, y, side, side), params);
            if (frac >= min_tissue) candidates.push_back({x, y, side, frac});
        }
    }
    if (candidates.empty())
        throw DomainError("sample_regions: no tissue in slide " + bundle.slide_id());

    Rng rng(seed);
    std::vector<Region> out;
    out.reserve(n);
    if (candidates.size() >= n) {
        for (std::size_t idx : rng.sample_without_replacement(candidates.size(), n))
            out.push_back(candidates[idx]);
    } else {
        for (std::size_t i = 0; i < n; ++i)
            out.push_back(candidates[rng.below(candidates.size())]);
    }
    return out;
}

PatchGrid patch_grid(const SlideBundle& bundle, const Region& region, std::int64_t patch_side) {
    if (patch_side <= 0 || region.side % patch_side != 0)
        throw DomainError("patch_grid: region side " + std::to_string(region.side) +
                          " not divisible by patch side " + std::to_string(patch_side));
    PatchGrid grid;
    grid.region = region;
    grid.patch_side = patch_side;
    grid.cells_per_side = region.side / patch_side;
    const ImageRGB pixels = bundle.read_region(region.x, region.y, region.side, region.side);
    grid.patches.reserve(static_cast<std::size_t>(grid.cells_per_side * grid.cells_per_side));
    for (std::int64_t row = 0; row < grid.cells_per_side; ++row)
        for (std::int64_t col = 0; col < grid.cells_per_side; ++col)
            grid.patches.push_back(pixels.crop(col * patch_side, row * patch_side, patch_side, patch_side));
    return grid;
}

std::vector<ReconstructedRegion> cluster_patches(const std::vector<PatchRecord>& records,
                                                 std::int64_t region_side, std::int64_t patch_side) {
    if (region_side <= 0 || patch_side <= 0 || region_side % patch_side != 0)
        throw DomainError("cluster_patches: region side must be a positive multiple of patch side");
    const std::int64_t cells = region_side / patch_side;

    // (cell_y, cell_x) -> row-major slot -> patch path
    std::map<std::pair<std::int64_t, std::int64_t>, std::vector<fs::path>> grid_cells;
    for (const auto& rec : records) {
        if (rec.x < 0 || rec.y < 0)
            throw DomainError("cluster_patches: negative coordinate for " + rec.path.string());
        const std::int64_t cx = rec.x / region_side;
        const std::int64_t cy = rec.y / region_side;
        const std::int64_t row = (rec.y - cy * region_side) / patch_side;
        const std::int64_t col = (rec.x - cx * region_side) / patch_side;
        auto& slots = grid_cells[{cy, cx}];
        if (slots.empty()) slots.resize(static_cast<std::size_t>(cells * cells));
        auto& slot = slots[static_cast<std::size_t>(row * cells + col)];
        if (!slot.empty())
            throw IntegrityError("cluster_patches: two patches map to the same grid position (" +
                                 std::to_string(rec.x) + "," + std::to_string(rec.y) + ")");
        slot = rec.path;
    }

    std::vector<ReconstructedRegion> out;
    out.reserve(grid_cells.size());
    for (auto& [cell, slots] : grid_cells) {
        ReconstructedRegion rr;
        rr.region.x = cell.second * region_side;
        rr.region.y = cell.first * region_side;
        rr.region.side = region_side;
        rr.patch_side = patch_side;
        rr.cells_per_side = cells;
        rr.patch_paths = std::move(slots);
        rr.padded.resize(rr.patch_paths.size());
        std::size_t present = 0;
        for (std::size_t i = 0; i < rr.patch_paths.size(); ++i) {
            rr.padded[i] = rr.patch_paths[i].empty();
            if (!rr.padded[i]) ++present;
        }
        rr.region.tissue_fraction =
            static_cast<double>(present) / static_cast<double>(rr.patch_paths.size());
        out.push_back(std::move(rr));
    }
    return out;
}

}  // namespace odhn
