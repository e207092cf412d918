#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "odhn/image.hpp"
#include "odhn/rng.hpp"

namespace odhn {

// Axis-aligned square window into a slide, level-0 pixel coordinates.
struct Region {
    std::int64_t x = 0;
    std::int64_t y = 0;
    std::int64_t side = 4480;
    double tissue_fraction = 0.0;
};

struct PatchGrid {
    Region region;
    std::int64_t patch_side = 224;
    std::int64_t cells_per_side = 0;
    // row-major: patches[row * cells_per_side + col]
    std::vector<ImageRGB> patches;
};

// HSV thresholds separating stained tissue from background.
struct TissueParams {
    double min_saturation = 0.08;
    double max_value = 0.95;
};

// Tiled slide directory: manifest.json + tiles/{row}_{col}.png. Immutable
// after creation; tile reads are cached and safe to share across threads.
class SlideBundle {
public:
    static SlideBundle open(const std::filesystem::path& dir);
    static SlideBundle create(const std::filesystem::path& dir, const std::string& slide_id,
                              const ImageRGB& full, std::int64_t tile_size = 448,
                              double microns_per_pixel = 0.25);

    const std::string& slide_id() const { return slide_id_; }
    std::int64_t width() const { return width_; }
    std::int64_t height() const { return height_; }
    std::int64_t tile_size() const { return tile_size_; }
    double microns_per_pixel() const { return microns_per_pixel_; }
    const std::filesystem::path& dir() const { return dir_; }

    ImageRGB read_region(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h) const;
    ImageRGB read_full() const { return read_region(0, 0, width_, height_); }

private:
    std::string slide_id_;
    std::int64_t width_ = 0;
    std::int64_t height_ = 0;
    std::int64_t tile_size_ = 448;
    double microns_per_pixel_ = 0.25;
    std::filesystem::path dir_;

    const ImageRGB& tile(std::int64_t row, std::int64_t col) const;
    struct TileCache {
        std::map<std::pair<std::int64_t, std::int64_t>, ImageRGB> tiles;
        std::mutex mutex;
    };
    std::shared_ptr<TileCache> cache_ = std::make_shared<TileCache>();
};

// Fraction of pixels with saturation >= min_saturation and value <= max_value.
double tissue_fraction(const ImageRGB& pixels, const TissueParams& params = {});

// n regions with tissue fraction >= min_tissue, origins on a side/2 lattice.
// Without replacement when enough candidates qualify, otherwise with.
std::vector<Region> sample_regions(const SlideBundle& bundle, std::size_t n, std::int64_t side,
                                   std::uint64_t seed, double min_tissue = 0.25,
                                   const TissueParams& params = {});

PatchGrid patch_grid(const SlideBundle& bundle, const Region& region, std::int64_t patch_side = 224);

// Patch-only external datasets: loose patches with level-0 coordinates.
struct PatchRecord {
    std::filesystem::path path;
    std::int64_t x = 0;
    std::int64_t y = 0;
};

struct ReconstructedRegion {
    Region region;                       // origin snapped to the region grid
    std::int64_t patch_side = 224;
    std::int64_t cells_per_side = 0;
    std::vector<std::filesystem::path> patch_paths;  // row-major, empty path where padded
    std::vector<bool> padded;                        // row-major ignore flags
};

// Assigns each patch to the region-grid cell floor(x/region_side),
// floor(y/region_side); cells are emitted in (cell_y, cell_x) order.
std::vector<ReconstructedRegion> cluster_patches(const std::vector<PatchRecord>& records,
                                                 std::int64_t region_side = 4480,
                                                 std::int64_t patch_side = 224);

}  // namespace odhn
