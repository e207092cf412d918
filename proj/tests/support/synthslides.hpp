#pragma once

// Tiny in-memory slide samples for model tests: pink tissue patches whose
// darkness tracks a planted score.

#include <vector>

#include "odhn/aggrformer.hpp"
#include "odhn/rng.hpp"

namespace odhn::testsupport {

inline ImageRGB blob_patch(std::int64_t side, int blob_count, Rng& rng) {
    ImageRGB img(side, side, 235, 205, 215);
    for (int b = 0; b < blob_count; ++b) {
        const std::int64_t cx = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(side - 2)));
        const std::int64_t cy = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(side - 2)));
        for (std::int64_t y = cy - 1; y <= cy + 1; ++y)
            for (std::int64_t x = cx - 1; x <= cx + 1; ++x) {
                if (x < 0 || y < 0 || x >= side || y >= side) continue;
                auto* p = img.at(x, y);
                p[0] = 90;
                p[1] = 60;
                p[2] = 140;
            }
    }
    return img;
}

inline RegionSample blob_region(std::int64_t patch_side, std::int64_t cells, double score, Rng& rng) {
    RegionSample region;
    region.side = patch_side * cells;
    region.cells_per_side = cells;
    for (std::int64_t i = 0; i < cells * cells; ++i) {
        const int blobs = static_cast<int>(rng.poisson(1.0 + 0.15 * score));
        region.patch_pixels.push_back(blob_patch(patch_side, blobs, rng));
        region.ignore.push_back(false);
    }
    return region;
}

inline SlideSample blob_slide(const std::string& id, double score, int regions, std::int64_t patch_side,
                              std::int64_t cells, Rng& rng) {
    SlideSample s;
    s.slide_id = id;
    s.patient_id = id;
    s.score = score;
    s.label = score >= 26.0 ? RiskCategory::High : RiskCategory::Low;
    for (int r = 0; r < regions; ++r) s.regions.push_back(blob_region(patch_side, cells, score, rng));
    return s;
}

inline PatchNetConfig tiny_encoder_config() {
    PatchNetConfig pc;
    pc.patch_side = 8;
    pc.feature_dim = 8;
    pc.stem_channels = 4;
    pc.stages = 1;
    pc.blocks_per_stage = 1;
    pc.stem_stride = 1;
    pc.stem_pool = false;
    return pc;
}

inline AggrConfig tiny_aggr_config() {
    AggrConfig ac;
    ac.feature_dim = 8;
    ac.hidden = 16;
    ac.layers = 2;
    ac.heads = 2;
    ac.mlp_ratio = 2;
    ac.max_grid = 4;
    return ac;
}

}  // namespace odhn::testsupport
