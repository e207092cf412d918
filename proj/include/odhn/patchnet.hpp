#pragma once

#include <string>
#include <vector>

#include "odhn/image.hpp"
#include "odhn/rng.hpp"
#include "odhn/tensor.hpp"

namespace odhn {

struct PatchNetConfig {
    int patch_side = 224;
    int feature_dim = 64;  // 512 mirrors the full-fidelity encoder width
    int stem_channels = 16;
    int stages = 4;  // channels double per stage, stride 2 between stages
    int blocks_per_stage = 2;
    int stem_stride = 2;  // 1 for small desk-scale patches
    bool stem_pool = true;
};

// conv-relu-conv residual block; the second conv starts at zero so the block
// is the identity at init (and exactly the identity on nonnegative inputs
// when all weights are zero).
struct ResidualBlock {
    Tensor conv1_w, conv1_b;
    Tensor conv2_w, conv2_b;
    Tensor skip_w, skip_b;  // 1x1 projection, defined only when needed
    int stride = 1;
    bool has_skip_proj = false;

    ResidualBlock() = default;
    ResidualBlock(int in_ch, int out_ch, int stride, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor>>& out) const;
};

// Patch pixels -> D-dim feature: stem conv, residual stages, global average
// pool, linear projection.
class PatchEncoder {
public:
    PatchEncoder(PatchNetConfig cfg, Rng& rng);

    const PatchNetConfig& config() const { return cfg_; }

    // [N,3,S,S] standardized pixels -> [N,D]
    Tensor forward(const Tensor& pixels) const;

    // pixel bytes -> [N,3,S,S], scaled to [0,1] and standardized with fixed
    // per-channel constants
    Tensor to_input(const std::vector<const ImageRGB*>& patches) const;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;  // "patchnet." prefix
    std::vector<Tensor> parameters() const;

    // order-preserving map of forward over the list; empty in, empty out
    std::vector<std::vector<double>> encode_batch(const std::vector<ImageRGB>& patches) const;

private:
    PatchNetConfig cfg_;
    Tensor stem_w_, stem_b_;
    std::vector<std::vector<ResidualBlock>> stages_;
    Tensor head_w_, head_b_;
};

}  // namespace odhn
