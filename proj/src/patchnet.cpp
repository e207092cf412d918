#include "odhn/patchnet.hpp"

#include <cmath>

namespace odhn {

namespace {

// fan-in scaled init for conv weights [F,C,kh,kw]
Tensor conv_init(Shape shape, Rng& rng) {
    const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
    return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / fan_in), true);
}

constexpr double kPixelMean = 0.5;
constexpr double kPixelStd = 0.5;

}  // namespace

ResidualBlock::ResidualBlock(int in_ch, int out_ch, int stride_, Rng& rng) : stride(stride_) {
    conv1_w = conv_init({out_ch, in_ch, 3, 3}, rng);
    conv1_b = Tensor::zeros({out_ch}, true);
    conv2_w = Tensor::zeros({out_ch, out_ch, 3, 3}, true);  // zero start: block == identity
    conv2_b = Tensor::zeros({out_ch}, true);
    has_skip_proj = stride != 1 || in_ch != out_ch;
    if (has_skip_proj) {
        skip_w = conv_init({out_ch, in_ch, 1, 1}, rng);
        skip_b = Tensor::zeros({out_ch}, true);
    }
}

Tensor ResidualBlock::forward(const Tensor& x) const {
    Tensor h = relu(conv2d(x, conv1_w, conv1_b, stride, 1));
    h = conv2d(h, conv2_w, conv2_b, 1, 1);
    const Tensor skip = has_skip_proj ? conv2d(x, skip_w, skip_b, stride, 0) : x;
    return relu(add(skip, h));
}

void ResidualBlock::collect(const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".conv1.w", conv1_w);
    out.emplace_back(prefix + ".conv1.b", conv1_b);
    out.emplace_back(prefix + ".conv2.w", conv2_w);
    out.emplace_back(prefix + ".conv2.b", conv2_b);
    if (has_skip_proj) {
        out.emplace_back(prefix + ".skip.w", skip_w);
        out.emplace_back(prefix + ".skip.b", skip_b);
    }
}

PatchEncoder::PatchEncoder(PatchNetConfig cfg, Rng& rng) : cfg_(cfg) {
    if (cfg_.stages < 1 || cfg_.blocks_per_stage < 1 || cfg_.stem_channels < 1 || cfg_.feature_dim < 1)
        throw ConfigError("patchnet: nonpositive architecture parameter");
    stem_w_ = conv_init({cfg_.stem_channels, 3, 3, 3}, rng);
    stem_b_ = Tensor::zeros({cfg_.stem_channels}, true);
    int ch = cfg_.stem_channels;
    for (int s = 0; s < cfg_.stages; ++s) {
        const int out_ch = s == 0 ? ch : ch * 2;
        std::vector<ResidualBlock> blocks;
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            const bool down = s > 0 && b == 0;
            blocks.emplace_back(b == 0 ? ch : out_ch, out_ch, down ? 2 : 1, rng);
        }
        stages_.push_back(std::move(blocks));
        ch = out_ch;
    }
    const double fan_in = static_cast<double>(ch);
    head_w_ = Tensor::randn({ch, cfg_.feature_dim}, rng, std::sqrt(1.0 / fan_in), true);
    head_b_ = Tensor::zeros({cfg_.feature_dim}, true);
}

Tensor PatchEncoder::forward(const Tensor& pixels) const {
    if (pixels.rank() != 4 || pixels.dim(1) != 3 || pixels.dim(2) != cfg_.patch_side ||
        pixels.dim(3) != cfg_.patch_side)
        throw ShapeError("patchnet: expected [N,3," + std::to_string(cfg_.patch_side) + "," +
                         std::to_string(cfg_.patch_side) + "], got " + shape_str(pixels.shape()));
    Tensor h = relu(conv2d(pixels, stem_w_, stem_b_, cfg_.stem_stride, 1));
    if (cfg_.stem_pool) h = maxpool2d(h, 2);
    for (const auto& stage : stages_)
        for (const auto& block : stage) h = block.forward(h);
    return add_rowvec(matmul(global_avg_pool(h), head_w_), head_b_);
}

Tensor PatchEncoder::to_input(const std::vector<const ImageRGB*>& patches) const {
    if (patches.empty()) throw ShapeError("patchnet: empty batch");
    const std::int64_t s = cfg_.patch_side;
    Tensor x = Tensor::zeros({static_cast<std::int64_t>(patches.size()), 3, s, s});
    double* out = x.data();
    for (std::size_t n = 0; n < patches.size(); ++n) {
        const ImageRGB& img = *patches[n];
        if (img.width != s || img.height != s)
            throw ShapeError("patchnet: patch " + std::to_string(n) + " is " + std::to_string(img.width) +
                             "x" + std::to_string(img.height) + ", expected " + std::to_string(s) + "x" +
                             std::to_string(s));
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t y = 0; y < s; ++y)
                for (std::int64_t xx = 0; xx < s; ++xx)
                    out[((static_cast<std::int64_t>(n) * 3 + c) * s + y) * s + xx] =
                        (img.pixels[(y * s + xx) * 3 + c] / 255.0 - kPixelMean) / kPixelStd;
    }
    return x;
}

std::vector<std::pair<std::string, Tensor>> PatchEncoder::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patchnet.stem.w", stem_w_);
    out.emplace_back("patchnet.stem.b", stem_b_);
    for (std::size_t s = 0; s < stages_.size(); ++s)
        for (std::size_t b = 0; b < stages_[s].size(); ++b)
            stages_[s][b].collect("patchnet.s" + std::to_string(s) + ".b" + std::to_string(b), out);
    out.emplace_back("patchnet.head.w", head_w_);
    out.emplace_back("patchnet.head.b", head_b_);
    return out;
}

std::vector<Tensor> PatchEncoder::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

std::vector<std::vector<double>> PatchEncoder::encode_batch(const std::vector<ImageRGB>& patches) const {
    std::vector<std::vector<double>> out;
    if (patches.empty()) return out;
    std::vector<const ImageRGB*> ptrs;
    ptrs.reserve(patches.size());
    for (const auto& p : patches) ptrs.push_back(&p);
    const Tensor feats = forward(to_input(ptrs));
    out.reserve(patches.size());
    for (std::int64_t n = 0; n < feats.dim(0); ++n)
        out.emplace_back(feats.data() + n * cfg_.feature_dim,
                         feats.data() + (n + 1) * cfg_.feature_dim);
    return out;
}

}  // namespace odhn
