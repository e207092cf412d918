#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "odhn/checkpoint.hpp"
#include "odhn/corpus.hpp"
#include "odhn/optim.hpp"
#include "odhn/patchnet.hpp"
#include "odhn/slide_bundle.hpp"

namespace odhn {

struct AggrConfig {
    int feature_dim = 64;  // D, must match the patch encoder output
    int hidden = 128;      // H
    int layers = 4;        // L
    int heads = 4;
    int mlp_ratio = 4;
    int max_grid = 20;  // positional tables cover row/col in [0, max_grid)
    double mask_ratio = 0.5;
};

// One region's transformer input: patch features with 2-D grid positions.
// Feature rows at ignored (padded) positions are zero and attention-masked.
struct RegionTokens {
    Tensor features;  // [P, D]
    std::vector<std::int64_t> rows, cols;
    std::vector<bool> ignore;

    std::int64_t count() const { return features.defined() ? features.dim(0) : 0; }
    std::int64_t visible_count() const;
    void validate(int max_grid) const;  // unique positions where not ignored
};

struct AttentionMapData {
    std::int64_t origin_x = 0, origin_y = 0, side = 0;
    std::vector<double> weights;  // P nonnegative values summing to 1, 0 at ignored
};

struct RegionEmbedding {
    Tensor class_vector;  // [1, H]
    AttentionMapData attention;
};

// Transformer over a region's patch features with a class token, learned 2-D
// positional embeddings, key masking for padded positions, and three heads:
// feature reconstruction, score regression, risk classification.
class RegionAggregator {
public:
    RegionAggregator(AggrConfig cfg, Rng& rng);

    const AggrConfig& config() const { return cfg_; }

    // masked lists token indices replaced by the learned mask token.
    // Returns the final [P+1, H] states; attention_out receives the
    // class-token attention of the last layer, head-averaged and normalized
    // over non-ignored patches.
    Tensor encode(const RegionTokens& tokens, const std::vector<std::int64_t>& masked,
                  std::vector<double>* attention_out) const;

    Tensor class_vector(const Tensor& states) const { return slice_rows(states, 0, 1); }

    Tensor reconstruct(const Tensor& states, const std::vector<std::int64_t>& masked) const;
    // score = scale * (e . w) + b; the non-trainable scale is set to the
    // label spread when the regression phase starts, conditioning the head
    // against the wide oncotype range
    Tensor score_head(const Tensor& slide_embedding) const;   // [1,1] raw score
    Tensor logit_head(const Tensor& slide_embedding) const;   // [1,1] classification logit
    void set_score_affine(double bias, double scale);
    std::vector<Tensor> regression_head_params() const;
    std::vector<Tensor> classifier_head_params() const;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;  // "aggrformer." prefix
    std::vector<Tensor> parameters() const;

private:
    AggrConfig cfg_;
    Tensor proj_w_, proj_b_;
    Tensor cls_, mask_token_;
    Tensor pos_row_, pos_col_;
    struct Layer {
        Tensor ln1_g, ln1_b, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
        Tensor ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::vector<Layer> layers_;
    Tensor lnf_g_, lnf_b_;
    Tensor recon_w_, recon_b_;
    Tensor score_w_, score_b_, score_scale_;
    Tensor clsf_w_, clsf_b_;
};

// ---- slide-level data and the combined image model ----

struct RegionSample {
    std::int64_t origin_x = 0, origin_y = 0, side = 0;
    std::int64_t cells_per_side = 0;
    std::vector<ImageRGB> patch_pixels;  // row-major, empty at padded slots
    std::vector<bool> ignore;
};

struct SlideSample {
    std::string slide_id;
    std::string patient_id;
    std::vector<RegionSample> regions;
    std::optional<double> score;
    std::optional<RiskCategory> label;
};

struct ImageModel {
    PatchNetConfig encoder_config;
    AggrConfig aggregator_config;
    PatchEncoder encoder;
    RegionAggregator aggregator;
    std::string phase = "init";

    ImageModel(PatchNetConfig pc, AggrConfig ac, std::uint64_t seed);
};

// Patch features for one region: encoder forward over present patches,
// zero rows scattered into padded slots. detach_features drops the graph
// (frozen-encoder paths).
RegionTokens region_tokens(const ImageModel& model, const RegionSample& region, bool detach_features);

RegionEmbedding embed_region(const ImageModel& model, const RegionSample& region);
// Mean of the regions' class vectors, inside the training graph.
Tensor embed_slide_t(const ImageModel& model, const SlideSample& slide, bool detach_features);
// Inference-path slide embedding: arithmetic mean with per-coordinate sorted
// accumulation, so region order cannot change the result.
std::vector<double> embed_slide(const ImageModel& model, const SlideSample& slide);

// round(mask_ratio * visible positions), clamped into [1, visible]
std::int64_t masked_count(double mask_ratio, std::int64_t visible);
// BCE class weighting under imbalance: N_low / N_high
double classifier_pos_weight(std::size_t n_low, std::size_t n_high);

struct SlidePrediction {
    double probability_high = 0.0;
    double score_estimate = 0.0;  // clamped to [0,100]
    std::vector<AttentionMapData> attentions;
};
SlidePrediction predict_slide(const ImageModel& model, const SlideSample& slide);

struct TrainOptions {
    std::int64_t steps = 500;
    std::int64_t batch = 8;  // regions (pretrain) or slides (fine-tune)
    double lr = 1e-3;
    std::uint64_t seed = 0;
    bool freeze_encoder = false;
    // fine-tune phases first fit the head alone on cached embeddings, then
    // train jointly; keeps early backbone gradients from erasing the signal
    std::int64_t head_warmup_steps = 300;
    double head_warmup_lr = 5e-2;
    std::int64_t eval_every = 0;  // fine-tune phases call eval_hook(step); true stops
    std::function<bool(std::int64_t)> eval_hook;
};

// Masked-feature pretraining: per step, round(mask_ratio * visible) positions
// per region are replaced by the mask token; MSE between the reconstruction
// head and the frozen true features at masked positions only. The encoder is
// frozen in this phase; features are precomputed once.
std::vector<double> pretrain_masked(ImageModel& model, const std::vector<SlideSample>& slides,
                                    const TrainOptions& opt);

// Phase 1: linear head regresses the slide score (MSE on raw scores).
std::vector<double> finetune_regression(ImageModel& model, const std::vector<SlideSample>& slides,
                                        const TrainOptions& opt);

// Phase 2: sigmoid head with class weight N_low/N_high, from the regression
// checkpoint per the two-phase recipe.
std::vector<double> finetune_classifier(ImageModel& model, const std::vector<SlideSample>& slides,
                                        const TrainOptions& opt);

Checkpoint image_model_checkpoint(const ImageModel& model, const nlohmann::json& config_echo);
ImageModel image_model_from_checkpoint(const Checkpoint& cp);

}  // namespace odhn
