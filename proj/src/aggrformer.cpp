#include "odhn/aggrformer.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace odhn {

namespace {
constexpr double kMaskLogit = -1e9;
}

std::int64_t RegionTokens::visible_count() const {
    std::int64_t n = 0;
    for (bool b : ignore) n += !b;
    return n;
}

void RegionTokens::validate(int max_grid) const {
    const std::int64_t p = count();
    if (p == 0) throw ShapeError("region tokens: empty feature matrix");
    if (static_cast<std::int64_t>(rows.size()) != p || static_cast<std::int64_t>(cols.size()) != p ||
        static_cast<std::int64_t>(ignore.size()) != p)
        throw ShapeError("region tokens: misaligned position/ignore lists");
    std::set<std::pair<std::int64_t, std::int64_t>> seen;
    for (std::int64_t i = 0; i < p; ++i) {
        if (ignore[static_cast<std::size_t>(i)]) continue;
        if (rows[i] < 0 || rows[i] >= max_grid || cols[i] < 0 || cols[i] >= max_grid)
            throw DomainError("region tokens: position (" + std::to_string(rows[i]) + "," +
                              std::to_string(cols[i]) + ") outside the " + std::to_string(max_grid) +
                              "-cell positional table");
        if (!seen.insert({rows[i], cols[i]}).second)
            throw IntegrityError("region tokens: duplicate position (" + std::to_string(rows[i]) + "," +
                                 std::to_string(cols[i]) + ")");
    }
    if (visible_count() == 0) throw DomainError("empty region: all positions ignored");
}

RegionAggregator::RegionAggregator(AggrConfig cfg, Rng& rng) : cfg_(cfg) {
    if (cfg_.hidden % cfg_.heads != 0)
        throw ConfigError("aggrformer: hidden width " + std::to_string(cfg_.hidden) +
                          " not divisible by " + std::to_string(cfg_.heads) + " heads");
    if (cfg_.layers < 1 || cfg_.feature_dim < 1 || cfg_.max_grid < 1 || cfg_.mlp_ratio < 1)
        throw ConfigError("aggrformer: nonpositive architecture parameter");
    const int d = cfg_.feature_dim, h = cfg_.hidden, mlp = cfg_.hidden * cfg_.mlp_ratio;
    auto tn = [&](Shape s) { return Tensor::trunc_normal(std::move(s), rng, 0.02, true); };
    auto zeros = [&](Shape s) { return Tensor::zeros(std::move(s), true); };
    auto ones = [&](Shape s) {
        Tensor t = Tensor::constant(std::move(s), 1.0);
        t.set_requires_grad(true);
        return t;
    };
    proj_w_ = tn({d, h});
    proj_b_ = zeros({h});
    cls_ = tn({1, h});
    mask_token_ = tn({1, d});
    pos_row_ = tn({cfg_.max_grid, h});
    pos_col_ = tn({cfg_.max_grid, h});
    for (int l = 0; l < cfg_.layers; ++l) {
        Layer ly;
        ly.ln1_g = ones({h});
        ly.ln1_b = zeros({h});
        ly.q_w = tn({h, h});
        ly.q_b = zeros({h});
        ly.k_w = tn({h, h});
        ly.k_b = zeros({h});
        ly.v_w = tn({h, h});
        ly.v_b = zeros({h});
        ly.o_w = tn({h, h});
        ly.o_b = zeros({h});
        ly.ln2_g = ones({h});
        ly.ln2_b = zeros({h});
        ly.fc1_w = tn({h, mlp});
        ly.fc1_b = zeros({mlp});
        ly.fc2_w = tn({mlp, h});
        ly.fc2_b = zeros({h});
        layers_.push_back(std::move(ly));
    }
    lnf_g_ = ones({h});
    lnf_b_ = zeros({h});
    recon_w_ = tn({h, d});
    recon_b_ = zeros({d});
    score_w_ = tn({h, 1});
    score_b_ = zeros({1});
    score_scale_ = Tensor::constant({1, 1}, 1.0);  // non-trainable
    clsf_w_ = tn({h, 1});
    clsf_b_ = zeros({1});
}

Tensor RegionAggregator::encode(const RegionTokens& tokens, const std::vector<std::int64_t>& masked,
                                std::vector<double>* attention_out) const {
    tokens.validate(cfg_.max_grid);
    const std::int64_t p = tokens.count();
    if (tokens.features.dim(1) != cfg_.feature_dim)
        throw ShapeError("aggrformer: feature width " + shape_str(tokens.features.shape()) +
                         " does not match configured D=" + std::to_string(cfg_.feature_dim));
    const std::int64_t t = p + 1;
    const std::int64_t dh = cfg_.hidden / cfg_.heads;

    // mask-token replacement in feature space
    Tensor x = tokens.features;
    if (!masked.empty()) {
        Tensor keep = Tensor::constant({p}, 1.0);
        Tensor replaced = Tensor::zeros({p, 1});
        for (std::int64_t i : masked) {
            if (i < 0 || i >= p) throw DomainError("aggrformer: masked index out of range");
            if (tokens.ignore[static_cast<std::size_t>(i)])
                throw DomainError("aggrformer: masked index points at an ignored position");
            keep.data()[i] = 0.0;
            replaced.data()[i] = 1.0;
        }
        x = add(scale_rows(x, keep), matmul(replaced, mask_token_));
    }
    x = add_rowvec(matmul(x, proj_w_), proj_b_);
    x = add(x, add(embedding_lookup(pos_row_, tokens.rows), embedding_lookup(pos_col_, tokens.cols)));
    x = concat_rows({cls_, x});

    // additive key mask: ignored positions never receive attention
    Tensor attn_mask = Tensor::zeros({t, t});
    bool any_ignored = false;
    for (std::int64_t j = 0; j < p; ++j) {
        if (!tokens.ignore[static_cast<std::size_t>(j)]) continue;
        any_ignored = true;
        for (std::int64_t r = 0; r < t; ++r) attn_mask.data()[r * t + (j + 1)] = kMaskLogit;
    }

    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> last_attn;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& ly = layers_[l];
        Tensor h = layer_norm(x, ly.ln1_g, ly.ln1_b);
        Tensor q = add_rowvec(matmul(h, ly.q_w), ly.q_b);
        Tensor k = add_rowvec(matmul(h, ly.k_w), ly.k_b);
        Tensor v = add_rowvec(matmul(h, ly.v_w), ly.v_b);
        std::vector<Tensor> head_outs;
        std::vector<Tensor> attns;
        for (int hd = 0; hd < cfg_.heads; ++hd) {
            Tensor qh = slice_cols(q, hd * dh, dh);
            Tensor kh = slice_cols(k, hd * dh, dh);
            Tensor vh = slice_cols(v, hd * dh, dh);
            Tensor logits = scale(matmul(qh, transpose(kh)), scale_factor);
            if (any_ignored) logits = add(logits, attn_mask);
            Tensor a = softmax(logits);
            attns.push_back(a);
            head_outs.push_back(matmul(a, vh));
        }
        if (l + 1 == layers_.size()) last_attn = attns;
        Tensor attn_out = add_rowvec(matmul(concat_cols(head_outs), ly.o_w), ly.o_b);
        x = add(x, attn_out);
        Tensor h2 = layer_norm(x, ly.ln2_g, ly.ln2_b);
        Tensor mlp = add_rowvec(matmul(gelu(add_rowvec(matmul(h2, ly.fc1_w), ly.fc1_b)), ly.fc2_w),
                                ly.fc2_b);
        x = add(x, mlp);
    }
    x = layer_norm(x, lnf_g_, lnf_b_);

    if (attention_out) {
        // class-token row of the last layer, mean over heads, renormalized
        // over the patch positions
        attention_out->assign(static_cast<std::size_t>(p), 0.0);
        double total = 0.0;
        for (std::int64_t j = 0; j < p; ++j) {
            if (tokens.ignore[static_cast<std::size_t>(j)]) continue;
            double w = 0.0;
            for (const auto& a : last_attn) w += a.data()[j + 1];
            w /= static_cast<double>(last_attn.size());
            (*attention_out)[static_cast<std::size_t>(j)] = w;
            total += w;
        }
        for (auto& w : *attention_out) w /= total;
    }
    return x;
}

Tensor RegionAggregator::reconstruct(const Tensor& states, const std::vector<std::int64_t>& masked) const {
    std::vector<std::int64_t> shifted;
    shifted.reserve(masked.size());
    for (std::int64_t i : masked) shifted.push_back(i + 1);  // class token occupies row 0
    return add_rowvec(matmul(gather_rows(states, shifted), recon_w_), recon_b_);
}

Tensor RegionAggregator::score_head(const Tensor& slide_embedding) const {
    Tensor raw = matmul(slide_embedding, score_w_);
    Tensor scaled = mul(raw, reshape(score_scale_, {1, 1}));
    return add_rowvec(scaled, score_b_);
}

Tensor RegionAggregator::logit_head(const Tensor& slide_embedding) const {
    return add_rowvec(matmul(slide_embedding, clsf_w_), clsf_b_);
}

void RegionAggregator::set_score_affine(double bias, double scale) {
    score_b_.array()[0] = bias;
    score_scale_.array()[0] = scale;
}

std::vector<Tensor> RegionAggregator::regression_head_params() const { return {score_w_, score_b_}; }
std::vector<Tensor> RegionAggregator::classifier_head_params() const { return {clsf_w_, clsf_b_}; }

std::vector<std::pair<std::string, Tensor>> RegionAggregator::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto put = [&](const std::string& n, const Tensor& t) { out.emplace_back("aggrformer." + n, t); };
    put("proj.w", proj_w_);
    put("proj.b", proj_b_);
    put("cls", cls_);
    put("mask_token", mask_token_);
    put("pos.row", pos_row_);
    put("pos.col", pos_col_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const std::string p = "l" + std::to_string(l) + ".";
        const Layer& ly = layers_[l];
        put(p + "ln1.g", ly.ln1_g);
        put(p + "ln1.b", ly.ln1_b);
        put(p + "q.w", ly.q_w);
        put(p + "q.b", ly.q_b);
        put(p + "k.w", ly.k_w);
        put(p + "k.b", ly.k_b);
        put(p + "v.w", ly.v_w);
        put(p + "v.b", ly.v_b);
        put(p + "o.w", ly.o_w);
        put(p + "o.b", ly.o_b);
        put(p + "ln2.g", ly.ln2_g);
        put(p + "ln2.b", ly.ln2_b);
        put(p + "fc1.w", ly.fc1_w);
        put(p + "fc1.b", ly.fc1_b);
        put(p + "fc2.w", ly.fc2_w);
        put(p + "fc2.b", ly.fc2_b);
    }
    put("lnf.g", lnf_g_);
    put("lnf.b", lnf_b_);
    put("recon.w", recon_w_);
    put("recon.b", recon_b_);
    put("score.w", score_w_);
    put("score.b", score_b_);
    put("score.scale", score_scale_);
    put("clsf.w", clsf_w_);
    put("clsf.b", clsf_b_);
    return out;
}

std::vector<Tensor> RegionAggregator::parameters() const {
    std::vector<Tensor> out;
    for (auto& [n, t] : named_parameters())
        if (t.requires_grad()) out.push_back(t);  // score.scale is a constant
    return out;
}

// ---- slide-level helpers ----

ImageModel::ImageModel(PatchNetConfig pc, AggrConfig ac, std::uint64_t seed)
    : encoder_config(pc),
      aggregator_config(ac),
      encoder([&] {
          Rng rng(seed);
          return PatchEncoder(pc, rng);
      }()),
      aggregator([&] {
          Rng rng(seed + 0x9e3779b97f4a7c15ULL);
          return RegionAggregator(ac, rng);
      }()) {
    if (pc.feature_dim != ac.feature_dim)
        throw ConfigError("image model: encoder D=" + std::to_string(pc.feature_dim) +
                          " does not match aggregator D=" + std::to_string(ac.feature_dim));
}

RegionTokens region_tokens(const ImageModel& model, const RegionSample& region, bool detach_features) {
    const std::int64_t p = static_cast<std::int64_t>(region.patch_pixels.size());
    if (p == 0) throw DomainError("region_tokens: region has no patch slots");
    if (region.ignore.size() != region.patch_pixels.size())
        throw ShapeError("region_tokens: ignore flags misaligned");

    std::vector<const ImageRGB*> present;
    std::vector<std::int64_t> present_idx;
    for (std::int64_t i = 0; i < p; ++i) {
        if (region.ignore[static_cast<std::size_t>(i)]) continue;
        present.push_back(&region.patch_pixels[static_cast<std::size_t>(i)]);
        present_idx.push_back(i);
    }
    if (present.empty()) throw DomainError("empty region: all positions ignored");

    Tensor feats = model.encoder.forward(model.encoder.to_input(present));
    if (detach_features) feats = feats.detach();

    RegionTokens tokens;
    if (present_idx.size() == static_cast<std::size_t>(p)) {
        tokens.features = feats;
    } else {
        // scatter present rows into the full grid, zeros at padded slots
        Tensor scatter = Tensor::zeros({p, static_cast<std::int64_t>(present_idx.size())});
        for (std::size_t i = 0; i < present_idx.size(); ++i)
            scatter.data()[present_idx[i] * static_cast<std::int64_t>(present_idx.size()) +
                           static_cast<std::int64_t>(i)] = 1.0;
        tokens.features = matmul(scatter, feats);
    }
    const std::int64_t cells = region.cells_per_side;
    if (cells * cells != p)
        throw ShapeError("region_tokens: " + std::to_string(p) + " slots do not form a " +
                         std::to_string(cells) + "-cell grid");
    for (std::int64_t i = 0; i < p; ++i) {
        tokens.rows.push_back(i / cells);
        tokens.cols.push_back(i % cells);
    }
    tokens.ignore = region.ignore;
    return tokens;
}

RegionEmbedding embed_region(const ImageModel& model, const RegionSample& region) {
    const RegionTokens tokens = region_tokens(model, region, true);
    RegionEmbedding out;
    out.attention.origin_x = region.origin_x;
    out.attention.origin_y = region.origin_y;
    out.attention.side = region.side;
    const Tensor states = model.aggregator.encode(tokens, {}, &out.attention.weights);
    out.class_vector = model.aggregator.class_vector(states).detach();
    return out;
}

Tensor embed_slide_t(const ImageModel& model, const SlideSample& slide, bool detach_features) {
    if (slide.regions.empty()) throw DomainError("embed_slide: slide " + slide.slide_id + " has no regions");
    std::vector<Tensor> class_vectors;
    class_vectors.reserve(slide.regions.size());
    for (const auto& region : slide.regions) {
        const RegionTokens tokens = region_tokens(model, region, detach_features);
        const Tensor states = model.aggregator.encode(tokens, {}, nullptr);
        class_vectors.push_back(model.aggregator.class_vector(states));
    }
    return mean_rows(concat_rows(class_vectors));
}

namespace {

// per-coordinate sorted accumulation: the mean is exactly region-order
// invariant
std::vector<double> canonical_mean(const std::vector<Tensor>& vectors) {
    const std::int64_t h = vectors[0].dim(1);
    std::vector<double> out(static_cast<std::size_t>(h));
    std::vector<double> column(vectors.size());
    for (std::int64_t c = 0; c < h; ++c) {
        for (std::size_t r = 0; r < vectors.size(); ++r) column[r] = vectors[r].data()[c];
        std::sort(column.begin(), column.end());
        double s = 0.0;
        for (double v : column) s += v;
        out[static_cast<std::size_t>(c)] = s / static_cast<double>(vectors.size());
    }
    return out;
}

}  // namespace

std::vector<double> embed_slide(const ImageModel& model, const SlideSample& slide) {
    if (slide.regions.empty()) throw DomainError("embed_slide: slide " + slide.slide_id + " has no regions");
    std::vector<Tensor> class_vectors;
    class_vectors.reserve(slide.regions.size());
    for (const auto& region : slide.regions)
        class_vectors.push_back(embed_region(model, region).class_vector);
    return canonical_mean(class_vectors);
}

std::int64_t masked_count(double mask_ratio, std::int64_t visible) {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
        throw ConfigError("masked_count: mask ratio must lie in (0,1)");
    if (visible < 1) throw DomainError("masked_count: no visible positions");
    const auto k = static_cast<std::int64_t>(std::llround(mask_ratio * static_cast<double>(visible)));
    return std::clamp<std::int64_t>(k, 1, visible);
}

double classifier_pos_weight(std::size_t n_low, std::size_t n_high) {
    if (n_low == 0 || n_high == 0)
        throw DomainError("classifier_pos_weight: both classes must be present");
    return static_cast<double>(n_low) / static_cast<double>(n_high);
}

SlidePrediction predict_slide(const ImageModel& model, const SlideSample& slide) {
    if (slide.regions.empty()) throw DomainError("predict_slide: slide has no regions");
    SlidePrediction pred;
    std::vector<Tensor> class_vectors;
    for (const auto& region : slide.regions) {
        RegionEmbedding emb = embed_region(model, region);
        class_vectors.push_back(emb.class_vector);
        pred.attentions.push_back(std::move(emb.attention));
    }
    const std::vector<double> mean = canonical_mean(class_vectors);
    Tensor slide_emb = Tensor::from_data({1, static_cast<std::int64_t>(mean.size())},
                                         std::vector<double>(mean.begin(), mean.end()));
    pred.probability_high = sigmoid(model.aggregator.logit_head(slide_emb)).item();
    pred.score_estimate = std::clamp(model.aggregator.score_head(slide_emb).item(), 0.0, 100.0);
    return pred;
}

// ---- training ----

namespace {

void check_loss_finite(double loss) {
    if (!std::isfinite(loss)) throw TrainingError("training loss is not finite");
}

std::vector<Tensor> trainable_params(const ImageModel& model, bool freeze_encoder) {
    std::vector<Tensor> params;
    if (!freeze_encoder)
        for (auto& t : model.encoder.parameters()) params.push_back(t);
    for (auto& t : model.aggregator.parameters()) params.push_back(t);
    return params;
}

// frozen-backbone embeddings for the head warmup
std::vector<Tensor> cache_embeddings(const ImageModel& model,
                                     const std::vector<const SlideSample*>& slides) {
    std::vector<Tensor> out;
    out.reserve(slides.size());
    for (const auto* s : slides) out.push_back(embed_slide_t(model, *s, true).detach());
    return out;
}

}  // namespace

std::vector<double> pretrain_masked(ImageModel& model, const std::vector<SlideSample>& slides,
                                    const TrainOptions& opt) {
    const double rho = model.aggregator_config.mask_ratio;
    if (!(rho > 0.0 && rho < 1.0))
        throw ConfigError("pretrain_masked: mask ratio must lie in (0,1), got " + std::to_string(rho));
    if (slides.empty()) throw DomainError("pretrain_masked: no slides");

    // encoder frozen here: features precomputed once per region
    struct PreparedRegion {
        RegionTokens tokens;
        std::vector<std::int64_t> visible;
    };
    std::vector<PreparedRegion> regions;
    for (const auto& slide : slides)
        for (const auto& region : slide.regions) {
            PreparedRegion pr;
            pr.tokens = region_tokens(model, region, true);
            for (std::int64_t i = 0; i < pr.tokens.count(); ++i)
                if (!pr.tokens.ignore[static_cast<std::size_t>(i)]) pr.visible.push_back(i);
            regions.push_back(std::move(pr));
        }

    Adam optimizer(model.aggregator.parameters(), {.lr = opt.lr});
    Rng rng(opt.seed);
    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(opt.steps));
    for (std::int64_t step = 0; step < opt.steps; ++step) {
        std::vector<Tensor> losses;
        for (std::int64_t b = 0; b < opt.batch; ++b) {
            const PreparedRegion& pr = regions[rng.below(regions.size())];
            const std::int64_t k = masked_count(rho, static_cast<std::int64_t>(pr.visible.size()));
            std::vector<std::int64_t> masked;
            for (std::size_t pick : rng.sample_without_replacement(pr.visible.size(),
                                                                   static_cast<std::size_t>(k)))
                masked.push_back(pr.visible[pick]);
            std::sort(masked.begin(), masked.end());

            const Tensor states = model.aggregator.encode(pr.tokens, masked, nullptr);
            const Tensor recon = model.aggregator.reconstruct(states, masked);
            const Tensor targets = gather_rows(pr.tokens.features, masked);
            losses.push_back(mse_loss(recon, targets));
        }
        Tensor total = losses[0];
        for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
        total = scale(total, 1.0 / static_cast<double>(losses.size()));
        check_loss_finite(total.item());
        history.push_back(total.item());
        backward(total);
        optimizer.step();
    }
    model.phase = "pretrain";
    return history;
}

std::vector<double> finetune_regression(ImageModel& model, const std::vector<SlideSample>& slides,
                                        const TrainOptions& opt) {
    std::vector<const SlideSample*> labeled;
    for (const auto& s : slides)
        if (s.score) labeled.push_back(&s);
    if (labeled.empty()) throw DomainError("finetune_regression: no slides carry a score");

    // first entry into the phase: anchor the head at the label mean and set
    // the output scale to the label spread
    if (model.phase != "regression") {
        double mean = 0.0;
        for (const auto* s : labeled) mean += *s->score;
        mean /= static_cast<double>(labeled.size());
        double var = 0.0;
        for (const auto* s : labeled) var += (*s->score - mean) * (*s->score - mean);
        const double sd = std::sqrt(var / static_cast<double>(labeled.size()));
        model.aggregator.set_score_affine(mean, std::max(1.0, sd));
    }

    Rng rng(opt.seed);
    std::vector<double> history;
    const std::int64_t batch = std::min<std::int64_t>(opt.batch, static_cast<std::int64_t>(labeled.size()));

    if (opt.head_warmup_steps > 0) {
        const auto cache = cache_embeddings(model, labeled);
        Adam head_opt(model.aggregator.regression_head_params(), {.lr = opt.head_warmup_lr});
        for (std::int64_t step = 0; step < opt.head_warmup_steps; ++step) {
            std::vector<Tensor> preds;
            std::vector<double> targets;
            for (std::int64_t b = 0; b < batch; ++b) {
                const std::size_t i = rng.below(labeled.size());
                preds.push_back(model.aggregator.score_head(cache[i]));
                targets.push_back(*labeled[i]->score);
            }
            Tensor loss = mse_loss(concat_rows(preds),
                                   Tensor::from_data({batch, 1}, targets));
            check_loss_finite(loss.item());
            backward(loss);
            head_opt.step();
        }
    }

    Adam optimizer(trainable_params(model, opt.freeze_encoder), {.lr = opt.lr});
    for (std::int64_t step = 0; step < opt.steps; ++step) {
        std::vector<Tensor> preds;
        std::vector<double> targets;
        for (std::int64_t b = 0; b < batch; ++b) {
            const SlideSample& s = *labeled[rng.below(labeled.size())];
            preds.push_back(model.aggregator.score_head(embed_slide_t(model, s, opt.freeze_encoder)));
            targets.push_back(*s.score);
        }
        Tensor pred = concat_rows(preds);
        Tensor target = Tensor::from_data({batch, 1}, targets);
        Tensor loss = mse_loss(pred, target);
        check_loss_finite(loss.item());
        history.push_back(loss.item());
        backward(loss);
        optimizer.step();
    }
    model.phase = "regression";
    return history;
}

std::vector<double> finetune_classifier(ImageModel& model, const std::vector<SlideSample>& slides,
                                        const TrainOptions& opt) {
    std::vector<const SlideSample*> labeled;
    std::size_t n_low = 0, n_high = 0;
    for (const auto& s : slides) {
        if (!s.label) continue;
        labeled.push_back(&s);
        (*s.label == RiskCategory::High ? n_high : n_low) += 1;
    }
    if (labeled.empty()) throw DomainError("finetune_classifier: no labeled slides");
    if (n_low == 0 || n_high == 0)
        throw DomainError("finetune_classifier: training set has a single class");
    const double pos_weight = classifier_pos_weight(n_low, n_high);

    Rng rng(opt.seed);
    std::vector<double> history;
    const std::int64_t batch = std::min<std::int64_t>(opt.batch, static_cast<std::int64_t>(labeled.size()));

    if (opt.head_warmup_steps > 0) {
        const auto cache = cache_embeddings(model, labeled);
        Adam head_opt(model.aggregator.classifier_head_params(), {.lr = opt.head_warmup_lr});
        for (std::int64_t step = 0; step < opt.head_warmup_steps; ++step) {
            std::vector<Tensor> logits;
            std::vector<double> targets;
            for (std::int64_t b = 0; b < batch; ++b) {
                const std::size_t i = rng.below(labeled.size());
                logits.push_back(model.aggregator.logit_head(cache[i]));
                targets.push_back(*labeled[i]->label == RiskCategory::High ? 1.0 : 0.0);
            }
            Tensor loss = bce_with_logits_loss(concat_rows(logits),
                                               Tensor::from_data({batch, 1}, targets), pos_weight);
            check_loss_finite(loss.item());
            backward(loss);
            head_opt.step();
        }
    }

    Adam optimizer(trainable_params(model, opt.freeze_encoder), {.lr = opt.lr});
    for (std::int64_t step = 0; step < opt.steps; ++step) {
        std::vector<Tensor> logits;
        std::vector<double> targets;
        for (std::int64_t b = 0; b < batch; ++b) {
            const SlideSample& s = *labeled[rng.below(labeled.size())];
            logits.push_back(model.aggregator.logit_head(embed_slide_t(model, s, opt.freeze_encoder)));
            targets.push_back(*s.label == RiskCategory::High ? 1.0 : 0.0);
        }
        Tensor logit = concat_rows(logits);
        Tensor target = Tensor::from_data({batch, 1}, targets);
        Tensor loss = bce_with_logits_loss(logit, target, pos_weight);
        check_loss_finite(loss.item());
        history.push_back(loss.item());
        backward(loss);
        optimizer.step();
        if (opt.eval_every > 0 && opt.eval_hook && (step + 1) % opt.eval_every == 0) {
            if (opt.eval_hook(step + 1)) break;
        }
    }
    model.phase = "classifier";
    return history;
}

// ---- checkpointing ----

Checkpoint image_model_checkpoint(const ImageModel& model, const nlohmann::json& config_echo) {
    Checkpoint cp;
    cp.phase = model.phase;
    cp.config = config_echo.is_null() ? nlohmann::json::object() : config_echo;
    cp.config["model"] = {
        {"patch_side", model.encoder_config.patch_side},
        {"feature_dim", model.encoder_config.feature_dim},
        {"stem_channels", model.encoder_config.stem_channels},
        {"stages", model.encoder_config.stages},
        {"blocks_per_stage", model.encoder_config.blocks_per_stage},
        {"stem_stride", model.encoder_config.stem_stride},
        {"stem_pool", model.encoder_config.stem_pool},
        {"hidden", model.aggregator_config.hidden},
        {"layers", model.aggregator_config.layers},
        {"heads", model.aggregator_config.heads},
        {"mlp_ratio", model.aggregator_config.mlp_ratio},
        {"max_grid", model.aggregator_config.max_grid},
        {"mask_ratio", model.aggregator_config.mask_ratio},
    };
    for (const auto& [name, t] : model.encoder.named_parameters()) cp.add(name, t);
    for (const auto& [name, t] : model.aggregator.named_parameters()) cp.add(name, t);
    return cp;
}

ImageModel image_model_from_checkpoint(const Checkpoint& cp) {
    if (!cp.config.contains("model"))
        throw VersionError("checkpoint: missing model configuration echo");
    const auto& m = cp.config.at("model");
    PatchNetConfig pc;
    pc.patch_side = m.at("patch_side").get<int>();
    pc.feature_dim = m.at("feature_dim").get<int>();
    pc.stem_channels = m.at("stem_channels").get<int>();
    pc.stages = m.at("stages").get<int>();
    pc.blocks_per_stage = m.at("blocks_per_stage").get<int>();
    pc.stem_stride = m.at("stem_stride").get<int>();
    pc.stem_pool = m.at("stem_pool").get<bool>();
    AggrConfig ac;
    ac.feature_dim = pc.feature_dim;
    ac.hidden = m.at("hidden").get<int>();
    ac.layers = m.at("layers").get<int>();
    ac.heads = m.at("heads").get<int>();
    ac.mlp_ratio = m.at("mlp_ratio").get<int>();
    ac.max_grid = m.at("max_grid").get<int>();
    ac.mask_ratio = m.at("mask_ratio").get<double>();

    ImageModel model(pc, ac, 0);
    model.phase = cp.phase;
    auto load_into = [&](std::vector<std::pair<std::string, Tensor>> params) {
        for (auto& [name, t] : params) {
            const Tensor stored = cp.require(name, t.shape());
            t.array() = stored.array();
        }
    };
    load_into(model.encoder.named_parameters());
    load_into(model.aggregator.named_parameters());
    return model;
}

}  // namespace odhn
