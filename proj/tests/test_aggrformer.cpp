#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "odhn/gradcheck.hpp"
#include "odhn/stats.hpp"
#include "support/synthslides.hpp"
#include "support/tmpdir.hpp"

using namespace odhn;
using namespace odhn::testsupport;

namespace {

RegionTokens tokens_from(Tensor features, std::int64_t cells, std::vector<bool> ignore = {}) {
    RegionTokens t;
    t.features = std::move(features);
    const std::int64_t p = t.features.dim(0);
    for (std::int64_t i = 0; i < p; ++i) {
        t.rows.push_back(i / cells);
        t.cols.push_back(i % cells);
    }
    t.ignore = ignore.empty() ? std::vector<bool>(static_cast<std::size_t>(p), false) : std::move(ignore);
    return t;
}

}  // namespace

TEST_CASE("attention is uniform for identical tokens once positions are out of play") {
    Rng rng(1);
    AggrConfig ac = tiny_aggr_config();
    RegionAggregator aggr(ac, rng);
    // zero the positional tables so position cannot break the symmetry
    for (auto& [name, t] : aggr.named_parameters())
        if (name.find("pos.") != std::string::npos) t.array().setZero();

    Tensor features = Tensor::zeros({4, 8});
    for (std::int64_t c = 0; c < 8; ++c)
        for (std::int64_t r = 0; r < 4; ++r) features.data()[r * 8 + c] = 0.1 * static_cast<double>(c);

    SUBCASE("all positions visible") {
        std::vector<double> attention;
        aggr.encode(tokens_from(features, 2), {}, &attention);
        REQUIRE(attention.size() == 4);
        for (double w : attention) CHECK(w == doctest::Approx(0.25).epsilon(1e-12));
    }
    SUBCASE("ignored positions get exactly zero") {
        std::vector<double> attention;
        aggr.encode(tokens_from(features, 2, {false, true, false, true}), {}, &attention);
        CHECK(attention[1] == 0.0);
        CHECK(attention[3] == 0.0);
        CHECK(attention[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(attention[2] == doctest::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("attention weights sum to one per region") {
    Rng rng(2);
    RegionAggregator aggr(tiny_aggr_config(), rng);
    Tensor features = Tensor::randn({9, 8}, rng, 1.0);
    RegionTokens t;
    t.features = features;
    for (std::int64_t i = 0; i < 9; ++i) {
        t.rows.push_back(i / 3);
        t.cols.push_back(i % 3);
        t.ignore.push_back(i == 4);
    }
    std::vector<double> attention;
    aggr.encode(t, {}, &attention);
    double s = 0.0;
    for (double w : attention) {
        CHECK(w >= 0.0);
        s += w;
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
}

TEST_CASE("permuting patches with their positions leaves the class vector unchanged") {
    Rng rng(3);
    RegionAggregator aggr(tiny_aggr_config(), rng);
    Tensor features = Tensor::randn({4, 8}, rng, 1.0);
    RegionTokens base = tokens_from(features, 2);

    // permute rows 0..3 -> 2,0,3,1 along with their grid positions
    const std::vector<std::int64_t> perm = {2, 0, 3, 1};
    Tensor pf = Tensor::zeros({4, 8});
    RegionTokens permuted;
    for (std::int64_t i = 0; i < 4; ++i) {
        for (std::int64_t c = 0; c < 8; ++c) pf.data()[i * 8 + c] = features.data()[perm[i] * 8 + c];
        permuted.rows.push_back(base.rows[perm[i]]);
        permuted.cols.push_back(base.cols[perm[i]]);
        permuted.ignore.push_back(false);
    }
    permuted.features = pf;

    const Tensor a = aggr.class_vector(aggr.encode(base, {}, nullptr));
    const Tensor b = aggr.class_vector(aggr.encode(permuted, {}, nullptr));
    for (std::int64_t c = 0; c < 16; ++c)
        CHECK(std::abs(a.data()[c] - b.data()[c]) < 1e-9);
}

TEST_CASE("all-ignored regions are rejected") {
    Rng rng(4);
    RegionAggregator aggr(tiny_aggr_config(), rng);
    Tensor features = Tensor::zeros({4, 8});
    CHECK_THROWS_WITH_AS(aggr.encode(tokens_from(features, 2, {true, true, true, true}), {}, nullptr),
                         doctest::Contains("empty region"), DomainError);
}

TEST_CASE("masked_count follows the rounding rule") {
    CHECK(masked_count(0.5, 400) == 200);
    CHECK(masked_count(0.5, 16) == 8);
    CHECK(masked_count(0.1, 4) == 1);  // clamped to at least one
    CHECK_THROWS_AS(masked_count(1.5, 10), ConfigError);
}

TEST_CASE("classifier pos weight is the class ratio") {
    CHECK(classifier_pos_weight(821, 163) == doctest::Approx(5.0368).epsilon(1e-3));
    CHECK_THROWS_AS(classifier_pos_weight(10, 0), DomainError);
}

TEST_CASE("slide embedding is the mean of class vectors and region-order exact") {
    Rng rng(5);
    ImageModel model(tiny_encoder_config(), tiny_aggr_config(), 11);
    Rng prng(6);
    SlideSample slide = blob_slide("s", 30.0, 3, 8, 2, prng);

    const auto emb = embed_slide(model, slide);
    std::vector<Tensor> cls;
    for (const auto& r : slide.regions) cls.push_back(embed_region(model, r).class_vector);
    for (std::size_t c = 0; c < emb.size(); ++c) {
        const double mean = (cls[0].data()[c] + cls[1].data()[c] + cls[2].data()[c]) / 3.0;
        CHECK(std::abs(emb[c] - mean) < 1e-12);
    }

    SlideSample reordered = slide;
    std::swap(reordered.regions[0], reordered.regions[2]);
    CHECK(embed_slide(model, reordered) == emb);

    SlideSample one = slide;
    one.regions.resize(1);
    const auto e1 = embed_slide(model, one);
    for (std::size_t c = 0; c < e1.size(); ++c) CHECK(e1[c] == cls[0].data()[c]);

    SlideSample dup = one;
    dup.regions.push_back(dup.regions[0]);
    CHECK(embed_slide(model, dup) == e1);  // mean of duplicates

    SlideSample empty = slide;
    empty.regions.clear();
    CHECK_THROWS_AS(embed_slide(model, empty), DomainError);
}

TEST_CASE("masked loss gradient is zero at unmasked target features") {
    Rng rng(7);
    AggrConfig ac = tiny_aggr_config();
    ac.max_grid = 2;
    RegionAggregator aggr(ac, rng);

    // 4-patch region; targets enter the loss as their own leaf
    Tensor target_features = Tensor::randn({4, 8}, rng, 1.0, true);
    Tensor input_features = target_features.detach();
    const std::vector<std::int64_t> masked = {1, 3};

    auto build = [&] {
        RegionTokens t = tokens_from(input_features, 2);
        const Tensor states = aggr.encode(t, masked, nullptr);
        const Tensor recon = aggr.reconstruct(states, masked);
        return mse_loss(recon, gather_rows(target_features, masked));
    };
    Tensor loss = build();
    backward(loss);

    const auto& g = target_features.grad();
    for (std::int64_t c = 0; c < 8; ++c) {
        CHECK(g[0 * 8 + c] == 0.0);  // unmasked rows exactly zero
        CHECK(g[2 * 8 + c] == 0.0);
    }
    double masked_norm = 0.0;
    for (std::int64_t c = 0; c < 8; ++c) masked_norm += std::abs(g[1 * 8 + c]) + std::abs(g[3 * 8 + c]);
    CHECK(masked_norm > 0.0);

    const auto fd = gradcheck([&] { return build().item(); }, {target_features});
    CHECK(fd.ok);
    CHECK(fd.max_rel_err < 1e-4);
}

TEST_CASE("full-stack gradients match finite differences") {
    Rng rng(8);
    PatchNetConfig pc = tiny_encoder_config();
    pc.patch_side = 6;
    AggrConfig ac = tiny_aggr_config();
    ac.layers = 1;
    ImageModel model(pc, ac, 21);
    for (auto& p : model.encoder.parameters())
        for (std::int64_t i = 0; i < p.numel(); ++i) p.data()[i] += rng.normal(0.0, 0.05);

    Rng prng(9);
    SlideSample slide;
    slide.slide_id = "s";
    RegionSample region;
    region.side = 12;
    region.cells_per_side = 2;
    for (int i = 0; i < 4; ++i) {
        region.patch_pixels.push_back(blob_patch(6, 2, prng));
        region.ignore.push_back(false);
    }
    slide.regions.push_back(region);
    slide.score = 40.0;

    auto build = [&] {
        Tensor pred = model.aggregator.score_head(embed_slide_t(model, slide, false));
        Tensor target = Tensor::from_data({1, 1}, {40.0});
        return mse_loss(pred, target);
    };
    Tensor loss = build();
    backward(loss);
    std::vector<Tensor> leaves;
    for (auto& t : model.encoder.parameters()) leaves.push_back(t);
    for (auto& t : model.aggregator.parameters()) leaves.push_back(t);
    const auto res = gradcheck([&] { return build().item(); }, leaves, 1e-5, 1e-4, 2e-6);
    CHECK(res.ok);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("masked pretraining overfits one slide") {
    ImageModel model(tiny_encoder_config(), tiny_aggr_config(), 31);
    Rng prng(10);
    std::vector<SlideSample> slides = {blob_slide("s", 30.0, 2, 8, 2, prng)};
    TrainOptions opt;
    opt.steps = 500;
    opt.batch = 2;
    opt.lr = 3e-3;
    opt.seed = 5;
    const auto history = pretrain_masked(model, slides, opt);
    REQUIRE(history.size() == 500);
    const double head = std::accumulate(history.begin(), history.begin() + 10, 0.0) / 10.0;
    const double tail = std::accumulate(history.end() - 10, history.end(), 0.0) / 10.0;
    CHECK(tail < 0.1 * head);
    CHECK(model.phase == "pretrain");
}

TEST_CASE("pretraining is deterministic per seed") {
    Rng prng(11);
    std::vector<SlideSample> slides = {blob_slide("s", 20.0, 2, 8, 2, prng)};
    auto run = [&](std::uint64_t seed) {
        ImageModel model(tiny_encoder_config(), tiny_aggr_config(), 41);
        TrainOptions opt;
        opt.steps = 30;
        opt.batch = 2;
        opt.seed = seed;
        return pretrain_masked(model, slides, opt);
    };
    CHECK(run(7) == run(7));
    CHECK(run(7) != run(8));
}

TEST_CASE("mask ratio outside (0,1) is a config error") {
    AggrConfig ac = tiny_aggr_config();
    ac.mask_ratio = 1.5;
    ImageModel model(tiny_encoder_config(), ac, 51);
    Rng prng(12);
    std::vector<SlideSample> slides = {blob_slide("s", 20.0, 1, 8, 2, prng)};
    CHECK_THROWS_AS(pretrain_masked(model, slides, {}), ConfigError);
}

TEST_CASE("regression fine-tune overfits four slides") {
    ImageModel model(tiny_encoder_config(), tiny_aggr_config(), 61);
    Rng prng(13);
    std::vector<SlideSample> slides;
    const double scores[4] = {5.0, 18.0, 35.0, 60.0};
    for (int i = 0; i < 4; ++i)
        slides.push_back(blob_slide("s" + std::to_string(i), scores[i], 2, 8, 2, prng));

    TrainOptions opt;
    opt.steps = 800;
    opt.batch = 4;
    opt.lr = 2e-2;
    opt.seed = 3;
    finetune_regression(model, slides, opt);
    CHECK(model.phase == "regression");

    std::vector<double> targets, preds;
    for (const auto& s : slides) {
        targets.push_back(*s.score);
        preds.push_back(predict_slide(model, s).score_estimate);
    }
    CHECK(stats::r_squared(targets, preds) > 0.95);
}

TEST_CASE("constant targets drive the head to a constant with r-squared zero") {
    ImageModel model(tiny_encoder_config(), tiny_aggr_config(), 71);
    Rng prng(14);
    std::vector<SlideSample> slides;
    for (int i = 0; i < 3; ++i) slides.push_back(blob_slide("s" + std::to_string(i), 20.0, 1, 8, 2, prng));
    TrainOptions opt;
    opt.steps = 150;
    opt.batch = 3;
    opt.lr = 3e-3;
    finetune_regression(model, slides, opt);
    std::vector<double> targets, preds;
    for (const auto& s : slides) {
        targets.push_back(*s.score);
        preds.push_back(predict_slide(model, s).score_estimate);
        CHECK(std::abs(preds.back() - 20.0) < 3.0);
    }
    CHECK(stats::r_squared(targets, preds) == 0.0);
}

TEST_CASE("score predictions clamp to the oncotype range") {
    ImageModel model(tiny_encoder_config(), tiny_aggr_config(), 81);
    // force a huge head output
    for (auto& [name, t] : model.aggregator.named_parameters()) {
        if (name == "aggrformer.score.b") t.array()[0] = 113.2;
        if (name == "aggrformer.score.w") t.array().setZero();
    }
    Rng prng(15);
    const SlideSample slide = blob_slide("s", 20.0, 1, 8, 2, prng);
    CHECK(predict_slide(model, slide).score_estimate == 100.0);
}

TEST_CASE("classifier fine-tune rejects single-class training sets") {
    ImageModel model(tiny_encoder_config(), tiny_aggr_config(), 91);
    Rng prng(16);
    std::vector<SlideSample> slides = {blob_slide("a", 10.0, 1, 8, 2, prng),
                                       blob_slide("b", 12.0, 1, 8, 2, prng)};
    CHECK_THROWS_AS(finetune_classifier(model, slides, {}), DomainError);
}

TEST_CASE("classifier output is a probability and predictions are deterministic") {
    ImageModel model(tiny_encoder_config(), tiny_aggr_config(), 101);
    Rng prng(17);
    std::vector<SlideSample> slides;
    for (int i = 0; i < 6; ++i)
        slides.push_back(blob_slide("s" + std::to_string(i), i < 4 ? 10.0 : 40.0, 1, 8, 2, prng));
    TrainOptions opt;
    opt.steps = 40;
    opt.batch = 4;
    finetune_classifier(model, slides, opt);
    CHECK(model.phase == "classifier");
    const auto a = predict_slide(model, slides[0]);
    const auto b = predict_slide(model, slides[0]);
    CHECK(a.probability_high > 0.0);
    CHECK(a.probability_high < 1.0);
    CHECK(a.probability_high == b.probability_high);
    CHECK(a.score_estimate == b.score_estimate);

    SlideSample reordered = slides[5];
    std::swap(reordered.regions[0], reordered.regions[0]);
    CHECK(predict_slide(model, reordered).probability_high ==
          predict_slide(model, slides[5]).probability_high);
}

TEST_CASE("image model checkpoints restore bitwise") {
    odhn::testsupport::TmpDir tmp("aggr_ckpt");
    ImageModel model(tiny_encoder_config(), tiny_aggr_config(), 111);
    model.phase = "pretrain";
    const Checkpoint cp = image_model_checkpoint(model, {{"note", "unit"}});
    cp.save(tmp / "m.odhn");
    const Checkpoint loaded = Checkpoint::load(tmp / "m.odhn");
    const ImageModel restored = image_model_from_checkpoint(loaded);

    Rng prng(18);
    const SlideSample slide = blob_slide("s", 30.0, 1, 8, 2, prng);
    CHECK(embed_slide(model, slide) == embed_slide(restored, slide));

    // config mismatch is a version error
    AggrConfig other = tiny_aggr_config();
    other.hidden = 32;
    ImageModel wrong(tiny_encoder_config(), other, 1);
    Checkpoint cp2 = image_model_checkpoint(wrong, {});
    CHECK_THROWS_AS((void)cp2.require("aggrformer.proj.w", {8, 16}), VersionError);
}
