#include <doctest.h>

#include <cmath>

#include "odhn/fusion.hpp"
#include "odhn/rng.hpp"
#include "support/tmpdir.hpp"

using namespace odhn;
using namespace odhn::fuse;

namespace {

std::vector<RiskCategory> labels_of(std::initializer_list<int> v) {
    std::vector<RiskCategory> out;
    for (int x : v) out.push_back(x ? RiskCategory::High : RiskCategory::Low);
    return out;
}

}  // namespace

TEST_CASE("perfect image branch with a flat clinical branch fuses to auc 1") {
    const std::vector<double> img = {0.1, 0.2, 0.8, 0.9};
    const std::vector<double> clin = {0.5, 0.5, 0.5, 0.5};
    const auto labels = labels_of({0, 0, 1, 1});
    const auto model = fit_fusion(img, clin, labels);
    CHECK(model.dev_auc == 1.0);
    CHECK(model.w > 0.0);
}

TEST_CASE("identical branch scores tie every w and keep w = 0") {
    const std::vector<double> s = {0.2, 0.7, 0.4, 0.9};
    const auto labels = labels_of({0, 1, 0, 1});
    const auto model = fit_fusion(s, s, labels);
    CHECK(model.w == 0.0);
}

TEST_CASE("anti-ordered image branch is ignored entirely") {
    const std::vector<double> clin = {0.1, 0.2, 0.8, 0.9};
    const std::vector<double> img = {0.9, 0.8, 0.2, 0.1};  // 1 - labels ordering
    const auto labels = labels_of({0, 0, 1, 1});
    const auto model = fit_fusion(img, clin, labels);
    CHECK(model.w == 0.0);
    CHECK(model.dev_auc == 1.0);
}

TEST_CASE("fused dev auc never falls below either branch") {
    Rng rng(1);
    for (int t = 0; t < 30; ++t) {
        const std::size_t n = 12 + rng.below(20);
        std::vector<double> img(n), clin(n);
        std::vector<RiskCategory> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            img[i] = rng.uniform();
            clin[i] = rng.uniform();
            labels[i] = rng.uniform() < 0.4 ? RiskCategory::High : RiskCategory::Low;
        }
        labels[0] = RiskCategory::Low;
        labels[n - 1] = RiskCategory::High;
        const auto model = fit_fusion(img, clin, labels);

        stats::ScoredCohort c;
        c.labels = labels;
        c.scores = img;
        const double auc_img = stats::auc(c);
        c.scores = clin;
        const double auc_clin = stats::auc(c);
        CHECK(model.dev_auc >= std::max(auc_img, auc_clin));
        CHECK(model.w >= 0.0);
        CHECK(model.w <= 1.0);
        CHECK(model.t_star >= 0.0);
        CHECK(model.t_star <= 1.0);
    }
}

TEST_CASE("fuse_predict arithmetic and threshold rule") {
    FusionModel m;
    m.w = 0.5;
    m.t_star = 0.6;
    const auto [fused, cat] = fuse_predict(m, 0.8, 0.4);
    CHECK(fused == doctest::Approx(0.6));
    CHECK(cat == RiskCategory::High);  // boundary counts as High

    m.w = 1.0;
    CHECK(fuse_predict(m, 0.37, 0.9).first == 0.37);

    CHECK_THROWS_AS(fuse_predict(m, 1.2, 0.5), DomainError);
    CHECK_THROWS_AS(fuse_predict(m, 0.5, -0.1), DomainError);
}

TEST_CASE("fuse_predict is monotone in each input") {
    FusionModel m;
    m.w = 0.35;
    double prev = -1.0;
    for (double img = 0.0; img <= 1.0; img += 0.1) {
        const double fused = fuse_predict(m, img, 0.5).first;
        CHECK(fused >= prev);
        prev = fused;
    }
    prev = -1.0;
    for (double clin = 0.0; clin <= 1.0; clin += 0.1) {
        const double fused = fuse_predict(m, 0.5, clin).first;
        CHECK(fused >= prev);
        prev = fused;
    }
}

TEST_CASE("fusion model json round trip") {
    odhn::testsupport::TmpDir tmp("fusion_json");
    FusionModel m;
    m.w = 0.42;
    m.t_star = 0.61;
    m.t_img = 0.55;
    m.t_clin = 0.33;
    m.dev_auc = 0.97;
    save(m, tmp / "fusion.json");
    const auto back = load(tmp / "fusion.json");
    CHECK(back.w == m.w);
    CHECK(back.t_star == m.t_star);
    CHECK(back.t_img == m.t_img);
    CHECK(back.t_clin == m.t_clin);
    CHECK(back.dev_auc == m.dev_auc);
}

TEST_CASE("misaligned or single-class dev sets are rejected") {
    const std::vector<double> img = {0.1, 0.9};
    const std::vector<double> clin = {0.2};
    CHECK_THROWS_AS(fit_fusion(img, clin, labels_of({0, 1})), IntegrityError);
    const std::vector<double> clin2 = {0.2, 0.3};
    CHECK_THROWS_AS(fit_fusion(img, clin2, labels_of({1, 1})), DomainError);
}
