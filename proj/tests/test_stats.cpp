#include <doctest.h>

#include <cmath>

#include "odhn/rng.hpp"
#include "odhn/stats.hpp"

using namespace odhn;
using namespace odhn::stats;

namespace {

ScoredCohort cohort_of(std::vector<double> scores, std::vector<int> high) {
    ScoredCohort c;
    c.scores = std::move(scores);
    for (std::size_t i = 0; i < c.scores.size(); ++i) {
        c.patient_ids.push_back("p" + std::to_string(i));
        c.labels.push_back(high[i] ? RiskCategory::High : RiskCategory::Low);
    }
    return c;
}

// independent oracle: count concordant pairs, ties half
double brute_force_auc(const ScoredCohort& c) {
    double num = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (c.labels[i] != RiskCategory::High) continue;
        for (std::size_t j = 0; j < c.size(); ++j) {
            if (c.labels[j] != RiskCategory::Low) continue;
            ++pairs;
            if (c.scores[i] > c.scores[j])
                num += 1.0;
            else if (c.scores[i] == c.scores[j])
                num += 0.5;
        }
    }
    return num / static_cast<double>(pairs);
}

ScoredCohort random_cohort(Rng& rng, std::size_t max_n = 50) {
    const std::size_t n = 2 + rng.below(max_n - 1);
    ScoredCohort c;
    for (std::size_t i = 0; i < n; ++i) {
        c.patient_ids.push_back("p" + std::to_string(i));
        // quantized scores so ties actually occur
        c.scores.push_back(static_cast<double>(rng.below(12)) / 11.0);
        c.labels.push_back(rng.uniform() < 0.4 ? RiskCategory::High : RiskCategory::Low);
    }
    // both classes present
    c.labels[0] = RiskCategory::Low;
    c.labels[n - 1] = RiskCategory::High;
    return c;
}

}  // namespace

TEST_CASE("aggregate_patient averages slide scores") {
    const auto two = aggregate_patient({{"a", 0.2}, {"a", 0.4}});
    REQUIRE(two.size() == 1);
    CHECK(two[0].second == doctest::Approx(0.3));

    const auto single = aggregate_patient({{"a", 0.7}});
    CHECK(single[0].second == 0.7);

    const auto three = aggregate_patient({{"a", 0.1}, {"b", 0.9}, {"a", 0.2}, {"a", 0.6}});
    REQUIRE(three.size() == 2);
    CHECK(three[0].first == "a");
    CHECK(three[0].second == doctest::Approx(0.3));
    CHECK(three[1].second == 0.9);
}

TEST_CASE("auc on pinned examples") {
    CHECK(auc(cohort_of({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1})) == 1.0);
    CHECK(auc(cohort_of({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1})) == 0.5);
    CHECK(auc(cohort_of({0.1, 0.4, 0.5, 0.3}, {0, 1, 0, 1})) == 0.5);
    CHECK_THROWS_WITH_AS(auc(cohort_of({0.1, 0.2}, {1, 1})), doctest::Contains("undefined AUC"),
                         DomainError);
}

TEST_CASE("rank auc equals brute force exactly on random cohorts") {
    Rng rng(31);
    for (int t = 0; t < 300; ++t) {
        const auto c = random_cohort(rng);
        CHECK(auc(c) == brute_force_auc(c));
    }
}

TEST_CASE("auc is invariant under strictly increasing transforms") {
    Rng rng(32);
    for (int t = 0; t < 50; ++t) {
        auto c = random_cohort(rng);
        const double base = auc(c);
        auto exp_c = c;
        for (auto& s : exp_c.scores) s = std::exp(s);
        auto affine_c = c;
        for (auto& s : affine_c.scores) s = 3.5 * s + 1.25;
        CHECK(auc(exp_c) == base);
        CHECK(auc(affine_c) == base);
    }
}

TEST_CASE("complement symmetry for tie-free scores") {
    Rng rng(33);
    for (int t = 0; t < 50; ++t) {
        ScoredCohort c;
        const std::size_t n = 4 + rng.below(30);
        for (std::size_t i = 0; i < n; ++i) {
            c.patient_ids.push_back("p" + std::to_string(i));
            c.scores.push_back(rng.uniform());  // ties have probability zero
            c.labels.push_back(rng.uniform() < 0.5 ? RiskCategory::High : RiskCategory::Low);
        }
        c.labels[0] = RiskCategory::Low;
        c.labels[n - 1] = RiskCategory::High;
        auto flipped = c;
        for (auto& s : flipped.scores) s = 1.0 - s;
        CHECK(auc(c) + auc(flipped) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("roc curve endpoints and area") {
    const auto sep = roc_curve(cohort_of({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}));
    bool passes_ideal = false;
    for (const auto& p : sep) passes_ideal = passes_ideal || (p.fpr == 0.0 && p.tpr == 1.0);
    CHECK(passes_ideal);
    CHECK(sep.front().fpr == 0.0);
    CHECK(sep.front().tpr == 0.0);
    CHECK(sep.back().fpr == 1.0);
    CHECK(sep.back().tpr == 1.0);

    const auto ties = roc_curve(cohort_of({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}));
    CHECK(ties.size() == 2);
    CHECK(trapezoid_area(ties) == 0.5);
}

TEST_CASE("roc trapezoid area equals pairwise auc") {
    Rng rng(34);
    for (int t = 0; t < 100; ++t) {
        const auto c = random_cohort(rng, 20);
        CHECK(std::abs(trapezoid_area(roc_curve(c)) - auc(c)) < 1e-12);
        // fpr/tpr nondecreasing
        const auto curve = roc_curve(c);
        for (std::size_t i = 1; i < curve.size(); ++i) {
            CHECK(curve[i].fpr >= curve[i - 1].fpr);
            CHECK(curve[i].tpr >= curve[i - 1].tpr);
        }
    }
}

TEST_CASE("bootstrap on a perfectly separated cohort pins the interval at 1") {
    const auto c = cohort_of({0.1, 0.15, 0.2, 0.9, 0.95, 0.97}, {0, 0, 0, 1, 1, 1});
    const auto ci = bootstrap_ci(c, 500, 0.95, 42);
    CHECK(ci.lo == 1.0);
    CHECK(ci.hi == 1.0);
    CHECK(ci.point == 1.0);
}

TEST_CASE("bootstrap interval is ordered and deterministic per seed") {
    Rng rng(35);
    auto c = random_cohort(rng, 30);
    const auto a = bootstrap_ci(c, 400, 0.95, 9);
    const auto b = bootstrap_ci(c, 400, 0.95, 9);
    CHECK(a.lo <= a.hi);
    CHECK(a.lo == b.lo);
    CHECK(a.hi == b.hi);
}

TEST_CASE("r_squared pinned values") {
    const std::vector<double> t1 = {1.0, 2.0, 3.0};
    CHECK(r_squared(t1, t1) == 1.0);
    const std::vector<double> mean_pred = {2.0, 2.0, 2.0};
    CHECK(r_squared(t1, mean_pred) == 0.0);
    const std::vector<double> t2 = {0.0, 1.0, 2.0};
    const std::vector<double> p2 = {0.0, 0.0, 2.0};
    CHECK(r_squared(t2, p2) == 0.5);
    const std::vector<double> flat = {3.0, 3.0};
    const std::vector<double> off = {1.0, 7.0};
    CHECK(r_squared(flat, off) == 0.0);  // zero-variance targets
    CHECK_THROWS_AS(r_squared(t1, flat), IntegrityError);
}

TEST_CASE("mann-whitney pinned example is exactly one third") {
    const std::vector<double> a = {1.0, 2.0};
    const std::vector<double> b = {3.0, 4.0};
    const auto res = compare_models(a, b, 1);
    CHECK(res.exact);
    CHECK(res.u == 0.0);
    CHECK(res.p_raw == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const auto adj = compare_models(a, b, 3);
    CHECK(adj.p_adjusted == 1.0);  // 3 * (1/3) capped at 1
}

TEST_CASE("identical replicate vectors give u = nm/2 and p = 1") {
    const std::vector<double> a = {0.8, 0.8, 0.8, 0.8};
    const auto res = compare_models(a, a, 3);
    CHECK(res.u == 8.0);
    CHECK(res.p_raw == 1.0);
    CHECK(res.p_adjusted == 1.0);
}

TEST_CASE("bonferroni adjustment is monotone and capped") {
    Rng rng(36);
    std::vector<double> a(8), b(8);
    for (int t = 0; t < 30; ++t) {
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal(0.4, 1.0);
        const auto one = compare_models(a, b, 1);
        const auto three = compare_models(a, b, 3);
        CHECK(three.p_adjusted >= one.p_adjusted);
        CHECK(three.p_adjusted <= 1.0);
        CHECK(three.p_adjusted == doctest::Approx(std::min(1.0, one.p_raw * 3.0)));
    }
}

TEST_CASE("exact and normal paths agree within 0.02 at n=m=6 and 8") {
    Rng rng(37);
    for (std::size_t half : {std::size_t{6}, std::size_t{8}}) {
        for (int t = 0; t < 40; ++t) {
            std::vector<double> a(half), b(half);
            for (auto& v : a) v = rng.normal();
            for (auto& v : b) v = rng.normal(0.8, 1.0);
            const double pe = mann_whitney_exact_p(a, b);
            const double pn = mann_whitney_normal_p(a, b);
            CHECK(std::abs(pe - pn) <= 0.02);
        }
    }
}

TEST_CASE("youden threshold and confusion counts") {
    const auto c = cohort_of({0.1, 0.3, 0.6, 0.9}, {0, 0, 1, 1});
    const double t = youden_threshold(c);
    CHECK(t == 0.6);  // first maximum of tpr - fpr
    const auto conf = confusion_at(c, t);
    CHECK(conf.tp == 2);
    CHECK(conf.tn == 2);
    CHECK(conf.fp == 0);
    CHECK(conf.fn == 0);
}
