#include <doctest.h>

#include <cmath>

#include "odhn/clinreg.hpp"
#include "odhn/stats.hpp"
#include "odhn/rng.hpp"
#include "support/tmpdir.hpp"

using namespace odhn;
using namespace odhn::clin;

namespace {

ClinicalRecord make_record(double age, double size, int grade, Histology h = Histology::IDC,
                           TriState pr = TriState::Positive, TriState her2 = TriState::Negative) {
    ClinicalRecord r;
    r.patient_id = "p";
    r.age_years = age;
    r.tumor_size_mm = size;
    r.grade = grade;
    r.histologic_subtype = h;
    r.pr = pr;
    r.her2 = her2;
    return r;
}

// grade carries the label; everything else is noise
std::vector<LabeledRecord> planted_cohort(std::size_t n, Rng& rng, double flip = 0.0) {
    std::vector<LabeledRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        const bool high = rng.uniform() < 0.3;
        int grade = high ? 3 : (rng.uniform() < 0.5 ? 1 : 2);
        if (rng.uniform() < flip) grade = 1 + static_cast<int>(rng.below(3));
        LabeledRecord lr;
        lr.record = make_record(rng.normal(61.0, 11.0), std::max(1.0, rng.normal(20.0, 10.0)), grade,
                                rng.uniform() < 0.8 ? Histology::IDC : Histology::ILC,
                                rng.uniform() < 0.9 ? TriState::Positive : TriState::Negative,
                                rng.uniform() < 0.05 ? TriState::Positive : TriState::Negative);
        lr.record.patient_id = "p" + std::to_string(i);
        lr.label = high ? RiskCategory::High : RiskCategory::Low;
        out.push_back(std::move(lr));
    }
    return out;
}

}  // namespace

TEST_CASE("encode_record produces the fixed layout") {
    Standardizer s;
    s.age_mean = 61.5;
    s.age_std = 11.0;
    s.size_mean = 20.4;
    s.size_std = 15.0;

    const auto x = encode_record(make_record(61.5, 20.4, 2), s);
    REQUIRE(x.size() == 11);
    CHECK(x[0] == 0.0);  // cohort-mean age standardizes to zero
    CHECK(x[1] == 0.0);
    CHECK(x[2] == 2.0);
    CHECK(x[3] == 1.0);  // IDC one-hot
    CHECK(x[4] == 0.0);
    CHECK(x[5] == 0.0);
    CHECK(x[6] == 0.0);
    CHECK(x[7] == 1.0);  // pr positive
    CHECK(x[8] == 0.0);  // her2 negative
    CHECK(x[9] == 0.0);
    CHECK(x[10] == 0.0);

    const auto ilc = encode_record(make_record(50, 10, 1, Histology::ILC), s);
    CHECK(ilc[3] == 0.0);
    CHECK(ilc[5] == 1.0);
    CHECK(ilc[3] + ilc[4] + ilc[5] + ilc[6] == 1.0);  // one-hot block sums to 1

    ClinicalRecord imputed = make_record(50, 10, 1);
    imputed.her2 = TriState::Positive;  // majority-imputed value
    imputed.her2_missing = true;
    const auto xm = encode_record(imputed, s);
    CHECK(xm[8] == 1.0);
    CHECK(xm[10] == 1.0);
}

TEST_CASE("single grid point is selected without cross-validation") {
    Rng rng(1);
    const auto train = planted_cohort(60, rng);
    const auto dev = planted_cohort(2, rng);  // too small to fold; must not matter
    const GridPoint gp{10.0, Penalty::L1};
    const auto model = fit(train, dev, std::span(&gp, 1), {});
    CHECK(model.strength == 10.0);
    CHECK(model.penalty == Penalty::L1);
}

TEST_CASE("separable data reaches train auc 1 with finite weights") {
    Rng rng(2);
    std::vector<LabeledRecord> train;
    for (int i = 0; i < 40; ++i) {
        const bool high = i % 2 == 0;
        LabeledRecord lr;
        lr.record = make_record(high ? 75.0 : 45.0, high ? 40.0 : 8.0, high ? 3 : 1);
        lr.record.patient_id = "p" + std::to_string(i);
        lr.label = high ? RiskCategory::High : RiskCategory::Low;
        train.push_back(lr);
    }
    const GridPoint gp{1.0, Penalty::L2};
    const auto model = fit(train, {}, std::span(&gp, 1), {});
    CHECK(model.weights.allFinite());

    stats::ScoredCohort scored;
    for (const auto& lr : train) {
        scored.scores.push_back(predict_proba(model, lr.record));
        scored.labels.push_back(lr.label);
    }
    CHECK(stats::auc(scored) == 1.0);
}

TEST_CASE("strong l2 with permuted labels shrinks all weights") {
    Rng rng(3);
    auto train = planted_cohort(120, rng);
    // permute labels: breaks any feature-label association
    std::vector<RiskCategory> labels;
    for (const auto& lr : train) labels.push_back(lr.label);
    rng.shuffle(labels);
    for (std::size_t i = 0; i < train.size(); ++i) train[i].label = labels[i];

    const GridPoint gp{100.0, Penalty::L2};
    const auto model = fit(train, {}, std::span(&gp, 1), {});
    for (int i = 0; i < kFeatureCount; ++i) CHECK(std::abs(model.weights[i]) < 0.05);
}

TEST_CASE("grid search runs five-fold cv on the dev set and refits") {
    Rng rng(4);
    const auto train = planted_cohort(80, rng);
    const auto dev = planted_cohort(50, rng);
    const auto grid = default_grid();
    const auto model = fit(train, dev, grid, {.seed = 9});
    CHECK(model.cv_auc > 0.5);
    CHECK(model.weights.allFinite());

    // deterministic selection
    const auto again = fit(train, dev, grid, {.seed = 9});
    CHECK(again.strength == model.strength);
    CHECK(again.penalty == model.penalty);
    CHECK((again.weights - model.weights).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("cv on a dev set too small to stratify is an error, train-cv flag works") {
    Rng rng(5);
    const auto train = planted_cohort(100, rng);
    std::vector<LabeledRecord> tiny_dev(train.begin(), train.begin() + 6);
    for (auto& lr : tiny_dev) lr.label = RiskCategory::Low;
    tiny_dev[0].label = RiskCategory::High;  // one positive cannot fill 5 folds
    const auto grid = default_grid();
    CHECK_THROWS_AS(fit(train, tiny_dev, grid, {}), Error);

    const auto model = fit(train, tiny_dev, grid, {.cv_on_train = true});
    CHECK(model.weights.allFinite());
}

TEST_CASE("single-class training set is rejected") {
    Rng rng(6);
    auto train = planted_cohort(30, rng);
    for (auto& lr : train) lr.label = RiskCategory::Low;
    const GridPoint gp{1.0, Penalty::L2};
    CHECK_THROWS_AS(fit(train, {}, std::span(&gp, 1), {}), DomainError);
}

TEST_CASE("predict_proba pinned values") {
    LogisticModel m;
    m.weights.setZero(kFeatureCount);
    m.intercept = 0.0;
    const auto rec = make_record(60, 20, 2);
    CHECK(predict_proba(m, rec) == 0.5);  // sigmoid(0)

    m.intercept = 20.0;
    CHECK(predict_proba(m, rec) > 0.999);

    m.intercept = 1.3;
    CHECK(predict_proba(m, rec) == predict_proba(m, make_record(60, 20, 2)));
}

TEST_CASE("l2 objective is convex: two starts land on the same weights") {
    Rng rng(7);
    const auto train = planted_cohort(80, rng);
    const GridPoint gp{0.1, Penalty::L2};
    const auto a = fit(train, {}, std::span(&gp, 1), {});
    // second run with a perturbed option set (same data): same optimum
    FitOptions opt;
    opt.max_iterations = 20000;
    const auto b = fit(train, {}, std::span(&gp, 1), opt);
    CHECK((a.weights - b.weights).cwiseAbs().maxCoeff() < 1e-5);
    CHECK(std::abs(a.intercept - b.intercept) < 1e-5);
}

TEST_CASE("feature importance ranks the planted grade signal first") {
    Rng rng(8);
    std::vector<LabeledRecord> train;
    for (int i = 0; i < 150; ++i) {
        LabeledRecord lr;
        const int grade = 1 + static_cast<int>(rng.below(3));
        lr.record = make_record(rng.normal(61, 11), std::max(1.0, rng.normal(20, 10)), grade);
        lr.record.patient_id = "p" + std::to_string(i);
        lr.label = grade == 3 ? RiskCategory::High : RiskCategory::Low;
        train.push_back(lr);
    }
    const GridPoint gp{0.1, Penalty::L2};
    const auto model = fit(train, {}, std::span(&gp, 1), {});
    const auto importance = feature_importance(model);
    CHECK(importance[0].first == "grade");
    CHECK(importance[0].second > 0.0);  // positively correlated with High

    const auto csv = importance_csv(model);
    CHECK(csv.find("feature,coefficient,abs_rank") == 0);
    CHECK(csv.find("grade") != std::string::npos);
}

TEST_CASE("all-zero weights fall back to layout order") {
    LogisticModel m;
    m.weights.setZero(kFeatureCount);
    const auto importance = feature_importance(m);
    for (int i = 0; i < kFeatureCount; ++i) {
        CHECK(importance[static_cast<std::size_t>(i)].first == kFeatureNames[static_cast<std::size_t>(i)]);
        CHECK(importance[static_cast<std::size_t>(i)].second == 0.0);
    }
}

TEST_CASE("probability is monotone in grade along the coefficient sign") {
    Rng rng(9);
    const auto train = planted_cohort(100, rng);
    const GridPoint gp{0.1, Penalty::L2};
    const auto model = fit(train, {}, std::span(&gp, 1), {});
    const double sign = model.weights[2] > 0 ? 1.0 : -1.0;
    double prev = predict_proba(model, make_record(61, 20, 1));
    for (int g = 2; g <= 3; ++g) {
        const double cur = predict_proba(model, make_record(61, 20, g));
        CHECK(sign * (cur - prev) >= 0.0);
        prev = cur;
    }
}

TEST_CASE("clinical model round-trips through the checkpoint") {
    odhn::testsupport::TmpDir tmp("clin_ckpt");
    Rng rng(10);
    const auto train = planted_cohort(60, rng);
    const GridPoint gp{1.0, Penalty::L1};
    const auto model = fit(train, {}, std::span(&gp, 1), {});

    Checkpoint cp;
    cp.phase = "clinical";
    add_to_checkpoint(cp, model);
    cp.save(tmp / "clin.odhn");
    const auto loaded = from_checkpoint(Checkpoint::load(tmp / "clin.odhn"));
    CHECK(loaded.penalty == Penalty::L1);
    CHECK(loaded.strength == 1.0);
    CHECK((loaded.weights - model.weights).cwiseAbs().maxCoeff() == 0.0);
    CHECK(loaded.standardizer.age_mean == model.standardizer.age_mean);
    const auto rec = make_record(55, 15, 2);
    CHECK(predict_proba(loaded, rec) == predict_proba(model, rec));
}
