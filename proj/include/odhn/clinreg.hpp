#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "odhn/checkpoint.hpp"
#include "odhn/corpus.hpp"

namespace odhn {
namespace clin {

inline constexpr int kFeatureCount = 11;

// Fixed design-matrix layout. ER is omitted: the ingested cohort is
// ER-positive only.
extern const std::array<const char*, kFeatureCount> kFeatureNames;

enum class Penalty { L1, L2 };
std::string to_string(Penalty p);

// Training-set means/stds for the two continuous features.
struct Standardizer {
    double age_mean = 0.0, age_std = 1.0;
    double size_mean = 0.0, size_std = 1.0;
};

struct LogisticModel {
    Eigen::VectorXd weights{kFeatureCount};
    double intercept = 0.0;
    Standardizer standardizer;
    double strength = 1.0;
    Penalty penalty = Penalty::L2;
    double cv_auc = 0.0;  // mean CV AUC of the selected grid point
};

struct LabeledRecord {
    ClinicalRecord record;
    RiskCategory label = RiskCategory::Low;
};

struct GridPoint {
    double strength = 1.0;
    Penalty penalty = Penalty::L2;
};

std::vector<GridPoint> default_grid();  // {0.01,0.1,1,10,100} x {L1,L2}

struct FitOptions {
    int cv_folds = 5;
    bool cv_on_train = false;  // CV runs on the development set by default
    std::uint64_t seed = 0;
    int max_iterations = 10000;
    double tolerance = 1e-8;  // infinity norm of the (proximal) gradient
};

Standardizer fit_standardizer(std::span<const LabeledRecord> train);

// [age_z, size_z, grade, histology one-hot(4), pr_pos, her2_pos,
//  pr_missing, her2_missing]
Eigen::VectorXd encode_record(const ClinicalRecord& record, const Standardizer& standardizer);

// Grid search with stratified k-fold CV maximizing AUC; the winner is refit
// on train + dev. Ties prefer larger regularization, then L2.
LogisticModel fit(std::span<const LabeledRecord> train, std::span<const LabeledRecord> dev,
                  std::span<const GridPoint> grid, const FitOptions& options = {});

double predict_proba(const LogisticModel& model, const ClinicalRecord& record);

// (name, signed coefficient) sorted by |coefficient| descending, layout order
// breaking ties.
std::vector<std::pair<std::string, double>> feature_importance(const LogisticModel& model);
std::string importance_csv(const LogisticModel& model);  // feature,coefficient,abs_rank

void add_to_checkpoint(Checkpoint& cp, const LogisticModel& model);
LogisticModel from_checkpoint(const Checkpoint& cp);

}  // namespace clin
}  // namespace odhn
