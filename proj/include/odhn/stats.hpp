#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "odhn/corpus.hpp"

namespace odhn {
namespace stats {

// Aligned per-patient scores and labels; both classes must be present for
// any of the AUC operations.
struct ScoredCohort {
    std::vector<std::string> patient_ids;
    std::vector<double> scores;
    std::vector<RiskCategory> labels;

    std::size_t size() const { return scores.size(); }
    void validate() const;  // unique ids, aligned lengths
};

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
};

struct BootstrapCi {
    double lo = 0.0;
    double hi = 0.0;
    double point = 0.0;
};

struct MannWhitneyResult {
    double u = 0.0;  // U statistic of the first sample
    double p_raw = 1.0;
    double p_adjusted = 1.0;
    bool exact = false;
};

// Arithmetic mean of slide scores per patient, first-appearance order.
std::vector<std::pair<std::string, double>> aggregate_patient(
    const std::vector<std::pair<std::string, double>>& slide_scores);

// P(random High outranks random Low), ties counted half. Rank-based; agrees
// exactly with the brute-force pairwise count.
double auc(const ScoredCohort& cohort);

// Points at every distinct score threshold plus the (0,0) endpoint; the
// trapezoid area equals auc() to within 1e-12.
std::vector<RocPoint> roc_curve(const ScoredCohort& cohort);
double trapezoid_area(const std::vector<RocPoint>& curve);

// Patient-level bootstrap percentile CI; single-class replicates are redrawn
// (up to 100 retries each). Replicate r uses seed + r.
BootstrapCi bootstrap_ci(const ScoredCohort& cohort, std::size_t iterations = 10000,
                         double level = 0.95, std::uint64_t seed = 0);

// The raw replicate AUCs behind bootstrap_ci, for model comparison.
std::vector<double> bootstrap_replicates(const ScoredCohort& cohort, std::size_t iterations,
                                         std::uint64_t seed);

// 1 - SS_res/SS_tot, and 0 when the targets have zero variance.
double r_squared(std::span<const double> targets, std::span<const double> predictions);

// Two-sided Mann-Whitney U with tie correction: exact enumeration when
// n + m <= 12, otherwise normal approximation with continuity correction.
// p_adjusted = min(1, p_raw * m_comparisons).
MannWhitneyResult compare_models(std::span<const double> replicates_a,
                                 std::span<const double> replicates_b, std::size_t m_comparisons = 3);

// Both p-value routes, independently callable (n + m <= 24 for the exact one).
double mann_whitney_u(std::span<const double> a, std::span<const double> b);
double mann_whitney_exact_p(std::span<const double> a, std::span<const double> b);
double mann_whitney_normal_p(std::span<const double> a, std::span<const double> b);

// Youden-optimal threshold (max tpr - fpr; first maximum along the curve).
double youden_threshold(const ScoredCohort& cohort);

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};
ConfusionCounts confusion_at(const ScoredCohort& cohort, double threshold);  // High iff score >= t

}  // namespace stats
}  // namespace odhn
