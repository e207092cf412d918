#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "odhn/aggrformer.hpp"
#include "odhn/clinreg.hpp"
#include "odhn/config.hpp"
#include "odhn/corpus.hpp"
#include "odhn/fusion.hpp"
#include "odhn/slide_bundle.hpp"
#include "odhn/stats.hpp"

namespace odhn {
namespace pipeline {

inline constexpr const char* kVersion = "0.1.0";

std::uint64_t fnv1a64(const std::string& s);

// Region sampling and patch extraction for every slide in the given
// partitions. Slides whose bundle path ends in .csv are patch-only datasets
// reconstructed via clustering; padded slots carry ignore flags.
std::vector<SlideSample> build_slide_samples(const CohortManifest& cohort,
                                             const std::vector<PartitionTag>& tags,
                                             const PipelineConfig& cfg);

struct SlideScore {
    std::string slide_id;
    std::string patient_id;
    double probability = 0.0;
    double score_estimate = 0.0;
};

std::vector<SlideScore> score_slides(const ImageModel& model, const std::vector<SlideSample>& samples,
                                     int threads = 1);

// Slide scores averaged per patient and joined with the clinical branch.
struct PatientScores {
    std::vector<std::string> patient_ids;
    std::vector<double> image;           // mean slide probability
    std::vector<double> score_estimate;  // mean regression estimate
    std::vector<double> clinical;
    std::vector<RiskCategory> labels;
    std::vector<int> true_scores;  // oncotype, -1 when absent
};
PatientScores patient_scores(const CohortManifest& cohort, const std::vector<SlideScore>& slides,
                             const clin::LogisticModel* clinical_model);

std::vector<clin::LabeledRecord> labeled_records(const CohortManifest& cohort, PartitionTag tag);

// One model's evaluation against a scored cohort.
struct ModelEval {
    double auc = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    std::vector<stats::RocPoint> roc;
    std::vector<double> replicates;
    double threshold = 0.5;  // operating threshold used for the confusion counts
    stats::ConfusionCounts confusion;
};
ModelEval evaluate_model(const stats::ScoredCohort& cohort, double threshold,
                         std::int64_t bootstrap_iterations, double level, std::uint64_t seed);

// Full three-model report for one test cohort.
nlohmann::json evaluation_report(const std::string& cohort_name, const PatientScores& scores,
                                 const fuse::FusionModel& fusion, const PipelineConfig& cfg,
                                 std::vector<std::pair<std::string, ModelEval>>* evals_out = nullptr);

std::string roc_csv(const std::vector<stats::RocPoint>& curve);
std::string roc_svg(const std::vector<std::tuple<std::string, std::vector<stats::RocPoint>, double>>& curves);

// Blue-to-red attention overlay, alpha-blended onto the downsampled slide.
// Weights are min-max normalized across the whole slide; constant maps to
// 0.5. Unsampled areas stay untinted.
ImageRGB render_heatmap(const SlideBundle& bundle, const std::vector<AttentionMapData>& attentions,
                        std::int64_t patch_side, double alpha = 0.45, std::int64_t max_side = 2048);

}  // namespace pipeline
}  // namespace odhn
