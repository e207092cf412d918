#pragma once

#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "odhn/corpus.hpp"
#include "odhn/stats.hpp"

namespace odhn {
namespace fuse {

// Convex combination of the two branch scores plus operating thresholds.
struct FusionModel {
    double w = 0.0;       // image-branch weight, fused = w*img + (1-w)*clin
    double t_star = 0.5;  // Youden-optimal threshold on the fused dev scores
    double t_img = 0.5;   // per-branch reference thresholds, reported only
    double t_clin = 0.5;
    double dev_auc = 0.0;
};

// Sweeps w over {0, 1/(grid-1), ..., 1} maximizing dev AUC; ties keep the
// smallest w, so the fused dev AUC can never fall below either branch.
FusionModel fit_fusion(std::span<const double> dev_img_scores,
                       std::span<const double> dev_clin_scores,
                       std::span<const RiskCategory> dev_labels, int grid = 101);

std::pair<double, RiskCategory> fuse_predict(const FusionModel& model, double img_score,
                                             double clin_score);

std::string to_json(const FusionModel& model);
FusionModel from_json(const std::string& text);
void save(const FusionModel& model, const std::filesystem::path& path);
FusionModel load(const std::filesystem::path& path);

}  // namespace fuse
}  // namespace odhn
