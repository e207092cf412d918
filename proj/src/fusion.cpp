#include "odhn/fusion.hpp"

#include <json.hpp>

#include "odhn/image.hpp"

namespace odhn {
namespace fuse {

using nlohmann::json;

FusionModel fit_fusion(std::span<const double> dev_img_scores,
                       std::span<const double> dev_clin_scores,
                       std::span<const RiskCategory> dev_labels, int grid) {
    const std::size_t n = dev_labels.size();
    if (dev_img_scores.size() != n || dev_clin_scores.size() != n)
        throw IntegrityError("fit_fusion: score vectors not aligned with labels");
    if (grid < 2) throw ConfigError("fit_fusion: grid must have at least two points");
    for (std::size_t i = 0; i < n; ++i)
        if (dev_img_scores[i] < 0.0 || dev_img_scores[i] > 1.0 || dev_clin_scores[i] < 0.0 ||
            dev_clin_scores[i] > 1.0)
            throw DomainError("fit_fusion: branch scores must lie in [0,1]");

    stats::ScoredCohort fused;
    fused.labels.assign(dev_labels.begin(), dev_labels.end());
    fused.scores.resize(n);

    FusionModel model;
    bool first = true;
    for (int k = 0; k < grid; ++k) {
        const double w = static_cast<double>(k) / static_cast<double>(grid - 1);
        for (std::size_t i = 0; i < n; ++i)
            fused.scores[i] = w * dev_img_scores[i] + (1.0 - w) * dev_clin_scores[i];
        const double a = stats::auc(fused);  // also rejects single-class dev sets
        if (first || a > model.dev_auc) {    // strict: ties keep the smallest w
            model.w = w;
            model.dev_auc = a;
            first = false;
        }
    }

    for (std::size_t i = 0; i < n; ++i)
        fused.scores[i] = model.w * dev_img_scores[i] + (1.0 - model.w) * dev_clin_scores[i];
    model.t_star = stats::youden_threshold(fused);

    stats::ScoredCohort branch;
    branch.labels = fused.labels;
    branch.scores.assign(dev_img_scores.begin(), dev_img_scores.end());
    model.t_img = stats::youden_threshold(branch);
    branch.scores.assign(dev_clin_scores.begin(), dev_clin_scores.end());
    model.t_clin = stats::youden_threshold(branch);
    return model;
}

std::pair<double, RiskCategory> fuse_predict(const FusionModel& model, double img_score,
                                             double clin_score) {
    if (img_score < 0.0 || img_score > 1.0 || clin_score < 0.0 || clin_score > 1.0)
        throw DomainError("fuse_predict: branch scores must lie in [0,1]");
    const double fused = model.w * img_score + (1.0 - model.w) * clin_score;
    return {fused, fused >= model.t_star ? RiskCategory::High : RiskCategory::Low};
}

std::string to_json(const FusionModel& model) {
    json j;
    j["w"] = model.w;
    j["t_star"] = model.t_star;
    j["t_img"] = model.t_img;
    j["t_clin"] = model.t_clin;
    j["dev_auc"] = model.dev_auc;
    return j.dump(2) + "\n";
}

FusionModel from_json(const std::string& text) {
    const json j = json::parse(text);
    FusionModel m;
    m.w = j.at("w").get<double>();
    m.t_star = j.at("t_star").get<double>();
    m.t_img = j.at("t_img").get<double>();
    m.t_clin = j.at("t_clin").get<double>();
    m.dev_auc = j.at("dev_auc").get<double>();
    return m;
}

void save(const FusionModel& model, const std::filesystem::path& path) {
    atomic_write_file(path, to_json(model));
}

FusionModel load(const std::filesystem::path& path) { return from_json(read_file_text(path)); }

}  // namespace fuse
}  // namespace odhn
