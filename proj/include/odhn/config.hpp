#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "odhn/aggrformer.hpp"
#include "odhn/corpus.hpp"
#include "odhn/patchnet.hpp"
#include "odhn/synthgen.hpp"

namespace odhn {

// TOML-style key/value text: [section] headers, key = value lines, # comments.
// Values keep their raw text; typed getters validate and name the field.
class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& text, const std::string& origin = "<config>");
    static KeyValueConfig parse_file(const std::filesystem::path& path);

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    const std::map<std::string, std::string>& values() const { return values_; }
    nlohmann::json echo() const;  // verbatim key -> value map

private:
    std::map<std::string, std::string> values_;
    std::string origin_;
};

// Everything a pipeline run needs, echoed verbatim into checkpoints and
// reports.
struct PipelineConfig {
    std::filesystem::path cohort_dir;
    std::filesystem::path output_dir = "out";

    PatchNetConfig encoder;
    AggrConfig aggregator;
    std::int64_t region_count = 50;
    std::int64_t region_side = 4480;
    double min_tissue = 0.25;
    std::uint64_t sampling_seed = 0;

    std::int64_t pretrain_steps = 500;
    std::int64_t regression_steps = 300;
    std::int64_t classifier_steps = 200;
    std::int64_t batch_regions = 8;
    std::int64_t batch_slides = 2;
    double pretrain_lr = 1e-3;
    double finetune_lr = 3e-3;
    std::int64_t head_warmup_steps = 300;
    double head_warmup_lr = 5e-2;
    std::uint64_t train_seed = 1;
    bool freeze_encoder = false;

    PartitionRatios ratios;
    std::uint64_t partition_seed = 7;

    int cv_folds = 5;
    bool cv_on_train = false;
    std::uint64_t clinical_seed = 3;

    std::int64_t bootstrap_iterations = 10000;
    double ci_level = 0.95;
    std::int64_t m_comparisons = 3;
    std::uint64_t eval_seed = 11;

    int fusion_grid = 101;

    std::int64_t heatmap_max_side = 2048;
    double heatmap_alpha = 0.45;

    synth::SynthConfig synth;

    int threads = 1;
    nlohmann::json echo;

    static PipelineConfig from_file(const std::filesystem::path& path);
    static PipelineConfig from_kv(const KeyValueConfig& kv);
};

}  // namespace odhn
