#include "odhn/config.hpp"

#include <charconv>

#include "odhn/image.hpp"

namespace odhn {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
    KeyValueConfig cfg;
    cfg.origin_ = origin;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t end = text.find('\n', pos);
        std::string line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
        pos = end == std::string::npos ? text.size() + 1 : end + 1;
        ++line_no;

        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']')
                throw ParseError(origin + ":" + std::to_string(line_no) + ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ParseError(origin + ":" + std::to_string(line_no) + ": empty section name");
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(origin + ":" + std::to_string(line_no) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ParseError(origin + ":" + std::to_string(line_no) + ": empty key");
        if (value.size() >= 2 && ((value.front() == '"' && value.back() == '"') ||
                                  (value.front() == '\'' && value.back() == '\'')))
            value = value.substr(1, value.size() - 2);
        const std::string full = section.empty() ? key : section + "." + key;
        cfg.values_[full] = value;
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::parse_file(const std::filesystem::path& path) {
    return parse(read_file_text(path), path.string());
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    double v = 0.0;
    const auto res = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (res.ec != std::errc() || res.ptr != it->second.data() + it->second.size())
        throw ConfigError(origin_ + ": field " + key + " must be a number, got '" + it->second + "'");
    return v;
}

std::int64_t KeyValueConfig::get_int(const std::string& key, std::int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::int64_t v = 0;
    const auto res = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (res.ec != std::errc() || res.ptr != it->second.data() + it->second.size())
        throw ConfigError(origin_ + ": field " + key + " must be an integer, got '" + it->second + "'");
    return v;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw ConfigError(origin_ + ": field " + key + " must be true or false, got '" + it->second + "'");
}

nlohmann::json KeyValueConfig::echo() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
}

PipelineConfig PipelineConfig::from_file(const std::filesystem::path& path) {
    return from_kv(KeyValueConfig::parse_file(path));
}

PipelineConfig PipelineConfig::from_kv(const KeyValueConfig& kv) {
    PipelineConfig c;
    c.cohort_dir = kv.get_string("paths.cohort_dir", "cohort");
    c.output_dir = kv.get_string("paths.output_dir", "out");

    c.encoder.patch_side = static_cast<int>(kv.get_int("model.patch_side", 224));
    c.encoder.feature_dim = static_cast<int>(kv.get_int("model.feature_dim", 64));
    c.encoder.stem_channels = static_cast<int>(kv.get_int("model.stem_channels", 16));
    c.encoder.stages = static_cast<int>(kv.get_int("model.stages", 4));
    c.encoder.blocks_per_stage = static_cast<int>(kv.get_int("model.blocks_per_stage", 2));
    c.encoder.stem_stride = static_cast<int>(kv.get_int("model.stem_stride", 2));
    c.encoder.stem_pool = kv.get_bool("model.stem_pool", true);

    c.region_count = kv.get_int("model.region_count", 50);
    c.region_side = kv.get_int("model.region_side", 4480);
    c.min_tissue = kv.get_double("model.min_tissue", 0.25);
    c.sampling_seed = static_cast<std::uint64_t>(kv.get_int("model.sampling_seed", 0));

    c.aggregator.feature_dim = c.encoder.feature_dim;
    c.aggregator.hidden = static_cast<int>(kv.get_int("model.hidden", 128));
    c.aggregator.layers = static_cast<int>(kv.get_int("model.layers", 4));
    c.aggregator.heads = static_cast<int>(kv.get_int("model.heads", 4));
    c.aggregator.mlp_ratio = static_cast<int>(kv.get_int("model.mlp_ratio", 4));
    c.aggregator.mask_ratio = kv.get_double("model.mask_ratio", 0.5);
    if (c.region_side <= 0 || c.encoder.patch_side <= 0 || c.region_side % c.encoder.patch_side != 0)
        throw ConfigError("config: model.region_side must be a positive multiple of model.patch_side");
    c.aggregator.max_grid = static_cast<int>(c.region_side / c.encoder.patch_side);

    c.pretrain_steps = kv.get_int("train.pretrain_steps", 500);
    c.regression_steps = kv.get_int("train.regression_steps", 300);
    c.classifier_steps = kv.get_int("train.classifier_steps", 200);
    c.batch_regions = kv.get_int("train.batch_regions", 8);
    c.batch_slides = kv.get_int("train.batch_slides", 2);
    c.pretrain_lr = kv.get_double("train.pretrain_lr", 1e-3);
    c.finetune_lr = kv.get_double("train.finetune_lr", 3e-3);
    c.head_warmup_steps = kv.get_int("train.head_warmup_steps", 300);
    c.head_warmup_lr = kv.get_double("train.head_warmup_lr", 5e-2);
    c.train_seed = static_cast<std::uint64_t>(kv.get_int("train.seed", 1));
    c.freeze_encoder = kv.get_bool("train.freeze_encoder", false);

    c.ratios.train = kv.get_double("partition.train", 0.70);
    c.ratios.dev = kv.get_double("partition.dev", 0.10);
    c.ratios.test = kv.get_double("partition.test", 0.20);
    c.partition_seed = static_cast<std::uint64_t>(kv.get_int("partition.seed", 7));

    c.cv_folds = static_cast<int>(kv.get_int("clinical.cv_folds", 5));
    c.cv_on_train = kv.get_bool("clinical.cv_on_train", false);
    c.clinical_seed = static_cast<std::uint64_t>(kv.get_int("clinical.seed", 3));

    c.bootstrap_iterations = kv.get_int("evaluation.bootstrap_iterations", 10000);
    c.ci_level = kv.get_double("evaluation.level", 0.95);
    c.m_comparisons = kv.get_int("evaluation.m_comparisons", 3);
    c.eval_seed = static_cast<std::uint64_t>(kv.get_int("evaluation.seed", 11));

    c.fusion_grid = static_cast<int>(kv.get_int("fusion.grid", 101));

    c.heatmap_max_side = kv.get_int("heatmap.max_side", 2048);
    c.heatmap_alpha = kv.get_double("heatmap.alpha", 0.45);

    c.synth.n_patients = static_cast<std::size_t>(kv.get_int("synth.n_patients", 120));
    c.synth.slides_per_patient = static_cast<int>(kv.get_int("synth.slides_per_patient", 1));
    c.synth.slide_side = kv.get_int("synth.slide_side", 384);
    c.synth.tile_size = kv.get_int("synth.tile_size", 128);
    c.synth.margin = kv.get_int("synth.margin", 32);
    c.synth.blob_base = kv.get_double("synth.blob_base", 1.0);
    c.synth.blob_slope = kv.get_double("synth.blob_slope", 0.25);
    c.synth.unit_area_side = kv.get_int("synth.unit_area_side", 64);
    c.synth.clinical_beta = kv.get_double("synth.clinical_beta", 3.0);
    c.synth.high_risk_fraction = kv.get_double("synth.high_risk_fraction", 0.168);
    c.synth.er_negative_count = static_cast<std::size_t>(kv.get_int("synth.er_negative_count", 0));
    c.synth.seed = static_cast<std::uint64_t>(kv.get_int("synth.seed", 1));
    c.synth.score_mean = kv.get_double("synth.score_mean", 18.5);
    c.synth.score_sd = kv.get_double("synth.score_sd", 11.7);

    if (c.bootstrap_iterations < 1) throw ConfigError("config: evaluation.bootstrap_iterations must be positive");
    if (!(c.ci_level > 0.0 && c.ci_level < 1.0))
        throw ConfigError("config: evaluation.level must lie in (0,1)");
    if (c.fusion_grid < 2) throw ConfigError("config: fusion.grid must be at least 2");
    if (!(c.heatmap_alpha > 0.0 && c.heatmap_alpha <= 1.0))
        throw ConfigError("config: heatmap.alpha must lie in (0,1]");
    if (c.region_count < 1) throw ConfigError("config: model.region_count must be positive");

    c.echo = kv.echo();
    return c;
}

}  // namespace odhn
