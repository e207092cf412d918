#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "odhn/corpus.hpp"

namespace odhn {
namespace synth {

// Planted-signal cohort: blob density in the slide image tracks the latent
// recurrence score, and tumor grade carries the clinical signal.
struct SynthConfig {
    std::size_t n_patients = 120;
    int slides_per_patient = 1;
    std::int64_t slide_side = 384;
    std::int64_t tile_size = 128;
    std::int64_t margin = 32;  // white border around the tissue field

    double score_mean = 18.5;  // published cohort marginals
    double score_sd = 11.7;
    double high_risk_fraction = 0.168;

    double blob_base = 1.0;    // blobs per unit area at score 0
    double blob_slope = 0.25;  // blobs per unit area per score point
    std::int64_t unit_area_side = 64;

    double clinical_beta = 3.0;  // grade log-odds per 10 score points

    std::size_t er_negative_count = 0;  // optional rows exercising exclusion
    std::uint64_t seed = 0;
};

struct SynthPatient {
    std::string patient_id;
    int score = 0;
    RiskCategory label = RiskCategory::Low;
    int grade = 0;
    std::vector<std::string> slide_ids;
    std::vector<std::int64_t> blob_counts;  // per slide
};

struct SynthResult {
    std::filesystem::path clinical_csv;
    std::filesystem::path manifest;
    std::filesystem::path labels_csv;
    std::filesystem::path bundles_dir;
    std::vector<SynthPatient> patients;
};

// Writes clinical.csv, manifest.csv, labels.csv and one slide bundle per
// slide under out_dir; bitwise deterministic per seed.
SynthResult generate(const SynthConfig& config, const std::filesystem::path& out_dir);

}  // namespace synth
}  // namespace odhn
