#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "odhn/error.hpp"

namespace odhn {

enum class TriState { Positive, Negative, Missing };
enum class Histology { IDC, IDC_ILC, ILC, OTHER };
enum class RiskCategory { Low, High };
enum class PartitionTag { None, Train, Dev, Test, External };

std::string to_string(TriState v);
std::string to_string(Histology v);
std::string to_string(RiskCategory v);
std::string to_string(PartitionTag v);

// One patient's clinicopathologic features (Table 1 layout). After ingestion
// pr/her2 hold the imputed value; *_missing remembers the original token.
struct ClinicalRecord {
    std::string patient_id;
    double age_years = 0.0;
    double tumor_size_mm = 0.0;
    int grade = 0;  // 1..3
    Histology histologic_subtype = Histology::IDC;
    TriState er = TriState::Positive;
    TriState pr = TriState::Positive;
    TriState her2 = TriState::Negative;
    bool pr_missing = false;
    bool her2_missing = false;
    std::optional<int> oncotype_score;  // 0..100
};

struct SlideEntry {
    std::string slide_id;
    std::string patient_id;
    std::filesystem::path bundle_path;
    PartitionTag partition = PartitionTag::None;
};

// Cohort of clinical records joined with their slides. Slides of one patient
// always share a partition tag.
struct CohortManifest {
    std::map<std::string, ClinicalRecord> records;  // keyed by patient_id
    std::vector<SlideEntry> entries;

    const ClinicalRecord& record(const std::string& patient_id) const;
    std::vector<std::string> patient_ids() const;  // in first-appearance order of entries
    std::optional<RiskCategory> label(const std::string& patient_id) const;
};

// Low for scores 0-25, High for 26-100.
RiskCategory categorize(int score);

// Reads the clinical CSV and slide manifest; excludes ER-negative patients,
// imputes missing PR/HER2 to the cohort majority and keeps the missing flag.
CohortManifest ingest(const std::filesystem::path& clinical_csv_path,
                      const std::filesystem::path& manifest_path);

// Writes the two ingest inputs back out (original missing tokens preserved,
// so ingest(serialize(ingest(x))) is a fixpoint).
void serialize(const CohortManifest& cohort, const std::filesystem::path& clinical_csv_path,
               const std::filesystem::path& manifest_path);

struct PartitionRatios {
    double train = 0.70;
    double dev = 0.10;
    double test = 0.20;
};

// Patient-level stratified partition by risk category with largest-remainder
// rounding per stratum; patients already tagged External are left untouched.
CohortManifest partition(const CohortManifest& manifest, const PartitionRatios& ratios,
                         std::uint64_t seed);

}  // namespace odhn
