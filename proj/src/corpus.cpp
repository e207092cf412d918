#include "odhn/corpus.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "odhn/image.hpp"
#include "odhn/rng.hpp"

namespace odhn {

namespace fs = std::filesystem;

std::string to_string(TriState v) {
    switch (v) {
        case TriState::Positive: return "pos";
        case TriState::Negative: return "neg";
        case TriState::Missing: return "missing";
    }
    return "?";
}

std::string to_string(Histology v) {
    switch (v) {
        case Histology::IDC: return "IDC";
        case Histology::IDC_ILC: return "IDC_ILC";
        case Histology::ILC: return "ILC";
        case Histology::OTHER: return "OTHER";
    }
    return "?";
}

std::string to_string(RiskCategory v) { return v == RiskCategory::Low ? "Low" : "High"; }

std::string to_string(PartitionTag v) {
    switch (v) {
        case PartitionTag::None: return "";
        case PartitionTag::Train: return "train";
        case PartitionTag::Dev: return "dev";
        case PartitionTag::Test: return "test";
        case PartitionTag::External: return "external";
    }
    return "?";
}

namespace {

std::vector<std::string> split_line(std::string line, char sep = ',') {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        const std::size_t next = line.find(sep, pos);
        if (next == std::string::npos) {
            out.push_back(line.substr(pos));
            break;
        }
        out.push_back(line.substr(pos, next - pos));
        pos = next + 1;
    }
    return out;
}

[[noreturn]] void row_error(const fs::path& file, std::size_t line_no, const std::string& what) {
    throw ParseError(file.string() + ":" + std::to_string(line_no) + ": " + what);
}

double parse_positive_real(const std::string& tok, const fs::path& file, std::size_t line_no,
                           const char* field) {
    double v = 0.0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size() || !(v > 0.0) || !std::isfinite(v))
        row_error(file, line_no, std::string(field) + " must be a positive real, got '" + tok + "'");
    return v;
}

TriState parse_tristate(const std::string& tok, const fs::path& file, std::size_t line_no,
                        const char* field) {
    if (tok == "pos") return TriState::Positive;
    if (tok == "neg") return TriState::Negative;
    if (tok == "missing") return TriState::Missing;
    row_error(file, line_no, std::string("unknown ") + field + " token '" + tok + "'");
}

Histology parse_histology(const std::string& tok, const fs::path& file, std::size_t line_no) {
    if (tok == "IDC") return Histology::IDC;
    if (tok == "IDC_ILC") return Histology::IDC_ILC;
    if (tok == "ILC") return Histology::ILC;
    if (tok == "OTHER") return Histology::OTHER;
    row_error(file, line_no, "unknown histologic_subtype token '" + tok + "'");
}

PartitionTag parse_partition(const std::string& tok, const fs::path& file, std::size_t line_no) {
    if (tok.empty()) return PartitionTag::None;
    if (tok == "train") return PartitionTag::Train;
    if (tok == "dev") return PartitionTag::Dev;
    if (tok == "test") return PartitionTag::Test;
    if (tok == "external") return PartitionTag::External;
    row_error(file, line_no, "unknown partition token '" + tok + "'");
}

std::string format_real(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

constexpr const char* kCsvHeader =
    "patient_id,age_years,tumor_size_mm,grade,histologic_subtype,er,pr,her2,oncotype_score";

}  // namespace

const ClinicalRecord& CohortManifest::record(const std::string& patient_id) const {
    auto it = records.find(patient_id);
    if (it == records.end()) throw IntegrityError("unknown patient_id " + patient_id);
    return it->second;
}

std::vector<std::string> CohortManifest::patient_ids() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& e : entries)
        if (seen.insert(e.patient_id).second) out.push_back(e.patient_id);
    return out;
}

std::optional<RiskCategory> CohortManifest::label(const std::string& patient_id) const {
    const auto& rec = record(patient_id);
    if (!rec.oncotype_score) return std::nullopt;
    return categorize(*rec.oncotype_score);
}

RiskCategory categorize(int score) {
    if (score < 0 || score > 100)
        throw DomainError("categorize: score " + std::to_string(score) + " outside [0,100]");
    return score < 26 ? RiskCategory::Low : RiskCategory::High;
}

CohortManifest ingest(const fs::path& clinical_csv_path, const fs::path& manifest_path) {
    std::ifstream csv(clinical_csv_path);
    if (!csv) throw IoError("cannot open " + clinical_csv_path.string());

    std::string line;
    if (!std::getline(csv, line)) throw ParseError(clinical_csv_path.string() + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kCsvHeader)
        throw ParseError(clinical_csv_path.string() + ":1: header mismatch, expected '" +
                         std::string(kCsvHeader) + "'");

    std::map<std::string, ClinicalRecord> parsed;
    std::size_t line_no = 1;
    while (std::getline(csv, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto f = split_line(line);
        if (f.size() != 9)
            row_error(clinical_csv_path, line_no,
                      "expected 9 fields, got " + std::to_string(f.size()));
        ClinicalRecord rec;
        rec.patient_id = f[0];
        if (rec.patient_id.empty()) row_error(clinical_csv_path, line_no, "empty patient_id");
        rec.age_years = parse_positive_real(f[1], clinical_csv_path, line_no, "age_years");
        rec.tumor_size_mm = parse_positive_real(f[2], clinical_csv_path, line_no, "tumor_size_mm");
        if (f[3].size() != 1 || f[3][0] < '1' || f[3][0] > '3')
            row_error(clinical_csv_path, line_no, "grade must be 1, 2 or 3, got '" + f[3] + "'");
        rec.grade = f[3][0] - '0';
        rec.histologic_subtype = parse_histology(f[4], clinical_csv_path, line_no);
        rec.er = parse_tristate(f[5], clinical_csv_path, line_no, "er");
        rec.pr = parse_tristate(f[6], clinical_csv_path, line_no, "pr");
        rec.her2 = parse_tristate(f[7], clinical_csv_path, line_no, "her2");
        if (!f[8].empty()) {
            int score = 0;
            const auto res = std::from_chars(f[8].data(), f[8].data() + f[8].size(), score);
            if (res.ec != std::errc() || res.ptr != f[8].data() + f[8].size() || score < 0 || score > 100)
                row_error(clinical_csv_path, line_no, "oncotype_score must be in [0,100], got '" + f[8] + "'");
            rec.oncotype_score = score;
        }
        if (parsed.count(rec.patient_id))
            throw IntegrityError(clinical_csv_path.string() + ":" + std::to_string(line_no) +
                                 ": duplicate patient_id " + rec.patient_id);
        parsed.emplace(rec.patient_id, std::move(rec));
    }

    // ER-negative exclusion, then majority imputation over the kept rows
    std::set<std::string> excluded;
    CohortManifest cohort;
    for (auto& [id, rec] : parsed) {
        if (rec.er == TriState::Negative)
            excluded.insert(id);
        else
            cohort.records.emplace(id, std::move(rec));
    }
    if (cohort.records.empty()) throw Error("empty cohort");

    std::size_t pr_pos = 0, pr_neg = 0, her2_pos = 0, her2_neg = 0;
    for (const auto& [id, rec] : cohort.records) {
        if (rec.pr == TriState::Positive) ++pr_pos;
        if (rec.pr == TriState::Negative) ++pr_neg;
        if (rec.her2 == TriState::Positive) ++her2_pos;
        if (rec.her2 == TriState::Negative) ++her2_neg;
    }
    const TriState pr_major = pr_pos >= pr_neg ? TriState::Positive : TriState::Negative;
    const TriState her2_major = her2_pos >= her2_neg ? TriState::Positive : TriState::Negative;
    for (auto& [id, rec] : cohort.records) {
        if (rec.pr == TriState::Missing) {
            rec.pr = pr_major;
            rec.pr_missing = true;
        }
        if (rec.her2 == TriState::Missing) {
            rec.her2 = her2_major;
            rec.her2_missing = true;
        }
    }

    std::ifstream man(manifest_path);
    if (!man) throw IoError("cannot open " + manifest_path.string());
    std::set<std::string> slide_ids;
    std::map<std::string, PartitionTag> patient_tag;
    line_no = 0;
    while (std::getline(man, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto f = split_line(line);
        if (f.size() != 3 && f.size() != 4)
            row_error(manifest_path, line_no, "expected slide_id,patient_id,bundle_path[,partition]");
        SlideEntry e;
        e.slide_id = f[0];
        e.patient_id = f[1];
        e.bundle_path = f[2];
        e.partition = f.size() == 4 ? parse_partition(f[3], manifest_path, line_no) : PartitionTag::None;
        if (e.slide_id.empty() || e.patient_id.empty())
            row_error(manifest_path, line_no, "empty slide_id or patient_id");
        if (!slide_ids.insert(e.slide_id).second)
            throw IntegrityError(manifest_path.string() + ":" + std::to_string(line_no) +
                                 ": duplicate slide_id " + e.slide_id);
        if (excluded.count(e.patient_id)) continue;  // slides of ER-negative patients drop out
        if (!cohort.records.count(e.patient_id))
            throw IntegrityError(manifest_path.string() + ":" + std::to_string(line_no) +
                                 ": slide " + e.slide_id + " references unknown patient " + e.patient_id);
        auto [it, fresh] = patient_tag.emplace(e.patient_id, e.partition);
        if (!fresh && it->second != e.partition)
            throw IntegrityError(manifest_path.string() + ":" + std::to_string(line_no) +
                                 ": patient " + e.patient_id + " has slides in different partitions");
        cohort.entries.push_back(std::move(e));
    }
    return cohort;
}

void serialize(const CohortManifest& cohort, const fs::path& clinical_csv_path,
               const fs::path& manifest_path) {
    std::ostringstream csv;
    csv << kCsvHeader << "\n";
    for (const auto& [id, rec] : cohort.records) {
        csv << id << ',' << format_real(rec.age_years) << ',' << format_real(rec.tumor_size_mm) << ','
            << rec.grade << ',' << to_string(rec.histologic_subtype) << ',' << to_string(rec.er) << ','
            << (rec.pr_missing ? "missing" : to_string(rec.pr)) << ','
            << (rec.her2_missing ? "missing" : to_string(rec.her2)) << ',';
        if (rec.oncotype_score) csv << *rec.oncotype_score;
        csv << "\n";
    }
    atomic_write_file(clinical_csv_path, csv.str());

    std::ostringstream man;
    for (const auto& e : cohort.entries) {
        man << e.slide_id << ',' << e.patient_id << ',' << e.bundle_path.string();
        if (e.partition != PartitionTag::None) man << ',' << to_string(e.partition);
        man << "\n";
    }
    atomic_write_file(manifest_path, man.str());
}

namespace {

// Largest-remainder seat allocation; fraction ties go to the relatively most
// under-represented split, then to the later split.
std::array<std::size_t, 3> allocate_stratum(std::size_t n, const PartitionRatios& ratios) {
    const std::array<double, 3> share = {ratios.train * static_cast<double>(n),
                                         ratios.dev * static_cast<double>(n),
                                         ratios.test * static_cast<double>(n)};
    std::array<std::size_t, 3> count{};
    std::size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
        count[k] = static_cast<std::size_t>(std::floor(share[k]));
        assigned += count[k];
    }
    std::size_t seats = n - assigned;
    std::array<int, 3> order = {0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double fa = share[a] - std::floor(share[a]);
        const double fb = share[b] - std::floor(share[b]);
        if (fa != fb) return fa > fb;
        const double ra = share[a] > 0 ? static_cast<double>(count[a]) / share[a] : 1.0;
        const double rb = share[b] > 0 ? static_cast<double>(count[b]) / share[b] : 1.0;
        if (ra != rb) return ra < rb;
        return a > b;
    });
    for (std::size_t s = 0; s < seats; ++s) ++count[order[s % 3]];
    return count;
}

}  // namespace

CohortManifest partition(const CohortManifest& manifest, const PartitionRatios& ratios,
                         std::uint64_t seed) {
    const double total = ratios.train + ratios.dev + ratios.test;
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("partition: ratios sum to " + format_real(total) + ", expected 1");
    if (ratios.train < 0 || ratios.dev < 0 || ratios.test < 0)
        throw ConfigError("partition: negative ratio");

    // patients carrying at least one non-external slide, first-appearance order
    std::vector<std::string> low, high;
    std::set<std::string> seen;
    for (const auto& e : manifest.entries) {
        if (e.partition == PartitionTag::External) continue;
        if (!seen.insert(e.patient_id).second) continue;
        const auto lbl = manifest.label(e.patient_id);
        if (!lbl)
            throw IntegrityError("partition: patient " + e.patient_id + " has no oncotype score");
        (*lbl == RiskCategory::Low ? low : high).push_back(e.patient_id);
    }
    if (low.size() < 3 || high.size() < 3)
        throw Error("cannot stratify: category " + std::string(low.size() < 3 ? "Low" : "High") +
                    " has " + std::to_string(std::min(low.size(), high.size())) + " patients");

    Rng rng(seed);
    std::map<std::string, PartitionTag> assignment;
    for (auto* stratum : {&low, &high}) {
        rng.shuffle(*stratum);
        const auto counts = allocate_stratum(stratum->size(), ratios);
        std::size_t i = 0;
        for (std::size_t k = 0; k < counts[0]; ++k) assignment[(*stratum)[i++]] = PartitionTag::Train;
        for (std::size_t k = 0; k < counts[1]; ++k) assignment[(*stratum)[i++]] = PartitionTag::Dev;
        for (std::size_t k = 0; k < counts[2]; ++k) assignment[(*stratum)[i++]] = PartitionTag::Test;
    }

    CohortManifest out = manifest;
    for (auto& e : out.entries) {
        if (e.partition == PartitionTag::External) continue;
        e.partition = assignment.at(e.patient_id);
    }
    return out;
}

}  // namespace odhn
