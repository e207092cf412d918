#include "odhn/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "odhn/image.hpp"
#include "odhn/rng.hpp"
#include "odhn/slide_bundle.hpp"

namespace odhn {
namespace synth {

namespace fs = std::filesystem;

namespace {

void validate(const SynthConfig& c) {
    if (c.n_patients == 0 || c.slides_per_patient < 1) throw ConfigError("synth: no patients or slides");
    if (c.slide_side <= 0 || c.tile_size <= 0 || c.margin < 0 || c.margin * 2 >= c.slide_side)
        throw ConfigError("synth: slide geometry invalid");
    if (!(c.high_risk_fraction > 0.0 && c.high_risk_fraction < 1.0))
        throw ConfigError("synth: high_risk_fraction must lie in (0,1)");
    if (c.score_mean <= 0.0 || c.score_sd <= 0.0 || c.blob_base < 0.0 || c.blob_slope <= 0.0 ||
        c.unit_area_side <= 0)
        throw ConfigError("synth: nonpositive signal parameter");
}

// integer score from a lognormal matched to the target moments, resampled
// until it lands on the requested side of the threshold
int sample_score(Rng& rng, const SynthConfig& c, bool high) {
    const double sigma2 = std::log(1.0 + (c.score_sd / c.score_mean) * (c.score_sd / c.score_mean));
    const double sigma = std::sqrt(sigma2);
    const double mu = std::log(c.score_mean) - 0.5 * sigma2;
    for (;;) {
        const double x = std::exp(mu + sigma * rng.normal());
        const int score = static_cast<int>(std::lround(std::clamp(x, 0.0, 100.0)));
        if (high && score >= 26) return score;
        if (!high && score < 26) return score;
    }
}

double logit(double p) { return std::log(p / (1.0 - p)); }

int sample_grade(Rng& rng, const SynthConfig& c, int score) {
    // ordered logit centered so the grade marginals at the mean score stay
    // close to the published 25.6 / 53.8 / 20.3 split
    const double mean_shift = c.clinical_beta * (c.score_mean - 26.0) / 10.0;
    const double theta1 = logit(0.256) + mean_shift;
    const double theta2 = logit(0.794) + mean_shift;
    const double s = c.clinical_beta * (static_cast<double>(score) - 26.0) / 10.0;
    const double u = rng.uniform();
    const double p1 = 1.0 / (1.0 + std::exp(-(theta1 - s)));
    const double p2 = 1.0 / (1.0 + std::exp(-(theta2 - s)));
    if (u < p1) return 1;
    if (u < p2) return 2;
    return 3;
}

struct SlideArt {
    ImageRGB image;
    std::int64_t blob_count = 0;
};

SlideArt paint_slide(Rng& rng, const SynthConfig& c, int score) {
    SlideArt art;
    art.image = ImageRGB(c.slide_side, c.slide_side, 255, 255, 255);
    const std::int64_t lo = c.margin, hi = c.slide_side - c.margin;

    // pale pink tissue field with pixel noise; stays inside the tissue
    // thresholds (saturation >= 0.08, value <= 0.95)
    for (std::int64_t y = lo; y < hi; ++y) {
        for (std::int64_t x = lo; x < hi; ++x) {
            auto* p = art.image.at(x, y);
            const auto jitter = [&](int base) {
                return static_cast<std::uint8_t>(base + static_cast<int>(rng.below(13)) - 6);
            };
            p[0] = jitter(230);
            p[1] = jitter(195);
            p[2] = jitter(210);
        }
    }

    const double tissue_area = static_cast<double>((hi - lo) * (hi - lo));
    const double unit = static_cast<double>(c.unit_area_side * c.unit_area_side);
    const double lambda = (c.blob_base + c.blob_slope * static_cast<double>(score)) * tissue_area / unit;
    art.blob_count = static_cast<std::int64_t>(rng.poisson(lambda));

    for (std::int64_t b = 0; b < art.blob_count; ++b) {
        const double cx = rng.uniform(static_cast<double>(lo), static_cast<double>(hi));
        const double cy = rng.uniform(static_cast<double>(lo), static_cast<double>(hi));
        const double a = rng.uniform(2.0, 5.0);
        const double bb = rng.uniform(2.0, 5.0);
        const double angle = rng.uniform(0.0, 3.14159265358979323846);
        const double ca = std::cos(angle), sa = std::sin(angle);
        const int r = static_cast<int>(std::ceil(std::max(a, bb)));
        const std::uint8_t cr = static_cast<std::uint8_t>(80 + rng.below(30));
        const std::uint8_t cg = static_cast<std::uint8_t>(50 + rng.below(25));
        const std::uint8_t cb = static_cast<std::uint8_t>(125 + rng.below(30));
        for (std::int64_t y = static_cast<std::int64_t>(cy) - r; y <= static_cast<std::int64_t>(cy) + r; ++y) {
            for (std::int64_t x = static_cast<std::int64_t>(cx) - r; x <= static_cast<std::int64_t>(cx) + r;
                 ++x) {
                if (x < lo || y < lo || x >= hi || y >= hi) continue;
                const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                const double u = (dx * ca + dy * sa) / a;
                const double v = (-dx * sa + dy * ca) / bb;
                if (u * u + v * v > 1.0) continue;
                auto* p = art.image.at(x, y);
                p[0] = cr;
                p[1] = cg;
                p[2] = cb;
            }
        }
    }
    return art;
}

std::string pad_id(std::size_t i) {
    std::ostringstream os;
    os << "synth" << std::setw(4) << std::setfill('0') << i;
    return os.str();
}

}  // namespace

SynthResult generate(const SynthConfig& config, const fs::path& out_dir) {
    validate(config);
    fs::create_directories(out_dir / "bundles");

    SynthResult result;
    result.clinical_csv = out_dir / "clinical.csv";
    result.manifest = out_dir / "manifest.csv";
    result.labels_csv = out_dir / "labels.csv";
    result.bundles_dir = out_dir / "bundles";

    std::ostringstream csv, man, labels;
    csv << "patient_id,age_years,tumor_size_mm,grade,histologic_subtype,er,pr,her2,oncotype_score\n";
    labels << "slide_id,patient_id,score,category,blob_count\n";

    for (std::size_t i = 0; i < config.n_patients; ++i) {
        Rng rng(config.seed + 0x9e3779b97f4a7c15ULL * (i + 1));  // per-patient derived seed
        SynthPatient patient;
        patient.patient_id = pad_id(i);

        const bool high = rng.uniform() < config.high_risk_fraction;
        patient.score = sample_score(rng, config, high);
        patient.label = categorize(patient.score);
        patient.grade = sample_grade(rng, config, patient.score);

        const double age = std::clamp(rng.normal(61.6, 11.1), 25.0, 95.0);
        const double size = std::max(
            1.0, rng.normal(20.4, 13.0) + 0.15 * (static_cast<double>(patient.score) - config.score_mean));

        const double hu = rng.uniform();
        const char* histology = hu < 0.771 ? "IDC" : hu < 0.800 ? "IDC_ILC" : hu < 0.969 ? "ILC" : "OTHER";
        const bool er_neg = i < config.er_negative_count;
        const double pru = rng.uniform();
        const char* pr = pru < 0.001 ? "missing" : pru < 0.084 ? "neg" : "pos";
        const double h2u = rng.uniform();
        const char* her2 = h2u < 0.004 ? "missing" : h2u < 0.027 ? "pos" : "neg";

        csv << patient.patient_id << ',' << std::llround(age * 10.0) / 10.0 << ','
            << std::llround(size * 10.0) / 10.0 << ',' << patient.grade << ',' << histology << ','
            << (er_neg ? "neg" : "pos") << ',' << pr << ',' << her2 << ',' << patient.score << "\n";

        for (int s = 0; s < config.slides_per_patient; ++s) {
            const std::string slide_id = patient.patient_id + "_s" + std::to_string(s);
            const SlideArt art = paint_slide(rng, config, patient.score);
            const fs::path bundle_dir = result.bundles_dir / slide_id;
            SlideBundle::create(bundle_dir, slide_id, art.image, config.tile_size);
            patient.slide_ids.push_back(slide_id);
            patient.blob_counts.push_back(art.blob_count);
            man << slide_id << ',' << patient.patient_id << ',' << bundle_dir.string() << "\n";
            labels << slide_id << ',' << patient.patient_id << ',' << patient.score << ','
                   << to_string(patient.label) << ',' << art.blob_count << "\n";
        }
        result.patients.push_back(std::move(patient));
    }

    atomic_write_file(result.clinical_csv, csv.str());
    atomic_write_file(result.manifest, man.str());
    atomic_write_file(result.labels_csv, labels.str());
    return result;
}

}  // namespace synth
}  // namespace odhn
