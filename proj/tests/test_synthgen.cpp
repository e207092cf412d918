#include <doctest.h>

#include <cmath>
#include <fstream>

#include "odhn/corpus.hpp"
#include "odhn/slide_bundle.hpp"
#include "odhn/synthgen.hpp"
#include "support/tmpdir.hpp"

using namespace odhn;
using odhn::testsupport::TmpDir;

namespace {

synth::SynthConfig small_config(std::uint64_t seed, std::size_t n = 30) {
    synth::SynthConfig c;
    c.n_patients = n;
    c.slide_side = 192;
    c.tile_size = 96;
    c.margin = 16;
    c.seed = seed;
    return c;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        std::size_t i = 0;
        while (i < v.size()) {
            std::size_t j = i;
            while (j + 1 < v.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(ra.size());
    mb /= static_cast<double>(rb.size());
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(da * db);
}

}  // namespace

TEST_CASE("generated cohort ingests cleanly and is deterministic per seed") {
    TmpDir tmp("synth_det");
    const auto a = synth::generate(small_config(5, 12), tmp / "a");
    const auto b = synth::generate(small_config(5, 12), tmp / "b");

    // byte-identical artifacts
    const auto bytes = [](const std::filesystem::path& p) { return read_file_bytes(p); };
    CHECK(bytes(a.clinical_csv) == bytes(b.clinical_csv));
    CHECK(bytes(a.labels_csv) == bytes(b.labels_csv));
    const auto tile = [](const synth::SynthResult& r, const std::string& slide) {
        return read_file_bytes(r.bundles_dir / slide / "tiles" / "0_0.png");
    };
    CHECK(tile(a, a.patients[3].slide_ids[0]) == tile(b, b.patients[3].slide_ids[0]));

    const auto cohort = ingest(a.clinical_csv, a.manifest);
    CHECK(cohort.records.size() == 12);
    CHECK(cohort.entries.size() == 12);
    for (const auto& e : cohort.entries) {
        const auto bundle = SlideBundle::open(e.bundle_path);
        CHECK(bundle.width() == 192);
    }

    const auto c = synth::generate(small_config(6, 12), tmp / "c");
    CHECK(bytes(a.clinical_csv) != bytes(c.clinical_csv));
}

TEST_CASE("score marginals track the published cohort") {
    TmpDir tmp("synth_marginals");
    synth::SynthConfig cfg = small_config(11, 500);
    cfg.slide_side = 96;  // keep the disk work small
    cfg.tile_size = 96;
    cfg.margin = 8;
    const auto res = synth::generate(cfg, tmp / "g");

    double mean = 0.0;
    std::size_t high = 0;
    for (const auto& p : res.patients) {
        mean += p.score;
        high += p.label == RiskCategory::High;
    }
    mean /= static_cast<double>(res.patients.size());
    double var = 0.0;
    for (const auto& p : res.patients) var += (p.score - mean) * (p.score - mean);
    const double sd = std::sqrt(var / static_cast<double>(res.patients.size()));

    CHECK(std::abs(mean - 18.5) < 1.85);  // within 10%
    CHECK(std::abs(sd - 11.7) < 1.17);
    const double frac = static_cast<double>(high) / static_cast<double>(res.patients.size());
    CHECK(std::abs(frac - 0.168) < 0.03);  // label marginal within 3 points
}

TEST_CASE("blob counts rise with the planted score") {
    TmpDir tmp("synth_blobs");
    // default-sized tissue field: enough area for the Poisson noise to
    // average out
    synth::SynthConfig cfg = small_config(13, 200);
    cfg.slide_side = 192;
    cfg.tile_size = 96;
    cfg.margin = 16;
    const auto res = synth::generate(cfg, tmp / "g");

    std::vector<double> scores, blobs;
    double low_sum = 0.0, high_sum = 0.0;
    std::size_t low_n = 0, high_n = 0;
    for (const auto& p : res.patients) {
        scores.push_back(p.score);
        blobs.push_back(static_cast<double>(p.blob_counts[0]));
        if (p.score <= 5) {
            low_sum += static_cast<double>(p.blob_counts[0]);
            ++low_n;
        }
        if (p.score >= 40) {
            high_sum += static_cast<double>(p.blob_counts[0]);
            ++high_n;
        }
    }
    CHECK(spearman(scores, blobs) > 0.8);
    if (low_n > 0 && high_n > 0) CHECK(high_sum / static_cast<double>(high_n) > low_sum / static_cast<double>(low_n));

    // image-level cross-check on one slide pair: darker mean = more blobs
    const auto& lo = *std::min_element(res.patients.begin(), res.patients.end(),
                                       [](const auto& a, const auto& b) { return a.score < b.score; });
    const auto& hi = *std::max_element(res.patients.begin(), res.patients.end(),
                                       [](const auto& a, const auto& b) { return a.score < b.score; });
    auto mean_green = [&](const std::string& slide_id) {
        const auto img = SlideBundle::open(res.bundles_dir / slide_id).read_full();
        double g = 0.0;
        for (std::int64_t i = 0; i < img.width * img.height; ++i) g += img.pixels[i * 3 + 1];
        return g / static_cast<double>(img.width * img.height);
    };
    CHECK(mean_green(hi.slide_ids[0]) < mean_green(lo.slide_ids[0]));
}

TEST_CASE("er-negative rows exercise the exclusion path") {
    TmpDir tmp("synth_er");
    synth::SynthConfig cfg = small_config(17, 10);
    cfg.er_negative_count = 2;
    const auto res = synth::generate(cfg, tmp / "g");
    const auto cohort = ingest(res.clinical_csv, res.manifest);
    CHECK(cohort.records.size() == 8);
}

TEST_CASE("invalid configs are rejected") {
    TmpDir tmp("synth_bad");
    synth::SynthConfig cfg = small_config(1, 0);
    CHECK_THROWS_AS(synth::generate(cfg, tmp / "g"), ConfigError);
    cfg = small_config(1, 5);
    cfg.high_risk_fraction = 1.5;
    CHECK_THROWS_AS(synth::generate(cfg, tmp / "g"), ConfigError);
    cfg = small_config(1, 5);
    cfg.margin = 100;
    CHECK_THROWS_AS(synth::generate(cfg, tmp / "g"), ConfigError);
}
