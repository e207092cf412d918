#include "odhn/pipeline.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <sstream>

namespace odhn {
namespace pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

// patch-only dataset: csv rows patch_path,x,y,slide_id next to loose PNGs
std::vector<RegionSample> patch_only_regions(const fs::path& csv_path, const std::string& slide_id,
                                             const PipelineConfig& cfg) {
    std::ifstream f(csv_path);
    if (!f) throw IoError("cannot open patch dataset " + csv_path.string());
    std::string line;
    std::vector<PatchRecord> records;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line == "patch_path,x,y,slide_id") continue;
        std::vector<std::string> fields;
        std::size_t pos = 0;
        while (true) {
            const std::size_t next = line.find(',', pos);
            if (next == std::string::npos) {
                fields.push_back(line.substr(pos));
                break;
            }
            fields.push_back(line.substr(pos, next - pos));
            pos = next + 1;
        }
        if (fields.size() != 4)
            throw ParseError(csv_path.string() + ":" + std::to_string(line_no) +
                             ": expected patch_path,x,y,slide_id");
        if (fields[3] != slide_id) continue;
        PatchRecord r;
        r.path = csv_path.parent_path() / fields[0];
        const auto parse_coord = [&](const std::string& tok) {
            std::int64_t v = 0;
            const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
            if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
                throw ParseError(csv_path.string() + ":" + std::to_string(line_no) +
                                 ": bad coordinate '" + tok + "'");
            return v;
        };
        r.x = parse_coord(fields[1]);
        r.y = parse_coord(fields[2]);
        records.push_back(std::move(r));
    }
    if (records.empty())
        throw IntegrityError("patch dataset " + csv_path.string() + " has no rows for slide " + slide_id);

    std::vector<RegionSample> out;
    for (const auto& rr : cluster_patches(records, cfg.region_side, cfg.encoder.patch_side)) {
        RegionSample sample;
        sample.origin_x = rr.region.x;
        sample.origin_y = rr.region.y;
        sample.side = rr.region.side;
        sample.cells_per_side = rr.cells_per_side;
        sample.ignore = rr.padded;
        sample.patch_pixels.resize(rr.patch_paths.size());
        for (std::size_t i = 0; i < rr.patch_paths.size(); ++i)
            if (!rr.padded[i]) sample.patch_pixels[i] = read_png(rr.patch_paths[i]);
        out.push_back(std::move(sample));
    }
    return out;
}

std::vector<RegionSample> bundle_regions(const SlideEntry& entry, const PipelineConfig& cfg) {
    const SlideBundle bundle = SlideBundle::open(entry.bundle_path);
    const std::uint64_t seed = cfg.sampling_seed ^ fnv1a64(entry.slide_id);
    const auto regions =
        sample_regions(bundle, static_cast<std::size_t>(cfg.region_count), cfg.region_side, seed,
                       cfg.min_tissue);
    std::vector<RegionSample> out;
    out.reserve(regions.size());
    for (const auto& region : regions) {
        const PatchGrid grid = patch_grid(bundle, region, cfg.encoder.patch_side);
        RegionSample sample;
        sample.origin_x = region.x;
        sample.origin_y = region.y;
        sample.side = region.side;
        sample.cells_per_side = grid.cells_per_side;
        sample.patch_pixels = grid.patches;
        sample.ignore.assign(sample.patch_pixels.size(), false);
        out.push_back(std::move(sample));
    }
    return out;
}

}  // namespace

std::vector<SlideSample> build_slide_samples(const CohortManifest& cohort,
                                             const std::vector<PartitionTag>& tags,
                                             const PipelineConfig& cfg) {
    std::vector<SlideSample> out;
    for (const auto& entry : cohort.entries) {
        if (!tags.empty() && std::find(tags.begin(), tags.end(), entry.partition) == tags.end())
            continue;
        SlideSample sample;
        sample.slide_id = entry.slide_id;
        sample.patient_id = entry.patient_id;
        const auto& rec = cohort.record(entry.patient_id);
        if (rec.oncotype_score) {
            sample.score = static_cast<double>(*rec.oncotype_score);
            sample.label = categorize(*rec.oncotype_score);
        }
        sample.regions = entry.bundle_path.extension() == ".csv"
                             ? patch_only_regions(entry.bundle_path, entry.slide_id, cfg)
                             : bundle_regions(entry, cfg);
        out.push_back(std::move(sample));
    }
    return out;
}

std::vector<SlideScore> score_slides(const ImageModel& model, const std::vector<SlideSample>& samples,
                                     int threads) {
    std::vector<SlideScore> out(samples.size());
    auto score_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const SlidePrediction pred = predict_slide(model, samples[i]);
            out[i] = {samples[i].slide_id, samples[i].patient_id, pred.probability_high,
                      pred.score_estimate};
        }
    };
    if (threads <= 1 || samples.size() < 2) {
        score_range(0, samples.size());
        return out;
    }
    const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(threads), samples.size());
    std::vector<std::future<void>> futures;
    const std::size_t chunk = (samples.size() + n_threads - 1) / n_threads;
    for (std::size_t t = 0; t < n_threads; ++t) {
        const std::size_t begin = t * chunk;
        const std::size_t end = std::min(samples.size(), begin + chunk);
        if (begin >= end) break;
        futures.push_back(std::async(std::launch::async, score_range, begin, end));
    }
    for (auto& f : futures) f.get();
    return out;
}

PatientScores patient_scores(const CohortManifest& cohort, const std::vector<SlideScore>& slides,
                             const clin::LogisticModel* clinical_model) {
    std::vector<std::pair<std::string, double>> probs, estimates;
    for (const auto& s : slides) {
        probs.emplace_back(s.patient_id, s.probability);
        estimates.emplace_back(s.patient_id, s.score_estimate);
    }
    const auto prob_by_patient = stats::aggregate_patient(probs);
    const auto est_by_patient = stats::aggregate_patient(estimates);

    PatientScores out;
    for (std::size_t i = 0; i < prob_by_patient.size(); ++i) {
        const auto& [pid, prob] = prob_by_patient[i];
        const auto& rec = cohort.record(pid);
        out.patient_ids.push_back(pid);
        out.image.push_back(prob);
        out.score_estimate.push_back(est_by_patient[i].second);
        out.clinical.push_back(clinical_model ? clin::predict_proba(*clinical_model, rec) : 0.0);
        out.labels.push_back(rec.oncotype_score ? categorize(*rec.oncotype_score) : RiskCategory::Low);
        out.true_scores.push_back(rec.oncotype_score ? *rec.oncotype_score : -1);
    }
    return out;
}

std::vector<clin::LabeledRecord> labeled_records(const CohortManifest& cohort, PartitionTag tag) {
    std::vector<clin::LabeledRecord> out;
    std::set<std::string> seen;
    for (const auto& e : cohort.entries) {
        if (e.partition != tag) continue;
        if (!seen.insert(e.patient_id).second) continue;
        const auto& rec = cohort.record(e.patient_id);
        if (!rec.oncotype_score)
            throw IntegrityError("patient " + e.patient_id + " has no oncotype score");
        out.push_back({rec, categorize(*rec.oncotype_score)});
    }
    return out;
}

ModelEval evaluate_model(const stats::ScoredCohort& cohort, double threshold,
                         std::int64_t bootstrap_iterations, double level, std::uint64_t seed) {
    ModelEval ev;
    ev.auc = stats::auc(cohort);
    ev.roc = stats::roc_curve(cohort);
    const auto ci =
        stats::bootstrap_ci(cohort, static_cast<std::size_t>(bootstrap_iterations), level, seed);
    ev.ci_lo = ci.lo;
    ev.ci_hi = ci.hi;
    ev.replicates = stats::bootstrap_replicates(cohort, static_cast<std::size_t>(bootstrap_iterations), seed);
    ev.threshold = threshold;
    ev.confusion = stats::confusion_at(cohort, threshold);
    return ev;
}

nlohmann::json evaluation_report(const std::string& cohort_name, const PatientScores& scores,
                                 const fuse::FusionModel& fusion, const PipelineConfig& cfg,
                                 std::vector<std::pair<std::string, ModelEval>>* evals_out) {
    const std::size_t n = scores.patient_ids.size();
    stats::ScoredCohort img{scores.patient_ids, scores.image, scores.labels};
    stats::ScoredCohort clin_c{scores.patient_ids, scores.clinical, scores.labels};
    stats::ScoredCohort fused{scores.patient_ids, {}, scores.labels};
    fused.scores.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        fused.scores[i] = fuse::fuse_predict(fusion, scores.image[i], scores.clinical[i]).first;

    std::vector<std::pair<std::string, ModelEval>> evals;
    evals.emplace_back("image", evaluate_model(img, fusion.t_img, cfg.bootstrap_iterations,
                                               cfg.ci_level, cfg.eval_seed));
    evals.emplace_back("clinical", evaluate_model(clin_c, fusion.t_clin, cfg.bootstrap_iterations,
                                                  cfg.ci_level, cfg.eval_seed));
    evals.emplace_back("combined", evaluate_model(fused, fusion.t_star, cfg.bootstrap_iterations,
                                                  cfg.ci_level, cfg.eval_seed));

    json report;
    report["version"] = kVersion;
    report["cohort"] = cohort_name;
    report["patients"] = n;
    report["config"] = cfg.echo;
    report["fusion"] = json::parse(fuse::to_json(fusion));
    for (const auto& [name, ev] : evals) {
        json m;
        m["auc"] = ev.auc;
        m["ci_lo"] = ev.ci_lo;
        m["ci_hi"] = ev.ci_hi;
        m["threshold"] = ev.threshold;
        m["confusion"] = {{"tp", ev.confusion.tp},
                          {"fp", ev.confusion.fp},
                          {"tn", ev.confusion.tn},
                          {"fn", ev.confusion.fn}};
        report["models"][name] = std::move(m);
    }

    const std::array<std::pair<std::size_t, std::size_t>, 3> pairs = {{{0, 1}, {2, 0}, {2, 1}}};
    report["comparisons"] = json::array();
    for (const auto& [a, b] : pairs) {
        const auto res = stats::compare_models(evals[a].second.replicates, evals[b].second.replicates,
                                               static_cast<std::size_t>(cfg.m_comparisons));
        report["comparisons"].push_back({{"a", evals[a].first},
                                         {"b", evals[b].first},
                                         {"u", res.u},
                                         {"p_raw", res.p_raw},
                                         {"p_adjusted", res.p_adjusted},
                                         {"exact", res.exact}});
    }

    // regression quality when true scores are available
    std::vector<double> t, p;
    for (std::size_t i = 0; i < n; ++i) {
        if (scores.true_scores[i] < 0) continue;
        t.push_back(static_cast<double>(scores.true_scores[i]));
        p.push_back(scores.score_estimate[i]);
    }
    if (t.size() >= 2) report["r_squared"] = stats::r_squared(t, p);

    if (evals_out) *evals_out = std::move(evals);
    return report;
}

std::string roc_csv(const std::vector<stats::RocPoint>& curve) {
    std::ostringstream os;
    os.precision(17);
    os << "fpr,tpr,threshold\n";
    for (const auto& p : curve) {
        os << p.fpr << ',' << p.tpr << ',';
        if (std::isinf(p.threshold))
            os << "inf";
        else
            os << p.threshold;
        os << "\n";
    }
    return os.str();
}

std::string roc_svg(
    const std::vector<std::tuple<std::string, std::vector<stats::RocPoint>, double>>& curves) {
    constexpr int size = 560, margin = 60;
    constexpr int plot = size - 2 * margin;
    const std::array<const char*, 6> colors = {"#1f77b4", "#ff7f0e", "#2ca02c",
                                               "#d62728", "#9467bd", "#8c564b"};
    auto px = [&](double fpr) { return margin + fpr * plot; };
    auto py = [&](double tpr) { return size - margin - tpr * plot; };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
       << "\" viewBox=\"0 0 " << size << " " << size << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    // axes with 0.2 ticks
    os << "<line x1=\"" << margin << "\" y1=\"" << size - margin << "\" x2=\"" << size - margin
       << "\" y2=\"" << size - margin << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
       << size - margin << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double v = i / 5.0;
        os << "<text x=\"" << px(v) - 10 << "\" y=\"" << size - margin + 20 << "\" font-size=\"12\">"
           << v << "</text>\n";
        os << "<text x=\"" << margin - 35 << "\" y=\"" << py(v) + 4 << "\" font-size=\"12\">" << v
           << "</text>\n";
    }
    os << "<text x=\"" << size / 2 - 60 << "\" y=\"" << size - 15
       << "\" font-size=\"14\">False positive rate</text>\n";
    os << "<text x=\"15\" y=\"" << size / 2 + 60
       << "\" font-size=\"14\" transform=\"rotate(-90 15 " << size / 2 + 60
       << ")\">True positive rate</text>\n";
    os << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(1)
       << "\" stroke=\"#bbbbbb\" stroke-dasharray=\"6,4\"/>\n";

    for (std::size_t c = 0; c < curves.size(); ++c) {
        const auto& [name, curve, auc_value] = curves[c];
        os << "<polyline fill=\"none\" stroke=\"" << colors[c % colors.size()]
           << "\" stroke-width=\"2\" points=\"";
        for (const auto& p : curve) os << px(p.fpr) << ',' << py(p.tpr) << ' ';
        os << "\"/>\n";
        const int ly = margin + 20 + static_cast<int>(c) * 20;
        os << "<line x1=\"" << size - margin - 170 << "\" y1=\"" << ly - 4 << "\" x2=\""
           << size - margin - 140 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << colors[c % colors.size()]
           << "\" stroke-width=\"2\"/>\n";
        os.precision(3);
        os << "<text x=\"" << size - margin - 132 << "\" y=\"" << ly << "\" font-size=\"13\">" << name
           << " AUC=" << auc_value << "</text>\n";
        os.precision(17);
    }
    os << "</svg>\n";
    return os.str();
}

ImageRGB render_heatmap(const SlideBundle& bundle, const std::vector<AttentionMapData>& attentions,
                        std::int64_t patch_side, double alpha, std::int64_t max_side) {
    if (attentions.empty()) throw DomainError("render_heatmap: no regions sampled");
    const std::int64_t w = bundle.width(), h = bundle.height();
    const std::int64_t longest = std::max(w, h);
    const double scale = longest > max_side
                             ? static_cast<double>(max_side) / static_cast<double>(longest)
                             : 1.0;
    const std::int64_t ow = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(w * scale)));
    const std::int64_t oh = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(h * scale)));

    // box-filtered downsample of the slide
    const ImageRGB full = bundle.read_full();
    ImageRGB out(ow, oh);
    for (std::int64_t y = 0; y < oh; ++y) {
        const std::int64_t sy0 = y * h / oh, sy1 = std::max(sy0 + 1, (y + 1) * h / oh);
        for (std::int64_t x = 0; x < ow; ++x) {
            const std::int64_t sx0 = x * w / ow, sx1 = std::max(sx0 + 1, (x + 1) * w / ow);
            std::int64_t r = 0, g = 0, b = 0, n = 0;
            for (std::int64_t sy = sy0; sy < sy1; ++sy)
                for (std::int64_t sx = sx0; sx < sx1; ++sx) {
                    const auto* p = full.at(sx, sy);
                    r += p[0];
                    g += p[1];
                    b += p[2];
                    ++n;
                }
            auto* q = out.at(x, y);
            q[0] = static_cast<std::uint8_t>(r / n);
            q[1] = static_cast<std::uint8_t>(g / n);
            q[2] = static_cast<std::uint8_t>(b / n);
        }
    }

    // min-max across the whole slide; a constant field maps to 0.5
    double wmin = std::numeric_limits<double>::infinity(), wmax = -wmin;
    for (const auto& att : attentions)
        for (double v : att.weights) {
            wmin = std::min(wmin, v);
            wmax = std::max(wmax, v);
        }
    const bool flat = !(wmax > wmin);

    for (const auto& att : attentions) {
        const std::int64_t cells = att.side / patch_side;
        for (std::int64_t idx = 0; idx < static_cast<std::int64_t>(att.weights.size()); ++idx) {
            const std::int64_t row = idx / cells, col = idx % cells;
            const double v = flat ? 0.5 : (att.weights[static_cast<std::size_t>(idx)] - wmin) / (wmax - wmin);
            const double tr = 255.0 * v, tb = 255.0 * (1.0 - v);
            const std::int64_t x0 = att.origin_x + col * patch_side;
            const std::int64_t y0 = att.origin_y + row * patch_side;
            const std::int64_t ox0 = static_cast<std::int64_t>(std::llround(x0 * scale));
            const std::int64_t oy0 = static_cast<std::int64_t>(std::llround(y0 * scale));
            const std::int64_t ox1 = std::min<std::int64_t>(
                ow, static_cast<std::int64_t>(std::llround((x0 + patch_side) * scale)));
            const std::int64_t oy1 = std::min<std::int64_t>(
                oh, static_cast<std::int64_t>(std::llround((y0 + patch_side) * scale)));
            for (std::int64_t y = oy0; y < oy1; ++y) {
                for (std::int64_t x = ox0; x < ox1; ++x) {
                    auto* p = out.at(x, y);
                    p[0] = static_cast<std::uint8_t>(std::llround((1.0 - alpha) * p[0] + alpha * tr));
                    p[1] = static_cast<std::uint8_t>(std::llround((1.0 - alpha) * p[1]));
                    p[2] = static_cast<std::uint8_t>(std::llround((1.0 - alpha) * p[2] + alpha * tb));
                }
            }
        }
    }
    return out;
}

}  // namespace pipeline
}  // namespace odhn
