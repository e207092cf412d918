#include "odhn/stats.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

#include "odhn/rng.hpp"

namespace odhn {
namespace stats {

void ScoredCohort::validate() const {
    if (scores.size() != labels.size() ||
        (!patient_ids.empty() && patient_ids.size() != scores.size()))
        throw IntegrityError("scored cohort: misaligned columns");
    if (!patient_ids.empty()) {
        std::set<std::string> ids(patient_ids.begin(), patient_ids.end());
        if (ids.size() != patient_ids.size())
            throw IntegrityError("scored cohort: duplicate patient ids");
    }
    for (double s : scores)
        if (!std::isfinite(s)) throw DomainError("scored cohort: non-finite score");
}

std::vector<std::pair<std::string, double>> aggregate_patient(
    const std::vector<std::pair<std::string, double>>& slide_scores) {
    if (slide_scores.empty()) throw DomainError("aggregate_patient: empty input");
    std::vector<std::string> order;
    std::map<std::string, std::pair<double, std::size_t>> acc;
    for (const auto& [pid, score] : slide_scores) {
        auto [it, fresh] = acc.try_emplace(pid, std::make_pair(0.0, std::size_t{0}));
        if (fresh) order.push_back(pid);
        it->second.first += score;
        it->second.second += 1;
    }
    std::vector<std::pair<std::string, double>> out;
    out.reserve(order.size());
    for (const auto& pid : order) {
        const auto& [total, n] = acc.at(pid);
        out.emplace_back(pid, total / static_cast<double>(n));
    }
    return out;
}

namespace {

// Midranks shared by auc and the U statistic.
std::vector<double> midranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double auc_from_ranks(std::span<const double> scores, const std::vector<bool>& is_high) {
    const auto ranks = midranks(scores);
    double r_high = 0.0;
    std::size_t n_high = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (is_high[i]) {
            r_high += ranks[i];
            ++n_high;
        }
    }
    const std::size_t n_low = scores.size() - n_high;
    if (n_high == 0 || n_low == 0) throw DomainError("undefined AUC: cohort has a single class");
    const double u = r_high - 0.5 * static_cast<double>(n_high) * static_cast<double>(n_high + 1);
    return u / (static_cast<double>(n_high) * static_cast<double>(n_low));
}

}  // namespace

double auc(const ScoredCohort& cohort) {
    cohort.validate();
    std::vector<bool> is_high(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) is_high[i] = cohort.labels[i] == RiskCategory::High;
    return auc_from_ranks(cohort.scores, is_high);
}

std::vector<RocPoint> roc_curve(const ScoredCohort& cohort) {
    cohort.validate();
    std::size_t n_high = 0;
    for (auto l : cohort.labels) n_high += l == RiskCategory::High;
    const std::size_t n_low = cohort.size() - n_high;
    if (n_high == 0 || n_low == 0) throw DomainError("roc_curve: cohort has a single class");

    std::vector<std::size_t> idx(cohort.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return cohort.scores[a] > cohort.scores[b]; });

    std::vector<RocPoint> curve;
    curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < idx.size()) {
        const double t = cohort.scores[idx[i]];
        while (i < idx.size() && cohort.scores[idx[i]] == t) {
            if (cohort.labels[idx[i]] == RiskCategory::High)
                ++tp;
            else
                ++fp;
            ++i;
        }
        curve.push_back({static_cast<double>(fp) / static_cast<double>(n_low),
                         static_cast<double>(tp) / static_cast<double>(n_high), t});
    }
    return curve;
}

double trapezoid_area(const std::vector<RocPoint>& curve) {
    double area = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i)
        area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) * 0.5;
    return area;
}

std::vector<double> bootstrap_replicates(const ScoredCohort& cohort, std::size_t iterations,
                                         std::uint64_t seed) {
    if (iterations == 0) throw ConfigError("bootstrap: iterations must be positive");
    cohort.validate();
    const std::size_t n = cohort.size();
    std::vector<double> reps(iterations);
    std::vector<double> scores(n);
    std::vector<bool> is_high(n);
    for (std::size_t r = 0; r < iterations; ++r) {
        Rng rng(seed + r);
        bool ok = false;
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            std::size_t highs = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t k = static_cast<std::size_t>(rng.below(n));
                scores[i] = cohort.scores[k];
                is_high[i] = cohort.labels[k] == RiskCategory::High;
                highs += is_high[i];
            }
            ok = highs > 0 && highs < n;
        }
        if (!ok) throw Error("bootstrap: degenerate cohort, replicates keep a single class");
        reps[r] = auc_from_ranks(scores, is_high);
    }
    return reps;
}

BootstrapCi bootstrap_ci(const ScoredCohort& cohort, std::size_t iterations, double level,
                         std::uint64_t seed) {
    if (level <= 0.0 || level >= 1.0) throw ConfigError("bootstrap_ci: level must be in (0,1)");
    BootstrapCi ci;
    ci.point = auc(cohort);  // also validates and checks both classes

    std::vector<double> reps = bootstrap_replicates(cohort, iterations, seed);
    std::sort(reps.begin(), reps.end());
    const double alpha = (1.0 - level) / 2.0;
    auto quantile = [&](double q) {
        const double h = q * static_cast<double>(reps.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(std::floor(h));
        const double frac = h - static_cast<double>(lo);
        if (lo + 1 >= reps.size()) return reps.back();
        return reps[lo] + frac * (reps[lo + 1] - reps[lo]);
    };
    ci.lo = quantile(alpha);
    ci.hi = quantile(1.0 - alpha);
    return ci;
}

double r_squared(std::span<const double> targets, std::span<const double> predictions) {
    if (targets.size() != predictions.size())
        throw IntegrityError("r_squared: length mismatch " + std::to_string(targets.size()) + " vs " +
                             std::to_string(predictions.size()));
    if (targets.size() < 2) throw DomainError("r_squared: need at least 2 points");
    double mean = 0.0;
    for (double t : targets) mean += t;
    mean /= static_cast<double>(targets.size());
    double ss_tot = 0.0, ss_res = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        ss_tot += (targets[i] - mean) * (targets[i] - mean);
        ss_res += (targets[i] - predictions[i]) * (targets[i] - predictions[i]);
    }
    if (ss_tot == 0.0) return 0.0;
    return 1.0 - ss_res / ss_tot;
}

namespace {

double u_statistic(std::span<const double> a, std::span<const double> b) {
    std::vector<double> pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto ranks = midranks(pooled);
    double r_a = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) r_a += ranks[i];
    return r_a - 0.5 * static_cast<double>(a.size()) * static_cast<double>(a.size() + 1);
}

double exact_two_sided_p(std::span<const double> a, std::span<const double> b, double u_obs) {
    const std::size_t n = a.size(), m = b.size(), total = n + m;
    std::vector<double> pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto ranks = midranks(pooled);
    const double mu = 0.5 * static_cast<double>(n) * static_cast<double>(m);
    const double dev = std::abs(u_obs - mu);
    const double base = 0.5 * static_cast<double>(n) * static_cast<double>(n + 1);

    std::size_t hits = 0, count = 0;
    for (std::uint32_t mask = 0; mask < (1u << total); ++mask) {
        if (static_cast<std::size_t>(std::popcount(mask)) != n) continue;
        ++count;
        double r = 0.0;
        for (std::size_t i = 0; i < total; ++i)
            if (mask & (1u << i)) r += ranks[i];
        if (std::abs((r - base) - mu) >= dev - 1e-12) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(count);
}

double normal_two_sided_p(std::span<const double> a, std::span<const double> b, double u_obs) {
    const double n = static_cast<double>(a.size()), m = static_cast<double>(b.size());
    const double big_n = n + m;
    std::map<double, std::size_t> tie_counts;
    for (double v : a) ++tie_counts[v];
    for (double v : b) ++tie_counts[v];
    double tie_sum = 0.0;
    for (const auto& [v, t] : tie_counts) {
        const double td = static_cast<double>(t);
        tie_sum += td * td * td - td;
    }
    const double var = (n * m / 12.0) * ((big_n + 1.0) - tie_sum / (big_n * (big_n - 1.0)));
    if (var <= 0.0) return 1.0;
    double d = u_obs - 0.5 * n * m;
    // continuity correction toward the mean
    if (d > 0.5)
        d -= 0.5;
    else if (d < -0.5)
        d += 0.5;
    else
        return 1.0;
    const double z = d / std::sqrt(var);
    return std::min(1.0, std::erfc(std::abs(z) / std::numbers::sqrt2));
}

}  // namespace

MannWhitneyResult compare_models(std::span<const double> replicates_a,
                                 std::span<const double> replicates_b, std::size_t m_comparisons) {
    if (replicates_a.empty() || replicates_b.empty())
        throw Error("compare_models: empty replicate vector");
    if (m_comparisons == 0) throw ConfigError("compare_models: m_comparisons must be positive");

    MannWhitneyResult res;
    res.u = u_statistic(replicates_a, replicates_b);
    if (replicates_a.size() + replicates_b.size() <= 12) {
        res.exact = true;
        res.p_raw = exact_two_sided_p(replicates_a, replicates_b, res.u);
    } else {
        res.p_raw = normal_two_sided_p(replicates_a, replicates_b, res.u);
    }
    res.p_adjusted = std::min(1.0, res.p_raw * static_cast<double>(m_comparisons));
    return res;
}

double mann_whitney_u(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw Error("mann_whitney_u: empty sample");
    return u_statistic(a, b);
}

double mann_whitney_exact_p(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw Error("mann_whitney_exact_p: empty sample");
    if (a.size() + b.size() > 24)
        throw DomainError("mann_whitney_exact_p: enumeration limited to n + m <= 24");
    return exact_two_sided_p(a, b, u_statistic(a, b));
}

double mann_whitney_normal_p(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw Error("mann_whitney_normal_p: empty sample");
    return normal_two_sided_p(a, b, u_statistic(a, b));
}

double youden_threshold(const ScoredCohort& cohort) {
    const auto curve = roc_curve(cohort);
    double best_j = -1.0;
    double best_t = curve.back().threshold;
    for (const auto& p : curve) {
        if (!std::isfinite(p.threshold)) continue;  // skip the synthetic (0,0) endpoint
        const double j = p.tpr - p.fpr;
        if (j > best_j) {
            best_j = j;
            best_t = p.threshold;
        }
    }
    return best_t;
}

ConfusionCounts confusion_at(const ScoredCohort& cohort, double threshold) {
    cohort.validate();
    ConfusionCounts c;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const bool pred_high = cohort.scores[i] >= threshold;
        const bool is_high = cohort.labels[i] == RiskCategory::High;
        if (pred_high && is_high) ++c.tp;
        if (pred_high && !is_high) ++c.fp;
        if (!pred_high && is_high) ++c.fn;
        if (!pred_high && !is_high) ++c.tn;
    }
    return c;
}

}  // namespace stats
}  // namespace odhn
