#include "odhn/clinreg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "odhn/rng.hpp"
#include "odhn/stats.hpp"

namespace odhn {
namespace clin {

const std::array<const char*, kFeatureCount> kFeatureNames = {
    "age",     "tumor_size", "grade",   "hist_IDC",   "hist_IDC_ILC", "hist_ILC",
    "hist_OTHER", "pr_pos",  "her2_pos", "pr_missing", "her2_missing"};

std::string to_string(Penalty p) { return p == Penalty::L1 ? "L1" : "L2"; }

std::vector<GridPoint> default_grid() {
    std::vector<GridPoint> grid;
    for (double s : {0.01, 0.1, 1.0, 10.0, 100.0})
        for (Penalty p : {Penalty::L1, Penalty::L2}) grid.push_back({s, p});
    return grid;
}

Standardizer fit_standardizer(std::span<const LabeledRecord> train) {
    if (train.empty()) throw DomainError("fit_standardizer: empty training set");
    Standardizer s;
    double age_sum = 0.0, size_sum = 0.0;
    for (const auto& r : train) {
        age_sum += r.record.age_years;
        size_sum += r.record.tumor_size_mm;
    }
    const double n = static_cast<double>(train.size());
    s.age_mean = age_sum / n;
    s.size_mean = size_sum / n;
    double age_var = 0.0, size_var = 0.0;
    for (const auto& r : train) {
        age_var += (r.record.age_years - s.age_mean) * (r.record.age_years - s.age_mean);
        size_var += (r.record.tumor_size_mm - s.size_mean) * (r.record.tumor_size_mm - s.size_mean);
    }
    s.age_std = std::sqrt(age_var / n);
    s.size_std = std::sqrt(size_var / n);
    if (s.age_std == 0.0) s.age_std = 1.0;
    if (s.size_std == 0.0) s.size_std = 1.0;
    return s;
}

Eigen::VectorXd encode_record(const ClinicalRecord& record, const Standardizer& s) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(kFeatureCount);
    x[0] = (record.age_years - s.age_mean) / s.age_std;
    x[1] = (record.tumor_size_mm - s.size_mean) / s.size_std;
    x[2] = static_cast<double>(record.grade);
    switch (record.histologic_subtype) {
        case Histology::IDC: x[3] = 1.0; break;
        case Histology::IDC_ILC: x[4] = 1.0; break;
        case Histology::ILC: x[5] = 1.0; break;
        case Histology::OTHER: x[6] = 1.0; break;
    }
    x[7] = record.pr == TriState::Positive ? 1.0 : 0.0;
    x[8] = record.her2 == TriState::Positive ? 1.0 : 0.0;
    x[9] = record.pr_missing ? 1.0 : 0.0;
    x[10] = record.her2_missing ? 1.0 : 0.0;
    return x;
}

namespace {

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct Design {
    Eigen::MatrixXd x;  // n x kFeatureCount
    Eigen::VectorXd y;  // 0/1
};

Design build_design(std::span<const LabeledRecord> rows, const Standardizer& s) {
    Design d;
    d.x.resize(static_cast<Eigen::Index>(rows.size()), kFeatureCount);
    d.y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        d.x.row(static_cast<Eigen::Index>(i)) = encode_record(rows[i].record, s).transpose();
        d.y[static_cast<Eigen::Index>(i)] = rows[i].label == RiskCategory::High ? 1.0 : 0.0;
    }
    return d;
}

// Full-batch (proximal) gradient descent with a Lipschitz step size.
void solve_logistic(const Design& d, double strength, Penalty penalty, const FitOptions& opt,
                    Eigen::VectorXd& w, double& b) {
    const Eigen::Index n = d.x.rows();
    if (n == 0) throw DomainError("logistic fit: empty design");

    // L = sigma_max^2([X 1]) / (4n) + lambda bounds the curvature
    Eigen::MatrixXd xt(n, kFeatureCount + 1);
    xt.leftCols(kFeatureCount) = d.x;
    xt.col(kFeatureCount).setOnes();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(xt.transpose() * xt);
    const double lip = es.eigenvalues().maxCoeff() / (4.0 * static_cast<double>(n)) + strength;
    const double step = 1.0 / lip;

    Eigen::VectorXd p(n), residual(n), grad(kFeatureCount);
    for (int it = 0; it < opt.max_iterations; ++it) {
        const Eigen::VectorXd z = d.x * w + Eigen::VectorXd::Constant(n, b);
        for (Eigen::Index i = 0; i < n; ++i) p[i] = stable_sigmoid(z[i]);
        residual = p - d.y;
        grad = d.x.transpose() * residual / static_cast<double>(n);
        const double grad_b = residual.sum() / static_cast<double>(n);

        if (penalty == Penalty::L2) {
            grad += strength * w;
            const double sup = std::max(grad.cwiseAbs().maxCoeff(), std::abs(grad_b));
            if (sup < opt.tolerance) return;
            w -= step * grad;
            b -= step * grad_b;
        } else {
            // ISTA: gradient step on the smooth part, soft threshold for L1
            Eigen::VectorXd w_next = w - step * grad;
            const double thr = step * strength;
            for (Eigen::Index k = 0; k < w_next.size(); ++k) {
                if (w_next[k] > thr)
                    w_next[k] -= thr;
                else if (w_next[k] < -thr)
                    w_next[k] += thr;
                else
                    w_next[k] = 0.0;
            }
            const double b_next = b - step * grad_b;
            const double sup = std::max((w - w_next).cwiseAbs().maxCoeff() / step,
                                        std::abs(b - b_next) / step);
            w = w_next;
            b = b_next;
            if (sup < opt.tolerance) return;
        }
    }
}

LogisticModel fit_single(std::span<const LabeledRecord> rows, const Standardizer& s, double strength,
                         Penalty penalty, const FitOptions& opt) {
    const Design d = build_design(rows, s);
    LogisticModel m;
    m.standardizer = s;
    m.strength = strength;
    m.penalty = penalty;
    m.weights.setZero(kFeatureCount);
    m.intercept = 0.0;
    solve_logistic(d, strength, penalty, opt, m.weights, m.intercept);
    if (!m.weights.allFinite() || !std::isfinite(m.intercept))
        throw TrainingError("logistic fit diverged");
    return m;
}

double eval_auc(const LogisticModel& m, std::span<const LabeledRecord> rows) {
    stats::ScoredCohort c;
    for (const auto& r : rows) {
        c.scores.push_back(predict_proba(m, r.record));
        c.labels.push_back(r.label);
    }
    return stats::auc(c);
}

// Stratified k folds; returns fold index per row.
std::vector<int> stratified_folds(std::span<const LabeledRecord> rows, int k, Rng& rng) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < rows.size(); ++i)
        (rows[i].label == RiskCategory::High ? pos : neg).push_back(i);
    rng.shuffle(pos);
    rng.shuffle(neg);
    std::vector<int> fold(rows.size(), 0);
    int f = 0;
    for (auto i : pos) fold[i] = f++ % k;
    f = 0;
    for (auto i : neg) fold[i] = f++ % k;
    return fold;
}

// Every held-out fold needs both classes, or its AUC is undefined.
bool folds_two_class(std::span<const LabeledRecord> rows, const std::vector<int>& fold, int k) {
    for (int f = 0; f < k; ++f) {
        bool has_pos = false, has_neg = false;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (fold[i] != f) continue;
            if (rows[i].label == RiskCategory::High)
                has_pos = true;
            else
                has_neg = true;
        }
        if (!has_pos || !has_neg) return false;
    }
    return true;
}

double cv_auc(std::span<const LabeledRecord> rows, const Standardizer& s, const GridPoint& gp,
              const FitOptions& opt) {
    std::vector<int> fold;
    bool ok = false;
    for (int attempt = 0; attempt < 2 && !ok; ++attempt) {
        Rng rng(opt.seed + static_cast<std::uint64_t>(attempt) * 7919);
        fold = stratified_folds(rows, opt.cv_folds, rng);
        ok = folds_two_class(rows, fold, opt.cv_folds);
    }
    if (!ok)
        throw Error("grid search: cannot stratify " + std::to_string(opt.cv_folds) +
                    " folds with both classes; too few minority patients");

    double total = 0.0;
    for (int f = 0; f < opt.cv_folds; ++f) {
        std::vector<LabeledRecord> fit_rows, eval_rows;
        for (std::size_t i = 0; i < rows.size(); ++i)
            (fold[i] == f ? eval_rows : fit_rows).push_back(rows[i]);
        const LogisticModel m = fit_single(fit_rows, s, gp.strength, gp.penalty, opt);
        total += eval_auc(m, eval_rows);
    }
    return total / static_cast<double>(opt.cv_folds);
}

}  // namespace

LogisticModel fit(std::span<const LabeledRecord> train, std::span<const LabeledRecord> dev,
                  std::span<const GridPoint> grid, const FitOptions& options) {
    if (grid.empty()) throw ConfigError("fit: empty hyperparameter grid");
    bool train_pos = false, train_neg = false;
    for (const auto& r : train) (r.label == RiskCategory::High ? train_pos : train_neg) = true;
    if (!train_pos || !train_neg) throw DomainError("fit: training set has a single class");

    const Standardizer s = fit_standardizer(train);

    GridPoint best = grid[0];
    double best_auc = 0.0;
    if (grid.size() == 1) {
        best = grid[0];
    } else {
        std::span<const LabeledRecord> cv_rows = options.cv_on_train ? train : dev;
        bool first = true;
        for (const auto& gp : grid) {
            const double a = cv_auc(cv_rows, s, gp, options);
            const bool better =
                first || a > best_auc ||
                (a == best_auc && (gp.strength > best.strength ||
                                   (gp.strength == best.strength && gp.penalty == Penalty::L2 &&
                                    best.penalty == Penalty::L1)));
            if (better) {
                best = gp;
                best_auc = a;
            }
            first = false;
        }
    }

    std::vector<LabeledRecord> refit(train.begin(), train.end());
    refit.insert(refit.end(), dev.begin(), dev.end());
    LogisticModel m = fit_single(refit, s, best.strength, best.penalty, options);
    m.cv_auc = best_auc;
    return m;
}

double predict_proba(const LogisticModel& model, const ClinicalRecord& record) {
    const Eigen::VectorXd x = encode_record(record, model.standardizer);
    return stable_sigmoid(model.weights.dot(x) + model.intercept);
}

std::vector<std::pair<std::string, double>> feature_importance(const LogisticModel& model) {
    std::vector<int> order(kFeatureCount);
    for (int i = 0; i < kFeatureCount; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return std::abs(model.weights[a]) > std::abs(model.weights[b]);
    });
    std::vector<std::pair<std::string, double>> out;
    out.reserve(kFeatureCount);
    for (int i : order) out.emplace_back(kFeatureNames[static_cast<std::size_t>(i)], model.weights[i]);
    return out;
}

std::string importance_csv(const LogisticModel& model) {
    std::ostringstream os;
    os << "feature,coefficient,abs_rank\n";
    int rank = 1;
    os.precision(17);
    for (const auto& [name, coef] : feature_importance(model)) os << name << ',' << coef << ',' << rank++ << "\n";
    return os.str();
}

void add_to_checkpoint(Checkpoint& cp, const LogisticModel& model) {
    std::vector<double> w(model.weights.data(), model.weights.data() + kFeatureCount);
    cp.add("clinreg.weights", Tensor::from_data({kFeatureCount}, std::move(w)));
    cp.add("clinreg.intercept", Tensor::scalar(model.intercept));
    cp.add("clinreg.standardizer",
           Tensor::from_data({4}, {model.standardizer.age_mean, model.standardizer.age_std,
                                   model.standardizer.size_mean, model.standardizer.size_std}));
    cp.add("clinreg.selected",
           Tensor::from_data({3}, {model.strength, model.penalty == Penalty::L2 ? 1.0 : 0.0,
                                   model.cv_auc}));
}

LogisticModel from_checkpoint(const Checkpoint& cp) {
    LogisticModel m;
    const Tensor w = cp.require("clinreg.weights", {kFeatureCount});
    for (int i = 0; i < kFeatureCount; ++i) m.weights[i] = w.data()[i];
    m.intercept = cp.require("clinreg.intercept", {1}).item();
    const Tensor s = cp.require("clinreg.standardizer", {4});
    m.standardizer = {s.data()[0], s.data()[1], s.data()[2], s.data()[3]};
    const Tensor sel = cp.require("clinreg.selected", {3});
    m.strength = sel.data()[0];
    m.penalty = sel.data()[1] > 0.5 ? Penalty::L2 : Penalty::L1;
    m.cv_auc = sel.data()[2];
    return m;
}

}  // namespace clin
}  // namespace odhn
