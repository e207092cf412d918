#include "odhn/gradcheck.hpp"

#include <cmath>

namespace odhn {

GradCheckResult gradcheck(const std::function<double()>& forward, std::vector<Tensor> leaves,
                          double h, double rtol, double atol) {
    // analytic pass is run by the caller before this; here we only need the
    // stored gradients, so snapshot them first
    std::vector<Eigen::ArrayXd> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves) analytic.push_back(l.grad());

    GradCheckResult res;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& leaf = leaves[li];
        for (std::int64_t i = 0; i < leaf.numel(); ++i) {
            const double orig = leaf.data()[i];
            leaf.data()[i] = orig + h;
            const double fp = forward();
            leaf.data()[i] = orig - h;
            const double fm = forward();
            leaf.data()[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[li][i];
            const double diff = std::abs(a - numeric);
            res.max_abs_diff = std::max(res.max_abs_diff, diff);
            res.max_rel_err = std::max(res.max_rel_err, diff / std::max(std::abs(numeric), 1.0));
            if (diff > atol + rtol * std::abs(numeric)) res.ok = false;
        }
    }
    return res;
}

}  // namespace odhn
