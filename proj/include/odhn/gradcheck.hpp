#pragma once

#include <functional>
#include <vector>

#include "odhn/tensor.hpp"

namespace odhn {

struct GradCheckResult {
    bool ok = true;
    double max_abs_diff = 0.0;
    double max_rel_err = 0.0;  // |analytic - numeric| / max(|numeric|, 1)
};

// Central finite differences against the analytic gradients of `leaves`.
// `forward` must rebuild the graph from the leaves' current values and return
// the scalar loss value. rel tolerance applies elementwise as
// |a - n| <= atol + rtol * |n|.
GradCheckResult gradcheck(const std::function<double()>& forward, std::vector<Tensor> leaves,
                          double h = 1e-5, double rtol = 1e-4, double atol = 1e-6);

}  // namespace odhn
