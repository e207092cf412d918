#pragma once

#include <vector>

#include "odhn/tensor.hpp"

namespace odhn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adaptive-moment optimizer over a fixed parameter list. step() applies the
// update from the accumulated gradients and zeroes them; NaN gradients abort.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg = {});

    void step();
    void zero_grad();

    std::int64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return cfg_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<Eigen::ArrayXd> m_;
    std::vector<Eigen::ArrayXd> v_;
    std::int64_t step_count_ = 0;
    AdamConfig cfg_;
};

}  // namespace odhn
