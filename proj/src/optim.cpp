#include "odhn/optim.hpp"

#include <cmath>

namespace odhn {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.push_back(Eigen::ArrayXd::Zero(p.numel()));
        v_.push_back(Eigen::ArrayXd::Zero(p.numel()));
    }
}

void Adam::step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.grad_allocated()) continue;  // parameter not touched by any graph yet
        const Eigen::ArrayXd& g = p.grad();
        if (!g.isFinite().all()) throw TrainingError("opt_step: non-finite gradient");
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.square();
        p.array() -= cfg_.lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + cfg_.eps);
        p.zero_grad();
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace odhn
