#pragma once

// Finite-difference checks for every registered diffcore op, shared between
// the unit suite and the acceptance gate. Each check rebuilds its graph from
// the leaf tensors so the checker can perturb them.

#include <functional>
#include <string>
#include <vector>

#include "odhn/gradcheck.hpp"
#include "odhn/rng.hpp"
#include "odhn/tensor.hpp"

namespace odhn::testsupport {

struct OpCheck {
    std::string name;
    GradCheckResult result;
};

// Scalar readout with fixed coefficients so every output element contributes
// a distinct weight to the loss.
inline Tensor readout(const Tensor& out, const Tensor& coeffs) {
    return sum(mul(out, coeffs));
}

inline Tensor coeffs_like(const Tensor& t, Rng& rng) {
    Tensor c = Tensor::zeros(t.shape());
    for (std::int64_t i = 0; i < c.numel(); ++i) c.data()[i] = rng.uniform(0.25, 1.75);
    return c;
}

inline OpCheck check_one(const std::string& name, const std::function<Tensor()>& build,
                         std::vector<Tensor> leaves) {
    for (auto& l : leaves) l.zero_grad();
    Tensor loss = build();
    backward(loss);
    auto fd = gradcheck([&]() { return build().item(); }, std::move(leaves));
    return {name, fd};
}

inline std::vector<OpCheck> run_all_op_gradchecks(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<OpCheck> out;

    auto randn = [&](Shape s, double scale = 1.0) { return Tensor::randn(std::move(s), rng, scale, true); };

    {
        Tensor a = randn({3, 4}), b = randn({3, 4});
        Tensor c = coeffs_like(a, rng);
        out.push_back(check_one("add", [&] { return readout(add(a, b), c); }, {a, b}));
        out.push_back(check_one("sub", [&] { return readout(sub(a, b), c); }, {a, b}));
        out.push_back(check_one("mul", [&] { return readout(mul(a, b), c); }, {a, b}));
        out.push_back(check_one("scale", [&] { return readout(scale(a, -1.7), c); }, {a}));
        out.push_back(check_one("add_scalar", [&] { return readout(add_scalar(a, 0.3), c); }, {a}));
    }
    {
        Tensor m = randn({4, 3});
        Tensor v = randn({3});
        Tensor col = randn({4});
        Tensor c = coeffs_like(m, rng);
        out.push_back(check_one("add_rowvec", [&] { return readout(add_rowvec(m, v), c); }, {m, v}));
        out.push_back(check_one("scale_rows", [&] { return readout(scale_rows(m, col), c); }, {m, col}));
    }
    {
        Tensor a = randn({3, 5}), b = randn({5, 2});
        Tensor c = Tensor::zeros({3, 2});
        for (std::int64_t i = 0; i < c.numel(); ++i) c.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(check_one("matmul", [&] { return readout(matmul(a, b), c); }, {a, b}));
    }
    {
        Tensor a = randn({3, 5});
        Tensor ct = Tensor::zeros({5, 3});
        for (std::int64_t i = 0; i < ct.numel(); ++i) ct.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(check_one("transpose", [&] { return readout(transpose(a), ct); }, {a}));
        Tensor cr = Tensor::zeros({5, 3});
        for (std::int64_t i = 0; i < cr.numel(); ++i) cr.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(check_one("reshape", [&] { return readout(reshape(a, {5, 3}), cr); }, {a}));
    }
    {
        Tensor a = randn({2, 4}), b = randn({3, 4});
        Tensor c = Tensor::zeros({5, 4});
        for (std::int64_t i = 0; i < c.numel(); ++i) c.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(check_one("concat_rows", [&] { return readout(concat_rows({a, b}), c); }, {a, b}));
        Tensor a2 = randn({3, 2}), b2 = randn({3, 3});
        Tensor c2 = Tensor::zeros({3, 5});
        for (std::int64_t i = 0; i < c2.numel(); ++i) c2.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(check_one("concat_cols", [&] { return readout(concat_cols({a2, b2}), c2); }, {a2, b2}));
    }
    {
        Tensor a = randn({5, 4});
        Tensor c = Tensor::zeros({2, 4});
        for (std::int64_t i = 0; i < c.numel(); ++i) c.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(check_one("slice_rows", [&] { return readout(slice_rows(a, 1, 2), c); }, {a}));
        Tensor c2 = Tensor::zeros({5, 2});
        for (std::int64_t i = 0; i < c2.numel(); ++i) c2.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(check_one("slice_cols", [&] { return readout(slice_cols(a, 1, 2), c2); }, {a}));
        Tensor c3 = Tensor::zeros({4, 4});
        for (std::int64_t i = 0; i < c3.numel(); ++i) c3.data()[i] = rng.uniform(0.25, 1.75);
        // repeated index exercises scatter-add accumulation
        out.push_back(check_one("gather_rows", [&] { return readout(gather_rows(a, {0, 3, 3, 1}), c3); }, {a}));
        out.push_back(
            check_one("embedding_lookup", [&] { return readout(embedding_lookup(a, {2, 0, 2, 4}), c3); }, {a}));
    }
    {
        Tensor a = randn({6, 3});
        Tensor c = Tensor::zeros({1, 3});
        for (std::int64_t i = 0; i < c.numel(); ++i) c.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(check_one("mean_rows", [&] { return readout(mean_rows(a), c); }, {a}));
        out.push_back(check_one("sum", [&] { return sum(a); }, {a}));
    }
    {
        // keep relu inputs away from the kink at zero
        Tensor a = Tensor::zeros({3, 4}, true);
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            double v = rng.normal();
            a.data()[i] = v + (v >= 0.0 ? 0.2 : -0.2);
        }
        Tensor c = coeffs_like(a, rng);
        out.push_back(check_one("relu", [&] { return readout(relu(a), c); }, {a}));
        Tensor b = randn({3, 4});
        out.push_back(check_one("gelu", [&] { return readout(gelu(b), c); }, {b}));
        out.push_back(check_one("sigmoid", [&] { return readout(sigmoid(b), c); }, {b}));
        out.push_back(check_one("softmax", [&] { return readout(softmax(b), c); }, {b}));
    }
    {
        Tensor a = randn({4, 6});
        Tensor g = randn({6}), b = randn({6});
        Tensor c = coeffs_like(a, rng);
        out.push_back(
            check_one("layer_norm", [&] { return readout(layer_norm(a, g, b), c); }, {a, g, b}));
    }
    {
        Tensor x = randn({2, 3, 6, 6});
        Tensor w = randn({4, 3, 3, 3}, 0.5);
        Tensor b = randn({4}, 0.5);
        Tensor c = Tensor::zeros({2, 4, 3, 3});
        for (std::int64_t i = 0; i < c.numel(); ++i) c.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(
            check_one("conv2d", [&] { return readout(conv2d(x, w, b, 2, 1), c); }, {x, w, b}));
    }
    {
        Tensor x = Tensor::zeros({2, 2, 4, 4}, true);
        // well-separated values so h=1e-5 cannot flip the argmax
        std::vector<std::int64_t> perm(x.numel());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<std::int64_t>(i);
        Rng shuffler(seed + 17);
        shuffler.shuffle(perm);
        for (std::int64_t i = 0; i < x.numel(); ++i) x.data()[i] = 0.01 * static_cast<double>(perm[i]);
        Tensor c = Tensor::zeros({2, 2, 2, 2});
        for (std::int64_t i = 0; i < c.numel(); ++i) c.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(check_one("maxpool2d", [&] { return readout(maxpool2d(x, 2), c); }, {x}));
        Tensor c2 = Tensor::zeros({2, 2});
        for (std::int64_t i = 0; i < c2.numel(); ++i) c2.data()[i] = rng.uniform(0.25, 1.75);
        out.push_back(check_one("global_avg_pool", [&] { return readout(global_avg_pool(x), c2); }, {x}));
    }
    {
        Tensor p = randn({3, 4}), t = randn({3, 4});
        out.push_back(check_one("mse_loss", [&] { return mse_loss(p, t); }, {p, t}));
        Tensor logits = randn({5, 1});
        Tensor z = Tensor::zeros({5, 1}, true);
        for (std::int64_t i = 0; i < z.numel(); ++i) z.data()[i] = rng.uniform();
        out.push_back(check_one("bce_with_logits_loss",
                                [&] { return bce_with_logits_loss(logits, z, 2.5); }, {logits, z}));
    }
    return out;
}

}  // namespace odhn::testsupport
