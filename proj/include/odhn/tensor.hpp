#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "odhn/error.hpp"
#include "odhn/rng.hpp"

namespace odhn {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

class Tensor;

namespace detail {

struct Node {
    Shape shape;
    Eigen::ArrayXd value;  // row-major flattened
    Eigen::ArrayXd grad;   // allocated on first use, same length as value
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<Tensor> parents;
    std::function<void(Node&)> backward_fn;  // pulls grad into parent grads

    bool grad_alloc() const { return grad.size() == value.size(); }
};

}  // namespace detail

// Dense float64 tensor, a shared handle into the computation graph.
// Single-threaded per graph; reductions run in a fixed sequential order.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor constant(Shape shape, double fill);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);
    // Truncated at two sigma, the transformer weight init.
    static Tensor trunc_normal(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->value.size(); }
    std::int64_t dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(node_->shape.size()); }

    Eigen::ArrayXd& array() { return node_->value; }
    const Eigen::ArrayXd& array() const { return node_->value; }
    double* data() { return node_->value.data(); }
    const double* data() const { return node_->value.data(); }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg);

    Eigen::ArrayXd& grad();
    const Eigen::ArrayXd& grad() const;
    bool grad_allocated() const { return node_->grad_alloc(); }
    void zero_grad();

    // Value copy severed from the graph.
    Tensor detach() const;

    detail::Node* node() const { return node_.get(); }

    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

// Populates gradients of every requires_grad tensor reachable from `loss`
// by reverse topological traversal. Repeated calls accumulate.
void backward(const Tensor& loss);

// ---- forward ops (each registers a backward rule) ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// mat [n,c] + row vector [c] broadcast over rows (bias add).
Tensor add_rowvec(const Tensor& mat, const Tensor& vec);
// mat [n,c] scaled per row by col [n].
Tensor scale_rows(const Tensor& mat, const Tensor& col);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::int64_t begin, std::int64_t count);
Tensor slice_cols(const Tensor& a, std::int64_t begin, std::int64_t count);
Tensor gather_rows(const Tensor& a, std::vector<std::int64_t> indices);
// Row lookup into a learned table; gradients scatter-add into the table.
Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& indices);

Tensor mean_rows(const Tensor& a);  // [n,c] -> [1,c]
Tensor sum(const Tensor& a);        // -> scalar [1]

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// Row-wise softmax with max subtraction; rank-2 input.
Tensor softmax(const Tensor& a);
// Row-wise layer norm over the last axis with affine gain/bias of length cols.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// x [N,C,H,W], w [F,C,kh,kw], b [F]. im2col + GEMM.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1, int pad = 0);
Tensor maxpool2d(const Tensor& x, int kernel, int stride = 0);  // stride 0 -> kernel
Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C]

Tensor mse_loss(const Tensor& pred, const Tensor& target);  // mean over elements
// Mean of -[w_pos*z*log s(x) + (1-z)*log(1-s(x))]; numerically stable.
Tensor bce_with_logits_loss(const Tensor& logits, const Tensor& targets, double pos_weight = 1.0);

}  // namespace odhn
