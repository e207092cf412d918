#include "odhn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace odhn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        if (d <= 0) throw ShapeError("tensor shape has nonpositive dim " + shape_str(s));
        n *= d;
    }
    return n;
}

namespace {

std::shared_ptr<detail::Node> new_node(Shape shape) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value.resize(shape_numel(n->shape));
    return n;
}

Tensor make_op(Shape shape, std::string op, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward_fn) {
    auto n = new_node(std::move(shape));
    n->op = std::move(op);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor::wrap(std::move(n));
}

void ensure_grad(detail::Node* n) {
    if (!n->grad_alloc()) n->grad = Eigen::ArrayXd::Zero(n->value.size());
}

// Accumulate into a parent's gradient if it participates in the graph.
template <typename Expr>
void acc(detail::Node* p, const Expr& e) {
    if (!p->requires_grad) return;
    ensure_grad(p);
    p->grad += e;
}

detail::Node* parent(detail::Node& self, std::size_t i) { return self.parents[i].node(); }

void check_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

CMatMap cmat(const detail::Node* n) {
    return CMatMap(n->value.data(), n->shape[0], n->shape[1]);
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = new_node(std::move(shape));
    n->value.setZero();
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::constant(Shape shape, double fill) {
    auto n = new_node(std::move(shape));
    n->value.setConstant(fill);
    return wrap(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    auto n = new_node(std::move(shape));
    if (static_cast<std::int64_t>(data.size()) != n->value.size())
        throw ShapeError("from_data: " + std::to_string(data.size()) + " values for shape " + shape_str(n->shape));
    std::copy(data.begin(), data.end(), n->value.data());
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    auto n = new_node(std::move(shape));
    for (std::int64_t i = 0; i < n->value.size(); ++i) n->value[i] = rng.normal(0.0, stddev);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::trunc_normal(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    auto n = new_node(std::move(shape));
    for (std::int64_t i = 0; i < n->value.size(); ++i) n->value[i] = rng.trunc_normal(0.0, stddev);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
}

Eigen::ArrayXd& Tensor::grad() {
    ensure_grad(node_.get());
    return node_->grad;
}

const Eigen::ArrayXd& Tensor::grad() const {
    ensure_grad(node_.get());
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_->grad_alloc()) node_->grad.setZero();
}

Tensor Tensor::detach() const {
    auto n = new_node(node_->shape);
    n->value = node_->value;
    return wrap(std::move(n));
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw DomainError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS; reversed post-order is a topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next].node();
            ++next;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior nodes carry transient gradients: reset them so repeated calls
    // accumulate only into leaves.
    for (detail::Node* n : order) {
        if (n->backward_fn) {
            ensure_grad(n);
            n->grad.setZero();
        }
    }
    ensure_grad(loss.node());
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = make_op(a.shape(), "add", {a, b}, [](detail::Node& self) {
        acc(parent(self, 0), self.grad);
        acc(parent(self, 1), self.grad);
    });
    out.array() = a.array() + b.array();
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = make_op(a.shape(), "sub", {a, b}, [](detail::Node& self) {
        acc(parent(self, 0), self.grad);
        acc(parent(self, 1), -self.grad);
    });
    out.array() = a.array() - b.array();
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = make_op(a.shape(), "mul", {a, b}, [](detail::Node& self) {
        acc(parent(self, 0), self.grad * parent(self, 1)->value);
        acc(parent(self, 1), self.grad * parent(self, 0)->value);
    });
    out.array() = a.array() * b.array();
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = make_op(a.shape(), "scale", {a}, [s](detail::Node& self) {
        acc(parent(self, 0), s * self.grad);
    });
    out.array() = s * a.array();
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = make_op(a.shape(), "add_scalar", {a}, [](detail::Node& self) {
        acc(parent(self, 0), self.grad);
    });
    out.array() = a.array() + s;
    return out;
}

Tensor add_rowvec(const Tensor& mat_t, const Tensor& vec) {
    check_rank2(mat_t, "add_rowvec");
    if (vec.rank() != 1 || vec.dim(0) != mat_t.dim(1))
        throw ShapeError("add_rowvec: vector " + shape_str(vec.shape()) + " does not match matrix " +
                         shape_str(mat_t.shape()));
    Tensor out = make_op(mat_t.shape(), "add_rowvec", {mat_t, vec}, [](detail::Node& self) {
        acc(parent(self, 0), self.grad);
        detail::Node* v = parent(self, 1);
        if (v->requires_grad) {
            ensure_grad(v);
            CMatMap g(self.grad.data(), self.shape[0], self.shape[1]);
            Eigen::Map<Eigen::VectorXd>(v->grad.data(), v->grad.size()) += g.colwise().sum().transpose();
        }
    });
    MatMap o(out.data(), out.dim(0), out.dim(1));
    o = cmat(mat_t.node()).rowwise() +
        Eigen::Map<const Eigen::RowVectorXd>(vec.data(), vec.numel());
    return out;
}

Tensor scale_rows(const Tensor& mat_t, const Tensor& col) {
    check_rank2(mat_t, "scale_rows");
    if (col.rank() != 1 || col.dim(0) != mat_t.dim(0))
        throw ShapeError("scale_rows: column " + shape_str(col.shape()) + " does not match matrix " +
                         shape_str(mat_t.shape()));
    Tensor out = make_op(mat_t.shape(), "scale_rows", {mat_t, col}, [](detail::Node& self) {
        detail::Node* m = parent(self, 0);
        detail::Node* c = parent(self, 1);
        const std::int64_t rows = self.shape[0], cols = self.shape[1];
        CMatMap g(self.grad.data(), rows, cols);
        if (m->requires_grad) {
            ensure_grad(m);
            MatMap gm(m->grad.data(), rows, cols);
            gm.array() += g.array().colwise() * Eigen::Map<const Eigen::ArrayXd>(c->value.data(), rows);
        }
        if (c->requires_grad) {
            ensure_grad(c);
            CMatMap mv(m->value.data(), rows, cols);
            Eigen::Map<Eigen::ArrayXd>(c->grad.data(), rows) +=
                (g.array() * mv.array()).rowwise().sum();
        }
    });
    MatMap o(out.data(), out.dim(0), out.dim(1));
    o.array() = cmat(mat_t.node()).array().colwise() *
                Eigen::Map<const Eigen::ArrayXd>(col.data(), col.numel());
    return out;
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out = make_op({a.dim(0), b.dim(1)}, "matmul", {a, b}, [](detail::Node& self) {
        detail::Node* a_n = parent(self, 0);
        detail::Node* b_n = parent(self, 1);
        CMatMap g(self.grad.data(), self.shape[0], self.shape[1]);
        if (a_n->requires_grad) {
            ensure_grad(a_n);
            MatMap ga(a_n->grad.data(), a_n->shape[0], a_n->shape[1]);
            ga.noalias() += g * cmat(b_n).transpose();
        }
        if (b_n->requires_grad) {
            ensure_grad(b_n);
            MatMap gb(b_n->grad.data(), b_n->shape[0], b_n->shape[1]);
            gb.noalias() += cmat(a_n).transpose() * g;
        }
    });
    MatMap o(out.data(), out.dim(0), out.dim(1));
    o.noalias() = cmat(a.node()) * cmat(b.node());
    return out;
}

Tensor transpose(const Tensor& a) {
    check_rank2(a, "transpose");
    Tensor out = make_op({a.dim(1), a.dim(0)}, "transpose", {a}, [](detail::Node& self) {
        detail::Node* a_n = parent(self, 0);
        if (a_n->requires_grad) {
            ensure_grad(a_n);
            MatMap ga(a_n->grad.data(), a_n->shape[0], a_n->shape[1]);
            ga += CMatMap(self.grad.data(), self.shape[0], self.shape[1]).transpose();
        }
    });
    MatMap o(out.data(), out.dim(0), out.dim(1));
    o = cmat(a.node()).transpose();
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor out = make_op(std::move(shape), "reshape", {a}, [](detail::Node& self) {
        acc(parent(self, 0), self.grad);
    });
    out.array() = a.array();
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    const std::int64_t cols = parts[0].dim(1);
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        check_rank2(p, "concat_rows");
        if (p.dim(1) != cols)
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
        rows += p.dim(0);
    }
    Tensor out = make_op({rows, cols}, "concat_rows", parts, [](detail::Node& self) {
        std::int64_t r = 0;
        const std::int64_t cols = self.shape[1];
        for (auto& pt : self.parents) {
            detail::Node* p = pt.node();
            const std::int64_t pr = p->shape[0];
            if (p->requires_grad) {
                ensure_grad(p);
                Eigen::Map<Eigen::ArrayXd>(p->grad.data(), pr * cols) +=
                    Eigen::Map<const Eigen::ArrayXd>(self.grad.data() + r * cols, pr * cols);
            }
            r += pr;
        }
    });
    std::int64_t r = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + r * cols);
        r += p.dim(0);
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    const std::int64_t rows = parts[0].dim(0);
    std::int64_t cols = 0;
    for (const auto& p : parts) {
        check_rank2(p, "concat_cols");
        if (p.dim(0) != rows)
            throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
        cols += p.dim(1);
    }
    Tensor out = make_op({rows, cols}, "concat_cols", parts, [](detail::Node& self) {
        std::int64_t c = 0;
        for (auto& pt : self.parents) {
            detail::Node* p = pt.node();
            const std::int64_t pc = p->shape[1];
            if (p->requires_grad) {
                ensure_grad(p);
                MatMap gp(p->grad.data(), p->shape[0], pc);
                gp += CMatMap(self.grad.data(), self.shape[0], self.shape[1]).middleCols(c, pc);
            }
            c += pc;
        }
    });
    MatMap o(out.data(), rows, cols);
    std::int64_t c = 0;
    for (const auto& p : parts) {
        o.middleCols(c, p.dim(1)) = cmat(p.node());
        c += p.dim(1);
    }
    return out;
}

Tensor slice_rows(const Tensor& a, std::int64_t begin, std::int64_t count) {
    check_rank2(a, "slice_rows");
    if (begin < 0 || count <= 0 || begin + count > a.dim(0))
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") out of " + shape_str(a.shape()));
    const std::int64_t cols = a.dim(1);
    Tensor out = make_op({count, cols}, "slice_rows", {a}, [begin, count](detail::Node& self) {
        detail::Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        ensure_grad(p);
        const std::int64_t cols = self.shape[1];
        Eigen::Map<Eigen::ArrayXd>(p->grad.data() + begin * cols, count * cols) += self.grad;
    });
    std::copy(a.data() + begin * cols, a.data() + (begin + count) * cols, out.data());
    return out;
}

Tensor slice_cols(const Tensor& a, std::int64_t begin, std::int64_t count) {
    check_rank2(a, "slice_cols");
    if (begin < 0 || count <= 0 || begin + count > a.dim(1))
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") out of " + shape_str(a.shape()));
    Tensor out = make_op({a.dim(0), count}, "slice_cols", {a}, [begin, count](detail::Node& self) {
        detail::Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        ensure_grad(p);
        MatMap gp(p->grad.data(), p->shape[0], p->shape[1]);
        gp.middleCols(begin, count) += CMatMap(self.grad.data(), self.shape[0], self.shape[1]);
    });
    MatMap o(out.data(), out.dim(0), out.dim(1));
    o = cmat(a.node()).middleCols(begin, count);
    return out;
}

namespace {

Tensor gather_impl(const Tensor& a, std::vector<std::int64_t> indices, const char* opname) {
    check_rank2(a, opname);
    if (indices.empty()) throw ShapeError(std::string(opname) + ": empty index list");
    for (auto i : indices)
        if (i < 0 || i >= a.dim(0))
            throw DomainError(std::string(opname) + ": index " + std::to_string(i) + " out of " +
                              shape_str(a.shape()));
    const std::int64_t cols = a.dim(1);
    const std::int64_t rows = static_cast<std::int64_t>(indices.size());
    Tensor out = make_op({rows, cols}, opname, {a},
                         [idx = std::move(indices)](detail::Node& self) {
                             detail::Node* p = parent(self, 0);
                             if (!p->requires_grad) return;
                             ensure_grad(p);
                             const std::int64_t cols = self.shape[1];
                             for (std::size_t r = 0; r < idx.size(); ++r) {
                                 Eigen::Map<Eigen::ArrayXd>(p->grad.data() + idx[r] * cols, cols) +=
                                     Eigen::Map<const Eigen::ArrayXd>(
                                         self.grad.data() + static_cast<std::int64_t>(r) * cols, cols);
                             }
                         });
    return out;
}

}  // namespace

Tensor gather_rows(const Tensor& a, std::vector<std::int64_t> indices) {
    std::vector<std::int64_t> copy = indices;
    Tensor out = gather_impl(a, std::move(indices), "gather_rows");
    const std::int64_t cols = a.dim(1);
    for (std::size_t r = 0; r < copy.size(); ++r)
        std::copy(a.data() + copy[r] * cols, a.data() + (copy[r] + 1) * cols,
                  out.data() + static_cast<std::int64_t>(r) * cols);
    return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& indices) {
    std::vector<std::int64_t> copy = indices;
    Tensor out = gather_impl(table, std::move(copy), "embedding_lookup");
    const std::int64_t cols = table.dim(1);
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy(table.data() + indices[r] * cols, table.data() + (indices[r] + 1) * cols,
                  out.data() + static_cast<std::int64_t>(r) * cols);
    return out;
}

Tensor mean_rows(const Tensor& a) {
    check_rank2(a, "mean_rows");
    const std::int64_t rows = a.dim(0), cols = a.dim(1);
    Tensor out = make_op({1, cols}, "mean_rows", {a}, [rows](detail::Node& self) {
        detail::Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        ensure_grad(p);
        MatMap gp(p->grad.data(), p->shape[0], p->shape[1]);
        gp.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(self.grad.data(), self.shape[1]) /
                        static_cast<double>(rows);
    });
    MatMap o(out.data(), 1, cols);
    o = cmat(a.node()).colwise().sum() / static_cast<double>(rows);
    return out;
}

Tensor sum(const Tensor& a) {
    Tensor out = make_op({1}, "sum", {a}, [](detail::Node& self) {
        acc(parent(self, 0), self.grad[0]);
    });
    // fixed sequential order for run-to-run determinism
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a.data()[i];
    out.array()[0] = s;
    return out;
}

// ---- activations ----

Tensor relu(const Tensor& a) {
    Tensor out = make_op(a.shape(), "relu", {a}, [](detail::Node& self) {
        detail::Node* p = parent(self, 0);
        acc(p, self.grad * (p->value > 0.0).cast<double>());
    });
    out.array() = a.array().max(0.0);
    return out;
}

Tensor gelu(const Tensor& a) {
    Tensor out = make_op(a.shape(), "gelu", {a}, [](detail::Node& self) {
        detail::Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        ensure_grad(p);
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (std::int64_t i = 0; i < p->value.size(); ++i) {
            const double x = p->value[i];
            const double cdf = 0.5 * std::erfc(-x * inv_sqrt2);
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            p->grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double x = a.data()[i];
        out.data()[i] = x * 0.5 * std::erfc(-x * inv_sqrt2);
    }
    return out;
}

Tensor sigmoid(const Tensor& a) {
    Tensor out = make_op(a.shape(), "sigmoid", {a}, [](detail::Node& self) {
        acc(parent(self, 0), self.grad * self.value * (1.0 - self.value));
    });
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = stable_sigmoid(a.data()[i]);
    return out;
}

Tensor softmax(const Tensor& a) {
    check_rank2(a, "softmax");
    Tensor out = make_op(a.shape(), "softmax", {a}, [](detail::Node& self) {
        detail::Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        ensure_grad(p);
        const std::int64_t rows = self.shape[0], cols = self.shape[1];
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * cols;
            const double* gy = self.grad.data() + r * cols;
            double dot = 0.0;
            for (std::int64_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
            double* gx = p->grad.data() + r * cols;
            for (std::int64_t c = 0; c < cols; ++c) gx[c] += y[c] * (gy[c] - dot);
        }
    });
    const std::int64_t rows = a.dim(0), cols = a.dim(1);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = a.data() + r * cols;
        double* y = out.data() + r * cols;
        double mx = x[0];
        for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        double s = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            s += y[c];
        }
        for (std::int64_t c = 0; c < cols; ++c) y[c] /= s;
    }
    return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    check_rank2(a, "layer_norm");
    const std::int64_t rows = a.dim(0), cols = a.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != cols || bias.rank() != 1 || bias.dim(0) != cols)
        throw ShapeError("layer_norm: affine params must be [" + std::to_string(cols) + "], got " +
                         shape_str(gain.shape()) + " / " + shape_str(bias.shape()));
    Tensor out = make_op(a.shape(), "layer_norm", {a, gain, bias}, [eps](detail::Node& self) {
        detail::Node* x_n = parent(self, 0);
        detail::Node* g_n = parent(self, 1);
        detail::Node* b_n = parent(self, 2);
        const std::int64_t rows = self.shape[0], cols = self.shape[1];
        const double* gv = g_n->value.data();
        if (x_n->requires_grad) ensure_grad(x_n);
        if (g_n->requires_grad) ensure_grad(g_n);
        if (b_n->requires_grad) ensure_grad(b_n);
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* x = x_n->value.data() + r * cols;
            const double* gy = self.grad.data() + r * cols;
            double mu = 0.0;
            for (std::int64_t c = 0; c < cols; ++c) mu += x[c];
            mu /= static_cast<double>(cols);
            double var = 0.0;
            for (std::int64_t c = 0; c < cols; ++c) var += (x[c] - mu) * (x[c] - mu);
            var /= static_cast<double>(cols);
            const double inv_sigma = 1.0 / std::sqrt(var + eps);
            if (x_n->requires_grad) {
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::int64_t c = 0; c < cols; ++c) {
                    const double xhat = (x[c] - mu) * inv_sigma;
                    const double dxhat = gy[c] * gv[c];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= static_cast<double>(cols);
                mean_dxhat_xhat /= static_cast<double>(cols);
                double* gx = x_n->grad.data() + r * cols;
                for (std::int64_t c = 0; c < cols; ++c) {
                    const double xhat = (x[c] - mu) * inv_sigma;
                    gx[c] += inv_sigma * (gy[c] * gv[c] - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
            if (g_n->requires_grad) {
                for (std::int64_t c = 0; c < cols; ++c)
                    g_n->grad[c] += gy[c] * (x[c] - mu) * inv_sigma;
            }
            if (b_n->requires_grad) {
                for (std::int64_t c = 0; c < cols; ++c) b_n->grad[c] += gy[c];
            }
        }
    });
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = a.data() + r * cols;
        double* y = out.data() + r * cols;
        double mu = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) mu += x[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) var += (x[c] - mu) * (x[c] - mu);
        var /= static_cast<double>(cols);
        const double inv_sigma = 1.0 / std::sqrt(var + eps);
        for (std::int64_t c = 0; c < cols; ++c)
            y[c] = (x[c] - mu) * inv_sigma * gain.data()[c] + bias.data()[c];
    }
    return out;
}

// ---- conv / pool ----

namespace {

struct ConvDims {
    std::int64_t n, c, h, w, f, kh, kw, oh, ow;
    int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ShapeError("conv2d: weight must be [F,C,kh,kw], got " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    ConvDims d;
    d.n = x.dim(0); d.c = x.dim(1); d.h = x.dim(2); d.w = x.dim(3);
    d.f = w.dim(0); d.kh = w.dim(2); d.kw = w.dim(3);
    d.stride = stride; d.pad = pad;
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
    return d;
}

void im2col(const double* x, const ConvDims& d, RowMat& cols) {
    const std::int64_t patch = d.c * d.kh * d.kw;
    cols.resize(d.n * d.oh * d.ow, patch);
    for (std::int64_t n = 0; n < d.n; ++n) {
        const double* xn = x + n * d.c * d.h * d.w;
        for (std::int64_t oh = 0; oh < d.oh; ++oh) {
            for (std::int64_t ow = 0; ow < d.ow; ++ow) {
                double* row = cols.data() + ((n * d.oh + oh) * d.ow + ow) * patch;
                std::int64_t k = 0;
                for (std::int64_t c = 0; c < d.c; ++c) {
                    for (std::int64_t i = 0; i < d.kh; ++i) {
                        const std::int64_t hy = oh * d.stride - d.pad + i;
                        for (std::int64_t j = 0; j < d.kw; ++j, ++k) {
                            const std::int64_t wx = ow * d.stride - d.pad + j;
                            row[k] = (hy >= 0 && hy < d.h && wx >= 0 && wx < d.w)
                                         ? xn[(c * d.h + hy) * d.w + wx]
                                         : 0.0;
                        }
                    }
                }
            }
        }
    }
}

void col2im_add(const RowMat& cols, const ConvDims& d, double* gx) {
    const std::int64_t patch = d.c * d.kh * d.kw;
    for (std::int64_t n = 0; n < d.n; ++n) {
        double* xn = gx + n * d.c * d.h * d.w;
        for (std::int64_t oh = 0; oh < d.oh; ++oh) {
            for (std::int64_t ow = 0; ow < d.ow; ++ow) {
                const double* row = cols.data() + ((n * d.oh + oh) * d.ow + ow) * patch;
                std::int64_t k = 0;
                for (std::int64_t c = 0; c < d.c; ++c) {
                    for (std::int64_t i = 0; i < d.kh; ++i) {
                        const std::int64_t hy = oh * d.stride - d.pad + i;
                        for (std::int64_t j = 0; j < d.kw; ++j, ++k) {
                            const std::int64_t wx = ow * d.stride - d.pad + j;
                            if (hy >= 0 && hy < d.h && wx >= 0 && wx < d.w)
                                xn[(c * d.h + hy) * d.w + wx] += row[k];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const ConvDims d = conv_dims(x, w, stride, pad);
    if (b.rank() != 1 || b.dim(0) != d.f)
        throw ShapeError("conv2d: bias must be [" + std::to_string(d.f) + "], got " + shape_str(b.shape()));

    auto cols = std::make_shared<RowMat>();
    im2col(x.data(), d, *cols);

    Tensor out = make_op({d.n, d.f, d.oh, d.ow}, "conv2d", {x, w, b}, [d, cols](detail::Node& self) {
        detail::Node* x_n = parent(self, 0);
        detail::Node* w_n = parent(self, 1);
        detail::Node* b_n = parent(self, 2);
        // regroup output grad as [N*OH*OW, F]
        RowMat g2(d.n * d.oh * d.ow, d.f);
        for (std::int64_t n = 0; n < d.n; ++n)
            for (std::int64_t f = 0; f < d.f; ++f)
                for (std::int64_t o = 0; o < d.oh * d.ow; ++o)
                    g2(n * d.oh * d.ow + o, f) = self.grad[(n * d.f + f) * d.oh * d.ow + o];
        if (b_n->requires_grad) {
            ensure_grad(b_n);
            Eigen::Map<Eigen::VectorXd>(b_n->grad.data(), d.f) += g2.colwise().sum().transpose();
        }
        if (w_n->requires_grad) {
            ensure_grad(w_n);
            MatMap gw(w_n->grad.data(), d.f, d.c * d.kh * d.kw);
            gw.noalias() += g2.transpose() * (*cols);
        }
        if (x_n->requires_grad) {
            ensure_grad(x_n);
            CMatMap wm(w_n->value.data(), d.f, d.c * d.kh * d.kw);
            RowMat gcols = g2 * wm;
            col2im_add(gcols, d, x_n->grad.data());
        }
    });

    CMatMap wm(w.data(), d.f, d.c * d.kh * d.kw);
    RowMat y2 = (*cols) * wm.transpose();
    y2.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), d.f);
    double* y = out.data();
    for (std::int64_t n = 0; n < d.n; ++n)
        for (std::int64_t f = 0; f < d.f; ++f)
            for (std::int64_t o = 0; o < d.oh * d.ow; ++o)
                y[(n * d.f + f) * d.oh * d.ow + o] = y2(n * d.oh * d.ow + o, f);
    if (!out.requires_grad()) cols->resize(0, 0);
    return out;
}

Tensor maxpool2d(const Tensor& x, int kernel, int stride) {
    if (x.rank() != 4) throw ShapeError("maxpool2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
    if (kernel < 1) throw ShapeError("maxpool2d: kernel must be >= 1");
    if (stride == 0) stride = kernel;
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < kernel || w < kernel)
        throw ShapeError("maxpool2d: kernel " + std::to_string(kernel) + " larger than input " +
                         shape_str(x.shape()));
    const std::int64_t oh = (h - kernel) / stride + 1;
    const std::int64_t ow = (w - kernel) / stride + 1;

    auto argmax = std::make_shared<std::vector<std::int64_t>>(n * c * oh * ow);
    Tensor out = make_op({n, c, oh, ow}, "maxpool2d", {x}, [argmax](detail::Node& self) {
        detail::Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        ensure_grad(p);
        for (std::int64_t i = 0; i < self.grad.size(); ++i)
            p->grad[(*argmax)[i]] += self.grad[i];
    });

    const double* xv = x.data();
    double* y = out.data();
    std::int64_t oi = 0;
    for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const double* plane = xv + (ni * c + ci) * h * w;
            const std::int64_t base = (ni * c + ci) * h * w;
            for (std::int64_t ohi = 0; ohi < oh; ++ohi) {
                for (std::int64_t owi = 0; owi < ow; ++owi, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = 0;
                    for (std::int64_t i = 0; i < kernel; ++i) {
                        for (std::int64_t j = 0; j < kernel; ++j) {
                            const std::int64_t idx = (ohi * stride + i) * w + (owi * stride + j);
                            if (plane[idx] > best) {  // ties keep the first index
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y[oi] = best;
                    (*argmax)[oi] = base + best_idx;
                }
            }
        }
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be [N,C,H,W], got " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out = make_op({n, c}, "global_avg_pool", {x}, [hw](detail::Node& self) {
        detail::Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        ensure_grad(p);
        const std::int64_t nc = self.grad.size();
        for (std::int64_t i = 0; i < nc; ++i) {
            const double g = self.grad[i] / static_cast<double>(hw);
            double* gp = p->grad.data() + i * hw;
            for (std::int64_t k = 0; k < hw; ++k) gp[k] += g;
        }
    });
    for (std::int64_t i = 0; i < n * c; ++i) {
        const double* xp = x.data() + i * hw;
        double s = 0.0;
        for (std::int64_t k = 0; k < hw; ++k) s += xp[k];
        out.data()[i] = s / static_cast<double>(hw);
    }
    return out;
}

// ---- losses ----

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    const double inv_n = 1.0 / static_cast<double>(pred.numel());
    Tensor out = make_op({1}, "mse_loss", {pred, target}, [inv_n](detail::Node& self) {
        detail::Node* a = parent(self, 0);
        detail::Node* b = parent(self, 1);
        const double g = self.grad[0] * 2.0 * inv_n;
        acc(a, g * (a->value - b->value));
        acc(b, g * (b->value - a->value));
    });
    double s = 0.0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const double d = pred.data()[i] - target.data()[i];
        s += d * d;
    }
    out.array()[0] = s * inv_n;
    return out;
}

Tensor bce_with_logits_loss(const Tensor& logits, const Tensor& targets, double pos_weight) {
    if (logits.shape() != targets.shape())
        throw ShapeError("bce_with_logits_loss: shape mismatch " + shape_str(logits.shape()) + " vs " +
                         shape_str(targets.shape()));
    if (pos_weight <= 0.0) throw DomainError("bce_with_logits_loss: pos_weight must be positive");
    const double inv_n = 1.0 / static_cast<double>(logits.numel());
    Tensor out = make_op({1}, "bce_with_logits_loss", {logits, targets},
                         [inv_n, pos_weight](detail::Node& self) {
                             detail::Node* x_n = parent(self, 0);
                             detail::Node* z_n = parent(self, 1);
                             const double g = self.grad[0] * inv_n;
                             if (x_n->requires_grad) {
                                 ensure_grad(x_n);
                                 for (std::int64_t i = 0; i < x_n->value.size(); ++i) {
                                     const double x = x_n->value[i], z = z_n->value[i];
                                     x_n->grad[i] +=
                                         g * ((1.0 - z) * stable_sigmoid(x) - pos_weight * z * stable_sigmoid(-x));
                                 }
                             }
                             if (z_n->requires_grad) {
                                 ensure_grad(z_n);
                                 for (std::int64_t i = 0; i < z_n->value.size(); ++i) {
                                     const double x = x_n->value[i];
                                     z_n->grad[i] += g * (pos_weight * softplus(-x) - softplus(x));
                                 }
                             }
                         });
    double s = 0.0;
    for (std::int64_t i = 0; i < logits.numel(); ++i) {
        const double x = logits.data()[i], z = targets.data()[i];
        s += pos_weight * z * softplus(-x) + (1.0 - z) * softplus(x);
    }
    out.array()[0] = s * inv_n;
    return out;
}

}  // namespace odhn
