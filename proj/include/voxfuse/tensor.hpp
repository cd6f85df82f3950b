#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "error.hpp"

namespace voxfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily; same length as value once touched
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // pulls this->grad into parents

    std::vector<double>& grad_buf() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

// Tapes are thread-confined; a per-thread counter keeps creation order
// (parents always have smaller ids than children).
inline std::uint64_t next_node_id() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

inline std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->id = next_node_id();
    return n;
}

}  // namespace detail

/// Dense N-dimensional f64 array with reverse-mode autodiff. Value-semantic
/// handle to a shared graph node; ops are free functions that record a tape
/// whenever any input requires gradients.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        node_ = detail::make_node(std::move(shape), std::move(data));
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(numel(shape), 0.0);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(numel(shape), v);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t ndim() const { return node_->shape.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& data() const { return node_->value; }
    /// Mutable access for optimizers and loaders; does not touch the tape.
    std::vector<double>& mutable_data() { return node_->value; }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw ValueError("tensor has no gradient buffer");
        return node_->grad;
    }

    double item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    double at(std::initializer_list<std::size_t> idx) const {
        return node_->value[flat_index(idx)];
    }

    void zero_grad() { node_->grad.clear(); }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate additively
    /// into every reachable tensor with requires_grad set.
    void backward() const {
        if (size() != 1) throw ShapeError("backward() requires a scalar root");
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> seen;
        std::vector<detail::Node*> stack{node_.get()};
        while (!stack.empty()) {
            detail::Node* n = stack.back();
            stack.pop_back();
            if (!seen.insert(n).second) continue;
            order.push_back(n);
            for (auto& p : n->parents) stack.push_back(p.get());
        }
        std::sort(order.begin(), order.end(),
                  [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });
        node_->grad_buf()[0] += 1.0;
        for (detail::Node* n : order) {
            if (n->backprop && n->grad.size() == n->value.size()) n->backprop(*n);
        }
    }

    std::shared_ptr<detail::Node> node() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != ndim()) throw ShapeError("index rank mismatch");
        std::size_t flat = 0, k = 0;
        for (std::size_t i : idx) {
            if (i >= node_->shape[k]) throw ShapeError("index out of range");
            flat = flat * node_->shape[k] + i;
            ++k;
        }
        return flat;
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Build an op result node: value plus a backprop closure, recorded only when
/// some parent participates in differentiation.
inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(Node&)> backprop) {
    auto n = make_node(std::move(shape), std::move(value));
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
        n->requires_grad = true;
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(n);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

struct AxisSplit {
    std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw ShapeError("axis out of range");
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa, s](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

/// Multiply by a 1-element tensor (differentiable in both operands).
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("scale_by expects a scalar multiplier");
    double sv = s.data()[0];
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
    auto pa = a.node(), ps = s.node();
    return detail::make_op(a.shape(), std::move(out), {a, s}, [pa, ps, sv](detail::Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sv;
        }
        if (ps->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa->value[i];
            ps->grad_buf()[0] += acc;
        }
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape to " + shape_str(shape) + " changes element count");
    auto pa = a.node();
    return detail::make_op(std::move(shape), a.data(), {a}, [pa](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose expects a 2-d tensor");
    std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
    auto pa = a.node();
    return detail::make_op({c, r}, std::move(out), {a}, [pa, r, c](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& base = parts[0].shape();
    if (axis >= base.size()) throw ShapeError("concat axis out of range");
    std::size_t total_axis = 0;
    for (const auto& t : parts) {
        if (t.ndim() != base.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t k = 0; k < base.size(); ++k)
            if (k != axis && t.dim(k) != base[k])
                throw ShapeError("concat: non-axis extents differ");
        total_axis += t.dim(axis);
    }
    Shape out_shape = base;
    out_shape[axis] = total_axis;
    auto split = detail::split_axis(out_shape, axis);
    std::vector<double> out(numel(out_shape));
    std::size_t offset = 0;
    for (const auto& t : parts) {
        std::size_t n_t = t.dim(axis);
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t i = 0; i < n_t; ++i)
                for (std::size_t j = 0; j < split.inner; ++j)
                    out[(o * split.n + offset + i) * split.inner + j] =
                        t.data()[(o * n_t + i) * split.inner + j];
        offset += n_t;
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    std::vector<std::size_t> sizes;
    for (const auto& t : parts) {
        nodes.push_back(t.node());
        sizes.push_back(t.dim(axis));
    }
    return detail::make_op(out_shape, std::move(out), parts,
                           [nodes, sizes, split](detail::Node& self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < nodes.size(); ++p) {
            std::size_t n_t = sizes[p];
            if (nodes[p]->requires_grad) {
                auto& g = nodes[p]->grad_buf();
                for (std::size_t o = 0; o < split.outer; ++o)
                    for (std::size_t i = 0; i < n_t; ++i)
                        for (std::size_t j = 0; j < split.inner; ++j)
                            g[(o * n_t + i) * split.inner + j] +=
                                self.grad[(o * split.n + offset + i) * split.inner + j];
            }
            offset += n_t;
        }
    });
}

/// Gather whole rows of a 2-d tensor (differentiable scatter-add backward).
inline Tensor take_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
    if (a.ndim() != 2) throw ShapeError("take_rows expects a 2-d tensor");
    std::size_t cols = a.dim(1);
    std::vector<double> out(rows.size() * cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= a.dim(0)) throw ShapeError("take_rows index out of range");
        std::copy_n(a.data().begin() + rows[r] * cols, cols, out.begin() + r * cols);
    }
    auto pa = a.node();
    return detail::make_op({rows.size(), cols}, std::move(out), {a},
                           [pa, rows, cols](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t j = 0; j < cols; ++j)
                g[rows[r] * cols + j] += self.grad[r * cols + j];
    });
}

/// Extract one element as a scalar tensor.
inline Tensor select(const Tensor& a, std::size_t flat_index) {
    if (flat_index >= a.size()) throw ShapeError("select index out of range");
    auto pa = a.node();
    return detail::make_op({1}, {a.data()[flat_index]}, {a},
                           [pa, flat_index](detail::Node& self) {
        pa->grad_buf()[flat_index] += self.grad[0];
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("matmul expects 2-d tensors");
    std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            double av = a.data()[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b.data()[p * n + j];
        }
    auto pa = a.node(), pb = b.node();
    return detail::make_op({m, n}, std::move(out), {a, b},
                           [pa, pb, m, k, n](detail::Node& self) {
        // dA = dC * B^T, dB = A^T * dC
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        acc += self.grad[i * n + j] * pb->value[p * n + j];
                    g[i * k + p] += acc;
                }
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < m; ++i)
                        acc += pa->value[i * k + p] * self.grad[i * n + j];
                    g[p * n + j] += acc;
                }
        }
    });
}

/// Affine map y = x W^T + b with x:[B x I], W:[O x I], b:[O].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.ndim() != 2 || weight.ndim() != 2 || bias.ndim() != 1)
        throw ShapeError("linear expects x:[BxI], W:[OxI], b:[O]");
    std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in || bias.dim(0) != out_dim)
        throw ShapeError("linear: inconsistent dims");
    std::vector<double> out(batch * out_dim);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out_dim; ++o) {
            double acc = bias.data()[o];
            for (std::size_t i = 0; i < in; ++i)
                acc += x.data()[b * in + i] * weight.data()[o * in + i];
            out[b * out_dim + o] = acc;
        }
    auto px = x.node(), pw = weight.node(), pb = bias.node();
    return detail::make_op({batch, out_dim}, std::move(out), {x, weight, bias},
                           [px, pw, pb, batch, in, out_dim](detail::Node& self) {
        if (px->requires_grad) {
            auto& g = px->grad_buf();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < in; ++i) {
                    double acc = 0.0;
                    for (std::size_t o = 0; o < out_dim; ++o)
                        acc += self.grad[b * out_dim + o] * pw->value[o * in + i];
                    g[b * in + i] += acc;
                }
        }
        if (pw->requires_grad) {
            auto& g = pw->grad_buf();
            for (std::size_t o = 0; o < out_dim; ++o)
                for (std::size_t i = 0; i < in; ++i) {
                    double acc = 0.0;
                    for (std::size_t b = 0; b < batch; ++b)
                        acc += self.grad[b * out_dim + o] * px->value[b * in + i];
                    g[o * in + i] += acc;
                }
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (std::size_t o = 0; o < out_dim; ++o) {
                double acc = 0.0;
                for (std::size_t b = 0; b < batch; ++b) acc += self.grad[b * out_dim + o];
                g[o] += acc;
            }
        }
    });
}

/// Scale each row of x:[M x N] by s:[M] or [M x 1].
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.ndim() != 2) throw ShapeError("scale_rows expects a 2-d tensor");
    std::size_t m = x.dim(0), n = x.dim(1);
    if (s.size() != m) throw ShapeError("scale_rows: one scale per row required");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] * s.data()[i];
    auto px = x.node(), ps = s.node();
    return detail::make_op(x.shape(), std::move(out), {x, s},
                           [px, ps, m, n](detail::Node& self) {
        if (px->requires_grad) {
            auto& g = px->grad_buf();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    g[i * n + j] += self.grad[i * n + j] * ps->value[i];
        }
        if (ps->requires_grad) {
            auto& g = ps->grad_buf();
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    acc += self.grad[i * n + j] * px->value[i * n + j];
                g[i] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// activations and normalizations
// ---------------------------------------------------------------------------

namespace detail {
inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}
}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(a.data()[i]);
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) {
            double y = self.value[i];
            g[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (pa->value[i] > 0.0) g[i] += self.grad[i];
    });
}

inline Tensor softplus(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = a.data()[i];
        out[i] = x > 30.0 ? x : std::log1p(std::exp(x));
    }
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * detail::stable_sigmoid(pa->value[i]);
    });
}

inline Tensor softmax(const Tensor& a, std::size_t axis) {
    for (double v : a.data())
        if (std::isnan(v)) throw ValueError("softmax: NaN input");
    auto split = detail::split_axis(a.shape(), axis);
    std::vector<double> out(a.size());
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t j = 0; j < split.inner; ++j) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < split.n; ++i)
                mx = std::max(mx, a.data()[(o * split.n + i) * split.inner + j]);
            double denom = 0.0;
            for (std::size_t i = 0; i < split.n; ++i) {
                std::size_t idx = (o * split.n + i) * split.inner + j;
                out[idx] = std::exp(a.data()[idx] - mx);
                denom += out[idx];
            }
            for (std::size_t i = 0; i < split.n; ++i) out[(o * split.n + i) * split.inner + j] /= denom;
        }
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa, split](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t j = 0; j < split.inner; ++j) {
                double dot = 0.0;
                for (std::size_t i = 0; i < split.n; ++i) {
                    std::size_t idx = (o * split.n + i) * split.inner + j;
                    dot += self.grad[idx] * self.value[idx];
                }
                for (std::size_t i = 0; i < split.n; ++i) {
                    std::size_t idx = (o * split.n + i) * split.inner + j;
                    g[idx] += self.value[idx] * (self.grad[idx] - dot);
                }
            }
    });
}

/// L2-normalize along an axis; zero vectors pass through unchanged (the norm
/// is clamped at 1e-12).
inline Tensor l2_normalize(const Tensor& a, std::size_t axis) {
    constexpr double kEps = 1e-12;
    auto split = detail::split_axis(a.shape(), axis);
    std::vector<double> out(a.size());
    std::vector<double> norms(split.outer * split.inner);
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t j = 0; j < split.inner; ++j) {
            double sq = 0.0;
            for (std::size_t i = 0; i < split.n; ++i) {
                double v = a.data()[(o * split.n + i) * split.inner + j];
                sq += v * v;
            }
            double norm = std::max(std::sqrt(sq), kEps);
            norms[o * split.inner + j] = norm;
            for (std::size_t i = 0; i < split.n; ++i) {
                std::size_t idx = (o * split.n + i) * split.inner + j;
                out[idx] = a.data()[idx] / norm;
            }
        }
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a},
                           [pa, split, norms](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t j = 0; j < split.inner; ++j) {
                double norm = norms[o * split.inner + j];
                double dot = 0.0;
                for (std::size_t i = 0; i < split.n; ++i) {
                    std::size_t idx = (o * split.n + i) * split.inner + j;
                    dot += self.grad[idx] * self.value[idx];
                }
                for (std::size_t i = 0; i < split.n; ++i) {
                    std::size_t idx = (o * split.n + i) * split.inner + j;
                    g[idx] += (self.grad[idx] - self.value[idx] * dot) / norm;
                }
            }
    });
}

/// Whole-tensor RMS normalization: y = x / sqrt(mean(x^2) + eps). Makes the
/// downstream computation invariant to the input's global scale.
inline Tensor rms_normalize(const Tensor& a, double eps = 1e-8) {
    double mean_sq = 0.0;
    for (double v : a.data()) mean_sq += v * v;
    std::size_t n = a.size();
    mean_sq /= static_cast<double>(n);
    double m = std::sqrt(mean_sq + eps);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] / m;
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa, m, n](detail::Node& self) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += self.grad[i] * self.value[i];
        dot /= static_cast<double>(n);
        auto& g = pa->grad_buf();
        for (std::size_t i = 0; i < n; ++i) g[i] += (self.grad[i] - self.value[i] * dot) / m;
    });
}

/// Per-position L2 magnitude over axis 0 (the channel axis), epsilon-guarded
/// so the gradient stays finite on empty voxels.
inline Tensor channel_l2(const Tensor& a, double eps = 1e-12) {
    if (a.ndim() < 1) throw ShapeError("channel_l2 needs at least one axis");
    std::size_t c = a.dim(0), rest = a.size() / c;
    std::vector<double> out(rest);
    for (std::size_t j = 0; j < rest; ++j) {
        double sq = eps;
        for (std::size_t i = 0; i < c; ++i) {
            double v = a.data()[i * rest + j];
            sq += v * v;
        }
        out[j] = std::sqrt(sq);
    }
    Shape out_shape(a.shape().begin() + 1, a.shape().end());
    if (out_shape.empty()) out_shape = {1};
    auto pa = a.node();
    return detail::make_op(out_shape, std::move(out), {a}, [pa, c, rest](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t j = 0; j < rest; ++j) {
            double inv = self.grad[j] / self.value[j];
            for (std::size_t i = 0; i < c; ++i) g[i * rest + j] += pa->value[i * rest + j] * inv;
        }
    });
}

// ---------------------------------------------------------------------------
// reductions and distances
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    auto pa = a.node();
    return detail::make_op({1}, {acc}, {a}, [pa](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    double inv = 1.0 / static_cast<double>(a.size());
    double acc = std::accumulate(a.data().begin(), a.data().end(), 0.0) * inv;
    auto pa = a.node();
    return detail::make_op({1}, {acc}, {a}, [pa, inv](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * inv;
    });
}

/// Mean squared error over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mse");
    double inv = 1.0 / static_cast<double>(a.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    auto pa = a.node(), pb = b.node();
    return detail::make_op({1}, {acc * inv}, {a, b}, [pa, pb, inv](detail::Node& self) {
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
            double d = 2.0 * inv * (pa->value[i] - pb->value[i]) * self.grad[0];
            if (pa->requires_grad) pa->grad_buf()[i] += d;
            if (pb->requires_grad) pb->grad_buf()[i] -= d;
        }
    });
}

/// Mean absolute error over all elements (subgradient 0 at ties).
inline Tensor l1(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "l1");
    double inv = 1.0 / static_cast<double>(a.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a.data()[i] - b.data()[i]);
    auto pa = a.node(), pb = b.node();
    return detail::make_op({1}, {acc * inv}, {a, b}, [pa, pb, inv](detail::Node& self) {
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
            double d = pa->value[i] - pb->value[i];
            double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            double g = s * inv * self.grad[0];
            if (pa->requires_grad) pa->grad_buf()[i] += g;
            if (pb->requires_grad) pb->grad_buf()[i] -= g;
        }
    });
}

// ---------------------------------------------------------------------------
// slicing along an axis
// ---------------------------------------------------------------------------

/// Forward difference along an axis: out extent = extent - 1.
inline Tensor forward_diff(const Tensor& a, std::size_t axis) {
    auto split = detail::split_axis(a.shape(), axis);
    if (split.n < 2) throw ShapeError("forward_diff needs axis extent >= 2");
    Shape out_shape = a.shape();
    out_shape[axis] = split.n - 1;
    std::vector<double> out(numel(out_shape));
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i + 1 < split.n; ++i)
            for (std::size_t j = 0; j < split.inner; ++j)
                out[(o * (split.n - 1) + i) * split.inner + j] =
                    a.data()[(o * split.n + i + 1) * split.inner + j] -
                    a.data()[(o * split.n + i) * split.inner + j];
    auto pa = a.node();
    return detail::make_op(out_shape, std::move(out), {a}, [pa, split](detail::Node& self) {
        auto& g = pa->grad_buf();
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t i = 0; i + 1 < split.n; ++i)
                for (std::size_t j = 0; j < split.inner; ++j) {
                    double gv = self.grad[(o * (split.n - 1) + i) * split.inner + j];
                    g[(o * split.n + i + 1) * split.inner + j] += gv;
                    g[(o * split.n + i) * split.inner + j] -= gv;
                }
    });
}

/// Split an axis into `groups` contiguous blocks and mean-pool each block,
/// returning one tensor per block with that axis removed from the group.
/// The axis extent must be a multiple of `groups`.
inline std::vector<Tensor> slice_mean_groups(const Tensor& a, std::size_t axis,
                                             std::size_t groups) {
    auto split = detail::split_axis(a.shape(), axis);
    if (groups == 0 || groups > split.n)
        throw ShapeError("slice_mean_groups: group count exceeds axis extent");
    if (split.n % groups != 0)
        throw ShapeError("slice_mean_groups: group count must divide axis extent");
    std::size_t block = split.n / groups;
    double inv = 1.0 / static_cast<double>(block);
    Shape out_shape;
    for (std::size_t k = 0; k < a.ndim(); ++k)
        if (k != axis) out_shape.push_back(a.dim(k));
    if (out_shape.empty()) out_shape = {1};
    std::vector<Tensor> result;
    auto pa = a.node();
    for (std::size_t gidx = 0; gidx < groups; ++gidx) {
        std::vector<double> out(split.outer * split.inner, 0.0);
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t b = 0; b < block; ++b)
                for (std::size_t j = 0; j < split.inner; ++j)
                    out[o * split.inner + j] +=
                        a.data()[(o * split.n + gidx * block + b) * split.inner + j] * inv;
        result.push_back(detail::make_op(out_shape, std::move(out), {a},
                                         [pa, split, gidx, block, inv](detail::Node& self) {
            auto& g = pa->grad_buf();
            for (std::size_t o = 0; o < split.outer; ++o)
                for (std::size_t b = 0; b < block; ++b)
                    for (std::size_t j = 0; j < split.inner; ++j)
                        g[(o * split.n + gidx * block + b) * split.inner + j] +=
                            self.grad[o * split.inner + j] * inv;
        }));
    }
    return result;
}

// ---------------------------------------------------------------------------
// classification losses
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood with log-sum-exp stabilization.
/// Labels equal to ignore_index are skipped; all-ignored batches are an error.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                            int ignore_index = -1) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy expects logits [N x Cls]");
    std::size_t n = logits.dim(0), cls = logits.dim(1);
    if (labels.size() != n) throw ShapeError("cross_entropy: one label per row required");
    std::size_t kept = 0;
    double loss = 0.0;
    std::vector<double> probs(logits.size(), 0.0);  // cached softmax for backward
    for (std::size_t i = 0; i < n; ++i) {
        int y = labels[i];
        if (y == ignore_index) continue;
        if (y < 0 || static_cast<std::size_t>(y) >= cls)
            throw ValueError("cross_entropy: label " + std::to_string(y) + " out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cls; ++c) mx = std::max(mx, logits.data()[i * cls + c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < cls; ++c) {
            probs[i * cls + c] = std::exp(logits.data()[i * cls + c] - mx);
            denom += probs[i * cls + c];
        }
        for (std::size_t c = 0; c < cls; ++c) probs[i * cls + c] /= denom;
        loss += std::log(denom) + mx - logits.data()[i * cls + static_cast<std::size_t>(y)];
        ++kept;
    }
    if (kept == 0) throw ValueError("cross_entropy: every label ignored (degenerate batch)");
    double inv = 1.0 / static_cast<double>(kept);
    auto pl = logits.node();
    return detail::make_op({1}, {loss * inv}, {logits},
                           [pl, labels, probs, ignore_index, n, cls, inv](detail::Node& self) {
        auto& g = pl->grad_buf();
        for (std::size_t i = 0; i < n; ++i) {
            int y = labels[i];
            if (y == ignore_index) continue;
            for (std::size_t c = 0; c < cls; ++c) {
                double ind = (static_cast<std::size_t>(y) == c) ? 1.0 : 0.0;
                g[i * cls + c] += (probs[i * cls + c] - ind) * inv * self.grad[0];
            }
        }
    });
}

namespace detail {

struct LovaszClassPlan {
    std::size_t cls = 0;
    std::vector<std::size_t> order;  // row indices sorted by descending error
    std::vector<double> coeff;       // Lovasz-extension gradient per sorted slot
    std::vector<int> sign;           // dm/dp per sorted slot (+1 or -1)
};

}  // namespace detail

/// Which classes the Lovasz mean runs over. `present` (classes appearing in
/// the labels) keeps the loss consistent with per-class IoU at one-hot
/// vertices; the other two are available for comparison.
enum class LovaszClassSet { present, present_or_predicted, all };

/// Lovasz-softmax surrogate of the Jaccard loss. Rows of `probs` must each
/// sum to 1 within 1e-6.
inline Tensor lovasz_softmax(const Tensor& probs, const std::vector<int>& labels,
                             LovaszClassSet class_set = LovaszClassSet::present) {
    if (probs.ndim() != 2) throw ShapeError("lovasz_softmax expects probs [N x Cls]");
    std::size_t n = probs.dim(0), cls = probs.dim(1);
    if (labels.size() != n) throw ShapeError("lovasz_softmax: one label per row required");
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t c = 0; c < cls; ++c) row += probs.data()[i * cls + c];
        if (std::abs(row - 1.0) > 1e-6)
            throw ValueError("lovasz_softmax: probability row " + std::to_string(i) +
                             " sums to " + std::to_string(row));
    }
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= cls)
            throw ValueError("lovasz_softmax: label out of range");

    std::vector<detail::LovaszClassPlan> plans;
    double loss = 0.0;
    for (std::size_t c = 0; c < cls; ++c) {
        bool in_labels = false;
        double mass = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (labels[i] == static_cast<int>(c)) in_labels = true;
            mass += probs.data()[i * cls + c];
        }
        if (class_set == LovaszClassSet::present && !in_labels) continue;
        if (class_set == LovaszClassSet::present_or_predicted && !in_labels && mass <= 0.0)
            continue;

        detail::LovaszClassPlan plan;
        plan.cls = c;
        std::vector<double> errors(n);
        std::vector<int> gt(n);
        for (std::size_t i = 0; i < n; ++i) {
            gt[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
            double p = probs.data()[i * cls + c];
            errors[i] = gt[i] ? 1.0 - p : p;
        }
        plan.order.resize(n);
        std::iota(plan.order.begin(), plan.order.end(), std::size_t{0});
        std::stable_sort(plan.order.begin(), plan.order.end(),
                         [&errors](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });

        // Lovasz-extension gradient of the Jaccard index over the sorted
        // ground-truth indicator: g_j = jac_j - jac_{j-1}.
        double gt_total = std::accumulate(gt.begin(), gt.end(), 0.0);
        plan.coeff.resize(n);
        plan.sign.resize(n);
        double cum_gt = 0.0, cum_not = 0.0, prev_jac = 0.0;
        double class_loss = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            std::size_t row = plan.order[j];
            cum_gt += gt[row];
            cum_not += 1 - gt[row];
            double intersection = gt_total - cum_gt;
            double uni = gt_total + cum_not;
            double jac = uni > 0.0 ? 1.0 - intersection / uni : 0.0;
            plan.coeff[j] = jac - prev_jac;
            prev_jac = jac;
            plan.sign[j] = gt[row] ? -1 : 1;
            class_loss += errors[row] * plan.coeff[j];
        }
        loss += class_loss;
        plans.push_back(std::move(plan));
    }
    if (plans.empty()) throw ValueError("lovasz_softmax: no class participates");
    double inv = 1.0 / static_cast<double>(plans.size());
    auto pp = probs.node();
    return detail::make_op({1}, {loss * inv}, {probs}, [pp, plans, cls, inv](detail::Node& self) {
        auto& g = pp->grad_buf();
        for (const auto& plan : plans)
            for (std::size_t j = 0; j < plan.order.size(); ++j)
                g[plan.order[j] * cls + plan.cls] +=
                    plan.sign[j] * plan.coeff[j] * inv * self.grad[0];
    });
}

// ---------------------------------------------------------------------------
// 3-d convolution (channels-first, 3x3x3, zero padding 1)
// ---------------------------------------------------------------------------

inline Tensor conv3d(const Tensor& x, const Tensor& kernel) {
    if (x.ndim() != 4 || kernel.ndim() != 5)
        throw ShapeError("conv3d expects x:[CxXxYxZ], kernel:[OxCx3x3x3]");
    std::size_t c_in = x.dim(0), nx = x.dim(1), ny = x.dim(2), nz = x.dim(3);
    std::size_t c_out = kernel.dim(0);
    if (kernel.dim(1) != c_in || kernel.dim(2) != 3 || kernel.dim(3) != 3 || kernel.dim(4) != 3)
        throw ShapeError("conv3d kernel must be [OxCx3x3x3] with matching channels");
    std::size_t vol = nx * ny * nz;
    auto at_in = [&](std::size_t c, long ix, long iy, long iz) -> double {
        if (ix < 0 || iy < 0 || iz < 0 || ix >= static_cast<long>(nx) ||
            iy >= static_cast<long>(ny) || iz >= static_cast<long>(nz))
            return 0.0;
        return x.data()[((c * nx + ix) * ny + iy) * nz + iz];
    };
    std::vector<double> out(c_out * vol, 0.0);
    for (std::size_t o = 0; o < c_out; ++o)
        for (std::size_t ix = 0; ix < nx; ++ix)
            for (std::size_t iy = 0; iy < ny; ++iy)
                for (std::size_t iz = 0; iz < nz; ++iz) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < c_in; ++c)
                        for (int dx = -1; dx <= 1; ++dx)
                            for (int dy = -1; dy <= 1; ++dy)
                                for (int dz = -1; dz <= 1; ++dz)
                                    acc += kernel.data()[(((o * c_in + c) * 3 + (dx + 1)) * 3 +
                                                          (dy + 1)) * 3 + (dz + 1)] *
                                           at_in(c, static_cast<long>(ix) + dx,
                                                 static_cast<long>(iy) + dy,
                                                 static_cast<long>(iz) + dz);
                    out[((o * nx + ix) * ny + iy) * nz + iz] = acc;
                }
    auto px = x.node(), pk = kernel.node();
    return detail::make_op({c_out, nx, ny, nz}, std::move(out), {x, kernel},
                           [px, pk, c_in, c_out, nx, ny, nz](detail::Node& self) {
        auto in_bounds = [&](long ix, long iy, long iz) {
            return ix >= 0 && iy >= 0 && iz >= 0 && ix < static_cast<long>(nx) &&
                   iy < static_cast<long>(ny) && iz < static_cast<long>(nz);
        };
        for (std::size_t o = 0; o < c_out; ++o)
            for (std::size_t ix = 0; ix < nx; ++ix)
                for (std::size_t iy = 0; iy < ny; ++iy)
                    for (std::size_t iz = 0; iz < nz; ++iz) {
                        double go = self.grad[((o * nx + ix) * ny + iy) * nz + iz];
                        if (go == 0.0) continue;
                        for (std::size_t c = 0; c < c_in; ++c)
                            for (int dx = -1; dx <= 1; ++dx)
                                for (int dy = -1; dy <= 1; ++dy)
                                    for (int dz = -1; dz <= 1; ++dz) {
                                        long jx = static_cast<long>(ix) + dx;
                                        long jy = static_cast<long>(iy) + dy;
                                        long jz = static_cast<long>(iz) + dz;
                                        if (!in_bounds(jx, jy, jz)) continue;
                                        std::size_t kidx = (((o * c_in + c) * 3 + (dx + 1)) * 3 +
                                                            (dy + 1)) * 3 + (dz + 1);
                                        std::size_t xidx = ((c * nx + jx) * ny + jy) * nz + jz;
                                        if (px->requires_grad)
                                            px->grad_buf()[xidx] += go * pk->value[kidx];
                                        if (pk->requires_grad)
                                            pk->grad_buf()[kidx] += go * px->value[xidx];
                                    }
                    }
    });
}

}  // namespace voxfuse
