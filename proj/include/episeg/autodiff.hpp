#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "episeg/tensor.hpp"

namespace episeg::num {

// Reverse-mode tape. Ops build a DAG of shared nodes; backward() runs the
// stored adjoints in reverse topological order. Gradients accumulate into
// leaf nodes until zero_grad, so one backward per batch suffices.

struct Node {
    Tensor val;
    std::vector<real> grad;  // allocated iff needs_grad
    bool needs_grad = false;
    bool trainable = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;
};

class Var {
public:
    Var() = default;

    static Var constant(Tensor t) {
        auto n = std::make_shared<Node>();
        n->val = std::move(t);
        return Var(std::move(n));
    }

    static Var leaf(Tensor t) {
        auto n = std::make_shared<Node>();
        n->val = std::move(t);
        n->needs_grad = true;
        n->trainable = true;
        n->grad.assign(n->val.data.size(), 0.0);
        return Var(std::move(n));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor& value() const { return n_->val; }
    Tensor& mutable_value() { return n_->val; }
    const std::vector<int>& shape() const { return n_->val.shape; }
    long numel() const { return n_->val.numel(); }
    bool needs_grad() const { return n_->needs_grad; }
    const std::vector<real>& grad() const { return n_->grad; }
    std::vector<real>& grad() { return n_->grad; }

    void zero_grad() { n_->grad.assign(n_->val.data.size(), 0.0); }

    /// Value copy detached from the graph.
    Var detach() const { return constant(n_->val); }

    std::shared_ptr<Node> node() const { return n_; }

    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

private:
    std::shared_ptr<Node> n_;
};

namespace detail {

inline Var make_op(Tensor out, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->val = std::move(out);
    n->parents.reserve(parents.size());
    for (auto& p : parents) {
        if (p.node()->needs_grad) n->needs_grad = true;
        n->parents.push_back(p.node());
    }
    if (n->needs_grad) {
        n->grad.assign(n->val.data.size(), 0.0);
        n->backprop = std::move(backprop);
    }
    return Var(std::move(n));
}

inline real* grad_ptr(const std::shared_ptr<Node>& p) {
    return p->needs_grad ? p->grad.data() : nullptr;
}

}  // namespace detail

/// Reverse sweep from a scalar loss; accumulates into every reachable
/// needs_grad node.
inline void backward(const Var& loss) {
    require(loss.numel() == 1, "backward: loss must be scalar");
    if (!loss.needs_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* parent = node->parents[idx++].get();
            if (parent->needs_grad && visited.insert(parent).second)
                stack.push_back({parent, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

// ---- elementwise ----

inline Var add(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "add: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            real* g = detail::grad_ptr(self.parents[static_cast<std::size_t>(k)]);
            if (!g) continue;
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
        if (real* gb = detail::grad_ptr(self.parents[1]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
    });
}

inline Var mul(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& self) {
        const auto& av = self.parents[0]->val.data;
        const auto& bv = self.parents[1]->val.data;
        if (real* ga = detail::grad_ptr(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * bv[i];
        if (real* gb = detail::grad_ptr(self.parents[1]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * av[i];
    });
}

inline Var scale(const Var& a, real s) {
    Tensor out = a.value();
    for (auto& v : out.data) v *= s;
    return detail::make_op(std::move(out), {a}, [s](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += s * self.grad[i];
    });
}

inline Var add_scalar(const Var& a, real c) {
    Tensor out = a.value();
    for (auto& v : out.data) v += c;
    return detail::make_op(std::move(out), {a}, [](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    });
}

inline Var relu(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
    return detail::make_op(std::move(out), {a}, [](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0])) {
            const auto& av = self.parents[0]->val.data;
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (av[i] > 0.0) ga[i] += self.grad[i];
        }
    });
}

inline Var sqrt(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data) {
        require(v >= 0.0, "sqrt: negative input");
        v = std::sqrt(v);
    }
    return detail::make_op(std::move(out), {a}, [](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0])) {
            const auto& ov = self.val.data;
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                ga[i] += self.grad[i] * 0.5 / ov[i];
        }
    });
}

inline Var exp(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data) v = std::exp(v);
    return detail::make_op(std::move(out), {a}, [](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0])) {
            const auto& ov = self.val.data;
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * ov[i];
        }
    });
}

inline Var log(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data) {
        require(v > 0.0, "log: nonpositive input");
        v = std::log(v);
    }
    return detail::make_op(std::move(out), {a}, [](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0])) {
            const auto& av = self.parents[0]->val.data;
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] / av[i];
        }
    });
}

// ---- reductions ----

inline Var sum_all(const Var& a) {
    real s = 0.0;
    for (real v : a.value().data) s += v;
    return detail::make_op(Tensor::scalar(s), {a}, [](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0])) {
            const real g = self.grad[0];
            for (std::size_t i = 0; i < self.parents[0]->val.data.size(); ++i) ga[i] += g;
        }
    });
}

inline Var mean_all(const Var& a) {
    const long n = a.numel();
    require(n > 0, "mean_all: empty tensor");
    real s = 0.0;
    for (real v : a.value().data) s += v;
    return detail::make_op(Tensor::scalar(s / static_cast<real>(n)), {a}, [n](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0])) {
            const real g = self.grad[0] / static_cast<real>(n);
            for (std::size_t i = 0; i < self.parents[0]->val.data.size(); ++i) ga[i] += g;
        }
    });
}

inline Var add_many(const std::vector<Var>& xs) {
    require(!xs.empty(), "add_many: empty input");
    Tensor out = xs[0].value();
    for (std::size_t k = 1; k < xs.size(); ++k) {
        require(xs[k].shape() == out.shape, "add_many: shape mismatch");
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += xs[k].value().data[i];
    }
    return detail::make_op(std::move(out), xs, [](Node& self) {
        for (auto& p : self.parents) {
            if (real* g = detail::grad_ptr(p))
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

/// Mean over spatial positions per channel: (H,W,C) -> (C).
inline Var spatial_mean(const Var& f) {
    require(f.shape().size() == 3, "spatial_mean: rank-3 input expected");
    const int h = f.shape()[0], w = f.shape()[1], c = f.shape()[2];
    const long hw = static_cast<long>(h) * w;
    require(hw >= 1, "degenerate feature map");
    Tensor out = Tensor::zeros({c});
    const auto& fv = f.value().data;
    for (long p = 0; p < hw; ++p)
        for (int j = 0; j < c; ++j) out.data[static_cast<std::size_t>(j)] += fv[static_cast<std::size_t>(p * c + j)];
    for (auto& v : out.data) v /= static_cast<real>(hw);
    return detail::make_op(std::move(out), {f}, [hw, c](Node& self) {
        if (real* gf = detail::grad_ptr(self.parents[0])) {
            const real inv = 1.0 / static_cast<real>(hw);
            for (long p = 0; p < hw; ++p)
                for (int j = 0; j < c; ++j)
                    gf[p * c + j] += self.grad[static_cast<std::size_t>(j)] * inv;
        }
    });
}

// ---- broadcasts over a rank-3 (H,W,C) map ----

namespace detail {

enum class ChanOp { Add, Sub, Mul, Div };

inline Var channel_op(const Var& f, const Var& v, ChanOp op) {
    require(f.shape().size() == 3 && v.shape().size() == 1, "channel op: (H,W,C) and (C) expected");
    const int c = f.shape()[2];
    require(v.shape()[0] == c, "channel op: channel count mismatch");
    const long hw = static_cast<long>(f.shape()[0]) * f.shape()[1];
    Tensor out = f.value();
    const auto& vv = v.value().data;
    for (long p = 0; p < hw; ++p) {
        for (int j = 0; j < c; ++j) {
            real& x = out.data[static_cast<std::size_t>(p * c + j)];
            switch (op) {
                case ChanOp::Add: x += vv[static_cast<std::size_t>(j)]; break;
                case ChanOp::Sub: x -= vv[static_cast<std::size_t>(j)]; break;
                case ChanOp::Mul: x *= vv[static_cast<std::size_t>(j)]; break;
                case ChanOp::Div:
                    require(vv[static_cast<std::size_t>(j)] != 0.0, "channel op: division by zero");
                    x /= vv[static_cast<std::size_t>(j)];
                    break;
            }
        }
    }
    return make_op(std::move(out), {f, v}, [hw, c, op](Node& self) {
        const auto& fv = self.parents[0]->val.data;
        const auto& vv = self.parents[1]->val.data;
        real* gf = grad_ptr(self.parents[0]);
        real* gv = grad_ptr(self.parents[1]);
        for (long p = 0; p < hw; ++p) {
            for (int j = 0; j < c; ++j) {
                const std::size_t i = static_cast<std::size_t>(p * c + j);
                const real g = self.grad[i];
                switch (op) {
                    case ChanOp::Add:
                        if (gf) gf[i] += g;
                        if (gv) gv[j] += g;
                        break;
                    case ChanOp::Sub:
                        if (gf) gf[i] += g;
                        if (gv) gv[j] -= g;
                        break;
                    case ChanOp::Mul:
                        if (gf) gf[i] += g * vv[static_cast<std::size_t>(j)];
                        if (gv) gv[j] += g * fv[i];
                        break;
                    case ChanOp::Div: {
                        const real d = vv[static_cast<std::size_t>(j)];
                        if (gf) gf[i] += g / d;
                        if (gv) gv[j] -= g * fv[i] / (d * d);
                        break;
                    }
                }
            }
        }
    });
}

}  // namespace detail

inline Var add_channels(const Var& f, const Var& v) { return detail::channel_op(f, v, detail::ChanOp::Add); }
inline Var sub_channels(const Var& f, const Var& v) { return detail::channel_op(f, v, detail::ChanOp::Sub); }
inline Var mul_channels(const Var& f, const Var& v) { return detail::channel_op(f, v, detail::ChanOp::Mul); }
inline Var div_channels(const Var& f, const Var& v) { return detail::channel_op(f, v, detail::ChanOp::Div); }

/// (H,W,C) * (H,W): broadcast a spatial map over channels.
inline Var mul_spatial(const Var& f, const Var& m) {
    require(f.shape().size() == 3 && m.shape().size() == 2, "mul_spatial: (H,W,C) and (H,W) expected");
    require(f.shape()[0] == m.shape()[0] && f.shape()[1] == m.shape()[1],
            "mul_spatial: spatial shape mismatch");
    const long hw = static_cast<long>(f.shape()[0]) * f.shape()[1];
    const int c = f.shape()[2];
    Tensor out = f.value();
    const auto& mv = m.value().data;
    for (long p = 0; p < hw; ++p)
        for (int j = 0; j < c; ++j) out.data[static_cast<std::size_t>(p * c + j)] *= mv[static_cast<std::size_t>(p)];
    return detail::make_op(std::move(out), {f, m}, [hw, c](Node& self) {
        const auto& fv = self.parents[0]->val.data;
        const auto& mv = self.parents[1]->val.data;
        real* gf = detail::grad_ptr(self.parents[0]);
        real* gm = detail::grad_ptr(self.parents[1]);
        for (long p = 0; p < hw; ++p) {
            for (int j = 0; j < c; ++j) {
                const std::size_t i = static_cast<std::size_t>(p * c + j);
                if (gf) gf[i] += self.grad[i] * mv[static_cast<std::size_t>(p)];
                if (gm) gm[p] += self.grad[i] * fv[i];
            }
        }
    });
}

/// (C) -> (H,W,C) by repetition.
inline Var broadcast_channels(const Var& v, int h, int w) {
    require(v.shape().size() == 1, "broadcast_channels: rank-1 input expected");
    const int c = v.shape()[0];
    Tensor out = Tensor::zeros({h, w, c});
    const long hw = static_cast<long>(h) * w;
    for (long p = 0; p < hw; ++p)
        for (int j = 0; j < c; ++j) out.data[static_cast<std::size_t>(p * c + j)] = v.value().data[static_cast<std::size_t>(j)];
    return detail::make_op(std::move(out), {v}, [hw, c](Node& self) {
        if (real* gv = detail::grad_ptr(self.parents[0])) {
            for (long p = 0; p < hw; ++p)
                for (int j = 0; j < c; ++j) gv[j] += self.grad[static_cast<std::size_t>(p * c + j)];
        }
    });
}

// ---- shape ----

inline Var reshape(const Var& a, std::vector<int> shape) {
    require(Tensor::numel_of(shape) == a.numel(), "reshape: numel mismatch");
    Tensor out(std::move(shape), a.value().data);
    return detail::make_op(std::move(out), {a}, [](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    });
}

inline Var concat_channels(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_channels: empty input");
    const int h = parts[0].shape()[0], w = parts[0].shape()[1];
    int ctot = 0;
    std::vector<int> widths;
    for (const auto& p : parts) {
        require(p.shape().size() == 3 && p.shape()[0] == h && p.shape()[1] == w,
                "concat_channels: spatial shape mismatch");
        widths.push_back(p.shape()[2]);
        ctot += p.shape()[2];
    }
    Tensor out = Tensor::zeros({h, w, ctot});
    const long hw = static_cast<long>(h) * w;
    long off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const int c = widths[k];
        const auto& pv = parts[k].value().data;
        for (long p = 0; p < hw; ++p)
            for (int j = 0; j < c; ++j)
                out.data[static_cast<std::size_t>(p * ctot + off + j)] = pv[static_cast<std::size_t>(p * c + j)];
        off += c;
    }
    return detail::make_op(std::move(out), parts, [hw, ctot, widths](Node& self) {
        long off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            const int c = widths[k];
            if (real* gp = detail::grad_ptr(self.parents[k])) {
                for (long p = 0; p < hw; ++p)
                    for (int j = 0; j < c; ++j)
                        gp[p * c + j] += self.grad[static_cast<std::size_t>(p * ctot + off + j)];
            }
            off += c;
        }
    });
}

/// Select rows of a (R,C) matrix; backward scatters.
inline Var gather_rows(const Var& x, std::vector<int> rows) {
    require(x.shape().size() == 2, "gather_rows: rank-2 input expected");
    const int c = x.shape()[1];
    const int r = static_cast<int>(rows.size());
    Tensor out = Tensor::zeros({r, c});
    for (int i = 0; i < r; ++i) {
        require(rows[static_cast<std::size_t>(i)] >= 0 && rows[static_cast<std::size_t>(i)] < x.shape()[0],
                "gather_rows: index out of range");
        for (int j = 0; j < c; ++j) out.at2(i, j) = x.value().at2(rows[static_cast<std::size_t>(i)], j);
    }
    return detail::make_op(std::move(out), {x}, [rows = std::move(rows), c](Node& self) {
        if (real* gx = detail::grad_ptr(self.parents[0])) {
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (int j = 0; j < c; ++j)
                    gx[static_cast<long>(rows[i]) * c + j] += self.grad[i * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)];
        }
    });
}

/// Column j of a (R,C) matrix as a (R) vector.
inline Var column(const Var& x, int j) {
    require(x.shape().size() == 2, "column: rank-2 input expected");
    const int r = x.shape()[0], c = x.shape()[1];
    require(j >= 0 && j < c, "column: index out of range");
    Tensor out = Tensor::zeros({r});
    for (int i = 0; i < r; ++i) out.data[static_cast<std::size_t>(i)] = x.value().at2(i, j);
    return detail::make_op(std::move(out), {x}, [j, c](Node& self) {
        if (real* gx = detail::grad_ptr(self.parents[0])) {
            const int r = self.val.dim(0);
            for (int i = 0; i < r; ++i) gx[static_cast<long>(i) * c + j] += self.grad[static_cast<std::size_t>(i)];
        }
    });
}

// ---- matrix ----

inline Var matmul(const Var& a, const Var& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: rank-2 inputs expected");
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    require(b.shape()[0] == k, "matmul: inner dimension mismatch");
    Tensor out = Tensor::zeros({m, n});
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const real x = av[static_cast<std::size_t>(i * k + p)];
            if (x == 0.0) continue;
            const real* brow = bv.data() + static_cast<std::size_t>(p) * n;
            real* orow = out.data.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
        }
    }
    return detail::make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
        const auto& av = self.parents[0]->val.data;
        const auto& bv = self.parents[1]->val.data;
        if (real* ga = detail::grad_ptr(self.parents[0])) {
            // dA = g * B^T
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    real s = 0.0;
                    const real* grow = self.grad.data() + static_cast<std::size_t>(i) * n;
                    const real* brow = bv.data() + static_cast<std::size_t>(p) * n;
                    for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                    ga[static_cast<long>(i) * k + p] += s;
                }
        }
        if (real* gb = detail::grad_ptr(self.parents[1])) {
            // dB = A^T * g
            for (int i = 0; i < m; ++i) {
                const real* grow = self.grad.data() + static_cast<std::size_t>(i) * n;
                for (int p = 0; p < k; ++p) {
                    const real x = av[static_cast<std::size_t>(i * k + p)];
                    if (x == 0.0) continue;
                    real* brow = gb + static_cast<long>(p) * n;
                    for (int j = 0; j < n; ++j) brow[j] += x * grow[j];
                }
            }
        }
    });
}

inline Var transpose(const Var& a) {
    require(a.shape().size() == 2, "transpose: rank-2 input expected");
    const int m = a.shape()[0], n = a.shape()[1];
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at2(j, i) = a.value().at2(i, j);
    return detail::make_op(std::move(out), {a}, [m, n](Node& self) {
        if (real* ga = detail::grad_ptr(self.parents[0])) {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ga[static_cast<long>(i) * n + j] += self.grad[static_cast<std::size_t>(j * m + i)];
        }
    });
}

inline Var add_rowvec(const Var& x, const Var& b) {
    require(x.shape().size() == 2 && b.shape().size() == 1, "add_rowvec: (R,C) and (C) expected");
    const int r = x.shape()[0], c = x.shape()[1];
    require(b.shape()[0] == c, "add_rowvec: width mismatch");
    Tensor out = x.value();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at2(i, j) += b.value().data[static_cast<std::size_t>(j)];
    return detail::make_op(std::move(out), {x, b}, [r, c](Node& self) {
        real* gx = detail::grad_ptr(self.parents[0]);
        real* gb = detail::grad_ptr(self.parents[1]);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) {
                const real g = self.grad[static_cast<std::size_t>(i * c + j)];
                if (gx) gx[static_cast<long>(i) * c + j] += g;
                if (gb) gb[j] += g;
            }
    });
}

/// Max-shifted softmax over each row. An optional 0/1 mask restricts the
/// normalization set per row; masked-out entries produce exactly 0.
inline Var row_softmax(const Var& s, const Tensor* mask = nullptr) {
    require(s.shape().size() == 2, "row_softmax: rank-2 input expected");
    const int r = s.shape()[0], c = s.shape()[1];
    std::shared_ptr<Tensor> m;
    if (mask) {
        require(mask->shape == s.shape(), "row_softmax: mask shape mismatch");
        m = std::make_shared<Tensor>(*mask);
    }
    Tensor out = Tensor::zeros({r, c});
    for (int i = 0; i < r; ++i) {
        real mx = -std::numeric_limits<real>::infinity();
        for (int j = 0; j < c; ++j)
            if (!m || m->at2(i, j) != 0.0) mx = std::max(mx, s.value().at2(i, j));
        require(std::isfinite(mx), "row_softmax: row has no active entries");
        real z = 0.0;
        for (int j = 0; j < c; ++j) {
            if (!m || m->at2(i, j) != 0.0) {
                const real e = std::exp(s.value().at2(i, j) - mx);
                out.at2(i, j) = e;
                z += e;
            }
        }
        for (int j = 0; j < c; ++j) out.at2(i, j) /= z;
    }
    return detail::make_op(std::move(out), {s}, [r, c, m](Node& self) {
        if (real* gs = detail::grad_ptr(self.parents[0])) {
            for (int i = 0; i < r; ++i) {
                real dot = 0.0;
                for (int j = 0; j < c; ++j)
                    dot += self.grad[static_cast<std::size_t>(i * c + j)] * self.val.at2(i, j);
                for (int j = 0; j < c; ++j) {
                    if (m && m->at2(i, j) == 0.0) continue;
                    const real p = self.val.at2(i, j);
                    gs[static_cast<long>(i) * c + j] += p * (self.grad[static_cast<std::size_t>(i * c + j)] - dot);
                }
            }
        }
    });
}

/// Sum over rows of -log softmax(row)[diagonal]: the cross-entropy that pulls
/// each row's own index to dominate its row. `mean` divides by n.
inline Var diag_nll(const Var& s, bool mean = false) {
    require(s.shape().size() == 2 && s.shape()[0] == s.shape()[1], "diag_nll: square matrix expected");
    const int n = s.shape()[0];
    auto probs = std::make_shared<Tensor>(Tensor::zeros({n, n}));
    real loss = 0.0;
    for (int i = 0; i < n; ++i) {
        real mx = -std::numeric_limits<real>::infinity();
        for (int j = 0; j < n; ++j) mx = std::max(mx, s.value().at2(i, j));
        real z = 0.0;
        for (int j = 0; j < n; ++j) {
            const real e = std::exp(s.value().at2(i, j) - mx);
            probs->at2(i, j) = e;
            z += e;
        }
        for (int j = 0; j < n; ++j) probs->at2(i, j) /= z;
        loss += std::log(z) + mx - s.value().at2(i, i);
    }
    const real norm = mean ? 1.0 / static_cast<real>(n) : 1.0;
    return detail::make_op(Tensor::scalar(loss * norm), {s}, [n, norm, probs](Node& self) {
        if (real* gs = detail::grad_ptr(self.parents[0])) {
            const real g = self.grad[0] * norm;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    gs[static_cast<long>(i) * n + j] += g * (probs->at2(i, j) - (i == j ? 1.0 : 0.0));
        }
    });
}

// ---- neural-net blocks ----

/// 3x3-style convolution on a channels-last map, stride 1, symmetric zero
/// padding. Weights are (KH,KW,Cin,Cout), bias (Cout) optional.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int pad) {
    require(x.shape().size() == 3 && w.shape().size() == 4, "conv2d: (H,W,Ci) and (KH,KW,Ci,Co) expected");
    const int h = x.shape()[0], wd = x.shape()[1], ci = x.shape()[2];
    const int kh = w.shape()[0], kw = w.shape()[1], co = w.shape()[3];
    require(w.shape()[2] == ci, "conv2d: input channel mismatch");
    const int ho = h + 2 * pad - kh + 1;
    const int wo = wd + 2 * pad - kw + 1;
    require(ho > 0 && wo > 0, "conv2d: nonpositive output size");
    const bool has_bias = b.defined();
    if (has_bias) require(b.shape() == std::vector<int>{co}, "conv2d: bias shape mismatch");

    Tensor out = Tensor::zeros({ho, wo, co});
    const auto& xv = x.value().data;
    const auto& wv = w.value().data;
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            real* orow = out.data.data() + (static_cast<std::size_t>(oy) * wo + ox) * co;
            if (has_bias)
                for (int f = 0; f < co; ++f) orow[f] = b.value().data[static_cast<std::size_t>(f)];
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox + kx - pad;
                    if (ix < 0 || ix >= wd) continue;
                    const real* xpix = xv.data() + (static_cast<std::size_t>(iy) * wd + ix) * ci;
                    const real* wrow = wv.data() + (static_cast<std::size_t>(ky) * kw + kx) * ci * co;
                    for (int cc = 0; cc < ci; ++cc) {
                        const real xc = xpix[cc];
                        if (xc == 0.0) continue;
                        const real* wf = wrow + static_cast<std::size_t>(cc) * co;
                        for (int f = 0; f < co; ++f) orow[f] += xc * wf[f];
                    }
                }
            }
        }
    }

    std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return detail::make_op(std::move(out), std::move(parents),
                           [h, wd, ci, kh, kw, co, ho, wo, pad, has_bias](Node& self) {
        const auto& xv = self.parents[0]->val.data;
        const auto& wv = self.parents[1]->val.data;
        real* gx = detail::grad_ptr(self.parents[0]);
        real* gw = detail::grad_ptr(self.parents[1]);
        real* gb = has_bias ? detail::grad_ptr(self.parents[2]) : nullptr;
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                const real* grow = self.grad.data() + (static_cast<std::size_t>(oy) * wo + ox) * co;
                if (gb)
                    for (int f = 0; f < co; ++f) gb[f] += grow[f];
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox + kx - pad;
                        if (ix < 0 || ix >= wd) continue;
                        const std::size_t xoff = (static_cast<std::size_t>(iy) * wd + ix) * ci;
                        const std::size_t woff = (static_cast<std::size_t>(ky) * kw + kx) * ci * co;
                        for (int cc = 0; cc < ci; ++cc) {
                            const real* wf = wv.data() + woff + static_cast<std::size_t>(cc) * co;
                            real s = 0.0;
                            for (int f = 0; f < co; ++f) s += grow[f] * wf[f];
                            if (gx) gx[xoff + static_cast<std::size_t>(cc)] += s;
                            if (gw) {
                                const real xc = xv[xoff + static_cast<std::size_t>(cc)];
                                if (xc != 0.0) {
                                    real* gwf = gw + woff + static_cast<std::size_t>(cc) * co;
                                    for (int f = 0; f < co; ++f) gwf[f] += xc * grow[f];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// 2x2 average pooling, stride 2; requires even spatial dims.
inline Var avgpool2(const Var& x) {
    require(x.shape().size() == 3, "avgpool2: rank-3 input expected");
    const int h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
    require(h % 2 == 0 && w % 2 == 0, "avgpool2: spatial dims must be even");
    const int h2 = h / 2, w2 = w / 2;
    Tensor out = Tensor::zeros({h2, w2, c});
    const auto& xv = x.value().data;
    for (int i = 0; i < h2; ++i)
        for (int j = 0; j < w2; ++j)
            for (int cc = 0; cc < c; ++cc) {
                const real s = xv[(static_cast<std::size_t>(2 * i) * w + 2 * j) * c + cc] +
                               xv[(static_cast<std::size_t>(2 * i) * w + 2 * j + 1) * c + cc] +
                               xv[(static_cast<std::size_t>(2 * i + 1) * w + 2 * j) * c + cc] +
                               xv[(static_cast<std::size_t>(2 * i + 1) * w + 2 * j + 1) * c + cc];
                out.at3(i, j, cc) = 0.25 * s;
            }
    return detail::make_op(std::move(out), {x}, [h2, w2, w, c](Node& self) {
        if (real* gx = detail::grad_ptr(self.parents[0])) {
            for (int i = 0; i < h2; ++i)
                for (int j = 0; j < w2; ++j)
                    for (int cc = 0; cc < c; ++cc) {
                        const real g = 0.25 * self.grad[(static_cast<std::size_t>(i) * w2 + j) * c + cc];
                        gx[(static_cast<long>(2 * i) * w + 2 * j) * c + cc] += g;
                        gx[(static_cast<long>(2 * i) * w + 2 * j + 1) * c + cc] += g;
                        gx[(static_cast<long>(2 * i + 1) * w + 2 * j) * c + cc] += g;
                        gx[(static_cast<long>(2 * i + 1) * w + 2 * j + 1) * c + cc] += g;
                    }
        }
    });
}

/// Bilinear upsampling of an (H,W) map (half-pixel centers, clamped edges).
inline Var bilinear_upsample(const Var& x, int h2, int w2) {
    require(x.shape().size() == 2, "bilinear_upsample: rank-2 input expected");
    const int h = x.shape()[0], w = x.shape()[1];
    struct Axis { std::vector<int> i0, i1; std::vector<real> t; };
    auto build = [](int src, int dst) {
        Axis ax;
        ax.i0.resize(static_cast<std::size_t>(dst));
        ax.i1.resize(static_cast<std::size_t>(dst));
        ax.t.resize(static_cast<std::size_t>(dst));
        for (int i = 0; i < dst; ++i) {
            real s = (static_cast<real>(i) + 0.5) * src / dst - 0.5;
            s = std::min(std::max(s, 0.0), static_cast<real>(src - 1));
            const int lo = static_cast<int>(std::floor(s));
            ax.i0[static_cast<std::size_t>(i)] = lo;
            ax.i1[static_cast<std::size_t>(i)] = std::min(lo + 1, src - 1);
            ax.t[static_cast<std::size_t>(i)] = s - static_cast<real>(lo);
        }
        return ax;
    };
    auto ay = std::make_shared<Axis>(build(h, h2));
    auto axx = std::make_shared<Axis>(build(w, w2));
    Tensor out = Tensor::zeros({h2, w2});
    for (int i = 0; i < h2; ++i) {
        const int y0 = ay->i0[static_cast<std::size_t>(i)], y1 = ay->i1[static_cast<std::size_t>(i)];
        const real ty = ay->t[static_cast<std::size_t>(i)];
        for (int j = 0; j < w2; ++j) {
            const int x0 = axx->i0[static_cast<std::size_t>(j)], x1 = axx->i1[static_cast<std::size_t>(j)];
            const real tx = axx->t[static_cast<std::size_t>(j)];
            out.at2(i, j) = (1 - ty) * (1 - tx) * x.value().at2(y0, x0) +
                            (1 - ty) * tx * x.value().at2(y0, x1) +
                            ty * (1 - tx) * x.value().at2(y1, x0) +
                            ty * tx * x.value().at2(y1, x1);
        }
    }
    return detail::make_op(std::move(out), {x}, [h2, w2, w, ay, axx](Node& self) {
        if (real* gx = detail::grad_ptr(self.parents[0])) {
            for (int i = 0; i < h2; ++i) {
                const int y0 = ay->i0[static_cast<std::size_t>(i)], y1 = ay->i1[static_cast<std::size_t>(i)];
                const real ty = ay->t[static_cast<std::size_t>(i)];
                for (int j = 0; j < w2; ++j) {
                    const int x0 = axx->i0[static_cast<std::size_t>(j)], x1 = axx->i1[static_cast<std::size_t>(j)];
                    const real tx = axx->t[static_cast<std::size_t>(j)];
                    const real g = self.grad[static_cast<std::size_t>(i * w2 + j)];
                    gx[static_cast<long>(y0) * w + x0] += (1 - ty) * (1 - tx) * g;
                    gx[static_cast<long>(y0) * w + x1] += (1 - ty) * tx * g;
                    gx[static_cast<long>(y1) * w + x0] += ty * (1 - tx) * g;
                    gx[static_cast<long>(y1) * w + x1] += ty * tx * g;
                }
            }
        }
    });
}

/// Mean binary cross-entropy of probabilities against a 0/1 target map.
/// Probabilities are clipped to [1e-7, 1-1e-7] inside the log only.
inline Var bce_loss(const Var& p, const Tensor& target) {
    require(p.shape() == target.shape, "bce_loss: shape mismatch");
    const long n = p.numel();
    require(n > 0, "bce_loss: empty input");
    constexpr real kClip = 1e-7;
    auto tgt = std::make_shared<Tensor>(target);
    real loss = 0.0;
    for (long i = 0; i < n; ++i) {
        const real pc = std::min(std::max(p.value().data[static_cast<std::size_t>(i)], kClip), 1.0 - kClip);
        const real y = tgt->data[static_cast<std::size_t>(i)];
        loss -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    }
    return detail::make_op(Tensor::scalar(loss / static_cast<real>(n)), {p}, [n, tgt](Node& self) {
        if (real* gp = detail::grad_ptr(self.parents[0])) {
            const real g = self.grad[0] / static_cast<real>(n);
            const auto& pv = self.parents[0]->val.data;
            for (long i = 0; i < n; ++i) {
                const real praw = pv[static_cast<std::size_t>(i)];
                if (praw <= kClip || praw >= 1.0 - kClip) continue;  // clip plateau
                const real y = tgt->data[static_cast<std::size_t>(i)];
                gp[i] += g * (-y / praw + (1.0 - y) / (1.0 - praw));
            }
        }
    });
}

}  // namespace episeg::num
