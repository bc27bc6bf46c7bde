#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "semi/errors.hpp"
#include "semi/matrix.hpp"
#include "semi/ops.hpp"
#include "semi/rng.hpp"

namespace semi {

using ParamMap = std::map<std::string, DenseMatrix>;
using NodeId = std::int32_t;

// Reverse-mode tape over DenseMatrix values. One context records one forward
// pass; backward may run once per record. Parameters are named slots so
// optimizer state can attach by name; constants take part in the graph but
// never receive gradient storage of their own in the registry.
class GradContext {
public:
    NodeId constant(DenseMatrix v) { return push(std::move(v), false); }

    NodeId param(const std::string& name, DenseMatrix v) {
        if (registry_.count(name)) throw InputError("GradContext: duplicate parameter slot " + name);
        const NodeId id = push(std::move(v), true);
        registry_[name] = id;
        return id;
    }

    // Lifts a parameter-or-constant depending on whether it is trainable here.
    NodeId lift(const std::string& name, const DenseMatrix& v, bool trainable) {
        return trainable ? param(name, v) : constant(v);
    }

    const DenseMatrix& value(NodeId id) const { return nodes_[id].value; }

    double scalar(NodeId id) const {
        const auto& v = nodes_[id].value;
        if (v.size() != 1) throw InputError("GradContext: node is not a scalar");
        return v.data[0];
    }

    NodeId matmul(NodeId a, NodeId b) {
        NodeId id = push(semi::matmul(value(a), value(b)), needs(a) || needs(b));
        nodes_[id].backward = [this, a, b, id] {
            if (needs(a)) accumulate(a, semi::matmul_nt(grad(id), value(b)));
            if (needs(b)) accumulate(b, semi::matmul_tn(value(a), grad(id)));
        };
        return id;
    }

    // a * b^T
    NodeId matmul_nt(NodeId a, NodeId b) {
        NodeId id = push(semi::matmul_nt(value(a), value(b)), needs(a) || needs(b));
        nodes_[id].backward = [this, a, b, id] {
            if (needs(a)) accumulate(a, semi::matmul(grad(id), value(b)));
            if (needs(b)) accumulate(b, semi::matmul_tn(grad(id), value(a)));
        };
        return id;
    }

    NodeId add(NodeId a, NodeId b) {
        NodeId id = push(semi::add(value(a), value(b)), needs(a) || needs(b));
        nodes_[id].backward = [this, a, b, id] {
            if (needs(a)) accumulate(a, grad(id));
            if (needs(b)) accumulate(b, grad(id));
        };
        return id;
    }

    // a + c*b
    NodeId add_scaled(NodeId a, NodeId b, double c) {
        DenseMatrix v = value(a);
        axpy(v, c, value(b));
        NodeId id = push(std::move(v), needs(a) || needs(b));
        nodes_[id].backward = [this, a, b, c, id] {
            if (needs(a)) accumulate(a, grad(id));
            if (needs(b)) accumulate(b, semi::scale(grad(id), c));
        };
        return id;
    }

    // broadcast a [1 x n] bias over every row of a
    NodeId add_rowvec(NodeId a, NodeId bias) {
        const DenseMatrix& av = value(a);
        const DenseMatrix& bv = value(bias);
        if (bv.rows != 1 || bv.cols != av.cols) throw InputError("add_rowvec: bias must be [1 x cols]");
        DenseMatrix v = av;
        for (int i = 0; i < v.rows; ++i)
            for (int j = 0; j < v.cols; ++j) v.at(i, j) += bv.at(0, j);
        NodeId id = push(std::move(v), needs(a) || needs(bias));
        nodes_[id].backward = [this, a, bias, id] {
            if (needs(a)) accumulate(a, grad(id));
            if (needs(bias)) {
                const DenseMatrix& g = grad(id);
                DenseMatrix gb(1, g.cols);
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j) gb.at(0, j) += g.at(i, j);
                accumulate(bias, gb);
            }
        };
        return id;
    }

    NodeId scale(NodeId a, double c) {
        NodeId id = push(semi::scale(value(a), c), needs(a));
        nodes_[id].backward = [this, a, c, id] {
            if (needs(a)) accumulate(a, semi::scale(grad(id), c));
        };
        return id;
    }

    NodeId gelu(NodeId a) {
        DenseMatrix v = value(a);
        for (auto& x : v.data) x = gelu_approx(x);
        NodeId id = push(std::move(v), needs(a));
        nodes_[id].backward = [this, a, id] {
            if (!needs(a)) return;
            DenseMatrix g = grad(id);
            const DenseMatrix& x = value(a);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= gelu_approx_grad(x.data[i]);
            accumulate(a, g);
        };
        return id;
    }

    // inverted dropout; call only in train mode
    NodeId dropout(NodeId a, double p, Rng& rng) {
        if (p <= 0.0) return a;
        DenseMatrix mask(value(a).rows, value(a).cols);
        const double keep = 1.0 - p;
        for (auto& m : mask.data) m = rng.uniform() < p ? 0.0 : 1.0 / keep;
        DenseMatrix v = value(a);
        for (std::size_t i = 0; i < v.size(); ++i) v.data[i] *= mask.data[i];
        NodeId id = push(std::move(v), needs(a));
        nodes_[id].backward = [this, a, id, mask = std::move(mask)] {
            if (!needs(a)) return;
            DenseMatrix g = grad(id);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= mask.data[i];
            accumulate(a, g);
        };
        return id;
    }

    // row-wise softmax; when causal, position i attends to columns j <= i
    NodeId softmax_rows(NodeId a, bool causal = false) {
        DenseMatrix s = value(a);
        if (causal) {
            for (int i = 0; i < s.rows; ++i)
                for (int j = i + 1; j < s.cols; ++j) s.at(i, j) = -1e30;
        }
        DenseMatrix p = semi::softmax_rows(s);
        NodeId id = push(p, needs(a));
        nodes_[id].backward = [this, a, id] {
            if (!needs(a)) return;
            const DenseMatrix& p = value(id);
            const DenseMatrix& g = grad(id);
            DenseMatrix out(p.rows, p.cols);
            for (int i = 0; i < p.rows; ++i) {
                double s = 0.0;
                for (int j = 0; j < p.cols; ++j) s += g.at(i, j) * p.at(i, j);
                for (int j = 0; j < p.cols; ++j) out.at(i, j) = p.at(i, j) * (g.at(i, j) - s);
            }
            accumulate(a, out);
        };
        return id;
    }

    // per-row normalization to zero mean, unit variance (no learned affine)
    NodeId layernorm_rows(NodeId a, double eps = 1e-5) {
        const DenseMatrix& x = value(a);
        DenseMatrix y(x.rows, x.cols);
        std::vector<double> inv_sigma(x.rows);
        for (int i = 0; i < x.rows; ++i) {
            double mu = 0.0;
            for (int j = 0; j < x.cols; ++j) mu += x.at(i, j);
            mu /= x.cols;
            double var = 0.0;
            for (int j = 0; j < x.cols; ++j) {
                const double d = x.at(i, j) - mu;
                var += d * d;
            }
            var /= x.cols;
            inv_sigma[i] = 1.0 / std::sqrt(var + eps);
            for (int j = 0; j < x.cols; ++j) y.at(i, j) = (x.at(i, j) - mu) * inv_sigma[i];
        }
        NodeId id = push(std::move(y), needs(a));
        nodes_[id].backward = [this, a, id, inv_sigma = std::move(inv_sigma)] {
            if (!needs(a)) return;
            const DenseMatrix& y = value(id);
            const DenseMatrix& g = grad(id);
            DenseMatrix out(y.rows, y.cols);
            const int n = y.cols;
            for (int i = 0; i < y.rows; ++i) {
                double gmean = 0.0, gymean = 0.0;
                for (int j = 0; j < n; ++j) {
                    gmean += g.at(i, j);
                    gymean += g.at(i, j) * y.at(i, j);
                }
                gmean /= n;
                gymean /= n;
                for (int j = 0; j < n; ++j)
                    out.at(i, j) = inv_sigma[i] * (g.at(i, j) - gmean - y.at(i, j) * gymean);
            }
            accumulate(a, out);
        };
        return id;
    }

    NodeId concat_rows(std::span<const NodeId> parts) {
        if (parts.empty()) throw InputError("concat_rows: empty");
        int rows = 0;
        const int cols = value(parts[0]).cols;
        bool any = false;
        for (NodeId p : parts) {
            if (value(p).cols != cols) throw InputError("concat_rows: column mismatch");
            rows += value(p).rows;
            any = any || needs(p);
        }
        DenseMatrix v(rows, cols);
        int r = 0;
        for (NodeId p : parts) {
            const DenseMatrix& pv = value(p);
            std::copy(pv.data.begin(), pv.data.end(),
                      v.data.begin() + static_cast<std::size_t>(r) * cols);
            r += pv.rows;
        }
        NodeId id = push(std::move(v), any);
        std::vector<NodeId> owned(parts.begin(), parts.end());
        nodes_[id].backward = [this, owned = std::move(owned), id] {
            const DenseMatrix& g = grad(id);
            int r = 0;
            for (NodeId p : owned) {
                const int pr = value(p).rows;
                if (needs(p)) {
                    DenseMatrix gp(pr, g.cols);
                    std::copy_n(g.data.begin() + static_cast<std::size_t>(r) * g.cols,
                                static_cast<std::size_t>(pr) * g.cols, gp.data.begin());
                    accumulate(p, gp);
                }
                r += pr;
            }
        };
        return id;
    }

    // rows [r0, r1)
    NodeId slice_rows(NodeId a, int r0, int r1) {
        const DenseMatrix& av = value(a);
        if (r0 < 0 || r1 > av.rows || r0 >= r1) throw InputError("slice_rows: bad range");
        DenseMatrix v(r1 - r0, av.cols);
        std::copy_n(av.data.begin() + static_cast<std::size_t>(r0) * av.cols, v.size(),
                    v.data.begin());
        NodeId id = push(std::move(v), needs(a));
        nodes_[id].backward = [this, a, r0, id] {
            if (!needs(a)) return;
            const DenseMatrix& g = grad(id);
            DenseMatrix ga(value(a).rows, value(a).cols);
            std::copy(g.data.begin(), g.data.end(),
                      ga.data.begin() + static_cast<std::size_t>(r0) * ga.cols);
            accumulate(a, ga);
        };
        return id;
    }

    NodeId reshape(NodeId a, int rows, int cols) {
        NodeId id = push(value(a).reshaped(rows, cols), needs(a));
        nodes_[id].backward = [this, a, id] {
            if (needs(a)) accumulate(a, grad(id).reshaped(value(a).rows, value(a).cols));
        };
        return id;
    }

    // embedding lookup: out row i = table row indices[i]
    NodeId gather_rows(NodeId table, std::vector<int> indices) {
        const DenseMatrix& t = value(table);
        DenseMatrix v(static_cast<int>(indices.size()), t.cols);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] < 0 || indices[i] >= t.rows) throw InputError("gather_rows: index out of range");
            std::copy_n(t.data.begin() + static_cast<std::size_t>(indices[i]) * t.cols, t.cols,
                        v.data.begin() + i * t.cols);
        }
        NodeId id = push(std::move(v), needs(table));
        nodes_[id].backward = [this, table, id, indices = std::move(indices)] {
            if (!needs(table)) return;
            const DenseMatrix& g = grad(id);
            DenseMatrix gt(value(table).rows, value(table).cols);
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (int j = 0; j < g.cols; ++j) gt.at(indices[i], j) += g.at(static_cast<int>(i), j);
            accumulate(table, gt);
        };
        return id;
    }

    // scalar [1 x 1]: mean cross-entropy over rows of logits
    NodeId cross_entropy_mean(NodeId logits, const std::vector<int>& targets) {
        CrossEntropyResult ce = softmax_cross_entropy(value(logits), targets);
        DenseMatrix v(1, 1);
        v.data[0] = ce.loss;
        NodeId id = push(std::move(v), needs(logits));
        nodes_[id].backward = [this, logits, id, g = std::move(ce.grad_logits)] {
            if (needs(logits)) accumulate(logits, semi::scale(g, grad(id).data[0]));
        };
        return id;
    }

    // sum_i w_i * x_i over same-shaped nodes
    NodeId weighted_sum(std::span<const NodeId> xs, std::span<const double> ws) {
        if (xs.empty() || xs.size() != ws.size()) throw InputError("weighted_sum: size mismatch");
        DenseMatrix v(value(xs[0]).rows, value(xs[0]).cols);
        bool any = false;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            axpy(v, ws[i], value(xs[i]));
            any = any || needs(xs[i]);
        }
        NodeId id = push(std::move(v), any);
        std::vector<NodeId> oxs(xs.begin(), xs.end());
        std::vector<double> ows(ws.begin(), ws.end());
        nodes_[id].backward = [this, id, oxs = std::move(oxs), ows = std::move(ows)] {
            for (std::size_t i = 0; i < oxs.size(); ++i)
                if (needs(oxs[i])) accumulate(oxs[i], semi::scale(grad(id), ows[i]));
        };
        return id;
    }

    // Runs reverse accumulation from a scalar loss. Every registered parameter
    // ends up with a gradient of its own shape (zero if disconnected).
    void backward(NodeId loss) {
        if (backward_done_) throw InputError("GradContext: backward already ran on this record");
        backward_done_ = true;
        if (value(loss).size() != 1) throw InputError("GradContext: backward requires a scalar loss");
        ensure_grad(loss);
        nodes_[loss].grad.data[0] = 1.0;
        for (NodeId id = loss; id >= 0; --id) {
            auto& n = nodes_[id];
            if (!n.requires_grad || !n.has_grad || !n.backward) continue;
            n.backward();
        }
        for (auto& [name, id] : registry_) ensure_grad(id);
    }

    bool backward_ran() const { return backward_done_; }

    const DenseMatrix& grad_of(const std::string& name) const {
        auto it = registry_.find(name);
        if (it == registry_.end()) throw InputError("GradContext: unknown parameter " + name);
        const auto& n = nodes_[it->second];
        if (!n.has_grad) throw InputError("GradContext: gradient not computed for " + name);
        return n.grad;
    }

    ParamMap gradients() const {
        ParamMap out;
        for (const auto& [name, id] : registry_) {
            const auto& n = nodes_[id];
            out[name] = n.has_grad ? n.grad : DenseMatrix(n.value.rows, n.value.cols);
        }
        return out;
    }

    const std::map<std::string, NodeId>& registry() const { return registry_; }

private:
    struct Node {
        DenseMatrix value;
        DenseMatrix grad;
        std::function<void()> backward;
        bool requires_grad = false;
        bool has_grad = false;
    };

    NodeId push(DenseMatrix v, bool requires_grad) {
        if (backward_done_) throw InputError("GradContext: record is closed after backward");
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    bool needs(NodeId id) const { return nodes_[id].requires_grad; }

    void ensure_grad(NodeId id) {
        auto& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = DenseMatrix(n.value.rows, n.value.cols);
            n.has_grad = true;
        }
    }

    DenseMatrix& grad(NodeId id) {
        ensure_grad(id);
        return nodes_[id].grad;
    }

    void accumulate(NodeId id, const DenseMatrix& g) {
        ensure_grad(id);
        axpy(nodes_[id].grad, 1.0, g);
    }

    std::vector<Node> nodes_;
    std::map<std::string, NodeId> registry_;
    bool backward_done_ = false;
};

} // namespace semi
