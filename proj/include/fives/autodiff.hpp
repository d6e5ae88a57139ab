#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fives/kernels.hpp"
#include "fives/tensor.hpp"

namespace fives::ad {

// Named parameter tensors with stable iteration order and a gradient
// accumulator per parameter.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
    };

    Tensor& add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw ContractError("param '" + name + "' already exists");
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(init), Tensor{}});
        Entry& e = entries_.back();
        e.grad = Tensor(e.value.shape());
        return e.value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& value(const std::string& name) { return entries_[at(name)].value; }
    const Tensor& value(const std::string& name) const { return entries_[at(name)].value; }
    Tensor& grad(const std::string& name) { return entries_[at(name)].grad; }
    const Tensor& grad(const std::string& name) const { return entries_[at(name)].grad; }

    std::size_t size() const { return entries_.size(); }
    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }

    void zero_grads() {
        for (auto& e : entries_) e.grad.fill(0.0);
    }

    std::size_t coordinate_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

private:
    std::size_t at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown param '" + name + "'");
        return it->second;
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Reverse-accumulation tape over the fixed set of operations the model
// needs. Values are computed eagerly at record time; backward() walks
// the node list once in reverse. One tape = one forward pass.
class Tape {
public:
    using Id = std::int32_t;

    const Tensor& value(Id id) const { return nodes_[id].value; }
    const Tensor& grad(Id id) const { return nodes_[id].grad; }

    Id constant(Tensor v) { return push(std::move(v), {}); }

    // Leaf bound to a store parameter; backward() accumulates into the
    // store's gradient buffer.
    Id param(ParamStore& store, const std::string& name) {
        Id id = push(store.value(name), {});
        Tensor* gslot = &store.grad(name);
        nodes_[id].backprop = [this, id, gslot] {
            const Tensor& g = nodes_[id].grad;
            for (std::size_t i = 0; i < g.size(); ++i) (*gslot)[i] += g[i];
        };
        return id;
    }

    Id sigmoid(Id x) {
        const Tensor& xv = nodes_[x].value;
        Tensor y(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = sigmoid_scalar(xv[i]);
        Id id = push(std::move(y), {x});
        nodes_[id].backprop = [this, id, x] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& yv = nodes_[id].value;
            Tensor& xg = nodes_[x].grad;
            for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * yv[i] * (1.0 - yv[i]);
        };
        return id;
    }

    Id logit(Id x) {
        const Tensor& xv = nodes_[x].value;
        Tensor y(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = logit_scalar(xv[i]);
        Id id = push(std::move(y), {x});
        nodes_[id].backprop = [this, id, x] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& xv = nodes_[x].value;
            Tensor& xg = nodes_[x].grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double p = xv[i];
                if (p > kLogitClip && p < 1.0 - kLogitClip) xg[i] += g[i] / (p * (1.0 - p));
            }
        };
        return id;
    }

    Id scale(Id x, double c) {
        const Tensor& xv = nodes_[x].value;
        Tensor y(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = c * xv[i];
        Id id = push(std::move(y), {x});
        nodes_[id].backprop = [this, id, x, c] {
            const Tensor& g = nodes_[id].grad;
            Tensor& xg = nodes_[x].grad;
            for (std::size_t i = 0; i < g.size(); ++i) xg[i] += c * g[i];
        };
        return id;
    }

    Id add(Id a, Id b) {
        require_same_shape(nodes_[a].value, nodes_[b].value, "add");
        const Tensor& av = nodes_[a].value;
        const Tensor& bv = nodes_[b].value;
        Tensor y(av.shape());
        for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i];
        Id id = push(std::move(y), {a, b});
        nodes_[id].backprop = [this, id, a, b] {
            const Tensor& g = nodes_[id].grad;
            Tensor& ag = nodes_[a].grad;
            Tensor& bg = nodes_[b].grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                ag[i] += g[i];
                bg[i] += g[i];
            }
        };
        return id;
    }

    Id hadamard(Id a, Id b) {
        require_same_shape(nodes_[a].value, nodes_[b].value, "hadamard");
        const Tensor& av = nodes_[a].value;
        const Tensor& bv = nodes_[b].value;
        Tensor y(av.shape());
        for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] * bv[i];
        Id id = push(std::move(y), {a, b});
        nodes_[id].backprop = [this, id, a, b] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& av = nodes_[a].value;
            const Tensor& bv = nodes_[b].value;
            Tensor& ag = nodes_[a].grad;
            Tensor& bg = nodes_[b].grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                ag[i] += g[i] * bv[i];
                bg[i] += g[i] * av[i];
            }
        };
        return id;
    }

    Id sum_all(Id x) {
        const Tensor& xv = nodes_[x].value;
        double acc = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
        Tensor y({1});
        y[0] = acc;
        Id id = push(std::move(y), {x});
        nodes_[id].backprop = [this, id, x] {
            const double g = nodes_[id].grad[0];
            Tensor& xg = nodes_[x].grad;
            for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g;
        };
        return id;
    }

    // W x + b for W [r,c], x [c], b [r].
    Id linear(Id x, Id W, Id b) {
        Tensor y = ad::linear(nodes_[x].value, nodes_[W].value, nodes_[b].value);
        Id id = push(std::move(y), {x, W, b});
        nodes_[id].backprop = [this, id, x, W, b] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& xv = nodes_[x].value;
            const Tensor& Wv = nodes_[W].value;
            Tensor& xg = nodes_[x].grad;
            Tensor& Wg = nodes_[W].grad;
            Tensor& bg = nodes_[b].grad;
            const std::size_t r = Wv.dim(0), c = Wv.dim(1);
            for (std::size_t i = 0; i < r; ++i) {
                bg[i] += g[i];
                for (std::size_t j = 0; j < c; ++j) {
                    Wg.at(i, j) += g[i] * xv[j];
                    xg[j] += g[i] * Wv.at(i, j);
                }
            }
        };
        return id;
    }

    // Row gather: W [V,d], rows of length n -> out [n,d] (callers view
    // it with whatever leading shape they need via `reshape`).
    Id lookup_rows(Id W, std::vector<std::size_t> rows) {
        const Tensor& Wv = nodes_[W].value;
        if (Wv.rank() != 2) throw DimensionError("lookup_rows: table must be rank 2");
        const std::size_t d = Wv.dim(1);
        Tensor y({rows.size(), d});
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] >= Wv.dim(0))
                throw DomainError("lookup_rows: row " + std::to_string(rows[i]) +
                                  " out of range " + std::to_string(Wv.dim(0)));
            for (std::size_t k = 0; k < d; ++k) y.at(i, k) = Wv.at(rows[i], k);
        }
        Id id = push(std::move(y), {W});
        nodes_[id].backprop = [this, id, W, rows = std::move(rows), d] {
            const Tensor& g = nodes_[id].grad;
            Tensor& Wg = nodes_[W].grad;
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (std::size_t k = 0; k < d; ++k) Wg.at(rows[i], k) += g.at(i, k);
        };
        return id;
    }

    // Shape reinterpretation; no data movement.
    Id reshape(Id x, std::vector<std::size_t> shape) {
        const Tensor& xv = nodes_[x].value;
        if (Tensor::count(shape) != xv.size())
            throw DimensionError("reshape: " + xv.shape_str() + " to " +
                                 Tensor::shape_str(shape));
        Tensor y = Tensor::from_values(std::move(shape),
                                       std::vector<double>(xv.data(), xv.data() + xv.size()));
        Id id = push(std::move(y), {x});
        nodes_[id].backprop = [this, id, x] {
            const Tensor& g = nodes_[id].grad;
            Tensor& xg = nodes_[x].grad;
            for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
        };
        return id;
    }

    // Per-node transform: W [m,d,d] stacked, x [B,m,d] ->
    // out[b,j,:] = W[j] x[b,j,:].
    Id per_node_linear(Id x, Id W) {
        const Tensor& xv = nodes_[x].value;
        const Tensor& Wv = nodes_[W].value;
        if (xv.rank() != 3 || Wv.rank() != 3 || Wv.dim(0) != xv.dim(1) ||
            Wv.dim(1) != xv.dim(2) || Wv.dim(2) != xv.dim(2))
            throw DimensionError("per_node_linear: x " + xv.shape_str() + " W " +
                                 Wv.shape_str());
        const std::size_t B = xv.dim(0), m = xv.dim(1), d = xv.dim(2);
        Tensor y({B, m, d});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t r = 0; r < d; ++r) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < d; ++c) acc += Wv.at(j, r, c) * xv.at(b, j, c);
                    y.at(b, j, r) = acc;
                }
        Id id = push(std::move(y), {x, W});
        nodes_[id].backprop = [this, id, x, W, B, m, d] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& xv = nodes_[x].value;
            const Tensor& Wv = nodes_[W].value;
            Tensor& xg = nodes_[x].grad;
            Tensor& Wg = nodes_[W].grad;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < m; ++j)
                    for (std::size_t r = 0; r < d; ++r) {
                        const double gr = g.at(b, j, r);
                        if (gr == 0.0) continue;
                        for (std::size_t c = 0; c < d; ++c) {
                            Wg.at(j, r, c) += gr * xv.at(b, j, c);
                            xg.at(b, j, c) += gr * Wv.at(j, r, c);
                        }
                    }
        };
        return id;
    }

    // Weighted mean over graph neighbours, batched over samples:
    // weights [m,m] (row i = incoming weights of node i), msg [B,m,d],
    // out[b,i,:] = sum_j w[i,j] msg[b,j,:] / max(sum_j w[i,j], eps).
    Id weighted_mix(Id weights, Id msg, double eps) {
        const Tensor& wv = nodes_[weights].value;
        const Tensor& mv = nodes_[msg].value;
        if (wv.rank() != 2 || mv.rank() != 3 || wv.dim(0) != wv.dim(1) ||
            wv.dim(0) != mv.dim(1))
            throw DimensionError("weighted_mix: weights " + wv.shape_str() + " msg " +
                                 mv.shape_str());
        const std::size_t B = mv.dim(0), m = mv.dim(1), d = mv.dim(2);
        std::vector<double> den(m), active(m);
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += wv.at(i, j);
            den[i] = std::max(s, eps);
            active[i] = (s >= eps) ? 1.0 : 0.0;
        }
        Tensor y({B, m, d});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    const double w = wv.at(i, j);
                    if (w == 0.0) continue;
                    for (std::size_t k = 0; k < d; ++k)
                        y.at(b, i, k) += w * mv.at(b, j, k);
                }
                for (std::size_t k = 0; k < d; ++k) y.at(b, i, k) /= den[i];
            }
        Id id = push(std::move(y), {weights, msg});
        nodes_[id].backprop = [this, id, weights, msg, B, m, d, den = std::move(den),
                               active = std::move(active)] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& yv = nodes_[id].value;
            const Tensor& wv = nodes_[weights].value;
            const Tensor& mv = nodes_[msg].value;
            Tensor& wg = nodes_[weights].grad;
            Tensor& mg = nodes_[msg].grad;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                        const double w = wv.at(i, j);
                        double dot = 0.0;
                        for (std::size_t k = 0; k < d; ++k) {
                            const double gk = g.at(b, i, k);
                            dot += gk * (mv.at(b, j, k) - active[i] * yv.at(b, i, k));
                            mg.at(b, j, k) += gk * w / den[i];
                        }
                        wg.at(i, j) += dot / den[i];
                    }
        };
        return id;
    }

    // Y = M X with M = D^-1 phi(P) built from P's current values: phi
    // thresholds at `threshold`, D is the row-degree of phi(P) with zero
    // rows kept at degree 1. Backward treats D as constant and passes
    // straight through phi, so P receives the surrogate gradient
    // dY_ij/dP_il = X_lj / deg_i.
    Id straight_through_mix(Id P, Id X, double threshold) {
        const Tensor& pv = nodes_[P].value;
        const Tensor& xv = nodes_[X].value;
        if (pv.rank() != 2 || xv.rank() != 2 || pv.dim(0) != pv.dim(1) ||
            pv.dim(1) != xv.dim(0))
            throw DimensionError("straight_through_mix: P " + pv.shape_str() + " X " +
                                 xv.shape_str());
        const std::size_t m = pv.dim(0), c = xv.dim(1);
        std::vector<double> inv_deg(m, 1.0);
        Tensor phi({m, m});
        for (std::size_t i = 0; i < m; ++i) {
            double deg = 0.0;
            for (std::size_t l = 0; l < m; ++l) {
                phi.at(i, l) = pv.at(i, l) >= threshold ? 1.0 : 0.0;
                deg += phi.at(i, l);
            }
            if (deg > 1.0) inv_deg[i] = 1.0 / deg;
        }
        Tensor y({m, c});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < m; ++l) {
                if (phi.at(i, l) == 0.0) continue;
                const double w = inv_deg[i];
                for (std::size_t j = 0; j < c; ++j) y.at(i, j) += w * xv.at(l, j);
            }
        Id id = push(std::move(y), {P, X});
        nodes_[id].backprop = [this, id, P, X, phi = std::move(phi),
                               inv_deg = std::move(inv_deg), m, c] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& xv = nodes_[X].value;
            Tensor& pg = nodes_[P].grad;
            Tensor& xg = nodes_[X].grad;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t l = 0; l < m; ++l) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double gij = g.at(i, j);
                        dot += gij * xv.at(l, j);
                        if (phi.at(i, l) != 0.0) xg.at(l, j) += inv_deg[i] * gij;
                    }
                    pg.at(i, l) += inv_deg[i] * dot;
                }
        };
        return id;
    }

    // Y = C X with C a fixed matrix (no gradient to C).
    Id matmul_const_left(Tensor C, Id X) {
        const Tensor& xv = nodes_[X].value;
        if (C.rank() != 2 || xv.rank() != 2 || C.dim(1) != xv.dim(0))
            throw DimensionError("matmul_const_left: C " + C.shape_str() + " X " +
                                 xv.shape_str());
        const std::size_t r = C.dim(0), inner = C.dim(1), c = xv.dim(1);
        Tensor y({r, c});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t k = 0; k < inner; ++k) {
                const double cv = C.at(i, k);
                if (cv == 0.0) continue;
                for (std::size_t j = 0; j < c; ++j) y.at(i, j) += cv * xv.at(k, j);
            }
        Id id = push(std::move(y), {X});
        nodes_[id].backprop = [this, id, X, C = std::move(C), r, inner, c] {
            const Tensor& g = nodes_[id].grad;
            Tensor& xg = nodes_[X].grad;
            for (std::size_t k = 0; k < inner; ++k)
                for (std::size_t i = 0; i < r; ++i) {
                    const double cv = C.at(i, k);
                    if (cv == 0.0) continue;
                    for (std::size_t j = 0; j < c; ++j) xg.at(k, j) += cv * g.at(i, j);
                }
        };
        return id;
    }

    // z_b = w . x_b + b0 for x [B,F] (higher-rank x is read as [B, F]).
    Id affine_rows(Id x, Id w, Id b) {
        const Tensor& xv = nodes_[x].value;
        const Tensor& wv = nodes_[w].value;
        const Tensor& bv = nodes_[b].value;
        if (xv.rank() < 2 || wv.rank() != 1 || bv.size() != 1)
            throw DimensionError("affine_rows: x " + xv.shape_str() + " w " + wv.shape_str());
        const std::size_t B = xv.dim(0);
        const std::size_t F = xv.size() / B;
        if (F != wv.dim(0))
            throw DimensionError("affine_rows: row size " + std::to_string(F) + " vs w " +
                                 wv.shape_str());
        Tensor y({B});
        for (std::size_t i = 0; i < B; ++i) {
            double acc = bv[0];
            for (std::size_t f = 0; f < F; ++f) acc += wv[f] * xv[i * F + f];
            y[i] = acc;
        }
        Id id = push(std::move(y), {x, w, b});
        nodes_[id].backprop = [this, id, x, w, b, B, F] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& xv = nodes_[x].value;
            const Tensor& wv = nodes_[w].value;
            Tensor& xg = nodes_[x].grad;
            Tensor& wg = nodes_[w].grad;
            Tensor& bg = nodes_[b].grad;
            for (std::size_t i = 0; i < B; ++i) {
                const double gi = g[i];
                if (gi == 0.0) continue;
                bg[0] += gi;
                for (std::size_t f = 0; f < F; ++f) {
                    wg[f] += gi * xv[i * F + f];
                    xg[i * F + f] += gi * wv[f];
                }
            }
        };
        return id;
    }

    // Mean binary cross-entropy over samples and heads (predictions are
    // probabilities, clipped at kLogitClip before the log).
    Id bce_multi_head(const std::vector<Id>& heads, std::vector<double> labels) {
        if (heads.empty()) throw ContractError("bce_multi_head: no heads");
        const std::size_t B = labels.size();
        for (Id h : heads)
            if (nodes_[h].value.size() != B)
                throw DimensionError("bce_multi_head: head size " +
                                     std::to_string(nodes_[h].value.size()) + " vs labels " +
                                     std::to_string(B));
        const double K = static_cast<double>(heads.size());
        double acc = 0.0;
        for (Id h : heads) {
            const Tensor& p = nodes_[h].value;
            for (std::size_t i = 0; i < B; ++i) {
                const double q = std::clamp(p[i], kLogitClip, 1.0 - kLogitClip);
                acc -= labels[i] * std::log(q) + (1.0 - labels[i]) * std::log1p(-q);
            }
        }
        Tensor y({1});
        y[0] = acc / (static_cast<double>(B) * K);
        Id id = push(std::move(y), heads);
        nodes_[id].backprop = [this, id, heads, labels = std::move(labels), B, K] {
            const double g = nodes_[id].grad[0] / (static_cast<double>(B) * K);
            for (Id h : heads) {
                const Tensor& p = nodes_[h].value;
                Tensor& pg = nodes_[h].grad;
                for (std::size_t i = 0; i < B; ++i) {
                    if (p[i] <= kLogitClip || p[i] >= 1.0 - kLogitClip) continue;
                    pg[i] -= g * (labels[i] / p[i] - (1.0 - labels[i]) / (1.0 - p[i]));
                }
            }
        };
        return id;
    }

    // Accumulates dLoss/dtheta into each touched parameter's store slot.
    void backward(Id loss) {
        if (nodes_[loss].value.size() != 1)
            throw ContractError("backward: loss must be scalar, got shape " +
                                nodes_[loss].value.shape_str());
        for (auto& n : nodes_) n.grad.fill(0.0);
        nodes_[loss].grad[0] = 1.0;
        for (Id id = loss; id >= 0; --id)
            if (nodes_[id].backprop) nodes_[id].backprop();
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void()> backprop;
    };

    Id push(Tensor value, const std::vector<Id>& /*parents*/) {
        Node n;
        n.grad = Tensor(value.shape());
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

}  // namespace fives::ad
