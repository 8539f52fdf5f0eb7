#pragma once

// Reverse-mode automatic differentiation over small dense tensors. A forward
// pass builds a DAG of Node values; backward() walks it in reverse
// topological order. Single-threaded and deterministic: identical inputs give
// bitwise identical outputs and gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "phenocd/tensor.hpp"

namespace phenocd::nn {

struct PixelRef {
    int n;  // batch index
    int y;
    int x;
};

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
    }
    void zero_grad() {
        std::fill(grad.data.begin(), grad.data.end(), T(0));
        grad_ready = false;
    }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> make_leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return n;
}

template <typename T>
NodePtr<T> make_const(Tensor<T> value) {
    return make_leaf(std::move(value), false);
}

template <typename T>
NodePtr<T> make_from(Tensor<T> value, std::vector<NodePtr<T>> inputs,
                     std::function<void(Node<T>&)> backward_fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->ensure_grad();
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

// Reverse accumulation from a scalar root. Iterative DFS so deep graphs do
// not overflow the call stack. Nodes that do not require grad are never
// visited.
template <typename T>
void backward(const NodePtr<T>& root) {
    if (root->value.numel() != 1)
        throw ShapeError("backward: root must be scalar, got " + root->value.shape_str());
    if (!root->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& top = stack.back();
        Node<T>* node = top.first;
        if (top.second < node->inputs.size()) {
            Node<T>* child = node->inputs[top.second++].get();
            if (child->requires_grad && visited.insert(child).second)
                stack.push_back({child, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad.data[0] += T(1);
    root->grad_ready = true;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
        for (auto& in : n->inputs) {
            if (in->requires_grad) {
                in->ensure_grad();
                in->grad_ready = true;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> relu(const NodePtr<T>& x) {
    Tensor<T> out = x->value;
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return make_from<T>(std::move(out), {x}, [](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        // subgradient 0 at input exactly 0
        for (int64_t i = 0; i < self.value.numel(); ++i)
            if (x.value.data[i] > T(0)) x.grad.data[i] += self.grad.data[i];
    });
}

template <typename T>
inline T stable_sigmoid(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
NodePtr<T> sigmoid(const NodePtr<T>& x) {
    Tensor<T> out = x->value;
    for (auto& v : out.data) v = stable_sigmoid(v);
    return make_from<T>(std::move(out), {x}, [](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int64_t i = 0; i < self.value.numel(); ++i) {
            T s = self.value.data[i];
            x.grad.data[i] += self.grad.data[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
NodePtr<T> absval(const NodePtr<T>& x) {
    Tensor<T> out = x->value;
    for (auto& v : out.data) v = std::abs(v);
    return make_from<T>(std::move(out), {x}, [](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        // subgradient 0 at input exactly 0
        for (int64_t i = 0; i < self.value.numel(); ++i) {
            T v = x.value.data[i];
            if (v > T(0))
                x.grad.data[i] += self.grad.data[i];
            else if (v < T(0))
                x.grad.data[i] -= self.grad.data[i];
        }
    });
}

// ---------------------------------------------------------------------------
// elementwise binary with per-dim broadcasting (dims must match or be 1)
// ---------------------------------------------------------------------------

namespace detail {

struct BcastPlan {
    std::vector<int> out_shape;
    int od[4];          // output dims padded to rank 4 with trailing 1s
    int64_t sa[4];      // strides into a (0 on broadcast dims)
    int64_t sb[4];      // strides into b
};

inline void padded_strides(const int d[4], const int od[4], int64_t s[4]) {
    int64_t raw3 = 1;
    int64_t raw2 = d[3];
    int64_t raw1 = static_cast<int64_t>(d[2]) * d[3];
    int64_t raw0 = static_cast<int64_t>(d[1]) * d[2] * d[3];
    const int64_t raw[4] = {raw0, raw1, raw2, raw3};
    for (int i = 0; i < 4; ++i) s[i] = (d[i] == od[i]) ? raw[i] : 0;
}

template <typename T>
inline BcastPlan make_bcast(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank())
        throw ShapeError(std::string(op) + ": rank mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    BcastPlan p;
    int da[4] = {1, 1, 1, 1}, db[4] = {1, 1, 1, 1};
    for (int i = 0; i < a.rank(); ++i) {
        da[i] = a.shape[i];
        db[i] = b.shape[i];
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
            throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_str() + " vs " +
                             b.shape_str());
    }
    for (int i = 0; i < 4; ++i) p.od[i] = std::max(da[i], db[i]);
    p.out_shape.assign(p.od, p.od + a.rank());
    padded_strides(da, p.od, p.sa);
    padded_strides(db, p.od, p.sb);
    return p;
}

// Applies fn(flat_out, flat_a, flat_b) over every output element.
template <typename F>
inline void bcast_for_each(const BcastPlan& p, F&& fn) {
    int64_t o = 0;
    for (int i0 = 0; i0 < p.od[0]; ++i0)
        for (int i1 = 0; i1 < p.od[1]; ++i1)
            for (int i2 = 0; i2 < p.od[2]; ++i2)
                for (int i3 = 0; i3 < p.od[3]; ++i3) {
                    int64_t ia = i0 * p.sa[0] + i1 * p.sa[1] + i2 * p.sa[2] + i3 * p.sa[3];
                    int64_t ib = i0 * p.sb[0] + i1 * p.sb[1] + i2 * p.sb[2] + i3 * p.sb[3];
                    fn(o++, ia, ib);
                }
}

}  // namespace detail

template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
    auto plan = detail::make_bcast("add", a->value, b->value);
    Tensor<T> out = Tensor<T>::zeros(plan.out_shape);
    detail::bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) {
        out.data[o] = a->value.data[ia] + b->value.data[ib];
    });
    return make_from<T>(std::move(out), {a, b}, [plan](Node<T>& self) {
        auto& a = *self.inputs[0];
        auto& b = *self.inputs[1];
        if (a.requires_grad) a.ensure_grad();
        if (b.requires_grad) b.ensure_grad();
        detail::bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) {
            T g = self.grad.data[o];
            if (a.requires_grad) a.grad.data[ia] += g;
            if (b.requires_grad) b.grad.data[ib] += g;
        });
    });
}

template <typename T>
NodePtr<T> sub(const NodePtr<T>& a, const NodePtr<T>& b) {
    auto plan = detail::make_bcast("sub", a->value, b->value);
    Tensor<T> out = Tensor<T>::zeros(plan.out_shape);
    detail::bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) {
        out.data[o] = a->value.data[ia] - b->value.data[ib];
    });
    return make_from<T>(std::move(out), {a, b}, [plan](Node<T>& self) {
        auto& a = *self.inputs[0];
        auto& b = *self.inputs[1];
        if (a.requires_grad) a.ensure_grad();
        if (b.requires_grad) b.ensure_grad();
        detail::bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) {
            T g = self.grad.data[o];
            if (a.requires_grad) a.grad.data[ia] += g;
            if (b.requires_grad) b.grad.data[ib] -= g;
        });
    });
}

template <typename T>
NodePtr<T> mul(const NodePtr<T>& a, const NodePtr<T>& b) {
    auto plan = detail::make_bcast("mul", a->value, b->value);
    Tensor<T> out = Tensor<T>::zeros(plan.out_shape);
    detail::bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) {
        out.data[o] = a->value.data[ia] * b->value.data[ib];
    });
    return make_from<T>(std::move(out), {a, b}, [plan](Node<T>& self) {
        auto& a = *self.inputs[0];
        auto& b = *self.inputs[1];
        if (a.requires_grad) a.ensure_grad();
        if (b.requires_grad) b.ensure_grad();
        detail::bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) {
            T g = self.grad.data[o];
            if (a.requires_grad) a.grad.data[ia] += g * b.value.data[ib];
            if (b.requires_grad) b.grad.data[ib] += g * a.value.data[ia];
        });
    });
}

// Weighted sum of same-shape terms: sum_i coeff_i * x_i. Also covers scalar
// scaling (single term) and plain averaging.
template <typename T>
NodePtr<T> wsum(const std::vector<std::pair<T, NodePtr<T>>>& terms) {
    if (terms.empty()) throw ShapeError("wsum: no terms");
    const auto& shape = terms[0].second->value.shape;
    Tensor<T> out = Tensor<T>::zeros(shape);
    std::vector<NodePtr<T>> ins;
    std::vector<T> coeffs;
    for (const auto& [c, x] : terms) {
        if (x->value.shape != shape)
            throw ShapeError("wsum: shape mismatch " + x->value.shape_str() + " vs " +
                             terms[0].second->value.shape_str());
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += c * x->value.data[i];
        ins.push_back(x);
        coeffs.push_back(c);
    }
    return make_from<T>(std::move(out), std::move(ins), [coeffs](Node<T>& self) {
        for (size_t k = 0; k < self.inputs.size(); ++k) {
            auto& x = *self.inputs[k];
            if (!x.requires_grad) continue;
            x.ensure_grad();
            T c = coeffs[k];
            for (int64_t i = 0; i < self.value.numel(); ++i)
                x.grad.data[i] += c * self.grad.data[i];
        }
    });
}

template <typename T>
NodePtr<T> scale(const NodePtr<T>& x, T c) {
    return wsum<T>({{c, x}});
}

// ---------------------------------------------------------------------------
// concatenation
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> concat_channels(const std::vector<NodePtr<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const auto& s0 = parts[0]->value;
    if (s0.rank() != 4) throw ShapeError("concat_channels: want rank 4, got " + s0.shape_str());
    int n = s0.shape[0], h = s0.shape[2], w = s0.shape[3];
    int ctot = 0;
    for (const auto& p : parts) {
        const auto& s = p->value;
        if (s.rank() != 4 || s.shape[0] != n || s.shape[2] != h || s.shape[3] != w)
            throw ShapeError("concat_channels: mismatched input " + s.shape_str() + " vs " +
                             s0.shape_str());
        ctot += s.shape[1];
    }
    Tensor<T> out = Tensor<T>::zeros({n, ctot, h, w});
    int64_t plane = static_cast<int64_t>(h) * w;
    int coff = 0;
    for (const auto& p : parts) {
        int c = p->value.shape[1];
        for (int in = 0; in < n; ++in)
            std::copy_n(p->value.data.data() + in * c * plane, c * plane,
                        out.data.data() + (static_cast<int64_t>(in) * ctot + coff) * plane);
        coff += c;
    }
    std::vector<NodePtr<T>> ins(parts.begin(), parts.end());
    return make_from<T>(std::move(out), std::move(ins), [n, ctot, plane](Node<T>& self) {
        int coff = 0;
        for (auto& pin : self.inputs) {
            auto& x = *pin;
            int c = x.value.shape[1];
            if (x.requires_grad) {
                x.ensure_grad();
                for (int in = 0; in < n; ++in) {
                    const T* src = self.grad.data.data() +
                                   (static_cast<int64_t>(in) * ctot + coff) * plane;
                    T* dst = x.grad.data.data() + in * c * plane;
                    for (int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                }
            }
            coff += c;
        }
    });
}

template <typename T>
NodePtr<T> concat_channels(std::initializer_list<NodePtr<T>> parts) {
    return concat_channels(std::vector<NodePtr<T>>(parts));
}

// Stacks rank-2 row blocks vertically: [m1,d] ++ [m2,d] -> [m1+m2,d].
template <typename T>
NodePtr<T> vconcat_rows(const std::vector<NodePtr<T>>& parts) {
    if (parts.empty()) throw ShapeError("vconcat_rows: no inputs");
    int d = parts[0]->value.rank() == 2 ? parts[0]->value.shape[1] : -1;
    if (d < 0) throw ShapeError("vconcat_rows: want rank 2, got " + parts[0]->value.shape_str());
    int mtot = 0;
    for (const auto& p : parts) {
        if (p->value.rank() != 2 || p->value.shape[1] != d)
            throw ShapeError("vconcat_rows: mismatched input " + p->value.shape_str());
        mtot += p->value.shape[0];
    }
    Tensor<T> out = Tensor<T>::zeros({mtot, d});
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + off);
        off += p->value.numel();
    }
    std::vector<NodePtr<T>> ins(parts.begin(), parts.end());
    return make_from<T>(std::move(out), std::move(ins), [](Node<T>& self) {
        int64_t off = 0;
        for (auto& pin : self.inputs) {
            auto& x = *pin;
            int64_t count = x.value.numel();
            if (x.requires_grad) {
                x.ensure_grad();
                for (int64_t i = 0; i < count; ++i) x.grad.data[i] += self.grad.data[off + i];
            }
            off += count;
        }
    });
}

template <typename T>
NodePtr<T> vconcat_rows(std::initializer_list<NodePtr<T>> parts) {
    return vconcat_rows(std::vector<NodePtr<T>>(parts));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

// [n,c,h,w] -> [n,c,1,1], mean over spatial positions.
template <typename T>
NodePtr<T> spatial_mean(const NodePtr<T>& x) {
    const auto& s = x->value;
    if (s.rank() != 4) throw ShapeError("spatial_mean: want rank 4, got " + s.shape_str());
    int n = s.shape[0], c = s.shape[1];
    int64_t plane = static_cast<int64_t>(s.shape[2]) * s.shape[3];
    Tensor<T> out = Tensor<T>::zeros({n, c, 1, 1});
    for (int64_t i = 0; i < n * static_cast<int64_t>(c); ++i) {
        T acc = T(0);
        for (int64_t j = 0; j < plane; ++j) acc += s.data[i * plane + j];
        out.data[i] = acc / static_cast<T>(plane);
    }
    return make_from<T>(std::move(out), {x}, [n, c, plane](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int64_t i = 0; i < n * static_cast<int64_t>(c); ++i) {
            T g = self.grad.data[i] / static_cast<T>(plane);
            for (int64_t j = 0; j < plane; ++j) x.grad.data[i * plane + j] += g;
        }
    });
}

// [n,c,h,w] -> [n,c,1,1], max over spatial positions (first max gets grad).
template <typename T>
NodePtr<T> spatial_max(const NodePtr<T>& x) {
    const auto& s = x->value;
    if (s.rank() != 4) throw ShapeError("spatial_max: want rank 4, got " + s.shape_str());
    int n = s.shape[0], c = s.shape[1];
    int64_t plane = static_cast<int64_t>(s.shape[2]) * s.shape[3];
    Tensor<T> out = Tensor<T>::zeros({n, c, 1, 1});
    std::vector<int64_t> arg(n * static_cast<int64_t>(c));
    for (int64_t i = 0; i < n * static_cast<int64_t>(c); ++i) {
        T best = s.data[i * plane];
        int64_t bj = 0;
        for (int64_t j = 1; j < plane; ++j) {
            if (s.data[i * plane + j] > best) {
                best = s.data[i * plane + j];
                bj = j;
            }
        }
        out.data[i] = best;
        arg[i] = bj;
    }
    return make_from<T>(std::move(out), {x}, [n, c, plane, arg](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int64_t i = 0; i < n * static_cast<int64_t>(c); ++i)
            x.grad.data[i * plane + arg[i]] += self.grad.data[i];
    });
}

// [n,c,h,w] -> [n,1,h,w], mean over channels.
template <typename T>
NodePtr<T> channel_mean(const NodePtr<T>& x) {
    const auto& s = x->value;
    if (s.rank() != 4) throw ShapeError("channel_mean: want rank 4, got " + s.shape_str());
    int n = s.shape[0], c = s.shape[1];
    int64_t plane = static_cast<int64_t>(s.shape[2]) * s.shape[3];
    Tensor<T> out = Tensor<T>::zeros({n, 1, s.shape[2], s.shape[3]});
    for (int in = 0; in < n; ++in)
        for (int64_t j = 0; j < plane; ++j) {
            T acc = T(0);
            for (int ic = 0; ic < c; ++ic)
                acc += s.data[(static_cast<int64_t>(in) * c + ic) * plane + j];
            out.data[in * plane + j] = acc / static_cast<T>(c);
        }
    return make_from<T>(std::move(out), {x}, [n, c, plane](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int in = 0; in < n; ++in)
            for (int64_t j = 0; j < plane; ++j) {
                T g = self.grad.data[in * plane + j] / static_cast<T>(c);
                for (int ic = 0; ic < c; ++ic)
                    x.grad.data[(static_cast<int64_t>(in) * c + ic) * plane + j] += g;
            }
    });
}

// [n,c,h,w] -> [n,1,h,w], max over channels (first max gets grad).
template <typename T>
NodePtr<T> channel_max(const NodePtr<T>& x) {
    const auto& s = x->value;
    if (s.rank() != 4) throw ShapeError("channel_max: want rank 4, got " + s.shape_str());
    int n = s.shape[0], c = s.shape[1];
    int64_t plane = static_cast<int64_t>(s.shape[2]) * s.shape[3];
    Tensor<T> out = Tensor<T>::zeros({n, 1, s.shape[2], s.shape[3]});
    std::vector<int> arg(n * plane);
    for (int in = 0; in < n; ++in)
        for (int64_t j = 0; j < plane; ++j) {
            T best = s.data[static_cast<int64_t>(in) * c * plane + j];
            int bc = 0;
            for (int ic = 1; ic < c; ++ic) {
                T v = s.data[(static_cast<int64_t>(in) * c + ic) * plane + j];
                if (v > best) {
                    best = v;
                    bc = ic;
                }
            }
            out.data[in * plane + j] = best;
            arg[in * plane + j] = bc;
        }
    return make_from<T>(std::move(out), {x}, [n, c, plane, arg](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int in = 0; in < n; ++in)
            for (int64_t j = 0; j < plane; ++j) {
                int bc = arg[in * plane + j];
                x.grad.data[(static_cast<int64_t>(in) * c + bc) * plane + j] +=
                    self.grad.data[in * plane + j];
            }
    });
}

// Mean over all elements -> scalar [1].
template <typename T>
NodePtr<T> mean_all(const NodePtr<T>& x) {
    int64_t m = x->value.numel();
    Tensor<T> out = Tensor<T>::zeros({1});
    T acc = T(0);
    for (auto v : x->value.data) acc += v;
    out.data[0] = acc / static_cast<T>(m);
    return make_from<T>(std::move(out), {x}, [m](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        T g = self.grad.data[0] / static_cast<T>(m);
        for (int64_t i = 0; i < m; ++i) x.grad.data[i] += g;
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
template <typename T>
NodePtr<T> matmul(const NodePtr<T>& a, const NodePtr<T>& b) {
    const auto& sa = a->value;
    const auto& sb = b->value;
    if (sa.rank() != 2 || sb.rank() != 2 || sa.shape[1] != sb.shape[0])
        throw ShapeError("matmul: incompatible " + sa.shape_str() + " x " + sb.shape_str());
    int m = sa.shape[0], k = sa.shape[1], n = sb.shape[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            T av = sa.data[static_cast<int64_t>(i) * k + l];
            if (av == T(0)) continue;
            const T* brow = sb.data.data() + static_cast<int64_t>(l) * n;
            T* orow = out.data.data() + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    return make_from<T>(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        auto& a = *self.inputs[0];
        auto& b = *self.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            // da = gy . b^T
            for (int i = 0; i < m; ++i)
                for (int l = 0; l < k; ++l) {
                    T acc = T(0);
                    const T* grow = self.grad.data.data() + static_cast<int64_t>(i) * n;
                    const T* brow = b.value.data.data() + static_cast<int64_t>(l) * n;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    a.grad.data[static_cast<int64_t>(i) * k + l] += acc;
                }
        }
        if (b.requires_grad) {
            b.ensure_grad();
            // db = a^T . gy
            for (int i = 0; i < m; ++i) {
                const T* grow = self.grad.data.data() + static_cast<int64_t>(i) * n;
                for (int l = 0; l < k; ++l) {
                    T av = a.value.data[static_cast<int64_t>(i) * k + l];
                    if (av == T(0)) continue;
                    T* brow = b.grad.data.data() + static_cast<int64_t>(l) * n;
                    for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
            }
        }
    });
}

namespace detail {

// Shared L2-normalization backward for a single vector seen through strides.
// y = x / max(norm, eps). If the denominator was clamped the map is linear;
// otherwise dx = (gy - y (y . gy)) / norm.
template <typename T>
inline void l2_norm_vec_backward(const T* yv, const T* gy, T* gx, int d, int64_t stride, T denom,
                                 bool clamped) {
    if (clamped) {
        for (int i = 0; i < d; ++i) gx[i * stride] += gy[i * stride] / denom;
        return;
    }
    T dot = T(0);
    for (int i = 0; i < d; ++i) dot += yv[i * stride] * gy[i * stride];
    for (int i = 0; i < d; ++i)
        gx[i * stride] += (gy[i * stride] - yv[i * stride] * dot) / denom;
}

}  // namespace detail

// Row-wise L2 normalization of [m,d]; denominator clamped below at eps.
template <typename T>
NodePtr<T> l2_normalize_rows(const NodePtr<T>& x, T eps = T(1e-12)) {
    const auto& s = x->value;
    if (s.rank() != 2) throw ShapeError("l2_normalize_rows: want rank 2, got " + s.shape_str());
    int m = s.shape[0], d = s.shape[1];
    Tensor<T> out = Tensor<T>::zeros({m, d});
    std::vector<T> denom(m);
    std::vector<char> clamped(m);
    for (int i = 0; i < m; ++i) {
        T sq = T(0);
        for (int j = 0; j < d; ++j) {
            T v = s.data[static_cast<int64_t>(i) * d + j];
            sq += v * v;
        }
        T norm = std::sqrt(sq);
        denom[i] = std::max(norm, eps);
        clamped[i] = norm < eps;
        for (int j = 0; j < d; ++j)
            out.data[static_cast<int64_t>(i) * d + j] =
                s.data[static_cast<int64_t>(i) * d + j] / denom[i];
    }
    return make_from<T>(std::move(out), {x}, [m, d, denom, clamped](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int i = 0; i < m; ++i)
            detail::l2_norm_vec_backward(self.value.data.data() + static_cast<int64_t>(i) * d,
                                         self.grad.data.data() + static_cast<int64_t>(i) * d,
                                         x.grad.data.data() + static_cast<int64_t>(i) * d, d, 1,
                                         denom[i], clamped[i] != 0);
    });
}

// Channel-wise L2 normalization of [n,c,h,w]: each pixel's channel vector is
// scaled to unit norm (denominator clamped below at eps).
template <typename T>
NodePtr<T> l2_normalize_channels(const NodePtr<T>& x, T eps = T(1e-12)) {
    const auto& s = x->value;
    if (s.rank() != 4)
        throw ShapeError("l2_normalize_channels: want rank 4, got " + s.shape_str());
    int n = s.shape[0], c = s.shape[1];
    int64_t plane = static_cast<int64_t>(s.shape[2]) * s.shape[3];
    Tensor<T> out = Tensor<T>::zeros(s.shape);
    std::vector<T> denom(n * plane);
    std::vector<char> clamped(n * plane);
    for (int in = 0; in < n; ++in)
        for (int64_t j = 0; j < plane; ++j) {
            int64_t base = static_cast<int64_t>(in) * c * plane + j;
            T sq = T(0);
            for (int ic = 0; ic < c; ++ic) {
                T v = s.data[base + ic * plane];
                sq += v * v;
            }
            T norm = std::sqrt(sq);
            int64_t pi = in * plane + j;
            denom[pi] = std::max(norm, eps);
            clamped[pi] = norm < eps;
            for (int ic = 0; ic < c; ++ic)
                out.data[base + ic * plane] = s.data[base + ic * plane] / denom[pi];
        }
    return make_from<T>(std::move(out), {x}, [n, c, plane, denom, clamped](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int in = 0; in < n; ++in)
            for (int64_t j = 0; j < plane; ++j) {
                int64_t base = static_cast<int64_t>(in) * c * plane + j;
                int64_t pi = in * plane + j;
                detail::l2_norm_vec_backward(self.value.data.data() + base,
                                             self.grad.data.data() + base,
                                             x.grad.data.data() + base, c, plane, denom[pi],
                                             clamped[pi] != 0);
            }
    });
}

}  // namespace phenocd::nn
