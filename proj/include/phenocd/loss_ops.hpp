#pragma once

// Loss heads and index-based gather/scatter ops used to assemble contrastive
// batches from feature fields.

#include <cmath>
#include <string>
#include <vector>

#include "phenocd/autodiff.hpp"
#include "phenocd/common.hpp"

namespace phenocd::nn {

// Collects per-pixel channel vectors from a feature field [n,c,h,w] into a
// row matrix [p,c], one row per coordinate.
template <typename T>
NodePtr<T> gather_pixels(const NodePtr<T>& field, const std::vector<PixelRef>& coords) {
    const auto& s = field->value;
    if (s.rank() != 4) throw ShapeError("gather_pixels: want rank 4, got " + s.shape_str());
    if (coords.empty()) throw ShapeError("gather_pixels: no coordinates");
    int c = s.shape[1];
    for (const auto& r : coords)
        if (r.n < 0 || r.n >= s.shape[0] || r.y < 0 || r.y >= s.shape[2] || r.x < 0 ||
            r.x >= s.shape[3])
            throw ShapeError("gather_pixels: coordinate (" + std::to_string(r.n) + "," +
                             std::to_string(r.y) + "," + std::to_string(r.x) +
                             ") outside field " + s.shape_str());
    int p = static_cast<int>(coords.size());
    Tensor<T> out = Tensor<T>::zeros({p, c});
    for (int i = 0; i < p; ++i)
        for (int ic = 0; ic < c; ++ic)
            out.data[static_cast<int64_t>(i) * c + ic] =
                s.at4(coords[i].n, ic, coords[i].y, coords[i].x);
    return make_from<T>(std::move(out), {field}, [coords, c](Node<T>& self) {
        auto& f = *self.inputs[0];
        if (!f.requires_grad) return;
        f.ensure_grad();
        for (size_t i = 0; i < coords.size(); ++i)
            for (int ic = 0; ic < c; ++ic)
                f.grad.at4(coords[i].n, ic, coords[i].y, coords[i].x) +=
                    self.grad.data[static_cast<int64_t>(i) * c + ic];
    });
}

// Row selection from [m,d] by index list (repeats allowed).
template <typename T>
NodePtr<T> gather_rows(const NodePtr<T>& x, const std::vector<int>& idx) {
    const auto& s = x->value;
    if (s.rank() != 2) throw ShapeError("gather_rows: want rank 2, got " + s.shape_str());
    if (idx.empty()) throw ShapeError("gather_rows: no indices");
    int m = s.shape[0], d = s.shape[1];
    for (int i : idx)
        if (i < 0 || i >= m)
            throw ShapeError("gather_rows: index " + std::to_string(i) + " outside [0," +
                             std::to_string(m) + ")");
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(s.data.data() + static_cast<int64_t>(idx[i]) * d, d,
                    out.data.data() + static_cast<int64_t>(i) * d);
    return make_from<T>(std::move(out), {x}, [idx, d](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < d; ++j)
                x.grad.data[static_cast<int64_t>(idx[i]) * d + j] +=
                    self.grad.data[static_cast<int64_t>(i) * d + j];
    });
}

// Mean of selected rows per group: x [m,d], groups of row indices -> [G,d].
// Every group must be nonempty.
template <typename T>
NodePtr<T> segment_mean_rows(const NodePtr<T>& x, const std::vector<std::vector<int>>& groups) {
    const auto& s = x->value;
    if (s.rank() != 2) throw ShapeError("segment_mean_rows: want rank 2, got " + s.shape_str());
    if (groups.empty()) throw ShapeError("segment_mean_rows: no groups");
    int m = s.shape[0], d = s.shape[1];
    for (const auto& g : groups) {
        if (g.empty()) throw ShapeError("segment_mean_rows: empty group");
        for (int i : g)
            if (i < 0 || i >= m)
                throw ShapeError("segment_mean_rows: index " + std::to_string(i) +
                                 " outside [0," + std::to_string(m) + ")");
    }
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(groups.size()), d});
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        T inv = T(1) / static_cast<T>(groups[gi].size());
        for (int i : groups[gi])
            for (int j = 0; j < d; ++j)
                out.data[static_cast<int64_t>(gi) * d + j] +=
                    inv * s.data[static_cast<int64_t>(i) * d + j];
    }
    return make_from<T>(std::move(out), {x}, [groups, d](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (size_t gi = 0; gi < groups.size(); ++gi) {
            T inv = T(1) / static_cast<T>(groups[gi].size());
            for (int i : groups[gi])
                for (int j = 0; j < d; ++j)
                    x.grad.data[static_cast<int64_t>(i) * d + j] +=
                        inv * self.grad.data[static_cast<int64_t>(gi) * d + j];
        }
    });
}

// Mean softmax cross entropy. Accepts logits [n,k,h,w] with targets [n,h,w]
// or logits [n,k] with targets [n]; targets hold class ids in [0,k).
template <typename T>
NodePtr<T> softmax_cross_entropy(const NodePtr<T>& logits, const Tensor<int>& targets) {
    const auto& s = logits->value;
    int n, k;
    int64_t plane;
    if (s.rank() == 4) {
        n = s.shape[0];
        k = s.shape[1];
        plane = static_cast<int64_t>(s.shape[2]) * s.shape[3];
        if (targets.rank() != 3 || targets.shape[0] != n || targets.shape[1] != s.shape[2] ||
            targets.shape[2] != s.shape[3])
            throw ShapeError("softmax_cross_entropy: targets " + targets.shape_str() +
                             " do not match logits " + s.shape_str());
    } else if (s.rank() == 2) {
        n = s.shape[0];
        k = s.shape[1];
        plane = 1;
        if (targets.rank() != 1 || targets.shape[0] != n)
            throw ShapeError("softmax_cross_entropy: targets " + targets.shape_str() +
                             " do not match logits " + s.shape_str());
    } else {
        throw ShapeError("softmax_cross_entropy: want rank 2 or 4 logits, got " + s.shape_str());
    }
    for (int t : targets.data)
        if (t < 0 || t >= k)
            throw ConfigError("softmax_cross_entropy: class id " + std::to_string(t) +
                              " outside [0," + std::to_string(k) + ")");

    int64_t count = static_cast<int64_t>(n) * plane;
    Tensor<T> probs = Tensor<T>::zeros(s.shape);
    T total = T(0);
    std::vector<T> col(k);
    for (int in = 0; in < n; ++in)
        for (int64_t j = 0; j < plane; ++j) {
            int64_t base = static_cast<int64_t>(in) * k * plane + j;
            T mx = s.data[base];
            for (int ic = 1; ic < k; ++ic) mx = std::max(mx, s.data[base + ic * plane]);
            T sum = T(0);
            for (int ic = 0; ic < k; ++ic) {
                col[ic] = std::exp(s.data[base + ic * plane] - mx);
                sum += col[ic];
            }
            int t = targets.data[in * plane + j];
            total += std::log(sum) - (s.data[base + t * plane] - mx);
            for (int ic = 0; ic < k; ++ic) probs.data[base + ic * plane] = col[ic] / sum;
        }
    Tensor<T> out = Tensor<T>::zeros({1});
    out.data[0] = total / static_cast<T>(count);

    Tensor<int> tcopy = targets;
    return make_from<T>(std::move(out), {logits},
                        [n, k, plane, count, probs = std::move(probs),
                         tcopy = std::move(tcopy)](Node<T>& self) {
        auto& logits = *self.inputs[0];
        if (!logits.requires_grad) return;
        logits.ensure_grad();
        T f = self.grad.data[0] / static_cast<T>(count);
        for (int in = 0; in < n; ++in)
            for (int64_t j = 0; j < plane; ++j) {
                int64_t base = static_cast<int64_t>(in) * k * plane + j;
                int t = tcopy.data[in * plane + j];
                for (int ic = 0; ic < k; ++ic) {
                    T q = probs.data[base + ic * plane];
                    logits.grad.data[base + ic * plane] += f * (q - (ic == t ? T(1) : T(0)));
                }
            }
    });
}

// Mean binary cross entropy over probabilities. Probabilities are clamped to
// [eps, 1-eps] before the logs; outside the clamp range the gradient is zero.
// Targets must be exactly 0 or 1.
template <typename T>
NodePtr<T> bce_probs(const NodePtr<T>& probs, const Tensor<T>& targets, T eps = T(1e-7)) {
    const auto& s = probs->value;
    if (!s.same_shape(targets))
        throw ShapeError("bce_probs: targets " + Tensor<T>::to_string(targets.shape) +
                         " do not match probs " + s.shape_str());
    for (T y : targets.data)
        if (y != T(0) && y != T(1))
            throw ConfigError("bce_probs: targets must be 0 or 1");
    int64_t m = s.numel();
    T lo = eps, hi = T(1) - eps;
    T total = T(0);
    for (int64_t i = 0; i < m; ++i) {
        T p = std::min(std::max(s.data[i], lo), hi);
        T y = targets.data[i];
        total += -(y * std::log(p) + (T(1) - y) * std::log(T(1) - p));
    }
    Tensor<T> out = Tensor<T>::zeros({1});
    out.data[0] = total / static_cast<T>(m);
    Tensor<T> tcopy = targets;
    return make_from<T>(std::move(out), {probs},
                        [m, lo, hi, tcopy = std::move(tcopy)](Node<T>& self) {
        auto& probs = *self.inputs[0];
        if (!probs.requires_grad) return;
        probs.ensure_grad();
        T f = self.grad.data[0] / static_cast<T>(m);
        for (int64_t i = 0; i < m; ++i) {
            T raw = probs.value.data[i];
            if (raw <= lo || raw >= hi) continue;
            T y = tcopy.data[i];
            probs.grad.data[i] += f * (raw - y) / (raw * (T(1) - raw));
        }
    });
}

// Mean binary cross entropy over logits, computed in the numerically stable
// form max(z,0) - z*y + log(1 + exp(-|z|)).
template <typename T>
NodePtr<T> bce_with_logits(const NodePtr<T>& logits, const Tensor<T>& targets) {
    const auto& s = logits->value;
    if (!s.same_shape(targets))
        throw ShapeError("bce_with_logits: targets " + Tensor<T>::to_string(targets.shape) +
                         " do not match logits " + s.shape_str());
    for (T y : targets.data)
        if (y != T(0) && y != T(1))
            throw ConfigError("bce_with_logits: targets must be 0 or 1");
    int64_t m = s.numel();
    T total = T(0);
    for (int64_t i = 0; i < m; ++i) {
        T z = s.data[i], y = targets.data[i];
        total += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor<T> out = Tensor<T>::zeros({1});
    out.data[0] = total / static_cast<T>(m);
    Tensor<T> tcopy = targets;
    return make_from<T>(std::move(out), {logits}, [m, tcopy = std::move(tcopy)](Node<T>& self) {
        auto& logits = *self.inputs[0];
        if (!logits.requires_grad) return;
        logits.ensure_grad();
        T f = self.grad.data[0] / static_cast<T>(m);
        for (int64_t i = 0; i < m; ++i)
            logits.grad.data[i] += f * (stable_sigmoid(logits.value.data[i]) - tcopy.data[i]);
    });
}

// One InfoNCE comparison: an anchor row pulled toward a positive row and
// pushed from negative rows, all indices into a shared embedding matrix.
struct InfoNceTriple {
    int anchor = -1;
    int positive = -1;
    std::vector<int> negatives;
};

// Mean InfoNCE over triples against a row matrix [p,d] of embeddings:
//   -log( exp(s+ / tau) / (exp(s+ / tau) + sum_j exp(s_j / tau)) )
// with s = dot products of the referenced rows. Rows are used as given:
// normalize beforehand for cosine similarity. A triple with no negatives
// contributes 0 but still counts toward the mean.
template <typename T>
NodePtr<T> infonce_mean(const NodePtr<T>& emb, const std::vector<InfoNceTriple>& triples, T tau) {
    const auto& s = emb->value;
    if (s.rank() != 2) throw ShapeError("infonce_mean: want rank 2, got " + s.shape_str());
    if (triples.empty()) throw ShapeError("infonce_mean: no triples");
    if (!(tau > T(0))) throw ConfigError("infonce_mean: temperature must be positive");
    int m = s.shape[0], d = s.shape[1];
    auto check = [&](int i) {
        if (i < 0 || i >= m)
            throw ShapeError("infonce_mean: row index " + std::to_string(i) + " outside [0," +
                             std::to_string(m) + ")");
    };
    for (const auto& t : triples) {
        check(t.anchor);
        check(t.positive);
        for (int j : t.negatives) check(j);
    }
    auto dot = [&](const T* data, int a, int b) {
        const T* ra = data + static_cast<int64_t>(a) * d;
        const T* rb = data + static_cast<int64_t>(b) * d;
        T acc = T(0);
        for (int i = 0; i < d; ++i) acc += ra[i] * rb[i];
        return acc;
    };

    T total = T(0);
    for (const auto& t : triples) {
        if (t.negatives.empty()) continue;
        T sp = dot(s.data.data(), t.anchor, t.positive) / tau;
        T mx = sp;
        std::vector<T> sn(t.negatives.size());
        for (size_t j = 0; j < t.negatives.size(); ++j) {
            sn[j] = dot(s.data.data(), t.anchor, t.negatives[j]) / tau;
            mx = std::max(mx, sn[j]);
        }
        T sum = std::exp(sp - mx);
        for (T v : sn) sum += std::exp(v - mx);
        total += mx + std::log(sum) - sp;
    }
    Tensor<T> out = Tensor<T>::zeros({1});
    out.data[0] = total / static_cast<T>(triples.size());

    std::vector<InfoNceTriple> tcopy = triples;
    return make_from<T>(std::move(out), {emb},
                        [m, d, tau, tcopy = std::move(tcopy)](Node<T>& self) {
        auto& emb = *self.inputs[0];
        if (!emb.requires_grad) return;
        emb.ensure_grad();
        const T* data = emb.value.data.data();
        T* grad = emb.grad.data.data();
        auto row = [&](int i) { return data + static_cast<int64_t>(i) * d; };
        auto growp = [&](int i) { return grad + static_cast<int64_t>(i) * d; };
        auto dot = [&](int a, int b) {
            const T* ra = row(a);
            const T* rb = row(b);
            T acc = T(0);
            for (int i = 0; i < d; ++i) acc += ra[i] * rb[i];
            return acc;
        };
        T f = self.grad.data[0] / static_cast<T>(tcopy.size());
        for (const auto& t : tcopy) {
            if (t.negatives.empty()) continue;
            T sp = dot(t.anchor, t.positive) / tau;
            T mx = sp;
            std::vector<T> sn(t.negatives.size());
            for (size_t j = 0; j < t.negatives.size(); ++j) {
                sn[j] = dot(t.anchor, t.negatives[j]) / tau;
                mx = std::max(mx, sn[j]);
            }
            T sum = std::exp(sp - mx);
            for (T v : sn) sum += std::exp(v - mx);
            T qp = std::exp(sp - mx) / sum;
            T fp = f / tau;
            const T* ea = row(t.anchor);
            const T* ep = row(t.positive);
            T* ga = growp(t.anchor);
            T* gp = growp(t.positive);
            for (int i = 0; i < d; ++i) {
                ga[i] += fp * (qp - T(1)) * ep[i];
                gp[i] += fp * (qp - T(1)) * ea[i];
            }
            for (size_t j = 0; j < t.negatives.size(); ++j) {
                T qj = std::exp(sn[j] - mx) / sum;
                const T* en = row(t.negatives[j]);
                T* gn = growp(t.negatives[j]);
                for (int i = 0; i < d; ++i) {
                    ga[i] += fp * qj * en[i];
                    gn[i] += fp * qj * ea[i];
                }
            }
        }
    });
}

}  // namespace phenocd::nn
