// Assembly of the constraint losses on top of the autodiff graph: region
// prototypes, the three-term contrastive loss over selected samples, the
// phenology-aware variant with centroid negatives, and the two dense pixel
// losses (change BCE, semantic cross-entropy).
#pragma once

#include <map>
#include <set>
#include <tuple>
#include <vector>

#include "phenocd/autodiff.hpp"
#include "phenocd/clustering.hpp"
#include "phenocd/loss_ops.hpp"
#include "phenocd/sampling.hpp"

namespace phenocd::con {

using nn::NodePtr;
using nn::PixelRef;
using nn::Tensor;

template <class T>
Tensor<double> to_double(const Tensor<T>& x) {
    Tensor<double> out(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) out.data[i] = static_cast<double>(x.data[i]);
    return out;
}

// Predicted probability of the ground-truth class at each pixel of sample n.
template <class T>
Tensor<double> true_class_prob(const Tensor<T>& logits, const Tensor<int>& gt, int n) {
    if (logits.rank() != 4) throw ShapeError("true_class_prob: logits must be [n,k,h,w]");
    int k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    Tensor<double> out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int cls = gt.data[y * w + x];
            if (cls < 0 || cls >= k)
                throw ConfigError("true_class_prob: class id " + std::to_string(cls) +
                                  " out of range for " + std::to_string(k) + " classes");
            double mx = -1e300;
            for (int c = 0; c < k; ++c)
                mx = std::max(mx, static_cast<double>(logits.at4(n, c, y, x)));
            double denom = 0.0;
            for (int c = 0; c < k; ++c)
                denom += std::exp(static_cast<double>(logits.at4(n, c, y, x)) - mx);
            out.data[y * w + x] =
                std::exp(static_cast<double>(logits.at4(n, cls, y, x)) - mx) / denom;
        }
    return out;
}

// One sample's [h,w] slice of a [n,1,h,w] probability map.
template <class T>
Tensor<double> prob_slice(const Tensor<T>& prob, int n) {
    if (prob.rank() != 4 || prob.dim(1) != 1) throw ShapeError("prob_slice: expected [n,1,h,w]");
    int h = prob.dim(2), w = prob.dim(3);
    Tensor<double> out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            out.data[y * w + x] = static_cast<double>(prob.at4(n, 0, y, x));
    return out;
}

// ---------------------------------------------------------------------------
// dense pixel losses

// Mean binary cross-entropy between the change-probability map and the 0/1
// ground truth maps.
template <class T>
NodePtr<T> change_loss(const NodePtr<T>& change_prob,
                       const std::vector<const Tensor<int>*>& change) {
    const Tensor<T>& p = change_prob->value;
    if (p.rank() != 4 || p.dim(1) != 1) throw ShapeError("change_loss: expected [n,1,h,w]");
    if (static_cast<size_t>(p.dim(0)) != change.size())
        throw ShapeError("change_loss: batch size mismatch");
    Tensor<T> target(p.shape);
    int h = p.dim(2), w = p.dim(3);
    for (int n = 0; n < p.dim(0); ++n)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                target.at4(n, 0, y, x) = static_cast<T>(change[n]->data[y * w + x]);
    return nn::bce_probs(change_prob, target);
}

// Mean softmax cross-entropy over both temporal semantic maps.
template <class T>
NodePtr<T> semantic_loss(const NodePtr<T>& logits_t1, const NodePtr<T>& logits_t2,
                         const std::vector<const Tensor<int>*>& sem_t1,
                         const std::vector<const Tensor<int>*>& sem_t2) {
    auto pack = [](const NodePtr<T>& logits, const std::vector<const Tensor<int>*>& sem) {
        const Tensor<T>& v = logits->value;
        if (v.rank() != 4) throw ShapeError("semantic_loss: expected [n,k,h,w]");
        if (static_cast<size_t>(v.dim(0)) != sem.size())
            throw ShapeError("semantic_loss: batch size mismatch");
        Tensor<int> target({v.dim(0), v.dim(2), v.dim(3)});
        int h = v.dim(2), w = v.dim(3);
        for (int n = 0; n < v.dim(0); ++n)
            for (int i = 0; i < h * w; ++i)
                target.data[static_cast<size_t>(n) * h * w + i] = sem[n]->data[i];
        return target;
    };
    auto ce1 = nn::softmax_cross_entropy(logits_t1, pack(logits_t1, sem_t1));
    auto ce2 = nn::softmax_cross_entropy(logits_t2, pack(logits_t2, sem_t2));
    return nn::wsum<T>({{static_cast<T>(0.5), ce1}, {static_cast<T>(0.5), ce2}});
}

// ---------------------------------------------------------------------------
// region prototypes

struct ProtoKey {
    int n = 0, t = 0, cls = 0;
    bool operator<(const ProtoKey& o) const {
        return std::tie(n, t, cls) < std::tie(o.n, o.t, o.cls);
    }
};

template <class T>
struct ProtoSet {
    std::vector<ProtoKey> keys;  // row order
    NodePtr<T> rows;             // [G, D] unit rows; null when no prototype formed
    std::map<ProtoKey, int> index;
    std::vector<int> member_counts;

    int find(int n, int t, int cls) const {
        auto it = index.find(ProtoKey{n, t, cls});
        return it == index.end() ? -1 : it->second;
    }
};

// One prototype per (sample, temporal, class): the renormalized mean of the
// class's pure-cell embeddings, formed only when enough cells exist.
template <class T>
ProtoSet<T> region_prototypes(const NodePtr<T>& emb_t1, const NodePtr<T>& emb_t2,
                              const std::vector<const Tensor<int>*>& sem_t1,
                              const std::vector<const Tensor<int>*>& sem_t2,
                              int min_region_pixels) {
    ProtoSet<T> out;
    std::vector<PixelRef> refs[2];
    std::vector<std::vector<int>> groups;
    int row = 0;
    int batch = emb_t1->value.dim(0);
    // row space is [t1 member cells | t2 member cells]; when the t2 scan
    // starts, the t1 block size is final, so global indices are one-pass
    for (int t = 0; t < 2; ++t) {
        int base = t == 0 ? 0 : static_cast<int>(refs[0].size());
        const auto& sems = t == 0 ? sem_t1 : sem_t2;
        for (int n = 0; n < batch; ++n) {
            auto cells = sel::pure_cells_by_class(*sems[n]);
            for (const auto& [cls, members] : cells) {
                if (static_cast<int>(members.size()) < min_region_pixels) continue;
                std::vector<int> group;
                for (const auto& [fy, fx] : members) {
                    group.push_back(base + static_cast<int>(refs[t].size()));
                    refs[t].push_back(PixelRef{n, fy, fx});
                }
                groups.push_back(std::move(group));
                ProtoKey key{n, t, cls};
                out.index[key] = row++;
                out.keys.push_back(key);
                out.member_counts.push_back(static_cast<int>(members.size()));
            }
        }
    }
    if (groups.empty()) return out;
    std::vector<NodePtr<T>> parts;
    if (!refs[0].empty()) parts.push_back(nn::gather_pixels(emb_t1, refs[0]));
    if (!refs[1].empty()) parts.push_back(nn::gather_pixels(emb_t2, refs[1]));
    auto members_matrix = parts.size() == 1 ? parts[0] : nn::vconcat_rows(parts);
    out.rows = nn::l2_normalize_rows(nn::segment_mean_rows(members_matrix, groups));
    return out;
}

// ---------------------------------------------------------------------------
// row space shared by the contrastive terms

namespace detail {

// Maps selected cells, prototypes, and centroid constants into one [R, D]
// matrix so every contrastive term indexes a single row space.
template <class T>
class RowSpace {
  public:
    RowSpace(NodePtr<T> e1, NodePtr<T> e2, NodePtr<T> ef, const ProtoSet<T>* protos,
             const cluster::CentroidBank* bank)
        : emb_{std::move(e1), std::move(e2), std::move(ef)}, protos_(protos), bank_(bank) {}

    void note_cell(const sel::CellKey& key) { cells_[static_cast<int>(key.field)].insert(key); }
    void note_centroid(int cls, int k) { centroids_.insert({cls, k}); }

    void finalize() {
        int row = 0;
        std::vector<NodePtr<T>> parts;
        for (int f = 0; f < 3; ++f) {
            if (cells_[f].empty()) continue;
            if (!emb_[f]) throw ShapeError("row space: selection references a missing field");
            std::vector<PixelRef> refs;
            for (const auto& key : cells_[f]) {
                cell_row_[key] = row++;
                refs.push_back(PixelRef{key.n, key.fy, key.fx});
            }
            parts.push_back(nn::gather_pixels(emb_[f], refs));
        }
        proto_offset_ = row;
        if (protos_ && protos_->rows) {
            row += protos_->rows->value.dim(0);
            parts.push_back(protos_->rows);
        }
        if (!centroids_.empty()) {
            if (!bank_) throw ConfigError("row space: centroid rows need a bank");
            int dim = parts.empty() ? 0 : parts[0]->value.dim(1);
            Tensor<T> ctab({static_cast<int>(centroids_.size()), dim});
            int i = 0;
            for (const auto& [cls, k] : centroids_) {
                const auto* cc = bank_->find(cls);
                if (!cc || k >= cc->k()) throw ConfigError("row space: unknown centroid");
                for (int d = 0; d < dim; ++d)
                    ctab.data[static_cast<size_t>(i) * dim + d] =
                        static_cast<T>(cc->centroids[k][d]);
                centroid_row_[{cls, k}] = row + i;
                ++i;
            }
            parts.push_back(nn::make_const(std::move(ctab)));
        }
        matrix_ = parts.size() == 1 ? parts[0] : nn::vconcat_rows(parts);
    }

    int cell_row(const sel::CellKey& key) const { return cell_row_.at(key); }
    int proto_row(int n, int t, int cls) const {
        int r = protos_ ? protos_->find(n, t, cls) : -1;
        return r < 0 ? -1 : proto_offset_ + r;
    }
    // other-class prototype rows for sample n, both temporals
    std::vector<int> proto_negative_rows(int n, int cls) const {
        std::vector<int> rows;
        if (!protos_) return rows;
        for (size_t i = 0; i < protos_->keys.size(); ++i) {
            const auto& k = protos_->keys[i];
            if (k.n == n && k.cls != cls) rows.push_back(proto_offset_ + static_cast<int>(i));
        }
        return rows;
    }
    int centroid_row(int cls, int k) const { return centroid_row_.at({cls, k}); }
    const NodePtr<T>& matrix() const { return matrix_; }

  private:
    NodePtr<T> emb_[3];
    const ProtoSet<T>* protos_ = nullptr;
    const cluster::CentroidBank* bank_ = nullptr;
    std::set<sel::CellKey> cells_[3];
    std::set<std::pair<int, int>> centroids_;
    std::map<sel::CellKey, int> cell_row_;
    std::map<std::pair<int, int>, int> centroid_row_;
    int proto_offset_ = 0;
    NodePtr<T> matrix_;
};

template <class T>
NodePtr<T> mean_over(const std::vector<NodePtr<T>>& terms) {
    if (terms.empty()) return nullptr;
    std::vector<std::pair<T, NodePtr<T>>> ws;
    T coeff = static_cast<T>(1.0 / static_cast<double>(terms.size()));
    for (const auto& t : terms) ws.push_back({coeff, t});
    return nn::wsum(ws);
}

inline bool is_seg(sel::Task t) { return t == sel::Task::seg_t1 || t == sel::Task::seg_t2; }
inline int seg_temporal(sel::Task t) { return t == sel::Task::seg_t1 ? 0 : 1; }

}  // namespace detail

// ---------------------------------------------------------------------------
// contrastive losses

template <class T>
struct ClemResult {
    NodePtr<T> loss;               // null when every task came back empty
    NodePtr<T> l_pp, l_rr, l_pr;   // split-variant terms (null when unused)
    int pp_triples = 0, rr_triples = 0, pr_triples = 0;
    int nonempty_tasks = 0;
};

// Three-term contrastive loss over the selected batches ("split" variant) or
// the pooled single-softmax form ("union" variant). Prototype terms apply to
// the segmentation tasks; change-status tasks contribute pixel terms only.
// In the union variant a bank, when provided, adds other-class centroid rows
// to each segmentation anchor's negative set.
template <class T>
ClemResult<T> clem_loss(const NodePtr<T>& emb_t1, const NodePtr<T>& emb_t2,
                        const NodePtr<T>& emb_fused, const ProtoSet<T>& protos,
                        const std::vector<sel::TaskSelection>& selections,
                        const sel::SelectConfig& cfg, const sel::LossWeights& w,
                        const cluster::CentroidBank* union_bank = nullptr) {
    ClemResult<T> out;
    bool split = cfg.clem_variant == "split";

    detail::RowSpace<T> rows(emb_t1, emb_t2, emb_fused, &protos,
                             split ? nullptr : union_bank);
    for (const auto& ts : selections)
        for (const auto& tr : ts.triples) {
            rows.note_cell(tr.anchor);
            rows.note_cell(tr.positive);
            for (const auto& k : tr.negatives) rows.note_cell(k);
        }
    if (!split && union_bank)
        for (const auto& ts : selections)
            if (detail::is_seg(ts.task))
                for (const auto& tr : ts.triples)
                    for (const auto& cc : union_bank->classes)
                        if (cc.class_id != tr.category)
                            for (int k = 0; k < cc.k(); ++k) rows.note_centroid(cc.class_id, k);
    bool any = false;
    for (const auto& ts : selections) any = any || !ts.triples.empty();
    if (!any) return out;
    rows.finalize();

    std::vector<NodePtr<T>> pp_tasks, rr_tasks, pr_tasks, mix_tasks;
    for (const auto& ts : selections) {
        if (ts.triples.empty()) continue;
        ++out.nonempty_tasks;
        std::vector<nn::InfoNceTriple> pp, rr, pr, mix;
        for (const auto& tr : ts.triples) {
            nn::InfoNceTriple p;
            p.anchor = rows.cell_row(tr.anchor);
            p.positive = rows.cell_row(tr.positive);
            for (const auto& k : tr.negatives) p.negatives.push_back(rows.cell_row(k));
            pp.push_back(p);

            if (split && detail::is_seg(ts.task)) {
                int t = detail::seg_temporal(ts.task);
                auto proto_negs = rows.proto_negative_rows(tr.anchor.n, tr.category);
                int own = rows.proto_row(tr.anchor.n, t, tr.category);
                int other = rows.proto_row(tr.anchor.n, 1 - t, tr.category);
                if (own >= 0 && other >= 0)
                    rr.push_back(nn::InfoNceTriple{own, other, proto_negs});
                if (own >= 0)
                    pr.push_back(nn::InfoNceTriple{p.anchor, own, proto_negs});
            }
            if (!split) {
                nn::InfoNceTriple m = p;
                if (detail::is_seg(ts.task)) {
                    for (int r : rows.proto_negative_rows(tr.anchor.n, tr.category))
                        m.negatives.push_back(r);
                    if (union_bank)
                        for (const auto& cc : union_bank->classes)
                            if (cc.class_id != tr.category)
                                for (int k = 0; k < cc.k(); ++k)
                                    m.negatives.push_back(rows.centroid_row(cc.class_id, k));
                }
                mix.push_back(std::move(m));
            }
        }
        T tau = static_cast<T>(cfg.tau);
        out.pp_triples += static_cast<int>(pp.size());
        out.rr_triples += static_cast<int>(rr.size());
        out.pr_triples += static_cast<int>(pr.size());
        if (split) {
            pp_tasks.push_back(nn::infonce_mean(rows.matrix(), pp, tau));
            if (!rr.empty()) rr_tasks.push_back(nn::infonce_mean(rows.matrix(), rr, tau));
            if (!pr.empty()) pr_tasks.push_back(nn::infonce_mean(rows.matrix(), pr, tau));
        } else {
            mix_tasks.push_back(nn::infonce_mean(rows.matrix(), mix, tau));
        }
    }

    if (!split) {
        out.loss = detail::mean_over(mix_tasks);
        return out;
    }
    out.l_pp = detail::mean_over(pp_tasks);
    out.l_rr = detail::mean_over(rr_tasks);
    out.l_pr = detail::mean_over(pr_tasks);
    std::vector<std::pair<T, NodePtr<T>>> terms;
    if (out.l_pp && w.lambda_pp != 0.0) terms.push_back({static_cast<T>(w.lambda_pp), out.l_pp});
    if (out.l_rr && w.lambda_rr != 0.0) terms.push_back({static_cast<T>(w.lambda_rr), out.l_rr});
    if (out.l_pr && w.lambda_pr != 0.0) terms.push_back({static_cast<T>(w.lambda_pr), out.l_pr});
    if (!terms.empty()) out.loss = nn::wsum(terms);
    return out;
}

template <class T>
struct PlmResult {
    NodePtr<T> loss;  // null when every task came back empty
    int triples = 0;
    int nonempty_tasks = 0;
};

// Phenology-aware contrastive loss: one softmax per anchor whose positives
// share class and centroid, with the selection-provided negative set (other
// classes, same-class/other-centroid cells, optional centroid vectors).
template <class T>
PlmResult<T> plm_loss(const NodePtr<T>& emb_t1, const NodePtr<T>& emb_t2,
                      const NodePtr<T>& emb_fused,
                      const std::vector<sel::TaskSelection>& selections,
                      const sel::SelectConfig& cfg, const cluster::CentroidBank& bank) {
    PlmResult<T> out;
    detail::RowSpace<T> rows(emb_t1, emb_t2, emb_fused, nullptr, &bank);
    bool any = false;
    for (const auto& ts : selections)
        for (const auto& tr : ts.triples) {
            any = true;
            rows.note_cell(tr.anchor);
            rows.note_cell(tr.positive);
            for (const auto& k : tr.negatives) rows.note_cell(k);
            for (const auto& [cls, k] : tr.centroid_negatives) rows.note_centroid(cls, k);
        }
    if (!any) return out;
    rows.finalize();

    std::vector<NodePtr<T>> task_losses;
    for (const auto& ts : selections) {
        if (ts.triples.empty()) continue;
        ++out.nonempty_tasks;
        std::vector<nn::InfoNceTriple> triples;
        for (const auto& tr : ts.triples) {
            nn::InfoNceTriple p;
            p.anchor = rows.cell_row(tr.anchor);
            p.positive = rows.cell_row(tr.positive);
            for (const auto& k : tr.negatives) p.negatives.push_back(rows.cell_row(k));
            for (const auto& [cls, k] : tr.centroid_negatives)
                p.negatives.push_back(rows.centroid_row(cls, k));
            triples.push_back(std::move(p));
        }
        out.triples += static_cast<int>(triples.size());
        task_losses.push_back(
            nn::infonce_mean(rows.matrix(), triples, static_cast<T>(cfg.tau)));
    }
    out.loss = detail::mean_over(task_losses);
    return out;
}

}  // namespace phenocd::con
