#include "phenocd/sampling.hpp"

#include <algorithm>
#include <cmath>

namespace phenocd::sel {

namespace {

struct Cell {
    int lin = 0;  // n*fh*fw + fy*fw + fx, stable tie-break key
    int n = 0, fy = 0, fx = 0;
    int cat = -1;
    int assign = -1;  // centroid assignment (plm mode)
    double score = 0.0;
    std::vector<double> emb;
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// value of the 4x4 patch if uniform, else -1 (labels are non-negative)
int pure_patch(const Tensor<int>& map, int fy, int fx) {
    int w = map.dim(1);
    int v = map.data[(fy * 4) * w + fx * 4];
    for (int dy = 0; dy < 4; ++dy)
        for (int dx = 0; dx < 4; ++dx)
            if (map.data[(fy * 4 + dy) * w + (fx * 4 + dx)] != v) return -1;
    return v;
}

const Tensor<double>* field_emb(const BatchView& view, Field f) {
    switch (f) {
        case Field::t1: return view.emb_t1;
        case Field::t2: return view.emb_t2;
        default: return view.emb_fused;
    }
}

}  // namespace

void BatchView::validate() const {
    auto check_field = [&](const Tensor<double>* emb, const char* name) {
        if (!emb) return;
        if (emb->rank() != 4) throw ShapeError(std::string(name) + ": embeddings must be rank 4");
        size_t n = static_cast<size_t>(emb->dim(0));
        if (sem_t1.size() != n || sem_t2.size() != n || change.size() != n)
            throw ShapeError(std::string(name) + ": label list size does not match batch size");
        for (size_t i = 0; i < n; ++i) {
            if (!sem_t1[i] || !sem_t2[i] || !change[i])
                throw ShapeError(std::string(name) + ": null label map in batch");
            if (sem_t1[i]->dim(0) != emb->dim(2) * 4 || sem_t1[i]->dim(1) != emb->dim(3) * 4)
                throw ShapeError(std::string(name) +
                                 ": label resolution must be 4x the embedding grid");
        }
    };
    check_field(emb_t1, "emb_t1");
    check_field(emb_t2, "emb_t2");
    check_field(emb_fused, "emb_fused");
}

std::map<int, std::vector<std::pair<int, int>>> pure_cells_by_class(const Tensor<int>& labels) {
    if (labels.rank() != 2) throw ShapeError("pure_cells_by_class: label map must be rank 2");
    if (labels.dim(0) % 4 != 0 || labels.dim(1) % 4 != 0)
        throw ShapeError("pure_cells_by_class: label map dims must be multiples of 4");
    std::map<int, std::vector<std::pair<int, int>>> out;
    int fh = labels.dim(0) / 4, fw = labels.dim(1) / 4;
    for (int fy = 0; fy < fh; ++fy)
        for (int fx = 0; fx < fw; ++fx) {
            int v = pure_patch(labels, fy, fx);
            if (v >= 0) out[v].push_back({fy, fx});
        }
    return out;
}

TaskSelection select_task(const BatchView& view, Task task, Mode mode, const SelectConfig& cfg,
                          const cluster::CentroidBank* bank, Rng& rng) {
    cfg.validate();
    view.validate();
    TaskSelection out;
    out.task = task;
    out.mode = mode;
    if (mode == Mode::plm && !bank)
        throw ConfigError("select: plm mode requires a centroid bank");

    Field field = task_field(task);
    const Tensor<double>* emb = field_emb(view, field);
    if (!emb) return out;  // field not produced this run: nothing to select
    int batch = emb->dim(0), depth = emb->dim(1), fh = emb->dim(2), fw = emb->dim(3);

    int want_changed = task == Task::cd_changed ? 1 : (task == Task::cd_unchanged ? 0 : -1);

    // ---- enumerate eligible cells in scan order --------------------------
    std::vector<Cell> cells;
    for (int n = 0; n < batch; ++n) {
        const Tensor<int>& cat_map = task == Task::seg_t1 ? *view.sem_t1[n] : *view.sem_t2[n];
        const Tensor<double>* prob = nullptr;
        if (task == Task::seg_t1)
            prob = n < static_cast<int>(view.true_prob_t1.size()) ? view.true_prob_t1[n] : nullptr;
        else if (task == Task::seg_t2)
            prob = n < static_cast<int>(view.true_prob_t2.size()) ? view.true_prob_t2[n] : nullptr;
        else
            prob = n < static_cast<int>(view.change_prob.size()) ? view.change_prob[n] : nullptr;

        for (int fy = 0; fy < fh; ++fy)
            for (int fx = 0; fx < fw; ++fx) {
                int cat = pure_patch(cat_map, fy, fx);
                if (cat < 0) continue;
                if (want_changed >= 0 && pure_patch(*view.change[n], fy, fx) != want_changed)
                    continue;
                Cell c;
                c.lin = (n * fh + fy) * fw + fx;
                c.n = n;
                c.fy = fy;
                c.fx = fx;
                c.cat = cat;
                if (prob) {
                    int py = fy * 4 + 2, px = fx * 4 + 2;
                    double p = prob->data[py * prob->dim(1) + px];
                    c.score = task == Task::cd_unchanged ? 1.0 - p : p;
                } else {
                    c.score = rng.uniform(0.0, 1.0);  // no prediction yet: random hardness
                }
                c.emb.resize(depth);
                for (int d = 0; d < depth; ++d)
                    c.emb[d] = emb->data[((static_cast<size_t>(n) * depth + d) * fh + fy) * fw + fx];
                if (mode == Mode::plm) c.assign = bank->assign(cat, c.emb.data(), depth);
                cells.push_back(std::move(c));
            }
    }
    out.eligible_cells = static_cast<int>(cells.size());

    std::map<int, std::vector<int>> by_cat;
    for (size_t i = 0; i < cells.size(); ++i) by_cat[cells[i].cat].push_back(static_cast<int>(i));

    auto key_of = [&](const Cell& c) { return CellKey{field, c.n, c.fy, c.fx}; };

    // ---- per class: anchors, positives, negatives ------------------------
    for (const auto& [cat, members] : by_cat) {
        if (static_cast<int>(members.size()) < 2) {
            ++out.skipped_classes;
            continue;
        }
        std::vector<int> others;  // scan order
        for (size_t i = 0; i < cells.size(); ++i)
            if (cells[i].cat != cat) others.push_back(static_cast<int>(i));

        // a class whose cells can never see a negative is skipped before any
        // rng is drawn, so the single-centroid case stays aligned with clem
        bool stage_negs_possible = false;
        if (mode == Mode::plm && !cfg.plm_strict_table1) {
            int first = cells[members[0]].assign;
            for (int idx : members)
                if (cells[idx].assign != first) stage_negs_possible = true;
        }
        if (others.empty() && !stage_negs_possible) {
            ++out.skipped_classes;
            continue;
        }

        std::vector<int> ordered = members;
        std::sort(ordered.begin(), ordered.end(), [&](int a, int b) {
            if (cells[a].score != cells[b].score) return cells[a].score < cells[b].score;
            return cells[a].lin < cells[b].lin;
        });
        int n_anchors = std::min<int>(cfg.anchors_per_class, static_cast<int>(ordered.size()));

        for (int ai = 0; ai < n_anchors; ++ai) {
            const Cell& anchor = cells[ordered[ai]];

            std::vector<int> pos_pool;  // scan order, anchor excluded
            for (int idx : members) {
                if (idx == ordered[ai]) continue;
                if (mode == Mode::plm && cells[idx].assign != anchor.assign) continue;
                pos_pool.push_back(idx);
            }
            if (pos_pool.empty()) {
                ++out.skipped_anchors;
                continue;
            }
            int best = -1;
            double best_sim = 0.0;
            for (int draw = 0; draw < cfg.positive_candidates; ++draw) {
                int idx = pos_pool[rng.uniform_int(0, static_cast<int>(pos_pool.size()) - 1)];
                double s = dot(anchor.emb, cells[idx].emb);
                if (best < 0 || s < best_sim) {
                    best = idx;
                    best_sim = s;
                }
            }

            std::vector<int> pool = others;
            if (mode == Mode::plm && !cfg.plm_strict_table1)
                for (int idx : members)
                    if (cells[idx].assign != anchor.assign) pool.push_back(idx);
            if (pool.empty()) {
                ++out.skipped_anchors;
                continue;
            }

            std::vector<int> chosen;
            if (static_cast<int>(pool.size()) <= cfg.negatives) {
                chosen = pool;
            } else {
                int n_hard = cfg.negatives / 2;
                int n_rand = cfg.negatives - n_hard;
                std::vector<int> order(pool.size());
                for (size_t i = 0; i < pool.size(); ++i) order[i] = static_cast<int>(i);
                std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                    return dot(anchor.emb, cells[pool[a]].emb) >
                           dot(anchor.emb, cells[pool[b]].emb);
                });
                std::vector<char> taken(pool.size(), 0);
                for (int i = 0; i < n_hard; ++i) {
                    chosen.push_back(pool[order[i]]);
                    taken[order[i]] = 1;
                }
                std::vector<int> rem;
                for (size_t i = 0; i < pool.size(); ++i)
                    if (!taken[i]) rem.push_back(pool[i]);
                for (int i = 0; i < n_rand; ++i) {
                    int j = rng.uniform_int(i, static_cast<int>(rem.size()) - 1);
                    std::swap(rem[i], rem[j]);
                    chosen.push_back(rem[i]);
                }
            }

            Triple t;
            t.anchor = key_of(anchor);
            t.positive = key_of(cells[best]);
            t.negatives.reserve(chosen.size());
            for (int idx : chosen) t.negatives.push_back(key_of(cells[idx]));
            if (mode == Mode::plm && cfg.plm_centroid_negatives)
                for (const auto& cc : bank->classes)
                    if (cc.class_id != cat)
                        for (int k = 0; k < cc.k(); ++k) t.centroid_negatives.push_back({cc.class_id, k});
            t.category = cat;
            out.triples.push_back(std::move(t));
        }
    }
    return out;
}

std::vector<TaskSelection> select_all(const BatchView& view, Mode mode, const SelectConfig& cfg,
                                      const cluster::CentroidBank* bank, Rng& rng) {
    std::vector<TaskSelection> out;
    const Task tasks[] = {Task::seg_t1, Task::seg_t2, Task::cd_changed, Task::cd_unchanged};
    for (int i = 0; i < 4; ++i) {
        Rng task_rng = rng.fork(0x5e1ec7u + static_cast<uint64_t>(i));
        out.push_back(select_task(view, tasks[i], mode, cfg, bank, task_rng));
    }
    return out;
}

}  // namespace phenocd::sel
