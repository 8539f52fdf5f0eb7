#include "phenocd/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <tuple>

#include "phenocd/contrastive.hpp"
#include "phenocd/detector.hpp"
#include "phenocd/gradcheck.hpp"

namespace phenocd::verify {

namespace {

double vdot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

std::vector<double> vnormalize(std::vector<double> v) {
    double n = std::sqrt(std::max(vdot(v, v), 1e-24));
    for (double& x : v) x /= n;
    return v;
}

double now_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

}  // namespace

// ---------------------------------------------------------------------------
// loss oracles

double oracle_infonce(const std::vector<double>& anchor, const std::vector<double>& positive,
                      const std::vector<std::vector<double>>& negatives, double tau) {
    if (!(tau > 0.0)) throw ConfigError("oracle_infonce: tau must be > 0");
    if (negatives.empty()) return 0.0;
    double sp = vdot(anchor, positive) / tau;
    double hi = sp;
    std::vector<double> sims;
    sims.reserve(negatives.size());
    for (const auto& n : negatives) {
        sims.push_back(vdot(anchor, n) / tau);
        hi = std::max(hi, sims.back());
    }
    double denom = std::exp(sp - hi);
    for (double s : sims) denom += std::exp(s - hi);
    return std::log(denom) - (sp - hi);
}

double oracle_bce(const std::vector<double>& probs, const std::vector<int>& targets) {
    if (probs.size() != targets.size() || probs.empty())
        throw ConfigError("oracle_bce: size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        double p = std::min(std::max(probs[i], 1e-7), 1.0 - 1e-7);
        acc += targets[i] ? -std::log(p) : -std::log(1.0 - p);
    }
    return acc / static_cast<double>(probs.size());
}

double oracle_ce(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets) {
    if (logits.size() != targets.size() || logits.empty())
        throw ConfigError("oracle_ce: size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        double hi = *std::max_element(logits[i].begin(), logits[i].end());
        double denom = 0.0;
        for (double l : logits[i]) denom += std::exp(l - hi);
        acc += std::log(denom) + hi - logits[i][targets[i]];
    }
    return acc / static_cast<double>(logits.size());
}

namespace {

// naive cell-vector lookup into an [N,D,fh,fw] grid
std::vector<double> cell_vec(const Tensor<double>& grid, int n, int fy, int fx) {
    int d = grid.dim(1), fh = grid.dim(2), fw = grid.dim(3);
    std::vector<double> v(d);
    for (int i = 0; i < d; ++i)
        v[i] = grid.data[((static_cast<size_t>(n) * d + i) * fh + fy) * fw + fx];
    return v;
}

const Tensor<double>& pick_field(const OracleFields& fields, sel::Field f, bool& present) {
    switch (f) {
        case sel::Field::t1: present = fields.has_t1; return fields.t1;
        case sel::Field::t2: present = fields.has_t2; return fields.t2;
        default: present = fields.has_fused; return fields.fused;
    }
}

std::vector<double> key_vec(const OracleFields& fields, const sel::CellKey& k) {
    bool present = false;
    const Tensor<double>& grid = pick_field(fields, k.field, present);
    if (!present) throw ConfigError("oracle: selection references an absent field");
    return cell_vec(grid, k.n, k.fy, k.fx);
}

// independent purity scan (own loop, no shared helper): prototypes per
// (sample, temporal, class) as renormalized means over pure 4x4 cells
std::map<std::tuple<int, int, int>, std::vector<double>> naive_prototypes(
    const OracleFields& fields, const std::vector<const Tensor<int>*>& sem_t1,
    const std::vector<const Tensor<int>*>& sem_t2, int min_region_pixels) {
    std::map<std::tuple<int, int, int>, std::vector<double>> protos;
    for (int t = 0; t < 2; ++t) {
        bool present = false;
        const Tensor<double>& grid =
            pick_field(fields, t == 0 ? sel::Field::t1 : sel::Field::t2, present);
        if (!present) continue;
        const auto& sems = t == 0 ? sem_t1 : sem_t2;
        int depth = grid.dim(1), fh = grid.dim(2), fw = grid.dim(3);
        for (int n = 0; n < grid.dim(0); ++n) {
            const Tensor<int>& sem = *sems[n];
            int w = sem.dim(1);
            std::map<int, std::pair<std::vector<double>, int>> acc;
            for (int fy = 0; fy < fh; ++fy)
                for (int fx = 0; fx < fw; ++fx) {
                    int v = sem.data[(fy * 4) * w + fx * 4];
                    bool pure = true;
                    for (int dy = 0; dy < 4 && pure; ++dy)
                        for (int dx = 0; dx < 4 && pure; ++dx)
                            if (sem.data[(fy * 4 + dy) * w + (fx * 4 + dx)] != v) pure = false;
                    if (!pure) continue;
                    auto& slot = acc[v];
                    if (slot.first.empty()) slot.first.assign(depth, 0.0);
                    auto cv = cell_vec(grid, n, fy, fx);
                    for (int i = 0; i < depth; ++i) slot.first[i] += cv[i];
                    ++slot.second;
                }
            for (auto& [cls, slot] : acc) {
                if (slot.second < min_region_pixels) continue;
                for (double& x : slot.first) x /= static_cast<double>(slot.second);
                protos[{n, t, cls}] = vnormalize(slot.first);
            }
        }
    }
    return protos;
}

double mean_or_zero(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double acc = 0.0;
    for (double x : xs) acc += x;
    return acc / static_cast<double>(xs.size());
}

}  // namespace

double oracle_clem(const OracleFields& fields, const std::vector<sel::TaskSelection>& sels,
                   const std::vector<const Tensor<int>*>& sem_t1,
                   const std::vector<const Tensor<int>*>& sem_t2, const sel::SelectConfig& cfg,
                   const sel::LossWeights& w, const cluster::CentroidBank* union_bank) {
    auto protos = naive_prototypes(fields, sem_t1, sem_t2, cfg.min_region_pixels);
    bool split = cfg.clem_variant == "split";

    auto proto_negs = [&](int n, int cls) {
        std::vector<std::vector<double>> out;
        for (const auto& [key, vec] : protos)
            if (std::get<0>(key) == n && std::get<2>(key) != cls) out.push_back(vec);
        return out;
    };

    std::vector<double> pp_tasks, rr_tasks, pr_tasks, mix_tasks;
    for (const auto& ts : sels) {
        if (ts.triples.empty()) continue;
        std::vector<double> pp, rr, pr, mix;
        bool seg = ts.task == sel::Task::seg_t1 || ts.task == sel::Task::seg_t2;
        int t = ts.task == sel::Task::seg_t1 ? 0 : 1;
        for (const auto& tr : ts.triples) {
            auto av = key_vec(fields, tr.anchor);
            auto pv = key_vec(fields, tr.positive);
            std::vector<std::vector<double>> negs;
            for (const auto& k : tr.negatives) negs.push_back(key_vec(fields, k));
            pp.push_back(oracle_infonce(av, pv, negs, cfg.tau));

            if (split && seg) {
                auto own_it = protos.find({tr.anchor.n, t, tr.category});
                auto other_it = protos.find({tr.anchor.n, 1 - t, tr.category});
                auto pn = proto_negs(tr.anchor.n, tr.category);
                if (own_it != protos.end() && other_it != protos.end())
                    rr.push_back(oracle_infonce(own_it->second, other_it->second, pn, cfg.tau));
                if (own_it != protos.end())
                    pr.push_back(oracle_infonce(av, own_it->second, pn, cfg.tau));
            }
            if (!split) {
                auto pooled = negs;
                if (seg) {
                    for (auto& v : proto_negs(tr.anchor.n, tr.category)) pooled.push_back(v);
                    if (union_bank)
                        for (const auto& cc : union_bank->classes)
                            if (cc.class_id != tr.category)
                                for (const auto& cvec : cc.centroids) pooled.push_back(cvec);
                }
                mix.push_back(oracle_infonce(av, pv, pooled, cfg.tau));
            }
        }
        pp_tasks.push_back(mean_or_zero(pp));
        if (!rr.empty()) rr_tasks.push_back(mean_or_zero(rr));
        if (!pr.empty()) pr_tasks.push_back(mean_or_zero(pr));
        if (!split) mix_tasks.push_back(mean_or_zero(mix));
    }
    if (!split) return mean_or_zero(mix_tasks);
    double total = 0.0;
    if (!pp_tasks.empty() && w.lambda_pp != 0.0) total += w.lambda_pp * mean_or_zero(pp_tasks);
    if (!rr_tasks.empty() && w.lambda_rr != 0.0) total += w.lambda_rr * mean_or_zero(rr_tasks);
    if (!pr_tasks.empty() && w.lambda_pr != 0.0) total += w.lambda_pr * mean_or_zero(pr_tasks);
    return total;
}

double oracle_plm(const OracleFields& fields, const std::vector<sel::TaskSelection>& sels,
                  const sel::SelectConfig& cfg, const cluster::CentroidBank& bank) {
    std::vector<double> task_means;
    for (const auto& ts : sels) {
        if (ts.triples.empty()) continue;
        std::vector<double> terms;
        for (const auto& tr : ts.triples) {
            auto av = key_vec(fields, tr.anchor);
            auto pv = key_vec(fields, tr.positive);
            std::vector<std::vector<double>> negs;
            for (const auto& k : tr.negatives) negs.push_back(key_vec(fields, k));
            for (const auto& [cls, k] : tr.centroid_negatives) {
                const auto* cc = bank.find(cls);
                if (!cc || k >= cc->k()) throw ConfigError("oracle_plm: unknown centroid");
                negs.push_back(cc->centroids[k]);
            }
            terms.push_back(oracle_infonce(av, pv, negs, cfg.tau));
        }
        task_means.push_back(mean_or_zero(terms));
    }
    return mean_or_zero(task_means);
}

// ---------------------------------------------------------------------------
// clustering oracle

OracleClusters oracle_kmeans(const std::vector<std::vector<double>>& points, int k) {
    int n = static_cast<int>(points.size());
    if (n == 0 || n > 12) throw ConfigError("oracle_kmeans: need 1..12 points");
    if (k < 1 || k > 3) throw ConfigError("oracle_kmeans: need 1..3 clusters");
    k = std::min(k, n);
    size_t d = points[0].size();

    OracleClusters best;
    best.inertia = 1e300;
    std::vector<int> assign(n, 0);
    int64_t total = 1;
    for (int i = 0; i < n; ++i) total *= k;
    for (int64_t code = 0; code < total; ++code) {
        int64_t c = code;
        for (int i = 0; i < n; ++i) {
            assign[i] = static_cast<int>(c % k);
            c /= k;
        }
        // the inertia-optimal unit centroid of a fixed cluster is its
        // renormalized mean, so scanning assignments suffices
        std::vector<std::vector<double>> centroids(k, std::vector<double>(d, 0.0));
        std::vector<int> counts(k, 0);
        for (int i = 0; i < n; ++i) {
            ++counts[assign[i]];
            for (size_t j = 0; j < d; ++j) centroids[assign[i]][j] += points[i][j];
        }
        for (int c2 = 0; c2 < k; ++c2)
            if (counts[c2] > 0) centroids[c2] = vnormalize(centroids[c2]);
        double inertia = 0.0;
        for (int i = 0; i < n; ++i) inertia += 1.0 - vdot(points[i], centroids[assign[i]]);
        if (inertia < best.inertia) {
            best.inertia = inertia;
            best.assignment = assign;
            best.centroids = centroids;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// metrics oracle and clustering agreement

metrics::MetricsReport oracle_metrics(const Tensor<int>& pred, const Tensor<int>& gt) {
    if (pred.shape != gt.shape) throw ShapeError("oracle_metrics: shape mismatch");
    int64_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        int p = pred.data[i], g = gt.data[i];
        if (p != 0 && p != 1) throw ConfigError("oracle_metrics: non-binary prediction");
        if (g != 0 && g != 1) throw ConfigError("oracle_metrics: non-binary ground truth");
        if (p == 1 && g == 1) ++tp;
        else if (p == 0 && g == 0) ++tn;
        else if (p == 1) ++fp;
        else ++fn;
    }
    metrics::MetricsReport r;
    r.confusion.tp = tp;
    r.confusion.tn = tn;
    r.confusion.fp = fp;
    r.confusion.fn = fn;
    auto ratio = [](double num, double den) { return den == 0.0 ? 0.0 : num / den; };
    r.precision = ratio(static_cast<double>(tp), static_cast<double>(tp + fp));
    r.recall = ratio(static_cast<double>(tp), static_cast<double>(tp + fn));
    r.f1 = ratio(2.0 * static_cast<double>(tp), static_cast<double>(2 * tp + fp + fn));
    r.iou = ratio(static_cast<double>(tp), static_cast<double>(tp + fp + fn));
    return r;
}

// ---------------------------------------------------------------------------
// gradient checks

namespace {

using nn::NodePtr;

Tensor<double> filled(std::vector<int> shape, Rng& rng, double lo, double hi) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

CheckResult run_gradcheck(const std::string& name, const nn::GraphBuilder& build,
                          const std::vector<Tensor<double>>& leaves) {
    CheckResult r;
    r.name = name;
    double t0 = now_seconds();
    auto rep = nn::finite_diff_check(build, leaves);
    r.seconds = now_seconds() - t0;
    r.max_error = rep.max_rel_err;
    r.ok = rep.ok(1e-4);
    return r;
}

}  // namespace

std::vector<CheckResult> gradcheck_all() {
    std::vector<CheckResult> out;
    Rng rng(0x9dac5);

    // attention fusion: value ranges keep the |f1-f2| path away from its kink
    {
        auto f1 = filled({2, 3, 4, 4}, rng, 0.3, 1.1);
        auto f2 = filled({2, 3, 4, 4}, rng, -0.9, -0.2);
        auto build = [](const std::vector<NodePtr<double>>& leaves) {
            nn::ParamRegistry<double> reg;
            Rng init(411);
            model::FusionBlock<double> fb(reg, init, 3, 2, "attention");
            return nn::mean_all(fb(leaves[0], leaves[1], true));
        };
        out.push_back(run_gradcheck("fusion_attention", build, {f1, f2}));
    }
    // pyramid block
    {
        auto f = filled({2, 4, 4, 4}, rng, 0.2, 1.0);
        auto build = [](const std::vector<NodePtr<double>>& leaves) {
            nn::ParamRegistry<double> reg;
            Rng init(412);
            model::PyramidBlock<double> pb(reg, init, 4, {1, 2});
            return nn::mean_all(pb(leaves[0], true));
        };
        out.push_back(run_gradcheck("pyramid_block", build, {f}));
    }
    // change head: conv stack -> upsample -> sigmoid
    {
        auto f = filled({1, 4, 4, 4}, rng, 0.2, 1.0);
        auto build = [](const std::vector<NodePtr<double>>& leaves) {
            nn::ParamRegistry<double> reg;
            Rng init(413);
            model::ConvHead<double> head(reg, init, "head", 4, 6, 1);
            return nn::mean_all(nn::sigmoid(nn::upsample_bilinear2d(head(leaves[0]), 8, 8)));
        };
        out.push_back(run_gradcheck("change_head", build, {f}));
    }
    // semantic head: conv stack -> upsample, probed with fixed weights
    {
        auto f = filled({1, 4, 4, 4}, rng, 0.2, 1.0);
        auto probe = filled({1, 3, 8, 8}, rng, -1.0, 1.0);
        auto build = [probe](const std::vector<NodePtr<double>>& leaves) {
            nn::ParamRegistry<double> reg;
            Rng init(414);
            model::ConvHead<double> head(reg, init, "sem", 4, 6, 3);
            auto up = nn::upsample_bilinear2d(head(leaves[0]), 8, 8);
            return nn::mean_all(nn::mul(up, nn::make_const(probe)));
        };
        out.push_back(run_gradcheck("semantic_head", build, {f}));
    }
    // projection + per-pixel normalization
    {
        auto f = filled({1, 4, 3, 3}, rng, 0.2, 1.0);
        auto probe = filled({1, 5, 3, 3}, rng, -1.0, 1.0);
        auto build = [probe](const std::vector<NodePtr<double>>& leaves) {
            nn::ParamRegistry<double> reg;
            Rng init(415);
            model::Projector<double> proj(reg, init, 4, 6, 5);
            auto emb = nn::l2_normalize_channels(proj(leaves[0]));
            return nn::mean_all(nn::mul(emb, nn::make_const(probe)));
        };
        out.push_back(run_gradcheck("projection", build, {f}));
    }
    // change-map BCE through a sigmoid (keeps probabilities off the clamp)
    {
        auto z = filled({1, 1, 4, 4}, rng, -1.5, 1.5);
        Tensor<double> target({1, 1, 4, 4});
        for (size_t i = 0; i < target.data.size(); ++i) target.data[i] = i % 3 == 0 ? 1.0 : 0.0;
        auto build = [target](const std::vector<NodePtr<double>>& leaves) {
            return nn::bce_probs(nn::sigmoid(leaves[0]), target);
        };
        out.push_back(run_gradcheck("loss_change_bce", build, {z}));
    }
    // semantic cross-entropy
    {
        auto logits = filled({6, 3}, rng, -1.0, 1.0);
        Tensor<int> target({6});
        for (int i = 0; i < 6; ++i) target.data[i] = i % 3;
        auto build = [target](const std::vector<NodePtr<double>>& leaves) {
            return nn::softmax_cross_entropy(leaves[0], target);
        };
        out.push_back(run_gradcheck("loss_semantic_ce", build, {logits}));
    }
    // three-term contrastive loss on a hand-built selection over two fields
    {
        auto e1 = filled({1, 4, 2, 2}, rng, -1.0, 1.0);
        auto e2 = filled({1, 4, 2, 2}, rng, -1.0, 1.0);
        // 8x8 semantic maps: left half class 0, right half class 1 -> every
        // stride-4 cell is pure and both classes form prototypes
        Tensor<int> sem({8, 8});
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) sem.data[y * 8 + x] = x < 4 ? 0 : 1;
        auto sels = std::make_shared<std::vector<sel::TaskSelection>>();
        {
            sel::TaskSelection ts;
            ts.task = sel::Task::seg_t1;
            sel::Triple tr;
            tr.anchor = {sel::Field::t1, 0, 0, 0};
            tr.positive = {sel::Field::t1, 0, 1, 0};
            tr.negatives = {{sel::Field::t1, 0, 0, 1}, {sel::Field::t1, 0, 1, 1}};
            tr.category = 0;
            ts.triples.push_back(tr);
            sels->push_back(ts);
            sel::TaskSelection ts2;
            ts2.task = sel::Task::seg_t2;
            sel::Triple tr2;
            tr2.anchor = {sel::Field::t2, 0, 0, 1};
            tr2.positive = {sel::Field::t2, 0, 1, 1};
            tr2.negatives = {{sel::Field::t2, 0, 0, 0}};
            tr2.category = 1;
            ts2.triples.push_back(tr2);
            sels->push_back(ts2);
        }
        auto sem_ptr = std::make_shared<Tensor<int>>(sem);
        sel::SelectConfig cfg;
        cfg.min_region_pixels = 1;
        sel::LossWeights w;
        auto build = [sels, sem_ptr, cfg, w](const std::vector<NodePtr<double>>& leaves) {
            auto n1 = nn::l2_normalize_channels(leaves[0]);
            auto n2 = nn::l2_normalize_channels(leaves[1]);
            std::vector<const Tensor<int>*> sems{sem_ptr.get()};
            auto protos = con::region_prototypes(n1, n2, sems, sems, cfg.min_region_pixels);
            auto res = con::clem_loss<double>(n1, n2, nullptr, protos, *sels, cfg, w);
            return res.loss;
        };
        out.push_back(run_gradcheck("loss_contrastive_mix", build, {e1, e2}));
    }
    // phenology loss with centroid negatives
    {
        auto e1 = filled({1, 4, 2, 2}, rng, -1.0, 1.0);
        cluster::CentroidBank bank;
        bank.seed = 7;
        for (int cls = 0; cls < 2; ++cls) {
            cluster::ClassCentroids cc;
            cc.class_id = cls;
            cc.centroids = {vnormalize({1.0, 0.2 * cls, -0.3, 0.4}),
                            vnormalize({-0.5, 1.0, 0.1 * cls, 0.2})};
            cc.counts = {3, 3};
            bank.classes.push_back(cc);
        }
        auto sels = std::make_shared<std::vector<sel::TaskSelection>>();
        {
            sel::TaskSelection ts;
            ts.task = sel::Task::seg_t1;
            ts.mode = sel::Mode::plm;
            sel::Triple tr;
            tr.anchor = {sel::Field::t1, 0, 0, 0};
            tr.positive = {sel::Field::t1, 0, 1, 0};
            tr.negatives = {{sel::Field::t1, 0, 0, 1}};
            tr.centroid_negatives = {{1, 0}, {1, 1}};
            tr.category = 0;
            ts.triples.push_back(tr);
            sels->push_back(ts);
        }
        sel::SelectConfig cfg;
        auto bank_ptr = std::make_shared<cluster::CentroidBank>(bank);
        auto build = [sels, cfg, bank_ptr](const std::vector<NodePtr<double>>& leaves) {
            auto n1 = nn::l2_normalize_channels(leaves[0]);
            auto res = con::plm_loss<double>(n1, nullptr, nullptr, *sels, cfg, *bank_ptr);
            return res.loss;
        };
        out.push_back(run_gradcheck("loss_phenology", build, {e1}));
    }
    return out;
}

// ---------------------------------------------------------------------------
// oracle equivalence checks

namespace {

// random blocky label map: every 4x4 patch uniform, so all cells are pure
Tensor<int> blocky_labels(int h, int w, int num_classes, Rng& rng) {
    Tensor<int> t({h, w});
    for (int by = 0; by < h / 4; ++by)
        for (int bx = 0; bx < w / 4; ++bx) {
            int v = rng.uniform_int(0, num_classes - 1);
            for (int dy = 0; dy < 4; ++dy)
                for (int dx = 0; dx < 4; ++dx) t.data[(by * 4 + dy) * w + (bx * 4 + dx)] = v;
        }
    return t;
}

Tensor<double> unit_field(int n, int d, int fh, int fw, Rng& rng) {
    Tensor<double> t({n, d, fh, fw});
    for (int i = 0; i < n; ++i)
        for (int fy = 0; fy < fh; ++fy)
            for (int fx = 0; fx < fw; ++fx) {
                double sq = 0.0;
                std::vector<double> v(d);
                for (int c = 0; c < d; ++c) {
                    v[c] = rng.normal(0.0, 1.0);
                    sq += v[c] * v[c];
                }
                double inv = 1.0 / std::sqrt(std::max(sq, 1e-24));
                for (int c = 0; c < d; ++c)
                    t.data[((static_cast<size_t>(i) * d + c) * fh + fy) * fw + fx] = v[c] * inv;
            }
    return t;
}

nn::NodePtr<double> const_node(const Tensor<double>& t) { return nn::make_const(t); }

struct RandomBatch {
    Tensor<double> e1, e2, ef;
    Tensor<int> sem1, sem2, change;
    std::vector<sel::TaskSelection> clem_sels, plm_sels;
    cluster::CentroidBank bank;
};

RandomBatch random_batch(uint64_t seed, bool plm, const sel::SelectConfig& cfg) {
    Rng rng(seed);
    int d = 6, fh = 4, fw = 4;
    int classes = rng.uniform_int(2, 8);
    RandomBatch b{unit_field(1, d, fh, fw, rng),
                  unit_field(1, d, fh, fw, rng),
                  unit_field(1, d, fh, fw, rng),
                  blocky_labels(16, 16, classes, rng),
                  blocky_labels(16, 16, classes, rng),
                  Tensor<int>({16, 16}),
                  {},
                  {},
                  {}};
    for (int i = 0; i < 256; ++i) b.change.data[i] = b.sem1.data[i] != b.sem2.data[i] ? 1 : 0;

    sel::BatchView view;
    view.emb_t1 = &b.e1;
    view.emb_t2 = &b.e2;
    view.emb_fused = &b.ef;
    view.sem_t1 = {&b.sem1};
    view.sem_t2 = {&b.sem2};
    view.change = {&b.change};
    // no prediction maps: hardness falls back to rng order

    Rng sel_rng(seed ^ 0xabcdef);
    b.clem_sels = sel::select_all(view, sel::Mode::clem, cfg, nullptr, sel_rng);
    if (plm) {
        // small per-class bank clustered from the t1 field cells
        std::vector<int> ids;
        std::vector<std::vector<std::vector<double>>> samples;
        for (int cls = 0; cls < classes; ++cls) {
            std::vector<std::vector<double>> vs;
            for (const auto& [c2, cellsv] : sel::pure_cells_by_class(b.sem1))
                if (c2 == cls)
                    for (const auto& [fy, fx] : cellsv) vs.push_back(cell_vec(b.e1, 0, fy, fx));
            if (!vs.empty()) {
                ids.push_back(cls);
                samples.push_back(vs);
            }
        }
        b.bank = cluster::cluster_phenology(ids, samples, 2, seed ^ 0x77);
        Rng plm_rng(seed ^ 0xabcdef);
        b.plm_sels = sel::select_all(view, sel::Mode::plm, cfg, &b.bank, plm_rng);
    }
    return b;
}

CheckResult check_infonce_examples() {
    CheckResult r{"infonce_examples", true, 0.0, 0.0};
    double t0 = now_seconds();
    auto track = [&](double got, double want) {
        r.max_error = std::max(r.max_error, std::fabs(got - want));
    };
    std::vector<double> a{1, 0}, p{1, 0}, n0{0, 1}, nneg{-1, 0};
    // aligned positive, orthogonal negative
    track(oracle_infonce(a, p, {n0}, 1.0), std::log(1.0 + std::exp(-1.0)));
    // opposite negative
    track(oracle_infonce(a, p, {nneg}, 1.0), std::log(1.0 + std::exp(-2.0)));
    // symmetric: all sims equal, 3 negatives
    track(oracle_infonce(a, p, {p, p, p}, 1.0), std::log(4.0));
    // huge temperature flattens to ln(k+1)
    Rng rng(5);
    for (int k = 1; k <= 4; ++k) {
        std::vector<std::vector<double>> negs;
        for (int i = 0; i < k; ++i) negs.push_back(vnormalize({rng.normal(0, 1), rng.normal(0, 1)}));
        double got = oracle_infonce(vnormalize({rng.normal(0, 1), rng.normal(0, 1)}),
                                    vnormalize({rng.normal(0, 1), rng.normal(0, 1)}), negs, 1e6);
        if (std::fabs(got - std::log(k + 1.0)) > 1e-3) r.ok = false;
    }
    if (r.max_error > 1e-12) r.ok = false;
    r.seconds = now_seconds() - t0;
    return r;
}

CheckResult check_infonce_random() {
    CheckResult r{"infonce_vs_kernel_100", true, 0.0, 0.0};
    double t0 = now_seconds();
    Rng rng(0x1f0);
    for (int trial = 0; trial < 100; ++trial) {
        int d = rng.uniform_int(2, 8), n_neg = rng.uniform_int(1, 16);
        int rows = 2 + n_neg;
        Tensor<double> mat({rows, d});
        for (auto& v : mat.data) v = rng.normal(0.0, 1.0);
        for (int i = 0; i < rows; ++i) {
            double sq = 0.0;
            for (int j = 0; j < d; ++j) sq += mat.data[i * d + j] * mat.data[i * d + j];
            double inv = 1.0 / std::sqrt(std::max(sq, 1e-24));
            for (int j = 0; j < d; ++j) mat.data[i * d + j] *= inv;
        }
        double tau = rng.uniform(0.05, 2.0);
        nn::InfoNceTriple tr;
        tr.anchor = 0;
        tr.positive = 1;
        for (int i = 0; i < n_neg; ++i) tr.negatives.push_back(2 + i);
        double kernel = nn::infonce_mean(const_node(mat), {tr}, tau)->value.data[0];
        std::vector<double> av(d), pv(d);
        std::vector<std::vector<double>> negs;
        for (int j = 0; j < d; ++j) av[j] = mat.data[j], pv[j] = mat.data[d + j];
        for (int i = 0; i < n_neg; ++i) {
            std::vector<double> nv(d);
            for (int j = 0; j < d; ++j) nv[j] = mat.data[(2 + i) * d + j];
            negs.push_back(nv);
        }
        r.max_error = std::max(r.max_error, std::fabs(kernel - oracle_infonce(av, pv, negs, tau)));
    }
    r.ok = r.max_error <= 1e-6;
    r.seconds = now_seconds() - t0;
    return r;
}

CheckResult check_pixel_losses() {
    CheckResult r{"pixel_losses_vs_kernel", true, 0.0, 0.0};
    double t0 = now_seconds();
    auto track = [&](double got, double want) {
        r.max_error = std::max(r.max_error, std::fabs(got - want));
    };
    // frozen examples
    track(oracle_bce({0.9}, {1}), 0.105360515657826);
    track(oracle_ce({{0.0, 0.0, 0.0, 0.0}}, {0}), std::log(4.0));
    track(oracle_ce({{1.0, 0.0}}, {0}), std::log(1.0 + std::exp(-1.0)));
    if (r.max_error > 1e-12) r.ok = false;
    // random equivalence against the graph kernels
    Rng rng(0x2f1);
    for (int trial = 0; trial < 50; ++trial) {
        int m = rng.uniform_int(2, 24);
        Tensor<double> probs({m});
        Tensor<double> target({m});
        std::vector<double> pv(m);
        std::vector<int> tv(m);
        for (int i = 0; i < m; ++i) {
            pv[i] = rng.uniform(0.001, 0.999);
            tv[i] = rng.uniform_int(0, 1);
            probs.data[i] = pv[i];
            target.data[i] = tv[i];
        }
        double kernel = nn::bce_probs(const_node(probs), target)->value.data[0];
        double err = std::fabs(kernel - oracle_bce(pv, tv));
        r.max_error = std::max(r.max_error, err);

        int k = rng.uniform_int(2, 6);
        Tensor<double> logits({m, k});
        Tensor<int> cls({m});
        std::vector<std::vector<double>> lv(m, std::vector<double>(k));
        std::vector<int> cv(m);
        for (int i = 0; i < m; ++i) {
            cv[i] = rng.uniform_int(0, k - 1);
            cls.data[i] = cv[i];
            for (int j = 0; j < k; ++j) {
                lv[i][j] = rng.normal(0.0, 2.0);
                logits.data[i * k + j] = lv[i][j];
            }
        }
        double kernel_ce = nn::softmax_cross_entropy(const_node(logits), cls)->value.data[0];
        r.max_error = std::max(r.max_error, std::fabs(kernel_ce - oracle_ce(lv, cv)));
    }
    if (r.max_error > 1e-6) r.ok = false;
    r.seconds = now_seconds() - t0;
    return r;
}

CheckResult check_contrastive_oracle() {
    CheckResult r{"contrastive_vs_oracle_100", true, 0.0, 0.0};
    double t0 = now_seconds();
    sel::SelectConfig cfg;
    cfg.anchors_per_class = 2;
    cfg.positive_candidates = 4;
    cfg.negatives = 6;
    cfg.min_region_pixels = 2;
    sel::LossWeights w;
    w.lambda_pp = 1.0;
    w.lambda_rr = 0.7;
    w.lambda_pr = 1.3;
    for (int trial = 0; trial < 100; ++trial) {
        auto b = random_batch(1000 + trial, false, cfg);
        OracleFields fields;
        fields.t1 = b.e1;
        fields.t2 = b.e2;
        fields.fused = b.ef;
        fields.has_t1 = fields.has_t2 = fields.has_fused = true;
        std::vector<const Tensor<int>*> s1{&b.sem1}, s2{&b.sem2};

        auto n1 = const_node(b.e1), n2 = const_node(b.e2), nf = const_node(b.ef);
        auto protos = con::region_prototypes(n1, n2, s1, s2, cfg.min_region_pixels);
        auto got = con::clem_loss<double>(n1, n2, nf, protos, b.clem_sels, cfg, w);
        double kernel = got.loss ? got.loss->value.data[0] : 0.0;
        double oracle = oracle_clem(fields, b.clem_sels, s1, s2, cfg, w);
        r.max_error = std::max(r.max_error, std::fabs(kernel - oracle));

        sel::SelectConfig ucfg = cfg;
        ucfg.clem_variant = "union";
        auto got_u = con::clem_loss<double>(n1, n2, nf, protos, b.clem_sels, ucfg, w);
        double kernel_u = got_u.loss ? got_u.loss->value.data[0] : 0.0;
        r.max_error =
            std::max(r.max_error, std::fabs(kernel_u - oracle_clem(fields, b.clem_sels, s1, s2,
                                                                   ucfg, w)));
    }
    r.ok = r.max_error <= 1e-6;
    r.seconds = now_seconds() - t0;
    return r;
}

CheckResult check_phenology_oracle() {
    CheckResult r{"phenology_vs_oracle_100", true, 0.0, 0.0};
    double t0 = now_seconds();
    sel::SelectConfig cfg;
    cfg.anchors_per_class = 2;
    cfg.positive_candidates = 4;
    cfg.negatives = 6;
    cfg.plm_centroid_negatives = true;
    for (int trial = 0; trial < 100; ++trial) {
        auto b = random_batch(5000 + trial, true, cfg);
        OracleFields fields;
        fields.t1 = b.e1;
        fields.t2 = b.e2;
        fields.fused = b.ef;
        fields.has_t1 = fields.has_t2 = fields.has_fused = true;
        auto n1 = const_node(b.e1), n2 = const_node(b.e2), nf = const_node(b.ef);
        auto got = con::plm_loss<double>(n1, n2, nf, b.plm_sels, cfg, b.bank);
        double kernel = got.loss ? got.loss->value.data[0] : 0.0;
        double oracle = oracle_plm(fields, b.plm_sels, cfg, b.bank);
        r.max_error = std::max(r.max_error, std::fabs(kernel - oracle));
    }
    r.ok = r.max_error <= 1e-6;
    r.seconds = now_seconds() - t0;
    return r;
}

CheckResult check_kmeans_oracle() {
    CheckResult r{"kmeans_vs_enumeration", true, 0.0, 0.0};
    double t0 = now_seconds();
    Rng rng(0x33);
    for (int trial = 0; trial < 12; ++trial) {
        int n = rng.uniform_int(4, 10), k = rng.uniform_int(1, 3), d = rng.uniform_int(2, 4);
        std::vector<std::vector<double>> pts;
        for (int i = 0; i < n; ++i) {
            std::vector<double> v(d);
            for (auto& x : v) x = rng.normal(0.0, 1.0);
            pts.push_back(vnormalize(v));
        }
        auto opt = oracle_kmeans(pts, k);
        auto bank = cluster::cluster_phenology({0}, {pts}, k, 1234 + trial);
        double got = bank.classes[0].inertia;
        double slack = std::max(0.05 * opt.inertia, 1e-9);
        if (got > opt.inertia + slack) r.ok = false;
        r.max_error = std::max(r.max_error, std::max(0.0, got - opt.inertia));
    }
    // two tight pairs split by K=2
    {
        std::vector<std::vector<double>> pts = {vnormalize({1.0, 0.02}), vnormalize({1.0, -0.02}),
                                                vnormalize({-0.02, 1.0}), vnormalize({0.02, 1.0})};
        auto opt = oracle_kmeans(pts, 2);
        if (opt.assignment[0] != opt.assignment[1] || opt.assignment[2] != opt.assignment[3] ||
            opt.assignment[0] == opt.assignment[2])
            r.ok = false;
        // K = n gives zero inertia
        auto singles = oracle_kmeans({pts[0], pts[2], pts[3]}, 3);
        if (singles.inertia > 1e-12) r.ok = false;
        // duplicates collapse to the duplicated point
        auto dup = oracle_kmeans({pts[0], pts[0], pts[2]}, 2);
        if (std::fabs(1.0 - vdot(dup.centroids[dup.assignment[0]], pts[0])) > 1e-12) r.ok = false;
    }
    r.seconds = now_seconds() - t0;
    return r;
}

CheckResult check_metrics_oracle() {
    CheckResult r{"metrics_vs_recount", true, 0.0, 0.0};
    double t0 = now_seconds();
    Rng rng(0x44);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<int> pred({64, 64}), gt({64, 64});
        for (int i = 0; i < 64 * 64; ++i) {
            pred.data[i] = rng.uniform_int(0, 1);
            gt.data[i] = rng.uniform_int(0, 1);
        }
        metrics::ConfusionMatrix cm;
        metrics::accumulate(cm, pred, gt);
        auto got = metrics::compute(cm);
        auto want = oracle_metrics(pred, gt);
        if (got.confusion.tp != want.confusion.tp || got.confusion.tn != want.confusion.tn ||
            got.confusion.fp != want.confusion.fp || got.confusion.fn != want.confusion.fn)
            r.ok = false;
        for (double diff : {got.precision - want.precision, got.recall - want.recall,
                            got.f1 - want.f1, got.iou - want.iou})
            r.max_error = std::max(r.max_error, std::fabs(diff));
    }
    if (r.max_error > 1e-12) r.ok = false;
    // worked example
    {
        metrics::ConfusionMatrix cm;
        cm.tp = 50;
        cm.fp = 10;
        cm.fn = 15;
        auto got = metrics::compute(cm);
        if (std::fabs(got.precision - 50.0 / 60.0) > 1e-12 ||
            std::fabs(got.recall - 50.0 / 65.0) > 1e-12 || std::fabs(got.f1 - 0.8) > 1e-12 ||
            std::fabs(got.iou - 50.0 / 75.0) > 1e-12)
            r.ok = false;
    }
    // forced counts
    {
        Tensor<int> ones({64, 64}), zeros({64, 64});
        for (int i = 0; i < 64 * 64; ++i) ones.data[i] = 1, zeros.data[i] = 0;
        auto rep = oracle_metrics(ones, zeros);
        if (rep.confusion.fp != 4096 || rep.confusion.tp != 0 || rep.confusion.tn != 0 ||
            rep.confusion.fn != 0)
            r.ok = false;
    }
    // F1 = 2*IoU/(1+IoU) on random matrices
    Rng rng2(0x45);
    for (int trial = 0; trial < 1000; ++trial) {
        metrics::ConfusionMatrix cm;
        cm.tp = rng2.uniform_int(0, 1000);
        cm.tn = rng2.uniform_int(0, 1000);
        cm.fp = rng2.uniform_int(0, 1000);
        cm.fn = rng2.uniform_int(0, 1000);
        auto rep = metrics::compute(cm);
        double err = std::fabs(rep.f1 - 2.0 * rep.iou / (1.0 + rep.iou));
        r.max_error = std::max(r.max_error, err);
        if (err > 1e-12) r.ok = false;
    }
    r.seconds = now_seconds() - t0;
    return r;
}

}  // namespace

std::vector<CheckResult> oracle_checks() {
    std::vector<CheckResult> out;
    out.push_back(check_infonce_examples());
    out.push_back(check_infonce_random());
    out.push_back(check_pixel_losses());
    out.push_back(check_contrastive_oracle());
    out.push_back(check_phenology_oracle());
    out.push_back(check_kmeans_oracle());
    out.push_back(check_metrics_oracle());
    return out;
}

bool run_selftest(std::ostream& out) {
    bool all_ok = true;
    auto emit = [&](const CheckResult& r) {
        char line[256];
        std::snprintf(line, sizeof(line),
                      "{\"name\":\"%s\",\"status\":\"%s\",\"max_error\":%.3e,\"seconds\":%.3f}",
                      r.name.c_str(), r.ok ? "pass" : "fail", r.max_error, r.seconds);
        out << line << "\n";
        all_ok = all_ok && r.ok;
    };
    for (const auto& r : oracle_checks()) emit(r);
    for (const auto& r : gradcheck_all()) emit(r);
    return all_ok;
}

}  // namespace phenocd::verify
