#include "phenocd/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "phenocd/checkpoint.hpp"
#include "phenocd/contrastive.hpp"
#include "phenocd/optimizer.hpp"
#include "phenocd/sampling.hpp"

namespace phenocd::train {

using nn::NodePtr;
using nn::Tensor;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// batching and batch assembly
// ---------------------------------------------------------------------------

std::vector<std::vector<std::string>> make_batches(std::vector<std::string> ids, int batch_size,
                                                   Rng& rng) {
    if (ids.empty()) throw ConfigError("training: empty split");
    if (ids.size() == 1)
        throw ConfigError("training: one sample cannot form a batch (batch statistics need >= 2)");
    rng.shuffle(ids);
    std::vector<std::vector<std::string>> out;
    size_t n = ids.size(), i = 0;
    while (i < n) {
        size_t take = std::min(static_cast<size_t>(batch_size), n - i);
        if (n - (i + take) == 1) {  // never leave a lone trailing sample
            if (take >= 3)
                take -= 1;
            else
                take += 1;
        }
        out.emplace_back(ids.begin() + static_cast<ptrdiff_t>(i),
                         ids.begin() + static_cast<ptrdiff_t>(i + take));
        i += take;
    }
    return out;
}

namespace {

struct Batch {
    NodePtr<float> img1, img2;  // [B,3,H,W] constant leaves
    std::vector<const Tensor<int>*> sem1, sem2, change;
    std::vector<const scene::SceneSample*> samples;
    std::vector<std::string> ids;
};

void check_geometry(const scene::SceneSample& s, const model::DetectorConfig& dc) {
    const auto& sh = s.image_t1.shape;
    if (sh.size() != 3 || sh[0] != 3 || sh[1] != dc.height || sh[2] != dc.width)
        throw IngestError("sample '" + s.sample_id + "' image is " + s.image_t1.shape_str() +
                          ", run expects [3," + std::to_string(dc.height) + "," +
                          std::to_string(dc.width) + "]");
}

Batch make_batch(const scene::Dataset& data, const std::vector<std::string>& ids,
                 const model::DetectorConfig& dc) {
    Batch b;
    b.ids = ids;
    int n = static_cast<int>(ids.size());
    Tensor<float> t1({n, 3, dc.height, dc.width}), t2({n, 3, dc.height, dc.width});
    int64_t stride = static_cast<int64_t>(3) * dc.height * dc.width;
    for (int i = 0; i < n; ++i) {
        const auto& s = data.get(ids[i]);
        check_geometry(s, dc);
        std::copy(s.image_t1.data.begin(), s.image_t1.data.end(), t1.data.begin() + i * stride);
        std::copy(s.image_t2.data.begin(), s.image_t2.data.end(), t2.data.begin() + i * stride);
        b.sem1.push_back(&s.sem_t1);
        b.sem2.push_back(&s.sem_t2);
        b.change.push_back(&s.change);
        b.samples.push_back(&s);
    }
    b.img1 = nn::make_const(std::move(t1));
    b.img2 = nn::make_const(std::move(t2));
    return b;
}

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
        if (!out.empty()) out += ",";
        out += id;
    }
    return out;
}

// ---------------------------------------------------------------------------
// one optimizer step
// ---------------------------------------------------------------------------

struct StepLosses {
    double cd = 0.0, sem = 0.0, clem = 0.0, plm = 0.0, total = 0.0;
    bool stepped = false;
};

double scalar(const NodePtr<float>& node) { return static_cast<double>(node->value.data[0]); }

StepLosses train_step(model::Detector<float>& net, nn::SgdMomentum<float>& opt,
                      const scene::Dataset& data, const std::vector<std::string>& ids,
                      const cfg::RunConfig& config, int stage,
                      const cluster::CentroidBank* bank, Rng& rng) {
    const auto& w = config.loss;
    const bool plm_active = stage == 3 && w.w_plm > 0.0 && bank != nullptr;

    Batch b = make_batch(data, ids, config.detector);
    auto fwd = net.forward(b.img1, b.img2, /*training=*/true);

    StepLosses out;
    std::vector<std::pair<float, NodePtr<float>>> terms;
    std::set<std::string> covered;  // parameter groups the loss graph reaches

    if (w.w_cd > 0.0) {
        auto loss = con::change_loss(fwd.change_prob, b.change);
        out.cd = scalar(loss);
        terms.push_back({static_cast<float>(w.w_cd), loss});
        covered.insert({"backbone.", "fusion.", "pyramid.", "change_head."});
    }
    if (w.w_sem > 0.0) {
        auto loss = con::semantic_loss(fwd.sem_logits_t1, fwd.sem_logits_t2, b.sem1, b.sem2);
        out.sem = scalar(loss);
        terms.push_back({static_cast<float>(w.w_sem), loss});
        covered.insert({"backbone.", "semantic_head."});
    }
    if (w.w_clem > 0.0 || plm_active) {
        auto emb_t1 = nn::l2_normalize_channels(net.project(fwd.feat_t1));
        auto emb_t2 = nn::l2_normalize_channels(net.project(fwd.feat_t2));
        auto emb_fused = nn::l2_normalize_channels(net.project(fwd.fused));
        Tensor<double> d1 = con::to_double(emb_t1->value);
        Tensor<double> d2 = con::to_double(emb_t2->value);
        Tensor<double> df = con::to_double(emb_fused->value);

        sel::BatchView view;
        view.emb_t1 = &d1;
        view.emb_t2 = &d2;
        view.emb_fused = &df;
        view.sem_t1 = b.sem1;
        view.sem_t2 = b.sem2;
        view.change = b.change;
        std::vector<Tensor<double>> prob_store;  // stable addresses for the view
        prob_store.reserve(3 * ids.size());
        int n = static_cast<int>(ids.size());
        for (int i = 0; i < n; ++i) {
            prob_store.push_back(con::prob_slice(fwd.change_prob->value, i));
            view.change_prob.push_back(&prob_store.back());
        }
        if (w.w_sem > 0.0) {  // hardness from a head that is actually training
            for (int i = 0; i < n; ++i) {
                prob_store.push_back(con::true_class_prob(fwd.sem_logits_t1->value, *b.sem1[i], i));
                view.true_prob_t1.push_back(&prob_store.back());
            }
            for (int i = 0; i < n; ++i) {
                prob_store.push_back(con::true_class_prob(fwd.sem_logits_t2->value, *b.sem2[i], i));
                view.true_prob_t2.push_back(&prob_store.back());
            }
        }

        if (w.w_clem > 0.0) {
            Rng clem_rng = rng.fork(0xc1e);
            auto sels = sel::select_all(view, sel::Mode::clem, config.select, nullptr, clem_rng);
            auto protos = con::region_prototypes(emb_t1, emb_t2, b.sem1, b.sem2,
                                                 config.select.min_region_pixels);
            auto clem = con::clem_loss(emb_t1, emb_t2, emb_fused, protos, sels, config.select,
                                       w, stage == 3 ? bank : nullptr);
            if (clem.loss) {
                out.clem = scalar(clem.loss);
                terms.push_back({static_cast<float>(w.w_clem), clem.loss});
                covered.insert({"backbone.", "fusion.", "projector."});
            }
        }
        if (plm_active) {
            Rng plm_rng = rng.fork(0x91f);
            auto sels = sel::select_all(view, sel::Mode::plm, config.select, bank, plm_rng);
            auto plm = con::plm_loss(emb_t1, emb_t2, emb_fused, sels, config.select, *bank);
            if (plm.loss) {
                out.plm = scalar(plm.loss);
                terms.push_back({static_cast<float>(w.w_plm), plm.loss});
                covered.insert({"backbone.", "fusion.", "projector."});
            }
        }
    }

    if (terms.empty()) return out;  // every active component came back empty: no step

    auto total = nn::wsum(terms);
    out.total = scalar(total);
    if (!std::isfinite(out.cd) || !std::isfinite(out.sem) || !std::isfinite(out.clem) ||
        !std::isfinite(out.plm) || !std::isfinite(out.total))
        throw NumericError("stage " + std::to_string(stage) + " batch [" + join_ids(ids) +
                           "]: non-finite loss (cd=" + std::to_string(out.cd) +
                           " sem=" + std::to_string(out.sem) +
                           " clem=" + std::to_string(out.clem) +
                           " plm=" + std::to_string(out.plm) + ")");
    nn::backward(total);

    std::vector<std::string> groups = {"backbone.", "fusion.", "pyramid.", "change_head."};
    if (config.detector.with_semantic_head) groups.push_back("semantic_head.");
    if (config.detector.with_projector) groups.push_back("projector.");
    for (const auto& g : groups)
        if (!covered.count(g)) net.params.mark_ready_zero(g);
    opt.step();
    out.stepped = true;
    return out;
}

// ---------------------------------------------------------------------------
// the stage-1/stage-3 epoch loop
// ---------------------------------------------------------------------------

nlohmann::json checkpoint_extra(int stage, int epoch, double val_iou, uint64_t seed) {
    return {{"stage", stage}, {"epoch", epoch}, {"val_iou", val_iou}, {"seed", seed}};
}

TrainState run_training_stage(const cfg::RunConfig& config, const scene::Dataset& data,
                              const std::filesystem::path& run_dir, int stage,
                              const cluster::CentroidBank* bank) {
    const auto& sched = config.schedule;
    const auto& w = config.loss;
    const bool cd_active = w.w_cd > 0.0;
    const bool sem_active = w.w_sem > 0.0;
    const bool clem_active = w.w_clem > 0.0;
    const bool plm_active = stage == 3 && w.w_plm > 0.0 && bank != nullptr;
    const int epochs = stage == 1 ? sched.stage1_epochs : sched.stage3_epochs;

    if (data.split("val").empty())
        throw ConfigError("training: validation split is empty; best-checkpoint selection "
                          "needs validation samples");
    std::vector<std::string> train_ids = data.split("train");

    model::Detector<float> net(config.detector, config.seed);
    if (stage == 3 && !sched.stage3_fresh)
        nn::load_checkpoint(run_dir / "stage1" / "ckpt-best", net.params);
    nn::SgdMomentum<float> opt(net.params, static_cast<float>(sched.lr),
                               static_cast<float>(sched.momentum),
                               static_cast<float>(sched.weight_decay));

    std::filesystem::create_directories(run_dir);
    const auto ckpt_dir = run_dir / (stage == 1 ? "stage1" : "stage3") / "ckpt-best";
    std::ofstream log(run_dir / "log.jsonl",
                      stage == 1 ? std::ios::trunc : std::ios::app);
    if (!log) throw IngestError("cannot open for writing: " + (run_dir / "log.jsonl").string());

    TrainState state;
    state.stage = stage;
    state.seed = config.seed;
    state.best_path = ckpt_dir.string();
    Rng stage_rng = Rng(config.seed).fork(stage == 1 ? 0x57a6e1 : 0x57a6e3);

    if (stage == 3) {  // the resume point competes for best before any step
        double iou = evaluate_model(net, data, "val").iou;
        state.best_iou = iou;
        nn::save_checkpoint(ckpt_dir, net.params, checkpoint_extra(stage, 0, iou, config.seed));
        ordered_json line;
        line["stage"] = stage;
        line["epoch"] = 0;
        line["val_iou"] = iou;
        line["best_iou"] = iou;
        log << line.dump() << "\n";
    }

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        state.epoch = epoch;
        Rng epoch_rng = stage_rng.fork(static_cast<uint64_t>(epoch));
        auto batches = make_batches(train_ids, sched.batch_size, epoch_rng);

        double sum_cd = 0.0, sum_sem = 0.0, sum_clem = 0.0, sum_plm = 0.0, sum_total = 0.0;
        int64_t seen = 0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            Rng batch_rng = epoch_rng.fork(0xba7c00 + bi);
            StepLosses l;
            try {
                l = train_step(net, opt, data, batches[bi], config, stage, bank, batch_rng);
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + ", " + e.what());
            }
            auto bs = static_cast<double>(batches[bi].size());
            sum_cd += l.cd * bs;
            sum_sem += l.sem * bs;
            sum_clem += l.clem * bs;
            sum_plm += l.plm * bs;
            sum_total += l.total * bs;
            seen += batches[bi].size();
        }
        auto mean = [&](double sum) { return sum / static_cast<double>(seen); };

        ordered_json line;
        line["stage"] = stage;
        line["epoch"] = epoch;
        if (cd_active) line["loss_cd"] = mean(sum_cd);
        if (sem_active) line["loss_sem"] = mean(sum_sem);
        if (clem_active) line["loss_clem"] = mean(sum_clem);
        if (plm_active) line["loss_plm"] = mean(sum_plm);
        line["loss"] = mean(sum_total);
        state.curves["total"].push_back(mean(sum_total));
        if (cd_active) state.curves["cd"].push_back(mean(sum_cd));
        if (sem_active) state.curves["sem"].push_back(mean(sum_sem));
        if (clem_active) state.curves["clem"].push_back(mean(sum_clem));
        if (plm_active) state.curves["plm"].push_back(mean(sum_plm));

        if (epoch % sched.val_period == 0 || epoch == epochs) {
            double iou = evaluate_model(net, data, "val").iou;
            line["val_iou"] = iou;
            if (iou > state.best_iou) {
                state.best_iou = iou;
                nn::save_checkpoint(ckpt_dir, net.params,
                                    checkpoint_extra(stage, epoch, iou, config.seed));
            }
            line["best_iou"] = state.best_iou;
        }
        log << line.dump() << "\n";
    }
    return state;
}

}  // namespace

// ---------------------------------------------------------------------------
// evaluation and prediction
// ---------------------------------------------------------------------------

metrics::MetricsReport evaluate_model(const model::Detector<float>& net,
                                      const scene::Dataset& data, const std::string& split) {
    const auto& ids = data.split(split);
    if (ids.empty()) throw ConfigError("evaluate: split '" + split + "' is empty");
    metrics::ConfusionMatrix cm;
    for (const auto& id : ids) {
        const auto& s = data.get(id);
        check_geometry(s, net.cfg);
        int h = net.cfg.height, w = net.cfg.width;
        Tensor<float> t1({1, 3, h, w}), t2({1, 3, h, w});
        std::copy(s.image_t1.data.begin(), s.image_t1.data.end(), t1.data.begin());
        std::copy(s.image_t2.data.begin(), s.image_t2.data.end(), t2.data.begin());
        auto fwd = net.forward(nn::make_const(std::move(t1)), nn::make_const(std::move(t2)),
                               /*training=*/false);
        Tensor<int> pred4 = net.binarize(fwd.change_prob->value);  // [1,1,h,w]
        Tensor<int> pred({h, w});
        std::copy(pred4.data.begin(), pred4.data.end(), pred.data.begin());
        metrics::accumulate(cm, pred, s.change);
    }
    return metrics::compute(cm);
}

metrics::MetricsReport evaluate_checkpoint(const cfg::RunConfig& config,
                                           const scene::Dataset& data,
                                           const std::filesystem::path& ckpt_dir,
                                           const std::string& split) {
    model::Detector<float> net(config.detector, config.seed);
    nn::load_checkpoint(ckpt_dir, net.params);
    return evaluate_model(net, data, split);
}

nn::Tensor<float> predict_change(const model::Detector<float>& net, const Tensor<float>& img1,
                                 const Tensor<float>& img2) {
    if (img1.rank() != 3 || img1.shape[0] != 3)
        throw ShapeError("predict: want [3,h,w] images, got " + img1.shape_str());
    if (img1.shape != img2.shape)
        throw ShapeError("predict: image shapes differ: " + img1.shape_str() + " vs " +
                         img2.shape_str());
    int h = img1.shape[1], w = img1.shape[2];
    if (h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0)
        throw ConfigError("predict: image extents must be >= 16 and divisible by 4, got " +
                          img1.shape_str());
    Tensor<float> t1({1, 3, h, w}), t2({1, 3, h, w});
    std::copy(img1.data.begin(), img1.data.end(), t1.data.begin());
    std::copy(img2.data.begin(), img2.data.end(), t2.data.begin());
    auto fwd = net.forward(nn::make_const(std::move(t1)), nn::make_const(std::move(t2)),
                           /*training=*/false);
    Tensor<float> prob({h, w});
    std::copy(fwd.change_prob->value.data.begin(), fwd.change_prob->value.data.end(),
              prob.data.begin());
    return prob;
}

// ---------------------------------------------------------------------------
// stage 2: harvest and cluster
// ---------------------------------------------------------------------------

Harvest harvest_embeddings(const model::Detector<float>& net, const scene::Dataset& data,
                           const std::string& split, int cap, uint64_t seed) {
    if (!net.cfg.with_projector)
        throw ConfigError("harvest: detector has no projector");
    const auto& ids = data.split(split);
    if (ids.empty()) throw ConfigError("harvest: split '" + split + "' is empty");

    struct Reservoir {
        std::vector<std::vector<double>> rows;
        std::vector<int> stages;
        int64_t seen = 0;
    };
    std::map<int, Reservoir> pools;
    Rng rng = Rng(seed).fork(0xa27e57);

    for (const auto& id : ids) {
        const auto& s = data.get(id);
        check_geometry(s, net.cfg);
        int h = net.cfg.height, w = net.cfg.width;
        Tensor<float> t1({1, 3, h, w}), t2({1, 3, h, w});
        std::copy(s.image_t1.data.begin(), s.image_t1.data.end(), t1.data.begin());
        std::copy(s.image_t2.data.begin(), s.image_t2.data.end(), t2.data.begin());
        auto fwd = net.forward(nn::make_const(std::move(t1)), nn::make_const(std::move(t2)),
                               /*training=*/false);
        for (int t = 0; t < 2; ++t) {
            auto emb = nn::l2_normalize_channels(net.project(t == 0 ? fwd.feat_t1 : fwd.feat_t2));
            const Tensor<float>& e = emb->value;  // [1,D,fh,fw]
            int d = e.shape[1], fw_cells = e.shape[3];
            const Tensor<int>& sem = t == 0 ? s.sem_t1 : s.sem_t2;
            const Tensor<int>& stage_map = t == 0 ? s.stage_t1 : s.stage_t2;
            for (const auto& [cls, cells] : sel::pure_cells_by_class(sem)) {
                auto& pool = pools[cls];
                for (const auto& [fy, fx] : cells) {
                    std::vector<double> row(d);
                    for (int c = 0; c < d; ++c)
                        row[c] = static_cast<double>(
                            e.data[(static_cast<int64_t>(c) * e.shape[2] + fy) * fw_cells + fx]);
                    int stage_id = stage_map.data[(4 * fy + 2) * w + (4 * fx + 2)];
                    ++pool.seen;
                    if (static_cast<int>(pool.rows.size()) < cap) {
                        pool.rows.push_back(std::move(row));
                        pool.stages.push_back(stage_id);
                    } else {
                        int j = rng.uniform_int(0, static_cast<int>(pool.seen) - 1);
                        if (j < cap) {
                            pool.rows[j] = std::move(row);
                            pool.stages[j] = stage_id;
                        }
                    }
                }
            }
        }
    }

    Harvest out;
    for (auto& [cls, pool] : pools) {  // std::map: ascending class id
        out.class_ids.push_back(cls);
        out.rows.push_back(std::move(pool.rows));
        out.stages.push_back(std::move(pool.stages));
    }
    return out;
}

cluster::CentroidBank run_stage2(const cfg::RunConfig& config, const scene::Dataset& data,
                                 const std::filesystem::path& run_dir) {
    const auto ckpt = run_dir / "stage1" / "ckpt-best";
    if (!std::filesystem::exists(ckpt / "manifest.json"))
        throw ConfigError("stage 2 requires the stage-1 checkpoint at " + ckpt.string() +
                          "; run stage 1 first");
    model::Detector<float> net(config.detector, config.seed);
    nn::load_checkpoint(ckpt, net.params);

    Harvest h = harvest_embeddings(net, data, "train", config.schedule.harvest_cap, config.seed);
    std::vector<std::string> notes;
    auto bank = cluster::cluster_phenology(h.class_ids, h.rows, config.schedule.cluster_k,
                                           config.seed, &notes);
    cluster::write_bank(run_dir / "centroids.json", bank);

    std::ofstream log(run_dir / "log.jsonl", std::ios::app);
    if (!log) throw IngestError("cannot open for writing: " + (run_dir / "log.jsonl").string());
    ordered_json line;
    line["stage"] = 2;
    line["classes"] = ordered_json::array();
    for (size_t i = 0; i < h.class_ids.size(); ++i) {
        const auto* cc = bank.find(h.class_ids[i]);
        if (!cc) continue;  // class omitted (no samples)
        std::vector<int> assigned;
        assigned.reserve(h.rows[i].size());
        for (const auto& row : h.rows[i])
            assigned.push_back(bank.assign(h.class_ids[i], row.data(),
                                           static_cast<int>(row.size())));
        ordered_json cj;
        cj["class_id"] = cc->class_id;
        cj["count"] = h.rows[i].size();
        cj["k"] = cc->k();
        cj["iterations"] = cc->iterations;
        cj["inertia"] = cc->inertia;
        cj["stage_ari"] = cluster::adjusted_rand(assigned, h.stages[i]);
        line["classes"].push_back(cj);
    }
    line["notes"] = notes;
    log << line.dump() << "\n";
    return bank;
}

// ---------------------------------------------------------------------------
// stage drivers
// ---------------------------------------------------------------------------

TrainState run_stage1(const cfg::RunConfig& config, const scene::Dataset& data,
                      const std::filesystem::path& run_dir) {
    return run_training_stage(config, data, run_dir, 1, nullptr);
}

TrainState run_stage3(const cfg::RunConfig& config, const scene::Dataset& data,
                      const std::filesystem::path& run_dir) {
    if (!config.schedule.stage3_fresh &&
        !std::filesystem::exists(run_dir / "stage1" / "ckpt-best" / "manifest.json"))
        throw ConfigError("stage 3 resumes from the stage-1 checkpoint at " +
                          (run_dir / "stage1" / "ckpt-best").string() + "; run stage 1 first");
    cluster::CentroidBank bank;
    const bool want_plm = config.loss.w_plm > 0.0;
    if (want_plm) {
        const auto path = run_dir / "centroids.json";
        if (!std::filesystem::exists(path))
            throw ConfigError("stage 3 with loss.w_plm > 0 requires the centroid bank at " +
                              path.string() + "; run stage 2 first");
        bank = cluster::read_bank(path);
    }
    return run_training_stage(config, data, run_dir, 3, want_plm ? &bank : nullptr);
}

void run_all(const cfg::RunConfig& config, const scene::Dataset& data,
             const std::filesystem::path& run_dir) {
    run_stage1(config, data, run_dir);
    if (config.detector.with_projector) {
        run_stage2(config, data, run_dir);
    } else {
        std::ofstream log(run_dir / "log.jsonl", std::ios::app);
        ordered_json line;
        line["stage"] = 2;
        line["skipped"] = "detector has no projector";
        log << line.dump() << "\n";
    }
    run_stage3(config, data, run_dir);
}

}  // namespace phenocd::train
