#pragma once

// Three-stage training driver. Stage 1 trains the detector with the change,
// semantic, and class-contrast losses; stage 2 freezes the weights, harvests
// per-class pixel embeddings over the training split, and clusters them into
// the phenology centroid bank; stage 3 resumes training with the bank-aware
// phenology loss added. Validation runs on a fixed cadence and the best
// validation change-IoU checkpoint is kept per training stage.
//
// Run directory layout:
//   <run>/config.json          effective configuration (written by the CLI)
//   <run>/log.jsonl            one JSON line per epoch / stage event
//   <run>/stage1/ckpt-best     best stage-1 checkpoint
//   <run>/centroids.json       stage-2 centroid bank
//   <run>/stage3/ckpt-best     best stage-3 checkpoint
//   <run>/metrics-<split>.json written by the eval command

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "phenocd/clustering.hpp"
#include "phenocd/config.hpp"
#include "phenocd/detector.hpp"
#include "phenocd/metrics.hpp"
#include "phenocd/scenegen.hpp"

namespace phenocd::train {

// Mutable bookkeeping for one training stage.
struct TrainState {
    int stage = 0;
    int epoch = 0;
    double best_iou = -1.0;      // monotone over recorded bests
    std::string best_path;
    uint64_t seed = 0;
    std::map<std::string, std::vector<double>> curves;  // component -> per-epoch means
};

// Seed-shuffled sample ids in batches of batch_size. A trailing remainder of
// one cannot feed batch statistics, so the last two batches are rebalanced to
// (batch_size-1, 2) — or merged into one batch of three when batch_size is 2.
// Throws ConfigError for empty or single-sample id lists.
std::vector<std::vector<std::string>> make_batches(std::vector<std::string> ids, int batch_size,
                                                   Rng& rng);

// Cumulative confusion over every sample of the split at the configured
// probability threshold. Throws ConfigError on an empty split and IngestError
// naming the sample on a geometry mismatch.
metrics::MetricsReport evaluate_model(const model::Detector<float>& net,
                                      const scene::Dataset& data, const std::string& split);

// Fresh model from the config, strict checkpoint load, then evaluate_model.
metrics::MetricsReport evaluate_checkpoint(const cfg::RunConfig& config,
                                           const scene::Dataset& data,
                                           const std::filesystem::path& ckpt_dir,
                                           const std::string& split);

// Change-probability map [h,w] for one image pair (eval mode). Images are
// [3,h,w] in [0,1] with equal, stride-4-compatible extents.
nn::Tensor<float> predict_change(const model::Detector<float>& net,
                                 const nn::Tensor<float>& img1, const nn::Tensor<float>& img2);

// Per-class embedding harvest: unit pixel embeddings of both temporal fields
// at pure stride-4 cells, reservoir-capped per class, with the scene stage id
// at each cell's patch center kept alongside for clustering diagnostics.
struct Harvest {
    std::vector<int> class_ids;                           // ascending
    std::vector<std::vector<std::vector<double>>> rows;   // per class: [n_c][D]
    std::vector<std::vector<int>> stages;                 // per class: [n_c]
};

Harvest harvest_embeddings(const model::Detector<float>& net, const scene::Dataset& data,
                           const std::string& split, int cap, uint64_t seed);

// Stage drivers. Each appends its epoch lines to <run>/log.jsonl; stage 1
// starts the log fresh. Stage 2 requires the stage-1 checkpoint; stage 3
// resumes from it (unless schedule.stage3_fresh) and requires the centroid
// bank when loss.w_plm > 0.
TrainState run_stage1(const cfg::RunConfig& config, const scene::Dataset& data,
                      const std::filesystem::path& run_dir);
cluster::CentroidBank run_stage2(const cfg::RunConfig& config, const scene::Dataset& data,
                                 const std::filesystem::path& run_dir);
TrainState run_stage3(const cfg::RunConfig& config, const scene::Dataset& data,
                      const std::filesystem::path& run_dir);

// 1 -> 2 -> 3. Stage 2 is skipped with a log note when the detector has no
// projector (only legal when loss.w_plm == 0).
void run_all(const cfg::RunConfig& config, const scene::Dataset& data,
             const std::filesystem::path& run_dir);

}  // namespace phenocd::train
