#pragma once

// Run configuration: one JSON document covering scene synthesis, dataset
// layout, the detector, loss weights, contrastive selection, and the training
// schedule. Every field has a default; unknown keys are rejected so typos
// fail loudly instead of silently training the wrong model. The detector's
// height/width/num_classes default to the scene's values when the config file
// leaves them out, and the two sections must agree either way.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "phenocd/common.hpp"
#include "phenocd/detector.hpp"
#include "phenocd/sampling.hpp"
#include "phenocd/scenegen.hpp"

namespace phenocd::cfg {

// ---------------------------------------------------------------------------
// sections
// ---------------------------------------------------------------------------

struct StageSchedule {
    int stage1_epochs = 60;
    int stage3_epochs = 60;
    int batch_size = 4;
    int val_period = 5;          // validate every N epochs; the final epoch always validates
    double lr = 0.0025;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int cluster_k = 4;           // phenology centroids per class (stage 2)
    int harvest_cap = 10000;     // embedding reservoir cap per class (stage 2)
    bool stage3_fresh = false;   // start stage 3 from random weights instead of the stage-1 best

    void validate() const;
};

struct DataPlan {
    int count = 100;             // samples generated by gen-data
    double train_ratio = 0.8;
    double val_ratio = 0.1;
    double test_ratio = 0.1;

    void validate() const;
};

struct RunConfig {
    uint64_t seed = 0;           // master seed: training, selection, clustering
    scene::SceneConfig scene;    // scene.seed drives dataset generation
    model::DetectorConfig detector;
    sel::LossWeights loss;
    sel::SelectConfig select;
    StageSchedule schedule;
    DataPlan dataset;
    std::string data_dir;        // paths.data — dataset root (flag --data overrides)
    std::string out_dir;         // paths.out — run directory root (flag --out overrides)

    void validate() const;       // per-section checks plus cross-section consistency
    scene::DatasetGenConfig gen_config() const;
};

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

// Applies the document onto defaults. Throws ConfigError on unknown keys
// (reported as section.key), wrong types, or malformed structure.
RunConfig config_from_json(const nlohmann::json& doc);

// Full effective config: every field, defaults resolved.
nlohmann::json config_to_json(const RunConfig& config);

RunConfig read_config(const std::filesystem::path& path);
void write_config(const std::filesystem::path& path, const RunConfig& config);

}  // namespace phenocd::cfg
