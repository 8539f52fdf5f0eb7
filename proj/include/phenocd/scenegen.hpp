#pragma once

// Synthetic bi-temporal scene generator and dataset serialization. Scenes are
// Voronoi partitions of the grid into land-cover regions; each region carries
// a class and a phenological stage per acquisition date. True changes are
// painted discs of a different class at t2; pseudo-changes keep the class and
// flip only the stage, so the pixels look different while the land cover is
// the same.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "phenocd/common.hpp"
#include "phenocd/tensor.hpp"

namespace phenocd::scene {

struct ClassDef {
    int id = 0;
    std::string name;
    std::array<double, 3> base{};                   // RGB signature in [0,1]
    std::vector<std::array<double, 3>> stage_deltas;  // one offset per stage
};

struct ClassPalette {
    int num_stages = 0;
    std::vector<ClassDef> classes;

    int num_classes() const { return static_cast<int>(classes.size()); }
    void validate() const;  // throws ConfigError
};

// Fixed signature table: up to 10 classes, stage offsets along a per-class
// direction with step stage_step, centered on the base signature. At the
// default step the stage swing overlaps typical between-class distances so
// appearance alone cannot separate true from phenological change; larger
// steps make stages easier to tell apart.
ClassPalette default_palette(int num_classes, int num_stages, double stage_step = 0.12);

struct SceneConfig {
    int height = 64;
    int width = 64;
    int num_classes = 4;
    int num_stages = 4;
    int blob_count_min = 6;
    int blob_count_max = 12;
    double change_fraction = 0.10;         // target fraction of class-changed pixels
    double pseudo_change_fraction = 0.30;  // target fraction of unchanged pixels with a stage flip
    double stage_step = 0.12;              // appearance distance between adjacent stages
    double noise_sigma = 0.05;
    uint64_t seed = 0;

    void validate() const;  // throws ConfigError naming the offending field
};

struct SceneSample {
    std::string sample_id;
    nn::Tensor<float> image_t1, image_t2;  // [3,h,w] in [0,1]
    nn::Tensor<int> sem_t1, sem_t2;        // [h,w] class ids
    nn::Tensor<int> change;                // [h,w] 0/1, 1 iff sem_t1 != sem_t2
    nn::Tensor<int> stage_t1, stage_t2;    // [h,w] stage ids
};

SceneSample generate_scene(const SceneConfig& config, const ClassPalette& palette,
                           const std::string& sample_id);

struct Splits {
    std::vector<std::string> train, val, test;
};

// Shuffles ids under the seed, then takes floor-sized val/test slices with
// the remainder going to train. Ratios must be positive and sum to 1.
Splits split_ids(std::vector<std::string> ids, double train_ratio, double val_ratio,
                 double test_ratio, uint64_t seed);

void write_palette(const std::filesystem::path& path, const ClassPalette& palette);
ClassPalette read_palette(const std::filesystem::path& path);

void write_sample(const std::filesystem::path& root, const SceneSample& sample);
SceneSample read_sample(const std::filesystem::path& root, const std::string& sample_id,
                        const ClassPalette& palette);

void write_splits(const std::filesystem::path& root, const Splits& splits);
Splits read_splits(const std::filesystem::path& root);

struct Dataset {
    ClassPalette palette;
    Splits splits;
    std::vector<SceneSample> samples;
    std::unordered_map<std::string, size_t> index;

    const SceneSample& get(const std::string& id) const;
    const std::vector<std::string>& split(const std::string& name) const;  // train|val|test
};

Dataset read_dataset(const std::filesystem::path& root);

struct DatasetGenConfig {
    SceneConfig scene;
    int sample_count = 100;
    double train_ratio = 0.8, val_ratio = 0.1, test_ratio = 0.1;
};

// Generates sample_count scenes with per-sample derived seeds, splits them,
// and writes the whole tree under out_root.
void generate_dataset(const DatasetGenConfig& config, const std::filesystem::path& out_root);

}  // namespace phenocd::scene
