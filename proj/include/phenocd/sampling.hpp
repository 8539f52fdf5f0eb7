// Hard-sample selection for the constraint losses. Works on plain value
// tensors (no gradients): the caller extracts embedding values from the
// graph, this layer picks anchor/positive/negative cells, and the loss
// assembly turns the picks back into graph rows.
//
// Labels live at full resolution while embeddings live on the stride-4
// feature grid, so selection runs on grid cells whose 4x4 pixel patch is
// pure (single label). Hardness is read at the patch-center pixel.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "phenocd/clustering.hpp"
#include "phenocd/common.hpp"
#include "phenocd/tensor.hpp"

namespace phenocd::sel {

using nn::Tensor;

struct SelectConfig {
    int anchors_per_class = 16;    // hardest cells promoted to anchors, per class
    int positive_candidates = 16;  // candidates drawn per anchor; hardest one kept
    int negatives = 64;            // negative cells per anchor (half hard, half random)
    int min_region_pixels = 8;     // member cells required before a region prototype forms
    double tau = 0.1;              // softmax temperature for every contrastive term
    // stage-aware negatives for the phenology loss: append the other classes'
    // centroid vectors to each anchor's negative set
    bool plm_centroid_negatives = false;
    // restrict phenology-loss negatives to other-class cells only (drop the
    // same-class different-centroid cells)
    bool plm_strict_table1 = false;
    // "split": weighted sum of pixel/region/pixel-region terms.
    // "union": one softmax per anchor over the pooled negative set.
    std::string clem_variant = "split";

    void validate() const {
        if (anchors_per_class < 1 || positive_candidates < 1 || negatives < 1)
            throw ConfigError("select: anchors/candidates/negatives must be >= 1");
        if (min_region_pixels < 1) throw ConfigError("select: min_region_pixels must be >= 1");
        if (!(tau > 0.0)) throw ConfigError("select: tau must be > 0");
        if (clem_variant != "split" && clem_variant != "union")
            throw ConfigError("select: clem_variant must be 'split' or 'union', got '" +
                              clem_variant + "'");
    }
};

struct LossWeights {
    double w_cd = 1.0;
    double w_sem = 1.0;
    double w_clem = 0.2;
    double w_plm = 0.2;
    double lambda_pp = 1.0;
    double lambda_rr = 1.0;
    double lambda_pr = 1.0;

    void validate() const {
        const double all[] = {w_cd, w_sem, w_clem, w_plm, lambda_pp, lambda_rr, lambda_pr};
        double sum = 0.0;
        for (double v : all) {
            if (v < 0.0) throw ConfigError("loss weights must be non-negative");
            sum += v;
        }
        if (sum <= 0.0) throw ConfigError("at least one loss weight must be positive");
    }
};

// Which embedding field a cell lives in.
enum class Field { t1 = 0, t2 = 1, fused = 2 };

// The four selection tasks run each step: per-temporal segmentation plus the
// two change-status rows. Segmentation tasks read the temporal's own backbone
// embedding; change tasks read the fused-difference embedding.
enum class Task { seg_t1 = 0, seg_t2 = 1, cd_changed = 2, cd_unchanged = 3 };
enum class Mode { clem = 0, plm = 1 };

inline Field task_field(Task t) {
    switch (t) {
        case Task::seg_t1: return Field::t1;
        case Task::seg_t2: return Field::t2;
        default: return Field::fused;
    }
}

inline const char* task_name(Task t) {
    switch (t) {
        case Task::seg_t1: return "seg_t1";
        case Task::seg_t2: return "seg_t2";
        case Task::cd_changed: return "cd_changed";
        default: return "cd_unchanged";
    }
}

struct CellKey {
    Field field = Field::t1;
    int n = 0, fy = 0, fx = 0;
    bool operator==(const CellKey&) const = default;
    bool operator<(const CellKey& o) const {
        if (field != o.field) return field < o.field;
        if (n != o.n) return n < o.n;
        if (fy != o.fy) return fy < o.fy;
        return fx < o.fx;
    }
};

struct Triple {
    CellKey anchor;
    CellKey positive;
    std::vector<CellKey> negatives;
    // (class_id, centroid index) rows appended to the negative set (plm only)
    std::vector<std::pair<int, int>> centroid_negatives;
    int category = -1;  // anchor's class id
};

struct TaskSelection {
    Task task = Task::seg_t1;
    Mode mode = Mode::clem;
    std::vector<Triple> triples;
    int eligible_cells = 0;
    int skipped_classes = 0;  // fewer than 2 eligible cells, or no negatives available
    int skipped_anchors = 0;  // plm: anchor's centroid has no other member
};

// Plain-value view over one training batch. Embedding tensors are
// [N, D, fh, fw] with unit-norm channel vectors; label maps are [h, w] with
// h = 4*fh, w = 4*fw. Probability maps are predicted probabilities of the
// true label at each pixel (semantic: softmax prob of the gt class; change:
// raw change probability) — when absent, hardness falls back to rng order.
struct BatchView {
    const Tensor<double>* emb_t1 = nullptr;
    const Tensor<double>* emb_t2 = nullptr;
    const Tensor<double>* emb_fused = nullptr;
    std::vector<const Tensor<int>*> sem_t1, sem_t2, change;
    std::vector<const Tensor<double>*> true_prob_t1, true_prob_t2, change_prob;

    void validate() const;
};

// Run one task's selection. Deterministic given (view, cfg, rng seed); plm
// mode with a single-centroid bank consumes rng identically to clem mode and
// returns the same picks.
TaskSelection select_task(const BatchView& view, Task task, Mode mode, const SelectConfig& cfg,
                          const cluster::CentroidBank* bank, Rng& rng);

// All four tasks in fixed order, each on its own rng fork.
std::vector<TaskSelection> select_all(const BatchView& view, Mode mode, const SelectConfig& cfg,
                                      const cluster::CentroidBank* bank, Rng& rng);

// Stride-4 cells whose 4x4 patch holds a single label value, keyed by that
// value. Shared by selection eligibility and region-prototype membership.
std::map<int, std::vector<std::pair<int, int>>> pure_cells_by_class(const Tensor<int>& labels);

}  // namespace phenocd::sel
