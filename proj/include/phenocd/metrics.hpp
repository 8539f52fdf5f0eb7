#pragma once

// Cumulative binary confusion matrix and the derived change-detection
// metrics. All ratios use the 0/0 -> 0 convention.

#include <cstdint>
#include <string>

#include "phenocd/common.hpp"
#include "phenocd/tensor.hpp"

namespace phenocd::metrics {

struct ConfusionMatrix {
    int64_t tp = 0, tn = 0, fp = 0, fn = 0;

    void merge(const ConfusionMatrix& o) {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
    }
    int64_t total() const { return tp + tn + fp + fn; }
};

struct MetricsReport {
    double precision = 0.0, recall = 0.0, f1 = 0.0, iou = 0.0;
    ConfusionMatrix confusion;
};

// Adds one prediction/ground-truth pair of binary maps (any matching shape).
void accumulate(ConfusionMatrix& cm, const nn::Tensor<int>& pred, const nn::Tensor<int>& gt);

MetricsReport compute(const ConfusionMatrix& cm);

// {"precision":...,"recall":...,"f1":...,"iou":...,"confusion":{...}} with
// the four ratios printed to 6 decimal places.
std::string to_json(const MetricsReport& report);

}  // namespace phenocd::metrics
