#include "phenocd/metrics.hpp"

#include <cstdio>

namespace phenocd::metrics {

void accumulate(ConfusionMatrix& cm, const nn::Tensor<int>& pred, const nn::Tensor<int>& gt) {
    if (pred.shape != gt.shape)
        throw ShapeError("metrics accumulate: pred " + pred.shape_str() + " vs gt " +
                         gt.shape_str());
    for (int64_t i = 0; i < pred.numel(); ++i) {
        int p = pred.data[i], g = gt.data[i];
        if ((p != 0 && p != 1) || (g != 0 && g != 1))
            throw ConfigError("metrics accumulate: maps must be binary");
        if (p == 1 && g == 1)
            ++cm.tp;
        else if (p == 0 && g == 0)
            ++cm.tn;
        else if (p == 1)
            ++cm.fp;
        else
            ++cm.fn;
    }
}

namespace {

double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace

MetricsReport compute(const ConfusionMatrix& cm) {
    MetricsReport r;
    r.confusion = cm;
    double tp = static_cast<double>(cm.tp);
    double fp = static_cast<double>(cm.fp);
    double fn = static_cast<double>(cm.fn);
    r.precision = ratio(tp, tp + fp);
    r.recall = ratio(tp, tp + fn);
    r.f1 = ratio(2.0 * r.precision * r.recall, r.precision + r.recall);
    r.iou = ratio(tp, tp + fp + fn);
    return r;
}

std::string to_json(const MetricsReport& report) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"precision\":%.6f,\"recall\":%.6f,\"f1\":%.6f,\"iou\":%.6f,"
                  "\"confusion\":{\"tp\":%lld,\"tn\":%lld,\"fp\":%lld,\"fn\":%lld}}",
                  report.precision, report.recall, report.f1, report.iou,
                  static_cast<long long>(report.confusion.tp),
                  static_cast<long long>(report.confusion.tn),
                  static_cast<long long>(report.confusion.fp),
                  static_cast<long long>(report.confusion.fn));
    return buf;
}

}  // namespace phenocd::metrics
