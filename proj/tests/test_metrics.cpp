// Confusion accumulation and the derived ratios: hand-checked values, the
// f1/iou identity, order invariance, and degenerate denominators.

#include <doctest.h>

#include <cmath>

#include "phenocd/common.hpp"
#include "phenocd/metrics.hpp"

using namespace phenocd;
using nn::Tensor;

TEST_SUITE("metrics") {

TEST_CASE("a worked confusion gives the textbook ratios") {
    metrics::ConfusionMatrix cm;
    cm.tp = 50;
    cm.fp = 10;
    cm.fn = 15;
    cm.tn = 925;
    auto r = metrics::compute(cm);
    CHECK(r.precision == doctest::Approx(50.0 / 60.0).epsilon(1e-12));
    CHECK(r.recall == doctest::Approx(50.0 / 65.0).epsilon(1e-12));
    CHECK(r.f1 == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(r.iou == doctest::Approx(50.0 / 75.0).epsilon(1e-12));
}

TEST_CASE("f1 equals 2*iou/(1+iou) across random confusions") {
    Rng rng(13);
    for (int k = 0; k < 1000; ++k) {
        metrics::ConfusionMatrix cm;
        cm.tp = rng.uniform_int(1, 1000);
        cm.fp = rng.uniform_int(0, 1000);
        cm.fn = rng.uniform_int(0, 1000);
        cm.tn = rng.uniform_int(0, 1000);
        auto r = metrics::compute(cm);
        CHECK(std::abs(r.f1 - 2.0 * r.iou / (1.0 + r.iou)) <= 1e-12);
    }
}

TEST_CASE("accumulation counts every pixel exactly once") {
    Tensor<int> pred({2, 3}), gt({2, 3});
    // row 0: pred 1 1 0, gt 1 0 0 -> tp=1 fp=1 tn=1
    // row 1: pred 0 1 0, gt 1 1 0 -> fn=1 tp=1 tn=1
    pred.data = {1, 1, 0, 0, 1, 0};
    gt.data = {1, 0, 0, 1, 1, 0};
    metrics::ConfusionMatrix cm;
    metrics::accumulate(cm, pred, gt);
    CHECK(cm.tp == 2);
    CHECK(cm.fp == 1);
    CHECK(cm.fn == 1);
    CHECK(cm.tn == 2);
    CHECK(cm.total() == 6);
}

TEST_CASE("merge order never changes the totals") {
    Rng rng(21);
    std::vector<Tensor<int>> preds, gts;
    for (int i = 0; i < 6; ++i) {
        Tensor<int> p({4, 4}), g({4, 4});
        for (auto& v : p.data) v = rng.uniform_int(0, 1);
        for (auto& v : g.data) v = rng.uniform_int(0, 1);
        preds.push_back(p);
        gts.push_back(g);
    }
    metrics::ConfusionMatrix forward, backward;
    for (int i = 0; i < 6; ++i) metrics::accumulate(forward, preds[i], gts[i]);
    for (int i = 5; i >= 0; --i) metrics::accumulate(backward, preds[i], gts[i]);
    CHECK(forward.tp == backward.tp);
    CHECK(forward.tn == backward.tn);
    CHECK(forward.fp == backward.fp);
    CHECK(forward.fn == backward.fn);
}

TEST_CASE("mismatched shapes are rejected") {
    Tensor<int> pred({2, 2}), gt({2, 3});
    metrics::ConfusionMatrix cm;
    CHECK_THROWS_AS(metrics::accumulate(cm, pred, gt), ShapeError);
}

TEST_CASE("empty denominators report zero, not nan") {
    metrics::ConfusionMatrix cm;  // all zero
    auto r = metrics::compute(cm);
    CHECK(r.precision == 0.0);
    CHECK(r.recall == 0.0);
    CHECK(r.f1 == 0.0);
    CHECK(r.iou == 0.0);

    cm.tn = 100;  // negatives only: still no positive denominators
    r = metrics::compute(cm);
    CHECK(r.f1 == 0.0);
    CHECK(r.iou == 0.0);

    metrics::ConfusionMatrix perfect;
    perfect.tp = 10;
    r = metrics::compute(perfect);
    CHECK(r.precision == 1.0);
    CHECK(r.recall == 1.0);
    CHECK(r.f1 == 1.0);
    CHECK(r.iou == 1.0);
}

TEST_CASE("the json report prints six-decimal ratios and raw counts") {
    metrics::ConfusionMatrix cm;
    cm.tp = 50;
    cm.fp = 10;
    cm.fn = 15;
    cm.tn = 925;
    auto text = metrics::to_json(metrics::compute(cm));
    CHECK(text.find("\"precision\":0.833333") != std::string::npos);
    CHECK(text.find("\"recall\":0.769231") != std::string::npos);
    CHECK(text.find("\"f1\":0.800000") != std::string::npos);
    CHECK(text.find("\"iou\":0.666667") != std::string::npos);
    CHECK(text.find("\"tp\":50") != std::string::npos);
    CHECK(text.find("\"tn\":925") != std::string::npos);
}

}  // TEST_SUITE("metrics")
