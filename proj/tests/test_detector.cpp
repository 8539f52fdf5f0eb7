// Detector model: shapes, twin weight sharing, fusion variants, projection
// normalization, and inference invariances.

#include <doctest.h>

#include <cmath>

#include "phenocd/detector.hpp"

using namespace phenocd;
using nn::Tensor;

namespace {

Tensor<float> random_pixels(int n, int h, int w, Rng& rng) {
    Tensor<float> t({n, 3, h, w});
    for (auto& v : t.data) v = static_cast<float>(rng.uniform());
    return t;
}

nn::NodePtr<float> random_images(int n, int h, int w, Rng& rng) {
    return nn::make_const(random_pixels(n, h, w, rng));
}

model::DetectorConfig tiny_config() {
    model::DetectorConfig c;
    c.height = 32;
    c.width = 32;
    c.channels = 16;
    c.head_hidden = 16;
    c.embed_dim = 16;
    c.proj_hidden = 32;
    return c;
}

int64_t trainable_count(const std::string& fusion) {
    model::DetectorConfig c;
    c.fusion = fusion;
    model::Detector<float> net(c, 7);
    return net.params.trainable_count();
}

}  // namespace

TEST_SUITE("detector") {

TEST_CASE("forward emits the contracted shapes") {
    model::DetectorConfig c;  // 64x64, C=32 defaults
    model::Detector<float> net(c, 7);
    Rng rng(1);
    auto img1 = random_images(2, 64, 64, rng);
    auto img2 = random_images(2, 64, 64, rng);
    auto out = net.forward(img1, img2, /*training=*/false);

    CHECK(out.feat_t1->value.shape == std::vector<int>{2, 32, 16, 16});
    CHECK(out.feat_t2->value.shape == std::vector<int>{2, 32, 16, 16});
    CHECK(out.change_prob->value.shape == std::vector<int>{2, 1, 64, 64});
    CHECK(out.sem_logits_t1->value.shape == std::vector<int>{2, 4, 64, 64});
    for (float v : out.change_prob->value.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("identical inputs to both branches give bitwise equal features") {
    model::Detector<float> net(tiny_config(), 3);
    Rng rng(2);
    auto img = random_images(2, 32, 32, rng);
    auto out = net.forward(img, img, false);
    CHECK(out.feat_t1->value.data == out.feat_t2->value.data);
}

TEST_CASE("zero images give spatially constant interior features") {
    model::DetectorConfig c = tiny_config();
    c.height = 128;
    c.width = 128;
    model::Detector<float> net(c, 5);
    auto zero = nn::make_const(Tensor<float>::zeros({1, 3, 128, 128}));
    auto out = net.forward(zero, zero, false);
    // away from the padding halo every feature column must match the center
    const auto& f = out.feat_t1->value;  // [1, C, 32, 32]
    int fh = f.shape[2], fw = f.shape[3];
    int margin = 8;  // receptive-field halo in stride-4 cells
    for (int ch = 0; ch < f.shape[1]; ++ch) {
        float center = f.data[(static_cast<int64_t>(ch) * fh + fh / 2) * fw + fw / 2];
        for (int y = margin; y < fh - margin; ++y)
            for (int x = margin; x < fw - margin; ++x) {
                float v = f.data[(static_cast<int64_t>(ch) * fh + y) * fw + x];
                CHECK(std::abs(v - center) <= 1e-5f);
            }
    }
}

TEST_CASE("fusion variants order by parameter count and share output shapes") {
    int64_t attention = trainable_count("attention");
    int64_t concat = trainable_count("concat");
    int64_t subtract = trainable_count("subtract");
    CHECK(attention == 174096);
    CHECK(concat == 173189);
    CHECK(subtract == 163973);
    CHECK(attention > concat);   // attention adds the two attention blocks
    CHECK(concat > subtract);    // concat widens the fusion conv input

    Rng rng(4);
    auto img1 = random_images(2, 32, 32, rng);
    auto img2 = random_images(2, 32, 32, rng);
    std::vector<int> want{2, 1, 32, 32};
    for (const char* fusion : {"attention", "concat", "subtract"}) {
        model::DetectorConfig c = tiny_config();
        c.fusion = fusion;
        model::Detector<float> net(c, 7);
        auto out = net.forward(img1, img2, false);
        CHECK(out.change_prob->value.shape == want);
    }
}

TEST_CASE("temporal order matters to the change head") {
    model::Detector<float> net(tiny_config(), 9);
    Rng rng(6);
    auto img1 = random_images(1, 32, 32, rng);
    auto img2 = random_images(1, 32, 32, rng);
    auto ab = net.forward(img1, img2, false);
    auto ba = net.forward(img2, img1, false);
    double diff = 0.0;
    for (int64_t i = 0; i < ab.change_prob->value.numel(); ++i)
        diff += std::abs(static_cast<double>(ab.change_prob->value.data[i]) -
                         ba.change_prob->value.data[i]);
    CHECK(diff / ab.change_prob->value.numel() > 1e-6);  // asymmetry is expected
}

TEST_CASE("projection emits an embedding field that normalizes to unit pixels") {
    model::Detector<float> net(tiny_config(), 11);
    Rng rng(8);
    auto img1 = random_images(2, 32, 32, rng);
    auto img2 = random_images(2, 32, 32, rng);
    auto out = net.forward(img1, img2, false);
    auto raw = net.project(out.feat_t1);
    REQUIRE(raw->value.shape == std::vector<int>{2, 16, 8, 8});
    auto emb = nn::l2_normalize_channels(raw);
    const auto& e = emb->value;  // [2, D, 8, 8]
    int64_t plane = static_cast<int64_t>(e.shape[2]) * e.shape[3];
    for (int n = 0; n < e.shape[0]; ++n)
        for (int64_t p = 0; p < plane; ++p) {
            double norm = 0.0;
            for (int d = 0; d < e.shape[1]; ++d) {
                double v = e.data[(static_cast<int64_t>(n) * e.shape[1] + d) * plane + p];
                norm += v * v;
            }
            CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-5));
        }
}

TEST_CASE("eval-mode outputs are independent of batch composition") {
    model::Detector<float> net(tiny_config(), 13);
    Rng rng(10);
    Tensor<float> pix1 = random_pixels(3, 32, 32, rng);
    Tensor<float> pix2 = random_pixels(3, 32, 32, rng);
    auto img1 = nn::make_const(pix1);
    auto img2 = nn::make_const(pix2);
    auto batch = net.forward(img1, img2, false);

    // single-sample forward of sample 1 must match its slice in the batch
    Tensor<float> one1({1, 3, 32, 32}), one2({1, 3, 32, 32});
    int64_t plane = 3LL * 32 * 32;
    std::copy_n(pix1.data.begin() + plane, plane, one1.data.begin());
    std::copy_n(pix2.data.begin() + plane, plane, one2.data.begin());
    auto single = net.forward(nn::make_const(one1), nn::make_const(one2), false);

    int64_t cells = static_cast<int64_t>(32) * 32;
    for (int64_t i = 0; i < cells; ++i)
        CHECK(single.change_prob->value.data[i] ==
              doctest::Approx(batch.change_prob->value.data[cells + i]).epsilon(1e-6));
}

TEST_CASE("binarize thresholds at the configured cut with ties to one") {
    model::DetectorConfig c = tiny_config();
    model::Detector<float> net(c, 15);
    Tensor<float> prob({1, 1, 2, 2});
    prob.data = {0.2f, 0.5f, 0.7f, 0.49f};
    auto bin = net.binarize(prob);
    CHECK(bin.data == std::vector<int>{0, 1, 1, 0});
}

TEST_CASE("inference accepts geometries other than the training size") {
    model::Detector<float> net(tiny_config(), 17);  // built for 32x32
    Rng rng(12);
    auto img1 = random_images(1, 48, 64, rng);
    auto img2 = random_images(1, 48, 64, rng);
    auto out = net.forward(img1, img2, false);
    CHECK(out.change_prob->value.shape == std::vector<int>{1, 1, 48, 64});
}

}  // TEST_SUITE("detector")
