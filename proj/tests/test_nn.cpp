// Differentiable-op behavior, the optimizer update rule, and checkpoint
// round-trips.

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "phenocd/checkpoint.hpp"
#include "phenocd/gradcheck.hpp"
#include "phenocd/layers.hpp"
#include "phenocd/loss_ops.hpp"
#include "phenocd/nn_ops.hpp"
#include "phenocd/optimizer.hpp"

using namespace phenocd;
using nn::Tensor;

namespace {

Tensor<double> filled(std::vector<int> shape, std::initializer_list<double> vals) {
    Tensor<double> t(shape);
    REQUIRE(t.numel() == static_cast<int64_t>(vals.size()));
    std::copy(vals.begin(), vals.end(), t.data.begin());
    return t;
}

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(shape);
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// autodiff
// ---------------------------------------------------------------------------

TEST_SUITE("autodiff") {

TEST_CASE("relu backward uses subgradient zero at the kink") {
    auto x = nn::make_leaf(filled({3}, {-1.0, 0.0, 2.0}), true);
    auto loss = nn::mean_all(nn::relu(x));
    nn::backward(loss);
    CHECK(x->grad.data[0] == 0.0);
    CHECK(x->grad.data[1] == 0.0);  // the stated convention at exactly zero
    CHECK(x->grad.data[2] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("bilinear upsample preserves constant fields") {
    Tensor<double> c({1, 2, 3, 3});
    for (auto& v : c.data) v = 0.73;
    auto up = nn::upsample_bilinear2d(nn::make_const(c), 12, 12);
    for (double v : up->value.data) CHECK(v == doctest::Approx(0.73));
}

TEST_CASE("conv2d with an identity kernel reproduces the input") {
    Rng rng(3);
    Tensor<double> x = random_tensor({1, 1, 5, 5}, rng);
    Tensor<double> w = Tensor<double>::zeros({1, 1, 3, 3});
    w.data[4] = 1.0;  // center tap
    auto y = nn::conv2d(nn::make_const(x), nn::make_const(w),
                        nn::make_const(Tensor<double>::zeros({1})), /*stride=*/1, /*pad=*/1);
    REQUIRE(y->value.shape == x.shape);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(y->value.data[i] == doctest::Approx(x.data[i]).epsilon(1e-12));
}

TEST_CASE("sigmoid derivative at zero is a quarter") {
    auto x = nn::make_leaf(Tensor<double>::zeros({1}), true);
    auto loss = nn::mean_all(nn::sigmoid(x));
    nn::backward(loss);
    CHECK(x->grad.data[0] == doctest::Approx(0.25).epsilon(1e-8));
}

TEST_CASE("linear op gradients are exact to rounding") {
    Rng rng(11);
    std::vector<Tensor<double>> leaves = {random_tensor({1, 3, 4, 4}, rng),
                                          random_tensor({2, 3, 1, 1}, rng),
                                          random_tensor({2}, rng)};
    auto report = nn::finite_diff_check(
        [](const std::vector<nn::NodePtr<double>>& in) {
            return nn::mean_all(nn::conv2d(in[0], in[1], in[2], 1, 0));
        },
        leaves);
    CHECK(report.max_rel_err <= 1e-9);
}

TEST_CASE("elementwise and reduction ops pass finite differences") {
    Rng rng(19);
    auto check1 = [&](const char* name, auto&& op) {
        std::vector<Tensor<double>> leaves = {random_tensor({2, 3, 4, 4}, rng)};
        auto report = nn::finite_diff_check(
            [&](const std::vector<nn::NodePtr<double>>& in) { return op(in[0]); }, leaves);
        INFO(name);
        CHECK(report.max_rel_err <= 1e-6);
    };
    using P = nn::NodePtr<double>;
    check1("relu", [](P x) { return nn::mean_all(nn::relu(nn::add(x, x))); });
    check1("sigmoid", [](P x) { return nn::mean_all(nn::sigmoid(x)); });
    check1("absval", [](P x) { return nn::mean_all(nn::absval(x)); });
    check1("channel_mean", [](P x) { return nn::mean_all(nn::channel_mean(x)); });
    check1("channel_max", [](P x) { return nn::mean_all(nn::channel_max(x)); });
    check1("spatial_mean", [](P x) { return nn::mean_all(nn::spatial_mean(x)); });
    check1("adaptive_avg_pool", [](P x) {
        return nn::mean_all(nn::adaptive_avg_pool2d(x, 2, 2));
    });
    check1("upsample", [](P x) { return nn::mean_all(nn::upsample_bilinear2d(x, 7, 9)); });
    check1("l2_normalize", [](P x) { return nn::mean_all(nn::l2_normalize_channels(x)); });
    check1("mul", [](P x) { return nn::mean_all(nn::mul(x, nn::sigmoid(x))); });
}

TEST_CASE("infonce_mean hand values") {
    // anchor.positive = 1, one orthogonal negative, tau 1 -> ln(1 + e^-1)
    auto rows = nn::make_const(filled({3, 2}, {1, 0, /**/ 1, 0, /**/ 0, 1}));
    auto loss = nn::infonce_mean(rows, {{0, 1, {2}}}, 1.0);
    CHECK(loss->value.data[0] == doctest::Approx(std::log(1 + std::exp(-1.0))).epsilon(1e-12));

    // all similarities equal with three negatives -> ln 4
    auto same = nn::make_const(filled({5, 2}, {1, 0, 1, 0, 1, 0, 1, 0, 1, 0}));
    auto sym = nn::infonce_mean(same, {{0, 1, {2, 3, 4}}}, 1.0);
    CHECK(sym->value.data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // huge temperature flattens every softmax toward ln(k+1)
    Rng rng(5);
    Tensor<double> r = random_tensor({4, 3}, rng);
    auto flat = nn::infonce_mean(nn::make_const(r), {{0, 1, {2, 3}}}, 1e6);
    CHECK(flat->value.data[0] == doctest::Approx(std::log(3.0)).epsilon(1e-3));
}

TEST_CASE("bce and cross entropy hand values") {
    // single pixel, y=1, p=0.9 -> -ln 0.9
    auto p = nn::make_const(filled({1}, {0.9}));
    Tensor<double> y({1});
    y.data[0] = 1.0;
    CHECK(nn::bce_probs(p, y)->value.data[0] ==
          doctest::Approx(-std::log(0.9)).epsilon(1e-10));

    // p = 0.5 everywhere -> ln 2 regardless of targets
    auto half = nn::make_const(filled({4}, {0.5, 0.5, 0.5, 0.5}));
    Tensor<double> mixed = filled({4}, {0, 1, 1, 0});
    CHECK(nn::bce_probs(half, mixed)->value.data[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // uniform logits over 4 classes -> ln 4
    auto logits = nn::make_const(Tensor<double>::zeros({1, 4}));
    Tensor<int> target({1});
    target.data[0] = 2;
    CHECK(nn::softmax_cross_entropy(logits, target)->value.data[0] ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // 2-class, unit logit gap toward the true class -> ln(1 + e^-1)
    auto gap = nn::make_const(filled({1, 2}, {1.0, 0.0}));
    Tensor<int> zero({1});
    CHECK(nn::softmax_cross_entropy(gap, zero)->value.data[0] ==
          doctest::Approx(std::log(1 + std::exp(-1.0))).epsilon(1e-12));

    // one-hot-correct logits of magnitude 20 -> loss near zero
    auto hot = nn::make_const(filled({1, 2}, {20.0, 0.0}));
    CHECK(nn::softmax_cross_entropy(hot, zero)->value.data[0] < 1e-8);
}

}  // TEST_SUITE("autodiff")

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

TEST_SUITE("optimizer") {

TEST_CASE("sgd momentum frozen example") {
    // w=1.0, g=0.1, v=0, lr=0.1, mu=0.9, wd=1e-4 -> v=0.1001, w=0.98999
    nn::ParamRegistry<double> reg;
    Tensor<double> w({1});
    w.data[0] = 1.0;
    auto node = reg.add("w", w);
    nn::SgdMomentum<double> opt(reg, 0.1, 0.9, 1e-4);
    node->ensure_grad();
    node->grad.data[0] = 0.1;
    node->grad_ready = true;
    opt.step();
    CHECK(node->value.data[0] == doctest::Approx(0.98999).epsilon(1e-12));
}

TEST_CASE("zero learning rate freezes weights but advances velocity") {
    nn::ParamRegistry<double> reg;
    Tensor<double> w({1});
    w.data[0] = 2.0;
    auto node = reg.add("w", w);
    nn::SgdMomentum<double> opt(reg, 0.0, 0.9, 0.0);
    for (int i = 0; i < 2; ++i) {
        node->ensure_grad();
        node->grad.data[0] = 1.0;
        node->grad_ready = true;
        opt.step();
        CHECK(node->value.data[0] == 2.0);
    }
    // velocity carried: one lr>0 step now moves by lr*(mu*v + g)
    opt.set_lr(0.1);
    node->ensure_grad();
    node->grad.data[0] = 1.0;
    node->grad_ready = true;
    opt.step();
    // v was 1, then 1.9; third step v = 0.9*1.9 + 1 = 2.71
    CHECK(node->value.data[0] == doctest::Approx(2.0 - 0.1 * 2.71).epsilon(1e-12));
}

TEST_CASE("zero gradients decay weights geometrically along the velocity") {
    nn::ParamRegistry<double> reg;
    Tensor<double> w({1});
    w.data[0] = 1.0;
    auto node = reg.add("w", w);
    nn::SgdMomentum<double> opt(reg, 0.1, 0.5, 0.0);
    node->ensure_grad();
    node->grad.data[0] = 1.0;
    node->grad_ready = true;
    opt.step();  // v=1, w = 1 - 0.1
    double w1 = node->value.data[0];
    CHECK(w1 == doctest::Approx(0.9));
    for (int k = 1; k <= 3; ++k) {
        node->ensure_grad();
        node->grad_ready = true;  // g = 0
        opt.step();
    }
    // w_k = w_0 - lr * v1 * (1 + mu + mu^2 + mu^3)
    CHECK(node->value.data[0] ==
          doctest::Approx(1.0 - 0.1 * (1 + 0.5 + 0.25 + 0.125)).epsilon(1e-12));
}

TEST_CASE("a parameter without a gradient is a wiring error") {
    nn::ParamRegistry<double> reg;
    reg.add("w", Tensor<double>::zeros({2}));
    nn::SgdMomentum<double> opt(reg, 0.1, 0.9, 0.0);
    CHECK_THROWS_AS(opt.step(), NumericError);
}

TEST_CASE("mark_ready_zero covers inactive groups without touching live grads") {
    nn::ParamRegistry<double> reg;
    auto a = reg.add("head.w", Tensor<double>::zeros({1}));
    reg.add("aux.w", Tensor<double>::zeros({1}));
    a->ensure_grad();
    a->grad.data[0] = 3.0;
    a->grad_ready = true;
    reg.mark_ready_zero("aux.");
    CHECK(a->grad.data[0] == 3.0);  // untouched
    nn::SgdMomentum<double> opt(reg, 1.0, 0.0, 0.0);
    CHECK_NOTHROW(opt.step());
}

}  // TEST_SUITE("optimizer")

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

TEST_SUITE("checkpoint") {

TEST_CASE("save and load round-trips float weights exactly") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "phenocd_ckpt_test";
    fs::remove_all(dir);

    Rng rng(21);
    nn::ParamRegistry<float> reg;
    Tensor<float> w({3, 4});
    for (auto& v : w.data) v = static_cast<float>(rng.normal());
    reg.add("layer.w", w);
    reg.add("layer.stat", Tensor<float>::zeros({4}), /*trainable=*/false);
    nn::save_checkpoint(dir, reg, nlohmann::json{{"epoch", 7}});

    nn::ParamRegistry<float> reg2;
    reg2.add("layer.w", Tensor<float>::zeros({3, 4}));
    reg2.add("layer.stat", Tensor<float>::zeros({4}), false);
    auto extra = nn::load_checkpoint(dir, reg2);
    CHECK(extra.at("epoch").get<int>() == 7);
    for (int64_t i = 0; i < w.numel(); ++i)
        CHECK(reg2.find("layer.w")->value.data[i] == w.data[i]);
    fs::remove_all(dir);
}

TEST_CASE("shape and name mismatches are rejected") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "phenocd_ckpt_strict";
    fs::remove_all(dir);

    nn::ParamRegistry<float> reg;
    reg.add("a", Tensor<float>::zeros({2, 2}));
    nn::save_checkpoint(dir, reg, {});

    nn::ParamRegistry<float> wrong_shape;
    wrong_shape.add("a", Tensor<float>::zeros({4}));
    CHECK_THROWS(nn::load_checkpoint(dir, wrong_shape));

    nn::ParamRegistry<float> wrong_name;
    wrong_name.add("b", Tensor<float>::zeros({2, 2}));
    CHECK_THROWS(nn::load_checkpoint(dir, wrong_name));

    nn::ParamRegistry<float> extra_param;
    extra_param.add("a", Tensor<float>::zeros({2, 2}));
    extra_param.add("b", Tensor<float>::zeros({1}));
    CHECK_THROWS(nn::load_checkpoint(dir, extra_param));
    fs::remove_all(dir);
}

}  // TEST_SUITE("checkpoint")
