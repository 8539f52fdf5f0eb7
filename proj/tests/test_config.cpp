// Run-configuration parsing: defaults, overrides, strict unknown-key
// rejection, detector/scene geometry coupling, and file round-trips.

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "phenocd/config.hpp"

using namespace phenocd;
using nlohmann::json;

TEST_SUITE("config") {

TEST_CASE("an empty document yields the defaults") {
    auto c = cfg::config_from_json(json::object());
    CHECK(c.seed == 0);
    CHECK(c.scene.height == 64);
    CHECK(c.scene.num_classes == 4);
    CHECK(c.detector.height == 64);
    CHECK(c.detector.num_classes == 4);
    CHECK(c.detector.fusion == "attention");
    CHECK(c.schedule.stage1_epochs == 60);
    CHECK(c.schedule.batch_size == 4);
    CHECK(c.loss.w_clem == doctest::Approx(0.2));
    CHECK(c.select.anchors_per_class == 16);
    CHECK(c.dataset.count == 100);
    c.validate();  // defaults must be self-consistent
}

TEST_CASE("section values override the defaults") {
    json doc = {
        {"seed", 42},
        {"scene", {{"height", 32}, {"width", 48}, {"num_classes", 3}, {"stage_step", 0.3}}},
        {"loss", {{"w_plm", 0.5}}},
        {"schedule", {{"stage1_epochs", 2}, {"lr", 0.01}}},
        {"select", {{"negatives", 32}}},
        {"dataset", {{"count", 12}}},
        {"paths", {{"data", "/tmp/d"}, {"out", "/tmp/o"}}},
    };
    auto c = cfg::config_from_json(doc);
    CHECK(c.seed == 42);
    CHECK(c.scene.height == 32);
    CHECK(c.scene.width == 48);
    CHECK(c.scene.stage_step == doctest::Approx(0.3));
    // detector geometry follows the scene when not given explicitly
    CHECK(c.detector.height == 32);
    CHECK(c.detector.width == 48);
    CHECK(c.detector.num_classes == 3);
    CHECK(c.loss.w_plm == doctest::Approx(0.5));
    CHECK(c.schedule.stage1_epochs == 2);
    CHECK(c.schedule.lr == doctest::Approx(0.01));
    CHECK(c.select.negatives == 32);
    CHECK(c.dataset.count == 12);
    CHECK(c.data_dir == "/tmp/d");
    CHECK(c.out_dir == "/tmp/o");
}

TEST_CASE("unknown keys are named in the rejection") {
    CHECK_THROWS_WITH_AS(cfg::config_from_json({{"sede", 1}}),
                         doctest::Contains("unknown key 'sede'"), ConfigError);
    CHECK_THROWS_WITH_AS(cfg::config_from_json({{"scene", {{"heigth", 64}}}}),
                         doctest::Contains("scene.heigth"), ConfigError);
    CHECK_THROWS_WITH_AS(cfg::config_from_json({{"schedule", {{"epochs", 3}}}}),
                         doctest::Contains("schedule.epochs"), ConfigError);
}

TEST_CASE("wrong value types are rejected") {
    CHECK_THROWS_AS(cfg::config_from_json({{"seed", "abc"}}), ConfigError);
    CHECK_THROWS_AS(cfg::config_from_json({{"scene", {{"height", "tall"}}}}), ConfigError);
    CHECK_THROWS_AS(cfg::config_from_json({{"loss", {{"w_cd", "heavy"}}}}), ConfigError);
    CHECK_THROWS_AS(cfg::config_from_json({{"scene", 7}}), ConfigError);
}

TEST_CASE("explicit detector geometry must agree with the scene") {
    json doc = {{"scene", {{"height", 64}}}, {"detector", {{"height", 32}}}};
    CHECK_THROWS_AS(cfg::config_from_json(doc).validate(), ConfigError);

    json ok = {{"scene", {{"height", 32}, {"width", 32}}},
               {"detector", {{"height", 32}, {"width", 32}}}};
    auto c = cfg::config_from_json(ok);
    c.validate();
    CHECK(c.detector.height == 32);
}

TEST_CASE("loss weights may not reference heads the detector lacks") {
    json headless = {{"loss", {{"w_sem", 1.0}}}, {"detector", {{"with_semantic_head", false}}}};
    CHECK_THROWS_WITH_AS(cfg::config_from_json(headless).validate(),
                         doctest::Contains("with_semantic_head"), ConfigError);
    json no_proj = {{"loss", {{"w_clem", 0.2}}}, {"detector", {{"with_projector", false}}}};
    CHECK_THROWS_WITH_AS(cfg::config_from_json(no_proj).validate(),
                         doctest::Contains("with_projector"), ConfigError);

    // dropping the weights makes the reduced detector legal
    json reduced = {{"loss", {{"w_sem", 0.0}, {"w_clem", 0.0}, {"w_plm", 0.0}}},
                    {"detector", {{"with_semantic_head", false}, {"with_projector", false}}}};
    auto c = cfg::config_from_json(reduced);
    c.validate();
    CHECK_FALSE(c.detector.with_semantic_head);
    CHECK_FALSE(c.detector.with_projector);

    auto defaults = cfg::config_from_json(json::object());
    CHECK(defaults.detector.with_semantic_head);
    CHECK(defaults.detector.with_projector);
}

TEST_CASE("serialize-then-parse is the identity") {
    auto base = cfg::config_from_json(json::object());
    base.seed = 99;
    base.scene.stage_step = 0.25;
    base.schedule.cluster_k = 3;
    base.select.clem_variant = "union";
    base.loss.lambda_rr = 0.5;
    auto round = cfg::config_from_json(cfg::config_to_json(base));
    CHECK(round.seed == 99);
    CHECK(round.scene.stage_step == doctest::Approx(0.25));
    CHECK(round.schedule.cluster_k == 3);
    CHECK(round.select.clem_variant == "union");
    CHECK(round.loss.lambda_rr == doctest::Approx(0.5));
    CHECK(cfg::config_to_json(base) == cfg::config_to_json(round));
}

TEST_CASE("config files round-trip through disk") {
    auto c = cfg::config_from_json(json::object());
    c.seed = 7;
    c.dataset.count = 9;
    auto path = std::filesystem::temp_directory_path() / "phenocd-test-config.json";
    cfg::write_config(path, c);
    auto back = cfg::read_config(path);
    std::filesystem::remove(path);
    CHECK(back.seed == 7);
    CHECK(back.dataset.count == 9);
    CHECK(cfg::config_to_json(back) == cfg::config_to_json(c));
}

TEST_CASE("a missing config file is a configuration error") {
    CHECK_THROWS_AS(cfg::read_config("/nonexistent/nowhere.json"), ConfigError);
}

TEST_CASE("malformed json names the file") {
    auto path = std::filesystem::temp_directory_path() / "phenocd-test-bad.json";
    {
        std::ofstream out(path);
        out << "{ not json";
    }
    CHECK_THROWS_AS(cfg::read_config(path), ConfigError);
    std::filesystem::remove(path);
}

TEST_CASE("invalid section values fail validation with the field named") {
    auto c = cfg::config_from_json(json::object());
    c.schedule.batch_size = 0;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("batch_size"), ConfigError);

    auto c2 = cfg::config_from_json(json::object());
    c2.dataset.count = 2;  // cannot hold one sample per split
    CHECK_THROWS_AS(c2.validate(), ConfigError);

    auto c3 = cfg::config_from_json(json::object());
    c3.scene.stage_step = 0.9;
    CHECK_THROWS_WITH_AS(c3.validate(), doctest::Contains("stage_step"), ConfigError);
}

}  // TEST_SUITE("config")
