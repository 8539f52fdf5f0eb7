// Command-line entry point: dataset generation, staged training, evaluation,
// prediction, the fusion/loss ablation grid, and the numeric self-test.
//
// Exit codes: 0 success, 1 validation/config error, 2 runtime/numeric
// failure, 3 self-test failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "phenocd/checkpoint.hpp"
#include "phenocd/config.hpp"
#include "phenocd/png_io.hpp"
#include "phenocd/train.hpp"
#include "phenocd/verify.hpp"

namespace fs = std::filesystem;
using namespace phenocd;

namespace {

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

cfg::RunConfig load_config(const std::string& config_path) {
    if (config_path.empty()) return cfg::RunConfig{};
    return cfg::read_config(config_path);
}

// The best stage-3 checkpoint when present, else the best stage-1 checkpoint.
fs::path best_checkpoint(const fs::path& run_dir) {
    for (const char* stage : {"stage3", "stage1"}) {
        fs::path dir = run_dir / stage / "ckpt-best";
        if (fs::exists(dir / "manifest.json")) return dir;
    }
    throw ConfigError("run directory '" + run_dir.string() +
                      "' has no checkpoint; train first");
}

cfg::RunConfig run_config(const fs::path& run_dir) {
    fs::path path = run_dir / "config.json";
    if (!fs::exists(path))
        throw ConfigError("run directory '" + run_dir.string() + "' has no config.json");
    return cfg::read_config(path);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("cannot write '" + path.string() + "'");
    out << text;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& config_path, std::string out_dir, int count,
                 int64_t seed) {
    cfg::RunConfig config = load_config(config_path);
    if (count > 0) config.dataset.count = count;
    if (seed >= 0) config.scene.seed = static_cast<uint64_t>(seed);
    if (out_dir.empty()) out_dir = config.data_dir;
    if (out_dir.empty())
        throw ConfigError("gen-data needs --out or a paths.data entry in the config");
    config.validate();
    scene::generate_dataset(config.gen_config(), out_dir);
    std::cout << "wrote " << config.dataset.count << " samples to " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, std::string data_dir, std::string out_dir,
              const std::string& stage) {
    cfg::RunConfig config = load_config(config_path);
    if (!data_dir.empty()) config.data_dir = data_dir;
    if (!out_dir.empty()) config.out_dir = out_dir;
    if (config.data_dir.empty())
        throw ConfigError("train needs --data or a paths.data entry in the config");
    if (config.out_dir.empty())
        throw ConfigError("train needs --out or a paths.out entry in the config");
    config.validate();

    scene::Dataset data = scene::read_dataset(config.data_dir);
    fs::path run_dir = config.out_dir;
    fs::create_directories(run_dir);
    cfg::write_config(run_dir / "config.json", config);

    if (stage == "all") {
        train::run_all(config, data, run_dir);
    } else if (stage == "1") {
        train::run_stage1(config, data, run_dir);
    } else if (stage == "2") {
        train::run_stage2(config, data, run_dir);
    } else {
        train::run_stage3(config, data, run_dir);
    }
    std::cout << "run directory: " << run_dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& run, std::string data_dir, const std::string& split) {
    fs::path run_dir = run;
    cfg::RunConfig config = run_config(run_dir);
    if (data_dir.empty()) data_dir = config.data_dir;
    if (data_dir.empty())
        throw ConfigError("eval needs --data or a paths.data entry in the run config");

    scene::Dataset data = scene::read_dataset(data_dir);
    metrics::MetricsReport report =
        train::evaluate_checkpoint(config, data, best_checkpoint(run_dir), split);
    std::string doc = metrics::to_json(report);
    write_text(run_dir / ("metrics-" + split + ".json"), doc + "\n");
    std::cout << doc << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

nn::Tensor<float> load_image(const fs::path& path) {
    img::ImageU8 im = img::read_png(path);
    if (im.channels != 3)
        throw IngestError("'" + path.string() + "' must be an RGB PNG, got " +
                          std::to_string(im.channels) + " channels");
    return img::from_rgb8<float>(im);
}

int cmd_predict(const std::string& run, const std::string& t1, const std::string& t2,
                const std::string& out_dir) {
    fs::path run_dir = run;
    cfg::RunConfig config = run_config(run_dir);

    nn::Tensor<float> img1 = load_image(t1);
    nn::Tensor<float> img2 = load_image(t2);
    if (img1.shape != img2.shape)
        throw IngestError("--t1 and --t2 extents differ");
    int h = img1.shape[1], w = img1.shape[2];
    if (h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0)
        throw IngestError("images must be at least 16x16 with extents divisible by 4, got " +
                          std::to_string(h) + "x" + std::to_string(w));

    model::Detector<float> net(config.detector, config.seed);
    nn::load_checkpoint(best_checkpoint(run_dir), net.params);
    nn::Tensor<float> prob = train::predict_change(net, img1, img2);

    nn::Tensor<int> change({h, w});
    img::ImageU8 gray;
    gray.width = w;
    gray.height = h;
    gray.channels = 1;
    gray.pixels.resize(static_cast<size_t>(h) * w);
    for (int64_t i = 0; i < prob.numel(); ++i) {
        change.data[i] = prob.data[i] >= config.detector.threshold ? 1 : 0;
        gray.pixels[i] = img::quantize_unit(prob.data[i]);
    }

    fs::create_directories(out_dir);
    img::write_png(fs::path(out_dir) / "change.png", img::labels_to_gray(change));
    img::write_png(fs::path(out_dir) / "probability.png", gray);
    std::cout << "wrote change.png and probability.png to " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct Variant {
    std::string fusion;  // concat | subtract | dam
    std::string losses;  // cdcm | cdcm+scm | cdcm+scm+clem | cdcm+scm+clem+plm
    std::string id() const { return fusion + ":" + losses; }
    std::string dir_name() const {
        std::string name = fusion + "-" + losses;
        for (char& c : name)
            if (c == '+') c = '_';
        return name;
    }
};

std::vector<Variant> full_grid() {
    std::vector<Variant> grid;
    for (const char* fusion : {"concat", "subtract", "attention"})
        for (const char* losses :
             {"cdcm", "cdcm+scm", "cdcm+scm+clem", "cdcm+scm+clem+plm"})
            grid.push_back({fusion, losses});
    return grid;
}

// Applies a variant onto the base config: fusion mode plus zeroed weights and
// dropped heads for the losses outside the variant's set.
cfg::RunConfig variant_config(const cfg::RunConfig& base, const Variant& v) {
    cfg::RunConfig c = base;
    c.detector.fusion = v.fusion;
    bool scm = v.losses.find("scm") != std::string::npos;
    bool clem = v.losses.find("clem") != std::string::npos;
    bool plm = v.losses.find("plm") != std::string::npos;
    if (!scm) c.loss.w_sem = 0.0;
    if (!clem) c.loss.w_clem = 0.0;
    if (!plm) c.loss.w_plm = 0.0;
    c.detector.with_semantic_head = c.loss.w_sem > 0.0;
    c.detector.with_projector = c.loss.w_clem > 0.0 || c.loss.w_plm > 0.0;
    return c;
}

int cmd_ablate(const std::string& config_path, std::string data_dir, std::string out_dir,
               const std::vector<std::string>& variant_ids) {
    cfg::RunConfig base = load_config(config_path);
    if (!data_dir.empty()) base.data_dir = data_dir;
    if (!out_dir.empty()) base.out_dir = out_dir;
    if (base.data_dir.empty())
        throw ConfigError("ablate needs --data or a paths.data entry in the config");
    if (base.out_dir.empty())
        throw ConfigError("ablate needs --out or a paths.out entry in the config");

    std::vector<Variant> grid = full_grid();
    std::vector<Variant> chosen;
    if (variant_ids.empty()) {
        chosen = grid;
    } else {
        for (const std::string& id : variant_ids) {
            auto hit = std::find_if(grid.begin(), grid.end(),
                                    [&](const Variant& v) { return v.id() == id; });
            if (hit == grid.end()) {
                std::string valid;
                for (const Variant& v : grid) valid += "\n  " + v.id();
                throw ConfigError("unknown variant '" + id + "'; valid variants:" + valid);
            }
            chosen.push_back(*hit);
        }
    }
    // every variant config must be sound before any training starts
    std::vector<cfg::RunConfig> configs;
    for (const Variant& v : chosen) {
        configs.push_back(variant_config(base, v));
        configs.back().validate();
    }

    scene::Dataset data = scene::read_dataset(base.data_dir);
    fs::path root = base.out_dir;
    fs::create_directories(root);

    nlohmann::ordered_json table;
    table["variants"] = nlohmann::json::array();
    for (size_t i = 0; i < chosen.size(); ++i) {
        const Variant& v = chosen[i];
        fs::path run_dir = root / v.dir_name();
        std::cout << "[" << i + 1 << "/" << chosen.size() << "] " << v.id() << "\n";
        fs::create_directories(run_dir);
        cfg::write_config(run_dir / "config.json", configs[i]);
        train::run_all(configs[i], data, run_dir);
        metrics::MetricsReport report =
            train::evaluate_checkpoint(configs[i], data, best_checkpoint(run_dir), "test");
        write_text(run_dir / "metrics-test.json", metrics::to_json(report) + "\n");

        nlohmann::ordered_json row;
        row["fusion"] = v.fusion;
        row["losses"] = v.losses;
        row["run_dir"] = v.dir_name();
        row["test"] = nlohmann::ordered_json::parse(metrics::to_json(report));
        table["variants"].push_back(row);
    }
    write_text(root / "ablation.json", table.dump(2) + "\n");
    std::cout << "wrote " << (root / "ablation.json").string() << "\n";
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// main
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
    CLI::App app{"phenology-aware change detection"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, run_dir, split = "test";
    std::string stage = "all", t1, t2;
    std::vector<std::string> variant_ids;
    int count = 0;
    int64_t seed = -1;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--config", config_path, "config JSON")->check(CLI::ExistingFile);
    gen->add_option("--out", out_dir, "dataset directory");
    gen->add_option("--count", count, "sample count override")->check(CLI::PositiveNumber);
    gen->add_option("--seed", seed, "scene seed override")->check(CLI::NonNegativeNumber);

    CLI::App* train_cmd = app.add_subcommand("train", "run the training stages");
    train_cmd->add_option("--config", config_path, "config JSON")->check(CLI::ExistingFile);
    train_cmd->add_option("--data", data_dir, "dataset directory");
    train_cmd->add_option("--out", out_dir, "run directory");
    train_cmd->add_option("--stage", stage, "1, 2, 3, or all")
        ->check(CLI::IsMember({"1", "2", "3", "all"}));

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate the best checkpoint");
    eval_cmd->add_option("--run", run_dir, "run directory")->required();
    eval_cmd->add_option("--data", data_dir, "dataset directory override");
    eval_cmd->add_option("--split", split, "train, val, or test")
        ->check(CLI::IsMember({"train", "val", "test"}));

    CLI::App* predict_cmd = app.add_subcommand("predict", "predict change for one pair");
    predict_cmd->add_option("--run", run_dir, "run directory")->required();
    predict_cmd->add_option("--t1", t1, "first image PNG")->required()
        ->check(CLI::ExistingFile);
    predict_cmd->add_option("--t2", t2, "second image PNG")->required()
        ->check(CLI::ExistingFile);
    predict_cmd->add_option("--out", out_dir, "output directory")->required();

    CLI::App* ablate_cmd = app.add_subcommand("ablate", "train the fusion/loss grid");
    ablate_cmd->add_option("--config", config_path, "config JSON")->check(CLI::ExistingFile);
    ablate_cmd->add_option("--data", data_dir, "dataset directory");
    ablate_cmd->add_option("--out", out_dir, "output root directory");
    ablate_cmd->add_option("--variants", variant_ids,
                           "subset of fusion:losses ids (default: full grid)")
        ->delimiter(',');

    app.add_subcommand("selftest", "run oracle and gradient checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_dir, count, seed);
        if (train_cmd->parsed()) return cmd_train(config_path, data_dir, out_dir, stage);
        if (eval_cmd->parsed()) return cmd_eval(run_dir, data_dir, split);
        if (predict_cmd->parsed()) return cmd_predict(run_dir, t1, t2, out_dir);
        if (ablate_cmd->parsed()) return cmd_ablate(config_path, data_dir, out_dir, variant_ids);
        return verify::run_selftest(std::cout) ? 0 : 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
