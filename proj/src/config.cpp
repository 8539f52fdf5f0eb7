#include "phenocd/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace phenocd::cfg {

using nlohmann::json;

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

void StageSchedule::validate() const {
    if (stage1_epochs < 1 || stage3_epochs < 1)
        throw ConfigError("schedule: stage1_epochs and stage3_epochs must be >= 1");
    if (batch_size < 2)
        throw ConfigError("schedule: batch_size must be >= 2 (batch-norm statistics)");
    if (val_period < 1) throw ConfigError("schedule: val_period must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("schedule: lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
        throw ConfigError("schedule: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("schedule: weight_decay must be >= 0");
    if (cluster_k < 1) throw ConfigError("schedule: cluster_k must be >= 1");
    if (harvest_cap < 1) throw ConfigError("schedule: harvest_cap must be >= 1");
}

void DataPlan::validate() const {
    if (count < 3) throw ConfigError("dataset: count must be >= 3 (one sample per split)");
    if (!(train_ratio > 0.0) || !(val_ratio > 0.0) || !(test_ratio > 0.0))
        throw ConfigError("dataset: split ratios must be > 0");
    if (std::fabs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
        throw ConfigError("dataset: split ratios must sum to 1");
}

void RunConfig::validate() const {
    scene.validate();
    detector.validate();
    loss.validate();
    select.validate();
    schedule.validate();
    dataset.validate();
    if (detector.height != scene.height || detector.width != scene.width)
        throw ConfigError("config: detector geometry " + std::to_string(detector.height) + "x" +
                          std::to_string(detector.width) + " must match scene geometry " +
                          std::to_string(scene.height) + "x" + std::to_string(scene.width));
    if (detector.num_classes != scene.num_classes)
        throw ConfigError("config: detector.num_classes (" + std::to_string(detector.num_classes) +
                          ") must match scene.num_classes (" + std::to_string(scene.num_classes) +
                          ")");
    if (loss.w_sem > 0.0 && !detector.with_semantic_head)
        throw ConfigError("config: loss.w_sem > 0 requires detector.with_semantic_head");
    if ((loss.w_clem > 0.0 || loss.w_plm > 0.0) && !detector.with_projector)
        throw ConfigError("config: contrastive loss weights require detector.with_projector");
}

scene::DatasetGenConfig RunConfig::gen_config() const {
    scene::DatasetGenConfig g;
    g.scene = scene;
    g.sample_count = dataset.count;
    g.train_ratio = dataset.train_ratio;
    g.val_ratio = dataset.val_ratio;
    g.test_ratio = dataset.test_ratio;
    return g;
}

// ---------------------------------------------------------------------------
// parsing
// ---------------------------------------------------------------------------

namespace {

// Reads doc[key] into out when present, with a key-path in every error.
template <typename T>
void get_field(const json& doc, const std::string& section, const char* key, T& out,
               std::set<std::string>& seen) {
    seen.insert(key);
    if (!doc.contains(key)) return;
    try {
        out = doc.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: bad value for '" + section + "." + std::string(key) + "'");
    }
}

void reject_unknown(const json& doc, const std::string& section,
                    const std::set<std::string>& seen) {
    for (const auto& item : doc.items())
        if (!seen.count(item.key()))
            throw ConfigError("config: unknown key '" +
                              (section.empty() ? item.key() : section + "." + item.key()) + "'");
}

json expect_object(const json& doc, const std::string& key) {
    if (!doc.at(key).is_object())
        throw ConfigError("config: '" + key + "' must be an object");
    return doc.at(key);
}

void parse_scene(const json& doc, scene::SceneConfig& s) {
    std::set<std::string> seen;
    get_field(doc, "scene", "height", s.height, seen);
    get_field(doc, "scene", "width", s.width, seen);
    get_field(doc, "scene", "num_classes", s.num_classes, seen);
    get_field(doc, "scene", "num_stages", s.num_stages, seen);
    get_field(doc, "scene", "blob_count_min", s.blob_count_min, seen);
    get_field(doc, "scene", "blob_count_max", s.blob_count_max, seen);
    get_field(doc, "scene", "change_fraction", s.change_fraction, seen);
    get_field(doc, "scene", "pseudo_change_fraction", s.pseudo_change_fraction, seen);
    get_field(doc, "scene", "stage_step", s.stage_step, seen);
    get_field(doc, "scene", "noise_sigma", s.noise_sigma, seen);
    get_field(doc, "scene", "seed", s.seed, seen);
    reject_unknown(doc, "scene", seen);
}

void parse_detector(const json& doc, model::DetectorConfig& d, const scene::SceneConfig& s) {
    // geometry and class count default to the scene's values
    d.height = s.height;
    d.width = s.width;
    d.num_classes = s.num_classes;
    std::set<std::string> seen;
    get_field(doc, "detector", "height", d.height, seen);
    get_field(doc, "detector", "width", d.width, seen);
    get_field(doc, "detector", "channels", d.channels, seen);
    get_field(doc, "detector", "attention_reduction", d.attention_reduction, seen);
    get_field(doc, "detector", "pyramid_scales", d.pyramid_scales, seen);
    get_field(doc, "detector", "head_hidden", d.head_hidden, seen);
    get_field(doc, "detector", "num_classes", d.num_classes, seen);
    get_field(doc, "detector", "fusion", d.fusion, seen);
    get_field(doc, "detector", "embed_dim", d.embed_dim, seen);
    get_field(doc, "detector", "proj_hidden", d.proj_hidden, seen);
    get_field(doc, "detector", "with_semantic_head", d.with_semantic_head, seen);
    get_field(doc, "detector", "with_projector", d.with_projector, seen);
    get_field(doc, "detector", "threshold", d.threshold, seen);
    reject_unknown(doc, "detector", seen);
}

void parse_loss(const json& doc, sel::LossWeights& w) {
    std::set<std::string> seen;
    get_field(doc, "loss", "w_cd", w.w_cd, seen);
    get_field(doc, "loss", "w_sem", w.w_sem, seen);
    get_field(doc, "loss", "w_clem", w.w_clem, seen);
    get_field(doc, "loss", "w_plm", w.w_plm, seen);
    get_field(doc, "loss", "lambda_pp", w.lambda_pp, seen);
    get_field(doc, "loss", "lambda_rr", w.lambda_rr, seen);
    get_field(doc, "loss", "lambda_pr", w.lambda_pr, seen);
    reject_unknown(doc, "loss", seen);
}

void parse_select(const json& doc, sel::SelectConfig& c) {
    std::set<std::string> seen;
    get_field(doc, "select", "anchors_per_class", c.anchors_per_class, seen);
    get_field(doc, "select", "positive_candidates", c.positive_candidates, seen);
    get_field(doc, "select", "negatives", c.negatives, seen);
    get_field(doc, "select", "min_region_pixels", c.min_region_pixels, seen);
    get_field(doc, "select", "tau", c.tau, seen);
    get_field(doc, "select", "plm_centroid_negatives", c.plm_centroid_negatives, seen);
    get_field(doc, "select", "plm_strict_table1", c.plm_strict_table1, seen);
    get_field(doc, "select", "clem_variant", c.clem_variant, seen);
    reject_unknown(doc, "select", seen);
}

void parse_schedule(const json& doc, StageSchedule& s) {
    std::set<std::string> seen;
    get_field(doc, "schedule", "stage1_epochs", s.stage1_epochs, seen);
    get_field(doc, "schedule", "stage3_epochs", s.stage3_epochs, seen);
    get_field(doc, "schedule", "batch_size", s.batch_size, seen);
    get_field(doc, "schedule", "val_period", s.val_period, seen);
    get_field(doc, "schedule", "lr", s.lr, seen);
    get_field(doc, "schedule", "momentum", s.momentum, seen);
    get_field(doc, "schedule", "weight_decay", s.weight_decay, seen);
    get_field(doc, "schedule", "cluster_k", s.cluster_k, seen);
    get_field(doc, "schedule", "harvest_cap", s.harvest_cap, seen);
    get_field(doc, "schedule", "stage3_fresh", s.stage3_fresh, seen);
    reject_unknown(doc, "schedule", seen);
}

void parse_dataset(const json& doc, DataPlan& d) {
    std::set<std::string> seen;
    get_field(doc, "dataset", "count", d.count, seen);
    get_field(doc, "dataset", "train_ratio", d.train_ratio, seen);
    get_field(doc, "dataset", "val_ratio", d.val_ratio, seen);
    get_field(doc, "dataset", "test_ratio", d.test_ratio, seen);
    reject_unknown(doc, "dataset", seen);
}

void parse_paths(const json& doc, RunConfig& c) {
    std::set<std::string> seen;
    get_field(doc, "paths", "data", c.data_dir, seen);
    get_field(doc, "paths", "out", c.out_dir, seen);
    reject_unknown(doc, "paths", seen);
}

}  // namespace

RunConfig config_from_json(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config: document must be a JSON object");
    RunConfig c;
    std::set<std::string> seen;
    get_field(doc, "", "seed", c.seed, seen);
    if (doc.contains("scene")) parse_scene(expect_object(doc, "scene"), c.scene);
    seen.insert("scene");
    // the detector parser needs the scene geometry for its dynamic defaults
    if (doc.contains("detector"))
        parse_detector(expect_object(doc, "detector"), c.detector, c.scene);
    else
        parse_detector(json::object(), c.detector, c.scene);
    seen.insert("detector");
    if (doc.contains("loss")) parse_loss(expect_object(doc, "loss"), c.loss);
    seen.insert("loss");
    if (doc.contains("select")) parse_select(expect_object(doc, "select"), c.select);
    seen.insert("select");
    if (doc.contains("schedule")) parse_schedule(expect_object(doc, "schedule"), c.schedule);
    seen.insert("schedule");
    if (doc.contains("dataset")) parse_dataset(expect_object(doc, "dataset"), c.dataset);
    seen.insert("dataset");
    if (doc.contains("paths")) parse_paths(expect_object(doc, "paths"), c);
    seen.insert("paths");
    reject_unknown(doc, "", seen);
    c.validate();
    return c;
}

json config_to_json(const RunConfig& c) {
    json doc;
    doc["seed"] = c.seed;
    doc["scene"] = {{"height", c.scene.height},
                    {"width", c.scene.width},
                    {"num_classes", c.scene.num_classes},
                    {"num_stages", c.scene.num_stages},
                    {"blob_count_min", c.scene.blob_count_min},
                    {"blob_count_max", c.scene.blob_count_max},
                    {"change_fraction", c.scene.change_fraction},
                    {"pseudo_change_fraction", c.scene.pseudo_change_fraction},
                    {"stage_step", c.scene.stage_step},
                    {"noise_sigma", c.scene.noise_sigma},
                    {"seed", c.scene.seed}};
    doc["detector"] = {{"height", c.detector.height},
                       {"width", c.detector.width},
                       {"channels", c.detector.channels},
                       {"attention_reduction", c.detector.attention_reduction},
                       {"pyramid_scales", c.detector.pyramid_scales},
                       {"head_hidden", c.detector.head_hidden},
                       {"num_classes", c.detector.num_classes},
                       {"fusion", c.detector.fusion},
                       {"embed_dim", c.detector.embed_dim},
                       {"proj_hidden", c.detector.proj_hidden},
                       {"with_semantic_head", c.detector.with_semantic_head},
                       {"with_projector", c.detector.with_projector},
                       {"threshold", c.detector.threshold}};
    doc["loss"] = {{"w_cd", c.loss.w_cd},         {"w_sem", c.loss.w_sem},
                   {"w_clem", c.loss.w_clem},     {"w_plm", c.loss.w_plm},
                   {"lambda_pp", c.loss.lambda_pp}, {"lambda_rr", c.loss.lambda_rr},
                   {"lambda_pr", c.loss.lambda_pr}};
    doc["select"] = {{"anchors_per_class", c.select.anchors_per_class},
                     {"positive_candidates", c.select.positive_candidates},
                     {"negatives", c.select.negatives},
                     {"min_region_pixels", c.select.min_region_pixels},
                     {"tau", c.select.tau},
                     {"plm_centroid_negatives", c.select.plm_centroid_negatives},
                     {"plm_strict_table1", c.select.plm_strict_table1},
                     {"clem_variant", c.select.clem_variant}};
    doc["schedule"] = {{"stage1_epochs", c.schedule.stage1_epochs},
                       {"stage3_epochs", c.schedule.stage3_epochs},
                       {"batch_size", c.schedule.batch_size},
                       {"val_period", c.schedule.val_period},
                       {"lr", c.schedule.lr},
                       {"momentum", c.schedule.momentum},
                       {"weight_decay", c.schedule.weight_decay},
                       {"cluster_k", c.schedule.cluster_k},
                       {"harvest_cap", c.schedule.harvest_cap},
                       {"stage3_fresh", c.schedule.stage3_fresh}};
    doc["dataset"] = {{"count", c.dataset.count},
                      {"train_ratio", c.dataset.train_ratio},
                      {"val_ratio", c.dataset.val_ratio},
                      {"test_ratio", c.dataset.test_ratio}};
    doc["paths"] = {{"data", c.data_dir}, {"out", c.out_dir}};
    return doc;
}

RunConfig read_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ConfigError("malformed config " + path.string() + ": " + e.what());
    }
    return config_from_json(doc);
}

void write_config(const std::filesystem::path& path, const RunConfig& config) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IngestError("cannot open for writing: " + path.string());
    out << config_to_json(config).dump(2) << "\n";
}

}  // namespace phenocd::cfg
