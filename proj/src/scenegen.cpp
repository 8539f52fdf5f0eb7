#include "phenocd/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "phenocd/png_io.hpp"

namespace phenocd::scene {

using nlohmann::json;

// ---------------------------------------------------------------------------
// palette
// ---------------------------------------------------------------------------

namespace {

struct BaseEntry {
    const char* name;
    std::array<double, 3> base;
    std::array<double, 3> dir;  // unit stage direction
};

// Base signatures sit well inside [0,1] so stage offsets rarely clamp. The
// stage swing (+-1.5 * stage_step along dir) is comparable to between-class
// distances on purpose: appearance alone must not separate a stage flip from
// a class change. Stage directions are chromatic — mostly orthogonal to the
// base color vector — so stages shift hue rather than brightness; downstream
// phenology clustering runs on unit-normalized embeddings, which only see
// the angular part of appearance.
constexpr BaseEntry kBaseTable[] = {
    {"grass",  {0.30, 0.55, 0.25}, {0.896, -0.393, -0.210}},
    {"shrub",  {0.35, 0.45, 0.20}, {0.440, -0.620, 0.650}},
    {"built",  {0.60, 0.60, 0.62}, {0.707, 0.000, -0.707}},
    {"bare",   {0.65, 0.55, 0.40}, {-0.408, 0.816, -0.408}},
    {"crop",   {0.45, 0.60, 0.30}, {0.801, -0.534, 0.267}},
    {"tree",   {0.15, 0.40, 0.20}, {0.751, -0.612, 0.254}},
    {"water",  {0.10, 0.25, 0.50}, {0.000, 0.894, -0.447}},
    {"paddy",  {0.35, 0.50, 0.45}, {-0.787, 0.000, 0.617}},
    {"fallow", {0.55, 0.45, 0.30}, {0.423, 0.113, -0.899}},
    {"other",  {0.50, 0.35, 0.50}, {-0.577, 0.577, 0.577}},
};
constexpr int kMaxClasses = static_cast<int>(std::size(kBaseTable));

}  // namespace

void ClassPalette::validate() const {
    if (num_stages < 2) throw ConfigError("palette: num_stages must be >= 2");
    if (classes.size() < 2) throw ConfigError("palette: need at least 2 classes");
    for (size_t i = 0; i < classes.size(); ++i) {
        const auto& c = classes[i];
        if (c.id != static_cast<int>(i))
            throw ConfigError("palette: class ids must be contiguous from 0, got " +
                              std::to_string(c.id) + " at position " + std::to_string(i));
        if (c.name.empty()) throw ConfigError("palette: class " + std::to_string(c.id) +
                                              " has an empty name");
        if (c.stage_deltas.size() != static_cast<size_t>(num_stages))
            throw ConfigError("palette: class " + c.name + " has " +
                              std::to_string(c.stage_deltas.size()) + " stage deltas, want " +
                              std::to_string(num_stages));
        for (double v : c.base)
            if (v < 0.0 || v > 1.0)
                throw ConfigError("palette: class " + c.name + " base outside [0,1]");
    }
}

ClassPalette default_palette(int num_classes, int num_stages, double stage_step) {
    if (num_classes < 2 || num_classes > kMaxClasses)
        throw ConfigError("default_palette: num_classes must be in [2," +
                          std::to_string(kMaxClasses) + "], got " + std::to_string(num_classes));
    if (num_stages < 2) throw ConfigError("default_palette: num_stages must be >= 2");
    if (stage_step <= 0.0 || stage_step > 0.5)
        throw ConfigError("default_palette: stage_step must be in (0,0.5]");
    ClassPalette p;
    p.num_stages = num_stages;
    for (int c = 0; c < num_classes; ++c) {
        ClassDef def;
        def.id = c;
        def.name = kBaseTable[c].name;
        def.base = kBaseTable[c].base;
        for (int s = 0; s < num_stages; ++s) {
            double t = (s - (num_stages - 1) / 2.0) * stage_step;
            def.stage_deltas.push_back({kBaseTable[c].dir[0] * t, kBaseTable[c].dir[1] * t,
                                        kBaseTable[c].dir[2] * t});
        }
        p.classes.push_back(std::move(def));
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// scene generation
// ---------------------------------------------------------------------------

void SceneConfig::validate() const {
    if (height < 16) throw ConfigError("scene config: height must be >= 16");
    if (width < 16) throw ConfigError("scene config: width must be >= 16");
    if (num_classes < 2) throw ConfigError("scene config: num_classes must be >= 2");
    if (num_stages < 2) throw ConfigError("scene config: num_stages must be >= 2");
    if (blob_count_min < 1 || blob_count_max < blob_count_min)
        throw ConfigError("scene config: blob_count range invalid");
    if (change_fraction < 0.0 || change_fraction > 0.5)
        throw ConfigError("scene config: change_fraction must be in [0,0.5]");
    if (pseudo_change_fraction < 0.0 || pseudo_change_fraction > 1.0)
        throw ConfigError("scene config: pseudo_change_fraction must be in [0,1]");
    if (stage_step <= 0.0 || stage_step > 0.5)
        throw ConfigError("scene config: stage_step must be in (0,0.5]");
    if (noise_sigma < 0.0 || noise_sigma > 0.2)
        throw ConfigError("scene config: noise_sigma must be in [0,0.2]");
}

namespace {

enum : uint64_t {
    kStreamCells = 1,
    kStreamClasses = 2,
    kStreamStages = 3,
    kStreamDiscs = 4,
    kStreamPseudo = 5,
    kStreamNoise1 = 6,
    kStreamNoise2 = 7,
};

nn::Tensor<float> render_image(const nn::Tensor<int>& sem, const nn::Tensor<int>& stage,
                               const ClassPalette& palette, double sigma, Rng& noise) {
    int h = sem.shape[0], w = sem.shape[1];
    nn::Tensor<float> img = nn::Tensor<float>::zeros({3, h, w});
    int64_t plane = static_cast<int64_t>(h) * w;
    for (int64_t i = 0; i < plane; ++i) {
        const auto& def = palette.classes[sem.data[i]];
        const auto& delta = def.stage_deltas[stage.data[i]];
        for (int c = 0; c < 3; ++c) {
            double v = def.base[c] + delta[c] + noise.normal(0.0, sigma);
            img.data[c * plane + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return img;
}

}  // namespace

SceneSample generate_scene(const SceneConfig& config, const ClassPalette& palette,
                           const std::string& sample_id) {
    config.validate();
    palette.validate();
    if (palette.num_classes() < config.num_classes)
        throw ConfigError("scene config: num_classes " + std::to_string(config.num_classes) +
                          " exceeds palette size " + std::to_string(palette.num_classes()));
    if (palette.num_stages < config.num_stages)
        throw ConfigError("scene config: num_stages " + std::to_string(config.num_stages) +
                          " exceeds palette stages " + std::to_string(palette.num_stages));

    const int h = config.height, w = config.width;
    const int64_t npix = static_cast<int64_t>(h) * w;
    Rng root(config.seed);

    // Voronoi cells: nearest seed point by squared distance, ties to the
    // lowest cell index.
    Rng cell_rng = root.fork(kStreamCells);
    int blob_count = cell_rng.uniform_int(config.blob_count_min, config.blob_count_max);
    std::vector<std::pair<int, int>> seeds(blob_count);
    for (auto& s : seeds) s = {cell_rng.uniform_int(0, h - 1), cell_rng.uniform_int(0, w - 1)};
    std::vector<int> cell(npix);
    std::vector<std::vector<int64_t>> cell_pixels(blob_count);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int64_t best = -1;
            int arg = 0;
            for (int i = 0; i < blob_count; ++i) {
                int64_t dy = y - seeds[i].first, dx = x - seeds[i].second;
                int64_t d = dy * dy + dx * dx;
                if (best < 0 || d < best) {
                    best = d;
                    arg = i;
                }
            }
            cell[y * static_cast<int64_t>(w) + x] = arg;
            cell_pixels[arg].push_back(y * static_cast<int64_t>(w) + x);
        }

    Rng class_rng = root.fork(kStreamClasses);
    std::vector<int> cell_class(blob_count);
    for (auto& c : cell_class) c = class_rng.uniform_int(0, config.num_classes - 1);

    Rng stage_rng = root.fork(kStreamStages);
    std::vector<int> cell_stage1(blob_count);
    for (auto& s : cell_stage1) s = stage_rng.uniform_int(0, config.num_stages - 1);

    SceneSample out;
    out.sample_id = sample_id;
    out.sem_t1 = nn::Tensor<int>::zeros({h, w});
    out.stage_t1 = nn::Tensor<int>::zeros({h, w});
    for (int64_t i = 0; i < npix; ++i) {
        out.sem_t1.data[i] = cell_class[cell[i]];
        out.stage_t1.data[i] = cell_stage1[cell[i]];
    }
    out.sem_t2 = out.sem_t1;
    out.stage_t2 = out.stage_t1;

    // True changes: painted discs of a new class with a fresh stage. Radius
    // is capped by the remaining pixel budget so the measured fraction stays
    // near the target.
    if (config.change_fraction > 0.0) {
        Rng disc_rng = root.fork(kStreamDiscs);
        const int64_t target = static_cast<int64_t>(config.change_fraction * npix);
        int64_t changed = 0;
        for (int iter = 0; iter < 500 && changed < static_cast<int64_t>(0.95 * target); ++iter) {
            int64_t remaining = target - changed;
            int rmax = static_cast<int>(std::sqrt(static_cast<double>(remaining) / 3.14159265));
            rmax = std::min(rmax, std::min(h, w) / 3);
            int r = std::max(2, std::min(rmax, 2 + disc_rng.uniform_int(0, std::max(0, rmax - 2))));
            int cy = disc_rng.uniform_int(0, h - 1);
            int cx = disc_rng.uniform_int(0, w - 1);
            // majority class under the disc decides what counts as "new"
            std::vector<int64_t> votes(config.num_classes, 0);
            for (int y = std::max(0, cy - r); y <= std::min(h - 1, cy + r); ++y)
                for (int x = std::max(0, cx - r); x <= std::min(w - 1, cx + r); ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
                        ++votes[out.sem_t2.data[y * static_cast<int64_t>(w) + x]];
            int majority = static_cast<int>(std::max_element(votes.begin(), votes.end()) -
                                            votes.begin());
            int new_class = disc_rng.uniform_int(0, config.num_classes - 2);
            if (new_class >= majority) ++new_class;
            int new_stage = disc_rng.uniform_int(0, config.num_stages - 1);
            for (int y = std::max(0, cy - r); y <= std::min(h - 1, cy + r); ++y)
                for (int x = std::max(0, cx - r); x <= std::min(w - 1, cx + r); ++x) {
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) > r * r) continue;
                    int64_t i = y * static_cast<int64_t>(w) + x;
                    bool was_changed = out.sem_t2.data[i] != out.sem_t1.data[i];
                    out.sem_t2.data[i] = new_class;
                    out.stage_t2.data[i] = new_stage;
                    bool now_changed = out.sem_t2.data[i] != out.sem_t1.data[i];
                    changed += static_cast<int64_t>(now_changed) -
                               static_cast<int64_t>(was_changed);
                }
        }
    }

    // Pseudo-changes: flip whole cells to a different stage at t2 until the
    // target fraction of unchanged pixels differs in stage. At least one cell
    // is flipped whenever the fraction is positive.
    if (config.pseudo_change_fraction > 0.0) {
        int64_t unchanged = 0, pseudo = 0;
        for (int64_t i = 0; i < npix; ++i) {
            if (out.sem_t1.data[i] != out.sem_t2.data[i]) continue;
            ++unchanged;
            if (out.stage_t1.data[i] != out.stage_t2.data[i]) ++pseudo;
        }
        const int64_t target = static_cast<int64_t>(config.pseudo_change_fraction * unchanged);
        Rng pseudo_rng = root.fork(kStreamPseudo);
        std::vector<int> order(blob_count);
        for (int i = 0; i < blob_count; ++i) order[i] = i;
        pseudo_rng.shuffle(order);
        bool flipped_any = false;
        for (int ci : order) {
            if (pseudo >= target && (flipped_any || pseudo > 0)) break;
            int old_stage = cell_stage1[ci];
            int new_stage = pseudo_rng.uniform_int(0, config.num_stages - 2);
            if (new_stage >= old_stage) ++new_stage;
            bool flipped_here = false;
            for (int64_t i : cell_pixels[ci]) {
                if (out.sem_t1.data[i] != out.sem_t2.data[i]) continue;  // disc took it
                if (out.stage_t2.data[i] != out.stage_t1.data[i]) continue;  // disc stage
                out.stage_t2.data[i] = new_stage;
                ++pseudo;
                flipped_here = true;
            }
            flipped_any = flipped_any || flipped_here;
        }
    }

    out.change = nn::Tensor<int>::zeros({h, w});
    for (int64_t i = 0; i < npix; ++i)
        out.change.data[i] = out.sem_t1.data[i] != out.sem_t2.data[i] ? 1 : 0;

    Rng noise1 = root.fork(kStreamNoise1);
    Rng noise2 = root.fork(kStreamNoise2);
    out.image_t1 = render_image(out.sem_t1, out.stage_t1, palette, config.noise_sigma, noise1);
    out.image_t2 = render_image(out.sem_t2, out.stage_t2, palette, config.noise_sigma, noise2);
    return out;
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

Splits split_ids(std::vector<std::string> ids, double train_ratio, double val_ratio,
                 double test_ratio, uint64_t seed) {
    if (train_ratio <= 0.0 || val_ratio <= 0.0 || test_ratio <= 0.0)
        throw ConfigError("split ratios must be positive");
    if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1");
    if (ids.size() < 3) throw ConfigError("need at least 3 samples to split, got " +
                                          std::to_string(ids.size()));
    std::sort(ids.begin(), ids.end());
    Rng rng(seed);
    rng.shuffle(ids);
    size_t n = ids.size();
    // floor arithmetic, but never leave a split empty: every split must hold
    // at least one sample so evaluation stays well-defined
    size_t n_val = std::max<size_t>(1, static_cast<size_t>(n * val_ratio));
    size_t n_test = std::max<size_t>(1, static_cast<size_t>(n * test_ratio));
    size_t n_train = n - n_val - n_test;
    Splits s;
    s.train.assign(ids.begin(), ids.begin() + n_train);
    s.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
    s.test.assign(ids.begin() + n_train + n_val, ids.end());
    return s;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

namespace {

json load_json_file(const std::filesystem::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw IngestError(std::string(what) + ": cannot open " + path.string());
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw IngestError(std::string(what) + ": malformed JSON in " + path.string() + ": " +
                          e.what());
    }
}

void save_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IngestError("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace

void write_palette(const std::filesystem::path& path, const ClassPalette& palette) {
    palette.validate();
    json j;
    j["num_stages"] = palette.num_stages;
    j["classes"] = json::array();
    for (const auto& c : palette.classes)
        j["classes"].push_back(
            {{"id", c.id}, {"name", c.name}, {"base", c.base}, {"stage_deltas", c.stage_deltas}});
    save_json_file(path, j);
}

ClassPalette read_palette(const std::filesystem::path& path) {
    json j = load_json_file(path, "palette");
    ClassPalette p;
    try {
        p.num_stages = j.at("num_stages").get<int>();
        for (const auto& cj : j.at("classes")) {
            ClassDef c;
            c.id = cj.at("id").get<int>();
            c.name = cj.at("name").get<std::string>();
            c.base = cj.at("base").get<std::array<double, 3>>();
            c.stage_deltas = cj.at("stage_deltas").get<std::vector<std::array<double, 3>>>();
            p.classes.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw IngestError("palette: bad field in " + path.string() + ": " + e.what());
    }
    try {
        p.validate();
    } catch (const ConfigError& e) {
        throw IngestError("palette: " + std::string(e.what()) + " in " + path.string());
    }
    return p;
}

void write_sample(const std::filesystem::path& root, const SceneSample& sample) {
    auto dir = root / "samples" / sample.sample_id;
    std::filesystem::create_directories(dir);
    img::write_png(dir / "t1.png", img::to_rgb8(sample.image_t1));
    img::write_png(dir / "t2.png", img::to_rgb8(sample.image_t2));
    img::write_png(dir / "sem1.png", img::labels_to_gray(sample.sem_t1));
    img::write_png(dir / "sem2.png", img::labels_to_gray(sample.sem_t2));
    img::write_png(dir / "change.png", img::labels_to_gray(sample.change));
    img::write_png(dir / "stage1.png", img::labels_to_gray(sample.stage_t1));
    img::write_png(dir / "stage2.png", img::labels_to_gray(sample.stage_t2));

    int64_t npix = sample.change.numel();
    int64_t changed = 0, unchanged_stage_diff = 0;
    for (int64_t i = 0; i < npix; ++i) {
        if (sample.change.data[i])
            ++changed;
        else if (sample.stage_t1.data[i] != sample.stage_t2.data[i])
            ++unchanged_stage_diff;
    }
    json meta;
    meta["sample_id"] = sample.sample_id;
    meta["height"] = sample.sem_t1.shape[0];
    meta["width"] = sample.sem_t1.shape[1];
    meta["changed_fraction"] = static_cast<double>(changed) / static_cast<double>(npix);
    meta["pseudo_changed_fraction"] =
        npix == changed ? 0.0
                        : static_cast<double>(unchanged_stage_diff) /
                              static_cast<double>(npix - changed);
    std::vector<int> stages1, stages2;
    for (int s = 0; s < 256; ++s) stages1.push_back(0), stages2.push_back(0);
    for (int64_t i = 0; i < npix; ++i) {
        stages1[sample.stage_t1.data[i]] = 1;
        stages2[sample.stage_t2.data[i]] = 1;
    }
    json s1 = json::array(), s2 = json::array();
    for (int s = 0; s < 256; ++s) {
        if (stages1[s]) s1.push_back(s);
        if (stages2[s]) s2.push_back(s);
    }
    meta["stages_t1"] = s1;
    meta["stages_t2"] = s2;
    save_json_file(dir / "meta.json", meta);
}

SceneSample read_sample(const std::filesystem::path& root, const std::string& sample_id,
                        const ClassPalette& palette) {
    auto dir = root / "samples" / sample_id;
    auto fail = [&](const std::string& msg) {
        throw IngestError("sample " + sample_id + ": " + msg);
    };
    SceneSample s;
    s.sample_id = sample_id;
    try {
        s.image_t1 = img::from_rgb8<float>(img::read_png(dir / "t1.png"));
        s.image_t2 = img::from_rgb8<float>(img::read_png(dir / "t2.png"));
        s.sem_t1 = img::gray_to_labels(img::read_png(dir / "sem1.png"), palette.num_classes(),
                                       "sem1");
        s.sem_t2 = img::gray_to_labels(img::read_png(dir / "sem2.png"), palette.num_classes(),
                                       "sem2");
        s.change = img::gray_to_labels(img::read_png(dir / "change.png"), 2, "change");
        s.stage_t1 = img::gray_to_labels(img::read_png(dir / "stage1.png"), palette.num_stages,
                                         "stage1");
        s.stage_t2 = img::gray_to_labels(img::read_png(dir / "stage2.png"), palette.num_stages,
                                         "stage2");
    } catch (const IngestError& e) {
        fail(e.what());
    }
    const auto& hw = s.sem_t1.shape;
    if (s.image_t1.shape[1] != hw[0] || s.image_t1.shape[2] != hw[1])
        fail("t1.png dimensions do not match sem1.png");
    for (const auto* m : {&s.sem_t2, &s.change, &s.stage_t1, &s.stage_t2})
        if (m->shape != hw) fail("map dimensions disagree");
    if (s.image_t2.shape != s.image_t1.shape) fail("t2.png dimensions do not match t1.png");
    for (int64_t i = 0; i < s.change.numel(); ++i)
        if (s.change.data[i] != (s.sem_t1.data[i] != s.sem_t2.data[i] ? 1 : 0))
            fail("change.png disagrees with the semantic maps");
    return s;
}

void write_splits(const std::filesystem::path& root, const Splits& splits) {
    json j;
    j["train"] = splits.train;
    j["val"] = splits.val;
    j["test"] = splits.test;
    save_json_file(root / "splits.json", j);
}

Splits read_splits(const std::filesystem::path& root) {
    json j = load_json_file(root / "splits.json", "splits");
    Splits s;
    try {
        s.train = j.at("train").get<std::vector<std::string>>();
        s.val = j.at("val").get<std::vector<std::string>>();
        s.test = j.at("test").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw IngestError("splits: bad field in " + (root / "splits.json").string() + ": " +
                          e.what());
    }
    return s;
}

const SceneSample& Dataset::get(const std::string& id) const {
    auto it = index.find(id);
    if (it == index.end()) throw IngestError("unknown sample id: " + id);
    return samples[it->second];
}

const std::vector<std::string>& Dataset::split(const std::string& name) const {
    if (name == "train") return splits.train;
    if (name == "val") return splits.val;
    if (name == "test") return splits.test;
    throw ConfigError("unknown split: " + name + " (want train, val, or test)");
}

Dataset read_dataset(const std::filesystem::path& root) {
    Dataset d;
    d.palette = read_palette(root / "palette.json");
    d.splits = read_splits(root);
    std::vector<std::string> all;
    for (const auto* sp : {&d.splits.train, &d.splits.val, &d.splits.test})
        all.insert(all.end(), sp->begin(), sp->end());
    for (const auto& id : all) {
        if (d.index.count(id)) throw IngestError("sample " + id + " appears in two splits");
        d.index[id] = d.samples.size();
        d.samples.push_back(read_sample(root, id, d.palette));
    }
    return d;
}

void generate_dataset(const DatasetGenConfig& config, const std::filesystem::path& out_root) {
    config.scene.validate();
    if (config.sample_count < 3)
        throw ConfigError("dataset generation needs sample_count >= 3, got " +
                          std::to_string(config.sample_count));
    ClassPalette palette = default_palette(config.scene.num_classes, config.scene.num_stages,
                                           config.scene.stage_step);
    std::filesystem::create_directories(out_root);
    write_palette(out_root / "palette.json", palette);

    std::vector<std::string> ids;
    for (int i = 0; i < config.sample_count; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "s%05d", i);
        SceneConfig sc = config.scene;
        sc.seed = mix_seed(config.scene.seed + 0x9e3779b97f4a7c15ULL * (i + 1));
        SceneSample sample = generate_scene(sc, palette, buf);
        write_sample(out_root, sample);
        ids.push_back(buf);
    }
    Splits splits = split_ids(ids, config.train_ratio, config.val_ratio, config.test_ratio,
                              mix_seed(config.scene.seed ^ 0x51b7));
    write_splits(out_root, splits);
}

}  // namespace phenocd::scene
