// Synthetic scene generator: determinism, label/appearance invariants,
// dataset round-trips, and the PNG quantization rule.

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "phenocd/png_io.hpp"
#include "phenocd/scenegen.hpp"

using namespace phenocd;
using nn::Tensor;

namespace {

scene::SceneConfig small_config(uint64_t seed) {
    scene::SceneConfig c;
    c.height = 64;
    c.width = 64;
    c.seed = seed;
    return c;
}

scene::SceneSample make_sample(uint64_t seed) {
    scene::SceneConfig c = small_config(seed);
    return scene::generate_scene(c, scene::default_palette(c.num_classes, c.num_stages),
                                 "s" + std::to_string(seed));
}

}  // namespace

TEST_SUITE("scenegen") {

TEST_CASE("same seed and config give byte-identical samples") {
    auto a = make_sample(5);
    auto b = make_sample(5);
    CHECK(a.image_t1.data == b.image_t1.data);
    CHECK(a.image_t2.data == b.image_t2.data);
    CHECK(a.sem_t1.data == b.sem_t1.data);
    CHECK(a.sem_t2.data == b.sem_t2.data);
    CHECK(a.stage_t1.data == b.stage_t1.data);
    CHECK(a.stage_t2.data == b.stage_t2.data);
    CHECK(a.change.data == b.change.data);
}

TEST_CASE("change map marks exactly the semantic disagreements") {
    for (uint64_t seed : {1, 2, 3}) {
        auto s = make_sample(seed);
        for (int64_t i = 0; i < s.change.numel(); ++i)
            CHECK(s.change.data[i] == (s.sem_t1.data[i] != s.sem_t2.data[i] ? 1 : 0));
    }
}

TEST_CASE("zero change fraction forces an all-zero change map") {
    scene::SceneConfig c = small_config(9);
    c.change_fraction = 0.0;
    auto s = scene::generate_scene(c, scene::default_palette(4, 4), "z");
    for (int64_t i = 0; i < s.change.numel(); ++i) CHECK(s.change.data[i] == 0);
}

TEST_CASE("changed-pixel fraction stays inside the target window over 100 seeds") {
    double mean = 0.0;
    for (int k = 0; k < 100; ++k) {
        auto s = make_sample(1000 + k);
        double frac = 0.0;
        for (int64_t i = 0; i < s.change.numel(); ++i) frac += s.change.data[i];
        frac /= static_cast<double>(s.change.numel());
        CHECK(frac >= 0.05);
        CHECK(frac <= 0.2);
        mean += frac;
    }
    mean /= 100.0;  // target 0.10; measured mean 0.0968
    CHECK(mean >= 0.08);
    CHECK(mean <= 0.12);
}

TEST_CASE("stage maps attach to whole regions, not single pixels") {
    auto s = make_sample(13);
    // stages are drawn per region, so every (class, stage) combination that
    // appears must cover a region-sized pixel count, never isolated speckles
    std::map<std::pair<int, int>, int> counts;
    for (int64_t i = 0; i < s.stage_t1.numel(); ++i)
        counts[{s.sem_t1.data[i], s.stage_t1.data[i]}]++;
    CHECK(counts.size() >= 4);
    for (const auto& [key, n] : counts) CHECK(n >= 16);
}

TEST_CASE("pseudo change shifts appearance beyond the noise floor") {
    // unchanged pixels whose stage flips must move in color more than plain
    // sensor noise does, else the detector could never be confused by them
    int flipped_present = 0;
    for (int k = 0; k < 20; ++k) {
        auto s = make_sample(300 + k);
        double flip_diff = 0.0, same_diff = 0.0;
        int64_t flips = 0, sames = 0;
        int64_t plane = static_cast<int64_t>(s.sem_t1.shape[0]) * s.sem_t1.shape[1];
        for (int64_t i = 0; i < plane; ++i) {
            if (s.change.data[i] != 0) continue;
            double d = 0.0;
            for (int c = 0; c < 3; ++c)
                d += std::abs(static_cast<double>(s.image_t2.data[c * plane + i]) -
                              s.image_t1.data[c * plane + i]);
            if (s.stage_t1.data[i] != s.stage_t2.data[i]) {
                flip_diff += d;
                ++flips;
            } else {
                same_diff += d;
                ++sames;
            }
        }
        if (flips == 0) continue;
        ++flipped_present;
        CHECK(flip_diff / flips > same_diff / std::max<int64_t>(1, sames));
    }
    CHECK(flipped_present >= 15);  // pseudo change must actually occur
}

TEST_CASE("wider stage steps spread the palette further") {
    auto narrow = scene::default_palette(4, 4, 0.1);
    auto wide = scene::default_palette(4, 4, 0.4);
    for (int c = 0; c < 4; ++c) {
        auto dist = [&](const scene::ClassDef& def) {
            double d = 0.0;
            for (int k = 0; k < 3; ++k)
                d += std::pow(def.stage_deltas.back()[k] - def.stage_deltas.front()[k], 2);
            return std::sqrt(d);
        };
        CHECK(dist(wide.classes[c]) > 3.0 * dist(narrow.classes[c]));
    }
    CHECK_THROWS_AS(scene::default_palette(4, 4, 0.0), ConfigError);
    CHECK_THROWS_AS(scene::default_palette(4, 4, 0.6), ConfigError);
}

TEST_CASE("splits obey the ratio floor arithmetic and the seed") {
    std::vector<std::string> ids;
    for (int i = 0; i < 10; ++i) ids.push_back("s" + std::to_string(i));
    auto sp = scene::split_ids(ids, 0.8, 0.1, 0.1, 7);
    CHECK(sp.train.size() == 8);
    CHECK(sp.val.size() == 1);
    CHECK(sp.test.size() == 1);

    auto sp2 = scene::split_ids(ids, 0.8, 0.1, 0.1, 7);
    CHECK(sp.train == sp2.train);
    CHECK(sp.val == sp2.val);
    CHECK(sp.test == sp2.test);

    // partition: every id appears exactly once
    std::set<std::string> seen;
    for (const auto* part : {&sp.train, &sp.val, &sp.test})
        for (const auto& id : *part) CHECK(seen.insert(id).second);
    CHECK(seen.size() == ids.size());
}

TEST_CASE("dataset write and read round-trip the label maps") {
    namespace fs = std::filesystem;
    fs::path root = fs::temp_directory_path() / "phenocd_ds_test";
    fs::remove_all(root);

    scene::DatasetGenConfig gen;
    gen.scene = small_config(31);
    gen.sample_count = 5;
    scene::generate_dataset(gen, root);
    auto data = scene::read_dataset(root);
    CHECK(data.splits.train.size() == 3);
    CHECK(data.splits.val.size() == 1);  // floors of 0.5 are pulled up to one sample
    CHECK(data.splits.test.size() == 1);

    for (const auto& id : data.splits.train) {
        const auto& s = data.get(id);
        auto fresh = scene::generate_scene(gen.scene, scene::default_palette(4, 4), id);
        (void)fresh;  // ids use their own derived seeds; just check invariants
        for (int64_t i = 0; i < s.change.numel(); ++i)
            CHECK(s.change.data[i] == (s.sem_t1.data[i] != s.sem_t2.data[i] ? 1 : 0));
    }

    // deleting one map breaks the read with the sample named
    fs::path victim = root / "samples" / data.splits.train[0] / "change.png";
    fs::remove(victim);
    CHECK_THROWS_WITH_AS(scene::read_dataset(root),
                         doctest::Contains(data.splits.train[0].c_str()), IngestError);
    fs::remove_all(root);
}

TEST_CASE("byte quantization rounds half up and dequantizes consistently") {
    CHECK(img::quantize_unit(0.5) == 128);
    CHECK(img::quantize_unit(0.0) == 0);
    CHECK(img::quantize_unit(1.0) == 255);
    CHECK(img::dequantize_unit(128) == doctest::Approx(128.0 / 255.0));
    // quantize(dequantize(b)) == b for every byte
    for (int b = 0; b < 256; ++b)
        CHECK(img::quantize_unit(img::dequantize_unit(static_cast<uint8_t>(b))) == b);
}

TEST_CASE("scene config validation names the offending field") {
    scene::SceneConfig c = small_config(1);
    c.stage_step = 0.9;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("stage_step"), ConfigError);
    c = small_config(1);
    c.noise_sigma = 0.5;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("noise_sigma"), ConfigError);
    c = small_config(1);
    c.change_fraction = 0.7;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("change_fraction"), ConfigError);
    c = small_config(1);
    c.height = 8;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

}  // TEST_SUITE("scenegen")
