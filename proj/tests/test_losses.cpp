// Hard-sample selection and the four constraint losses: forced-pool
// semantics, exclusion rules, degenerate reductions, and oracle agreement.

#include <doctest.h>

#include <cmath>
#include <set>

#include "phenocd/contrastive.hpp"
#include "phenocd/sampling.hpp"
#include "phenocd/verify.hpp"

using namespace phenocd;
using nn::Tensor;

namespace {

// A batch of unit embeddings [n, d, fh, fw] plus matching full-res labels.
struct TestBatch {
    Tensor<double> emb_t1, emb_t2, emb_fused;
    std::vector<Tensor<int>> sem_t1, sem_t2, change;
    sel::BatchView view;

    TestBatch(int n, int d, int fh, int fw, int num_classes, Rng& rng)
        : emb_t1(random_unit(n, d, fh, fw, rng)),
          emb_t2(random_unit(n, d, fh, fw, rng)),
          emb_fused(random_unit(n, d, fh, fw, rng)) {
        for (int i = 0; i < n; ++i) {
            sem_t1.push_back(random_labels(4 * fh, 4 * fw, num_classes, rng));
            sem_t2.push_back(random_labels(4 * fh, 4 * fw, num_classes, rng));
            change.push_back(random_labels(4 * fh, 4 * fw, 2, rng));
        }
        view.emb_t1 = &emb_t1;
        view.emb_t2 = &emb_t2;
        view.emb_fused = &emb_fused;
        for (int i = 0; i < n; ++i) {
            view.sem_t1.push_back(&sem_t1[i]);
            view.sem_t2.push_back(&sem_t2[i]);
            view.change.push_back(&change[i]);
        }
    }

    static Tensor<double> random_unit(int n, int d, int fh, int fw, Rng& rng) {
        Tensor<double> e({n, d, fh, fw});
        for (auto& v : e.data) v = rng.normal();
        int64_t plane = static_cast<int64_t>(fh) * fw;
        for (int i = 0; i < n; ++i)
            for (int64_t p = 0; p < plane; ++p) {
                double norm = 0.0;
                for (int k = 0; k < d; ++k) {
                    double v = e.data[(static_cast<int64_t>(i) * d + k) * plane + p];
                    norm += v * v;
                }
                norm = std::sqrt(std::max(norm, 1e-12));
                for (int k = 0; k < d; ++k)
                    e.data[(static_cast<int64_t>(i) * d + k) * plane + p] /= norm;
            }
        return e;
    }

    // 4x4-block labels so every stride-4 cell is pure
    static Tensor<int> random_labels(int h, int w, int values, Rng& rng) {
        Tensor<int> t({h, w});
        for (int by = 0; by < h / 4; ++by)
            for (int bx = 0; bx < w / 4; ++bx) {
                int v = rng.uniform_int(0, values - 1);
                for (int dy = 0; dy < 4; ++dy)
                    for (int dx = 0; dx < 4; ++dx) t.data[(4 * by + dy) * w + 4 * bx + dx] = v;
            }
        return t;
    }
};

double scalar(const nn::NodePtr<double>& node) {
    REQUIRE(node != nullptr);
    return node->value.data[0];
}

}  // namespace

TEST_SUITE("selection") {

TEST_CASE("a two-cell class forces the positive and negative pools") {
    // labels [[A,A],[B,B]] on an 8x8 map => cells (0,0),(0,1) class A and
    // (1,0),(1,1) class B; an anchor of class A must take the other A cell as
    // positive and only B cells as negatives
    Rng rng(3);
    TestBatch batch(1, 4, 2, 2, 2, rng);
    for (int cell = 0; cell < 4; ++cell) {
        int v = cell < 2 ? 0 : 1;
        for (int dy = 0; dy < 4; ++dy)
            for (int dx = 0; dx < 4; ++dx)
                batch.sem_t1[0].data[(4 * (cell / 2) + dy) * 8 + 4 * (cell % 2) + dx] = v;
    }
    sel::SelectConfig cfg;
    cfg.anchors_per_class = 1;
    cfg.negatives = 8;
    Rng sel_rng(7);
    auto picked = sel::select_task(batch.view, sel::Task::seg_t1, sel::Mode::clem, cfg,
                                   nullptr, sel_rng);
    REQUIRE(picked.triples.size() == 2);  // one anchor per class
    for (const auto& t : picked.triples) {
        int anchor_row = t.anchor.fy;
        CHECK(t.positive.fy == anchor_row);  // the only same-class cell
        CHECK(t.positive.fx != t.anchor.fx);
        REQUIRE(!t.negatives.empty());
        for (const auto& n : t.negatives) CHECK(n.fy != anchor_row);
    }
}

TEST_CASE("the anchor never appears in its own negative set") {
    Rng rng(11);
    sel::SelectConfig cfg;
    cfg.anchors_per_class = 4;
    cfg.negatives = 16;
    int trials = 0;
    for (int k = 0; k < 50; ++k) {
        TestBatch batch(2, 4, 4, 4, 3, rng);
        Rng sel_rng(100 + k);
        auto tasks = sel::select_all(batch.view, sel::Mode::clem, cfg, nullptr, sel_rng);
        for (const auto& task : tasks)
            for (const auto& t : task.triples) {
                ++trials;
                CHECK(!(t.anchor == t.positive));
                for (const auto& n : t.negatives) CHECK(!(n == t.anchor));
            }
    }
    CHECK(trials >= 1000);
}

TEST_CASE("pure cells are keyed by their uniform block label") {
    Tensor<int> labels({8, 8});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) labels.data[y * 8 + x] = x < 4 ? 2 : 5;
    labels.data[3] = 2;  // still pure
    auto cells = sel::pure_cells_by_class(labels);
    REQUIRE(cells.size() == 2);
    CHECK(cells.at(2).size() == 2);
    CHECK(cells.at(5).size() == 2);

    labels.data[3] = 5;  // cell (0,0) now mixed
    cells = sel::pure_cells_by_class(labels);
    CHECK(cells.at(2).size() == 1);
}

TEST_CASE("single-centroid banks reproduce the class-contrast picks") {
    Rng rng(17);
    TestBatch batch(2, 6, 4, 4, 3, rng);
    sel::SelectConfig cfg;

    cluster::CentroidBank bank;
    for (int c = 0; c < 3; ++c) {
        cluster::ClassCentroids cc;
        cc.class_id = c;
        cc.centroids.push_back(std::vector<double>(6, 0.0));
        cc.centroids.back()[0] = 1.0;
        bank.classes.push_back(cc);
    }

    Rng rng_a(29), rng_b(29);
    auto clem = sel::select_all(batch.view, sel::Mode::clem, cfg, nullptr, rng_a);
    auto plm = sel::select_all(batch.view, sel::Mode::plm, cfg, &bank, rng_b);
    REQUIRE(clem.size() == plm.size());
    for (size_t i = 0; i < clem.size(); ++i) {
        REQUIRE(clem[i].triples.size() == plm[i].triples.size());
        for (size_t j = 0; j < clem[i].triples.size(); ++j) {
            CHECK(clem[i].triples[j].anchor == plm[i].triples[j].anchor);
            CHECK(clem[i].triples[j].positive == plm[i].triples[j].positive);
            CHECK(clem[i].triples[j].negatives == plm[i].triples[j].negatives);
        }
    }
}

}  // TEST_SUITE("selection")

TEST_SUITE("losses") {

TEST_CASE("region prototypes are renormalized class means") {
    // class 1 owns cells (0,0)=(1,0) and (0,1)=(0,1): mean (0.5,0.5)
    // renormalizes to (0.7071, 0.7071); class 2 owns two copies of (1,0)
    Tensor<double> emb = Tensor<double>::zeros({1, 2, 2, 2});
    int64_t plane = 4;
    emb.data[0 * plane + 0] = 1.0;  // cell (0,0): d0 = 1
    emb.data[1 * plane + 1] = 1.0;  // cell (0,1): d1 = 1
    emb.data[0 * plane + 2] = 1.0;  // cell (1,0): d0 = 1
    emb.data[0 * plane + 3] = 1.0;  // cell (1,1): d0 = 1
    Tensor<int> labels({8, 8}, 1);
    for (int y = 4; y < 8; ++y)
        for (int x = 0; x < 8; ++x) labels.data[y * 8 + x] = 2;

    auto node = nn::make_const(emb);
    std::vector<const Tensor<int>*> sems{&labels};
    auto protos = con::region_prototypes(node, node, sems, sems, /*min_region_pixels=*/1);
    REQUIRE(protos.rows != nullptr);
    REQUIRE(protos.keys.size() == 4);  // two classes, both temporals
    int r1 = protos.find(0, 0, 1);
    int r2 = protos.find(0, 0, 2);
    REQUIRE(r1 >= 0);
    REQUIRE(r2 >= 0);
    const auto& rows = protos.rows->value;
    double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    CHECK(rows.data[2 * r1 + 0] == doctest::Approx(inv_sqrt2).epsilon(1e-9));
    CHECK(rows.data[2 * r1 + 1] == doctest::Approx(inv_sqrt2).epsilon(1e-9));
    CHECK(rows.data[2 * r2 + 0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(rows.data[2 * r2 + 1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("prototype of identical embeddings is that embedding") {
    Tensor<double> emb = Tensor<double>::zeros({1, 3, 2, 2});
    for (int p = 0; p < 4; ++p) {
        emb.data[0 * 4 + p] = 0.6;
        emb.data[1 * 4 + p] = 0.8;
    }
    Tensor<int> labels({8, 8}, 1);
    auto node = nn::make_const(emb);
    std::vector<const Tensor<int>*> sems{&labels};
    auto protos = con::region_prototypes(node, node, sems, sems, 1);
    REQUIRE(protos.rows != nullptr);
    CHECK(protos.rows->value.data[0] == doctest::Approx(0.6).epsilon(1e-9));
    CHECK(protos.rows->value.data[1] == doctest::Approx(0.8).epsilon(1e-9));
    CHECK(protos.rows->value.data[2] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("zeroed region and pixel-region weights reduce to the pixel term") {
    Rng rng(23);
    TestBatch batch(2, 8, 4, 4, 3, rng);
    sel::SelectConfig cfg;
    cfg.tau = 1.0;
    Rng sel_rng(5);
    auto tasks = sel::select_all(batch.view, sel::Mode::clem, cfg, nullptr, sel_rng);

    auto e1 = nn::make_const(batch.emb_t1);
    auto e2 = nn::make_const(batch.emb_t2);
    auto ef = nn::make_const(batch.emb_fused);
    auto protos = con::region_prototypes(e1, e2, batch.view.sem_t1, batch.view.sem_t2, 4);

    sel::LossWeights both;
    both.lambda_rr = 0.0;
    both.lambda_pr = 0.0;
    auto r = con::clem_loss(e1, e2, ef, protos, tasks, cfg, both);
    REQUIRE(r.loss != nullptr);
    REQUIRE(r.l_pp != nullptr);
    CHECK(scalar(r.loss) == doctest::Approx(scalar(r.l_pp)).epsilon(1e-12));
}

TEST_CASE("negative order never changes a loss value") {
    Rng rng(31);
    TestBatch batch(2, 8, 4, 4, 3, rng);
    sel::SelectConfig cfg;
    Rng sel_rng(9);
    auto tasks = sel::select_all(batch.view, sel::Mode::clem, cfg, nullptr, sel_rng);

    auto e1 = nn::make_const(batch.emb_t1);
    auto e2 = nn::make_const(batch.emb_t2);
    auto ef = nn::make_const(batch.emb_fused);
    auto protos = con::region_prototypes(e1, e2, batch.view.sem_t1, batch.view.sem_t2, 4);
    sel::LossWeights weights;
    double base = scalar(con::clem_loss(e1, e2, ef, protos, tasks, cfg, weights).loss);

    Rng shuffle_rng(77);
    for (auto& task : tasks)
        for (auto& t : task.triples) shuffle_rng.shuffle(t.negatives);
    double shuffled = scalar(con::clem_loss(e1, e2, ef, protos, tasks, cfg, weights).loss);
    CHECK(std::abs(base - shuffled) <= 1e-9);
}

TEST_CASE("single-centroid banks make the phenology loss equal the pixel term") {
    Rng rng(37);
    sel::SelectConfig cfg;
    cfg.tau = 1.0;
    for (int k = 0; k < 5; ++k) {
        TestBatch batch(2, 6, 4, 4, 3, rng);
        cluster::CentroidBank bank;
        for (int c = 0; c < 3; ++c) {
            cluster::ClassCentroids cc;
            cc.class_id = c;
            cc.centroids.push_back(std::vector<double>(6, 0.0));
            cc.centroids.back()[c] = 1.0;
            bank.classes.push_back(cc);
        }
        auto e1 = nn::make_const(batch.emb_t1);
        auto e2 = nn::make_const(batch.emb_t2);
        auto ef = nn::make_const(batch.emb_fused);

        Rng rng_a(200 + k), rng_b(200 + k);
        auto clem_tasks = sel::select_all(batch.view, sel::Mode::clem, cfg, nullptr, rng_a);
        auto plm_tasks = sel::select_all(batch.view, sel::Mode::plm, cfg, &bank, rng_b);

        con::ProtoSet<double> empty;
        sel::LossWeights pp_only;
        pp_only.lambda_rr = 0.0;
        pp_only.lambda_pr = 0.0;
        double clem = scalar(con::clem_loss(e1, e2, ef, empty, clem_tasks, cfg, pp_only).loss);
        double plm = scalar(con::plm_loss(e1, e2, ef, plm_tasks, cfg, bank).loss);
        CHECK(std::abs(clem - plm) <= 1e-9);
    }
}

TEST_CASE("contrastive losses match the brute-force oracle") {
    Rng rng(41);
    sel::SelectConfig cfg;
    double worst_clem = 0.0, worst_plm = 0.0;
    int evaluated = 0;
    for (int k = 0; k < 20; ++k) {
        int classes = 2 + rng.uniform_int(0, 4);
        TestBatch batch(2, 6, 4, 4, classes, rng);
        auto e1 = nn::make_const(batch.emb_t1);
        auto e2 = nn::make_const(batch.emb_t2);
        auto ef = nn::make_const(batch.emb_fused);

        verify::OracleFields fields;
        fields.t1 = batch.emb_t1;
        fields.t2 = batch.emb_t2;
        fields.fused = batch.emb_fused;
        fields.has_t1 = fields.has_t2 = fields.has_fused = true;

        Rng sel_rng(300 + k);
        auto tasks = sel::select_all(batch.view, sel::Mode::clem, cfg, nullptr, sel_rng);
        auto protos = con::region_prototypes(e1, e2, batch.view.sem_t1, batch.view.sem_t2,
                                             cfg.min_region_pixels);
        sel::LossWeights weights;
        auto got = con::clem_loss(e1, e2, ef, protos, tasks, cfg, weights);
        if (got.loss != nullptr) {
            double want = verify::oracle_clem(fields, tasks, batch.view.sem_t1,
                                              batch.view.sem_t2, cfg, weights);
            worst_clem = std::max(worst_clem, std::abs(scalar(got.loss) - want));
            ++evaluated;
        }

        cluster::CentroidBank bank;
        for (int c = 0; c < classes; ++c) {
            cluster::ClassCentroids cc;
            cc.class_id = c;
            for (int j = 0; j < 2; ++j) {
                std::vector<double> v(6, 0.0);
                v[(c + j) % 6] = 1.0;
                cc.centroids.push_back(v);
            }
            bank.classes.push_back(cc);
        }
        Rng plm_rng(600 + k);
        auto plm_tasks = sel::select_all(batch.view, sel::Mode::plm, cfg, &bank, plm_rng);
        auto got_plm = con::plm_loss(e1, e2, ef, plm_tasks, cfg, bank);
        if (got_plm.loss != nullptr) {
            double want = verify::oracle_plm(fields, plm_tasks, cfg, bank);
            worst_plm = std::max(worst_plm, std::abs(scalar(got_plm.loss) - want));
        }
    }
    CHECK(evaluated >= 10);
    CHECK(worst_clem <= 1e-6);
    CHECK(worst_plm <= 1e-6);
}

TEST_CASE("every contrastive loss is finite and non-negative") {
    Rng rng(43);
    sel::SelectConfig cfg;
    for (int k = 0; k < 10; ++k) {
        TestBatch batch(2, 4, 4, 4, 2 + (k % 3), rng);
        Rng sel_rng(400 + k);
        auto tasks = sel::select_all(batch.view, sel::Mode::clem, cfg, nullptr, sel_rng);
        auto e1 = nn::make_const(batch.emb_t1);
        auto e2 = nn::make_const(batch.emb_t2);
        auto ef = nn::make_const(batch.emb_fused);
        auto protos =
            con::region_prototypes(e1, e2, batch.view.sem_t1, batch.view.sem_t2, 4);
        sel::LossWeights weights;
        auto r = con::clem_loss(e1, e2, ef, protos, tasks, cfg, weights);
        if (r.loss == nullptr) continue;
        CHECK(std::isfinite(scalar(r.loss)));
        CHECK(scalar(r.loss) >= 0.0);
    }
}

}  // TEST_SUITE("losses")
