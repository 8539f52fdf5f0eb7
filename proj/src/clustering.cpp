#include "phenocd/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

namespace phenocd::cluster {

using nlohmann::json;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

void renormalize(std::vector<double>& v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    double norm = std::sqrt(sq);
    if (norm < 1e-12) return;  // degenerate mean: keep as-is, caller preserves previous centroid
    for (double& x : v) x /= norm;
}

// k-means++ on 1-cosine distance (squared weighting).
std::vector<std::vector<double>> seed_centroids(const std::vector<std::vector<double>>& points,
                                                int k, Rng& rng) {
    std::vector<std::vector<double>> centers;
    centers.push_back(points[rng.uniform_int(0, static_cast<int>(points.size()) - 1)]);
    std::vector<double> best_d(points.size());
    while (static_cast<int>(centers.size()) < k) {
        double total = 0.0;
        for (size_t i = 0; i < points.size(); ++i) {
            double d = 2.0;  // max of 1-cos is 2
            for (const auto& c : centers) d = std::min(d, 1.0 - dot(points[i], c));
            best_d[i] = d * d;
            total += best_d[i];
        }
        size_t pick = 0;
        if (total > 0.0) {
            double r = rng.uniform(0.0, total);
            double acc = 0.0;
            for (size_t i = 0; i < points.size(); ++i) {
                acc += best_d[i];
                if (r <= acc) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(points.size()) - 1));
        }
        centers.push_back(points[pick]);
    }
    return centers;
}

ClassCentroids run_lloyd(int class_id, const std::vector<std::vector<double>>& points, int k,
                         Rng& rng, int max_iter) {
    ClassCentroids out;
    out.class_id = class_id;
    out.centroids = seed_centroids(points, k, rng);
    std::vector<int> assign(points.size(), 0);
    double prev_inertia = -1.0;
    for (int iter = 1; iter <= max_iter; ++iter) {
        double inertia = 0.0;
        for (size_t i = 0; i < points.size(); ++i) {
            double best = -2.0;
            int arg = 0;
            for (int c = 0; c < k; ++c) {
                double s = dot(points[i], out.centroids[c]);
                if (s > best) {
                    best = s;
                    arg = c;
                }
            }
            assign[i] = arg;
            inertia += 1.0 - best;
        }
        if (prev_inertia >= 0.0 && inertia > prev_inertia + 1e-12)
            throw NumericError("spherical k-means inertia increased: " +
                               std::to_string(prev_inertia) + " -> " + std::to_string(inertia));
        prev_inertia = inertia;
        out.inertia = inertia;
        out.iterations = iter;

        std::vector<std::vector<double>> next(k, std::vector<double>(points[0].size(), 0.0));
        std::vector<int64_t> counts(k, 0);
        for (size_t i = 0; i < points.size(); ++i) {
            ++counts[assign[i]];
            for (size_t d = 0; d < points[i].size(); ++d) next[assign[i]][d] += points[i][d];
        }
        double max_move = 0.0;
        for (int c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                next[c] = out.centroids[c];  // empty cluster keeps its centroid
            } else {
                for (double& v : next[c]) v /= static_cast<double>(counts[c]);
                renormalize(next[c]);
            }
            double sq = 0.0;
            for (size_t d = 0; d < next[c].size(); ++d) {
                double diff = next[c][d] - out.centroids[c][d];
                sq += diff * diff;
            }
            max_move = std::max(max_move, std::sqrt(sq));
        }
        out.centroids = std::move(next);
        out.counts = std::move(counts);
        if (max_move < 1e-6) break;
    }
    return out;
}

// Lloyd's converges to a local optimum, so run several independently seeded
// attempts from one rng stream and keep the lowest-inertia result (first on ties).
constexpr int kRestarts = 10;

ClassCentroids fit_class(int class_id, const std::vector<std::vector<double>>& points, int k,
                         Rng& rng, int max_iter) {
    ClassCentroids best;
    for (int r = 0; r < kRestarts; ++r) {
        ClassCentroids run = run_lloyd(class_id, points, k, rng, max_iter);
        if (r == 0 || run.inertia < best.inertia) best = std::move(run);
    }
    return best;
}

}  // namespace

const ClassCentroids* CentroidBank::find(int class_id) const {
    for (const auto& c : classes)
        if (c.class_id == class_id) return &c;
    return nullptr;
}

int CentroidBank::assign(int class_id, const double* vec, int dim) const {
    const ClassCentroids* cc = find(class_id);
    if (!cc) return -1;
    double best = -2.0;
    int arg = 0;
    for (int c = 0; c < cc->k(); ++c) {
        double s = 0.0;
        for (int d = 0; d < dim; ++d) s += vec[d] * cc->centroids[c][d];
        if (s > best) {
            best = s;
            arg = c;
        }
    }
    return arg;
}

CentroidBank cluster_phenology(const std::vector<int>& class_ids,
                               const std::vector<std::vector<std::vector<double>>>& samples,
                               int k, uint64_t seed, std::vector<std::string>* notes,
                               int max_iter) {
    if (class_ids.size() != samples.size())
        throw ConfigError("cluster_phenology: class_ids and samples length mismatch");
    if (k < 1) throw ConfigError("cluster_phenology: k must be >= 1");
    CentroidBank bank;
    bank.seed = seed;
    Rng root(seed);
    for (size_t ci = 0; ci < class_ids.size(); ++ci) {
        int class_id = class_ids[ci];
        const auto& points = samples[ci];
        if (points.empty()) {
            if (notes)
                notes->push_back("class " + std::to_string(class_id) +
                                 " has no samples; omitted from the bank");
            continue;
        }
        int kc = k;
        if (static_cast<int>(points.size()) < k) {
            kc = static_cast<int>(points.size());
            if (notes)
                notes->push_back("class " + std::to_string(class_id) + " has only " +
                                 std::to_string(points.size()) + " samples; k reduced to " +
                                 std::to_string(kc));
        }
        Rng rng = root.fork(0xc1a55 + static_cast<uint64_t>(class_id));
        bank.classes.push_back(fit_class(class_id, points, kc, rng, max_iter));
    }
    std::sort(bank.classes.begin(), bank.classes.end(),
              [](const ClassCentroids& a, const ClassCentroids& b) {
                  return a.class_id < b.class_id;
              });
    return bank;
}

void write_bank(const std::filesystem::path& path, const CentroidBank& bank) {
    json j;
    j["seed"] = bank.seed;
    j["classes"] = json::array();
    for (const auto& c : bank.classes)
        j["classes"].push_back({{"class_id", c.class_id},
                                {"k", c.k()},
                                {"centroids", c.centroids},
                                {"counts", c.counts},
                                {"iterations", c.iterations},
                                {"inertia", c.inertia}});
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IngestError("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

CentroidBank read_bank(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open centroid bank: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IngestError("malformed centroid bank " + path.string() + ": " + e.what());
    }
    CentroidBank bank;
    try {
        bank.seed = j.at("seed").get<uint64_t>();
        for (const auto& cj : j.at("classes")) {
            ClassCentroids c;
            c.class_id = cj.at("class_id").get<int>();
            c.centroids = cj.at("centroids").get<std::vector<std::vector<double>>>();
            c.counts = cj.at("counts").get<std::vector<int64_t>>();
            c.iterations = cj.at("iterations").get<int>();
            c.inertia = cj.at("inertia").get<double>();
            if (c.centroids.empty()) throw IngestError("class with no centroids");
            bank.classes.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw IngestError("centroid bank: bad field in " + path.string() + ": " + e.what());
    }
    return bank;
}

double adjusted_rand(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size() || a.empty())
        throw ConfigError("adjusted_rand: labelings must be equal-length and non-empty");
    std::map<std::pair<int, int>, int64_t> joint;
    std::map<int, int64_t> ca, cb;
    for (size_t i = 0; i < a.size(); ++i) {
        ++joint[{a[i], b[i]}];
        ++ca[a[i]];
        ++cb[b[i]];
    }
    auto pairs = [](int64_t m) { return 0.5 * static_cast<double>(m) * static_cast<double>(m - 1); };
    double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (const auto& [key, m] : joint) sum_ij += pairs(m);
    for (const auto& [key, m] : ca) sum_a += pairs(m);
    for (const auto& [key, m] : cb) sum_b += pairs(m);
    double total = pairs(static_cast<int64_t>(a.size()));
    double expected = total == 0.0 ? 0.0 : sum_a * sum_b / total;
    double num = sum_ij - expected;
    double den = 0.5 * (sum_a + sum_b) - expected;
    if (den == 0.0) return 1.0;  // both partitions trivial and identical in structure
    return num / den;
}

}  // namespace phenocd::cluster
