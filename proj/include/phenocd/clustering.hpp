#pragma once

// Per-class spherical k-means over unit embeddings, and the centroid bank
// that carries the discovered phenological sub-structure from the clustering
// stage into the final training stage.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "phenocd/common.hpp"

namespace phenocd::cluster {

struct ClassCentroids {
    int class_id = 0;
    std::vector<std::vector<double>> centroids;  // K unit vectors
    std::vector<int64_t> counts;                 // members per centroid at fit time
    int iterations = 0;
    double inertia = 0.0;  // sum of (1 - cosine) to the assigned centroid

    int k() const { return static_cast<int>(centroids.size()); }
};

struct CentroidBank {
    uint64_t seed = 0;
    std::vector<ClassCentroids> classes;  // ascending class_id; absent classes omitted

    const ClassCentroids* find(int class_id) const;
    bool has(int class_id) const { return find(class_id) != nullptr; }

    // Nearest centroid by cosine similarity, ties to the lowest index.
    // Unknown class -> -1.
    int assign(int class_id, const double* vec, int dim) const;
};

// Spherical k-means: k-means++ seeding on 1-cosine distance, cosine
// assignment, mean-then-renormalize updates; stops after max_iter rounds or
// when no centroid moves more than 1e-6. K is reduced to the sample count
// when a class has fewer than K samples; classes with no samples are
// omitted. Any reductions/omissions are reported through `notes`.
CentroidBank cluster_phenology(const std::vector<int>& class_ids,
                               const std::vector<std::vector<std::vector<double>>>& samples,
                               int k, uint64_t seed, std::vector<std::string>* notes = nullptr,
                               int max_iter = 100);

void write_bank(const std::filesystem::path& path, const CentroidBank& bank);
CentroidBank read_bank(const std::filesystem::path& path);

// Adjusted Rand index between two labelings of the same items; 1.0 means
// identical partitions, ~0 a chance-level agreement. Used to score discovered
// centroids against reference stage labels.
double adjusted_rand(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace phenocd::cluster
