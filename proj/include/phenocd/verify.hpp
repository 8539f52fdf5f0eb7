// Independent brute-force oracles and numeric self-checks. Everything here
// re-derives its answer with plain loops and 64-bit arithmetic, sharing no
// code with the kernels it checks; the test suite and the `selftest` command
// compare the two sides.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "phenocd/clustering.hpp"
#include "phenocd/metrics.hpp"
#include "phenocd/sampling.hpp"

namespace phenocd::verify {

using nn::Tensor;

// ---------------------------------------------------------------------------
// loss oracles

// Literal softmax-contrast evaluation: -log(exp(a.p/tau) / (exp(a.p/tau) +
// sum_j exp(a.n_j/tau))), stabilized by shifting with the max similarity.
// Empty negative set returns 0.
double oracle_infonce(const std::vector<double>& anchor, const std::vector<double>& positive,
                      const std::vector<std::vector<double>>& negatives, double tau);

// Mean binary cross-entropy with the kernel's [1e-7, 1-1e-7] clamp.
double oracle_bce(const std::vector<double>& probs, const std::vector<int>& targets);

// Mean softmax cross-entropy; one logits row per target.
double oracle_ce(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets);

// Plain copies of the embedding grids ([N,D,fh,fw]); an empty tensor marks an
// absent field.
struct OracleFields {
    Tensor<double> t1{std::vector<int>{1}};
    Tensor<double> t2{std::vector<int>{1}};
    Tensor<double> fused{std::vector<int>{1}};
    bool has_t1 = false, has_t2 = false, has_fused = false;
};

// Naive re-evaluation of the three-term contrastive loss from the raw
// selection: prototypes recomputed as renormalized means over pure cells,
// every softmax term via oracle_infonce, task means over non-empty tasks.
double oracle_clem(const OracleFields& fields, const std::vector<sel::TaskSelection>& sels,
                   const std::vector<const Tensor<int>*>& sem_t1,
                   const std::vector<const Tensor<int>*>& sem_t2, const sel::SelectConfig& cfg,
                   const sel::LossWeights& w, const cluster::CentroidBank* union_bank = nullptr);

// Same for the phenology-aware loss (pixel negatives plus any centroid rows
// named by the selection).
double oracle_plm(const OracleFields& fields, const std::vector<sel::TaskSelection>& sels,
                  const sel::SelectConfig& cfg, const cluster::CentroidBank& bank);

// ---------------------------------------------------------------------------
// clustering oracle

struct OracleClusters {
    std::vector<int> assignment;
    std::vector<std::vector<double>> centroids;
    double inertia = 0.0;
};

// Global optimum of spherical k-means by exhaustive assignment enumeration.
// Refuses more than 12 points or more than 3 clusters.
OracleClusters oracle_kmeans(const std::vector<std::vector<double>>& points, int k);

// ---------------------------------------------------------------------------
// metrics oracle and clustering agreement

// Independent confusion recount by direct pixel scan.
metrics::MetricsReport oracle_metrics(const Tensor<int>& pred, const Tensor<int>& gt);

// ---------------------------------------------------------------------------
// self-test driver

struct CheckResult {
    std::string name;
    bool ok = false;
    double max_error = 0.0;
    double seconds = 0.0;
};

// Finite-difference checks over the attention fusion block, the pyramid
// block, both heads, the projection, and all four losses, on minimal shapes.
std::vector<CheckResult> gradcheck_all();

// Oracle-equivalence and frozen-value checks (losses, clustering, metrics).
std::vector<CheckResult> oracle_checks();

// Runs everything and writes one JSON line per check:
// {"name":...,"status":"pass"|"fail","max_error":...,"seconds":...}.
// Returns true when every check passed.
bool run_selftest(std::ostream& out);

}  // namespace phenocd::verify
