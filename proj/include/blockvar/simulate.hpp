#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "blockvar/estimators.hpp"
#include "blockvar/oracle.hpp"
#include "blockvar/rng.hpp"
#include "blockvar/types.hpp"

namespace blockvar {

// Data-generating process: K blocks, sizes indexed smallest-first, block k
// drawing (y0, y1) from a bivariate normal with means (alpha_k, alpha_k +
// beta_k), unit variances and correlation rho.  alpha_k and beta_k decrease
// in k through normal quantiles scaled by a (control-mean spread) and b
// (effect spread), so smaller blocks carry larger means and effects.
struct DGPConfig {
    int K = 0;
    std::vector<int> sizes;  // per block; reordered ascending internally
    std::vector<int> n_tk;   // treated counts, aligned with sizes
    double rho = 0.0;
    double a = 0.0;
    double b = 0.0;
    double base_effect = 5.0;
    std::uint64_t seed = 0;
};

double dgp_alpha(const DGPConfig& config, int k);  // k in 1..K
double dgp_beta(const DGPConfig& config, int k);

ScienceTable generate_dgp(const DGPConfig& config);
Design design_for_dgp(const DGPConfig& config);

// Arms per unit, units flattened block-by-block in science-table block order.
struct Assignment {
    std::vector<Arm> arms;
};

Assignment draw_assignment(const Design& design, Mechanism mechanism, std::mt19937_64& rng);

// Number of valid blocked assignments; throws once the running product
// exceeds the cap, advising Monte Carlo instead.
long long count_assignments(const Design& design, long long cap = 1000000);
void enumerate_assignments(const Design& design,
                           const std::function<void(const Assignment&)>& visit,
                           long long cap = 1000000);

// Observed-data summary for one assignment of a known science table.
ExperimentSummary summarize_assignment(const ScienceTable& science, const Design& design,
                                       const Assignment& assignment);

enum class MCMode { exhaustive, sampled };

struct EstimatorStats {
    EstimatorId id = EstimatorId::cr;
    bool skipped = false;
    double mean_point = 0.0;
    double var_point = 0.0;
    double mean_vhat = 0.0;
    double var_vhat = 0.0;
    double rel_bias = 0.0;
    double mc_se = 0.0;  // SD of the per-replication variance estimates / sqrt(R)
    std::vector<std::string> warnings;
};

struct MCResult {
    long long R = 0;
    double mean_tau = 0.0;  // block-weighted difference in means
    double var_tau = 0.0;
    double true_var = 0.0;
    double true_var_se = 0.0;  // 0 in the finite framework (closed form)
    std::vector<EstimatorStats> estimators;
};

// Randomization distribution study for a fixed science table.  Exhaustive
// mode enumerates every assignment; sampled mode draws R of them.  threads
// <= 0 means the OpenMP default.  Results are identical for any thread
// count: replication r uses its own RNG stream and the reduction runs in
// replication order.
MCResult monte_carlo_study(const ScienceTable& science, const Design& design,
                           const std::vector<EstimatorId>& estimators, long long R,
                           std::uint64_t seed, MCMode mode, int threads = 0);

// Serial reference path: same contract, plain loop, no OpenMP.  Kept for
// testing and benchmarking against the parallel kernel.
MCResult monte_carlo_study_serial(const ScienceTable& science, const Design& design,
                                  const std::vector<EstimatorId>& estimators, long long R,
                                  std::uint64_t seed, MCMode mode);

enum class Framework { srs, m1, m2 };

// Simple-random-sample generator: a covariate x ~ N(0,1) drives both arms
// (y0 = slope_y0 * x + u0, y1 = y0's systematic part + base_effect +
// slope_tau * x + u1, noise unit-variance with correlation rho); blocks are
// formed after sampling by sorting on x and cutting consecutive groups of
// the given sizes.
struct SrsConfig {
    std::vector<int> sizes;
    std::vector<int> n_tk;
    double slope_y0 = 1.0;
    double slope_tau = 0.0;
    double base_effect = 5.0;
    double rho = 0.0;
};

// Pool of fixed finite strata; each draw includes K of them, chosen
// uniformly without replacement.
struct SamplingFrame {
    struct Candidate {
        std::vector<double> y0;
        std::vector<double> y1;
        int n_tk = 1;
    };
    std::vector<Candidate> pool;
    int K = 0;
};

struct SuperpopInputs {
    Framework framework = Framework::m1;
    StrataPopulation m1;
    SrsConfig srs;
    SamplingFrame m2;
};

// Outer loop samples a science table from the framework, inner loop
// randomizes assignment.  true_var is the empirical variance of the
// block-weighted estimator over all draws; true_var_se and each mc_se are
// clustered on the outer replications.
MCResult superpopulation_study(const SuperpopInputs& inputs,
                               const std::vector<EstimatorId>& estimators, long long R_outer,
                               long long R_inner, std::uint64_t seed, int threads = 0);

MCResult superpopulation_study_serial(const SuperpopInputs& inputs,
                                      const std::vector<EstimatorId>& estimators,
                                      long long R_outer, long long R_inner, std::uint64_t seed);

// Share of variation in the unit-level mean potential outcome (y0+y1)/2
// explained by block membership; 0 (with a warning) when there is no
// variation at all.
double r2_blocks(const ScienceTable& science, std::vector<std::string>* warnings = nullptr);

// Realized standard deviation of block average effects, size-weighted about
// the overall effect (the x-axis of the bias sweeps).
double block_effect_sd(const ScienceTable& science);

}  // namespace blockvar
