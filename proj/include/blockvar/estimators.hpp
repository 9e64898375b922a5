#pragma once

#include <optional>
#include <string>
#include <vector>

#include "blockvar/types.hpp"

namespace blockvar {

enum class EstimatorId {
    cr,
    big,
    sb_equal,
    sb_m,
    sb_p,
    hybrid_m,
    hybrid_p,
    srs,
    rct_yes,
    rct_yes2,
    plugin,
};

std::string to_string(EstimatorId id);
std::optional<EstimatorId> estimator_from_string(const std::string& name);
std::vector<EstimatorId> all_estimators();

// Optimization-derived weights for the unified small-block estimator.
struct SbpWeights {
    std::vector<double> a;  // per block, same order as the input sizes
    double C = 0.0;         // sum of the a_k
};

enum class SmallMethod { unified, stratified };
enum class RctYesVariant { v1, v2 };

double tau_hat_blk(const ExperimentSummary& summary);
double tau_hat_blk(const std::vector<BlockSummary>& blocks);
double tau_hat_cr(const ExperimentTable& table);

double var_neyman_cr(const ExperimentTable& table);

// Big-block weighted estimator over the supplied block set.
double var_big_blocks(const std::vector<BlockSummary>& blocks);
double var_big_blocks(const ExperimentSummary& summary);

// Matched-pairs style estimators over the supplied block set (any classes).
double var_small_equal(const std::vector<BlockSummary>& blocks);
double var_small_equal(const ExperimentSummary& summary);
double var_small_stratified(const std::vector<BlockSummary>& blocks);
double var_small_stratified(const ExperimentSummary& summary);

SbpWeights sbp_weights(const std::vector<int>& sizes);

double var_small_unified(const std::vector<BlockSummary>& blocks);
double var_small_unified(const ExperimentSummary& summary);

struct HybridResult {
    double value = 0.0;
    std::vector<std::string> warnings;
};
HybridResult var_hybrid(const ExperimentSummary& summary, SmallMethod small_method);

double var_srs_unbiased(const ExperimentSummary& summary);
double var_rct_yes(const ExperimentSummary& summary, RctYesVariant variant);
double var_plug_in(const ExperimentSummary& summary);

struct PerBlockEntry {
    std::string block_id;
    double weight = 0.0;        // n_k / n
    double contribution = 0.0;  // weight * tau_hat_k
};

struct EstimateReport {
    EstimatorId estimator_id = EstimatorId::cr;
    double estimate = 0.0;
    std::optional<double> variance_estimate;
    std::optional<double> se;
    std::vector<PerBlockEntry> per_block;
    std::vector<std::string> warnings;
};

EstimateReport estimate(const ExperimentTable& table, const ExperimentSummary& summary,
                        EstimatorId id);

}  // namespace blockvar
