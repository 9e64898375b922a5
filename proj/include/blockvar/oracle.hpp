#pragma once

#include <string>
#include <vector>

#include "blockvar/estimators.hpp"
#include "blockvar/types.hpp"

namespace blockvar {

// Full potential-outcomes table, grouped by block (lexicographic order).
struct ScienceTable {
    struct Block {
        std::string block_id;
        std::vector<double> y0;
        std::vector<double> y1;
        int n_k() const { return static_cast<int>(y0.size()); }
        double mean_y0() const;
        double mean_y1() const;
        double tau() const { return mean_y1() - mean_y0(); }
        double s2_y0() const;  // S^2_ck, divisor n_k - 1
        double s2_y1() const;  // S^2_tk
        double s2_tau() const;  // S^2_tck, sample variance of y1 - y0
    };

    std::vector<Block> blocks;

    static ScienceTable from_units(const std::vector<ScienceUnit>& units);

    int n() const;
    int K() const { return static_cast<int>(blocks.size()); }
    double tau_sate() const;
    double mean_y0() const;
    double mean_y1() const;
    double s2_y0() const;   // S^2_c over all units
    double s2_y1() const;   // S^2_t
    double s2_tau() const;  // S^2_tc
};

struct DesignBlock {
    std::string block_id;
    int n_k = 0;
    int n_tk = 0;
};

struct Design {
    std::vector<DesignBlock> blocks;
    int n() const;
    int n_t() const;
    bool equal_proportions() const;  // exact, integer cross-multiplication
    // Design matching a science table with the given treated counts (block order).
    static Design for_science(const ScienceTable& science, const std::vector<int>& n_treated);
};

struct Stratum {
    std::string label;
    double weight = 0.0;  // n_k / n
    double mu_t = 0.0;
    double mu_c = 0.0;
    double var_t = 0.0;
    double var_c = 0.0;
    double var_tc = 0.0;  // population variance of unit-level effects
    int n_k = 0;
    int n_tk = 0;
    double tau() const { return mu_t - mu_c; }
};

struct StrataPopulation {
    std::vector<Stratum> strata;
    int n() const;
    int n_t() const;
    double tau() const;  // weight-averaged
    bool equal_proportions() const;
};

// Strata-population JSON: array of objects
// {label, weight, mu_t, mu_c, var_t, var_c, var_tc, n_k, n_tk}.
StrataPopulation parse_strata_json(const std::string& text);

enum class Mechanism { complete, blocked };

double var_k_weighted(const std::vector<double>& values, const std::vector<double>& weights);
double cov_k_weighted(const std::vector<double>& x, const std::vector<double>& y,
                      const std::vector<double>& weights);

double true_var_finite(const ScienceTable& science, const Design& design, Mechanism mechanism);
double bias_finite(const ScienceTable& science, const Design& design, EstimatorId estimator);

struct DesignComparison {
    double var_cr = 0.0;
    double var_blk = 0.0;
    double difference = 0.0;    // var_cr - var_blk
    double between_term = 0.0;  // Var_k term (scaled by 1/(n-1))
    double within_term = 0.0;   // weighted within-block variance term
};
DesignComparison compare_designs_finite_detail(const ScienceTable& science, const Design& design);
double compare_designs_finite(const ScienceTable& science, const Design& design);

double true_var_m1(const StrataPopulation& pop);
double bias_m1(const StrataPopulation& pop, EstimatorId estimator);
double compare_designs_m1(const StrataPopulation& pop);

struct UnequalComparison {
    double total = 0.0;
    double between_term = 0.0;  // same form as compare_designs_m1, at p = p_cr
    double penalty_term = 0.0;  // proportion-penalty, zero when p_k = p_cr
};
UnequalComparison compare_designs_unequal(const StrataPopulation& pop, double p_cr);

double srs_vs_m1_gap(const StrataPopulation& pop);

double ignore_blocking_bias_finite(const ScienceTable& science, const Design& design);
double ignore_blocking_bias_m1(const StrataPopulation& pop);

}  // namespace blockvar
