#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace blockvar {

// Thrown when an input file cannot be parsed. Messages name the offending line.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when inputs are well-formed but violate a contract (empty arm,
// duplicate ids, estimator preconditions, ...).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Arm { control = 0, treated = 1 };

enum class BlockClass { big, small };

// One observed unit: block membership, assigned arm, observed outcome.
struct UnitRecord {
    std::string unit_id;
    std::string block_id;
    Arm arm = Arm::control;
    double y_obs = 0.0;
};

using ExperimentTable = std::vector<UnitRecord>;

// One unit of a science table: both potential outcomes.
struct ScienceUnit {
    std::string block_id;
    double y0 = 0.0;
    double y1 = 0.0;
};

struct BlockSummary {
    std::string block_id;
    int n_k = 0;
    int n_tk = 0;
    int n_ck = 0;
    double mean_t = 0.0;
    double mean_c = 0.0;
    std::optional<double> s2_t;  // defined iff n_tk >= 2, divisor n_tk - 1
    std::optional<double> s2_c;  // defined iff n_ck >= 2, divisor n_ck - 1
    double tau_hat_k = 0.0;      // mean_t - mean_c
    BlockClass cls = BlockClass::big;
};

// A group of small blocks sharing one size.
struct SizeGroup {
    int m_j = 0;  // block size
    int K_j = 0;  // number of small blocks of that size
    int N_j = 0;  // m_j * K_j
};

struct ExperimentSummary {
    int n = 0;
    int n_t = 0;
    int n_c = 0;
    int K = 0;
    std::vector<BlockSummary> blocks;     // lexicographic by block_id
    int n_small = 0;                      // units in small blocks
    std::vector<SizeGroup> size_groups;   // over small blocks, ascending size
    int J = 0;                            // distinct small-block sizes
    bool p_k_equal = false;               // exact equality of treated proportions
};

}  // namespace blockvar
