#pragma once

#include <istream>
#include <vector>

#include "blockvar/types.hpp"

namespace blockvar {

// Experiment CSV: header `unit_id,block,z,y`, z in {0,1}.
ExperimentTable parse_experiment_csv(std::istream& in);

// Science CSV: header `block,y0,y1`.
std::vector<ScienceUnit> parse_science_csv(std::istream& in);

ExperimentSummary summarize(const ExperimentTable& table);

struct BlockPartition {
    std::vector<std::string> big_ids;
    std::vector<std::string> small_ids;
};

BlockPartition classify_blocks(const ExperimentSummary& summary);

}  // namespace blockvar
