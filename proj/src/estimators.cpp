#include "blockvar/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace blockvar {

namespace {

int total_units(const std::vector<BlockSummary>& blocks) {
    int n = 0;
    for (const auto& b : blocks) n += b.n_k;
    return n;
}

}  // namespace

std::string to_string(EstimatorId id) {
    switch (id) {
        case EstimatorId::cr: return "cr";
        case EstimatorId::big: return "big";
        case EstimatorId::sb_equal: return "sb-equal";
        case EstimatorId::sb_m: return "sb-m";
        case EstimatorId::sb_p: return "sb-p";
        case EstimatorId::hybrid_m: return "hybrid-m";
        case EstimatorId::hybrid_p: return "hybrid-p";
        case EstimatorId::srs: return "srs";
        case EstimatorId::rct_yes: return "rct-yes";
        case EstimatorId::rct_yes2: return "rct-yes2";
        case EstimatorId::plugin: return "plugin";
    }
    return "?";
}

std::optional<EstimatorId> estimator_from_string(const std::string& name) {
    for (EstimatorId id : all_estimators()) {
        if (to_string(id) == name) return id;
    }
    return std::nullopt;
}

std::vector<EstimatorId> all_estimators() {
    return {EstimatorId::cr,       EstimatorId::big,      EstimatorId::sb_equal,
            EstimatorId::sb_m,     EstimatorId::sb_p,     EstimatorId::hybrid_m,
            EstimatorId::hybrid_p, EstimatorId::srs,      EstimatorId::rct_yes,
            EstimatorId::rct_yes2, EstimatorId::plugin};
}

double tau_hat_blk(const std::vector<BlockSummary>& blocks) {
    if (blocks.empty()) throw ValidationError("no blocks");
    double n = total_units(blocks);
    double acc = 0;
    for (const auto& b : blocks) acc += b.n_k * b.tau_hat_k;
    return acc / n;
}

double tau_hat_blk(const ExperimentSummary& summary) { return tau_hat_blk(summary.blocks); }

double tau_hat_cr(const ExperimentTable& table) {
    double sum_t = 0, sum_c = 0;
    long n_t = 0, n_c = 0;
    for (const auto& rec : table) {
        if (rec.arm == Arm::treated) {
            sum_t += rec.y_obs;
            ++n_t;
        } else {
            sum_c += rec.y_obs;
            ++n_c;
        }
    }
    if (n_t == 0 || n_c == 0) throw ValidationError("empty treatment arm");
    return sum_t / n_t - sum_c / n_c;
}

double var_neyman_cr(const ExperimentTable& table) {
    double sum_t = 0, sum_c = 0;
    long n_t = 0, n_c = 0;
    for (const auto& rec : table) {
        if (rec.arm == Arm::treated) {
            sum_t += rec.y_obs;
            ++n_t;
        } else {
            sum_c += rec.y_obs;
            ++n_c;
        }
    }
    if (n_t < 2 || n_c < 2) throw ValidationError("insufficient units in arm");
    double mean_t = sum_t / n_t, mean_c = sum_c / n_c;
    double ss_t = 0, ss_c = 0;
    for (const auto& rec : table) {
        if (rec.arm == Arm::treated) {
            ss_t += (rec.y_obs - mean_t) * (rec.y_obs - mean_t);
        } else {
            ss_c += (rec.y_obs - mean_c) * (rec.y_obs - mean_c);
        }
    }
    double s2_t = ss_t / (n_t - 1), s2_c = ss_c / (n_c - 1);
    return s2_c / n_c + s2_t / n_t;
}

double var_big_blocks(const std::vector<BlockSummary>& blocks) {
    if (blocks.empty()) throw ValidationError("no blocks");
    double n = total_units(blocks);
    double acc = 0;
    for (const auto& b : blocks) {
        if (!b.s2_t || !b.s2_c) {
            throw ValidationError("small block " + b.block_id +
                                  " present; use var_hybrid for hybrid experiments");
        }
        double w = static_cast<double>(b.n_k) * b.n_k / (n * n);
        acc += w * (*b.s2_c / b.n_ck + *b.s2_t / b.n_tk);
    }
    return acc;
}

double var_big_blocks(const ExperimentSummary& summary) { return var_big_blocks(summary.blocks); }

double var_small_equal(const std::vector<BlockSummary>& blocks) {
    size_t K = blocks.size();
    if (K < 2) throw ValidationError("need at least two blocks");
    for (const auto& b : blocks) {
        if (b.n_k != blocks[0].n_k) {
            throw ValidationError(
                "unequal block sizes; use var_small_stratified or var_small_unified");
        }
    }
    double tau = tau_hat_blk(blocks);
    double acc = 0;
    for (const auto& b : blocks) acc += (b.tau_hat_k - tau) * (b.tau_hat_k - tau);
    return acc / (static_cast<double>(K) * (K - 1));
}

double var_small_equal(const ExperimentSummary& summary) { return var_small_equal(summary.blocks); }

double var_small_stratified(const std::vector<BlockSummary>& blocks) {
    if (blocks.empty()) throw ValidationError("no blocks");
    std::map<int, std::vector<const BlockSummary*>> groups;
    for (const auto& b : blocks) groups[b.n_k].push_back(&b);
    double n = total_units(blocks);
    double acc = 0;
    for (const auto& [m_j, group] : groups) {
        double K_j = static_cast<double>(group.size());
        if (group.size() < 2) {
            throw ValidationError("size group too small: " + std::to_string(m_j));
        }
        double tau_j = 0;
        for (const auto* b : group) tau_j += b->tau_hat_k;
        tau_j /= K_j;
        double ss = 0;
        for (const auto* b : group) ss += (b->tau_hat_k - tau_j) * (b->tau_hat_k - tau_j);
        double N_j = m_j * K_j;
        acc += N_j * N_j * ss / (K_j * (K_j - 1));
    }
    return acc / (n * n);
}

double var_small_stratified(const ExperimentSummary& summary) {
    return var_small_stratified(summary.blocks);
}

SbpWeights sbp_weights(const std::vector<int>& sizes) {
    if (sizes.empty()) throw ValidationError("no blocks");
    long n = 0;
    for (int nk : sizes) n += nk;
    // Equal sizes: the closed form simplifies to 1/(K(K-1)) and stays finite
    // even at n_k = n/2 (K = 2), so matched pairs with two blocks work.
    bool equal = std::all_of(sizes.begin(), sizes.end(),
                             [&](int nk) { return nk == sizes[0]; });
    if (equal) {
        size_t K = sizes.size();
        if (K < 2) throw ValidationError("need at least two blocks");
        SbpWeights w;
        w.a.assign(K, 1.0 / (static_cast<double>(K) * (K - 1)));
        w.C = 1.0 / (K - 1.0);
        return w;
    }
    for (int nk : sizes) {
        if (2L * nk >= n) {
            throw ValidationError("half-size guard violated: block of size " +
                                  std::to_string(nk) + " with n = " + std::to_string(n));
        }
    }
    double denom_sum = 0;
    for (int nk : sizes) {
        denom_sum += static_cast<double>(nk) * nk / (n - 2.0 * nk);
    }
    SbpWeights w;
    w.a.reserve(sizes.size());
    for (int nk : sizes) {
        w.a.push_back(static_cast<double>(nk) * nk / ((n - 2.0 * nk) * (n + denom_sum)));
    }
    w.C = denom_sum / (n + denom_sum);
    return w;
}

double var_small_unified(const std::vector<BlockSummary>& blocks) {
    std::vector<int> sizes;
    sizes.reserve(blocks.size());
    for (const auto& b : blocks) sizes.push_back(b.n_k);
    SbpWeights w = sbp_weights(sizes);
    double tau = tau_hat_blk(blocks);
    double acc = 0;
    for (size_t k = 0; k < blocks.size(); ++k) {
        double d = blocks[k].tau_hat_k - tau;
        acc += w.a[k] * d * d;
    }
    return acc;
}

double var_small_unified(const ExperimentSummary& summary) {
    return var_small_unified(summary.blocks);
}

HybridResult var_hybrid(const ExperimentSummary& summary, SmallMethod small_method) {
    std::vector<BlockSummary> big, small;
    for (const auto& b : summary.blocks) {
        (b.cls == BlockClass::big ? big : small).push_back(b);
    }
    HybridResult res;
    double n = summary.n;
    double n_small = summary.n_small;
    double v_big = 0, v_small = 0;
    if (big.empty()) {
        res.warnings.push_back("no big blocks; big component contributes 0");
    } else {
        v_big = var_big_blocks(big);
    }
    if (small.empty()) {
        res.warnings.push_back("no small blocks; small component contributes 0");
    } else {
        v_small = (small_method == SmallMethod::unified) ? var_small_unified(small)
                                                         : var_small_stratified(small);
    }
    double w_big = (n - n_small) / n;
    double w_small = n_small / n;
    res.value = w_big * w_big * v_big + w_small * w_small * v_small;
    return res;
}

double var_srs_unbiased(const ExperimentSummary& summary) {
    double n = summary.n;
    double tau = tau_hat_blk(summary);
    double acc = 0;
    for (const auto& b : summary.blocks) {
        if (!b.s2_t || !b.s2_c) {
            throw ValidationError("insufficient units in arm in block " + b.block_id);
        }
        acc += b.n_k * (b.n_k - 1.0) / (n * (n - 1.0)) * (*b.s2_c / b.n_ck + *b.s2_t / b.n_tk);
        double d = b.tau_hat_k - tau;
        acc += b.n_k / (n * (n - 1.0)) * d * d;
    }
    return acc;
}

double var_rct_yes(const ExperimentSummary& summary, RctYesVariant variant) {
    double K = summary.K;
    if (summary.K < 2) throw ValidationError("need at least two blocks");
    double n = summary.n;
    double nbar = n / K;
    double tau = tau_hat_blk(summary);
    double acc = 0;
    for (const auto& b : summary.blocks) {
        if (variant == RctYesVariant::v1) {
            double d = b.n_k * b.tau_hat_k - nbar * tau;
            acc += d * d;
        } else {
            double d = b.tau_hat_k - tau;
            acc += static_cast<double>(b.n_k) * b.n_k * d * d;
        }
    }
    return acc / (K * (K - 1) * nbar * nbar);
}

double var_plug_in(const ExperimentSummary& summary) {
    // donor averages over big blocks, weighted by donor size
    double wsum = 0, t_acc = 0, c_acc = 0;
    for (const auto& b : summary.blocks) {
        if (b.cls == BlockClass::big) {
            wsum += b.n_k;
            t_acc += b.n_k * *b.s2_t;
            c_acc += b.n_k * *b.s2_c;
        }
    }
    if (wsum == 0) throw ValidationError("no donor blocks for plug-in");
    double donor_t = t_acc / wsum, donor_c = c_acc / wsum;

    double n = summary.n;
    double acc = 0;
    for (const auto& b : summary.blocks) {
        if (b.cls == BlockClass::small && !b.s2_t && !b.s2_c) {
            throw ValidationError("plug-in requires one estimable arm in block " + b.block_id);
        }
        double s2_t = b.s2_t ? *b.s2_t : donor_t;
        double s2_c = b.s2_c ? *b.s2_c : donor_c;
        double w = static_cast<double>(b.n_k) * b.n_k / (n * n);
        acc += w * (s2_c / b.n_ck + s2_t / b.n_tk);
    }
    return acc;
}

EstimateReport estimate(const ExperimentTable& table, const ExperimentSummary& summary,
                        EstimatorId id) {
    EstimateReport rep;
    rep.estimator_id = id;
    double variance = 0;
    if (id == EstimatorId::cr) {
        rep.estimate = tau_hat_cr(table);
        variance = var_neyman_cr(table);
    } else {
        rep.estimate = tau_hat_blk(summary);
        switch (id) {
            case EstimatorId::big:
                variance = var_big_blocks(summary);
                break;
            case EstimatorId::sb_equal:
                variance = var_small_equal(summary);
                break;
            case EstimatorId::sb_m:
                variance = var_small_stratified(summary);
                break;
            case EstimatorId::sb_p:
                variance = var_small_unified(summary);
                break;
            case EstimatorId::hybrid_m: {
                auto h = var_hybrid(summary, SmallMethod::stratified);
                variance = h.value;
                rep.warnings = h.warnings;
                break;
            }
            case EstimatorId::hybrid_p: {
                auto h = var_hybrid(summary, SmallMethod::unified);
                variance = h.value;
                rep.warnings = h.warnings;
                break;
            }
            case EstimatorId::srs:
                variance = var_srs_unbiased(summary);
                break;
            case EstimatorId::rct_yes:
                variance = var_rct_yes(summary, RctYesVariant::v1);
                break;
            case EstimatorId::rct_yes2:
                variance = var_rct_yes(summary, RctYesVariant::v2);
                break;
            case EstimatorId::plugin:
                variance = var_plug_in(summary);
                break;
            default:
                throw ValidationError("unknown estimator");
        }
    }
    rep.variance_estimate = variance;
    rep.se = std::sqrt(variance);
    for (const auto& b : summary.blocks) {
        double w = static_cast<double>(b.n_k) / summary.n;
        rep.per_block.push_back({b.block_id, w, w * b.tau_hat_k});
    }
    return rep;
}

}  // namespace blockvar
