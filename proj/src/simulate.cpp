#include "blockvar/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "blockvar/ksum.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace blockvar {

namespace {

std::string block_label(int index, int count) {
    int width = 1;
    for (int c = count; c >= 10; c /= 10) ++width;
    std::string digits = std::to_string(index);
    return "B" + std::string(width - digits.size(), '0') + digits;
}

void validate_dgp(const DGPConfig& config) {
    if (config.K <= 0) throw ValidationError("K must be positive");
    if (static_cast<int>(config.sizes.size()) != config.K ||
        static_cast<int>(config.n_tk.size()) != config.K) {
        throw ValidationError("sizes and n_tk must have K entries");
    }
    if (std::abs(config.rho) > 1.0) throw ValidationError("rho must be in [-1,1]");
    if (config.a < 0 || config.b < 0) throw ValidationError("a and b must be nonnegative");
    for (int k = 0; k < config.K; ++k) {
        if (config.n_tk[k] < 1 || config.n_tk[k] > config.sizes[k] - 1) {
            throw ValidationError("each block needs at least one unit per arm");
        }
    }
}

// Blocks are indexed smallest-first so the quantile spread puts the larger
// means and effects on the smaller blocks.
std::vector<int> size_order(const DGPConfig& config) {
    std::vector<int> order(config.K);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return config.sizes[i] < config.sizes[j]; });
    return order;
}

// Streaming mean/variance accumulator, shifted by the first value so the
// exhaustive sums reconcile with closed forms to ~1e-12.
class Moments {
public:
    void add(double x) {
        if (count_ == 0) shift_ = x;
        ++count_;
        s1_.add(x - shift_);
        s2_.add((x - shift_) * (x - shift_));
    }
    long long count() const { return count_; }
    double mean() const { return shift_ + s1_.value() / count_; }
    double variance(bool population) const {
        double r = static_cast<double>(count_);
        double ss = s2_.value() - s1_.value() * s1_.value() / r;
        return ss / (population ? r : r - 1.0);
    }

private:
    long long count_ = 0;
    double shift_ = 0.0;
    KahanSum s1_, s2_;
};

// Pooled treated/control moments recovered from block summaries.
void pooled_arms(const ExperimentSummary& s, double& mean_t, double& mean_c, double& s2_t,
                 double& s2_c) {
    double sum_t = 0, sum_c = 0;
    for (const auto& b : s.blocks) {
        sum_t += b.n_tk * b.mean_t;
        sum_c += b.n_ck * b.mean_c;
    }
    mean_t = sum_t / s.n_t;
    mean_c = sum_c / s.n_c;
    double ss_t = 0, ss_c = 0;
    for (const auto& b : s.blocks) {
        if (b.s2_t) ss_t += (b.n_tk - 1) * *b.s2_t;
        if (b.s2_c) ss_c += (b.n_ck - 1) * *b.s2_c;
        ss_t += b.n_tk * (b.mean_t - mean_t) * (b.mean_t - mean_t);
        ss_c += b.n_ck * (b.mean_c - mean_c) * (b.mean_c - mean_c);
    }
    s2_t = ss_t / (s.n_t - 1);
    s2_c = ss_c / (s.n_c - 1);
}

// Point estimate and variance estimate for one estimator on one summary.
void evaluate(const ExperimentSummary& summary, EstimatorId id, double& point, double& vhat) {
    if (id == EstimatorId::cr) {
        if (summary.n_t < 2 || summary.n_c < 2) {
            throw ValidationError("insufficient units in arm");
        }
        double mean_t, mean_c, s2_t, s2_c;
        pooled_arms(summary, mean_t, mean_c, s2_t, s2_c);
        point = mean_t - mean_c;
        vhat = s2_c / summary.n_c + s2_t / summary.n_t;
        return;
    }
    point = tau_hat_blk(summary);
    switch (id) {
        case EstimatorId::big: vhat = var_big_blocks(summary); break;
        case EstimatorId::sb_equal: vhat = var_small_equal(summary); break;
        case EstimatorId::sb_m: vhat = var_small_stratified(summary); break;
        case EstimatorId::sb_p: vhat = var_small_unified(summary); break;
        case EstimatorId::hybrid_m: vhat = var_hybrid(summary, SmallMethod::stratified).value; break;
        case EstimatorId::hybrid_p: vhat = var_hybrid(summary, SmallMethod::unified).value; break;
        case EstimatorId::srs: vhat = var_srs_unbiased(summary); break;
        case EstimatorId::rct_yes: vhat = var_rct_yes(summary, RctYesVariant::v1); break;
        case EstimatorId::rct_yes2: vhat = var_rct_yes(summary, RctYesVariant::v2); break;
        case EstimatorId::plugin: vhat = var_plug_in(summary); break;
        default: throw ValidationError("unknown estimator");
    }
}

// One valid assignment (first n_tk units of each block treated), used to
// probe estimator applicability, which depends only on the design.
Assignment canonical_assignment(const Design& design) {
    Assignment a;
    for (const auto& b : design.blocks) {
        for (int i = 0; i < b.n_k; ++i) {
            a.arms.push_back(i < b.n_tk ? Arm::treated : Arm::control);
        }
    }
    return a;
}

int resolve_threads(int threads) {
#ifdef _OPENMP
    return threads > 0 ? threads : omp_get_max_threads();
#else
    (void)threads;
    return 1;
#endif
}

}  // namespace

double dgp_alpha(const DGPConfig& config, int k) {
    return inv_norm_cdf(1.0 - static_cast<double>(k) / (config.K + 1)) * config.a;
}

double dgp_beta(const DGPConfig& config, int k) {
    return config.base_effect +
           inv_norm_cdf(1.0 - static_cast<double>(k) / (config.K + 1)) * config.b;
}

ScienceTable generate_dgp(const DGPConfig& config) {
    validate_dgp(config);
    std::vector<int> order = size_order(config);
    std::mt19937_64 rng = make_stream(config.seed, 0xD6u);
    double noise = std::sqrt(std::max(0.0, 1.0 - config.rho * config.rho));
    ScienceTable science;
    for (int k = 1; k <= config.K; ++k) {
        ScienceTable::Block block;
        block.block_id = block_label(k, config.K);
        double alpha = dgp_alpha(config, k);
        double beta = dgp_beta(config, k);
        int n_k = config.sizes[order[k - 1]];
        for (int i = 0; i < n_k; ++i) {
            double z1, z2;
            normal_pair(rng, z1, z2);
            block.y0.push_back(alpha + z1);
            block.y1.push_back(alpha + beta + config.rho * z1 + noise * z2);
        }
        science.blocks.push_back(std::move(block));
    }
    return science;
}

Design design_for_dgp(const DGPConfig& config) {
    validate_dgp(config);
    std::vector<int> order = size_order(config);
    Design d;
    for (int k = 1; k <= config.K; ++k) {
        d.blocks.push_back(
            {block_label(k, config.K), config.sizes[order[k - 1]], config.n_tk[order[k - 1]]});
    }
    return d;
}

namespace {

// Partial Fisher-Yates: mark n_treated of the n slots starting at `offset`.
void assign_slice(std::vector<Arm>& arms, int offset, int n, int n_treated,
                  std::mt19937_64& rng, std::vector<int>& scratch) {
    scratch.resize(n);
    std::iota(scratch.begin(), scratch.end(), 0);
    for (int i = 0; i < n_treated; ++i) {
        int j = i + static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(n - i)));
        std::swap(scratch[i], scratch[j]);
        arms[offset + scratch[i]] = Arm::treated;
    }
}

}  // namespace

Assignment draw_assignment(const Design& design, Mechanism mechanism, std::mt19937_64& rng) {
    Assignment a;
    a.arms.assign(design.n(), Arm::control);
    std::vector<int> scratch;
    if (mechanism == Mechanism::blocked) {
        int offset = 0;
        for (const auto& b : design.blocks) {
            assign_slice(a.arms, offset, b.n_k, b.n_tk, rng, scratch);
            offset += b.n_k;
        }
    } else {
        assign_slice(a.arms, 0, design.n(), design.n_t(), rng, scratch);
    }
    return a;
}

namespace {

// C(n, k), throwing as soon as the running value exceeds the cap so large
// designs never overflow.
long long binom_capped(int n, int k, long long cap) {
    k = std::min(k, n - k);
    long long r = 1;
    for (int i = 1; i <= k; ++i) {
        r = r * (n - k + i) / i;
        if (r > cap) {
            throw ValidationError(
                "assignment count exceeds enumeration cap; use Monte Carlo sampling");
        }
    }
    return r;
}

}  // namespace

long long count_assignments(const Design& design, long long cap) {
    long long total = 1;
    for (const auto& b : design.blocks) {
        long long c = binom_capped(b.n_k, b.n_tk, cap);
        if (total > cap / c) {
            throw ValidationError(
                "assignment count exceeds enumeration cap; use Monte Carlo sampling");
        }
        total *= c;
    }
    return total;
}

void enumerate_assignments(const Design& design,
                           const std::function<void(const Assignment&)>& visit, long long cap) {
    count_assignments(design, cap);
    int K = static_cast<int>(design.blocks.size());
    std::vector<int> offsets(K, 0);
    int n = 0;
    for (int k = 0; k < K; ++k) {
        offsets[k] = n;
        n += design.blocks[k].n_k;
    }
    // per-block combination odometer: treated positions in ascending order
    std::vector<std::vector<int>> combos(K);
    for (int k = 0; k < K; ++k) {
        combos[k].resize(design.blocks[k].n_tk);
        std::iota(combos[k].begin(), combos[k].end(), 0);
    }
    Assignment a;
    a.arms.assign(n, Arm::control);
    auto apply_block = [&](int k) {
        for (int i = 0; i < design.blocks[k].n_k; ++i) a.arms[offsets[k] + i] = Arm::control;
        for (int pos : combos[k]) a.arms[offsets[k] + pos] = Arm::treated;
    };
    for (int k = 0; k < K; ++k) apply_block(k);
    auto next_combo = [&](int k) -> bool {
        auto& c = combos[k];
        int m = design.blocks[k].n_tk;
        int nk = design.blocks[k].n_k;
        int i = m - 1;
        while (i >= 0 && c[i] == nk - m + i) --i;
        if (i < 0) {
            std::iota(c.begin(), c.end(), 0);
            return false;  // wrapped
        }
        ++c[i];
        for (int j = i + 1; j < m; ++j) c[j] = c[j - 1] + 1;
        return true;
    };
    for (;;) {
        visit(a);
        int k = K - 1;
        while (k >= 0) {
            bool advanced = next_combo(k);
            apply_block(k);
            if (advanced) break;
            --k;
        }
        if (k < 0) return;
    }
}

ExperimentSummary summarize_assignment(const ScienceTable& science, const Design& design,
                                       const Assignment& assignment) {
    if (design.blocks.size() != science.blocks.size()) {
        throw ValidationError("design does not match science table block count");
    }
    ExperimentSummary s;
    s.K = static_cast<int>(science.blocks.size());
    int total_n = 0;
    for (size_t k = 0; k < design.blocks.size(); ++k) {
        if (design.blocks[k].n_k != science.blocks[k].n_k()) {
            throw ValidationError("design mismatch in block " + science.blocks[k].block_id);
        }
        total_n += design.blocks[k].n_k;
    }
    if (static_cast<int>(assignment.arms.size()) != total_n) {
        throw ValidationError("assignment length does not match design");
    }
    int offset = 0;
    for (int k = 0; k < s.K; ++k) {
        const auto& sb = science.blocks[k];
        BlockSummary b;
        b.block_id = sb.block_id;
        b.n_k = sb.n_k();
        double sum_t = 0, sum_c = 0;
        for (int i = 0; i < b.n_k; ++i) {
            if (assignment.arms[offset + i] == Arm::treated) {
                sum_t += sb.y1[i];
                ++b.n_tk;
            } else {
                sum_c += sb.y0[i];
                ++b.n_ck;
            }
        }
        if (b.n_tk == 0 || b.n_ck == 0) {
            throw ValidationError("no overlap in block " + b.block_id);
        }
        b.mean_t = sum_t / b.n_tk;
        b.mean_c = sum_c / b.n_ck;
        b.tau_hat_k = b.mean_t - b.mean_c;
        double ss_t = 0, ss_c = 0;
        for (int i = 0; i < b.n_k; ++i) {
            if (assignment.arms[offset + i] == Arm::treated) {
                ss_t += (sb.y1[i] - b.mean_t) * (sb.y1[i] - b.mean_t);
            } else {
                ss_c += (sb.y0[i] - b.mean_c) * (sb.y0[i] - b.mean_c);
            }
        }
        if (b.n_tk >= 2) b.s2_t = ss_t / (b.n_tk - 1);
        if (b.n_ck >= 2) b.s2_c = ss_c / (b.n_ck - 1);
        b.cls = (b.n_tk >= 2 && b.n_ck >= 2) ? BlockClass::big : BlockClass::small;
        s.n += b.n_k;
        s.n_t += b.n_tk;
        s.n_c += b.n_ck;
        if (b.cls == BlockClass::small) s.n_small += b.n_k;
        offset += b.n_k;
        s.blocks.push_back(std::move(b));
    }
    std::map<int, int> group_counts;
    for (const auto& b : s.blocks) {
        if (b.cls == BlockClass::small) ++group_counts[b.n_k];
    }
    for (const auto& [m_j, K_j] : group_counts) s.size_groups.push_back({m_j, K_j, m_j * K_j});
    s.J = static_cast<int>(s.size_groups.size());
    s.p_k_equal = true;
    for (const auto& b : s.blocks) {
        long long lhs = static_cast<long long>(b.n_tk) * s.blocks[0].n_k;
        long long rhs = static_cast<long long>(s.blocks[0].n_tk) * b.n_k;
        if (lhs != rhs) s.p_k_equal = false;
    }
    return s;
}

namespace {

struct Probe {
    std::vector<bool> usable;
    std::vector<std::vector<std::string>> warnings;
};

Probe probe_estimators(const ScienceTable& science, const Design& design,
                       const std::vector<EstimatorId>& estimators) {
    ExperimentSummary summary = summarize_assignment(science, design, canonical_assignment(design));
    Probe p;
    for (EstimatorId id : estimators) {
        try {
            double point, vhat;
            evaluate(summary, id, point, vhat);
            p.usable.push_back(true);
            if (id == EstimatorId::hybrid_m) {
                p.warnings.push_back(var_hybrid(summary, SmallMethod::stratified).warnings);
            } else if (id == EstimatorId::hybrid_p) {
                p.warnings.push_back(var_hybrid(summary, SmallMethod::unified).warnings);
            } else {
                p.warnings.push_back({});
            }
        } catch (const ValidationError& e) {
            p.usable.push_back(false);
            p.warnings.push_back({std::string("skipped: ") + e.what()});
        }
    }
    return p;
}

MCResult finish_finite(const ScienceTable& science, const Design& design,
                       const std::vector<EstimatorId>& estimators, const Probe& probe,
                       long long R, bool population, const std::vector<double>& taus,
                       const std::vector<double>& points, const std::vector<double>& vhats) {
    size_t E = estimators.size();
    MCResult res;
    res.R = R;
    Moments tau_m;
    for (long long r = 0; r < R; ++r) tau_m.add(taus[r]);
    res.mean_tau = tau_m.mean();
    res.var_tau = tau_m.variance(population);
    res.true_var = true_var_finite(science, design, Mechanism::blocked);
    res.true_var_se = 0.0;
    for (size_t e = 0; e < E; ++e) {
        EstimatorStats st;
        st.id = estimators[e];
        st.warnings = probe.warnings[e];
        if (!probe.usable[e]) {
            st.skipped = true;
            res.estimators.push_back(std::move(st));
            continue;
        }
        Moments pm, vm;
        for (long long r = 0; r < R; ++r) {
            pm.add(points[r * E + e]);
            vm.add(vhats[r * E + e]);
        }
        st.mean_point = pm.mean();
        st.var_point = pm.variance(population);
        st.mean_vhat = vm.mean();
        st.var_vhat = vm.variance(population);
        st.rel_bias = (st.mean_vhat - res.true_var) / res.true_var;
        st.mc_se = (R > 1) ? std::sqrt(vm.variance(false) / R) : 0.0;
        res.estimators.push_back(std::move(st));
    }
    return res;
}

MCResult run_finite(const ScienceTable& science, const Design& design,
                    const std::vector<EstimatorId>& estimators, long long R, std::uint64_t seed,
                    MCMode mode, int threads, bool serial_reference) {
    if (science.blocks.empty()) throw ValidationError("empty science table");
    if (mode == MCMode::sampled && R < 2) throw ValidationError("need R >= 2");
    Probe probe = probe_estimators(science, design, estimators);
    size_t E = estimators.size();
    if (mode == MCMode::exhaustive) {
        R = count_assignments(design);
        std::vector<double> taus(R), points(R * E), vhats(R * E);
        long long r = 0;
        enumerate_assignments(design, [&](const Assignment& a) {
            ExperimentSummary summary = summarize_assignment(science, design, a);
            taus[r] = tau_hat_blk(summary);
            for (size_t e = 0; e < E; ++e) {
                if (!probe.usable[e]) continue;
                evaluate(summary, estimators[e], points[r * E + e], vhats[r * E + e]);
            }
            ++r;
        });
        return finish_finite(science, design, estimators, probe, R, true, taus, points, vhats);
    }
    std::vector<double> taus(R), points(R * E), vhats(R * E);
    auto body = [&](long long r) {
        std::mt19937_64 rng = make_stream(seed, static_cast<std::uint64_t>(r));
        Assignment a = draw_assignment(design, Mechanism::blocked, rng);
        ExperimentSummary summary = summarize_assignment(science, design, a);
        taus[r] = tau_hat_blk(summary);
        for (size_t e = 0; e < E; ++e) {
            if (!probe.usable[e]) continue;
            evaluate(summary, estimators[e], points[r * E + e], vhats[r * E + e]);
        }
    };
    if (serial_reference) {
        for (long long r = 0; r < R; ++r) body(r);
    } else {
        int nt = resolve_threads(threads);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt)
#endif
        for (long long r = 0; r < R; ++r) body(r);
        (void)nt;
    }
    return finish_finite(science, design, estimators, probe, R, false, taus, points, vhats);
}

}  // namespace

MCResult monte_carlo_study(const ScienceTable& science, const Design& design,
                           const std::vector<EstimatorId>& estimators, long long R,
                           std::uint64_t seed, MCMode mode, int threads) {
    return run_finite(science, design, estimators, R, seed, mode, threads, false);
}

MCResult monte_carlo_study_serial(const ScienceTable& science, const Design& design,
                                  const std::vector<EstimatorId>& estimators, long long R,
                                  std::uint64_t seed, MCMode mode) {
    return run_finite(science, design, estimators, R, seed, mode, 1, true);
}

namespace {

void validate_superpop(const SuperpopInputs& in) {
    switch (in.framework) {
        case Framework::m1:
            if (in.m1.strata.empty()) throw ValidationError("m1 framework needs strata");
            break;
        case Framework::srs: {
            const auto& c = in.srs;
            if (c.sizes.empty() || c.sizes.size() != c.n_tk.size()) {
                throw ValidationError("srs framework needs aligned sizes and n_tk");
            }
            if (std::abs(c.rho) > 1.0) throw ValidationError("rho must be in [-1,1]");
            for (size_t k = 0; k < c.sizes.size(); ++k) {
                if (c.n_tk[k] < 1 || c.n_tk[k] > c.sizes[k] - 1) {
                    throw ValidationError("each block needs at least one unit per arm");
                }
            }
            break;
        }
        case Framework::m2: {
            const auto& f = in.m2;
            if (f.K < 1 || f.pool.empty()) {
                throw ValidationError("m2 framework needs K >= 1 and a nonempty pool");
            }
            for (const auto& cand : f.pool) {
                if (cand.y0.size() != cand.y1.size() || cand.y0.size() < 2) {
                    throw ValidationError("each pool stratum needs >= 2 matched outcome pairs");
                }
                if (cand.n_tk < 1 || cand.n_tk >= static_cast<int>(cand.y0.size())) {
                    throw ValidationError("each block needs at least one unit per arm");
                }
            }
            break;
        }
    }
}

// Draw one science table + design from the framework.
void sample_population(const SuperpopInputs& in, std::mt19937_64& rng, ScienceTable& science,
                       Design& design) {
    science.blocks.clear();
    design.blocks.clear();
    switch (in.framework) {
        case Framework::m1: {
            int K = static_cast<int>(in.m1.strata.size());
            for (int k = 0; k < K; ++k) {
                const Stratum& st = in.m1.strata[k];
                double sc = std::sqrt(st.var_c);
                double cov = (st.var_t + st.var_c - st.var_tc) / 2.0;
                double r1 = (sc > 0) ? cov / sc : 0.0;
                double r2 = std::sqrt(std::max(0.0, st.var_t - r1 * r1));
                ScienceTable::Block block;
                block.block_id = block_label(k + 1, K);
                for (int i = 0; i < st.n_k; ++i) {
                    double z1, z2;
                    normal_pair(rng, z1, z2);
                    block.y0.push_back(st.mu_c + sc * z1);
                    block.y1.push_back(st.mu_t + r1 * z1 + r2 * z2);
                }
                design.blocks.push_back({block.block_id, st.n_k, st.n_tk});
                science.blocks.push_back(std::move(block));
            }
            break;
        }
        case Framework::srs: {
            const SrsConfig& c = in.srs;
            int n = 0;
            for (int nk : c.sizes) n += nk;
            std::vector<double> x(n), y0(n), y1(n);
            double noise = std::sqrt(std::max(0.0, 1.0 - c.rho * c.rho));
            for (int i = 0; i < n; ++i) {
                double z1, z2, u1, u2;
                normal_pair(rng, z1, z2);
                x[i] = z1;
                u1 = z2;
                double z3, z4;
                normal_pair(rng, z3, z4);
                u2 = c.rho * u1 + noise * z3;
                y0[i] = c.slope_y0 * x[i] + u1;
                y1[i] = c.slope_y0 * x[i] + c.base_effect + c.slope_tau * x[i] + u2;
            }
            // fixed post-sampling blocking rule: sort on the covariate, cut
            // consecutive groups of the configured sizes
            std::vector<int> order(n);
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](int i, int j) { return x[i] < x[j]; });
            int K = static_cast<int>(c.sizes.size());
            int pos = 0;
            for (int k = 0; k < K; ++k) {
                ScienceTable::Block block;
                block.block_id = block_label(k + 1, K);
                for (int i = 0; i < c.sizes[k]; ++i) {
                    block.y0.push_back(y0[order[pos]]);
                    block.y1.push_back(y1[order[pos]]);
                    ++pos;
                }
                design.blocks.push_back({block.block_id, c.sizes[k], c.n_tk[k]});
                science.blocks.push_back(std::move(block));
            }
            break;
        }
        case Framework::m2: {
            // Strata come from an infinite population, so the K draws are
            // independent picks from the candidate distribution.
            const SamplingFrame& f = in.m2;
            int pool_n = static_cast<int>(f.pool.size());
            for (int k = 0; k < f.K; ++k) {
                int j = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(pool_n)));
                const auto& cand = f.pool[j];
                ScienceTable::Block block;
                block.block_id = block_label(k + 1, f.K);
                block.y0 = cand.y0;
                block.y1 = cand.y1;
                design.blocks.push_back(
                    {block.block_id, static_cast<int>(cand.y0.size()), cand.n_tk});
                science.blocks.push_back(std::move(block));
            }
            break;
        }
    }
}

struct OuterRecord {
    double tau_sum = 0.0, tau2_sum = 0.0;
    std::vector<double> point_sum, point2_sum, vhat_sum, vhat2_sum;
    std::vector<char> failed;
};

}  // namespace

namespace {

MCResult run_superpop(const SuperpopInputs& inputs, const std::vector<EstimatorId>& estimators,
                      long long R_outer, long long R_inner, std::uint64_t seed, int threads,
                      bool serial_reference) {
    validate_superpop(inputs);
    if (R_outer < 2 || R_inner < 1) throw ValidationError("need R_outer >= 2 and R_inner >= 1");
    size_t E = estimators.size();
    std::vector<OuterRecord> recs(R_outer);
    auto body = [&](long long r) {
        std::mt19937_64 rng = make_stream(seed, static_cast<std::uint64_t>(r));
        ScienceTable science;
        Design design;
        sample_population(inputs, rng, science, design);
        OuterRecord& rec = recs[r];
        rec.point_sum.assign(E, 0.0);
        rec.point2_sum.assign(E, 0.0);
        rec.vhat_sum.assign(E, 0.0);
        rec.vhat2_sum.assign(E, 0.0);
        rec.failed.assign(E, 0);
        for (long long i = 0; i < R_inner; ++i) {
            Assignment a = draw_assignment(design, Mechanism::blocked, rng);
            ExperimentSummary summary = summarize_assignment(science, design, a);
            double tau = tau_hat_blk(summary);
            rec.tau_sum += tau;
            rec.tau2_sum += tau * tau;
            for (size_t e = 0; e < E; ++e) {
                double point = 0, vhat = 0;
                try {
                    evaluate(summary, estimators[e], point, vhat);
                } catch (const ValidationError&) {
                    rec.failed[e] = 1;
                    continue;
                }
                rec.point_sum[e] += point;
                rec.point2_sum[e] += point * point;
                rec.vhat_sum[e] += vhat;
                rec.vhat2_sum[e] += vhat * vhat;
            }
        }
    };
    if (serial_reference) {
        for (long long r = 0; r < R_outer; ++r) body(r);
    } else {
        int nt = resolve_threads(threads);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt)
#endif
        for (long long r = 0; r < R_outer; ++r) body(r);
        (void)nt;
    }

    MCResult res;
    res.R = R_outer * R_inner;
    double Ri = static_cast<double>(R_inner);
    double Ro = static_cast<double>(R_outer);
    KahanSum tau_mean_acc, tau2_acc;
    for (const auto& rec : recs) {
        tau_mean_acc.add(rec.tau_sum / Ri);
        tau2_acc.add(rec.tau2_sum / Ri);
    }
    res.mean_tau = tau_mean_acc.value() / Ro;
    double e_tau2 = tau2_acc.value() / Ro;
    res.var_tau = e_tau2 - res.mean_tau * res.mean_tau;
    res.true_var = res.var_tau;
    // clustered SE of the empirical variance: per-outer means of
    // (tau - overall mean)^2
    {
        KahanSum ss;
        for (const auto& rec : recs) {
            double v_r = rec.tau2_sum / Ri - 2.0 * res.mean_tau * rec.tau_sum / Ri +
                         res.mean_tau * res.mean_tau;
            ss.add((v_r - res.var_tau) * (v_r - res.var_tau));
        }
        res.true_var_se = std::sqrt(ss.value() / (Ro - 1.0) / Ro);
    }
    for (size_t e = 0; e < E; ++e) {
        EstimatorStats st;
        st.id = estimators[e];
        bool failed = false;
        for (const auto& rec : recs) failed = failed || rec.failed[e];
        if (failed) {
            st.skipped = true;
            st.warnings.push_back("skipped: estimator not applicable to every sampled design");
            res.estimators.push_back(std::move(st));
            continue;
        }
        KahanSum pm, p2m, vm, v2m;
        for (const auto& rec : recs) {
            pm.add(rec.point_sum[e] / Ri);
            p2m.add(rec.point2_sum[e] / Ri);
            vm.add(rec.vhat_sum[e] / Ri);
            v2m.add(rec.vhat2_sum[e] / Ri);
        }
        st.mean_point = pm.value() / Ro;
        st.var_point = p2m.value() / Ro - st.mean_point * st.mean_point;
        st.mean_vhat = vm.value() / Ro;
        st.var_vhat = v2m.value() / Ro - st.mean_vhat * st.mean_vhat;
        st.rel_bias = (st.mean_vhat - res.true_var) / res.true_var;
        KahanSum ss;
        for (const auto& rec : recs) {
            double m_r = rec.vhat_sum[e] / Ri;
            ss.add((m_r - st.mean_vhat) * (m_r - st.mean_vhat));
        }
        st.mc_se = std::sqrt(ss.value() / (Ro - 1.0) / Ro);
        res.estimators.push_back(std::move(st));
    }
    return res;
}

}  // namespace

MCResult superpopulation_study(const SuperpopInputs& inputs,
                               const std::vector<EstimatorId>& estimators, long long R_outer,
                               long long R_inner, std::uint64_t seed, int threads) {
    return run_superpop(inputs, estimators, R_outer, R_inner, seed, threads, false);
}

MCResult superpopulation_study_serial(const SuperpopInputs& inputs,
                                      const std::vector<EstimatorId>& estimators,
                                      long long R_outer, long long R_inner, std::uint64_t seed) {
    return run_superpop(inputs, estimators, R_outer, R_inner, seed, 1, true);
}

double r2_blocks(const ScienceTable& science, std::vector<std::string>* warnings) {
    if (science.blocks.empty()) throw ValidationError("empty science table");
    double n = science.n();
    KahanSum grand;
    for (const auto& b : science.blocks) {
        for (size_t i = 0; i < b.y0.size(); ++i) grand.add((b.y0[i] + b.y1[i]) / 2.0);
    }
    double mean = grand.value() / n;
    KahanSum between, total;
    for (const auto& b : science.blocks) {
        KahanSum bm;
        for (size_t i = 0; i < b.y0.size(); ++i) bm.add((b.y0[i] + b.y1[i]) / 2.0);
        double block_mean = bm.value() / b.n_k();
        between.add(b.n_k() * (block_mean - mean) * (block_mean - mean));
        for (size_t i = 0; i < b.y0.size(); ++i) {
            double m = (b.y0[i] + b.y1[i]) / 2.0;
            total.add((m - mean) * (m - mean));
        }
    }
    if (total.value() <= 0.0) {
        if (warnings) warnings->push_back("no variation in mean potential outcomes; R2 set to 0");
        return 0.0;
    }
    return between.value() / total.value();
}

double block_effect_sd(const ScienceTable& science) {
    double n = science.n();
    std::vector<double> taus, weights;
    for (const auto& b : science.blocks) {
        taus.push_back(b.tau());
        weights.push_back(b.n_k() / n);
    }
    return std::sqrt(var_k_weighted(taus, weights));
}

}  // namespace blockvar
