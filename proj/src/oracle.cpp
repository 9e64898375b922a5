#include "blockvar/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "blockvar/ksum.hpp"
#include "json.hpp"

namespace blockvar {

namespace {

double mean_of(const std::vector<double>& v) {
    KahanSum s;
    for (double x : v) s.add(x);
    return s.value() / static_cast<double>(v.size());
}

double s2_of(const std::vector<double>& v) {
    if (v.size() < 2) throw ValidationError("sample variance needs at least two values");
    double m = mean_of(v);
    KahanSum s;
    for (double x : v) s.add((x - m) * (x - m));
    return s.value() / static_cast<double>(v.size() - 1);
}

void check_design(const ScienceTable& science, const Design& design) {
    if (design.blocks.size() != science.blocks.size()) {
        throw ValidationError("design does not match science table block count");
    }
    for (size_t k = 0; k < design.blocks.size(); ++k) {
        const auto& d = design.blocks[k];
        const auto& b = science.blocks[k];
        if (d.block_id != b.block_id || d.n_k != b.n_k()) {
            throw ValidationError("design mismatch in block " + b.block_id);
        }
        if (d.n_tk < 1 || d.n_tk > d.n_k - 1) {
            throw ValidationError("design has an empty arm in block " + b.block_id);
        }
    }
}

// var(tau_hat_k | S) for one block under its design
double var_tau_hat_k(const ScienceTable::Block& b, const DesignBlock& d) {
    int n_ck = d.n_k - d.n_tk;
    return b.s2_y0() / n_ck + b.s2_y1() / d.n_tk - b.s2_tau() / d.n_k;
}

}  // namespace

double ScienceTable::Block::mean_y0() const { return mean_of(y0); }
double ScienceTable::Block::mean_y1() const { return mean_of(y1); }
double ScienceTable::Block::s2_y0() const { return s2_of(y0); }
double ScienceTable::Block::s2_y1() const { return s2_of(y1); }
double ScienceTable::Block::s2_tau() const {
    std::vector<double> tau(y0.size());
    for (size_t i = 0; i < y0.size(); ++i) tau[i] = y1[i] - y0[i];
    return s2_of(tau);
}

ScienceTable ScienceTable::from_units(const std::vector<ScienceUnit>& units) {
    std::map<std::string, Block> by_block;
    for (const auto& u : units) {
        auto& b = by_block[u.block_id];
        b.block_id = u.block_id;
        b.y0.push_back(u.y0);
        b.y1.push_back(u.y1);
    }
    ScienceTable t;
    for (auto& [id, b] : by_block) t.blocks.push_back(std::move(b));
    return t;
}

int ScienceTable::n() const {
    int total = 0;
    for (const auto& b : blocks) total += b.n_k();
    return total;
}

double ScienceTable::tau_sate() const {
    KahanSum s;
    for (const auto& b : blocks) {
        for (size_t i = 0; i < b.y0.size(); ++i) s.add(b.y1[i] - b.y0[i]);
    }
    return s.value() / n();
}

double ScienceTable::mean_y0() const {
    KahanSum s;
    for (const auto& b : blocks)
        for (double x : b.y0) s.add(x);
    return s.value() / n();
}

double ScienceTable::mean_y1() const {
    KahanSum s;
    for (const auto& b : blocks)
        for (double x : b.y1) s.add(x);
    return s.value() / n();
}

namespace {
double s2_flat(const ScienceTable& t, bool treated, bool effect) {
    std::vector<double> all;
    for (const auto& b : t.blocks) {
        for (size_t i = 0; i < b.y0.size(); ++i) {
            all.push_back(effect ? b.y1[i] - b.y0[i] : (treated ? b.y1[i] : b.y0[i]));
        }
    }
    return s2_of(all);
}
}  // namespace

double ScienceTable::s2_y0() const { return s2_flat(*this, false, false); }
double ScienceTable::s2_y1() const { return s2_flat(*this, true, false); }
double ScienceTable::s2_tau() const { return s2_flat(*this, false, true); }

int Design::n() const {
    int total = 0;
    for (const auto& b : blocks) total += b.n_k;
    return total;
}

int Design::n_t() const {
    int total = 0;
    for (const auto& b : blocks) total += b.n_tk;
    return total;
}

bool Design::equal_proportions() const {
    for (size_t i = 1; i < blocks.size(); ++i) {
        long long lhs = static_cast<long long>(blocks[i].n_tk) * blocks[0].n_k;
        long long rhs = static_cast<long long>(blocks[0].n_tk) * blocks[i].n_k;
        if (lhs != rhs) return false;
    }
    return true;
}

Design Design::for_science(const ScienceTable& science, const std::vector<int>& n_treated) {
    if (n_treated.size() != science.blocks.size()) {
        throw ValidationError("treated counts do not match block count");
    }
    Design d;
    for (size_t k = 0; k < science.blocks.size(); ++k) {
        d.blocks.push_back({science.blocks[k].block_id, science.blocks[k].n_k(), n_treated[k]});
    }
    check_design(science, d);
    return d;
}

int StrataPopulation::n() const {
    int total = 0;
    for (const auto& s : strata) total += s.n_k;
    return total;
}

int StrataPopulation::n_t() const {
    int total = 0;
    for (const auto& s : strata) total += s.n_tk;
    return total;
}

double StrataPopulation::tau() const {
    double total = n();
    KahanSum s;
    for (const auto& st : strata) s.add(st.n_k / total * st.tau());
    return s.value();
}

bool StrataPopulation::equal_proportions() const {
    for (size_t i = 1; i < strata.size(); ++i) {
        long long lhs = static_cast<long long>(strata[i].n_tk) * strata[0].n_k;
        long long rhs = static_cast<long long>(strata[0].n_tk) * strata[i].n_k;
        if (lhs != rhs) return false;
    }
    return true;
}

StrataPopulation parse_strata_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid strata JSON: ") + e.what());
    }
    if (!j.is_array() || j.empty()) {
        throw ValidationError("strata JSON must be a non-empty array");
    }
    StrataPopulation pop;
    double weight_sum = 0;
    for (const auto& obj : j) {
        Stratum s;
        auto need = [&](const char* field) -> const nlohmann::json& {
            if (!obj.contains(field)) {
                throw ValidationError(std::string("strata JSON missing field '") + field + "'");
            }
            return obj.at(field);
        };
        s.label = need("label").get<std::string>();
        s.weight = need("weight").get<double>();
        s.mu_t = need("mu_t").get<double>();
        s.mu_c = need("mu_c").get<double>();
        s.var_t = need("var_t").get<double>();
        s.var_c = need("var_c").get<double>();
        s.var_tc = need("var_tc").get<double>();
        s.n_k = need("n_k").get<int>();
        s.n_tk = need("n_tk").get<int>();
        if (s.var_t < 0 || s.var_c < 0 || s.var_tc < 0) {
            throw ValidationError("negative variance in stratum " + s.label);
        }
        double bound = s.var_t + s.var_c + 2 * std::sqrt(s.var_t * s.var_c);
        if (s.var_tc > bound * (1 + 1e-12) + 1e-12) {
            throw ValidationError("var_tc exceeds covariance bound in stratum " + s.label);
        }
        if (s.n_tk < 1 || s.n_tk > s.n_k - 1) {
            throw ValidationError("invalid n_tk in stratum " + s.label);
        }
        weight_sum += s.weight;
        pop.strata.push_back(std::move(s));
    }
    if (std::abs(weight_sum - 1.0) > 1e-9) {
        throw ValidationError("strata weights must sum to 1");
    }
    return pop;
}

double var_k_weighted(const std::vector<double>& values, const std::vector<double>& weights) {
    if (values.size() != weights.size()) throw ValidationError("length mismatch");
    KahanSum wsum;
    for (double w : weights) wsum.add(w);
    if (std::abs(wsum.value() - 1.0) > 1e-9) throw ValidationError("weights must sum to 1");
    KahanSum m;
    for (size_t k = 0; k < values.size(); ++k) m.add(weights[k] * values[k]);
    double mu = m.value();
    KahanSum acc;
    for (size_t k = 0; k < values.size(); ++k) {
        acc.add(weights[k] * (values[k] - mu) * (values[k] - mu));
    }
    return acc.value();
}

double cov_k_weighted(const std::vector<double>& x, const std::vector<double>& y,
                      const std::vector<double>& weights) {
    if (x.size() != y.size() || x.size() != weights.size()) {
        throw ValidationError("length mismatch");
    }
    KahanSum wsum;
    for (double w : weights) wsum.add(w);
    if (std::abs(wsum.value() - 1.0) > 1e-9) throw ValidationError("weights must sum to 1");
    KahanSum mx, my;
    for (size_t k = 0; k < x.size(); ++k) {
        mx.add(weights[k] * x[k]);
        my.add(weights[k] * y[k]);
    }
    KahanSum acc;
    for (size_t k = 0; k < x.size(); ++k) {
        acc.add(weights[k] * (x[k] - mx.value()) * (y[k] - my.value()));
    }
    return acc.value();
}

double true_var_finite(const ScienceTable& science, const Design& design, Mechanism mechanism) {
    check_design(science, design);
    double n = design.n();
    if (mechanism == Mechanism::complete) {
        double n_t = design.n_t();
        double n_c = n - n_t;
        return science.s2_y0() / n_c + science.s2_y1() / n_t - science.s2_tau() / n;
    }
    KahanSum acc;
    for (size_t k = 0; k < science.blocks.size(); ++k) {
        const auto& b = science.blocks[k];
        double w = static_cast<double>(b.n_k()) * b.n_k() / (n * n);
        acc.add(w * var_tau_hat_k(b, design.blocks[k]));
    }
    return acc.value();
}

namespace {

// stratified small-block bias, shared by the finite and M1 forms: taus are
// block effects (sample or population), sizes the block sizes
double stratified_bias(const std::vector<double>& taus, const std::vector<int>& sizes) {
    std::map<int, std::vector<double>> groups;
    for (size_t k = 0; k < taus.size(); ++k) groups[sizes[k]].push_back(taus[k]);
    double n_small = 0;
    for (int nk : sizes) n_small += nk;
    KahanSum acc;
    for (const auto& [m_j, group] : groups) {
        double K_j = static_cast<double>(group.size());
        if (group.size() < 2) {
            throw ValidationError("size group too small: " + std::to_string(m_j));
        }
        double tau_j = mean_of(group);
        KahanSum ss;
        for (double t : group) ss.add((t - tau_j) * (t - tau_j));
        acc.add(K_j * m_j * m_j / (n_small * n_small * (K_j - 1)) * ss.value());
    }
    return acc.value();
}

double unified_bias(const std::vector<double>& taus, const std::vector<int>& sizes) {
    SbpWeights w = sbp_weights(sizes);
    double n_small = 0;
    KahanSum tau_acc;
    for (size_t k = 0; k < taus.size(); ++k) {
        n_small += sizes[k];
        tau_acc.add(sizes[k] * taus[k]);
    }
    double tau_sb = tau_acc.value() / n_small;
    KahanSum acc;
    for (size_t k = 0; k < taus.size(); ++k) {
        acc.add(w.a[k] * (taus[k] - tau_sb) * (taus[k] - tau_sb));
    }
    return acc.value();
}

}  // namespace

double bias_finite(const ScienceTable& science, const Design& design, EstimatorId estimator) {
    check_design(science, design);
    double n = design.n();
    std::vector<double> taus;
    std::vector<int> sizes;
    for (const auto& b : science.blocks) {
        taus.push_back(b.tau());
        sizes.push_back(b.n_k());
    }
    switch (estimator) {
        case EstimatorId::cr:
            return science.s2_tau() / n;
        case EstimatorId::big: {
            KahanSum acc;
            for (const auto& b : science.blocks) acc.add(b.n_k() / (n * n) * b.s2_tau());
            return acc.value();
        }
        case EstimatorId::sb_equal:
            for (int nk : sizes) {
                if (nk != sizes[0]) {
                    throw ValidationError("unequal block sizes for the equal-size estimator");
                }
            }
            return stratified_bias(taus, sizes);
        case EstimatorId::sb_m:
            return stratified_bias(taus, sizes);
        case EstimatorId::sb_p:
            return unified_bias(taus, sizes);
        default:
            throw ValidationError("no closed-form bias for estimator " + to_string(estimator));
    }
}

DesignComparison compare_designs_finite_detail(const ScienceTable& science, const Design& design) {
    check_design(science, design);
    if (!design.equal_proportions()) {
        throw ValidationError(
            "unequal treated proportions; use compare_designs_unequal (M1) or subtract the "
            "true variances directly");
    }
    double n = design.n();
    double p = design.n_t() / n;
    std::vector<double> combo, weights;
    for (size_t k = 0; k < science.blocks.size(); ++k) {
        const auto& b = science.blocks[k];
        combo.push_back(std::sqrt(p / (1 - p)) * b.mean_y0() +
                        std::sqrt((1 - p) / p) * b.mean_y1());
        weights.push_back(b.n_k() / n);
    }
    DesignComparison res;
    res.between_term = var_k_weighted(combo, weights) / (n - 1);
    KahanSum within;
    for (size_t k = 0; k < science.blocks.size(); ++k) {
        const auto& b = science.blocks[k];
        within.add(b.n_k() * (n - b.n_k()) / (n * n) * var_tau_hat_k(b, design.blocks[k]));
    }
    res.within_term = within.value() / (n - 1);
    res.difference = res.between_term - res.within_term;
    res.var_cr = true_var_finite(science, design, Mechanism::complete);
    res.var_blk = true_var_finite(science, design, Mechanism::blocked);
    return res;
}

double compare_designs_finite(const ScienceTable& science, const Design& design) {
    return compare_designs_finite_detail(science, design).difference;
}

double true_var_m1(const StrataPopulation& pop) {
    double n = pop.n();
    KahanSum acc;
    for (const auto& s : pop.strata) {
        double w = static_cast<double>(s.n_k) * s.n_k / (n * n);
        acc.add(w * (s.var_c / (s.n_k - s.n_tk) + s.var_t / s.n_tk));
    }
    return acc.value();
}

double bias_m1(const StrataPopulation& pop, EstimatorId estimator) {
    std::vector<double> taus;
    std::vector<int> sizes;
    for (const auto& s : pop.strata) {
        taus.push_back(s.tau());
        sizes.push_back(s.n_k);
    }
    switch (estimator) {
        case EstimatorId::big:
            return 0.0;
        case EstimatorId::sb_equal:
            for (int nk : sizes) {
                if (nk != sizes[0]) {
                    throw ValidationError("unequal block sizes for the equal-size estimator");
                }
            }
            return stratified_bias(taus, sizes);
        case EstimatorId::sb_m:
            return stratified_bias(taus, sizes);
        case EstimatorId::sb_p:
            return unified_bias(taus, sizes);
        default:
            throw ValidationError("no closed-form bias for estimator " + to_string(estimator));
    }
}

double compare_designs_m1(const StrataPopulation& pop) {
    if (!pop.equal_proportions()) {
        throw ValidationError("unequal treated proportions; use compare_designs_unequal");
    }
    double n = pop.n();
    double p = pop.n_t() / n;
    std::vector<double> combo, weights;
    for (const auto& s : pop.strata) {
        combo.push_back(std::sqrt(p / (1 - p)) * s.mu_c + std::sqrt((1 - p) / p) * s.mu_t);
        weights.push_back(s.n_k / n);
    }
    return var_k_weighted(combo, weights) / (n - 1);
}

UnequalComparison compare_designs_unequal(const StrataPopulation& pop, double p_cr) {
    if (p_cr <= 0 || p_cr >= 1) throw ValidationError("p_cr must be in (0,1)");
    double n = pop.n();
    std::vector<double> combo, weights;
    for (const auto& s : pop.strata) {
        combo.push_back(std::sqrt(p_cr / (1 - p_cr)) * s.mu_c +
                        std::sqrt((1 - p_cr) / p_cr) * s.mu_t);
        weights.push_back(s.n_k / n);
    }
    UnequalComparison res;
    res.between_term = var_k_weighted(combo, weights) / (n - 1);
    KahanSum penalty;
    for (const auto& s : pop.strata) {
        double p_k = static_cast<double>(s.n_tk) / s.n_k;
        penalty.add((p_cr - p_k) * s.n_k / (n * n) *
                    (s.var_c / ((1 - p_k) * (1 - p_cr)) - s.var_t / (p_k * p_cr)));
    }
    res.penalty_term = penalty.value();
    res.total = res.between_term + res.penalty_term;
    return res;
}

double srs_vs_m1_gap(const StrataPopulation& pop) {
    double n = pop.n();
    double n_t = pop.n_t();
    double n_c = n - n_t;
    KahanSum mc, mt;
    for (const auto& s : pop.strata) {
        mc.add(s.n_k / n * s.mu_c);
        mt.add(s.n_k / n * s.mu_t);
    }
    double mu_c = mc.value(), mu_t = mt.value();
    KahanSum acc;
    for (const auto& s : pop.strata) {
        double dc = s.mu_c - mu_c;
        double dt = s.mu_t - mu_t;
        acc.add(s.n_k / (n * (n - 1)) *
                ((n_c - 1) / n_c * dc * dc + (n_t - 1) / n_t * dt * dt - 2 * dc * dt));
    }
    return acc.value();
}

double ignore_blocking_bias_finite(const ScienceTable& science, const Design& design) {
    check_design(science, design);
    if (!design.equal_proportions()) {
        throw ValidationError("unequal treated proportions; the formula assumes p_k = p");
    }
    double n = design.n();
    double n_t = design.n_t();
    double n_c = n - n_t;
    if (n_t < 2 || n_c < 2) throw ValidationError("insufficient units in arm");
    double mu_c = science.mean_y0();
    double mu_t = science.mean_y1();
    KahanSum acc;
    for (const auto& b : science.blocks) {
        double w = b.n_k() / n;
        double dc = b.mean_y0() - mu_c;
        double dt = b.mean_y1() - mu_t;
        acc.add(w * dc * dc / (n_c - 1));
        acc.add(w * dt * dt / (n_t - 1));
        acc.add(-(n - b.n_k()) / (n * n * (n_c - 1)) * b.s2_y0());
        acc.add(-(n - b.n_k()) / (n * n * (n_t - 1)) * b.s2_y1());
        acc.add(b.n_k() / (n * n) * b.s2_tau());
    }
    return acc.value();
}

double ignore_blocking_bias_m1(const StrataPopulation& pop) {
    if (!pop.equal_proportions()) {
        throw ValidationError("unequal treated proportions; the formula assumes p_k = p");
    }
    double n = pop.n();
    double n_t = pop.n_t();
    double n_c = n - n_t;
    if (n_t < 2 || n_c < 2) throw ValidationError("insufficient units in arm");
    KahanSum mc, mt;
    for (const auto& s : pop.strata) {
        mc.add(s.n_k / n * s.mu_c);
        mt.add(s.n_k / n * s.mu_t);
    }
    KahanSum acc;
    for (const auto& s : pop.strata) {
        double dc = s.mu_c - mc.value();
        double dt = s.mu_t - mt.value();
        acc.add(s.n_k / n * (dc * dc / (n_c - 1) + dt * dt / (n_t - 1)));
    }
    return acc.value();
}

}  // namespace blockvar
