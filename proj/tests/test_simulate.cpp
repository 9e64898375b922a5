#include <cmath>
#include <map>

#include "blockvar/simulate.hpp"
#include "doctest.h"

using namespace blockvar;

namespace {

bool same_result(const MCResult& a, const MCResult& b) {
    if (a.R != b.R || a.mean_tau != b.mean_tau || a.var_tau != b.var_tau ||
        a.true_var != b.true_var || a.true_var_se != b.true_var_se ||
        a.estimators.size() != b.estimators.size()) {
        return false;
    }
    for (size_t e = 0; e < a.estimators.size(); ++e) {
        const auto& x = a.estimators[e];
        const auto& y = b.estimators[e];
        if (x.skipped != y.skipped || x.mean_point != y.mean_point ||
            x.var_point != y.var_point || x.mean_vhat != y.mean_vhat ||
            x.var_vhat != y.var_vhat || x.rel_bias != y.rel_bias || x.mc_se != y.mc_se) {
            return false;
        }
    }
    return true;
}

DGPConfig default_dgp() {
    DGPConfig c;
    c.K = 3;
    c.sizes = {4, 2, 3};
    c.n_tk = {2, 1, 1};
    c.rho = 0.5;
    c.a = 1.0;
    c.b = 1.0;
    c.seed = 99;
    return c;
}

}  // namespace

TEST_CASE("DGP block effects follow the quantile spread") {
    DGPConfig c = default_dgp();
    c.b = 1.0;
    // quantiles of {3/4, 1/2, 1/4}
    CHECK(dgp_beta(c, 1) == doctest::Approx(5.0 + 0.674489750196).epsilon(1e-9));
    CHECK(dgp_beta(c, 2) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(dgp_beta(c, 3) == doctest::Approx(5.0 - 0.674489750196).epsilon(1e-9));
    c.a = 2.0;
    CHECK(dgp_alpha(c, 1) == doctest::Approx(2 * 0.674489750196).epsilon(1e-9));
}

TEST_CASE("DGP orders blocks smallest-first and is deterministic") {
    DGPConfig c = default_dgp();
    ScienceTable s1 = generate_dgp(c);
    ScienceTable s2 = generate_dgp(c);
    REQUIRE(s1.blocks.size() == 3);
    CHECK(s1.blocks[0].n_k() == 2);
    CHECK(s1.blocks[1].n_k() == 3);
    CHECK(s1.blocks[2].n_k() == 4);
    for (size_t k = 0; k < 3; ++k) {
        CHECK(s1.blocks[k].y0 == s2.blocks[k].y0);
        CHECK(s1.blocks[k].y1 == s2.blocks[k].y1);
    }
    Design d = design_for_dgp(c);
    CHECK(d.blocks[0].n_tk == 1);
    CHECK(d.blocks[2].n_tk == 2);

    c.rho = 2.0;
    CHECK_THROWS_AS(generate_dgp(c), ValidationError);
}

TEST_CASE("DGP with no spread centers every block at (0, base effect)") {
    DGPConfig c = default_dgp();
    c.a = 0.0;
    c.b = 0.0;
    c.sizes = {400, 400, 400};
    c.n_tk = {200, 200, 200};
    ScienceTable s = generate_dgp(c);
    for (const auto& b : s.blocks) {
        CHECK(std::abs(b.mean_y0()) < 0.2);
        CHECK(std::abs(b.mean_y1() - 5.0) < 0.2);
    }
}

TEST_CASE("DGP with perfectly correlated arms has constant block effects") {
    DGPConfig c = default_dgp();
    c.rho = 1.0;
    c.b = 1.0;
    ScienceTable s = generate_dgp(c);
    for (int k = 0; k < 3; ++k) {
        const auto& b = s.blocks[k];
        double beta = dgp_beta(c, k + 1);
        for (size_t i = 0; i < b.y0.size(); ++i) {
            CHECK(b.y1[i] - b.y0[i] == doctest::Approx(beta).epsilon(1e-12));
        }
    }
    CHECK(block_effect_sd(s) > 0.0);  // betas differ across blocks
}

TEST_CASE("assignment enumeration counts and unbiasedness") {
    Design two_blocks;
    two_blocks.blocks = {{"A", 4, 2}, {"B", 4, 2}};
    CHECK(count_assignments(two_blocks) == 36);
    Design pair;
    pair.blocks = {{"A", 2, 1}};
    CHECK(count_assignments(pair) == 2);

    long long seen = 0;
    enumerate_assignments(two_blocks, [&](const Assignment& a) {
        ++seen;
        int t = 0;
        for (int i = 0; i < 4; ++i) t += a.arms[i] == Arm::treated;
        CHECK(t == 2);
    });
    CHECK(seen == 36);

    Design huge;
    huge.blocks = {{"A", 40, 20}};
    CHECK_THROWS_WITH_AS(count_assignments(huge),
                         "assignment count exceeds enumeration cap; use Monte Carlo sampling",
                         ValidationError);

    // exhaustive mean of the point estimator equals the sample effect exactly
    DGPConfig c = default_dgp();
    ScienceTable s = generate_dgp(c);
    Design d = design_for_dgp(c);
    auto mc = monte_carlo_study_serial(s, d, {}, 0, 0, MCMode::exhaustive);
    CHECK(mc.R == count_assignments(d));
    CHECK(mc.mean_tau == doctest::Approx(s.tau_sate()).epsilon(1e-12));
}

TEST_CASE("assignment draws are uniform (chi-square on one block of 4 choose 2)") {
    Design d;
    d.blocks = {{"A", 4, 2}};
    std::mt19937_64 rng = make_stream(7, 0);
    std::map<std::vector<int>, long long> counts;
    const long long R = 100000;
    for (long long r = 0; r < R; ++r) {
        Assignment a = draw_assignment(d, Mechanism::blocked, rng);
        std::vector<int> key;
        for (int i = 0; i < 4; ++i) key.push_back(a.arms[i] == Arm::treated);
        ++counts[key];
    }
    REQUIRE(counts.size() == 6);
    double expected = R / 6.0;
    double chi2 = 0;
    for (const auto& [key, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < 20.515);  // chi-square(5 df) critical value at alpha = 0.001

    // blocked draws keep per-block counts exact
    Design d2;
    d2.blocks = {{"A", 3, 1}, {"B", 5, 2}};
    for (int r = 0; r < 200; ++r) {
        Assignment a = draw_assignment(d2, Mechanism::blocked, rng);
        int t1 = 0, t2 = 0;
        for (int i = 0; i < 3; ++i) t1 += a.arms[i] == Arm::treated;
        for (int i = 3; i < 8; ++i) t2 += a.arms[i] == Arm::treated;
        CHECK(t1 == 1);
        CHECK(t2 == 2);
    }
    // complete draws keep the total exact
    for (int r = 0; r < 200; ++r) {
        Assignment a = draw_assignment(d2, Mechanism::complete, rng);
        int t = 0;
        for (int i = 0; i < 8; ++i) t += a.arms[i] == Arm::treated;
        CHECK(t == 3);
    }
}

TEST_CASE("sampled studies are bit-identical across thread counts and vs the serial path") {
    DGPConfig c = default_dgp();
    c.sizes = {4, 4, 3, 3, 2};
    c.n_tk = {2, 2, 1, 1, 1};
    c.K = 5;
    ScienceTable s = generate_dgp(c);
    Design d = design_for_dgp(c);
    auto ids = std::vector<EstimatorId>{EstimatorId::cr, EstimatorId::hybrid_p,
                                        EstimatorId::rct_yes2};
    auto serial = monte_carlo_study_serial(s, d, ids, 3000, 17, MCMode::sampled);
    auto t1 = monte_carlo_study(s, d, ids, 3000, 17, MCMode::sampled, 1);
    auto t4 = monte_carlo_study(s, d, ids, 3000, 17, MCMode::sampled, 4);
    CHECK(same_result(serial, t1));
    CHECK(same_result(serial, t4));
}

TEST_CASE("superpopulation studies are deterministic and skip inapplicable estimators") {
    SuperpopInputs in;
    in.framework = Framework::m1;
    for (int k = 0; k < 3; ++k) {
        in.m1.strata.push_back(
            {"S" + std::to_string(k), 1.0 / 3, 5.0 + k, 1.0 * k, 1.0, 1.0, 1.0, 6, 3});
    }
    auto ids = std::vector<EstimatorId>{EstimatorId::big, EstimatorId::sb_equal,
                                        EstimatorId::sb_m};
    auto serial = superpopulation_study_serial(in, ids, 400, 3, 23);
    auto par = superpopulation_study(in, ids, 400, 3, 23, 4);
    CHECK(same_result(serial, par));
    CHECK_FALSE(serial.estimators[0].skipped);
    // equal block sizes, so the equal-size between-block estimator applies too
    CHECK_FALSE(serial.estimators[1].skipped);
    CHECK(serial.true_var > 0.0);
    CHECK(serial.true_var_se > 0.0);
}

TEST_CASE("exhaustive estimator means reconcile with the closed-form biases") {
    // all-small design: three pairs and two triples
    ScienceTable science;
    std::mt19937_64 rng = make_stream(31, 0);
    std::vector<int> sizes = {2, 2, 2, 3, 3};
    for (size_t k = 0; k < sizes.size(); ++k) {
        ScienceTable::Block b;
        b.block_id = "B" + std::to_string(k);
        for (int i = 0; i < sizes[k]; ++i) {
            b.y0.push_back(normal(rng));
            b.y1.push_back(normal(rng) + 1.0 + 0.7 * k);
        }
        science.blocks.push_back(std::move(b));
    }
    Design design = Design::for_science(science, {1, 1, 1, 1, 1});
    auto ids = std::vector<EstimatorId>{EstimatorId::sb_m, EstimatorId::sb_p};
    auto mc = monte_carlo_study_serial(science, design, ids, 0, 0, MCMode::exhaustive);
    for (size_t e = 0; e < ids.size(); ++e) {
        double bias = mc.estimators[e].mean_vhat - mc.var_tau;
        CHECK(bias == doctest::Approx(bias_finite(science, design, ids[e])).epsilon(1e-10));
    }
    // constant effects: the unified small-block estimator is exactly unbiased
    ScienceTable flat = science;
    for (auto& b : flat.blocks) {
        for (size_t i = 0; i < b.y0.size(); ++i) b.y1[i] = b.y0[i] + 2.0;
    }
    auto mc_flat =
        monte_carlo_study_serial(flat, design, {EstimatorId::sb_p}, 0, 0, MCMode::exhaustive);
    CHECK(mc_flat.estimators[0].rel_bias == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("block predictiveness measure") {
    ScienceTable disjoint;
    for (int k = 0; k < 3; ++k) {
        ScienceTable::Block b;
        b.block_id = "B" + std::to_string(k);
        for (int i = 0; i < 4; ++i) {
            b.y0.push_back(10.0 * k);
            b.y1.push_back(10.0 * k);
        }
        disjoint.blocks.push_back(std::move(b));
    }
    CHECK(r2_blocks(disjoint) == doctest::Approx(1.0).epsilon(1e-12));

    ScienceTable constant = disjoint;
    for (auto& b : constant.blocks) {
        for (auto& y : b.y0) y = 3.0;
        for (auto& y : b.y1) y = 3.0;
    }
    std::vector<std::string> warnings;
    CHECK(r2_blocks(constant, &warnings) == 0.0);
    CHECK(warnings.size() == 1);

    // monotone in the control-mean spread
    DGPConfig c = default_dgp();
    c.sizes = {20, 20, 20};
    c.n_tk = {10, 10, 10};
    double prev = -1.0;
    for (double a : {0.0, 1.0, 2.0}) {
        c.a = a;
        double r2 = r2_blocks(generate_dgp(c));
        CHECK(r2 >= prev);
        prev = r2;
    }
}
