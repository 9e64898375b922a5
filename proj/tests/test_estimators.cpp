#include <cmath>
#include <sstream>

#include "blockvar/data.hpp"
#include "blockvar/estimators.hpp"
#include "doctest.h"

using namespace blockvar;

namespace {

BlockSummary make_block(const std::string& id, int n_tk, int n_ck, double mean_t, double mean_c,
                        double s2t = -1, double s2c = -1) {
    BlockSummary b;
    b.block_id = id;
    b.n_tk = n_tk;
    b.n_ck = n_ck;
    b.n_k = n_tk + n_ck;
    b.mean_t = mean_t;
    b.mean_c = mean_c;
    b.tau_hat_k = mean_t - mean_c;
    if (n_tk >= 2) b.s2_t = s2t;
    if (n_ck >= 2) b.s2_c = s2c;
    b.cls = (n_tk >= 2 && n_ck >= 2) ? BlockClass::big : BlockClass::small;
    return b;
}

ExperimentSummary wrap(std::vector<BlockSummary> blocks) {
    ExperimentSummary s;
    for (auto& b : blocks) {
        s.n += b.n_k;
        s.n_t += b.n_tk;
        s.n_c += b.n_ck;
        if (b.cls == BlockClass::small) s.n_small += b.n_k;
        s.blocks.push_back(std::move(b));
    }
    s.K = static_cast<int>(s.blocks.size());
    return s;
}

}  // namespace

TEST_CASE("estimator id round trip") {
    for (EstimatorId id : all_estimators()) {
        auto back = estimator_from_string(to_string(id));
        REQUIRE(back.has_value());
        CHECK(*back == id);
    }
    CHECK_FALSE(estimator_from_string("nope").has_value());
}

TEST_CASE("block-weighted point estimate") {
    auto blocks = std::vector<BlockSummary>{make_block("A", 1, 1, 2, 1),   // tau 1, n 2
                                            make_block("B", 2, 2, 5, 2)};  // tau 3, n 4
    CHECK(tau_hat_blk(blocks) == doctest::Approx((2.0 * 1 + 4.0 * 3) / 6.0));
}

TEST_CASE("big-block estimator weights by squared size") {
    auto blocks = std::vector<BlockSummary>{make_block("A", 2, 2, 3, 1, 2.0, 1.0),
                                            make_block("B", 3, 3, 4, 1, 3.0, 3.0)};
    // n = 10; (16/100)(1/2 + 2/2) + (36/100)(3/3 + 3/3)
    CHECK(var_big_blocks(blocks) == doctest::Approx(0.16 * 1.5 + 0.36 * 2.0).epsilon(1e-12));
    auto with_small = blocks;
    with_small.push_back(make_block("C", 1, 1, 2, 1));
    CHECK_THROWS_WITH_AS(var_big_blocks(with_small),
                         "small block C present; use var_hybrid for hybrid experiments",
                         ValidationError);
}

TEST_CASE("equal-size small-block estimator: two pairs with effects 1 and 3") {
    auto blocks = std::vector<BlockSummary>{make_block("A", 1, 1, 2, 1),
                                            make_block("B", 1, 1, 4, 1)};
    CHECK(tau_hat_blk(blocks) == doctest::Approx(2.0));
    CHECK(var_small_equal(blocks) == doctest::Approx(1.0).epsilon(1e-12));
    auto unequal = std::vector<BlockSummary>{make_block("A", 1, 1, 2, 1),
                                             make_block("B", 1, 2, 4, 1)};
    CHECK_THROWS_AS(var_small_equal(unequal), ValidationError);
}

TEST_CASE("stratified small-block estimator: sizes {2,2,3,3}, effects {1,3,0,4}") {
    auto blocks = std::vector<BlockSummary>{
        make_block("A", 1, 1, 1, 0), make_block("B", 1, 1, 3, 0),
        make_block("C", 1, 2, 0, 0), make_block("D", 1, 2, 4, 0)};
    // group m=2: mean 2, SS 2 -> 16*2/2 = 16; m=3: mean 2, SS 8 -> 36*8/2 = 144
    CHECK(var_small_stratified(blocks) == doctest::Approx(1.6).epsilon(1e-12));
    auto lone = std::vector<BlockSummary>{make_block("A", 1, 1, 1, 0),
                                          make_block("C", 1, 2, 0, 0),
                                          make_block("D", 1, 2, 4, 0)};
    CHECK_THROWS_WITH_AS(var_small_stratified(lone), "size group too small: 2", ValidationError);
}

TEST_CASE("unified small-block weights: sizes {2,3,4}") {
    auto w = sbp_weights({2, 3, 4});
    // n = 9, sum n_k^2/(n-2n_k) = 4/5 + 9/3 + 16/1 = 19.8
    CHECK(w.a[0] == doctest::Approx(4.0 / 144.0).epsilon(1e-12));
    CHECK(w.a[1] == doctest::Approx(9.0 / 86.4).epsilon(1e-12));
    CHECK(w.a[2] == doctest::Approx(16.0 / 28.8).epsilon(1e-12));
    CHECK(w.C == doctest::Approx(0.6875).epsilon(1e-12));
    double sum = 0;
    for (double a : w.a) sum += a;
    CHECK(sum == doctest::Approx(w.C).epsilon(1e-14));
}

TEST_CASE("unified small-block weights reduce to 1/(K(K-1)) under equal sizes") {
    for (int K = 2; K <= 10; ++K) {
        auto w = sbp_weights(std::vector<int>(K, 2));
        for (double a : w.a) CHECK(a == doctest::Approx(1.0 / (K * (K - 1.0))).epsilon(1e-12));
        CHECK(w.C == doctest::Approx(1.0 / (K - 1.0)).epsilon(1e-12));
    }
}

TEST_CASE("unified small-block estimator: sizes {2,3,4}, effects {1,2,3}") {
    auto blocks = std::vector<BlockSummary>{
        make_block("A", 1, 1, 1, 0), make_block("B", 1, 2, 2, 0),
        make_block("C", 1, 3, 3, 0)};
    // tau_sb = 20/9; a = {4/144, 9/86.4, 16/28.8}
    double expect = 4.0 / 144.0 * std::pow(1 - 20.0 / 9, 2) +
                    9.0 / 86.4 * std::pow(2 - 20.0 / 9, 2) +
                    16.0 / 28.8 * std::pow(3 - 20.0 / 9, 2);
    CHECK(var_small_unified(blocks) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(expect == doctest::Approx(0.38271604938).epsilon(1e-9));
}

TEST_CASE("half-size guard rejects dominant blocks among unequal sizes") {
    CHECK_THROWS_WITH_AS(sbp_weights({2, 3}),
                         "half-size guard violated: block of size 3 with n = 5",
                         ValidationError);
    CHECK_THROWS_AS(sbp_weights({5, 2, 2}), ValidationError);
    // equal sizes stay finite even at the n/2 boundary
    auto w = sbp_weights({3, 3});
    CHECK(w.a[0] == doctest::Approx(0.5));
    CHECK(w.C == doctest::Approx(1.0));
}

TEST_CASE("hybrid estimator combines big and small parts with squared share weights") {
    auto blocks = std::vector<BlockSummary>{
        make_block("A", 2, 2, 3, 1, 2.0, 1.0), make_block("B", 3, 3, 4, 1, 3.0, 3.0),
        make_block("C", 1, 1, 2, 1), make_block("D", 1, 1, 4, 1),
        make_block("E", 1, 1, 6, 1)};
    auto s = wrap(blocks);
    REQUIRE(s.n == 16);
    REQUIRE(s.n_small == 6);
    double v_big = var_big_blocks({blocks[0], blocks[1]});
    double v_small = var_small_stratified({blocks[2], blocks[3], blocks[4]});
    auto h = var_hybrid(s, SmallMethod::stratified);
    double w_big = 10.0 / 16.0, w_small = 6.0 / 16.0;
    CHECK(h.value ==
          doctest::Approx(w_big * w_big * v_big + w_small * w_small * v_small).epsilon(1e-12));
    CHECK(h.warnings.empty());

    // degenerate sets warn instead of failing
    auto all_big = wrap({blocks[0], blocks[1]});
    auto hb = var_hybrid(all_big, SmallMethod::unified);
    CHECK(hb.value == doctest::Approx(var_big_blocks(all_big.blocks)).epsilon(1e-12));
    REQUIRE(hb.warnings.size() == 1);
    auto all_small = wrap({blocks[2], blocks[3], blocks[4]});
    auto hs = var_hybrid(all_small, SmallMethod::unified);
    CHECK(hs.value == doctest::Approx(var_small_unified(all_small.blocks)).epsilon(1e-12));
    REQUIRE(hs.warnings.size() == 1);
}

TEST_CASE("unbiased-under-SRS estimator on a worked example") {
    auto blocks = std::vector<BlockSummary>{make_block("A", 2, 2, 3, 1, 2.0, 2.0),
                                            make_block("B", 2, 2, 6, 2, 4.0, 4.0)};
    auto s = wrap(blocks);
    // n = 8, tau_hat = 3; per block: n_k(n_k-1)/(n(n-1)) = 12/56
    double expect = 12.0 / 56.0 * (2.0 / 2 + 2.0 / 2) + 12.0 / 56.0 * (4.0 / 2 + 4.0 / 2) +
                    4.0 / 56.0 * ((2 - 3) * (2 - 3) + (4 - 3) * (4 - 3));
    CHECK(var_srs_unbiased(s) == doctest::Approx(expect).epsilon(1e-12));
    auto with_small = wrap({blocks[0], make_block("C", 1, 1, 2, 1)});
    CHECK_THROWS_WITH_AS(var_srs_unbiased(with_small),
                         "insufficient units in arm in block C", ValidationError);
}

TEST_CASE("between-block estimators: two equal blocks with effects 1 and 3 give 1.0") {
    auto blocks = std::vector<BlockSummary>{make_block("A", 1, 1, 2, 1),
                                            make_block("B", 1, 1, 4, 1)};
    auto s = wrap(blocks);
    CHECK(var_rct_yes(s, RctYesVariant::v1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(var_rct_yes(s, RctYesVariant::v2) == doctest::Approx(1.0).epsilon(1e-12));

    // unequal sizes: the two variants separate
    auto blocks2 = std::vector<BlockSummary>{make_block("A", 1, 1, 2, 1),
                                             make_block("B", 1, 3, 4, 1)};
    auto s2 = wrap(blocks2);
    double tau = (2.0 * 1 + 4.0 * 3) / 6.0;  // 7/3
    double nbar = 3.0;
    double v1 = (std::pow(2 * 1 - nbar * tau, 2) + std::pow(4 * 3 - nbar * tau, 2)) /
                (2 * 1 * nbar * nbar);
    double v2 = (4 * std::pow(1 - tau, 2) + 16 * std::pow(3 - tau, 2)) / (2 * 1 * nbar * nbar);
    CHECK(var_rct_yes(s2, RctYesVariant::v1) == doctest::Approx(v1).epsilon(1e-12));
    CHECK(var_rct_yes(s2, RctYesVariant::v2) == doctest::Approx(v2).epsilon(1e-12));
    CHECK(var_rct_yes(s2, RctYesVariant::v1) != doctest::Approx(v2));
}

TEST_CASE("plug-in estimator imputes donor arm variances into small blocks") {
    auto blocks = std::vector<BlockSummary>{
        make_block("A", 2, 2, 3, 1, 2.0, 1.0),          // donor, n_k 4
        make_block("B", 3, 3, 4, 1, 5.0, 4.0),          // donor, n_k 6
        make_block("C", 1, 2, 2, 1, -1.0, 3.0)};        // small: s2_c known, s2_t imputed
    auto s = wrap(blocks);
    double donor_t = (4 * 2.0 + 6 * 5.0) / 10.0;  // size-weighted
    double n = 13.0;
    double expect = 16 / (n * n) * (1.0 / 2 + 2.0 / 2) + 36 / (n * n) * (4.0 / 3 + 5.0 / 3) +
                    9 / (n * n) * (3.0 / 2 + donor_t / 1);
    CHECK(var_plug_in(s) == doctest::Approx(expect).epsilon(1e-12));

    auto no_donor = wrap({make_block("C", 1, 2, 2, 1, -1.0, 3.0)});
    CHECK_THROWS_WITH_AS(var_plug_in(no_donor), "no donor blocks for plug-in", ValidationError);
    auto pair_block = wrap({blocks[0], make_block("D", 1, 1, 2, 1)});
    CHECK_THROWS_WITH_AS(var_plug_in(pair_block),
                         "plug-in requires one estimable arm in block D", ValidationError);
}

TEST_CASE("estimate() report: pairs dataset, sb-equal") {
    std::istringstream in(
        "unit_id,block,z,y\n"
        "u1,A,1,2\nu2,A,0,1\n"
        "u3,B,1,4\nu4,B,0,1\n");
    auto table = parse_experiment_csv(in);
    auto summary = summarize(table);
    auto rep = estimate(table, summary, EstimatorId::sb_equal);
    CHECK(rep.estimate == doctest::Approx(2.0));
    CHECK(*rep.variance_estimate == doctest::Approx(1.0));
    CHECK(*rep.se == doctest::Approx(1.0));
    REQUIRE(rep.per_block.size() == 2);
    CHECK(rep.per_block[0].weight == doctest::Approx(0.5));
    CHECK(rep.per_block[1].contribution == doctest::Approx(1.5));

    auto cr = estimate(table, summary, EstimatorId::cr);
    CHECK(cr.estimate == doctest::Approx(2.0));
    CHECK(*cr.variance_estimate == doctest::Approx(var_neyman_cr(table)).epsilon(1e-12));
}
