// Benchmark: parallel replication engine vs the serial reference.
//
// Runs the same sampled Monte Carlo study through monte_carlo_study (OpenMP)
// and monte_carlo_study_serial, reports wall-clock times, and checks that the
// two paths produce bit-identical results.
//
// Usage: bench_replications [reps] [threads]
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>

#include "blockvar/simulate.hpp"

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool same_result(const blockvar::MCResult& a, const blockvar::MCResult& b) {
    if (a.R != b.R || a.mean_tau != b.mean_tau || a.var_tau != b.var_tau ||
        a.true_var != b.true_var || a.estimators.size() != b.estimators.size()) {
        return false;
    }
    for (size_t e = 0; e < a.estimators.size(); ++e) {
        const auto& x = a.estimators[e];
        const auto& y = b.estimators[e];
        if (x.mean_point != y.mean_point || x.mean_vhat != y.mean_vhat ||
            x.var_vhat != y.var_vhat || x.mc_se != y.mc_se) {
            return false;
        }
    }
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    long long reps = argc > 1 ? std::atoll(argv[1]) : 200000;
    int threads = argc > 2 ? std::atoi(argv[2]) : 0;  // 0 = library default

    blockvar::DGPConfig c;
    c.sizes = {3, 3, 3, 4, 4, 4, 5, 5, 6, 6, 7, 7, 18, 19, 20};
    c.n_tk = {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 4, 4, 4};
    c.K = static_cast<int>(c.sizes.size());
    c.rho = 0.5;
    c.a = 1.0;
    c.b = 1.0;
    c.seed = 20240809;
    blockvar::ScienceTable science = blockvar::generate_dgp(c);
    blockvar::Design design = blockvar::design_for_dgp(c);
    std::vector<blockvar::EstimatorId> ids = {
        blockvar::EstimatorId::cr, blockvar::EstimatorId::hybrid_m,
        blockvar::EstimatorId::hybrid_p, blockvar::EstimatorId::rct_yes,
        blockvar::EstimatorId::rct_yes2};

    std::printf("sampled Monte Carlo study: %d blocks, %lld replications, %zu estimators\n",
                c.K, reps, ids.size());

    auto t0 = std::chrono::steady_clock::now();
    auto serial = blockvar::monte_carlo_study_serial(science, design, ids, reps, 7,
                                                     blockvar::MCMode::sampled);
    double t_serial = seconds_since(t0);
    std::printf("serial reference : %8.3f s (%.0f reps/s)\n", t_serial, reps / t_serial);

    t0 = std::chrono::steady_clock::now();
    auto parallel = blockvar::monte_carlo_study(science, design, ids, reps, 7,
                                                blockvar::MCMode::sampled, threads);
    double t_parallel = seconds_since(t0);
    std::printf("parallel engine  : %8.3f s (%.0f reps/s), speedup %.2fx\n", t_parallel,
                reps / t_parallel, t_serial / t_parallel);

    if (!same_result(serial, parallel)) {
        std::printf("MISMATCH: parallel and serial results differ\n");
        return 1;
    }
    std::printf("results identical: yes\n");
    return 0;
}
