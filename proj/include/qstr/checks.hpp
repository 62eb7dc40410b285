// Self-contained verification routines shared by the CLI and the acceptance
// binary. Each returns a JSON report with a top-level "pass" flag.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "qstr/harness.hpp"
#include "qstr/models.hpp"

namespace qstr::checks {

// Central-difference check of forward_batch + averaged loss for one random
// small model per (arch, seed).
nlohmann::json gradient_suite(const std::vector<models::Arch>& archs, int seeds, std::uint64_t master, double tol = 1e-4);

// span_restricted_risk against 1 - n/(N d) for `bases` random orthonormal V.
nlohmann::json span_risk(int N, int d, int n, int bases, std::uint64_t seed, double tol = 1e-10);

// conditional_variance_check for every q <= q_max and H in 0..q.
nlohmann::json conditional_variance(int q_max, long n_mc, std::uint64_t seed, double k_se = 4.0);

// Attention construction with a rademacher bank and an exact linear head.
// Sup |yhat - y| over `prompts` prompts with tokens clipped to r_x, against
// 2 sqrt(eps). A non-empty `save_to` writes the weights as a checkpoint.
nlohmann::json tr_construction(int N, int d, int q, double eps, int prompts, std::uint64_t seed,
                               const std::string& save_to = "");

// Recurrent construction on simple prompts: hard zeros, on-target state error
// and end-to-end squared error against 4 eps.
nlohmann::json rnn_construction(int N, int d, int q, double eps, int prompts, std::uint64_t seed,
                                const std::string& save_to = "");

// Interpolation nets: fit rate at n = n_fit, norm bound C n^3 and the log-log
// slope of the median squared norm over `grid`.
nlohmann::json interpolant(int n_fit, int d, int seeds, const std::vector<int>& grid, int grid_seeds,
                           std::uint64_t seed, double norm_const = 166.0);

// 1-head vs 2-head transformers on the half-dead centered-norm task
// (q=2, d=10, N=32). Every 1-head risk must stay above the head bound minus
// 4 SE; at least 3/5 of the 2-head runs must reach risk 0.2. The report
// carries a "csv" string.
nlohmann::json head_separation(int seeds, std::int64_t budget, std::uint64_t master, long n_mc,
                               const harness::Settings& extra = {});

// Split-QK transformer on 1STR with N=100, d=10; analyze_attention on each
// run. Passes when at least 4/5 of the seeds have mass >= 0.5 and
// alignment >= 0.7 in every head.
nlohmann::json attention_structure(int seeds, std::int64_t budget, std::uint64_t master,
                                   const harness::Settings& extra = {});

}  // namespace qstr::checks
