// Sample-complexity sweeps, attention-structure analysis and report writers.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qstr/trainer.hpp"

namespace qstr::harness {

// Flat key=value settings. Lines starting with '#' are comments.
using Settings = std::map<std::string, std::string>;
Settings parse_settings(std::istream& is);
Settings load_settings(const std::string& path);
// "key=value" override; throws on a missing '='.
void apply_override(Settings& s, const std::string& kv);

enum class SweepTask { k1str, kSimple1str, kHalfDeadNorm };
std::string to_string(SweepTask t);
SweepTask parse_task(const std::string& s);

struct SweepConfig {
  int spec_version = 1;
  SweepTask task = SweepTask::k1str;
  std::vector<models::Arch> archs{models::Arch::kTransformer, models::Arch::kRnn, models::Arch::kFfn};
  std::vector<int> n_grid{16, 32, 64, 128};
  int d = 10;
  int q = 1;
  int d_e = 0;  // 0: floor(5 ln N)
  double threshold = 0.7;
  int seeds = 5;
  std::int64_t budget = 200000;
  std::uint64_t master_seed = 1;
  int jobs = 1;
  bool save_traces = false;
  Settings overrides;  // remaining keys, applied per trial (optionally arch-prefixed)
};

// Throws std::invalid_argument on unknown values or broken invariants.
SweepConfig sweep_config_from(const Settings& s);

// Full TrainConfig for one cell, after global and arch-specific overrides.
trainer::TrainConfig trial_config(const SweepConfig& cfg, models::Arch arch, int N);
std::uint64_t trial_seed(std::uint64_t master, models::Arch arch, int N, int seed_index);

struct TrialResult {
  std::string arch;
  int N = 0;
  int seed = 0;
  std::optional<std::int64_t> samples;  // empty when the budget ran out
  bool diverged = false;
  double final_test_mse = 0.0;
  std::int64_t consumed = 0;
};

struct CellSummary {
  std::string arch;
  int N = 0;
  int reached = 0;
  int runs = 0;
  std::optional<double> median;  // over threshold-reaching runs
  std::optional<double> mean;
  std::optional<double> iqr;
  // median with exhausted runs counted at the samples they consumed (a lower
  // bound on their true value)
  double censored_median = 0.0;
};

struct SweepResult {
  std::vector<TrialResult> trials;
  std::vector<CellSummary> cells;
};

std::optional<std::int64_t> find_sample_complexity(const trainer::TrainTrace& trace, double threshold);
std::optional<std::int64_t> find_sample_complexity(const std::vector<trainer::EvalRecord>& records, double threshold);

SweepResult run_sweep(const SweepConfig& cfg, const std::string& trace_dir = "");
std::vector<CellSummary> summarize_cells(const std::vector<TrialResult>& trials);
const CellSummary* find_cell(const SweepResult& r, const std::string& arch, int N);

struct HeadStructure {
  int head = 0;
  int slot = 0;  // index slot whose block carries the most mass
  double mass_ratio = 0.0;
  double alignment = 0.0;
  double alpha = 0.0;
};
std::vector<HeadStructure> analyze_attention(const models::TransformerParams& p);

// Shortest round-trippable-enough text for CSV cells (10 significant digits).
std::string fmt(double x);

// Writers. `out_dir` must exist or be creatable.
std::string sweep_csv(const SweepResult& r);
nlohmann::json sweep_json(const SweepResult& r, const SweepConfig& cfg);
std::string sweep_svg(const SweepResult& r, const std::string& title);
void emit_outputs(const SweepResult& r, const SweepConfig& cfg, const std::string& out_dir,
                  const std::vector<std::string>& formats = {"csv", "json", "svg"});

void write_text(const std::string& path, const std::string& text);

// Run independent jobs on up to `jobs` threads; job k writes only slot k.
void parallel_for(int count, int jobs, const std::function<void(int)>& fn);

}  // namespace qstr::harness
