#include "qstr/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace qstr::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  int x = 0;
  try {
    x = std::stoi(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw std::invalid_argument("config: " + key + " expects an integer, got '" + v + "'");
  return x;
}

std::int64_t to_i64(const std::string& key, const std::string& v) {
  // accept 2e5 style as well
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || x != std::floor(x)) {
    throw std::invalid_argument("config: " + key + " expects an integer, got '" + v + "'");
  }
  return static_cast<std::int64_t>(x);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: " + key + " expects true/false, got '" + v + "'");
}

// Applies one training-level key. Returns false if the key is unknown.
bool apply_train_key(trainer::TrainConfig& t, const std::string& k, const std::string& v) {
  auto& a = t.arch;
  if (k == "lr") t.opt.lr = to_double(k, v);
  else if (k == "beta1") t.opt.beta1 = to_double(k, v);
  else if (k == "beta2") t.opt.beta2 = to_double(k, v);
  else if (k == "adam_eps") t.opt.eps = to_double(k, v);
  else if (k == "weight_decay") t.opt.weight_decay = to_double(k, v);
  else if (k == "batch") t.batch = to_int(k, v);
  else if (k == "eval_every") t.eval_every = to_int(k, v);
  else if (k == "test_size") t.test_size = to_int(k, v);
  else if (k == "budget") t.budget = to_i64(k, v);
  else if (k == "loss") t.loss = models::parse_loss_mode(v);
  else if (k == "encoding") t.encoding = data::parse_scheme(v);
  else if (k == "heads") a.heads = to_int(k, v);
  else if (k == "width") a.width = to_int(k, v);
  else if (k == "split_qk") a.split_qk = to_bool(k, v);
  else if (k == "qk_init_scale") a.qk_init_scale = to_double(k, v);
  else if (k == "rnn_state") a.rnn_state = to_int(k, v);
  else if (k == "rnn_radius") a.rnn_radius = to_double(k, v);
  else if (k == "rnn_transition_depth") a.rnn_transition_depth = to_int(k, v);
  else if (k == "rnn_output_depth") a.rnn_output_depth = to_int(k, v);
  else if (k == "rnn_hidden") a.rnn_hidden = to_int(k, v);
  else if (k == "lipschitz_budget") a.lipschitz_budget = to_double(k, v);
  else if (k == "ffn_width") a.ffn_width = to_int(k, v);
  else if (k == "ffn_hidden_layers") a.ffn_hidden_layers = to_int(k, v);
  else if (k == "norm_radius") t.norm_radius = to_double(k, v);
  else if (k == "clip_tau") t.clip_tau = to_double(k, v);
  else if (k == "divergence") t.divergence = to_double(k, v);
  else return false;
  return true;
}

double quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * (static_cast<double>(v.size()) - 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

Settings parse_settings(std::istream& is) {
  Settings s;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    }
    s[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return s;
}

Settings load_settings(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config " + path);
  return parse_settings(is);
}

void apply_override(Settings& s, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("override '" + kv + "' is not key=value");
  s[trim(kv.substr(0, eq))] = trim(kv.substr(eq + 1));
}

std::string to_string(SweepTask t) {
  switch (t) {
    case SweepTask::k1str: return "1str";
    case SweepTask::kSimple1str: return "simple-1str";
    case SweepTask::kHalfDeadNorm: return "halfdead-norm";
  }
  return "?";
}

SweepTask parse_task(const std::string& s) {
  if (s == "1str") return SweepTask::k1str;
  if (s == "simple-1str") return SweepTask::kSimple1str;
  if (s == "halfdead-norm") return SweepTask::kHalfDeadNorm;
  throw std::invalid_argument("unknown task: " + s);
}

SweepConfig sweep_config_from(const Settings& s) {
  SweepConfig c;
  for (const auto& [k, v] : s) {
    if (k == "spec_version") c.spec_version = to_int(k, v);
    else if (k == "task") c.task = parse_task(v);
    else if (k == "archs") {
      c.archs.clear();
      for (const auto& a : split_list(v)) c.archs.push_back(models::parse_arch(a));
    } else if (k == "N") {
      c.n_grid.clear();
      for (const auto& n : split_list(v)) c.n_grid.push_back(to_int(k, n));
    } else if (k == "d") c.d = to_int(k, v);
    else if (k == "q") c.q = to_int(k, v);
    else if (k == "d_e") c.d_e = v == "auto" ? 0 : to_int(k, v);
    else if (k == "threshold") c.threshold = to_double(k, v);
    else if (k == "seeds") c.seeds = to_int(k, v);
    else if (k == "budget") c.budget = to_i64(k, v);
    else if (k == "seed") c.master_seed = static_cast<std::uint64_t>(to_i64(k, v));
    else if (k == "jobs") c.jobs = to_int(k, v);
    else if (k == "save_traces") c.save_traces = to_bool(k, v);
    else c.overrides[k] = v;
  }
  if (c.spec_version != 1) throw std::invalid_argument("config: unsupported spec_version " + std::to_string(c.spec_version));
  if (c.n_grid.empty() || !std::is_sorted(c.n_grid.begin(), c.n_grid.end()) ||
      std::adjacent_find(c.n_grid.begin(), c.n_grid.end()) != c.n_grid.end()) {
    throw std::invalid_argument("config: N grid must be non-empty and strictly ascending");
  }
  if (c.seeds < 1) throw std::invalid_argument("config: seeds must be >= 1");
  if (!(c.threshold > 0)) throw std::invalid_argument("config: threshold must be positive");
  if (c.archs.empty()) throw std::invalid_argument("config: no architectures");
  if (c.jobs < 1) throw std::invalid_argument("config: jobs must be >= 1");
  // surface unknown keys and bad values now rather than inside a worker
  for (auto a : c.archs) trial_config(c, a, c.n_grid.front());
  return c;
}

trainer::TrainConfig trial_config(const SweepConfig& cfg, models::Arch arch, int N) {
  trainer::TrainConfig t;
  t.arch.arch = arch;
  t.task.N = N;
  t.task.d = cfg.d;
  t.task.q = cfg.q;
  t.d_e = cfg.d_e;
  t.threshold = cfg.threshold;
  t.budget = cfg.budget;
  switch (cfg.task) {
    case SweepTask::k1str:
    case SweepTask::kSimple1str:
      t.task.link = data::LinkSpec::linear(data::Vector::Unit(cfg.d, 0), cfg.q);
      t.task.mode = cfg.task == SweepTask::k1str ? data::PromptMode::kQstr : data::PromptMode::kSimple;
      break;
    case SweepTask::kHalfDeadNorm:
      t.task.link = data::LinkSpec::centered_norm(cfg.q, cfg.d);
      t.task.index_law = data::IndexLaw::kHalfDead;
      t.task.token_law = data::TokenLaw::kHalfDeadGaussian;
      break;
  }
  const std::string prefix = models::to_string(arch) + ".";
  for (const auto& [k, v] : cfg.overrides) {
    if (k.find('.') != std::string::npos) continue;
    if (!apply_train_key(t, k, v)) throw std::invalid_argument("config: unknown key '" + k + "'");
  }
  for (const auto& [k, v] : cfg.overrides) {
    const auto dot = k.find('.');
    if (dot == std::string::npos) continue;
    const std::string head = k.substr(0, dot);
    models::parse_arch(head);  // rejects unknown prefixes
    if (k.rfind(prefix, 0) != 0) continue;
    if (!apply_train_key(t, k.substr(dot + 1), v)) throw std::invalid_argument("config: unknown key '" + k + "'");
  }
  data::validate(t.task);
  return t;
}

std::uint64_t trial_seed(std::uint64_t master, models::Arch arch, int N, int seed_index) {
  return Rng(master).split(models::to_string(arch)).split(static_cast<std::uint64_t>(N)).split(
      static_cast<std::uint64_t>(seed_index)).key();
}

std::optional<std::int64_t> find_sample_complexity(const std::vector<trainer::EvalRecord>& records, double threshold) {
  if (records.empty()) throw std::invalid_argument("find_sample_complexity: empty trace");
  for (const auto& r : records)
    if (r.test_mse <= threshold) return r.samples;
  return std::nullopt;
}

std::optional<std::int64_t> find_sample_complexity(const trainer::TrainTrace& trace, double threshold) {
  return find_sample_complexity(trace.records, threshold);
}

void parallel_for(int count, int jobs, const std::function<void(int)>& fn) {
  if (count <= 0) return;
  jobs = std::max(1, std::min(jobs, count));
  if (jobs == 1) {
    for (int k = 0; k < count; ++k) fn(k);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      for (int k = next++; k < count; k = next++) {
        try {
          fn(k);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

SweepResult run_sweep(const SweepConfig& cfg, const std::string& trace_dir) {
  struct Job {
    models::Arch arch;
    int N;
    int seed;
  };
  std::vector<Job> jobs;
  for (auto a : cfg.archs)
    for (int N : cfg.n_grid)
      for (int s = 0; s < cfg.seeds; ++s) jobs.push_back({a, N, s});
  SweepResult res;
  res.trials.resize(jobs.size());
  if (!trace_dir.empty()) std::filesystem::create_directories(trace_dir);
  parallel_for(static_cast<int>(jobs.size()), cfg.jobs, [&](int k) {
    const Job& j = jobs[static_cast<std::size_t>(k)];
    const trainer::TrainConfig tc = trial_config(cfg, j.arch, j.N);
    const trainer::TrainTrace tr = trainer::train_online(tc, trial_seed(cfg.master_seed, j.arch, j.N, j.seed));
    TrialResult& r = res.trials[static_cast<std::size_t>(k)];
    r.arch = models::to_string(j.arch);
    r.N = j.N;
    r.seed = j.seed;
    r.samples = find_sample_complexity(tr, cfg.threshold);
    r.diverged = tr.diverged;
    r.final_test_mse = tr.records.back().test_mse;
    r.consumed = tr.records.back().samples;
    if (!trace_dir.empty()) {
      std::ostringstream os;
      trainer::write_trace_csv(os, tr);
      write_text(trace_dir + "/" + r.arch + "_N" + std::to_string(j.N) + "_s" + std::to_string(j.seed) + ".csv",
                 os.str());
    }
  });
  res.cells = summarize_cells(res.trials);
  return res;
}

std::vector<CellSummary> summarize_cells(const std::vector<TrialResult>& trials) {
  std::vector<CellSummary> cells;
  for (const auto& t : trials) {
    auto it = std::find_if(cells.begin(), cells.end(), [&](const CellSummary& c) { return c.arch == t.arch && c.N == t.N; });
    if (it == cells.end()) {
      CellSummary c;
      c.arch = t.arch;
      c.N = t.N;
      cells.push_back(c);
      it = cells.end() - 1;
    }
    ++it->runs;
  }
  for (auto& c : cells) {
    std::vector<double> hit, all;
    for (const auto& t : trials) {
      if (t.arch != c.arch || t.N != c.N) continue;
      if (t.samples) hit.push_back(static_cast<double>(*t.samples));
      all.push_back(static_cast<double>(t.samples ? *t.samples : t.consumed));
    }
    c.reached = static_cast<int>(hit.size());
    if (!hit.empty()) {
      c.median = quantile(hit, 0.5);
      double s = 0.0;
      for (double h : hit) s += h;
      c.mean = s / static_cast<double>(hit.size());
      c.iqr = quantile(hit, 0.75) - quantile(hit, 0.25);
    }
    c.censored_median = quantile(all, 0.5);
  }
  return cells;
}

const CellSummary* find_cell(const SweepResult& r, const std::string& arch, int N) {
  for (const auto& c : r.cells)
    if (c.arch == arch && c.N == N) return &c;
  return nullptr;
}

std::vector<HeadStructure> analyze_attention(const models::TransformerParams& p) {
  const int d = p.shape.d, q = p.shape.q, de = p.shape.d_e;
  const int De = p.shape.embed();
  std::vector<HeadStructure> out;
  const auto mats = p.score_matrices();
  for (std::size_t h = 0; h < mats.size(); ++h) {
    const ndgrad::Matrix& M = mats[h];
    if (M.rows() != De || M.cols() != De) throw ndgrad::ShapeError("analyze_attention: score matrix shape mismatch");
    const double total = M.squaredNorm();
    HeadStructure best;
    best.head = static_cast<int>(h);
    best.mass_ratio = -1.0;
    for (int l = 0; l < q; ++l) {
      const ndgrad::Matrix B = M.block(d + (l + 1) * de, d, de, de);
      const double mass = total > 0 ? B.squaredNorm() / total : 0.0;
      if (mass > best.mass_ratio) {
        best.slot = l;
        best.mass_ratio = mass;
        const double bn = B.norm();
        best.alignment = bn > 0 ? B.trace() / (bn * std::sqrt(static_cast<double>(de))) : 0.0;
        best.alpha = B.trace() / de;
      }
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace qstr::harness
