// qstr: dataset generation, training, sweeps and verification commands.
//
// Exit codes: 0 success, 1 configuration error, 2 failed --check.
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "qstr/checks.hpp"
#include "qstr/harness.hpp"
#include "qstr/oracles.hpp"

namespace fs = std::filesystem;
using namespace qstr;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  int jobs = 1;
  std::string out = "out";
  std::vector<std::string> sets;
};

// --config file then --set overrides, later wins.
harness::Settings gather(const std::string& config, const Globals& g) {
  harness::Settings s;
  if (!config.empty()) s = harness::load_settings(config);
  for (const auto& kv : g.sets) harness::apply_override(s, kv);
  return s;
}

std::string take(harness::Settings& s, const std::string& key, const std::string& fallback) {
  auto it = s.find(key);
  if (it == s.end()) return fallback;
  std::string v = it->second;
  s.erase(it);
  return v;
}

void emit_report(const nlohmann::json& j, const Globals& g, const std::string& name) {
  std::cout << j.dump(2) << "\n";
  fs::create_directories(g.out);
  harness::write_text(g.out + "/" + name + ".json", j.dump(2) + "\n");
}

int check_exit(const nlohmann::json& j, bool check) { return check && !j.value("pass", false) ? 2 : 0; }

data::TaskConfig gen_task(harness::Settings& s) {
  data::TaskConfig t;
  t.N = std::stoi(take(s, "N", "16"));
  t.d = std::stoi(take(s, "d", "10"));
  t.q = std::stoi(take(s, "q", "1"));
  const std::string link = take(s, "link", "linear");
  data::Vector u = data::Vector::Unit(t.d, 0);
  if (link == "linear") t.link = data::LinkSpec::linear(u, t.q);
  else if (link == "token-mean") t.link = data::LinkSpec::token_mean(u, t.q);
  else if (link == "centered-norm") t.link = data::LinkSpec::centered_norm(t.q, t.d);
  else throw std::invalid_argument("gen: unsupported link '" + link + "'");
  t.mode = data::parse_mode(take(s, "mode", "qstr"));
  t.index_law = data::parse_index_law(take(s, "index_law", "uniform"));
  t.token_law = data::parse_token_law(take(s, "token_law", "gaussian"));
  data::validate(t);
  return t;
}

void reject_leftovers(const harness::Settings& s, const std::string& cmd) {
  if (!s.empty()) throw std::invalid_argument(cmd + ": unknown key '" + s.begin()->first + "'");
}

harness::SweepResult sweep_from_json(const nlohmann::json& j) {
  harness::SweepResult r;
  for (const auto& t : j.at("trials")) {
    harness::TrialResult x;
    x.arch = t.at("arch").get<std::string>();
    x.N = t.at("N").get<int>();
    x.seed = t.at("seed").get<int>();
    if (!t.at("samples_to_threshold").is_null()) x.samples = t.at("samples_to_threshold").get<std::int64_t>();
    x.diverged = t.value("diverged", false);
    x.consumed = t.value("consumed", std::int64_t{0});
    x.final_test_mse = t.at("final_test_mse").get<double>();
    r.trials.push_back(x);
  }
  r.cells = harness::summarize_cells(r.trials);
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse token regression experiments"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--jobs", g.jobs, "parallel trials")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");
  app.add_option("--set", g.sets, "key=value override (repeatable)");
  app.fallthrough();

  std::string config;
  bool check = false;

  auto* gen = app.add_subcommand("gen", "write a JSONL dataset");
  int count = 1000;
  gen->add_option("--config", config);
  gen->add_option("--count", count)->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "one online training run");
  train->add_option("--config", config);

  auto* sweep = app.add_subcommand("sweep", "sample-complexity sweep over N");
  sweep->add_option("--config", config);

  auto* vc = app.add_subcommand("verify-construction", "build a closed-form model and probe its error");
  std::string kind;
  int N = 0, d = 0, q = 0, prompts = 0;
  double eps = 0;
  bool save = false;
  vc->add_option("kind", kind, "attention | recurrent | interpolant")->required();
  vc->add_option("--N", N);
  vc->add_option("--d", d);
  vc->add_option("--q", q);
  vc->add_option("--eps", eps);
  vc->add_option("--prompts", prompts);
  vc->add_flag("--save", save, "also write the weights as a checkpoint");
  vc->add_flag("--check", check);

  auto* orc = app.add_subcommand("oracle", "analytic bounds and Monte Carlo oracles");
  std::string okind;
  int H = -1, n = -1, q_max = 6;
  long n_mc = 100000;
  std::string variant = "general";
  orc->add_option("kind", okind, "span-risk | cond-var | head-bound")->required();
  orc->add_option("--N", N);
  orc->add_option("--d", d);
  orc->add_option("--q", q);
  orc->add_option("--H", H);
  orc->add_option("--n", n);
  orc->add_option("--q-max", q_max);
  orc->add_option("--samples", n_mc);
  orc->add_option("--variant", variant);
  orc->add_flag("--check", check);

  auto* aa = app.add_subcommand("analyze-attn", "block mass and alignment of trained score matrices");
  std::string ckpt;
  aa->add_option("checkpoint", ckpt)->required()->check(CLI::ExistingFile);

  auto* plot = app.add_subcommand("plot", "redraw the SVG chart from a sweep JSON");
  std::string in;
  plot->add_option("sweep_json", in)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      auto s = gather(config, g);
      const auto task = gen_task(s);
      reject_leftovers(s, "gen");
      Rng rng(g.seed);
      const auto ps = data::sample_prompts(task, count, rng);
      fs::create_directories(g.out);
      std::ofstream os(g.out + "/dataset.jsonl");
      if (!os) throw std::runtime_error("cannot write " + g.out + "/dataset.jsonl");
      data::write_dataset(os, {task.N, task.d, task.q, data::to_string(task.link.kind), g.seed}, ps);
      std::cout << "wrote " << ps.size() << " prompts to " << g.out << "/dataset.jsonl\n";
      return 0;
    }
    if (*train) {
      auto s = gather(config, g);
      if (auto it = s.find("arch"); it != s.end()) {
        s["archs"] = it->second;
        s.erase(it);
      }
      s["seed"] = std::to_string(g.seed);
      const auto sc = harness::sweep_config_from(s);
      const auto tc = harness::trial_config(sc, sc.archs.front(), sc.n_grid.front());
      const auto tr = trainer::train_online(tc, g.seed);
      fs::create_directories(g.out);
      std::ostringstream csv;
      trainer::write_trace_csv(csv, tr);
      harness::write_text(g.out + "/trace.csv", csv.str());
      nlohmann::json prov = {{"config", trainer::to_json(tc)}, {"seed", g.seed}};
      models::save_checkpoint(g.out + "/model.jsonl", tr.params, prov);
      const auto& last = tr.records.back();
      std::cout << "samples " << last.samples << "  test_mse " << last.test_mse << (tr.reached ? "  (threshold met)" : "")
                << (tr.diverged ? "  (diverged)" : "") << "\n";
      return 0;
    }
    if (*sweep) {
      auto s = gather(config, g);
      if (!s.count("seed")) s["seed"] = std::to_string(g.seed);
      if (!s.count("jobs")) s["jobs"] = std::to_string(g.jobs);
      const auto sc = harness::sweep_config_from(s);
      const auto r = harness::run_sweep(sc, sc.save_traces ? g.out + "/traces" : "");
      harness::emit_outputs(r, sc, g.out);
      std::cout << harness::sweep_csv(r);
      return 0;
    }
    if (*vc) {
      const std::string path = save ? g.out + "/" + kind + ".jsonl" : "";
      if (save) fs::create_directories(g.out);
      nlohmann::json j;
      if (kind == "attention") {
        j = checks::tr_construction(N ? N : 64, d ? d : 10, q ? q : 1, eps ? eps : 1e-4, prompts ? prompts : 1000, g.seed,
                                    path);
      } else if (kind == "recurrent") {
        j = checks::rnn_construction(N ? N : 16, d ? d : 3, q ? q : 2, eps ? eps : 1e-3, prompts ? prompts : 100, g.seed,
                                     path);
      } else if (kind == "interpolant") {
        j = checks::interpolant(N ? N : 32, d ? d : 10, prompts ? prompts : 100, {8, 16, 32, 64}, 20, g.seed);
      } else {
        throw std::invalid_argument("verify-construction: unknown kind '" + kind + "'");
      }
      emit_report(j, g, "construction_" + kind);
      return check_exit(j, check);
    }
    if (*orc) {
      nlohmann::json j;
      if (okind == "span-risk") {
        const int NN = N ? N : 10, dd = d ? d : 10;
        j = checks::span_risk(NN, dd, n >= 0 ? n : NN * dd / 2, 50, g.seed);
      } else if (okind == "cond-var") {
        if (q > 0 && H >= 0) {
          Rng rng(g.seed);
          const auto rep = oracles::conditional_variance_check(q, H, rng, n_mc);
          j = oracles::to_json(rep);
          j["pass"] = rep.within(4.0);
        } else {
          j = checks::conditional_variance(q_max, n_mc, g.seed);
        }
      } else if (okind == "head-bound") {
        if (q < 1 || H < 0) throw std::invalid_argument("head-bound needs --q and --H");
        const auto v = variant == "restricted-d1" ? oracles::HeadBoundVariant::kRestrictedD1
                       : variant == "general"     ? oracles::HeadBoundVariant::kGeneral
                                                  : throw std::invalid_argument("unknown variant " + variant);
        j = {{"q", q}, {"d", d ? d : 1}, {"H", H}, {"variant", variant},
             {"bound", oracles::head_bound(q, d ? d : 1, H, v)}, {"pass", true}};
      } else {
        throw std::invalid_argument("oracle: unknown kind '" + okind + "'");
      }
      emit_report(j, g, "oracle_" + okind);
      return check_exit(j, check);
    }
    if (*aa) {
      const auto p = models::load_checkpoint(ckpt);
      if (!p.is_transformer()) throw std::invalid_argument("analyze-attn: checkpoint is not a transformer");
      nlohmann::json j = nlohmann::json::array();
      for (const auto& h : harness::analyze_attention(std::get<models::TransformerParams>(p.v))) {
        j.push_back({{"head", h.head}, {"slot", h.slot}, {"mass_ratio", h.mass_ratio}, {"alignment", h.alignment},
                     {"alpha", h.alpha}});
      }
      emit_report(j, g, "attention");
      return 0;
    }
    if (*plot) {
      std::ifstream is(in);
      const auto j = nlohmann::json::parse(is);
      const auto r = sweep_from_json(j);
      fs::create_directories(g.out);
      const std::string title = "samples to test MSE " + std::to_string(j.at("config").at("threshold").get<double>());
      harness::write_text(g.out + "/sweep.svg", harness::sweep_svg(r, title));
      std::cout << "wrote " << g.out << "/sweep.svg\n";
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
