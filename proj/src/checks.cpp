#include "qstr/checks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "qstr/constructions.hpp"
#include "qstr/harness.hpp"
#include "qstr/oracles.hpp"

namespace qstr::checks {

using ndgrad::Matrix;
using data::Vector;

namespace {

Vector random_unit(int d, Rng& rng) {
  Vector u(d);
  for (int k = 0; k < d; ++k) u(k) = rng.normal();
  return u.normalized();
}

// Exact head for u^T mean of the q selected tokens, plus the matching link.
constructions::Construction2NN mean_head(const Vector& u, int q) {
  const int d = static_cast<int>(u.size());
  Vector w(q * d);
  for (int l = 0; l < q; ++l) w.segment(l * d, d) = u / q;
  const double n = w.norm();
  constructions::Construction2NN c = constructions::build_linear_2nn(w / n);
  c.a *= n;
  return c;
}

data::LinkSpec mean_link(const Vector& u, int q) { return q == 1 ? data::LinkSpec::linear(u, 1) : data::LinkSpec::token_mean(u, q); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

nlohmann::json gradient_suite(const std::vector<models::Arch>& archs, int seeds, std::uint64_t master, double tol) {
  nlohmann::json rows = nlohmann::json::array();
  bool pass = true;
  double worst = 0.0;
  long checked = 0, excluded = 0;
  for (auto arch : archs) {
    for (int s = 0; s < seeds; ++s) {
      Rng rng = Rng(master).split(models::to_string(arch)).split(static_cast<std::uint64_t>(s));
      const int N = 2 + static_cast<int>(rng.below(7));  // 2..8
      const int d = 1 + static_cast<int>(rng.below(4));  // 1..4
      const int q = 1 + static_cast<int>(rng.below(std::min(2, N)));
      const int de = 2 + static_cast<int>(rng.below(3));
      models::ArchConfig ac;
      ac.arch = arch;
      ac.width = 4 + static_cast<int>(rng.below(13));
      ac.split_qk = rng.below(2) == 1;
      ac.qk_init_scale = 1.0;
      ac.rnn_state = 2 + static_cast<int>(rng.below(7));
      ac.rnn_hidden = 4 + static_cast<int>(rng.below(13));
      ac.rnn_radius = 1.0;  // small, so the projection is active on some states
      ac.ffn_width = 4 + static_cast<int>(rng.below(13));
      ac.ffn_hidden_layers = 1 + static_cast<int>(rng.below(2));
      const models::TaskShape shape{N, d, q, de};
      Rng init = rng.split("init");
      models::ModelParams p = models::init_model(ac, shape, init);
      Rng brng = rng.split("bank");
      const auto bank = data::sample_encodings(N, de, data::EncodingScheme::kUniformHypercube, brng);
      data::TaskConfig task;
      task.N = N;
      task.d = d;
      task.q = q;
      task.link = data::LinkSpec::centered_norm(q, d);
      Rng prng = rng.split("prompts");
      const auto prompts = data::sample_prompts(task, 3, prng);
      std::vector<const data::Prompt*> ptrs;
      for (const auto& pr : prompts) ptrs.push_back(&pr);

      std::vector<Matrix> flat;
      for (const Matrix* t : models::tensors(p)) flat.push_back(*t);
      const ndgrad::LossBuilder builder = [&](const std::vector<Matrix>& theta) {
        models::ModelParams local = p;
        auto ts = models::tensors(local);
        for (std::size_t k = 0; k < ts.size(); ++k) *ts[k] = theta[k];
        ndgrad::BuiltLoss b;
        b.params = models::bind(b.graph, local, true);
        const auto pred = models::forward_batch(b.graph, local, b.params, ptrs, bank);
        b.loss = models::batch_loss(b.graph, pred, ptrs, models::LossMode::kAveraged, {});
        return b;
      };
      const auto rep = ndgrad::grad_check(builder, flat, 1e-4, tol);
      pass = pass && rep.passed;
      worst = std::max(worst, rep.max_rel_error);
      checked += static_cast<long>(rep.checked);
      excluded += static_cast<long>(rep.excluded);
      if (!rep.passed) {
        rows.push_back({{"arch", models::to_string(arch)},
                        {"seed", s},
                        {"N", N},
                        {"d", d},
                        {"q", q},
                        {"max_rel_error", rep.max_rel_error},
                        {"tensor", models::tensor_names(p)[rep.tensor]},
                        {"analytic", rep.analytic},
                        {"numeric", rep.numeric}});
      }
    }
  }
  return {{"pass", pass}, {"max_rel_error", worst}, {"checked", checked}, {"excluded", excluded}, {"failures", rows}};
}

nlohmann::json span_risk(int N, int d, int n, int bases, std::uint64_t seed, double tol) {
  Rng rng(seed);
  const double closed = oracles::ffn_span_risk(N, d, n);
  double worst = 0.0;
  for (int k = 0; k < bases; ++k) {
    // n orthonormal columns of R^{Nd}
    const Matrix V = oracles::random_orthonormal_rows(n, N * d, rng).transpose();
    worst = std::max(worst, std::abs(oracles::span_restricted_risk(V, N, d) - closed));
  }
  return {{"N", N}, {"d", d}, {"n", n}, {"bases", bases}, {"closed_form", closed}, {"max_deviation", worst},
          {"pass", worst <= tol}};
}

nlohmann::json conditional_variance(int q_max, long n_mc, std::uint64_t seed, double k_se) {
  nlohmann::json rows = nlohmann::json::array();
  bool pass = true;
  for (int q = 1; q <= q_max; ++q) {
    for (int H = 0; H <= q; ++H) {
      Rng rng = Rng(seed).split(static_cast<std::uint64_t>(q * 100 + H));
      const auto rep = oracles::conditional_variance_check(q, H, rng, n_mc);
      const bool ok = rep.within(k_se);
      pass = pass && ok;
      auto j = oracles::to_json(rep);
      j["ok"] = ok;
      rows.push_back(j);
    }
  }
  return {{"pass", pass}, {"k_se", k_se}, {"rows", rows}};
}

nlohmann::json tr_construction(int N, int d, int q, double eps, int prompts, std::uint64_t seed,
                               const std::string& save_to) {
  const Rng root(seed);
  Rng brng = root.split("bank");
  Rng urng = root.split("u");
  Rng prng = root.split("prompts");
  const auto bank = data::sample_separated_encodings(N, data::default_encoding_dim(N), brng);
  const Vector u = random_unit(d, urng);
  const auto head = mean_head(u, q);
  const double r_x = data::tail_radius(1.0, d, prompts, N);
  constructions::TrConstructionInfo info;
  const auto tp = constructions::build_tr_construction(head, bank, N, d, q, eps, r_x, std::nullopt, &info);
  const models::ModelParams mp{tp};
  if (!save_to.empty()) {
    models::save_checkpoint(save_to, mp, {{"construction", "attention"}, {"certified_eps", info.error_bound}, {"seed", seed}});
  }

  data::TaskConfig task;
  task.N = N;
  task.d = d;
  task.q = q;
  task.link = mean_link(u, q);
  task.token_radius = r_x;
  const auto ps = data::sample_prompts(task, prompts, prng);
  const Matrix yhat = models::predict_many(mp, ps, bank);
  double sup = 0.0;
  for (std::size_t b = 0; b < ps.size(); ++b)
    sup = std::max(sup, (yhat.col(static_cast<Eigen::Index>(b)) - ps[b].labels).cwiseAbs().maxCoeff());
  const double bound = 2.0 * std::sqrt(eps);
  long nonzero = 0;
  for (const auto& w : tp.qk) nonzero += static_cast<long>((w.array() != 0.0).count());
  return {{"N", N},
          {"d", d},
          {"q", q},
          {"d_e", bank.dim()},
          {"eps", eps},
          {"r_x", r_x},
          {"alpha", info.alpha},
          {"declared_error", info.error_bound},
          {"sup_error", sup},
          {"bound", bound},
          {"qk_nonzeros", nonzero},
          {"pass", sup <= bound}};
}

nlohmann::json rnn_construction(int N, int d, int q, double eps, int prompts, std::uint64_t seed,
                                const std::string& save_to) {
  const Rng root(seed);
  Rng brng = root.split("bank");
  Rng urng = root.split("u");
  Rng prng = root.split("prompts");
  const auto bank = data::sample_separated_encodings(N, data::default_encoding_dim(N), brng);
  const Vector u = random_unit(d, urng);
  const auto head = mean_head(u, q);
  const double r_x = data::tail_radius(1.0, d, prompts, N);
  constructions::RnnConstructionInfo info;
  const auto rp = constructions::build_rnn_construction(head, bank, N, d, q, eps, r_x, &info);
  if (!save_to.empty()) {
    models::save_checkpoint(save_to, models::ModelParams{rp},
                            {{"construction", "recurrent"}, {"certified_eps", info.eps_out}, {"seed", seed}});
  }

  data::TaskConfig task;
  task.N = N;
  task.d = d;
  task.q = q;
  task.link = mean_link(u, q);
  task.mode = data::PromptMode::kSimple;
  task.token_radius = r_x;
  const auto ps = data::sample_prompts(task, prompts, prng);

  double zero_max = 0.0;  // largest |entry| where an exact zero is promised
  double on_err = 0.0;
  double sq_err = 0.0;
  long zero_blocks = 0, on_blocks = 0;
  for (const auto& p : ps) {
    const auto tr = models::rnn_forward(rp, data::encode_prompt(p, bank));
    for (int i = 0; i < N; ++i) {
      for (int l = 0; l < q; ++l) {
        const int t = p.indices(0, l);
        const Vector f = tr.fwd.col(i).segment(l * d, d);
        const Vector b = tr.bwd.col(i).segment(l * d, d);
        if (t >= i) {
          zero_max = std::max(zero_max, f.cwiseAbs().maxCoeff());
          ++zero_blocks;
        } else {
          on_err = std::max(on_err, (f - p.tokens.col(t)).cwiseAbs().maxCoeff());
          ++on_blocks;
        }
        if (t <= i) {
          zero_max = std::max(zero_max, b.cwiseAbs().maxCoeff());
          ++zero_blocks;
        } else {
          on_err = std::max(on_err, (b - p.tokens.col(t)).cwiseAbs().maxCoeff());
          ++on_blocks;
        }
      }
    }
    sq_err = std::max(sq_err, (tr.yhat - p.labels).array().square().maxCoeff());
  }
  const bool zeros_ok = zero_max == 0.0;
  const bool on_ok = on_err <= info.eps_state;
  const bool e2e_ok = sq_err <= 4.0 * eps;
  return {{"N", N},
          {"d", d},
          {"q", q},
          {"d_e", bank.dim()},
          {"eps_2nn", eps},
          {"r_x", r_x},
          {"state_dim", rp.state_dim},
          {"transition_units", info.transition_units},
          {"output_units", info.output_units},
          {"ip_error", info.ip_error},
          {"deadzone", info.deadzone},
          {"hard_zero_blocks", zero_blocks},
          {"hard_zero_max_abs", zero_max},
          {"on_target_blocks", on_blocks},
          {"on_target_sup_error", on_err},
          {"declared_state_error", info.eps_state},
          {"declared_output_error", info.eps_out},
          {"sup_squared_error", sq_err},
          {"squared_error_bound", 4.0 * eps},
          {"hard_zeros_ok", zeros_ok},
          {"on_target_ok", on_ok},
          {"end_to_end_ok", e2e_ok},
          {"pass", zeros_ok && on_ok && e2e_ok}};
}

nlohmann::json interpolant(int n_fit, int d, int seeds, const std::vector<int>& grid, int grid_seeds,
                           std::uint64_t seed, double norm_const) {
  auto fit_one = [&](int n, Rng rng, double* err, double* norm, int* draws) {
    Matrix X(d, n);
    Vector y(n);
    for (int c = 0; c < n; ++c)
      for (int r = 0; r < d; ++r) X(r, c) = rng.normal();
    for (int c = 0; c < n; ++c) y(c) = rng.normal();
    try {
      const auto it = constructions::build_interpolant(X, y, rng);
      double e = 0.0;
      for (int c = 0; c < n; ++c) e = std::max(e, std::abs(it.net.eval(X.col(c)) - y(c)));
      *err = e;
      *norm = it.net.squared_norm();
      *draws = it.draws;
      return true;
    } catch (const std::runtime_error&) {
      return false;
    }
  };
  const Rng root(seed);
  int fitted = 0;
  int norm_ok = 0;
  int max_draws = 0;
  double worst_ratio = 0.0;
  const double cube = std::pow(static_cast<double>(n_fit), 3);
  for (int s = 0; s < seeds; ++s) {
    double err = 0, norm = 0;
    int draws = 0;
    if (!fit_one(n_fit, root.split("fit").split(static_cast<std::uint64_t>(s)), &err, &norm, &draws)) continue;
    max_draws = std::max(max_draws, draws);
    if (err <= 1e-8) ++fitted;
    if (norm <= norm_const * cube) ++norm_ok;
    worst_ratio = std::max(worst_ratio, norm / cube);
  }
  nlohmann::json pts = nlohmann::json::array();
  std::vector<double> lx, ly;
  for (int n : grid) {
    std::vector<double> norms;
    for (int s = 0; s < grid_seeds; ++s) {
      double err = 0, norm = 0;
      int draws = 0;
      if (fit_one(n, root.split("grid").split(static_cast<std::uint64_t>(n)).split(static_cast<std::uint64_t>(s)), &err,
                  &norm, &draws)) {
        norms.push_back(norm);
      }
    }
    if (norms.empty()) continue;
    const double m = median(norms);
    pts.push_back({{"n", n}, {"median_squared_norm", m}, {"fits", norms.size()}});
    lx.push_back(std::log(static_cast<double>(n)));
    ly.push_back(std::log(m));
  }
  double slope = std::nan("");
  if (lx.size() >= 2) {
    const double k = static_cast<double>(lx.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
      sx += lx[i];
      sy += ly[i];
      sxx += lx[i] * lx[i];
      sxy += lx[i] * ly[i];
    }
    slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  }
  const bool fit_ok = fitted >= (95 * seeds + 99) / 100;
  const bool norms_ok = norm_ok == seeds;
  const bool slope_ok = std::isfinite(slope) && slope <= 3.3;
  return {{"n", n_fit},
          {"d", d},
          {"seeds", seeds},
          {"fitted", fitted},
          {"max_draws_used", max_draws},
          {"norm_const", norm_const},
          {"within_norm_bound", norm_ok},
          {"worst_norm_over_n3", worst_ratio},
          {"grid", pts},
          {"slope", std::isfinite(slope) ? nlohmann::json(slope) : nlohmann::json(nullptr)},
          {"fit_ok", fit_ok},
          {"norm_ok", norms_ok},
          {"slope_ok", slope_ok},
          {"pass", fit_ok && norms_ok && slope_ok}};
}

nlohmann::json head_separation(int seeds, std::int64_t budget, std::uint64_t master, long n_mc,
                               const harness::Settings& extra) {
  harness::Settings s = extra;
  s.insert({{"task", "halfdead-norm"}, {"archs", "transformer"}, {"N", "32"}, {"d", "10"}, {"q", "2"}});
  s["budget"] = std::to_string(budget);
  s["seeds"] = std::to_string(seeds);
  std::ostringstream csv;
  csv << "heads,seed,final_test_mse,risk,se\n";
  nlohmann::json runs = nlohmann::json::array();
  int two_head_ok = 0;
  bool one_head_ok = true;
  const double bound = oracles::head_bound(2, 10, 1, oracles::HeadBoundVariant::kGeneral);
  for (int H : {1, 2}) {
    s["heads"] = std::to_string(H);
    const auto sc = harness::sweep_config_from(s);
    auto tc = harness::trial_config(sc, models::Arch::kTransformer, 32);
    tc.threshold = 0.0;  // spend the whole budget
    for (int k = 0; k < seeds; ++k) {
      const std::uint64_t seed = Rng(master).split("heads").split(static_cast<std::uint64_t>(H)).split(static_cast<std::uint64_t>(k)).key();
      const auto tr = trainer::train_online(tc, seed);
      Rng erng = Rng(seed).split("risk");
      const auto r = oracles::estimate_model_risk(tr.params, tr.bank, tc.task, n_mc, erng, oracles::PositionMode::kAveraged);
      if (H == 1 && r.mean < bound - 4 * r.se) one_head_ok = false;
      if (H == 2 && r.mean <= 0.2) ++two_head_ok;
      csv << H << "," << k << "," << harness::fmt(tr.records.back().test_mse) << "," << harness::fmt(r.mean) << ","
          << harness::fmt(r.se) << "\n";
      runs.push_back({{"heads", H}, {"seed", k}, {"risk", r.mean}, {"se", r.se}, {"diverged", tr.diverged}});
    }
  }
  const int need = (3 * seeds + 4) / 5;
  return {{"bound", bound},
          {"one_head_ok", one_head_ok},
          {"two_head_reached", two_head_ok},
          {"two_head_needed", need},
          {"runs", runs},
          {"csv", csv.str()},
          {"pass", one_head_ok && two_head_ok >= need}};
}

nlohmann::json attention_structure(int seeds, std::int64_t budget, std::uint64_t master, const harness::Settings& extra) {
  harness::Settings s = extra;
  s.insert({{"task", "1str"}, {"archs", "transformer"}, {"N", "100"}, {"d", "10"}, {"q", "1"}, {"split_qk", "true"}});
  s["budget"] = std::to_string(budget);
  s["seeds"] = std::to_string(seeds);
  const auto sc = harness::sweep_config_from(s);
  auto tc = harness::trial_config(sc, models::Arch::kTransformer, 100);
  tc.threshold = 0.0;
  std::ostringstream csv;
  csv << "seed,head,slot,mass_ratio,alignment,alpha,final_test_mse\n";
  nlohmann::json runs = nlohmann::json::array();
  int ok = 0;
  for (int k = 0; k < seeds; ++k) {
    const std::uint64_t seed = Rng(master).split("structure").split(static_cast<std::uint64_t>(k)).key();
    const auto tr = trainer::train_online(tc, seed);
    const auto heads = harness::analyze_attention(std::get<models::TransformerParams>(tr.params.v));
    bool all = true;
    for (const auto& h : heads) {
      all = all && h.mass_ratio >= 0.5 && h.alignment >= 0.7;
      csv << k << "," << h.head << "," << h.slot << "," << harness::fmt(h.mass_ratio) << "," << harness::fmt(h.alignment)
          << "," << harness::fmt(h.alpha) << "," << harness::fmt(tr.records.back().test_mse) << "\n";
      runs.push_back({{"seed", k}, {"head", h.head}, {"mass_ratio", h.mass_ratio}, {"alignment", h.alignment},
                      {"final_test_mse", tr.records.back().test_mse}});
    }
    ok += all ? 1 : 0;
  }
  const int need = (4 * seeds + 4) / 5;
  return {{"seeds_ok", ok}, {"seeds_needed", need}, {"runs", runs}, {"csv", csv.str()}, {"pass", ok >= need}};
}

}  // namespace qstr::checks
