#include "qstr/trainer.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace qstr::trainer {

AdamWState make_adamw(const models::ModelParams& p, const AdamWConfig& hp) {
  AdamWState s;
  s.hp = hp;
  for (const Matrix* t : models::tensors(p)) {
    s.m.push_back(Matrix::Zero(t->rows(), t->cols()));
    s.v.push_back(Matrix::Zero(t->rows(), t->cols()));
  }
  return s;
}

void adamw_step(models::ModelParams& p, const std::vector<Matrix>& grads, AdamWState& state) {
  auto ts = models::tensors(p);
  const auto names = models::tensor_names(p);
  if (grads.size() != ts.size() || state.m.size() != ts.size()) {
    throw std::invalid_argument("adamw_step: tensor count mismatch");
  }
  for (std::size_t k = 0; k < ts.size(); ++k) {
    if (grads[k].rows() != ts[k]->rows() || grads[k].cols() != ts[k]->cols()) {
      throw std::invalid_argument("adamw_step: gradient shape mismatch for " + names[k]);
    }
    if (!grads[k].allFinite()) throw std::invalid_argument("adamw_step: non-finite gradient in " + names[k]);
  }
  const AdamWConfig& hp = state.hp;
  ++state.step;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < ts.size(); ++k) {
    Matrix& th = *ts[k];
    state.m[k] = hp.beta1 * state.m[k] + (1.0 - hp.beta1) * grads[k];
    state.v[k] = hp.beta2 * state.v[k] + (1.0 - hp.beta2) * grads[k].cwiseProduct(grads[k]);
    const auto mhat = state.m[k].array() / c1;
    const auto vhat = state.v[k].array() / c2;
    th.array() -= hp.lr * (mhat / (vhat.sqrt() + hp.eps) + hp.weight_decay * th.array());
  }
}

double param_norm(const models::ModelParams& p) {
  double s = 0.0;
  for (const Matrix* t : models::tensors(p)) s += t->squaredNorm();
  return std::sqrt(s);
}

void project_norm(models::ModelParams& p, double R) {
  if (!(R > 0)) throw std::invalid_argument("project_norm: R must be positive");
  const double n = param_norm(p);
  if (n <= R) return;
  const double f = R / n;
  for (Matrix* t : models::tensors(p)) *t *= f;
}

double evaluate_mse(const models::ModelParams& p, const data::EncodingBank& bank,
                    const std::vector<data::Prompt>& prompts, std::optional<double> clip_tau) {
  const Matrix yhat = models::predict_many(p, prompts, bank);
  double total = 0.0;
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    data::Vector col = yhat.col(static_cast<Eigen::Index>(b));
    if (clip_tau) col = models::clip_output(col, *clip_tau);
    total += (col - prompts[b].labels).squaredNorm();
  }
  return total / (static_cast<double>(prompts.size()) * p.shape().N);
}

TrainTrace train_online(const TrainConfig& cfg, std::uint64_t seed) {
  data::validate(cfg.task);
  if (cfg.batch < 1 || cfg.eval_every < 1 || cfg.test_size < 1) {
    throw std::invalid_argument("train_online: batch, eval_every and test_size must be positive");
  }
  if (cfg.budget != 0 && cfg.budget < cfg.batch) throw std::invalid_argument("train_online: budget below batch size");
  const Rng root(seed);
  Rng bank_rng = root.split("encodings");
  Rng init_rng = root.split("init");
  Rng test_rng = root.split("test");
  Rng train_rng = root.split("train");

  const int N = cfg.task.N;
  const int de = cfg.d_e > 0 ? cfg.d_e : data::default_encoding_dim(N);
  TrainTrace trace{{}, models::ModelParams{}, data::EncodingBank{}, false, false, seed};
  trace.bank = cfg.encoding == data::EncodingScheme::kRademacher
                   ? data::sample_separated_encodings(N, de, bank_rng)
                   : data::sample_encodings(N, de, cfg.encoding, bank_rng);
  const models::TaskShape shape{N, cfg.task.d, cfg.task.q, de};
  trace.params = models::init_model(cfg.arch, shape, init_rng);
  const auto test = data::sample_prompts(cfg.task, cfg.test_size, test_rng);

  AdamWState opt = make_adamw(trace.params, cfg.opt);
  auto record = [&](std::int64_t samples, double train_mse) {
    const double test_mse = evaluate_mse(trace.params, trace.bank, test, cfg.clip_tau);
    trace.records.push_back({samples, train_mse, test_mse});
    if (!std::isfinite(test_mse) || test_mse > cfg.divergence) trace.diverged = true;
    if (cfg.threshold > 0 && test_mse <= cfg.threshold) trace.reached = true;
  };
  record(0, std::nan(""));

  std::int64_t samples = 0;
  double loss_sum = 0.0;
  int loss_count = 0;
  std::int64_t next_eval = cfg.eval_every;
  while (samples < cfg.budget && !trace.reached && !trace.diverged) {
    const int B = static_cast<int>(std::min<std::int64_t>(cfg.batch, cfg.budget - samples));
    const auto batch = data::sample_prompts(cfg.task, B, train_rng);
    std::vector<const data::Prompt*> ptrs;
    std::vector<int> positions;
    for (const auto& p : batch) {
      ptrs.push_back(&p);
      if (cfg.loss == models::LossMode::kPointwise) {
        positions.push_back(static_cast<int>(train_rng.below(static_cast<std::uint64_t>(N))));
      }
    }
    ndgrad::Graph g;
    const auto ids = models::bind(g, trace.params, true);
    const auto pred = models::forward_batch(g, trace.params, ids, ptrs, trace.bank);
    const auto loss = models::batch_loss(g, pred, ptrs, cfg.loss, positions);
    const double lv = g.value(loss)(0, 0);
    if (!std::isfinite(lv)) {
      trace.diverged = true;
      break;
    }
    const auto grads = g.backward(loss);
    std::vector<Matrix> gs;
    gs.reserve(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      gs.push_back(grads.contains(ids[k]) ? grads.at(ids[k])
                                          : Matrix::Zero(g.value(ids[k]).rows(), g.value(ids[k]).cols()));
    }
    adamw_step(trace.params, gs, opt);
    if (cfg.norm_radius) project_norm(trace.params, *cfg.norm_radius);
    if (auto* r = std::get_if<models::BiRnnParams>(&trace.params.v)) models::enforce_lipschitz(*r);
    samples += B;
    loss_sum += lv;
    ++loss_count;
    if (samples >= next_eval || samples >= cfg.budget) {
      record(samples, loss_sum / loss_count);
      loss_sum = 0.0;
      loss_count = 0;
      while (next_eval <= samples) next_eval += cfg.eval_every;
    }
  }
  return trace;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  const auto& a = cfg.arch;
  const auto& t = cfg.task;
  return {
      {"arch",
       {{"arch", models::to_string(a.arch)},
        {"heads", a.heads},
        {"width", a.width},
        {"split_qk", a.split_qk},
        {"qk_init_scale", a.qk_init_scale},
        {"rnn_state", a.rnn_state},
        {"rnn_radius", a.rnn_radius},
        {"rnn_transition_depth", a.rnn_transition_depth},
        {"rnn_output_depth", a.rnn_output_depth},
        {"rnn_hidden", a.rnn_hidden},
        {"ffn_width", a.ffn_width},
        {"ffn_hidden_layers", a.ffn_hidden_layers}}},
      {"task",
       {{"N", t.N},
        {"d", t.d},
        {"q", t.q},
        {"link", data::to_string(t.link.kind)},
        {"mode", data::to_string(t.mode)},
        {"index_law", data::to_string(t.index_law)},
        {"token_law", data::to_string(t.token_law)}}},
      {"encoding", data::to_string(cfg.encoding)},
      {"d_e", cfg.d_e},
      {"opt",
       {{"lr", cfg.opt.lr},
        {"beta1", cfg.opt.beta1},
        {"beta2", cfg.opt.beta2},
        {"eps", cfg.opt.eps},
        {"weight_decay", cfg.opt.weight_decay}}},
      {"batch", cfg.batch},
      {"eval_every", cfg.eval_every},
      {"test_size", cfg.test_size},
      {"budget", cfg.budget},
      {"threshold", cfg.threshold},
      {"loss", models::to_string(cfg.loss)},
  };
}

void write_trace_csv(std::ostream& os, const TrainTrace& trace) {
  os << "samples,train_mse,test_mse\n";
  os << std::setprecision(17);
  for (const auto& r : trace.records) {
    os << r.samples << ",";
    if (std::isfinite(r.train_mse)) os << r.train_mse;
    os << "," << r.test_mse << "\n";
  }
}

}  // namespace qstr::trainer
