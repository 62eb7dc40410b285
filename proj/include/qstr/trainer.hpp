// Online AdamW training on freshly sampled prompts.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qstr/data.hpp"
#include "qstr/models.hpp"

namespace qstr::trainer {

using ndgrad::Matrix;

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  AdamWConfig hp;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t step = 0;
};

AdamWState make_adamw(const models::ModelParams& p, const AdamWConfig& hp);

// Throws std::invalid_argument naming the tensor on a shape mismatch or a
// non-finite gradient.
void adamw_step(models::ModelParams& p, const std::vector<Matrix>& grads, AdamWState& state);

// Global rescale by min(1, R / |vec(params)|).
void project_norm(models::ModelParams& p, double R);
double param_norm(const models::ModelParams& p);

struct TrainConfig {
  models::ArchConfig arch;
  data::TaskConfig task;
  data::EncodingScheme encoding = data::EncodingScheme::kUniformHypercube;
  int d_e = 0;  // 0 means floor(5 ln N)
  AdamWConfig opt;
  int batch = 64;
  int eval_every = 512;  // samples between evaluations
  int test_size = 512;
  std::int64_t budget = 100000;
  double threshold = 0.0;  // stop at the first eval with test MSE <= threshold; <= 0 disables
  models::LossMode loss = models::LossMode::kAveraged;
  std::optional<double> norm_radius;
  std::optional<double> clip_tau;  // applied to test predictions only
  double divergence = 1e3;
};

struct EvalRecord {
  std::int64_t samples = 0;
  double train_mse = 0.0;  // mean batch loss since the previous record
  double test_mse = 0.0;
};

struct TrainTrace {
  std::vector<EvalRecord> records;
  models::ModelParams params;
  data::EncodingBank bank;
  bool diverged = false;
  bool reached = false;
  std::uint64_t seed = 0;
};

// Everything random in a run derives from `seed`: encodings, init, the test
// set and the training stream each get their own substream.
TrainTrace train_online(const TrainConfig& cfg, std::uint64_t seed);

double evaluate_mse(const models::ModelParams& p, const data::EncodingBank& bank,
                    const std::vector<data::Prompt>& prompts, std::optional<double> clip_tau = std::nullopt);

nlohmann::json to_json(const TrainConfig& cfg);
void write_trace_csv(std::ostream& os, const TrainTrace& trace);

}  // namespace qstr::trainer
