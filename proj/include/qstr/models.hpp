// Single-layer multi-head attention, deep-transition bidirectional RNN and a
// feedforward baseline, all built as ndgrad graphs.
#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "qstr/data.hpp"
#include "qstr/ndgrad.hpp"
#include "qstr/rng.hpp"

namespace qstr::models {

using ndgrad::Graph;
using ndgrad::Matrix;
using ndgrad::NodeId;
using data::Vector;

struct TaskShape {
  int N = 0;
  int d = 0;
  int q = 0;
  int d_e = 0;
  int embed() const { return data::encoded_dim(d, q, d_e); }
};

// ReLU stack; the last layer is linear and has no bias.
struct Mlp {
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;  // one per hidden layer, column vectors
  int in() const { return static_cast<int>(weights.front().cols()); }
  int out() const { return static_cast<int>(weights.back().rows()); }
  int depth() const { return static_cast<int>(weights.size()); }
};

struct TransformerParams {
  TaskShape shape;
  std::vector<Matrix> qk;      // merged D_e × D_e score matrices
  std::vector<Matrix> wq, wk;  // split form; score matrix is wq^T wk
  Matrix w2nn;                 // m × (H·D_e)
  Matrix b2nn;                 // m × 1
  Matrix a2nn;                 // m × 1
  bool split() const { return !wq.empty(); }
  int heads() const { return static_cast<int>(split() ? wq.size() : qk.size()); }
  int width() const { return static_cast<int>(w2nn.rows()); }
  std::vector<Matrix> score_matrices() const;
};

struct BiRnnParams {
  TaskShape shape;
  Mlp fwd;  // (d_h + D_e) -> d_h
  Mlp bwd;
  Mlp out;  // (2 d_h + D_e) -> 1
  int state_dim = 0;
  double radius = 0.0;
  std::optional<double> lipschitz_budget;
};

struct FfnParams {
  TaskShape shape;
  Matrix w1;  // m1 × N d, no bias
  Mlp rest;   // (m1 + N q d_e) -> N
};

struct ModelParams {
  std::variant<TransformerParams, BiRnnParams, FfnParams> v;

  std::string arch() const;
  const TaskShape& shape() const;
  bool is_transformer() const { return std::holds_alternative<TransformerParams>(v); }
  bool is_rnn() const { return std::holds_alternative<BiRnnParams>(v); }
  bool is_ffn() const { return std::holds_alternative<FfnParams>(v); }
};

// Flat, stably ordered views over every trainable tensor.
std::vector<Matrix*> tensors(ModelParams& p);
std::vector<const Matrix*> tensors(const ModelParams& p);
std::vector<std::string> tensor_names(const ModelParams& p);
std::size_t parameter_count(const ModelParams& p);

enum class Arch { kTransformer, kRnn, kFfn };
std::string to_string(Arch a);
Arch parse_arch(const std::string& s);

struct ArchConfig {
  Arch arch = Arch::kTransformer;
  int heads = 0;  // 0 means q
  int width = 64;
  bool split_qk = false;
  double qk_init_scale = 0.02;
  int rnn_state = 0;         // 0 means 4 q d
  double rnn_radius = 0.0;   // 0 means 4 sqrt(q d)
  int rnn_transition_depth = 2;
  int rnn_output_depth = 2;
  int rnn_hidden = 64;
  std::optional<double> lipschitz_budget;
  int ffn_width = 256;
  int ffn_hidden_layers = 2;
};

ModelParams init_model(const ArchConfig& cfg, const TaskShape& shape, Rng& rng);

Mlp init_mlp(const std::vector<int>& widths, Rng& rng);

// ---- graph forwards ----

// Binds every tensor as a parameter (trainable) or constant node, in the
// order of tensors().
std::vector<NodeId> bind(Graph& g, const ModelParams& p, bool trainable);

struct RnnStateNodes {
  std::vector<NodeId> fwd;  // per position, d_h × B
  std::vector<NodeId> bwd;
};

// N × B predictions for a batch of prompts.
NodeId forward_batch(Graph& g, const ModelParams& p, const std::vector<NodeId>& ids,
                     const std::vector<const data::Prompt*>& batch, const data::EncodingBank& bank,
                     RnnStateNodes* states = nullptr);

enum class LossMode { kAveraged, kPointwise };
std::string to_string(LossMode m);
LossMode parse_loss_mode(const std::string& s);

// Averaged: mean over all N·B entries. Pointwise: one position per prompt,
// given by `positions`.
NodeId batch_loss(Graph& g, NodeId pred, const std::vector<const data::Prompt*>& batch, LossMode mode,
                  const std::vector<int>& positions = {});

// ---- direct evaluation ----

std::vector<Matrix> attention_scores(const std::vector<Matrix>& qk, const Matrix& Z);
Vector tr_forward(const TransformerParams& p, const Matrix& Z);

struct RnnTrace {
  Vector yhat;
  Matrix fwd;  // d_h × N
  Matrix bwd;
};
RnnTrace rnn_forward(const BiRnnParams& p, const Matrix& Z);
Vector ffn_forward(const FfnParams& p, const data::Prompt& prompt, const data::EncodingBank& bank);

Vector predict(const ModelParams& p, const data::Prompt& prompt, const data::EncodingBank& bank);
// Predictions for many prompts, evaluated in chunks; column b is prompt b.
Matrix predict_many(const ModelParams& p, const std::vector<data::Prompt>& prompts, const data::EncodingBank& bank,
                    int chunk = 64);

Vector clip_output(const Vector& yhat, double tau);

// Evaluate an Mlp on a single input vector.
Vector mlp_apply(const Mlp& m, const Vector& x);

// Product of operator norms of the forward transition with its first layer
// restricted to the state columns.
double transition_lipschitz(const BiRnnParams& p);
// Rescale the state block of the first forward-transition layer so the
// product above does not exceed the budget. No-op without a budget.
void enforce_lipschitz(BiRnnParams& p);

// ---- checkpoints ----
void write_checkpoint(std::ostream& os, const ModelParams& p, const nlohmann::json& provenance = {});
ModelParams read_checkpoint(std::istream& is, nlohmann::json* provenance = nullptr);
void save_checkpoint(const std::string& path, const ModelParams& p, const nlohmann::json& provenance = {});
ModelParams load_checkpoint(const std::string& path, nlohmann::json* provenance = nullptr);

}  // namespace qstr::models
