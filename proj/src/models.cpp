#include "qstr/models.hpp"

#include <cmath>
#include <stdexcept>

namespace qstr::models {

using data::EncodingBank;
using data::Prompt;
using ndgrad::Index;

std::vector<Matrix> TransformerParams::score_matrices() const {
  if (!split()) return qk;
  std::vector<Matrix> out;
  for (std::size_t h = 0; h < wq.size(); ++h) out.push_back(wq[h].transpose() * wk[h]);
  return out;
}

std::string ModelParams::arch() const {
  if (is_transformer()) return "transformer";
  if (is_rnn()) return "rnn";
  return "ffn";
}

const TaskShape& ModelParams::shape() const {
  return std::visit([](const auto& p) -> const TaskShape& { return p.shape; }, v);
}

namespace {

template <typename P, typename M>
std::vector<M*> collect(P& p) {
  std::vector<M*> out;
  auto add_mlp = [&out](auto& mlp) {
    for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
      out.push_back(&mlp.weights[l]);
      if (l < mlp.biases.size()) out.push_back(&mlp.biases[l]);
    }
  };
  if (auto* t = std::get_if<TransformerParams>(&p.v)) {
    for (auto& m : t->qk) out.push_back(&m);
    for (std::size_t h = 0; h < t->wq.size(); ++h) {
      out.push_back(&t->wq[h]);
      out.push_back(&t->wk[h]);
    }
    out.push_back(&t->w2nn);
    out.push_back(&t->b2nn);
    out.push_back(&t->a2nn);
  } else if (auto* r = std::get_if<BiRnnParams>(&p.v)) {
    add_mlp(r->fwd);
    add_mlp(r->bwd);
    add_mlp(r->out);
  } else if (auto* f = std::get_if<FfnParams>(&p.v)) {
    out.push_back(&f->w1);
    add_mlp(f->rest);
  }
  return out;
}

void mlp_names(const Mlp& m, const std::string& prefix, std::vector<std::string>& out) {
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    out.push_back(prefix + ".W." + std::to_string(l));
    if (l < m.biases.size()) out.push_back(prefix + ".b." + std::to_string(l));
  }
}

Matrix gaussian(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = stddev * rng.normal();
  return m;
}

}  // namespace

std::vector<Matrix*> tensors(ModelParams& p) { return collect<ModelParams, Matrix>(p); }
std::vector<const Matrix*> tensors(const ModelParams& p) { return collect<const ModelParams, const Matrix>(p); }

std::vector<std::string> tensor_names(const ModelParams& p) {
  std::vector<std::string> out;
  if (auto* t = std::get_if<TransformerParams>(&p.v)) {
    for (std::size_t h = 0; h < t->qk.size(); ++h) out.push_back("qk." + std::to_string(h));
    for (std::size_t h = 0; h < t->wq.size(); ++h) {
      out.push_back("wq." + std::to_string(h));
      out.push_back("wk." + std::to_string(h));
    }
    out.insert(out.end(), {"w2nn", "b2nn", "a2nn"});
  } else if (auto* r = std::get_if<BiRnnParams>(&p.v)) {
    mlp_names(r->fwd, "fwd", out);
    mlp_names(r->bwd, "bwd", out);
    mlp_names(r->out, "out", out);
  } else if (auto* f = std::get_if<FfnParams>(&p.v)) {
    out.push_back("w1");
    mlp_names(f->rest, "rest", out);
  }
  return out;
}

std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  for (const Matrix* m : tensors(p)) n += static_cast<std::size_t>(m->size());
  return n;
}

std::string to_string(Arch a) {
  switch (a) {
    case Arch::kTransformer: return "transformer";
    case Arch::kRnn: return "rnn";
    case Arch::kFfn: return "ffn";
  }
  return "?";
}

Arch parse_arch(const std::string& s) {
  if (s == "transformer" || s == "tr") return Arch::kTransformer;
  if (s == "rnn") return Arch::kRnn;
  if (s == "ffn") return Arch::kFfn;
  throw std::invalid_argument("unknown architecture: " + s);
}

Mlp init_mlp(const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("init_mlp: need at least input and output widths");
  Mlp m;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    m.weights.push_back(gaussian(widths[l + 1], widths[l], 1.0 / std::sqrt(static_cast<double>(widths[l])), rng));
    if (l + 2 < widths.size()) m.biases.push_back(Matrix::Zero(widths[l + 1], 1));
  }
  return m;
}

ModelParams init_model(const ArchConfig& cfg, const TaskShape& shape, Rng& rng) {
  const int De = shape.embed();
  switch (cfg.arch) {
    case Arch::kTransformer: {
      TransformerParams t;
      t.shape = shape;
      const int H = cfg.heads > 0 ? cfg.heads : shape.q;
      const double fan = 1.0 / std::sqrt(static_cast<double>(De));
      for (int h = 0; h < H; ++h) {
        if (cfg.split_qk) {
          // product of two factors lands at the merged init scale
          const double s = std::sqrt(cfg.qk_init_scale) * fan;
          t.wq.push_back(gaussian(De, De, s, rng));
          t.wk.push_back(gaussian(De, De, s, rng));
        } else {
          t.qk.push_back(gaussian(De, De, cfg.qk_init_scale * fan, rng));
        }
      }
      t.w2nn = gaussian(cfg.width, H * De, 1.0 / std::sqrt(static_cast<double>(H * De)), rng);
      t.b2nn = Matrix::Zero(cfg.width, 1);
      t.a2nn = gaussian(cfg.width, 1, 1.0 / std::sqrt(static_cast<double>(cfg.width)), rng);
      return ModelParams{std::move(t)};
    }
    case Arch::kRnn: {
      BiRnnParams r;
      r.shape = shape;
      r.state_dim = cfg.rnn_state > 0 ? cfg.rnn_state : 4 * shape.q * shape.d;
      r.radius = cfg.rnn_radius > 0 ? cfg.rnn_radius : 4.0 * std::sqrt(static_cast<double>(shape.q * shape.d));
      r.lipschitz_budget = cfg.lipschitz_budget;
      std::vector<int> tw{r.state_dim + De};
      for (int l = 0; l + 1 < cfg.rnn_transition_depth; ++l) tw.push_back(cfg.rnn_hidden);
      tw.push_back(r.state_dim);
      std::vector<int> ow{2 * r.state_dim + De};
      for (int l = 0; l + 1 < cfg.rnn_output_depth; ++l) ow.push_back(cfg.rnn_hidden);
      ow.push_back(1);
      r.fwd = init_mlp(tw, rng);
      r.bwd = init_mlp(tw, rng);
      r.out = init_mlp(ow, rng);
      if (r.lipschitz_budget) enforce_lipschitz(r);
      return ModelParams{std::move(r)};
    }
    case Arch::kFfn: {
      FfnParams f;
      f.shape = shape;
      if (cfg.ffn_hidden_layers < 1) throw std::invalid_argument("ffn needs at least one hidden layer");
      const int Nd = shape.N * shape.d;
      f.w1 = gaussian(cfg.ffn_width, Nd, 1.0 / std::sqrt(static_cast<double>(Nd)), rng);
      std::vector<int> w{cfg.ffn_width + shape.N * shape.q * shape.d_e};
      for (int l = 1; l < cfg.ffn_hidden_layers; ++l) w.push_back(cfg.ffn_width);
      w.push_back(shape.N);
      f.rest = init_mlp(w, rng);
      return ModelParams{std::move(f)};
    }
  }
  throw std::logic_error("init_model: unhandled arch");
}

std::vector<NodeId> bind(Graph& g, const ModelParams& p, bool trainable) {
  std::vector<NodeId> ids;
  for (const Matrix* m : tensors(p)) ids.push_back(trainable ? g.parameter(*m) : g.constant(*m));
  return ids;
}

namespace {

struct MlpIds {
  std::vector<NodeId> w;
  std::vector<NodeId> b;
};

MlpIds take_mlp(const Mlp& m, const std::vector<NodeId>& ids, std::size_t& at) {
  MlpIds out;
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    out.w.push_back(ids.at(at++));
    if (l < m.biases.size()) out.b.push_back(ids.at(at++));
  }
  return out;
}

NodeId mlp_graph(Graph& g, const MlpIds& m, NodeId x) {
  NodeId h = x;
  for (std::size_t l = 0; l + 1 < m.w.size(); ++l) h = g.relu(g.add_column(g.matmul(m.w[l], h), m.b[l]));
  return g.matmul(m.w.back(), h);
}

void check_embedded(const TaskShape& s, const Matrix& Z) {
  if (Z.rows() != s.embed() || Z.cols() != s.N) {
    throw ndgrad::ShapeError("forward: encoded prompt is " + std::to_string(Z.rows()) + "x" +
                             std::to_string(Z.cols()) + ", model expects " + std::to_string(s.embed()) + "x" +
                             std::to_string(s.N));
  }
}

NodeId transformer_graph(Graph& g, const TransformerParams& p, const std::vector<NodeId>& ids,
                         const std::vector<Matrix>& Zs) {
  const int H = p.heads();
  const int N = p.shape.N;
  std::size_t at = 0;
  std::vector<NodeId> qk, wq, wk;
  if (p.split()) {
    for (int h = 0; h < H; ++h) {
      wq.push_back(ids[at++]);
      wk.push_back(ids[at++]);
    }
  } else {
    for (int h = 0; h < H; ++h) qk.push_back(ids[at++]);
  }
  const NodeId w2 = ids[at++], b2 = ids[at++], a2 = ids[at++];

  std::vector<NodeId> attended;
  attended.reserve(Zs.size());
  for (const Matrix& Z : Zs) {
    check_embedded(p.shape, Z);
    const NodeId z = g.constant(Z);
    std::vector<NodeId> heads;
    NodeId zt = 0;
    if (!p.split()) zt = g.constant(Z.transpose());
    for (int h = 0; h < H; ++h) {
      NodeId scores;
      if (p.split()) {
        scores = g.matmul(g.transpose(g.matmul(wq[h], z)), g.matmul(wk[h], z));
      } else {
        scores = g.matmul(zt, g.matmul(qk[h], z));
      }
      const NodeId attn = g.softmax(scores);
      heads.push_back(g.matmul(z, g.transpose(attn)));
    }
    attended.push_back(H == 1 ? heads[0] : g.concat_rows(heads));
  }
  const NodeId x = attended.size() == 1 ? attended[0] : g.concat_cols(attended);
  const NodeId hidden = g.relu(g.add_column(g.matmul(w2, x), b2));
  const NodeId out = g.matmul(g.transpose(a2), hidden);
  return g.reshape(out, N, static_cast<Index>(Zs.size()));
}

NodeId rnn_graph(Graph& g, const BiRnnParams& p, const std::vector<NodeId>& ids, const std::vector<Matrix>& Zs,
                 RnnStateNodes* states) {
  const int N = p.shape.N;
  const Index B = static_cast<Index>(Zs.size());
  const int De = p.shape.embed();
  std::size_t at = 0;
  const MlpIds fwd = take_mlp(p.fwd, ids, at);
  const MlpIds bwd = take_mlp(p.bwd, ids, at);
  const MlpIds out = take_mlp(p.out, ids, at);
  if (p.fwd.in() != p.state_dim + De || p.fwd.out() != p.state_dim || p.bwd.in() != p.state_dim + De ||
      p.bwd.out() != p.state_dim || p.out.in() != 2 * p.state_dim + De || p.out.out() != 1) {
    throw ndgrad::ShapeError("rnn: transition or output widths inconsistent with state/encoding sizes");
  }

  std::vector<NodeId> z(N);
  for (int i = 0; i < N; ++i) {
    Matrix zi(De, B);
    for (Index b = 0; b < B; ++b) {
      if (i == 0) check_embedded(p.shape, Zs[b]);
      zi.col(b) = Zs[b].col(i);
    }
    z[i] = g.constant(std::move(zi));
  }
  const NodeId zero = g.constant(Matrix::Zero(p.state_dim, B));
  std::vector<NodeId> hf(N), hb(N);
  hf[0] = zero;
  for (int i = 1; i < N; ++i) {
    const NodeId step = mlp_graph(g, fwd, g.concat_rows({hf[i - 1], z[i - 1]}));
    hf[i] = g.project_columns(g.add(hf[i - 1], step), p.radius);
  }
  hb[N - 1] = zero;
  for (int i = N - 2; i >= 0; --i) {
    const NodeId step = mlp_graph(g, bwd, g.concat_rows({hb[i + 1], z[i + 1]}));
    hb[i] = g.project_columns(g.add(hb[i + 1], step), p.radius);
  }
  std::vector<NodeId> ys(N);
  for (int i = 0; i < N; ++i) ys[i] = mlp_graph(g, out, g.concat_rows({hf[i], hb[i], z[i]}));
  if (states) {
    states->fwd = hf;
    states->bwd = hb;
  }
  return N == 1 ? ys[0] : g.concat_rows(ys);
}

NodeId ffn_graph(Graph& g, const FfnParams& p, const std::vector<NodeId>& ids,
                 const std::vector<const Prompt*>& batch, const EncodingBank& bank) {
  const TaskShape& s = p.shape;
  const Index B = static_cast<Index>(batch.size());
  Matrix X(static_cast<Index>(s.N) * s.d, B);
  Matrix T(static_cast<Index>(s.N) * s.q * s.d_e, B);
  if (bank.dim() != s.d_e || bank.size() < s.N) throw ndgrad::ShapeError("ffn: encoding bank does not match model");
  for (Index b = 0; b < B; ++b) {
    const Prompt& pr = *batch[b];
    if (pr.N() != s.N || pr.d() != s.d || pr.q() != s.q) {
      throw std::invalid_argument("ffn: prompt shape (N=" + std::to_string(pr.N()) + ") differs from model (N=" +
                                  std::to_string(s.N) + ")");
    }
    X.col(b) = Eigen::Map<const Eigen::VectorXd>(pr.tokens.data(), pr.tokens.size());
    Index row = 0;
    for (int i = 0; i < s.N; ++i) {
      for (int l = 0; l < s.q; ++l) {
        T.col(b).segment(row, s.d_e) = bank.vectors.col(pr.indices(i, l));
        row += s.d_e;
      }
    }
  }
  std::size_t at = 0;
  const NodeId w1 = ids[at++];
  const MlpIds rest = take_mlp(p.rest, ids, at);
  const NodeId h1 = g.relu(g.matmul(w1, g.constant(std::move(X))));
  const NodeId in = g.concat_rows({h1, g.constant(std::move(T))});
  return mlp_graph(g, rest, in);
}

}  // namespace

NodeId forward_batch(Graph& g, const ModelParams& p, const std::vector<NodeId>& ids,
                     const std::vector<const Prompt*>& batch, const EncodingBank& bank, RnnStateNodes* states) {
  if (batch.empty()) throw std::invalid_argument("forward_batch: empty batch");
  if (ids.size() != tensors(p).size()) throw std::invalid_argument("forward_batch: parameter node count mismatch");
  if (const auto* f = std::get_if<FfnParams>(&p.v)) return ffn_graph(g, *f, ids, batch, bank);
  std::vector<Matrix> Zs;
  Zs.reserve(batch.size());
  for (const Prompt* pr : batch) Zs.push_back(data::encode_prompt(*pr, bank));
  if (const auto* t = std::get_if<TransformerParams>(&p.v)) return transformer_graph(g, *t, ids, Zs);
  return rnn_graph(g, std::get<BiRnnParams>(p.v), ids, Zs, states);
}

std::string to_string(LossMode m) { return m == LossMode::kAveraged ? "averaged" : "pointwise"; }

LossMode parse_loss_mode(const std::string& s) {
  if (s == "averaged") return LossMode::kAveraged;
  if (s == "pointwise") return LossMode::kPointwise;
  throw std::invalid_argument("unknown loss mode: " + s);
}

NodeId batch_loss(Graph& g, NodeId pred, const std::vector<const Prompt*>& batch, LossMode mode,
                  const std::vector<int>& positions) {
  const Matrix& P = g.value(pred);
  const Index N = P.rows();
  const Index B = static_cast<Index>(batch.size());
  if (P.cols() != B) throw ndgrad::ShapeError("batch_loss: prediction columns differ from batch size");
  if (mode == LossMode::kAveraged) {
    Matrix Y(N, B);
    for (Index b = 0; b < B; ++b) Y.col(b) = batch[b]->labels;
    return g.mse(pred, g.constant(std::move(Y)));
  }
  if (static_cast<Index>(positions.size()) != B) throw std::invalid_argument("batch_loss: need one position per prompt");
  std::vector<Index> lin(B);
  Matrix y(1, B);
  for (Index b = 0; b < B; ++b) {
    const int j = positions[b];
    if (j < 0 || j >= N) throw std::out_of_range("batch_loss: position out of range");
    lin[b] = b * N + j;
    y(0, b) = batch[b]->labels(j);
  }
  return g.mse(g.pick(pred, std::move(lin)), g.constant(std::move(y)));
}

std::vector<Matrix> attention_scores(const std::vector<Matrix>& qk, const Matrix& Z) {
  std::vector<Matrix> out;
  for (const Matrix& w : qk) {
    if (w.rows() != Z.rows() || w.cols() != Z.rows()) throw ndgrad::ShapeError("attention_scores: W_QK shape mismatch");
    out.push_back(ndgrad::row_softmax(Z.transpose() * w * Z));
  }
  return out;
}

Vector tr_forward(const TransformerParams& p, const Matrix& Z) {
  Graph g;
  const ModelParams mp{p};
  const auto ids = bind(g, mp, false);
  const NodeId out = transformer_graph(g, p, ids, {Z});
  return g.value(out).col(0);
}

RnnTrace rnn_forward(const BiRnnParams& p, const Matrix& Z) {
  Graph g;
  const ModelParams mp{p};
  const auto ids = bind(g, mp, false);
  RnnStateNodes st;
  const NodeId out = rnn_graph(g, p, ids, {Z}, &st);
  RnnTrace tr;
  tr.yhat = g.value(out).col(0);
  tr.fwd.resize(p.state_dim, p.shape.N);
  tr.bwd.resize(p.state_dim, p.shape.N);
  for (int i = 0; i < p.shape.N; ++i) {
    tr.fwd.col(i) = g.value(st.fwd[i]).col(0);
    tr.bwd.col(i) = g.value(st.bwd[i]).col(0);
  }
  return tr;
}

Vector ffn_forward(const FfnParams& p, const Prompt& prompt, const EncodingBank& bank) {
  Graph g;
  const ModelParams mp{p};
  const auto ids = bind(g, mp, false);
  return g.value(ffn_graph(g, p, ids, {&prompt}, bank)).col(0);
}

Vector predict(const ModelParams& p, const Prompt& prompt, const EncodingBank& bank) {
  Graph g;
  const auto ids = bind(g, p, false);
  return g.value(forward_batch(g, p, ids, {&prompt}, bank)).col(0);
}

Matrix predict_many(const ModelParams& p, const std::vector<Prompt>& prompts, const EncodingBank& bank, int chunk) {
  Matrix out(p.shape().N, static_cast<Index>(prompts.size()));
  for (std::size_t start = 0; start < prompts.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(prompts.size(), start + static_cast<std::size_t>(chunk));
    std::vector<const Prompt*> batch;
    for (std::size_t k = start; k < end; ++k) batch.push_back(&prompts[k]);
    Graph g;
    const auto ids = bind(g, p, false);
    out.middleCols(static_cast<Index>(start), static_cast<Index>(end - start)) =
        g.value(forward_batch(g, p, ids, batch, bank));
  }
  return out;
}

Vector clip_output(const Vector& yhat, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("clip_output: tau must be positive");
  return yhat.cwiseMax(-tau).cwiseMin(tau);
}

Vector mlp_apply(const Mlp& m, const Vector& x) {
  Vector h = x;
  for (std::size_t l = 0; l + 1 < m.weights.size(); ++l) h = (m.weights[l] * h + m.biases[l]).cwiseMax(0.0);
  return m.weights.back() * h;
}

namespace {

double op_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

double chain_norm(const Mlp& m, int state_dim) {
  double prod = op_norm(m.weights[0].leftCols(state_dim));
  for (std::size_t l = 1; l < m.weights.size(); ++l) prod *= op_norm(m.weights[l]);
  return prod;
}

void rescale(Mlp& m, int state_dim, double budget) {
  const double prod = chain_norm(m, state_dim);
  if (prod > budget) m.weights[0].leftCols(state_dim) *= budget / prod;
}

}  // namespace

double transition_lipschitz(const BiRnnParams& p) {
  return std::max(chain_norm(p.fwd, p.state_dim), chain_norm(p.bwd, p.state_dim));
}

void enforce_lipschitz(BiRnnParams& p) {
  if (!p.lipschitz_budget) return;
  rescale(p.fwd, p.state_dim, *p.lipschitz_budget);
  rescale(p.bwd, p.state_dim, *p.lipschitz_budget);
}

}  // namespace qstr::models
