#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "qstr/checks.hpp"
#include "qstr/models.hpp"
#include "qstr/trainer.hpp"

using namespace qstr;
using namespace qstr::models;
using data::Vector;

namespace {

data::TaskConfig task(int N, int d, int q) {
  data::TaskConfig t;
  t.N = N;
  t.d = d;
  t.q = q;
  t.link = q == 1 ? data::LinkSpec::linear(Vector::Unit(d, 0)) : data::LinkSpec::token_mean(Vector::Unit(d, 0), q);
  return t;
}

struct Fixture {
  data::TaskConfig t;
  data::EncodingBank bank;
  data::Prompt prompt;
  ModelParams params;
};

Fixture make(Arch arch, int N, int d, int q, std::uint64_t seed, ArchConfig ac = {}) {
  Rng rng(seed);
  Fixture f;
  f.t = task(N, d, q);
  f.bank = data::sample_encodings(N, 3, data::EncodingScheme::kRademacher, rng);
  f.prompt = data::sample_prompt(f.t, rng);
  ac.arch = arch;
  f.params = init_model(ac, {N, d, q, 3}, rng);
  return f;
}

}  // namespace

TEST(Attention, ZeroScoresAreUniform) {
  const Matrix Z = Matrix::Random(7, 5);
  const auto A = attention_scores({Matrix::Zero(7, 7)}, Z);
  ASSERT_EQ(A.size(), 1u);
  EXPECT_TRUE(A[0].isApproxToConstant(0.2, 1e-15));
}

TEST(Attention, LogThreeLogit) {
  // z_1 = (1, 0), z_2 = (0, 1); W chosen so row 1 logits are (ln 3, 0)
  Matrix Z(2, 2);
  Z << 1, 0, 0, 1;
  Matrix W = Matrix::Zero(2, 2);
  W(0, 0) = std::log(3.0);
  const auto A = attention_scores({W}, Z);
  EXPECT_NEAR(A[0](0, 0), 0.75, 1e-15);
  EXPECT_NEAR(A[0](0, 1), 0.25, 1e-15);
}

TEST(Attention, ConstructedBlockSelectsTarget) {
  const int N = 6, d = 1, q = 1;
  data::EncodingBank bank;
  bank.vectors = Matrix::Identity(N, N);
  bank.scheme = data::EncodingScheme::kOneHot;
  Rng rng(3);
  const auto p = data::sample_prompt(task(N, d, q), rng);
  const Matrix Z = data::encode_prompt(p, bank);
  const int De = data::encoded_dim(d, q, N);
  Matrix W = Matrix::Zero(De, De);
  W.block(d + N, d, N, N) = 20.0 * Matrix::Identity(N, N);
  const auto A = attention_scores({W}, Z);
  for (int i = 0; i < N; ++i) EXPECT_GE(A[0](i, p.indices(i, 0)), 1.0 - (N - 1) * std::exp(-10.0) - 1e-15);
}

TEST(Transformer, ZeroHeadGivesZero) {
  auto f = make(Arch::kTransformer, 5, 3, 1, 1);
  std::get<TransformerParams>(f.params.v).a2nn.setZero();
  EXPECT_EQ(predict(f.params, f.prompt, f.bank), Vector::Zero(5));
}

TEST(Transformer, SinglePositionAttendsToItself) {
  auto f = make(Arch::kTransformer, 1, 3, 1, 2);
  const auto& tp = std::get<TransformerParams>(f.params.v);
  const Matrix Z = data::encode_prompt(f.prompt, f.bank);
  const Vector y = tr_forward(tp, Z);
  const Vector hidden = (tp.w2nn * Z.col(0) + tp.b2nn).cwiseMax(0.0);
  EXPECT_NEAR(y(0), tp.a2nn.col(0).dot(hidden), 1e-14);
}

TEST(Transformer, GraphMatchesDirectForward) {
  auto f = make(Arch::kTransformer, 6, 2, 2, 3);
  const Vector a = predict(f.params, f.prompt, f.bank);
  const Vector b = tr_forward(std::get<TransformerParams>(f.params.v), data::encode_prompt(f.prompt, f.bank));
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Transformer, IdenticalHeadsCollapseToOne) {
  Rng rng(4);
  const int N = 5, d = 2, q = 1, de = 3;
  ArchConfig ac;
  ac.heads = 3;
  ac.qk_init_scale = 1.0;
  auto p = std::get<TransformerParams>(init_model(ac, {N, d, q, de}, rng).v);
  p.qk[1] = p.qk[0];
  p.qk[2] = p.qk[0];
  const int De = p.shape.embed();
  TransformerParams one = p;
  one.qk = {p.qk[0]};
  one.w2nn = p.w2nn.middleCols(0, De) + p.w2nn.middleCols(De, De) + p.w2nn.middleCols(2 * De, De);
  const auto bank = data::sample_encodings(N, de, data::EncodingScheme::kRademacher, rng);
  for (int k = 0; k < 10; ++k) {
    const auto pr = data::sample_prompt(task(N, d, q), rng);
    const Matrix Z = data::encode_prompt(pr, bank);
    EXPECT_LT((tr_forward(p, Z) - tr_forward(one, Z)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Transformer, JointPermutationEquivariance) {
  auto f = make(Arch::kTransformer, 5, 2, 1, 5, [] {
    ArchConfig a;
    a.qk_init_scale = 1.0;
    return a;
  }());
  const auto& tp = std::get<TransformerParams>(f.params.v);
  const Matrix Z = data::encode_prompt(f.prompt, f.bank);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Matrix Zp(Z.rows(), Z.cols());
  for (int i = 0; i < 5; ++i) Zp.col(perm[i]) = Z.col(i);
  const Vector y = tr_forward(tp, Z), yp = tr_forward(tp, Zp);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(yp(perm[i]), y(i), 1e-12);
}

TEST(Transformer, SplitScoreMatrix) {
  ArchConfig ac;
  ac.split_qk = true;
  auto f = make(Arch::kTransformer, 4, 2, 1, 6, ac);
  const auto& tp = std::get<TransformerParams>(f.params.v);
  ASSERT_TRUE(tp.split());
  const auto S = tp.score_matrices();
  EXPECT_LT((S[0] - tp.wq[0].transpose() * tp.wk[0]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Rnn, ZeroTransitionsGiveZeroStates) {
  auto f = make(Arch::kRnn, 6, 2, 1, 7);
  auto& rp = std::get<BiRnnParams>(f.params.v);
  for (auto* m : {&rp.fwd, &rp.bwd}) {
    for (auto& w : m->weights) w.setZero();
    for (auto& b : m->biases) b.setZero();
  }
  const Matrix Z = data::encode_prompt(f.prompt, f.bank);
  const auto tr = rnn_forward(rp, Z);
  EXPECT_EQ(tr.fwd, Matrix::Zero(rp.state_dim, 6));
  EXPECT_EQ(tr.bwd, Matrix::Zero(rp.state_dim, 6));
  Vector in = Vector::Zero(2 * rp.state_dim + Z.rows());
  in.tail(Z.rows()) = Z.col(3);
  EXPECT_NEAR(tr.yhat(3), mlp_apply(rp.out, in)(0), 1e-14);
}

TEST(Rnn, ZeroRadiusGivesZeroStates) {
  ArchConfig ac;
  auto f = make(Arch::kRnn, 5, 2, 1, 8, ac);
  auto& rp = std::get<BiRnnParams>(f.params.v);
  rp.radius = 0.0;
  const auto tr = rnn_forward(rp, data::encode_prompt(f.prompt, f.bank));
  EXPECT_EQ(tr.fwd.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(tr.bwd.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Rnn, StatesStayInsideRadius) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    ArchConfig ac;
    ac.rnn_radius = 0.7;
    auto f = make(Arch::kRnn, 8, 3, 2, 100 + s, ac);
    auto& rp = std::get<BiRnnParams>(f.params.v);
    for (auto& w : rp.fwd.weights) w *= 5.0;
    for (auto& w : rp.bwd.weights) w *= 5.0;
    const auto tr = rnn_forward(rp, data::encode_prompt(f.prompt, f.bank));
    for (int i = 0; i < 8; ++i) {
      EXPECT_LE(tr.fwd.col(i).norm(), 0.7 + 1e-12);
      EXPECT_LE(tr.bwd.col(i).norm(), 0.7 + 1e-12);
    }
  }
}

TEST(Rnn, DefaultShapes) {
  auto f = make(Arch::kRnn, 4, 3, 2, 9);
  const auto& rp = std::get<BiRnnParams>(f.params.v);
  EXPECT_EQ(rp.state_dim, 24);
  EXPECT_NEAR(rp.radius, 4.0 * std::sqrt(6.0), 1e-12);
  EXPECT_EQ(rp.fwd.in(), rp.state_dim + rp.shape.embed());
  EXPECT_EQ(rp.fwd.out(), rp.state_dim);
  EXPECT_EQ(rp.fwd.depth(), 2);
  EXPECT_EQ(rp.out.depth(), 2);
}

TEST(Rnn, LipschitzBudgetEnforced) {
  ArchConfig ac;
  ac.lipschitz_budget = 0.5;
  auto f = make(Arch::kRnn, 4, 2, 1, 10, ac);
  auto& rp = std::get<BiRnnParams>(f.params.v);
  for (auto& w : rp.fwd.weights) w *= 3.0;
  enforce_lipschitz(rp);
  EXPECT_LE(transition_lipschitz(rp), 0.5 + 1e-9);
}

TEST(Ffn, ZeroFirstLayerDependsOnlyOnIndices) {
  auto f = make(Arch::kFfn, 5, 2, 1, 11);
  auto& fp = std::get<FfnParams>(f.params.v);
  fp.w1.setZero();
  for (auto& b : fp.rest.biases) b.setZero();
  data::Prompt other = f.prompt;
  other.tokens.setRandom();
  EXPECT_EQ(ffn_forward(fp, f.prompt, f.bank), ffn_forward(fp, other, f.bank));
}

TEST(Ffn, NotPermutationEquivariant) {
  auto f = make(Arch::kFfn, 5, 2, 1, 12);
  const auto& fp = std::get<FfnParams>(f.params.v);
  data::Prompt swapped = f.prompt;
  swapped.tokens.col(0) = f.prompt.tokens.col(1);
  swapped.tokens.col(1) = f.prompt.tokens.col(0);
  EXPECT_GT((ffn_forward(fp, f.prompt, f.bank) - ffn_forward(fp, swapped, f.bank)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Ffn, WrongLengthThrows) {
  auto f = make(Arch::kFfn, 5, 2, 1, 13);
  Rng rng(1);
  const auto longer = data::sample_prompt(task(6, 2, 1), rng);
  const auto bank = data::sample_encodings(6, 3, data::EncodingScheme::kRademacher, rng);
  EXPECT_THROW(ffn_forward(std::get<FfnParams>(f.params.v), longer, bank), std::invalid_argument);
}

TEST(Ffn, InterpolatesAtFullSpan) {
  // single linear layer over relu(W x): with n = N d samples the fit is exact
  // up to optimizer tolerance
  const int N = 3, d = 2;
  Rng rng(14);
  ArchConfig ac;
  ac.arch = Arch::kFfn;
  ac.ffn_width = 32;
  ac.ffn_hidden_layers = 1;
  const models::TaskShape shape{N, d, 1, 2};
  auto params = init_model(ac, shape, rng);
  auto& fp = std::get<FfnParams>(params.v);
  // collapse the remaining stack to a single linear map
  Mlp lin;
  lin.weights = {Matrix::Zero(N, fp.rest.in())};
  fp.rest = lin;
  const auto bank = data::sample_encodings(N, 2, data::EncodingScheme::kRademacher, rng);
  const auto ps = data::sample_prompts(task(N, d, 1), N * d, rng);
  std::vector<const data::Prompt*> ptrs;
  for (const auto& p : ps) ptrs.push_back(&p);
  trainer::AdamWConfig hp;
  hp.lr = 1e-2;
  hp.weight_decay = 0.0;
  auto st = trainer::make_adamw(params, hp);
  double loss = 1e9;
  for (int step = 0; step < 20000 && loss > 1e-3; ++step) {
    ndgrad::Graph g;
    const auto ids = bind(g, params, true);
    const auto l = batch_loss(g, forward_batch(g, params, ids, ptrs, bank), ptrs, LossMode::kAveraged);
    loss = g.value(l)(0, 0);
    const auto gr = g.backward(l);
    std::vector<Matrix> gs;
    for (auto id : ids) gs.push_back(gr.at(id));
    trainer::adamw_step(params, gs, st);
  }
  EXPECT_LT(loss, 0.01);
}

TEST(ClipOutput, Examples) {
  Vector y(2);
  y << 5, -5;
  EXPECT_EQ(clip_output(y, 3.0), Vector::Constant(2, 3.0).cwiseProduct(Vector(Eigen::Vector2d(1, -1))));
  Vector small(3);
  small << 0.1, -0.2, 0.3;
  EXPECT_EQ(clip_output(small, 1.0), small);
  Rng rng(15);
  Vector r(50);
  for (int k = 0; k < 50; ++k) r(k) = rng.normal();
  const double tau = 0.7 * r.cwiseAbs().maxCoeff();
  const Vector c = clip_output(r, tau);
  for (int k = 0; k < 50; ++k) EXPECT_EQ(c(k) != r(k), std::abs(r(k)) > tau);
  EXPECT_THROW(clip_output(r, 0.0), std::invalid_argument);
}

TEST(Forward, Deterministic) {
  for (Arch a : {Arch::kTransformer, Arch::kRnn, Arch::kFfn}) {
    auto f = make(a, 6, 2, 1, 16);
    EXPECT_EQ(predict(f.params, f.prompt, f.bank), predict(f.params, f.prompt, f.bank));
  }
}

TEST(Forward, BatchMatchesSingle) {
  for (Arch a : {Arch::kTransformer, Arch::kRnn, Arch::kFfn}) {
    auto f = make(a, 6, 2, 1, 17);
    Rng rng(5);
    const auto ps = data::sample_prompts(f.t, 5, rng);
    const Matrix many = predict_many(f.params, ps, f.bank, 2);
    for (int b = 0; b < 5; ++b) EXPECT_LT((many.col(b) - predict(f.params, ps[b], f.bank)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Init, QkScaleAndShapes) {
  Rng rng(18);
  ArchConfig ac;
  const TaskShape s{16, 10, 2, 13};
  const auto p = std::get<TransformerParams>(init_model(ac, s, rng).v);
  EXPECT_EQ(p.heads(), 2);
  EXPECT_EQ(p.width(), 64);
  EXPECT_EQ(p.w2nn.cols(), 2 * s.embed());
  const double std_qk = std::sqrt(p.qk[0].squaredNorm() / p.qk[0].size());
  EXPECT_NEAR(std_qk, 0.02 / std::sqrt(static_cast<double>(s.embed())), 0.002 / std::sqrt(s.embed()));
}

TEST(Checkpoint, RoundTripAllArchs) {
  for (Arch a : {Arch::kTransformer, Arch::kRnn, Arch::kFfn}) {
    ArchConfig ac;
    ac.split_qk = true;
    auto f = make(a, 5, 2, 2, 19, ac);
    std::stringstream ss;
    write_checkpoint(ss, f.params, {{"note", "test"}});
    nlohmann::json prov;
    const auto back = read_checkpoint(ss, &prov);
    EXPECT_EQ(back.arch(), f.params.arch());
    EXPECT_EQ(prov.at("note"), "test");
    const auto t1 = tensors(f.params);
    const auto t2 = tensors(back);
    ASSERT_EQ(t1.size(), t2.size());
    for (std::size_t k = 0; k < t1.size(); ++k) EXPECT_EQ(*t1[k], *t2[k]);
    EXPECT_EQ(predict(back, f.prompt, f.bank), predict(f.params, f.prompt, f.bank));
  }
}

TEST(Checkpoint, RejectsGarbage) {
  std::stringstream ss("{\"format\":\"something-else\"}\n");
  EXPECT_THROW(read_checkpoint(ss), std::exception);
}

TEST(Tensors, NamesMatchCount) {
  for (Arch a : {Arch::kTransformer, Arch::kRnn, Arch::kFfn}) {
    auto f = make(a, 5, 2, 1, 20);
    EXPECT_EQ(tensor_names(f.params).size(), tensors(f.params).size());
    std::size_t n = 0;
    for (const auto* t : tensors(f.params)) n += static_cast<std::size_t>(t->size());
    EXPECT_EQ(parameter_count(f.params), n);
  }
}

TEST(GradientSuite, AllArchsFewSeeds) {
  const auto j = checks::gradient_suite({models::Arch::kTransformer, models::Arch::kRnn, models::Arch::kFfn}, 4, 77);
  EXPECT_TRUE(j.at("pass").get<bool>()) << j.dump();
  EXPECT_GT(j.at("checked").get<long>(), 0);
}
