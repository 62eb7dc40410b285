#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "qstr/data.hpp"

using namespace qstr;
using namespace qstr::data;

namespace {

TaskConfig linear_task(int N, int d, int q = 1) {
  TaskConfig t;
  t.N = N;
  t.d = d;
  t.q = q;
  t.link = LinkSpec::linear(Vector::Unit(d, 0), q);
  return t;
}

}  // namespace

TEST(Encodings, OneHotIsStandardBasis) {
  Rng rng(1);
  const auto b = sample_encodings(3, 3, EncodingScheme::kOneHot, rng);
  EXPECT_EQ(b.vectors, Matrix::Identity(3, 3));
  const auto s = check_separation(b);
  EXPECT_EQ(s.max_abs_inner, 0.0);
  EXPECT_EQ(s.violations, 0);
}

TEST(Encodings, OneHotNeedsEnoughDims) {
  Rng rng(1);
  EXPECT_THROW(sample_encodings(5, 3, EncodingScheme::kOneHot, rng), std::invalid_argument);
}

TEST(Encodings, RademacherEntriesAndNorms) {
  Rng rng(2);
  const auto b = sample_encodings(20, 4, EncodingScheme::kRademacher, rng);
  for (int j = 0; j < 20; ++j) {
    for (int k = 0; k < 4; ++k) EXPECT_EQ(std::abs(b.vectors(k, j)), 0.5);
    EXPECT_EQ(b.vectors.col(j).squaredNorm(), 1.0);
  }
}

TEST(Encodings, RademacherHighDimIsSeparated) {
  Rng rng(7);
  const auto b = sample_encodings(100, 128, EncodingScheme::kRademacher, rng);
  EXPECT_EQ(check_separation(b).violations, 0);
}

TEST(Encodings, UniformHypercubeRange) {
  Rng rng(4);
  const auto b = sample_encodings(30, 6, EncodingScheme::kUniformHypercube, rng);
  EXPECT_GE(b.vectors.minCoeff(), 0.0);
  EXPECT_LT(b.vectors.maxCoeff(), 1.0);
}

TEST(Encodings, SeparatedSamplerMeetsBound) {
  Rng rng(5);
  const int N = 128;
  const auto b = sample_separated_encodings(N, default_encoding_dim(N), rng);
  EXPECT_EQ(check_separation(b).violations, 0);
  EXPECT_EQ(b.dim(), 24);
}

TEST(Encodings, DefaultDimUsesNaturalLog) {
  EXPECT_EQ(default_encoding_dim(16), 13);
  EXPECT_EQ(default_encoding_dim(64), 20);
  EXPECT_EQ(default_encoding_dim(128), 24);
}

TEST(Separation, IdenticalPair) {
  EncodingBank b;
  b.vectors = Matrix::Zero(2, 2);
  b.vectors.col(0) << 1, 0;
  b.vectors.col(1) << 1, 0;
  const auto s = check_separation(b);
  EXPECT_EQ(s.violations, 1);
  EXPECT_DOUBLE_EQ(s.max_abs_inner, 1.0);
}

TEST(Separation, CountMatchesRecount) {
  Rng rng(1);
  const auto b = sample_encodings(50, 8, EncodingScheme::kRademacher, rng);
  long count = 0;
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 50; ++j)
      if (i < j && std::abs(b.vectors.col(i).dot(b.vectors.col(j))) > 0.5) ++count;
  EXPECT_EQ(check_separation(b).violations, count);
  EXPECT_GT(count, 0);
}

TEST(Encode, SmallExample) {
  Prompt p;
  p.tokens = Matrix::Constant(1, 1, 3.0);
  p.indices = IndexMatrix::Zero(1, 1);
  p.labels = Vector::Zero(1);
  EncodingBank b;
  b.vectors = Matrix::Identity(2, 1);
  const Matrix Z = encode_prompt(p, b);
  ASSERT_EQ(Z.rows(), 5);
  Vector want(5);
  want << 3, 1, 0, 1, 0;
  EXPECT_EQ(Z.col(0), want);
}

TEST(Encode, ScaleIsSqrtDOverQ) {
  Rng rng(3);
  TaskConfig t = linear_task(3, 4);
  const auto p = sample_prompt(t, rng);
  const auto b = sample_encodings(3, 2, EncodingScheme::kRademacher, rng);
  const Matrix Z = encode_prompt(p, b);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(Z.col(i).segment(4, 2), 2.0 * b.vectors.col(i));
}

TEST(Encode, OutOfRangeIndexThrows) {
  Prompt p;
  p.tokens = Matrix::Zero(1, 2);
  p.indices = IndexMatrix::Constant(2, 1, 2);
  p.labels = Vector::Zero(2);
  EncodingBank b;
  b.vectors = Matrix::Identity(2, 2);
  EXPECT_THROW(encode_prompt(p, b), std::out_of_range);
}

TEST(Encode, ColumnNormBound) {
  Rng rng(9);
  TaskConfig t = linear_task(10, 3, 2);
  t.link = LinkSpec::token_mean(Vector::Unit(3, 1), 2);
  const auto b = sample_encodings(10, 5, EncodingScheme::kRademacher, rng);
  for (int k = 0; k < 20; ++k) {
    const auto p = sample_prompt(t, rng);
    const Matrix Z = encode_prompt(p, b);
    for (int i = 0; i < 10; ++i) {
      const double bound = p.tokens.col(i).norm() + std::sqrt(1.5) * std::sqrt(3.0) * 1.0;
      EXPECT_LE(Z.col(i).norm(), bound + 1e-12);
    }
  }
}

TEST(Encode, JointPermutationSwapsColumns) {
  Rng rng(12);
  TaskConfig t = linear_task(4, 2);
  const auto p = sample_prompt(t, rng);
  const auto b = sample_encodings(4, 3, EncodingScheme::kRademacher, rng);
  // swap positions 0 and 1 everywhere
  auto swap = [](int x) { return x == 0 ? 1 : x == 1 ? 0 : x; };
  Prompt q = p;
  EncodingBank b2 = b;
  q.tokens.col(0) = p.tokens.col(1);
  q.tokens.col(1) = p.tokens.col(0);
  b2.vectors.col(0) = b.vectors.col(1);
  b2.vectors.col(1) = b.vectors.col(0);
  for (int i = 0; i < 4; ++i) q.indices(swap(i), 0) = swap(p.indices(i, 0));
  const Matrix Z = encode_prompt(p, b), Z2 = encode_prompt(q, b2);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(Z2.col(swap(i)), Z.col(i));
}

TEST(Labels, LinearExample) {
  TaskConfig t = linear_task(1, 2);
  Matrix x(2, 1);
  x << 3, -1;
  EXPECT_EQ(compute_labels(x, IndexMatrix::Zero(1, 1), t)(0), 3.0);
}

TEST(Labels, CenteredNormExample) {
  TaskConfig t;
  t.N = 1;
  t.d = 2;
  t.q = 1;
  t.link = LinkSpec::centered_norm(1, 2);
  EXPECT_EQ(compute_labels(Matrix::Ones(2, 1), IndexMatrix::Zero(1, 1), t)(0), 0.0);
}

TEST(Labels, RegenerationIsBitExact) {
  Rng rng(21);
  TaskConfig t;
  t.N = 12;
  t.d = 4;
  t.q = 3;
  t.link = LinkSpec::centered_norm(3, 4);
  for (int k = 0; k < 10; ++k) {
    const auto p = sample_prompt(t, rng);
    EXPECT_EQ(compute_labels(p.tokens, p.indices, t), p.labels);
  }
}

TEST(Prompts, SimpleModeLabelsIdentical) {
  Rng rng(8);
  TaskConfig t = linear_task(16, 5, 2);
  t.link = LinkSpec::token_mean(Vector::Unit(5, 2), 2);
  t.mode = PromptMode::kSimple;
  for (int k = 0; k < 20; ++k) {
    const auto p = sample_prompt(t, rng);
    for (int i = 1; i < 16; ++i) {
      EXPECT_EQ(p.indices.row(i), p.indices.row(0));
      EXPECT_EQ(p.labels(i), p.labels(0));
    }
  }
}

TEST(Prompts, IndicesInRange) {
  Rng rng(8);
  TaskConfig t = linear_task(7, 2, 3);
  t.link = LinkSpec::token_mean(Vector::Unit(2, 0), 3);
  const auto p = sample_prompt(t, rng);
  EXPECT_GE(p.indices.minCoeff(), 0);
  EXPECT_LT(p.indices.maxCoeff(), 7);
}

TEST(Prompts, FixedIndexLaw) {
  Rng rng(8);
  TaskConfig t = linear_task(6, 2);
  t.index_law = IndexLaw::kFixed;
  t.fixed_indices = {4};
  const auto p = sample_prompt(t, rng);
  EXPECT_TRUE((p.indices.array() == 4).all());
}

TEST(Prompts, HalfDeadLaw) {
  Rng rng(5);
  TaskConfig t;
  t.N = 10;
  t.d = 3;
  t.q = 2;
  t.link = LinkSpec::centered_norm(2, 3);
  t.index_law = IndexLaw::kHalfDead;
  t.token_law = TokenLaw::kHalfDeadGaussian;
  validate(t);
  for (int k = 0; k < 20; ++k) {
    const auto p = sample_prompt(t, rng);
    for (int i = 0; i < 10; ++i) {
      if (token_alive(t, i)) {
        EXPECT_GT(p.tokens.col(i).norm(), 0.0);
      } else {
        EXPECT_EQ(p.tokens.col(i).norm(), 0.0);
        EXPECT_EQ(p.indices(i, 0), 0);
        EXPECT_EQ(p.indices(i, 1), 1);
      }
    }
  }
}

TEST(Prompts, InconsistentConfigsRejected) {
  TaskConfig t = linear_task(10, 3);
  t.index_law = IndexLaw::kHalfDead;
  t.token_law = TokenLaw::kHalfDeadGaussian;
  EXPECT_THROW(validate(t), std::invalid_argument);  // wrong link
  TaskConfig u = linear_task(10, 3);
  u.index_law = IndexLaw::kFixed;
  EXPECT_THROW(validate(u), std::invalid_argument);
  TaskConfig w = linear_task(10, 3);
  w.link = LinkSpec::linear(Vector::Unit(4, 0));
  EXPECT_THROW(validate(w), std::invalid_argument);
}

TEST(Prompts, TokenRadiusClips) {
  Rng rng(30);
  TaskConfig t = linear_task(8, 10);
  t.token_radius = 1.0;
  const auto p = sample_prompt(t, rng);
  for (int i = 0; i < 8; ++i) EXPECT_LE(p.tokens.col(i).norm(), 1.0 + 1e-12);
}

TEST(Moments, GaussianTokensPass) {
  Rng rng(40);
  TaskConfig t = linear_task(4, 10);
  const auto ps = sample_prompts(t, 10000, rng);
  const auto rows = moment_check(ps, 4, 1.0, 1.0, 1.0);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_NEAR(rows[1].token_moment * rows[1].token_moment, 10.0, 4 * rows[1].token_se);
  EXPECT_NEAR(rows[1].label_moment * rows[1].label_moment, 1.0, 4 * rows[1].label_se);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.token_ok);
    EXPECT_TRUE(r.label_ok);
  }
}

TEST(Moments, ZeroTokens) {
  std::vector<Prompt> ps(3);
  for (auto& p : ps) {
    p.tokens = Matrix::Zero(2, 2);
    p.indices = IndexMatrix::Zero(2, 1);
    p.labels = Vector::Zero(2);
  }
  for (const auto& r : moment_check(ps, 3, 1.0, 1.0, 1.0)) {
    EXPECT_EQ(r.token_moment, 0.0);
    EXPECT_EQ(r.label_moment, 0.0);
    EXPECT_TRUE(r.token_ok && r.label_ok);
  }
}

TEST(TailRadius, ExceedanceRate) {
  const int n = 1000, N = 32, d = 10;
  const double r = tail_radius(1.0, d, n, N);
  EXPECT_NEAR(r, std::sqrt(3.0 * std::exp(1.0) * d * std::log(static_cast<double>(n) * N)), 1e-12);
  Rng rng(50);
  TaskConfig t = linear_task(N, d);
  long hits = 0;
  const int reps = 4000;
  for (int k = 0; k < reps; ++k) {
    const auto p = sample_prompt(t, rng);
    double m = 0;
    for (int j = 0; j < N; ++j) m = std::max(m, p.tokens.col(j).norm());
    if (m > r) ++hits;
  }
  const double frac = static_cast<double>(hits) / reps;
  const double se = std::sqrt(std::max(frac * (1 - frac), 1.0 / reps) / reps);
  EXPECT_LE(frac, 1.0 / std::sqrt(static_cast<double>(n) * N) + 3 * se);
}

TEST(Dataset, RoundTripWithOneBasedIndices) {
  Rng rng(60);
  TaskConfig t = linear_task(5, 3, 2);
  t.link = LinkSpec::token_mean(Vector::Unit(3, 0), 2);
  const auto ps = sample_prompts(t, 4, rng);
  std::stringstream ss;
  write_dataset(ss, {5, 3, 2, "token-mean", 60}, ps);
  const std::string text = ss.str();
  EXPECT_NE(text.find("\"type\":\"header\""), std::string::npos);
  DatasetHeader h;
  const auto back = read_dataset(ss, &h);
  EXPECT_EQ(h.N, 5);
  EXPECT_EQ(h.seed, 60u);
  ASSERT_EQ(back.size(), ps.size());
  for (std::size_t k = 0; k < ps.size(); ++k) {
    EXPECT_EQ(back[k].tokens, ps[k].tokens);
    EXPECT_EQ(back[k].indices, ps[k].indices);
    EXPECT_EQ(back[k].labels, ps[k].labels);
  }
  // first record's indices as written are 1-based
  std::stringstream again;
  write_dataset(again, {5, 3, 2, "token-mean", 60}, ps);
  std::string line;
  std::getline(again, line);
  std::getline(again, line);
  const int first = ps[0].indices(0, 0) + 1;
  EXPECT_NE(line.find("\"indices\":[[" + std::to_string(first)), std::string::npos) << line;
}

TEST(RngStreams, SplitIsDeterministicAndDistinct) {
  Rng a(5), b(5);
  EXPECT_EQ(a.split("x")(), b.split("x")());
  EXPECT_NE(Rng(5).split("x")(), Rng(5).split("y")());
  Rng c(9);
  for (int k = 0; k < 1000; ++k) EXPECT_LT(c.below(7), 7u);
}
