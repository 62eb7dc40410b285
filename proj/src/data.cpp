#include "qstr/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace qstr::data {

std::string to_string(EncodingScheme s) {
  switch (s) {
    case EncodingScheme::kRademacher: return "rademacher";
    case EncodingScheme::kUniformHypercube: return "uniform-hypercube";
    case EncodingScheme::kOneHot: return "one-hot";
  }
  return "?";
}

EncodingScheme parse_scheme(const std::string& s) {
  if (s == "rademacher" || s == "rademacher-cube") return EncodingScheme::kRademacher;
  if (s == "uniform-hypercube" || s == "uniform") return EncodingScheme::kUniformHypercube;
  if (s == "one-hot" || s == "onehot") return EncodingScheme::kOneHot;
  throw std::invalid_argument("unknown encoding scheme: " + s);
}

int default_encoding_dim(int N) {
  if (N < 1) throw std::invalid_argument("default_encoding_dim: N must be >= 1");
  return std::max(1, static_cast<int>(std::floor(5.0 * std::log(static_cast<double>(N)))));
}

EncodingBank sample_encodings(int N, int d_e, EncodingScheme scheme, Rng& rng) {
  if (d_e < 1) throw std::invalid_argument("sample_encodings: d_e must be >= 1");
  if (N < 1) throw std::invalid_argument("sample_encodings: N must be >= 1");
  EncodingBank bank;
  bank.scheme = scheme;
  bank.vectors = Matrix::Zero(d_e, N);
  switch (scheme) {
    case EncodingScheme::kRademacher: {
      const double v = 1.0 / std::sqrt(static_cast<double>(d_e));
      for (int j = 0; j < N; ++j)
        for (int k = 0; k < d_e; ++k) bank.vectors(k, j) = rng.sign() * v;
      break;
    }
    case EncodingScheme::kUniformHypercube:
      for (int j = 0; j < N; ++j)
        for (int k = 0; k < d_e; ++k) bank.vectors(k, j) = rng.uniform();
      break;
    case EncodingScheme::kOneHot:
      if (d_e < N) {
        throw std::invalid_argument("sample_encodings: one-hot needs d_e >= N (d_e=" + std::to_string(d_e) +
                                    ", N=" + std::to_string(N) + ")");
      }
      for (int j = 0; j < N; ++j) bank.vectors(j, j) = 1.0;
      break;
  }
  return bank;
}

EncodingBank sample_separated_encodings(int N, int d_e, Rng& rng, int max_redraws) {
  if (d_e < 1) throw std::invalid_argument("sample_separated_encodings: d_e must be >= 1");
  EncodingBank bank;
  bank.scheme = EncodingScheme::kRademacher;
  bank.vectors = Matrix::Zero(d_e, N);
  const double v = 1.0 / std::sqrt(static_cast<double>(d_e));
  int redraws = 0;
  for (int j = 0; j < N; ++j) {
    for (;;) {
      for (int k = 0; k < d_e; ++k) bank.vectors(k, j) = rng.sign() * v;
      bool ok = true;
      for (int i = 0; i < j && ok; ++i) {
        ok = std::abs(bank.vectors.col(i).dot(bank.vectors.col(j))) <= 0.5 + 1e-12;
      }
      if (ok) break;
      if (++redraws > max_redraws) {
        throw std::runtime_error("sample_separated_encodings: redraw budget exhausted (N=" + std::to_string(N) +
                                 ", d_e=" + std::to_string(d_e) + ")");
      }
    }
  }
  return bank;
}

SeparationReport check_separation(const EncodingBank& bank, double limit) {
  SeparationReport rep;
  const int n = bank.size();
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double ip = std::abs(bank.vectors.col(i).dot(bank.vectors.col(j)));
      if (ip > limit + 1e-12) ++rep.violations;
      if (ip > rep.max_abs_inner || rep.i < 0) {
        rep.max_abs_inner = ip;
        rep.i = i;
        rep.j = j;
      }
    }
  }
  return rep;
}

LinkSpec LinkSpec::linear(Vector u, int q) {
  if (std::abs(u.norm() - 1.0) > 1e-12) throw std::invalid_argument("linear link: u must be a unit vector");
  LinkSpec s;
  s.kind = LinkKind::kLinear;
  s.q = q;
  s.d = static_cast<int>(u.size());
  s.u = std::move(u);
  return s;
}

LinkSpec LinkSpec::centered_norm(int q, int d) {
  LinkSpec s;
  s.kind = LinkKind::kCenteredNorm;
  s.q = q;
  s.d = d;
  return s;
}

LinkSpec LinkSpec::token_mean(Vector u, int q) {
  LinkSpec s = linear(std::move(u), q);
  s.kind = LinkKind::kTokenMean;
  return s;
}

LinkSpec LinkSpec::custom(Vector a, Matrix W, Vector b, int q, int d) {
  if (W.cols() != q * d || W.rows() != a.size() || b.size() != a.size()) {
    throw std::invalid_argument("custom link: need W m×(q·d), a and b of length m");
  }
  LinkSpec s;
  s.kind = LinkKind::kCustom2nn;
  s.q = q;
  s.d = d;
  s.a = std::move(a);
  s.W = std::move(W);
  s.b = std::move(b);
  return s;
}

std::string to_string(LinkKind k) {
  switch (k) {
    case LinkKind::kLinear: return "linear";
    case LinkKind::kCenteredNorm: return "centered-norm";
    case LinkKind::kTokenMean: return "token-mean";
    case LinkKind::kCustom2nn: return "custom-2nn";
  }
  return "?";
}

LinkKind parse_link_kind(const std::string& s) {
  if (s == "linear") return LinkKind::kLinear;
  if (s == "centered-norm") return LinkKind::kCenteredNorm;
  if (s == "token-mean") return LinkKind::kTokenMean;
  if (s == "custom-2nn") return LinkKind::kCustom2nn;
  throw std::invalid_argument("unknown link kind: " + s);
}

std::string to_string(PromptMode m) { return m == PromptMode::kQstr ? "qstr" : "simple"; }
std::string to_string(IndexLaw l) {
  switch (l) {
    case IndexLaw::kUniform: return "uniform";
    case IndexLaw::kFixed: return "fixed";
    case IndexLaw::kHalfDead: return "half-dead";
  }
  return "?";
}
std::string to_string(TokenLaw l) { return l == TokenLaw::kGaussian ? "gaussian" : "half-dead-gaussian"; }

PromptMode parse_mode(const std::string& s) {
  if (s == "qstr") return PromptMode::kQstr;
  if (s == "simple") return PromptMode::kSimple;
  throw std::invalid_argument("unknown prompt mode: " + s);
}
IndexLaw parse_index_law(const std::string& s) {
  if (s == "uniform") return IndexLaw::kUniform;
  if (s == "fixed") return IndexLaw::kFixed;
  if (s == "half-dead") return IndexLaw::kHalfDead;
  throw std::invalid_argument("unknown index law: " + s);
}
TokenLaw parse_token_law(const std::string& s) {
  if (s == "gaussian") return TokenLaw::kGaussian;
  if (s == "half-dead-gaussian" || s == "half-dead") return TokenLaw::kHalfDeadGaussian;
  throw std::invalid_argument("unknown token law: " + s);
}

void validate(const TaskConfig& cfg) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("task config: " + m); };
  if (cfg.N < 1 || cfg.d < 1 || cfg.q < 1) fail("N, d, q must be positive");
  if (cfg.link.q != cfg.q || cfg.link.d != cfg.d) fail("link q/d disagree with task");
  if ((cfg.link.kind == LinkKind::kLinear || cfg.link.kind == LinkKind::kTokenMean) &&
      cfg.link.u.size() != cfg.d) {
    fail("link direction has wrong dimension");
  }
  if (cfg.index_law == IndexLaw::kFixed) {
    if (static_cast<int>(cfg.fixed_indices.size()) != cfg.q) fail("fixed index law needs q indices");
    for (int t : cfg.fixed_indices)
      if (t < 0 || t >= cfg.N) fail("fixed index out of range");
  }
  const bool half = cfg.index_law == IndexLaw::kHalfDead || cfg.token_law == TokenLaw::kHalfDeadGaussian;
  if (half) {
    if (cfg.index_law != IndexLaw::kHalfDead || cfg.token_law != TokenLaw::kHalfDeadGaussian) {
      fail("half-dead index and token laws go together");
    }
    if (cfg.link.kind != LinkKind::kCenteredNorm) fail("half-dead setup needs the centered-norm link");
    if (cfg.mode != PromptMode::kQstr) fail("half-dead setup is a qstr-mode task");
    if (2 * cfg.q >= cfg.N) fail("half-dead setup needs q < N/2");
  }
  if (cfg.token_radius && !(*cfg.token_radius > 0)) fail("token radius must be positive");
}

bool token_alive(const TaskConfig& cfg, int position) {
  if (cfg.token_law != TokenLaw::kHalfDeadGaussian) return true;
  return 2 * (position + 1) < cfg.N;  // 1-based i < N/2
}

Vector compute_labels(const Matrix& tokens, const IndexMatrix& indices, const TaskConfig& cfg) {
  const int N = static_cast<int>(tokens.cols());
  const int q = static_cast<int>(indices.cols());
  const LinkSpec& link = cfg.link;
  Vector y(N);
  for (int i = 0; i < N; ++i) {
    switch (link.kind) {
      case LinkKind::kLinear:
        y(i) = link.u.dot(tokens.col(indices(i, 0)));
        break;
      case LinkKind::kTokenMean: {
        Vector m = Vector::Zero(tokens.rows());
        for (int l = 0; l < q; ++l) m += tokens.col(indices(i, l));
        y(i) = link.u.dot(m / q);
        break;
      }
      case LinkKind::kCenteredNorm: {
        double acc = 0.0;
        for (int l = 0; l < q; ++l) {
          const int t = indices(i, l);
          const double expect = token_alive(cfg, t) ? static_cast<double>(tokens.rows()) : 0.0;
          acc += tokens.col(t).squaredNorm() - expect;
        }
        y(i) = acc / std::sqrt(static_cast<double>(q) * tokens.rows());
        break;
      }
      case LinkKind::kCustom2nn: {
        Vector v(q * tokens.rows());
        for (int l = 0; l < q; ++l) v.segment(l * tokens.rows(), tokens.rows()) = tokens.col(indices(i, l));
        y(i) = link.a.dot((link.W * v + link.b).cwiseMax(0.0));
        break;
      }
    }
  }
  return y;
}

namespace {

void draw_tuple(const TaskConfig& cfg, Rng& rng, IndexMatrix& out, int row) {
  for (int l = 0; l < cfg.q; ++l) {
    out(row, l) = cfg.index_law == IndexLaw::kFixed ? cfg.fixed_indices[l]
                                                    : static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.N)));
  }
}

}  // namespace

Prompt sample_prompt(const TaskConfig& cfg, Rng& rng) {
  validate(cfg);
  Prompt p;
  p.tokens.resize(cfg.d, cfg.N);
  for (int i = 0; i < cfg.N; ++i) {
    const bool alive = token_alive(cfg, i);
    for (int k = 0; k < cfg.d; ++k) p.tokens(k, i) = alive ? rng.normal() : 0.0;
    if (cfg.token_radius) {
      const double n = p.tokens.col(i).norm();
      if (n > *cfg.token_radius) p.tokens.col(i) *= *cfg.token_radius / n;
    }
  }
  p.indices.resize(cfg.N, cfg.q);
  if (cfg.mode == PromptMode::kSimple) {
    draw_tuple(cfg, rng, p.indices, 0);
    for (int i = 1; i < cfg.N; ++i) p.indices.row(i) = p.indices.row(0);
  } else {
    for (int i = 0; i < cfg.N; ++i) {
      if (cfg.index_law == IndexLaw::kHalfDead && !token_alive(cfg, i)) {
        for (int l = 0; l < cfg.q; ++l) p.indices(i, l) = l;
      } else {
        draw_tuple(cfg, rng, p.indices, i);
      }
    }
  }
  p.labels = compute_labels(p.tokens, p.indices, cfg);
  return p;
}

std::vector<Prompt> sample_prompts(const TaskConfig& cfg, int count, Rng& rng) {
  std::vector<Prompt> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int k = 0; k < count; ++k) out.push_back(sample_prompt(cfg, rng));
  return out;
}

int encoded_dim(int d, int q, int d_e) { return d + (q + 1) * d_e; }

Matrix encode_prompt(const Prompt& p, const EncodingBank& bank) {
  const int N = p.N();
  const int d = p.d();
  const int q = p.q();
  const int de = bank.dim();
  if (bank.size() < N) throw std::invalid_argument("encode_prompt: encoding bank smaller than N");
  if (p.indices.rows() != N) throw std::invalid_argument("encode_prompt: index rows must equal N");
  const double s = std::sqrt(static_cast<double>(d) / q);
  Matrix Z(encoded_dim(d, q, de), N);
  for (int i = 0; i < N; ++i) {
    Z.col(i).head(d) = p.tokens.col(i);
    Z.col(i).segment(d, de) = s * bank.vectors.col(i);
    for (int l = 0; l < q; ++l) {
      const int t = p.indices(i, l);
      if (t < 0 || t >= N) {
        throw std::out_of_range("encode_prompt: index " + std::to_string(t + 1) + " outside [1, " +
                                std::to_string(N) + "]");
      }
      Z.col(i).segment(d + (l + 1) * de, de) = s * bank.vectors.col(t);
    }
  }
  return Z;
}

std::vector<MomentRow> moment_check(const std::vector<Prompt>& samples, int r_max, double C_x, double C_y,
                                    double s) {
  std::vector<MomentRow> rows;
  if (samples.empty()) return rows;
  const int d = samples.front().d();
  for (int r = 1; r <= r_max; ++r) {
    MomentRow row;
    row.r = r;
    // tokens: every token of every prompt; labels: first position only, since
    // positions of one prompt share tokens
    double sum = 0.0, sum2 = 0.0;
    long n = 0;
    double lsum = 0.0, lsum2 = 0.0;
    for (const Prompt& p : samples) {
      for (int i = 0; i < p.N(); ++i) {
        const double v = std::pow(p.tokens.col(i).norm(), r);
        sum += v;
        sum2 += v * v;
        ++n;
      }
      const double lv = std::pow(std::abs(p.labels(0)), r);
      lsum += lv;
      lsum2 += lv * lv;
    }
    const double m = sum / n;
    row.token_se = n > 1 ? std::sqrt(std::max(0.0, (sum2 / n - m * m) / (n - 1))) : 0.0;
    row.token_moment = std::pow(m, 1.0 / r);
    row.token_bound = std::sqrt(C_x * d * r);
    row.token_ok = m <= std::pow(row.token_bound, r) + 3.0 * row.token_se;

    const double nl = static_cast<double>(samples.size());
    const double lm = lsum / nl;
    row.label_se = nl > 1 ? std::sqrt(std::max(0.0, (lsum2 / nl - lm * lm) / (nl - 1))) : 0.0;
    row.label_moment = std::pow(lm, 1.0 / r);
    row.label_bound = std::sqrt(C_y * std::pow(static_cast<double>(r), s));
    row.label_ok = lm <= std::pow(row.label_bound, r) + 3.0 * row.label_se;
    rows.push_back(row);
  }
  return rows;
}

double tail_radius(double C_x, int d, long n, int N) {
  return std::sqrt(3.0 * C_x * std::numbers::e * d * std::log(static_cast<double>(n) * N));
}

}  // namespace qstr::data
