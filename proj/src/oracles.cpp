#include "qstr/oracles.hpp"

#include <cmath>
#include <stdexcept>

namespace qstr::oracles {

namespace {

// Pairwise summation keeps totals independent of accumulation length.
double pairwise_sum(const double* x, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += x[k];
    return s;
  }
  const std::size_t h = n / 2;
  return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

}  // namespace

RiskEstimate summarize(const std::vector<double>& values) {
  if (values.size() < 2) throw std::invalid_argument("summarize: need at least two values");
  const double n = static_cast<double>(values.size());
  const double mean = pairwise_sum(values.data(), values.size()) / n;
  std::vector<double> sq(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) sq[k] = (values[k] - mean) * (values[k] - mean);
  const double var = pairwise_sum(sq.data(), sq.size()) / (n - 1.0);
  return {mean, std::sqrt(var / n), static_cast<long>(values.size())};
}

double gaussian_quadratic_variance(const Vector& mu, const Matrix& Sigma) {
  if (Sigma.rows() != Sigma.cols() || Sigma.rows() != mu.size()) {
    throw std::invalid_argument("gaussian_quadratic_variance: shape mismatch");
  }
  if ((Sigma - Sigma.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, Sigma.cwiseAbs().maxCoeff())) {
    throw std::invalid_argument("gaussian_quadratic_variance: Sigma must be symmetric");
  }
  return 2.0 * (Sigma.transpose() * Sigma).trace() + 4.0 * mu.dot(Sigma * mu);
}

double head_bound(int q, int d, int H, HeadBoundVariant variant) {
  if (H < 0 || q < 1 || d < 1) throw std::invalid_argument("head_bound: need q, d >= 1 and H >= 0");
  const double b = variant == HeadBoundVariant::kRestrictedD1
                       ? 1.0 - static_cast<double>(H) / q
                       : 1.0 - static_cast<double>(q + d) * H / (static_cast<double>(q) * d);
  return std::max(0.0, b);
}

bool ConditionalVarianceReport::within(double k_se) const {
  // se can vanish when H = q; allow rounding-level slack
  return std::abs(estimate - analytic) <= k_se * se + 1e-9;
}

Matrix random_orthonormal_rows(int H, int q, Rng& rng) {
  if (H < 0 || H > q) throw std::invalid_argument("random_orthonormal_rows: need 0 <= H <= q");
  if (H == 0) return Matrix(0, q);
  Matrix G(q, H);
  for (int c = 0; c < H; ++c)
    for (int r = 0; r < q; ++r) G(r, c) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(G);
  Matrix Q = qr.householderQ() * Matrix::Identity(q, H);
  const Matrix R = qr.matrixQR().topLeftCorner(H, H);
  for (int c = 0; c < H; ++c)
    if (R(c, c) < 0) Q.col(c) *= -1.0;
  return Q.transpose();
}

ConditionalVarianceReport conditional_variance_check(int q, int H, Rng& rng, long n_mc) {
  if (H < 0 || H > q) throw std::invalid_argument("conditional_variance_check: need 0 <= H <= q");
  if (n_mc < 2) throw std::invalid_argument("conditional_variance_check: n_mc must be >= 2");
  const Matrix V = random_orthonormal_rows(H, q, rng);
  // x | Vx ~ N(V^T V x, I - V^T V), so E[|x|^2 | Vx] = |Vx|^2 + q - H exactly.
  // E[Var(X | Vx)] = E[X^2] - E[m(Vx)^2], estimated by the mean of X^2 - m^2.
  std::vector<double> samples(static_cast<std::size_t>(n_mc));
  Vector x(q);
  for (long s = 0; s < n_mc; ++s) {
    for (int k = 0; k < q; ++k) x(k) = rng.normal();
    const double proj = H > 0 ? (V * x).squaredNorm() : 0.0;
    const double norm2 = x.squaredNorm();
    const double cond_mean = proj + (q - H);
    samples[static_cast<std::size_t>(s)] = norm2 * norm2 - cond_mean * cond_mean;
  }
  const RiskEstimate r = summarize(samples);
  ConditionalVarianceReport rep;
  rep.q = q;
  rep.H = H;
  rep.estimate = r.mean;
  rep.se = r.se;
  rep.analytic = 2.0 * (q - H);
  rep.n_mc = n_mc;
  return rep;
}

double ffn_span_risk(int N, int d, int n) {
  if (n < 0 || n > N * d) throw std::invalid_argument("ffn_span_risk: need 0 <= n <= N d");
  return 1.0 - static_cast<double>(n) / (static_cast<double>(N) * d);
}

double span_restricted_risk(const Matrix& V, int N, int d) {
  if (V.rows() != static_cast<Eigen::Index>(N) * d) throw std::invalid_argument("span_restricted_risk: V must have N d rows");
  const Matrix gram = V.transpose() * V;
  const double dev = (gram - Matrix::Identity(V.cols(), V.cols())).cwiseAbs().maxCoeff();
  if (dev > 1e-10) throw std::invalid_argument("span_restricted_risk: V is not orthonormal (deviation " + std::to_string(dev) + ")");
  // per target token t, the span keeps |P_t V|_F^2 / d of the label variance
  double captured = 0.0;
  for (int t = 0; t < N; ++t) captured += V.middleRows(static_cast<Eigen::Index>(t) * d, d).squaredNorm();
  return 1.0 - captured / (static_cast<double>(N) * d);
}

RiskEstimate estimate_risk(const Predictor& f, const data::TaskConfig& cfg, long n_mc, Rng& rng, PositionMode mode) {
  if (n_mc < 100) throw std::invalid_argument("estimate_risk: n_mc must be >= 100");
  std::vector<double> errs;
  errs.reserve(static_cast<std::size_t>(n_mc));
  for (long s = 0; s < n_mc; ++s) {
    const data::Prompt p = data::sample_prompt(cfg, rng);
    const Vector yhat = f(p);
    if (mode == PositionMode::kPointwise) {
      const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.N)));
      errs.push_back((yhat(j) - p.labels(j)) * (yhat(j) - p.labels(j)));
    } else {
      errs.push_back((yhat - p.labels).squaredNorm() / cfg.N);
    }
  }
  return summarize(errs);
}

RiskEstimate estimate_model_risk(const models::ModelParams& p, const data::EncodingBank& bank,
                                 const data::TaskConfig& cfg, long n_mc, Rng& rng, PositionMode mode) {
  if (n_mc < 100) throw std::invalid_argument("estimate_model_risk: n_mc must be >= 100");
  std::vector<double> errs;
  errs.reserve(static_cast<std::size_t>(n_mc));
  const long chunk = 256;
  for (long start = 0; start < n_mc; start += chunk) {
    const int count = static_cast<int>(std::min(chunk, n_mc - start));
    const auto prompts = data::sample_prompts(cfg, count, rng);
    const Matrix yhat = models::predict_many(p, prompts, bank);
    for (int b = 0; b < count; ++b) {
      if (mode == PositionMode::kPointwise) {
        const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.N)));
        const double e = yhat(j, b) - prompts[b].labels(j);
        errs.push_back(e * e);
      } else {
        errs.push_back((yhat.col(b) - prompts[b].labels).squaredNorm() / cfg.N);
      }
    }
  }
  return summarize(errs);
}

nlohmann::json to_json(const RiskEstimate& r) { return {{"mean", r.mean}, {"se", r.se}, {"n", r.n}}; }

nlohmann::json to_json(const ConditionalVarianceReport& r) {
  return {{"q", r.q},           {"H", r.H},         {"estimate", r.estimate}, {"se", r.se},
          {"analytic", r.analytic}, {"n_mc", r.n_mc}, {"within_4se", r.within(4.0)}};
}

}  // namespace qstr::oracles
