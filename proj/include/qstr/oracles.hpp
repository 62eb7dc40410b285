// Closed-form lower bounds and Monte Carlo checks that do not involve
// training.
#pragma once

#include <functional>
#include <string>

#include "json.hpp"
#include "qstr/data.hpp"
#include "qstr/models.hpp"

namespace qstr::oracles {

using data::Matrix;
using data::Vector;

struct RiskEstimate {
  double mean = 0.0;
  double se = 0.0;
  long n = 0;
};

// Sample mean and its standard error; needs at least two values.
RiskEstimate summarize(const std::vector<double>& values);

// Var(|x|^2) for x ~ N(mu, Sigma).
double gaussian_quadratic_variance(const Vector& mu, const Matrix& Sigma);

enum class HeadBoundVariant { kRestrictedD1, kGeneral };
// Lower bound on the risk of an H-head model, clamped at 0.
double head_bound(int q, int d, int H, HeadBoundVariant variant);

struct ConditionalVarianceReport {
  int q = 0;
  int H = 0;
  double estimate = 0.0;
  double se = 0.0;
  double analytic = 0.0;
  long n_mc = 0;
  bool within(double k_se) const;
};
// E[Var(|x|^2 | Vx)] for a random H-row orthonormal V, via the law of total
// variance with the inner conditional variance in closed form.
ConditionalVarianceReport conditional_variance_check(int q, int H, Rng& rng, long n_mc);

// Haar-distributed H × q matrix with orthonormal rows.
Matrix random_orthonormal_rows(int H, int q, Rng& rng);

double ffn_span_risk(int N, int d, int n);
// V holds n orthonormal vectors of R^{N d} as columns; tokens are the
// consecutive d-blocks.
double span_restricted_risk(const Matrix& V, int N, int d);

using Predictor = std::function<Vector(const data::Prompt&)>;
enum class PositionMode { kPointwise, kAveraged };

RiskEstimate estimate_risk(const Predictor& f, const data::TaskConfig& cfg, long n_mc, Rng& rng, PositionMode mode);

// Faster path for a model: predictions batched through the graph.
RiskEstimate estimate_model_risk(const models::ModelParams& p, const data::EncodingBank& bank,
                                 const data::TaskConfig& cfg, long n_mc, Rng& rng, PositionMode mode);

nlohmann::json to_json(const RiskEstimate& r);
nlohmann::json to_json(const ConditionalVarianceReport& r);

}  // namespace qstr::oracles
