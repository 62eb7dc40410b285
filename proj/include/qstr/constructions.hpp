// Closed-form weights: exact/approximate two-layer ReLU gadgets, the
// attention construction, the recurrent construction and the 1-d
// interpolation nets. Every builder states the error it guarantees.
#pragma once

#include <optional>
#include <string>

#include "qstr/data.hpp"
#include "qstr/models.hpp"

namespace qstr::constructions {

using data::Vector;
using ndgrad::Matrix;

// x -> a^T relu(W x + b)
struct Construction2NN {
  Vector a;
  Matrix W;
  Vector b;
  double eps = 0.0;    // declared sup error over the domain
  std::string domain;  // human-readable description of that domain

  int width() const { return static_cast<int>(a.size()); }
  int in() const { return static_cast<int>(W.cols()); }
  double eval(const Vector& x) const;
  double squared_norm() const { return a.squaredNorm() + W.squaredNorm() + b.squaredNorm(); }
  // sqrt(m) |a| and |(W, b)|_F / sqrt(m)
  double r_a() const;
  double r_w() const;
};

Construction2NN build_linear_2nn(const Vector& u);

// Piecewise-linear interpolant of s^2 at k+1 equispaced knots on [-R, R].
Construction2NN build_square_pl_net(int k, double R);

// (z1, z2) -> z1 z2 on [-R, R]^2 by polarization. `pieces` is even so 0 and
// the corners are knots of the inner square net.
Construction2NN build_product_net(double eps, double R);
Construction2NN build_product_net_pieces(int pieces, double R);

// <u, v> for u, v in [-R, R]^n, inputs stacked as (u, v).
Construction2NN build_inner_product_net(int n, double eps, double R);

// Exact interpolation of (z_i, y_i) with one unit per knot.
Construction2NN build_sawtooth(const Vector& z, const Vector& y);

struct Interpolant {
  Vector v;  // unit direction
  Construction2NN net;  // on R^d: W = w v^T
  int draws = 0;
  double min_gap = 0.0;
};
// X is d × n. Throws std::runtime_error when the draw budget runs out.
Interpolant build_interpolant(const Matrix& X, const Vector& y, Rng& rng, int max_draws = 64);

struct TrConstructionInfo {
  double alpha = 0.0;
  double r_x = 0.0;
  double r_a = 0.0;
  double r_w = 0.0;
  double qk_col_norm_bound = 0.0;  // bound on |W_QK^T|_{2,1}
  double error_bound = 0.0;        // sup |yhat - y| guaranteed on |x_j| <= r_x
};

// Attention construction with H = q heads. `link` reads the q selected tokens
// stacked. r_x bounds token norms on the certified domain.
models::TransformerParams build_tr_construction(const Construction2NN& link, const data::EncodingBank& bank, int N,
                                                int d, int q, double eps_target, double r_x,
                                                std::optional<double> alpha_override = std::nullopt,
                                                TrConstructionInfo* info = nullptr);

struct RnnConstructionInfo {
  double r_x = 0.0;
  double ip_error = 0.0;       // measured over every bank pair
  double gate_off_max = 0.0;   // largest off-target gate value
  double product_error = 0.0;  // analytic bound of the x * gate product
  double deadzone = 0.0;       // rectifier threshold
  double eps_state = 0.0;      // declared on-target error per state coordinate
  double eps_out = 0.0;        // declared sup |yhat - y|
  int transition_units = 0;
  int output_units = 0;
};

// Recurrent construction for the simple task (shared index tuple). Tokens are
// assumed to satisfy |x_j| <= r_x.
models::BiRnnParams build_rnn_construction(const Construction2NN& link, const data::EncodingBank& bank, int N, int d,
                                           int q, double eps_2nn, double r_x, RnnConstructionInfo* info = nullptr);

}  // namespace qstr::constructions
