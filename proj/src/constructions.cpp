#include "qstr/constructions.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace qstr::constructions {

double Construction2NN::eval(const Vector& x) const {
  if (x.size() != W.cols()) throw std::invalid_argument("Construction2NN::eval: input size mismatch");
  return a.dot((W * x + b).cwiseMax(0.0));
}

double Construction2NN::r_a() const { return std::sqrt(static_cast<double>(width())) * a.norm(); }

double Construction2NN::r_w() const {
  return std::sqrt(W.squaredNorm() + b.squaredNorm()) / std::sqrt(static_cast<double>(width()));
}

Construction2NN build_linear_2nn(const Vector& u) {
  if (std::abs(u.norm() - 1.0) > 1e-12) throw std::invalid_argument("build_linear_2nn: u must be a unit vector");
  Construction2NN c;
  c.a = Vector(2);
  c.a << 1.0, -1.0;
  c.W = Matrix(2, u.size());
  c.W.row(0) = u.transpose();
  c.W.row(1) = -u.transpose();
  c.b = Vector::Zero(2);
  c.eps = 0.0;
  c.domain = "all of R^d";
  return c;
}

Construction2NN build_sawtooth(const Vector& z, const Vector& y) {
  const Eigen::Index n = z.size();
  if (n < 1 || y.size() != n) throw std::invalid_argument("build_sawtooth: need n >= 1 knots and n values");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return z(i) < z(j); });
  Vector zs(n), ys(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    zs(k) = z(order[static_cast<std::size_t>(k)]);
    ys(k) = y(order[static_cast<std::size_t>(k)]);
  }
  double gap = 1.0;
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    const double g = zs(k + 1) - zs(k);
    if (!(g > 0.0)) throw std::invalid_argument("build_sawtooth: duplicate knots");
    gap = k == 0 ? g : std::min(gap, g);
  }
  // unit 0 is a ramp of slope y_0 reaching y_0 at z_0; unit 1 corrects the
  // slope on the first interval; unit k >= 2 bends at z_{k-1}
  Vector slope(std::max<Eigen::Index>(n - 1, 0));
  for (Eigen::Index k = 0; k + 1 < n; ++k) slope(k) = (ys(k + 1) - ys(k)) / (zs(k + 1) - zs(k));
  Vector a(n), b(n);
  a(0) = ys(0);
  b(0) = -zs(0) + 1.0;
  if (n >= 2) {
    a(1) = slope(0) - ys(0);
    b(1) = -zs(0);
  }
  for (Eigen::Index k = 2; k < n; ++k) {
    a(k) = slope(k - 1) - slope(k - 2);
    b(k) = -zs(k - 1);
  }
  double alpha = 1.0;
  if (ys.norm() > 0.0) alpha = std::pow((zs.squaredNorm() + static_cast<double>(n)) * gap * gap / ys.squaredNorm(), 0.25);
  Construction2NN c;
  c.a = alpha * a;
  c.W = Matrix::Constant(n, 1, 1.0 / alpha);
  c.b = b / alpha;
  c.eps = 0.0;
  c.domain = "the knots";
  return c;
}

Construction2NN build_square_pl_net(int k, double R) {
  if (k < 1) throw std::invalid_argument("build_square_pl_net: k must be >= 1");
  if (!(R > 0)) throw std::invalid_argument("build_square_pl_net: R must be positive");
  Vector z(k + 1);
  const double h = 2.0 * R / k;
  for (int m = 0; m <= k; ++m) z(m) = m == k ? R : -R + m * h;
  Construction2NN c = build_sawtooth(z, z.cwiseProduct(z));
  c.eps = h * h / 4.0;
  std::ostringstream os;
  os << "[-" << R << ", " << R << "]";
  c.domain = os.str();
  return c;
}

Construction2NN build_product_net_pieces(int pieces, double R) {
  if (pieces < 2 || pieces % 2 != 0) throw std::invalid_argument("build_product_net: pieces must be even and >= 2");
  const Construction2NN sq = build_square_pl_net(pieces, 2.0 * R);
  const int m = sq.width();
  Construction2NN c;
  c.a.resize(2 * m);
  c.W.resize(2 * m, 2);
  c.b.resize(2 * m);
  for (int u = 0; u < m; ++u) {
    const double w = sq.W(u, 0);
    c.W.row(2 * u) << w, w;
    c.W.row(2 * u + 1) << w, -w;
    c.b(2 * u) = c.b(2 * u + 1) = sq.b(u);
    c.a(2 * u) = sq.a(u) / 4.0;
    c.a(2 * u + 1) = -sq.a(u) / 4.0;
  }
  c.eps = R * R / (static_cast<double>(pieces) * pieces);
  std::ostringstream os;
  os << "[-" << R << ", " << R << "]^2";
  c.domain = os.str();
  return c;
}

Construction2NN build_product_net(double eps, double R) {
  if (!(eps > 0)) throw std::invalid_argument("build_product_net: eps must be positive");
  int k = static_cast<int>(std::ceil(R / std::sqrt(eps)));
  k = std::max(2, k + (k % 2));
  return build_product_net_pieces(k, R);
}

Construction2NN build_inner_product_net(int n, double eps, double R) {
  if (n < 1) throw std::invalid_argument("build_inner_product_net: n must be >= 1");
  const Construction2NN p = build_product_net(eps / n, R);
  const int m = p.width();
  Construction2NN c;
  c.a.resize(n * m);
  c.W = Matrix::Zero(n * m, 2 * n);
  c.b.resize(n * m);
  for (int k = 0; k < n; ++k) {
    c.a.segment(k * m, m) = p.a;
    c.b.segment(k * m, m) = p.b;
    c.W.block(k * m, k, m, 1) = p.W.col(0);
    c.W.block(k * m, n + k, m, 1) = p.W.col(1);
  }
  c.eps = n * p.eps;
  c.domain = p.domain + " per coordinate";
  return c;
}

Interpolant build_interpolant(const Matrix& X, const Vector& y, Rng& rng, int max_draws) {
  const Eigen::Index n = X.cols();
  const Eigen::Index d = X.rows();
  if (n < 1 || y.size() != n) throw std::invalid_argument("build_interpolant: need n >= 1 points and n labels");
  const double need_gap = std::sqrt(std::numbers::pi) / (3.0 * static_cast<double>(n) * n);
  for (int draw = 1; draw <= max_draws; ++draw) {
    Vector v(d);
    for (Eigen::Index k = 0; k < d; ++k) v(k) = rng.normal();
    v.normalize();
    const Vector p = X.transpose() * v;
    if (p.squaredNorm() > 3.0 * static_cast<double>(n)) continue;
    std::vector<double> s(p.data(), p.data() + n);
    std::sort(s.begin(), s.end());
    double gap = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k + 1 < s.size(); ++k) gap = std::min(gap, s[k + 1] - s[k]);
    if (n > 1 && gap < need_gap) continue;
    Interpolant out;
    out.v = v;
    const Construction2NN line = build_sawtooth(p, y);
    out.net.a = line.a;
    out.net.W = line.W.col(0) * v.transpose();
    out.net.b = line.b;
    out.net.eps = 0.0;
    out.net.domain = "the training points";
    out.draws = draw;
    out.min_gap = n > 1 ? gap : 0.0;
    return out;
  }
  throw std::runtime_error("build_interpolant: no admissible direction in " + std::to_string(max_draws) + " draws");
}

models::TransformerParams build_tr_construction(const Construction2NN& link, const data::EncodingBank& bank, int N,
                                                int d, int q, double eps_target, double r_x,
                                                std::optional<double> alpha_override, TrConstructionInfo* info) {
  if (bank.size() < N) throw std::invalid_argument("build_tr_construction: encoding bank smaller than N");
  if (link.in() != q * d) throw std::invalid_argument("build_tr_construction: link must read q*d inputs");
  if (!(eps_target > 0)) throw std::invalid_argument("build_tr_construction: eps_target must be positive");
  const auto sep = check_separation(bank);
  if (sep.violations > 0) {
    throw std::invalid_argument("build_tr_construction: encoding bank has " + std::to_string(sep.violations) +
                                " pairs with |<w_i, w_j>| > 1/2 (max " + std::to_string(sep.max_abs_inner) + ")");
  }
  const int de = bank.dim();
  const int De = data::encoded_dim(d, q, de);
  const double ra = link.r_a();
  const double rw = link.r_w();
  const double log_arg = 2.0 * ra * rw * r_x * N * std::sqrt(static_cast<double>(q));
  const double alpha =
      alpha_override ? *alpha_override : 2.0 * q * std::log(log_arg / std::sqrt(eps_target)) / static_cast<double>(d);

  models::TransformerParams p;
  p.shape = {N, d, q, de};
  for (int h = 0; h < q; ++h) {
    Matrix w = Matrix::Zero(De, De);
    w.block(d + (h + 1) * de, d, de, de) = alpha * Matrix::Identity(de, de);
    p.qk.push_back(std::move(w));
  }
  const int m = link.width();
  p.w2nn = Matrix::Zero(m, q * De);
  for (int h = 0; h < q; ++h) p.w2nn.block(0, h * De, m, d) = link.W.middleCols(h * d, d);
  p.b2nn = link.b;
  p.a2nn = link.a;
  if (info) {
    info->alpha = alpha;
    info->r_x = r_x;
    info->r_a = ra;
    info->r_w = rw;
    info->qk_col_norm_bound = 2.0 * de * q / static_cast<double>(d) * std::log(log_arg / eps_target);
    info->error_bound = log_arg * std::exp(-alpha * d / (2.0 * q)) + link.eps;
  }
  return p;
}

}  // namespace qstr::constructions
