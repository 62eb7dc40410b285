// Recurrent construction for the simple task. Each transition writes the
// gated token Psi(x_j, t, j) into the state: position j's token lands in block
// l exactly when t_l = j, and every other block receives an exact zero.
//
// Transition layers (hidden):
//   1  +-x pass-through, and product units for <w_j, w_{t_l}>
//   2  +-x pass-through, gate units relu(ip_l - 1/2)
//   3  product units for x_k * (2 gate_l)
//   4  dead-zone pair relu(c - beta), relu(-c - beta)
// followed by a linear read-out of the dead-zone pairs.
#include <cmath>
#include <stdexcept>

#include "qstr/constructions.hpp"

namespace qstr::constructions {

namespace {

struct Gadgets {
  Construction2NN ip;    // one coordinate of the inner product
  Construction2NN prod;  // x_k * (2 gate)
  double s = 1.0;        // encoding scale sqrt(d/q)
  int d = 0, q = 0, de = 0;
  double beta = 0.0;
};

double ip_eval(const Construction2NN& p, const Vector& u, const Vector& v) {
  double acc = 0.0;
  Vector in(2);
  for (Eigen::Index k = 0; k < u.size(); ++k) {
    in << u(k), v(k);
    acc += p.eval(in);
  }
  return acc;
}

int n1_units(const Gadgets& g) { return 2 * g.d + g.q * g.de * g.ip.width(); }
int n2_units(const Gadgets& g) { return 2 * g.d + g.q; }
int n3_units(const Gadgets& g) { return g.q * g.d * g.prod.width(); }

// Layer-1 rows reading z, which starts at column z0.
void fill_layer1(const Gadgets& g, Matrix& W, Matrix& b, int row0, int z0) {
  for (int k = 0; k < g.d; ++k) {
    W(row0 + 2 * k, z0 + k) = 1.0;
    W(row0 + 2 * k + 1, z0 + k) = -1.0;
  }
  const int m = g.ip.width();
  int row = row0 + 2 * g.d;
  for (int l = 0; l < g.q; ++l) {
    for (int k = 0; k < g.de; ++k) {
      for (int u = 0; u < m; ++u, ++row) {
        W(row, z0 + g.d + k) = g.ip.W(u, 0) / g.s;
        W(row, z0 + g.d + (l + 1) * g.de + k) = g.ip.W(u, 1) / g.s;
        b(row, 0) = g.ip.b(u);
      }
    }
  }
}

// Layer-2 rows reading layer-1 activations starting at column c0.
void fill_layer2(const Gadgets& g, Matrix& W, Matrix& b, int row0, int c0) {
  for (int k = 0; k < g.d; ++k) {
    W(row0 + 2 * k, c0 + 2 * k) = 1.0;
    W(row0 + 2 * k, c0 + 2 * k + 1) = -1.0;
    W(row0 + 2 * k + 1, c0 + 2 * k) = -1.0;
    W(row0 + 2 * k + 1, c0 + 2 * k + 1) = 1.0;
  }
  const int m = g.ip.width();
  for (int l = 0; l < g.q; ++l) {
    const int r = row0 + 2 * g.d + l;
    int col = c0 + 2 * g.d + l * g.de * m;
    for (int k = 0; k < g.de; ++k)
      for (int u = 0; u < m; ++u, ++col) W(r, col) = g.ip.a(u);
    b(r, 0) = -0.5;
  }
}

// Layer-3 rows reading layer-2 activations starting at column c0.
void fill_layer3(const Gadgets& g, Matrix& W, Matrix& b, int row0, int c0) {
  const int m = g.prod.width();
  int row = row0;
  for (int l = 0; l < g.q; ++l) {
    for (int k = 0; k < g.d; ++k) {
      for (int u = 0; u < m; ++u, ++row) {
        W(row, c0 + 2 * k) = g.prod.W(u, 0);
        W(row, c0 + 2 * k + 1) = -g.prod.W(u, 0);
        W(row, c0 + 2 * g.d + l) = 2.0 * g.prod.W(u, 1);
        b(row, 0) = g.prod.b(u);
      }
    }
  }
}

// Adds sign * (product read-out of block c) into row r, reading layer-3
// activations from column c0.
void add_readout(const Gadgets& g, Matrix& W, int r, int c0, int block, double sign) {
  const int m = g.prod.width();
  for (int u = 0; u < m; ++u) W(r, c0 + block * m + u) += sign * g.prod.a(u);
}

// Rows pass a +- pair (at columns c, c+1) through unchanged.
void fill_identity_pairs(Matrix& W, int row0, int c0, int count) {
  for (int k = 0; k < count; ++k) {
    W(row0 + 2 * k, c0 + 2 * k) = 1.0;
    W(row0 + 2 * k, c0 + 2 * k + 1) = -1.0;
    W(row0 + 2 * k + 1, c0 + 2 * k) = -1.0;
    W(row0 + 2 * k + 1, c0 + 2 * k + 1) = 1.0;
  }
}

models::Mlp transition(const Gadgets& g, int dh, int De) {
  const int n1 = n1_units(g), n2 = n2_units(g), n3 = n3_units(g), n4 = 2 * g.q * g.d;
  models::Mlp m;
  m.weights = {Matrix::Zero(n1, dh + De), Matrix::Zero(n2, n1), Matrix::Zero(n3, n2), Matrix::Zero(n4, n3),
               Matrix::Zero(dh, n4)};
  m.biases = {Matrix::Zero(n1, 1), Matrix::Zero(n2, 1), Matrix::Zero(n3, 1), Matrix::Constant(n4, 1, -g.beta)};
  fill_layer1(g, m.weights[0], m.biases[0], 0, dh);
  fill_layer2(g, m.weights[1], m.biases[1], 0, 0);
  fill_layer3(g, m.weights[2], m.biases[2], 0, 0);
  for (int c = 0; c < g.q * g.d; ++c) {
    add_readout(g, m.weights[3], 2 * c, 0, c, 1.0);
    add_readout(g, m.weights[3], 2 * c + 1, 0, c, -1.0);
    m.weights[4](c, 2 * c) = 1.0;
    m.weights[4](c, 2 * c + 1) = -1.0;
  }
  return m;
}

models::Mlp output_head(const Gadgets& g, const Construction2NN& link, int dh, int De) {
  const int id = 4 * dh;  // pass-through pairs for both states
  const int n1 = id + n1_units(g), n2 = id + n2_units(g), n3 = id + n3_units(g), n4 = 2 * dh;
  const int mg = link.width();
  models::Mlp m;
  m.weights = {Matrix::Zero(n1, 2 * dh + De), Matrix::Zero(n2, n1), Matrix::Zero(n3, n2), Matrix::Zero(n4, n3),
               Matrix::Zero(mg, n4), Matrix::Zero(1, mg)};
  m.biases = {Matrix::Zero(n1, 1), Matrix::Zero(n2, 1), Matrix::Zero(n3, 1), Matrix::Zero(n4, 1),
              Matrix::Zero(mg, 1)};
  for (int c = 0; c < 2 * dh; ++c) {
    m.weights[0](2 * c, c) = 1.0;
    m.weights[0](2 * c + 1, c) = -1.0;
  }
  fill_layer1(g, m.weights[0], m.biases[0], id, 2 * dh);
  fill_identity_pairs(m.weights[1], 0, 0, 2 * dh);
  fill_layer2(g, m.weights[1], m.biases[1], id, id);
  fill_identity_pairs(m.weights[2], 0, 0, 2 * dh);
  fill_layer3(g, m.weights[2], m.biases[2], id, id);
  // adder: v_c = h_fwd(c) + h_bwd(c) + psi(c)
  for (int c = 0; c < dh; ++c) {
    for (int sign : {1, -1}) {
      const int r = sign > 0 ? 2 * c : 2 * c + 1;
      Matrix& W = m.weights[3];
      W(r, 2 * c) += sign;
      W(r, 2 * c + 1) -= sign;
      W(r, 2 * (dh + c)) += sign;
      W(r, 2 * (dh + c) + 1) -= sign;
      add_readout(g, W, r, id, c, sign);
    }
  }
  for (int c = 0; c < dh; ++c) {
    m.weights[4].col(2 * c) = link.W.col(c);
    m.weights[4].col(2 * c + 1) = -link.W.col(c);
  }
  m.biases[4] = link.b;
  m.weights[5] = link.a.transpose();
  return m;
}

}  // namespace

models::BiRnnParams build_rnn_construction(const Construction2NN& link, const data::EncodingBank& bank, int N, int d,
                                           int q, double eps_2nn, double r_x, RnnConstructionInfo* info) {
  if (bank.size() < N) throw std::invalid_argument("build_rnn_construction: encoding bank smaller than N");
  if (link.in() != q * d) throw std::invalid_argument("build_rnn_construction: link must read q*d inputs");
  if (!(eps_2nn > 0) || !(r_x > 0)) throw std::invalid_argument("build_rnn_construction: eps and r_x must be positive");
  data::EncodingBank used{bank.vectors.leftCols(N), bank.scheme};
  const auto sep = check_separation(used);
  if (sep.violations > 0) {
    throw std::invalid_argument("build_rnn_construction: separation gap below 1/2 (max |<w_i, w_j>| = " +
                                std::to_string(sep.max_abs_inner) + ")");
  }

  const double lip = link.a.norm() * Eigen::JacobiSVD<Matrix>(link.W).singularValues()(0);
  const double rarw = link.r_a() * link.r_w();
  const double qd = static_cast<double>(q) * d;
  // per-coordinate state error allowed on the on-target block
  const double eps_h = std::sqrt(eps_2nn) / (4.0 * std::sqrt(qd) * rarw);
  const double ip_target = eps_h / (16.0 * r_x);
  const double prod_target = eps_h / 4.0;
  const double fp_slack = 1e-9;

  Gadgets g;
  g.s = std::sqrt(static_cast<double>(d) / q);
  g.d = d;
  g.q = q;
  g.de = bank.dim();

  // inner product gadget: the domain is the finite bank, so its error is
  // measured over every pair; refine the grid until it meets the target
  const double R1 = std::max(used.vectors.cwiseAbs().maxCoeff(), 1e-12);
  double ip_err = 0.0, gate_off = 0.0;
  for (int pieces = 2;; pieces *= 2) {
    g.ip = build_product_net_pieces(pieces, R1);
    ip_err = 0.0;
    gate_off = 0.0;
    for (int i = 0; i < N; ++i) {
      for (int j = 0; j < N; ++j) {
        const double ip = ip_eval(g.ip, used.vectors.col(i), used.vectors.col(j));
        const double exact = used.vectors.col(i).dot(used.vectors.col(j));
        ip_err = std::max(ip_err, std::abs(ip - exact));
        if (i != j) gate_off = std::max(gate_off, std::max(0.0, ip - 0.5));
      }
    }
    if (ip_err <= ip_target) break;
    if (pieces > (1 << 16)) throw std::runtime_error("build_rnn_construction: inner-product gadget did not converge");
  }

  // product x_k * (2 gate) with |x_k| <= r_x and 2 gate <= 1 + 2 ip_err
  const double Rs = r_x + 1.0 + 2.0 * ip_err;
  int k3 = static_cast<int>(std::ceil((Rs / 2.0) / std::sqrt(prod_target)));
  k3 = std::max(2, k3 + (k3 % 2));
  g.prod = build_product_net_pieces(k3, Rs / 2.0);
  const double prod_err = g.prod.eps;

  const double e_on = 2.0 * r_x * ip_err + prod_err;
  const double e_off = gate_off > 0.0 ? 2.0 * r_x * gate_off + prod_err : 0.0;
  g.beta = e_off + fp_slack;
  const double eps_state = e_on + g.beta;
  const double per_coord = std::max(eps_state + e_off + fp_slack, e_on);
  const double eps_out = lip * std::sqrt(qd) * per_coord + link.eps;

  const int dh = q * d;
  const int De = data::encoded_dim(d, q, g.de);
  models::BiRnnParams p;
  p.shape = {N, d, q, g.de};
  p.state_dim = dh;
  p.radius = std::sqrt(static_cast<double>(q)) * (r_x + std::sqrt(static_cast<double>(d)) * eps_state) +
             std::sqrt(eps_2nn) / rarw;
  p.fwd = transition(g, dh, De);
  p.bwd = p.fwd;
  p.out = output_head(g, link, dh, De);
  if (info) {
    info->r_x = r_x;
    info->ip_error = ip_err;
    info->gate_off_max = gate_off;
    info->product_error = prod_err;
    info->deadzone = g.beta;
    info->eps_state = eps_state;
    info->eps_out = eps_out;
    info->transition_units = n1_units(g) + n2_units(g) + n3_units(g) + 2 * dh;
    info->output_units = static_cast<int>(p.out.weights[0].rows() + p.out.weights[1].rows() +
                                          p.out.weights[2].rows() + p.out.weights[3].rows() +
                                          p.out.weights[4].rows());
  }
  return p;
}

}  // namespace qstr::constructions
