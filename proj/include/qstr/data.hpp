// Prompt generation for sparse token regression, positional encodings and
// assumption audits.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qstr/rng.hpp"

namespace qstr::data {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IndexMatrix = Eigen::MatrixXi;

// Indices are 0-based here; files carry them 1-based.
struct Prompt {
  Matrix tokens;        // d × N, column i is x_i
  IndexMatrix indices;  // N × q, row i is t_i
  Vector labels;        // N

  int N() const { return static_cast<int>(tokens.cols()); }
  int d() const { return static_cast<int>(tokens.rows()); }
  int q() const { return static_cast<int>(indices.cols()); }
};

enum class EncodingScheme { kRademacher, kUniformHypercube, kOneHot };

struct EncodingBank {
  Matrix vectors;  // d_e × N
  EncodingScheme scheme = EncodingScheme::kRademacher;

  int size() const { return static_cast<int>(vectors.cols()); }
  int dim() const { return static_cast<int>(vectors.rows()); }
};

std::string to_string(EncodingScheme s);
EncodingScheme parse_scheme(const std::string& s);

// floor(5 ln N)
int default_encoding_dim(int N);

EncodingBank sample_encodings(int N, int d_e, EncodingScheme scheme, Rng& rng);

// Rademacher bank drawn column by column, redrawing any column that breaks
// |<w_i, w_j>| <= 1/2 against the earlier ones.
EncodingBank sample_separated_encodings(int N, int d_e, Rng& rng, int max_redraws = 10000);

struct SeparationReport {
  double max_abs_inner = 0.0;
  long violations = 0;
  int i = -1;  // worst pair
  int j = -1;
};
SeparationReport check_separation(const EncodingBank& bank, double limit = 0.5);

enum class LinkKind { kLinear, kCenteredNorm, kTokenMean, kCustom2nn };

struct LinkSpec {
  LinkKind kind = LinkKind::kLinear;
  int q = 1;
  int d = 1;
  Vector u;  // linear / token-mean direction, unit norm
  // custom 2NN: a^T relu(W v + b) with v the stacked selected tokens (q·d)
  Vector a;
  Matrix W;
  Vector b;

  static LinkSpec linear(Vector u, int q = 1);
  static LinkSpec centered_norm(int q, int d);
  static LinkSpec token_mean(Vector u, int q);
  static LinkSpec custom(Vector a, Matrix W, Vector b, int q, int d);
};

std::string to_string(LinkKind k);
LinkKind parse_link_kind(const std::string& s);

enum class PromptMode { kQstr, kSimple };
enum class IndexLaw { kUniform, kFixed, kHalfDead };
enum class TokenLaw { kGaussian, kHalfDeadGaussian };

std::string to_string(PromptMode m);
std::string to_string(IndexLaw l);
std::string to_string(TokenLaw l);
PromptMode parse_mode(const std::string& s);
IndexLaw parse_index_law(const std::string& s);
TokenLaw parse_token_law(const std::string& s);

struct TaskConfig {
  int N = 16;
  int d = 10;
  int q = 1;
  LinkSpec link;
  PromptMode mode = PromptMode::kQstr;
  IndexLaw index_law = IndexLaw::kUniform;
  std::vector<int> fixed_indices;  // 0-based, size q, for IndexLaw::kFixed
  TokenLaw token_law = TokenLaw::kGaussian;
  // radial clip on each token; used for bounded probes of constructions
  std::optional<double> token_radius;
};

// Throws std::invalid_argument on an inconsistent configuration.
void validate(const TaskConfig& cfg);

// Tokens past the half-way point are zero under the half-dead law.
bool token_alive(const TaskConfig& cfg, int position);

// Pure function of (tokens, indices, link, token law).
Vector compute_labels(const Matrix& tokens, const IndexMatrix& indices, const TaskConfig& cfg);

Prompt sample_prompt(const TaskConfig& cfg, Rng& rng);
std::vector<Prompt> sample_prompts(const TaskConfig& cfg, int count, Rng& rng);

// D_e × N: (x_i, s w_i, s w_{t_i1}, ..., s w_{t_iq}) with s = sqrt(d/q).
Matrix encode_prompt(const Prompt& p, const EncodingBank& bank);
int encoded_dim(int d, int q, int d_e);

struct MomentRow {
  int r = 0;
  double token_moment = 0.0;  // E[|x|^r]^{1/r}
  double token_se = 0.0;      // SE of E[|x|^r]
  double token_bound = 0.0;
  bool token_ok = true;
  double label_moment = 0.0;
  double label_se = 0.0;
  double label_bound = 0.0;
  bool label_ok = true;
};
std::vector<MomentRow> moment_check(const std::vector<Prompt>& samples, int r_max, double C_x, double C_y,
                                    double s);

// sqrt(3 C_x e d log(nN))
double tail_radius(double C_x, int d, long n, int N);

// JSONL datasets: one header line then one object per prompt.
struct DatasetHeader {
  int N = 0;
  int d = 0;
  int q = 0;
  std::string link;
  std::uint64_t seed = 0;
};
void write_dataset(std::ostream& os, const DatasetHeader& header, const std::vector<Prompt>& prompts);
std::vector<Prompt> read_dataset(std::istream& is, DatasetHeader* header = nullptr);

}  // namespace qstr::data
