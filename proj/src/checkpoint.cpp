// Line-delimited JSON checkpoints: a header, then one record per tensor with a
// base64 payload of little-endian f64 values in row-major order.
#include <algorithm>
#include <bit>
#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "qstr/models.hpp"

namespace qstr::models {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace bai = boost::archive::iterators;
using ToBase64 = bai::base64_from_binary<bai::transform_width<const char*, 6, 8>>;
using FromBase64 = bai::transform_width<bai::binary_from_base64<std::string::const_iterator>, 8, 6>;

std::string encode(const Matrix& m) {
  std::vector<double> flat(static_cast<std::size_t>(m.size()));
  std::size_t k = 0;
  for (ndgrad::Index r = 0; r < m.rows(); ++r)
    for (ndgrad::Index c = 0; c < m.cols(); ++c) flat[k++] = m(r, c);
  const char* bytes = reinterpret_cast<const char*>(flat.data());
  const std::size_t n = flat.size() * sizeof(double);
  std::string out(ToBase64(bytes), ToBase64(bytes + n));
  out.append((3 - n % 3) % 3, '=');
  return out;
}

Matrix decode(const std::string& text, ndgrad::Index rows, ndgrad::Index cols) {
  std::string body = text;
  const std::size_t pad = body.size() - body.find_last_not_of('=') - 1;
  std::replace(body.end() - static_cast<std::ptrdiff_t>(pad), body.end(), '=', 'A');
  std::string bytes(FromBase64(body.cbegin()), FromBase64(body.cend()));
  bytes.resize(bytes.size() - pad);
  if (bytes.size() != static_cast<std::size_t>(rows * cols) * sizeof(double)) {
    throw std::runtime_error("checkpoint: payload size does not match shape");
  }
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (ndgrad::Index r = 0; r < rows; ++r) {
    for (ndgrad::Index c = 0; c < cols; ++c) {
      double v;
      std::memcpy(&v, bytes.data() + k * sizeof(double), sizeof(double));
      m(r, c) = v;
      ++k;
    }
  }
  return m;
}

json shape_json(const TaskShape& s) { return {{"N", s.N}, {"d", s.d}, {"q", s.q}, {"d_e", s.d_e}}; }

Mlp take_mlp(std::map<std::string, Matrix>& t, const std::string& prefix, int depth) {
  Mlp m;
  for (int l = 0; l < depth; ++l) {
    m.weights.push_back(std::move(t.at(prefix + ".W." + std::to_string(l))));
    if (l + 1 < depth) m.biases.push_back(std::move(t.at(prefix + ".b." + std::to_string(l))));
  }
  return m;
}

}  // namespace

void write_checkpoint(std::ostream& os, const ModelParams& p, const json& provenance) {
  json h = {{"format", "qstr-checkpoint"}, {"version", 1}, {"arch", p.arch()}, {"shape", shape_json(p.shape())}};
  if (const auto* t = std::get_if<TransformerParams>(&p.v)) {
    h["heads"] = t->heads();
    h["split_qk"] = t->split();
  } else if (const auto* r = std::get_if<BiRnnParams>(&p.v)) {
    h["state_dim"] = r->state_dim;
    h["radius"] = r->radius;
    h["lipschitz_budget"] = r->lipschitz_budget ? json(*r->lipschitz_budget) : json(nullptr);
    h["depths"] = {r->fwd.depth(), r->bwd.depth(), r->out.depth()};
  } else if (const auto* f = std::get_if<FfnParams>(&p.v)) {
    h["depths"] = {f->rest.depth()};
  }
  if (!provenance.is_null()) h["provenance"] = provenance;
  os << h.dump() << "\n";
  const auto names = tensor_names(p);
  const auto ts = tensors(p);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    os << json{{"name", names[k]}, {"rows", ts[k]->rows()}, {"cols", ts[k]->cols()}, {"data", encode(*ts[k])}}.dump()
       << "\n";
  }
  if (!os) throw std::runtime_error("write_checkpoint: stream error");
}

ModelParams read_checkpoint(std::istream& is, json* provenance) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("read_checkpoint: empty input");
  const json h = json::parse(line);
  if (h.value("format", "") != "qstr-checkpoint") throw std::runtime_error("read_checkpoint: not a checkpoint");
  if (provenance) *provenance = h.value("provenance", json());
  std::map<std::string, Matrix> t;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json r = json::parse(line);
    t[r.at("name").get<std::string>()] = decode(r.at("data"), r.at("rows"), r.at("cols"));
  }
  TaskShape s;
  s.N = h["shape"]["N"];
  s.d = h["shape"]["d"];
  s.q = h["shape"]["q"];
  s.d_e = h["shape"]["d_e"];
  const std::string arch = h.at("arch");
  try {
    if (arch == "transformer") {
      TransformerParams p;
      p.shape = s;
      const int H = h.at("heads");
      for (int k = 0; k < H; ++k) {
        if (h.at("split_qk").get<bool>()) {
          p.wq.push_back(std::move(t.at("wq." + std::to_string(k))));
          p.wk.push_back(std::move(t.at("wk." + std::to_string(k))));
        } else {
          p.qk.push_back(std::move(t.at("qk." + std::to_string(k))));
        }
      }
      p.w2nn = std::move(t.at("w2nn"));
      p.b2nn = std::move(t.at("b2nn"));
      p.a2nn = std::move(t.at("a2nn"));
      return ModelParams{std::move(p)};
    }
    if (arch == "rnn") {
      BiRnnParams p;
      p.shape = s;
      p.state_dim = h.at("state_dim");
      p.radius = h.at("radius");
      if (!h.at("lipschitz_budget").is_null()) p.lipschitz_budget = h.at("lipschitz_budget").get<double>();
      p.fwd = take_mlp(t, "fwd", h["depths"][0]);
      p.bwd = take_mlp(t, "bwd", h["depths"][1]);
      p.out = take_mlp(t, "out", h["depths"][2]);
      return ModelParams{std::move(p)};
    }
    if (arch == "ffn") {
      FfnParams p;
      p.shape = s;
      p.w1 = std::move(t.at("w1"));
      p.rest = take_mlp(t, "rest", h["depths"][0]);
      return ModelParams{std::move(p)};
    }
  } catch (const std::out_of_range& e) {
    throw std::runtime_error(std::string("read_checkpoint: missing tensor (") + e.what() + ")");
  }
  throw std::runtime_error("read_checkpoint: unknown arch " + arch);
}

void save_checkpoint(const std::string& path, const ModelParams& p, const json& provenance) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(os, p, provenance);
}

ModelParams load_checkpoint(const std::string& path, json* provenance) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_checkpoint(is, provenance);
}

}  // namespace qstr::models
