#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "qstr/data.hpp"

namespace qstr::data {

using nlohmann::json;

void write_dataset(std::ostream& os, const DatasetHeader& header, const std::vector<Prompt>& prompts) {
  json h = {{"type", "header"},  {"N", header.N},       {"d", header.d},
            {"q", header.q},     {"link", header.link}, {"seed", header.seed},
            {"count", prompts.size()}};
  os << h.dump() << "\n";
  for (const Prompt& p : prompts) {
    json tokens = json::array();
    json indices = json::array();
    for (int i = 0; i < p.N(); ++i) {
      json row = json::array();
      for (int k = 0; k < p.d(); ++k) row.push_back(p.tokens(k, i));
      tokens.push_back(std::move(row));
      json idx = json::array();
      for (int l = 0; l < p.q(); ++l) idx.push_back(p.indices(i, l) + 1);
      indices.push_back(std::move(idx));
    }
    json labels = json::array();
    for (int i = 0; i < p.N(); ++i) labels.push_back(p.labels(i));
    os << json{{"tokens", tokens}, {"indices", indices}, {"labels", labels}}.dump() << "\n";
  }
  if (!os) throw std::runtime_error("write_dataset: stream error");
}

std::vector<Prompt> read_dataset(std::istream& is, DatasetHeader* header) {
  std::vector<Prompt> out;
  std::string line;
  bool seen_header = false;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("read_dataset: line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!seen_header) {
      if (j.value("type", "") != "header") throw std::runtime_error("read_dataset: missing header record");
      seen_header = true;
      if (header) {
        header->N = j.at("N");
        header->d = j.at("d");
        header->q = j.at("q");
        header->link = j.at("link");
        header->seed = j.at("seed");
      }
      continue;
    }
    const auto& tokens = j.at("tokens");
    const auto& indices = j.at("indices");
    const auto& labels = j.at("labels");
    const int N = static_cast<int>(tokens.size());
    if (N == 0 || static_cast<int>(indices.size()) != N || static_cast<int>(labels.size()) != N) {
      throw std::runtime_error("read_dataset: line " + std::to_string(lineno) + ": inconsistent lengths");
    }
    const int d = static_cast<int>(tokens[0].size());
    const int q = static_cast<int>(indices[0].size());
    Prompt p;
    p.tokens.resize(d, N);
    p.indices.resize(N, q);
    p.labels.resize(N);
    for (int i = 0; i < N; ++i) {
      for (int k = 0; k < d; ++k) p.tokens(k, i) = tokens[i].at(k).get<double>();
      for (int l = 0; l < q; ++l) {
        const int t = indices[i].at(l).get<int>();
        if (t < 1 || t > N) {
          throw std::runtime_error("read_dataset: line " + std::to_string(lineno) + ": index out of [1, N]");
        }
        p.indices(i, l) = t - 1;
      }
      p.labels(i) = labels[i].get<double>();
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace qstr::data
