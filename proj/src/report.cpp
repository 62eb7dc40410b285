#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "qstr/harness.hpp"

namespace qstr::harness {

std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(10) << x;
  return os.str();
}

std::string sweep_csv(const SweepResult& r) {
  std::ostringstream os;
  os << "arch,N,seed,samples_to_threshold,exhausted,final_test_mse\n";
  for (const auto& t : r.trials) {
    os << t.arch << "," << t.N << "," << t.seed << "," << (t.samples ? std::to_string(*t.samples) : "") << ","
       << (t.samples ? "false" : "true") << "," << fmt(t.final_test_mse) << "\n";
  }
  for (const auto& c : r.cells) {
    os << c.arch << "," << c.N << ",," << (c.median ? fmt(*c.median) : "NA") << "," << (c.mean ? fmt(*c.mean) : "NA")
       << "," << (c.iqr ? fmt(*c.iqr) : "NA") << "\n";
  }
  return os.str();
}

nlohmann::json sweep_json(const SweepResult& r, const SweepConfig& cfg) {
  nlohmann::json j;
  j["config"] = {{"spec_version", cfg.spec_version},
                 {"task", to_string(cfg.task)},
                 {"N", cfg.n_grid},
                 {"d", cfg.d},
                 {"q", cfg.q},
                 {"d_e", cfg.d_e},
                 {"threshold", cfg.threshold},
                 {"seeds", cfg.seeds},
                 {"budget", cfg.budget},
                 {"seed", cfg.master_seed},
                 {"overrides", cfg.overrides}};
  std::vector<std::string> archs;
  for (auto a : cfg.archs) archs.push_back(models::to_string(a));
  j["config"]["archs"] = archs;
  j["trials"] = nlohmann::json::array();
  for (const auto& t : r.trials) {
    j["trials"].push_back({{"arch", t.arch},
                           {"N", t.N},
                           {"seed", t.seed},
                           {"samples_to_threshold", t.samples ? nlohmann::json(*t.samples) : nlohmann::json(nullptr)},
                           {"exhausted", !t.samples.has_value()},
                           {"diverged", t.diverged},
                           {"consumed", t.consumed},
                           {"final_test_mse", t.final_test_mse}});
  }
  j["cells"] = nlohmann::json::array();
  auto opt = [](const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); };
  for (const auto& c : r.cells) {
    j["cells"].push_back({{"arch", c.arch},
                          {"N", c.N},
                          {"runs", c.runs},
                          {"reached", c.reached},
                          {"median", opt(c.median)},
                          {"mean", opt(c.mean)},
                          {"iqr", opt(c.iqr)},
                          {"censored_median", c.censored_median}});
  }
  return j;
}

std::string sweep_svg(const SweepResult& r, const std::string& title) {
  const double W = 640, H = 440, L = 80, R = 150, T = 40, B = 60;
  std::vector<std::string> archs;
  for (const auto& c : r.cells)
    if (std::find(archs.begin(), archs.end(), c.arch) == archs.end()) archs.push_back(c.arch);
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& c : r.cells) {
    if (!c.median) continue;
    xmin = std::min(xmin, std::log10(c.N));
    xmax = std::max(xmax, std::log10(c.N));
    ymin = std::min(ymin, std::log10(std::max(1.0, *c.median)));
    ymax = std::max(ymax, std::log10(std::max(1.0, *c.median)));
  }
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
     << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">sequence length N (log)</text>\n";
  os << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 18 " << (T + H - B) / 2
     << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">median samples to threshold (log)</text>\n";
  if (xmin > xmax) {
    os << "<text x=\"" << W / 2 << "\" y=\"" << H / 2
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">no run reached the threshold</text>\n";
    os << "</svg>\n";
    return os.str();
  }
  if (xmax - xmin < 1e-9) {
    xmin -= 0.1;
    xmax += 0.1;
  }
  ymin = std::floor(ymin);
  ymax = std::max(ymin + 1, std::ceil(ymax));
  auto px = [&](double lx) { return L + (lx - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double ly) { return H - B - (ly - ymin) / (ymax - ymin) * (H - T - B); };
  for (int e = static_cast<int>(ymin); e <= static_cast<int>(ymax); ++e) {
    os << "<line x1=\"" << L - 4 << "\" y1=\"" << py(e) << "\" x2=\"" << W - R << "\" y2=\"" << py(e)
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << L - 8 << "\" y=\"" << py(e) + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">1e" << e << "</text>\n";
  }
  std::vector<int> ns;
  for (const auto& c : r.cells)
    if (std::find(ns.begin(), ns.end(), c.N) == ns.end()) ns.push_back(c.N);
  for (int n : ns) {
    os << "<text x=\"" << px(std::log10(n)) << "\" y=\"" << H - B + 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << n << "</text>\n";
  }
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  for (std::size_t a = 0; a < archs.size(); ++a) {
    const char* col = colors[a % 5];
    std::ostringstream pts;
    for (const auto& c : r.cells) {
      if (c.arch != archs[a] || !c.median) continue;
      const double x = px(std::log10(c.N)), y = py(std::log10(std::max(1.0, *c.median)));
      pts << x << "," << y << " ";
      os << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"3.5\" fill=\"" << col << "\"/>\n";
    }
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"" << pts.str() << "\"/>\n";
    const double ly = T + 20 + 20 * static_cast<double>(a);
    os << "<line x1=\"" << W - R + 15 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 40 << "\" y2=\"" << ly
       << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 46 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"12\">"
       << archs[a] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path);
}

void emit_outputs(const SweepResult& r, const SweepConfig& cfg, const std::string& out_dir,
                  const std::vector<std::string>& formats) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir + ": " + ec.message());
  for (const auto& f : formats) {
    if (f == "csv") write_text(out_dir + "/sweep.csv", sweep_csv(r));
    else if (f == "json") write_text(out_dir + "/sweep.json", sweep_json(r, cfg).dump(2) + "\n");
    else if (f == "svg") write_text(out_dir + "/sweep.svg", sweep_svg(r, "samples to test MSE " + fmt(cfg.threshold) + " (" + to_string(cfg.task) + ")"));
    else throw std::invalid_argument("unknown output format " + f);
  }
}

}  // namespace qstr::harness
