#include "foma/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace foma {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::array<double, 2> auto_range(const std::vector<PlotSeries>& series, bool x, bool log_scale) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series) {
    for (double v : x ? s.x : s.y) {
      if (!std::isfinite(v) || (log_scale && v <= 0)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!std::isfinite(lo)) return {0.0, 1.0};
  if (log_scale) return {lo / 1.2, hi * 1.2};
  if (hi - lo < 1e-12) return {lo - 0.5, hi + 0.5};
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

}  // namespace

std::string render_svg(const PlotSpec& spec, const std::vector<PlotSeries>& series) {
  const double W = 640, H = 440, left = 70, right = 150, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  const auto xr = spec.xrange ? *spec.xrange : auto_range(series, true, spec.log_x);
  const auto yr = spec.yrange ? *spec.yrange : auto_range(series, false, false);
  auto tx = [&](double v) {
    if (spec.log_x) return left + pw * (std::log(v) - std::log(xr[0])) / (std::log(xr[1]) - std::log(xr[0]));
    return left + pw * (v - xr[0]) / (xr[1] - xr[0]);
  };
  auto ty = [&](double v) { return top + ph * (1.0 - (v - yr[0]) / (yr[1] - yr[0])); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(spec.title) << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = xr[0] + (xr[1] - xr[0]) * i / 4.0;
    const double vx = spec.log_x ? std::exp(std::log(xr[0]) + (std::log(xr[1]) - std::log(xr[0])) * i / 4.0) : fx;
    const double fy = yr[0] + (yr[1] - yr[0]) * i / 4.0;
    o << "<text x=\"" << tx(vx) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << num(vx) << "</text>\n";
    o << "<text x=\"" << left - 6 << "\" y=\"" << ty(fy) + 4 << "\" text-anchor=\"end\">" << num(fy) << "</text>\n";
    o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << ty(fy) << "\" y2=\"" << ty(fy)
      << "\" stroke=\"#ddd\"/>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << escape(spec.xlabel) << "</text>\n";
  o << "<text transform=\"translate(18," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << escape(spec.ylabel)
    << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const PlotSeries& s = series[si];
    const std::size_t n = std::min(s.x.size(), s.y.size());
    if (s.line && n > 1) {
      o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t i = 0; i < n; ++i) o << tx(s.x[i]) << "," << ty(s.y[i]) << " ";
      o << "\"/>\n";
    }
    if (s.markers) {
      for (std::size_t i = 0; i < n; ++i) {
        o << "<circle cx=\"" << tx(s.x[i]) << "\" cy=\"" << ty(s.y[i]) << "\" r=\"3\" fill=\"" << s.color
          << "\" fill-opacity=\"0.6\"/>\n";
      }
    }
    const double ly = top + 10 + 20.0 * static_cast<double>(si);
    o << "<rect x=\"" << left + pw + 12 << "\" y=\"" << ly - 8 << "\" width=\"10\" height=\"10\" fill=\"" << s.color << "\"/>\n";
    o << "<text x=\"" << left + pw + 28 << "\" y=\"" << ly + 1 << "\">" << escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

void write_svg(const std::filesystem::path& path, const PlotSpec& spec, const std::vector<PlotSeries>& series) {
  std::ofstream out(path);
  out << render_svg(spec, series);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<WeightRecord> read_weight_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open weight log " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "sample,branch,level,weight") {
    throw ValidationError("weight log " + path.string() + ": expected header 'sample,branch,level,weight'");
  }
  std::vector<WeightRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string f[4];
    for (auto& field : f) std::getline(ss, field, ',');
    try {
      out.push_back({std::stoul(f[0]), f[1], std::stoul(f[2]), std::stod(f[3])});
    } catch (const std::exception&) {
      throw ValidationError("weight log line " + std::to_string(line_no) + " is malformed");
    }
  }
  if (out.empty()) throw ValidationError("weight log " + path.string() + " has no records");
  return out;
}

std::vector<WeightPoint> weight_points(const std::vector<WeightRecord>& records) {
  if (records.empty()) throw ValidationError("weight log has no records");
  std::size_t lo = records[0].level, hi = records[0].level;
  for (const auto& r : records) {
    lo = std::min(lo, r.level);
    hi = std::max(hi, r.level);
  }
  std::map<std::pair<std::size_t, std::string>, WeightPoint> by_key;
  std::vector<std::pair<std::size_t, std::string>> order;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.sample, r.branch);
    auto [it, fresh] = by_key.try_emplace(key, WeightPoint{r.sample, r.branch, 0.0, 0.0});
    if (fresh) order.push_back(key);
    if (r.level == lo) it->second.low = r.weight;
    if (r.level == hi) it->second.high = r.weight;
  }
  std::vector<WeightPoint> out;
  for (const auto& k : order) out.push_back(by_key.at(k));
  return out;
}

void plot_weight_scatter(const std::vector<WeightPoint>& points, const std::filesystem::path& stem) {
  if (points.empty()) throw ValidationError("no weight points to plot");
  std::ofstream csv(stem.string() + ".csv");
  csv << "sample,branch,low_weight,high_weight\n";
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g\n", p.sample, p.branch.c_str(), p.low, p.high);
    csv << buf;
  }
  if (!csv) throw std::runtime_error("failed writing " + stem.string() + ".csv");

  const std::map<std::string, std::string> colors{{"attr", "#d62728"}, {"comp", "#2ca02c"}, {"obj", "#1f77b4"}};
  std::vector<PlotSeries> series;
  for (const char* b : {"attr", "comp", "obj"}) {
    PlotSeries s;
    s.name = b;
    s.color = colors.at(b);
    s.line = false;
    for (const auto& p : points) {
      if (p.branch != b) continue;
      s.x.push_back(p.low);
      s.y.push_back(p.high);
    }
    if (!s.x.empty()) series.push_back(std::move(s));
  }
  PlotSpec spec;
  spec.title = "Aggregation weights per branch";
  spec.xlabel = "lowest-level weight";
  spec.ylabel = "highest-level weight";
  spec.xrange = std::array<double, 2>{0.0, 1.0};
  spec.yrange = std::array<double, 2>{0.0, 1.0};
  write_svg(stem.string() + ".svg", spec, series);
}

}  // namespace foma
