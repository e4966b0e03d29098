#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "foma/tensor.hpp"

namespace foma {

struct PlotSeries {
  std::string name;
  std::string color = "#1f77b4";
  std::vector<double> x, y;
  bool line = true;
  bool markers = true;
};

struct PlotSpec {
  std::string title, xlabel, ylabel;
  std::optional<std::array<double, 2>> xrange, yrange;  // auto when empty
  bool log_x = false;
};

// Plain SVG, no external renderer.
std::string render_svg(const PlotSpec& spec, const std::vector<PlotSeries>& series);
void write_svg(const std::filesystem::path& path, const PlotSpec& spec, const std::vector<PlotSeries>& series);

struct WeightRecord {
  std::size_t sample = 0;
  std::string branch;
  std::size_t level = 0;
  double weight = 0;
};

std::vector<WeightRecord> read_weight_log(const std::filesystem::path& path);

// One point per (sample, branch): weight of the lowest active level against the highest.
struct WeightPoint {
  std::size_t sample = 0;
  std::string branch;
  double low = 0, high = 0;
};
std::vector<WeightPoint> weight_points(const std::vector<WeightRecord>& records);

// Writes `<stem>.csv` (sample,branch,low_weight,high_weight) and `<stem>.svg`.
void plot_weight_scatter(const std::vector<WeightPoint>& points, const std::filesystem::path& stem);

}  // namespace foma
