#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "foma/pipeline.hpp"
#include "foma/plot.hpp"

using namespace foma;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("foma_plot_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("mean strategy log puts every point at one third") {
  const fs::path dir = scratch("mean");
  const Tensor w = fixed_weights(AggStrategy::mean, 3, {0, 1, 2, 3}, 0, 0);
  write_weight_log(dir / "w.csv", w, {1, 2, 3});
  const auto points = weight_points(read_weight_log(dir / "w.csv"));
  REQUIRE(points.size() == 12);
  for (const auto& p : points) {
    CHECK(p.low == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(p.high == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("a hundred samples give three hundred points inside the unit square") {
  const fs::path dir = scratch("hundred");
  std::vector<std::uint64_t> ids(100);
  for (std::size_t i = 0; i < 100; ++i) ids[i] = i;
  const Tensor w = fixed_weights(AggStrategy::random_simplex, 3, ids, 7, 0);
  write_weight_log(dir / "w.csv", w, {1, 2, 3});
  const auto points = weight_points(read_weight_log(dir / "w.csv"));
  CHECK(points.size() == 300);
  for (const auto& p : points) {
    CHECK(p.low >= 0.0);
    CHECK(p.high <= 1.0);
    CHECK(p.low + p.high <= 1.0 + 1e-12);
  }
  plot_weight_scatter(points, dir / "scatter");
  std::ifstream svg(dir / "scatter.svg");
  const std::string text((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
  CHECK(count(text, "<circle") == 300);
  std::ifstream csv(dir / "scatter.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == 301);
}

TEST_CASE("empty or malformed weight logs are errors") {
  const fs::path dir = scratch("empty");
  std::ofstream(dir / "empty.csv") << "sample,branch,level,weight\n";
  CHECK_THROWS_AS(read_weight_log(dir / "empty.csv"), ValidationError);
  std::ofstream(dir / "bad.csv") << "sample,level\n";
  CHECK_THROWS_AS(read_weight_log(dir / "bad.csv"), ValidationError);
  CHECK_THROWS_AS(weight_points({}), ValidationError);
}

TEST_CASE("line plot has one polyline per series and escapes labels") {
  PlotSeries a{"HM", "#d62728", {1, 2, 4}, {0.1, 0.3, 0.2}, true, true};
  PlotSeries b{"AUC", "#1f77b4", {1, 2, 4}, {0.05, 0.1, 0.08}, true, true};
  PlotSpec spec;
  spec.title = "a < b";
  spec.log_x = true;
  const std::string svg = render_svg(spec, {a, b});
  CHECK(count(svg, "<polyline") == 2);
  CHECK(count(svg, "<circle") == 6);
  CHECK(svg.find("a &lt; b") != std::string::npos);
}
