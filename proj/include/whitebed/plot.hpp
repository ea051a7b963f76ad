#pragma once

// Training-curve plots: metrics CSV in, SVG line chart out.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace whitebed {

/// Columns of a CSV file by header name; empty cells are nullopt.
struct CsvTable {
  std::vector<std::string> header;
  std::map<std::string, std::vector<std::optional<double>>> columns;
  std::size_t rows = 0;
};

CsvTable read_csv(const std::filesystem::path& file);

/// Exponential moving average s_t = w * s_{t-1} + (1 - w) * x_t, seeded with
/// the first value. w = 0 returns the input.
std::vector<double> ema_smooth(const std::vector<double>& values, double weight);

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
};

std::string render_svg(const std::vector<PlotSeries>& series, const std::string& x_label, int width = 720,
                       int height = 420);

/// Chart of the chosen columns against fractional epoch (epoch + position within it).
std::string plot_metrics(const CsvTable& table, const std::vector<std::string>& columns, double smooth);

}  // namespace whitebed
