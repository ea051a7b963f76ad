#include "whitebed/plot.hpp"

#include "whitebed/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace whitebed {

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

}  // namespace

CsvTable read_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw IoError(file.string() + ": empty file");
  t.header = split(line, ',');
  for (const auto& h : t.header) t.columns[h];
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != t.header.size()) {
      throw IoError(file.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                    " fields, found " + std::to_string(cells.size()));
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      std::optional<double> v;
      if (!cells[i].empty()) {
        try {
          v = std::stod(cells[i]);
        } catch (const std::exception&) {
          throw IoError(file.string() + ":" + std::to_string(lineno) + ": '" + cells[i] + "' is not a number");
        }
      }
      t.columns[t.header[i]].push_back(v);
    }
    ++t.rows;
  }
  return t;
}

std::vector<double> ema_smooth(const std::vector<double>& values, double weight) {
  if (weight < 0.0 || weight >= 1.0) throw ConfigError("smoothing weight must be in [0, 1)");
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(out.empty() ? v : weight * out.back() + (1.0 - weight) * v);
  return out;
}

std::string render_svg(const std::vector<PlotSeries>& series, const std::string& x_label, int width, int height) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  const double left = 60, right = 150, top = 20, bottom = 45;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4, fy = y0 + (y1 - y0) * i / 4;
    svg << "<text x=\"" << px(fx) << "\" y=\"" << top + ph + 15 << "\" text-anchor=\"middle\">" << fmt(fx)
        << "</text>\n";
    svg << "<text x=\"" << left - 5 << "\" y=\"" << py(fy) + 4 << "\" text-anchor=\"end\">" << fmt(fy) << "</text>\n";
  }
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 8 << "\" text-anchor=\"middle\">" << x_label
      << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = palette[k % 6];
    svg << "<polyline class=\"series\" data-name=\"" << s.name << "\" fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) svg << (i ? " " : "") << fmt(px(s.x[i])) << "," << fmt(py(s.y[i]));
    svg << "\"/>\n";
    const double ly = top + 15 + 18 * double(k);
    svg << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 30 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << left + pw + 35 << "\" y=\"" << ly + 4 << "\">" << s.name << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string plot_metrics(const CsvTable& table, const std::vector<std::string>& columns, double smooth) {
  if (columns.empty()) throw ConfigError("plot: no columns selected");
  const auto epoch_it = table.columns.find("epoch");
  if (epoch_it == table.columns.end()) throw IoError("plot: CSV has no 'epoch' column");
  const auto& epoch = epoch_it->second;

  // Rows of one epoch are spread evenly over [e, e + 1).
  std::vector<double> x(table.rows, 0.0);
  for (std::size_t i = 0; i < table.rows;) {
    std::size_t j = i;
    while (j < table.rows && epoch[j] == epoch[i]) ++j;
    for (std::size_t r = i; r < j; ++r) x[r] = epoch[i].value_or(0.0) + double(r - i) / double(j - i);
    i = j;
  }
  std::vector<PlotSeries> series;
  for (const auto& name : columns) {
    const auto it = table.columns.find(name);
    if (it == table.columns.end()) {
      std::string valid;
      for (const auto& h : table.header) valid += (valid.empty() ? "" : ", ") + h;
      throw ConfigError("plot: unknown column '" + name + "' (columns: " + valid + ")");
    }
    PlotSeries s{name, {}, {}};
    for (std::size_t r = 0; r < table.rows; ++r)
      if (it->second[r]) {
        s.x.push_back(x[r]);
        s.y.push_back(*it->second[r]);
      }
    s.y = ema_smooth(s.y, smooth);
    series.push_back(std::move(s));
  }
  return render_svg(series, "epoch");
}

}  // namespace whitebed
