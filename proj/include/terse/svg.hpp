#pragma once

// Minimal self-contained SVG charts for reports.

#include <string>
#include <vector>

namespace terse::svg {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series);

struct ScatterGroup {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

std::string scatter_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<ScatterGroup>& groups);

struct Bar {
  std::string category;
  std::vector<double> values;  // one per series label
};

std::string bar_chart(const std::string& title, const std::vector<std::string>& series_labels,
                      const std::vector<Bar>& bars);

void write_file(const std::string& path, const std::string& content);

}  // namespace terse::svg
