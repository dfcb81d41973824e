#pragma once

// Self-contained SVG line and bar charts.

#include <string>
#include <vector>

namespace uda {

struct Series {
    std::string name;
    std::vector<double> x, y;
};

struct ChartLabels {
    std::string title, x, y;
};

// Non-finite points are skipped. An empty series list gives an empty frame.
std::string line_chart_svg(const std::vector<Series>& series, const ChartLabels& labels, bool log_y = false);

struct BarGroup {
    std::string name;            // x-axis category
    std::vector<double> values;  // one per legend entry
    std::vector<double> errors;  // optional, same length as values
};

std::string bar_chart_svg(const std::vector<BarGroup>& groups, const std::vector<std::string>& legend,
                          const ChartLabels& labels);

}  // namespace uda
