#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dladiff::cli {

struct Series {
    std::string label;
    std::vector<double> y;
};

/// Line plot of one or more series against their index.
void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series);

/// Horizontal bar chart, one bar per (label, value).
void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::pair<std::string, double>>& bars);

}  // namespace dladiff::cli
