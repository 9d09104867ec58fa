#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "padkit/metrics.hpp"

namespace padkit {

struct ChartSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> mean;
    /// Half-width of the shaded band around `mean`; empty draws no band.
    std::vector<double> stddev;
};

struct ChartSpec {
    std::string title;
    std::string x_label;
    std::string y_label;
    double y_min = 0.0;
    double y_max = 1.0;
    std::vector<ChartSeries> series;
};

/// Standalone SVG document; identical input yields identical bytes.
std::string render_line_chart(const ChartSpec& chart);

/// Mean and population std of a per-seed curve family (all curves equally long).
std::pair<std::vector<double>, std::vector<double>> curve_band(std::span<const std::vector<double>> curves);

/// File name and SVG text for the accuracy, forgetting and stability/plasticity
/// charts of a run. Bands appear when more than one seed is given.
std::vector<std::pair<std::string, std::string>> run_charts(std::span<const AccuracyMatrix> taw,
                                                            std::span<const AccuracyMatrix> tag);

}  // namespace padkit
