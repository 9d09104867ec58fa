#include "padkit/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace padkit {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 64, kRight = 150, kTop = 40, kBottom = 56;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", std::abs(v) < 1e-12 ? 0.0 : v);
    return buf;
}

ChartSeries series_of(const std::string& label, std::span<const AccuracyMatrix> runs, double x0,
                      const std::function<std::vector<double>(const AccuracyMatrix&)>& curve) {
    std::vector<std::vector<double>> curves;
    for (const auto& m : runs) curves.push_back(curve(m));
    ChartSeries s;
    s.label = label;
    auto [mean, sd] = curve_band(curves);
    for (std::size_t i = 0; i < mean.size(); ++i) s.x.push_back(x0 + static_cast<double>(i));
    s.mean = std::move(mean);
    if (runs.size() > 1) s.stddev = std::move(sd);
    return s;
}

}  // namespace

std::pair<std::vector<double>, std::vector<double>> curve_band(std::span<const std::vector<double>> curves) {
    if (curves.empty()) return {};
    const std::size_t n = curves.front().size();
    std::vector<double> mean(n), sd(n);
    for (const auto& c : curves)
        if (c.size() != n) throw std::invalid_argument("curve_band: curves differ in length");
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> column;
        for (const auto& c : curves) column.push_back(c[i]);
        std::tie(mean[i], sd[i]) = mean_std(column);
    }
    return {mean, sd};
}

std::string render_line_chart(const ChartSpec& chart) {
    double x_min = 0.0, x_max = 1.0;
    bool any = false;
    for (const auto& s : chart.series) {
        if (s.x.size() != s.mean.size() || (!s.stddev.empty() && s.stddev.size() != s.mean.size()))
            throw std::invalid_argument("render_line_chart: series \"" + s.label + "\" has mismatched lengths");
        for (double x : s.x) {
            x_min = any ? std::min(x_min, x) : x;
            x_max = any ? std::max(x_max, x) : x;
            any = true;
        }
    }
    if (x_max <= x_min) x_max = x_min + 1.0;
    const double y_span = chart.y_max > chart.y_min ? chart.y_max - chart.y_min : 1.0;
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    auto px = [&](double x) { return kLeft + (x - x_min) / (x_max - x_min) * pw; };
    auto py = [&](double y) { return kTop + (1.0 - (y - chart.y_min) / y_span) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << num(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
      << escape(chart.title) << "</text>\n";

    for (int i = 0; i <= 5; ++i) {
        const double y = chart.y_min + y_span * i / 5.0;
        o << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(py(y)) << "\" x2=\"" << num(kLeft + pw) << "\" y2=\""
          << num(py(y)) << "\" stroke=\"#e0e0e0\"/>\n";
        o << "<text x=\"" << num(kLeft - 6) << "\" y=\"" << num(py(y) + 4) << "\" text-anchor=\"end\">"
          << tick_label(y) << "</text>\n";
    }
    const long first = static_cast<long>(std::ceil(x_min)), last = static_cast<long>(std::floor(x_max));
    for (long x = first; x <= last; ++x)
        o << "<text x=\"" << num(px(static_cast<double>(x))) << "\" y=\"" << num(kTop + ph + 18)
          << "\" text-anchor=\"middle\">" << x << "</text>\n";
    o << "<rect x=\"" << num(kLeft) << "\" y=\"" << num(kTop) << "\" width=\"" << num(pw) << "\" height=\""
      << num(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
    o << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"" << num(kHeight - 14) << "\" text-anchor=\"middle\">"
      << escape(chart.x_label) << "</text>\n";
    o << "<text transform=\"translate(16 " << num(kTop + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(chart.y_label) << "</text>\n";

    if (!any)
        o << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"" << num(kTop + ph / 2)
          << "\" text-anchor=\"middle\" fill=\"#888\">no data</text>\n";

    for (std::size_t k = 0; k < chart.series.size(); ++k) {
        const auto& s = chart.series[k];
        const char* color = kColors[k % std::size(kColors)];
        if (!s.stddev.empty() && s.x.size() > 1) {
            o << "<polygon fill=\"" << color << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
            for (std::size_t i = 0; i < s.x.size(); ++i)
                o << num(px(s.x[i])) << ',' << num(py(s.mean[i] + s.stddev[i])) << ' ';
            for (std::size_t i = s.x.size(); i-- > 0;)
                o << num(px(s.x[i])) << ',' << num(py(s.mean[i] - s.stddev[i])) << (i ? " " : "");
            o << "\"/>\n";
        }
        if (s.x.size() > 1) {
            o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
            for (std::size_t i = 0; i < s.x.size(); ++i)
                o << num(px(s.x[i])) << ',' << num(py(s.mean[i])) << (i + 1 < s.x.size() ? " " : "");
            o << "\"/>\n";
        }
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!s.stddev.empty() && s.x.size() == 1)
                o << "<line x1=\"" << num(px(s.x[i])) << "\" y1=\"" << num(py(s.mean[i] - s.stddev[i]))
                  << "\" x2=\"" << num(px(s.x[i])) << "\" y2=\"" << num(py(s.mean[i] + s.stddev[i]))
                  << "\" stroke=\"" << color << "\" stroke-opacity=\"0.5\" stroke-width=\"6\"/>\n";
            o << "<circle cx=\"" << num(px(s.x[i])) << "\" cy=\"" << num(py(s.mean[i])) << "\" r=\"3\" fill=\""
              << color << "\"/>\n";
        }
        const double ly = kTop + 14 + 20 * static_cast<double>(k);
        o << "<line x1=\"" << num(kLeft + pw + 12) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(kLeft + pw + 32)
          << "\" y2=\"" << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << num(kLeft + pw + 38) << "\" y=\"" << num(ly + 4) << "\">" << escape(s.label)
          << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

std::vector<std::pair<std::string, std::string>> run_charts(std::span<const AccuracyMatrix> taw,
                                                            std::span<const AccuracyMatrix> tag) {
    const std::string seeds = std::to_string(taw.size()) + (taw.size() == 1 ? " seed" : " seeds, mean +/- std");
    std::vector<std::pair<std::string, std::string>> out;

    ChartSpec acc{"Accuracy on seen tasks (" + seeds + ")", "task step", "accuracy (fraction)", 0.0, 1.0, {}};
    acc.series.push_back(series_of("task-aware", taw, 0, seen_accuracy_curve));
    acc.series.push_back(series_of("task-agnostic", tag, 0, seen_accuracy_curve));
    out.emplace_back("accuracy.svg", render_line_chart(acc));

    ChartSpec fgt{"Forgetting (" + seeds + ")", "task step", "forgetting (fraction)", 0.0, 1.0, {}};
    fgt.series.push_back(series_of("task-aware", taw, 1, forgetting_curve));
    fgt.series.push_back(series_of("task-agnostic", tag, 1, forgetting_curve));
    double lo = 0.0, hi = 0.0;
    for (const auto& s : fgt.series)
        for (std::size_t i = 0; i < s.mean.size(); ++i) {
            const double sd = s.stddev.empty() ? 0.0 : s.stddev[i];
            lo = std::min(lo, s.mean[i] - sd);
            hi = std::max(hi, s.mean[i] + sd);
        }
    fgt.y_min = std::floor(lo * 10.0) / 10.0;
    fgt.y_max = std::max(0.1, std::ceil(hi * 10.0) / 10.0);
    out.emplace_back("forgetting.svg", render_line_chart(fgt));

    ChartSpec sp{"Task-aware stability and plasticity (" + seeds + ")", "task step", "accuracy (fraction)", 0.0,
                 1.0, {}};
    auto stab = [](const AccuracyMatrix& m) { return stability_curve(m); };
    auto plas = [](const AccuracyMatrix& m) { return plasticity_curve(m); };
    sp.series.push_back(series_of("stability", taw, 0, stab));
    sp.series.push_back(series_of("plasticity", taw, 0, plas));
    out.emplace_back("stability_plasticity.svg", render_line_chart(sp));
    return out;
}

}  // namespace padkit
