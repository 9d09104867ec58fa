#include "padkit/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

namespace padkit {

AccuracyMatrix::AccuracyMatrix(std::size_t num_tasks) : n_(num_tasks), cells_(num_tasks * num_tasks) {}

void AccuracyMatrix::check_cell(std::size_t step, std::size_t task) const {
    if (step >= n_ || task >= n_)
        throw MetricsError("cell (" + std::to_string(step) + ", " + std::to_string(task) + ") outside a " +
                           std::to_string(n_) + "-task matrix");
    if (task > step)
        throw MetricsError("cell (" + std::to_string(step) + ", " + std::to_string(task) +
                           ") lies above the diagonal");
}

void AccuracyMatrix::record(std::size_t step, std::size_t task, double acc) {
    check_cell(step, task);
    if (!(acc >= 0.0 && acc <= 1.0)) throw MetricsError("accuracy " + std::to_string(acc) + " outside [0, 1]");
    auto& cell = cells_[step * n_ + task];
    if (cell) throw MetricsError("cell (" + std::to_string(step) + ", " + std::to_string(task) + ") already set");
    cell = acc;
}

bool AccuracyMatrix::has(std::size_t step, std::size_t task) const {
    return step < n_ && task <= step && cells_[step * n_ + task].has_value();
}

double AccuracyMatrix::at(std::size_t step, std::size_t task) const {
    check_cell(step, task);
    const auto& cell = cells_[step * n_ + task];
    if (!cell) throw MetricsError("cell (" + std::to_string(step) + ", " + std::to_string(task) + ") unpopulated");
    return *cell;
}

std::size_t AccuracyMatrix::complete_rows() const {
    for (std::size_t i = 0; i < n_; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            if (!cells_[i * n_ + j]) return i;
    return n_;
}

namespace {

std::size_t last_row(const AccuracyMatrix& m, std::optional<std::size_t> k) {
    const std::size_t rows = m.complete_rows();
    if (k) {
        if (*k >= rows) throw MetricsError("rows through step " + std::to_string(*k) + " are not populated");
        return *k;
    }
    if (rows == 0) throw MetricsError("matrix has no populated rows");
    return rows - 1;
}

void require_complete(const AccuracyMatrix& m) {
    if (m.size() == 0 || !m.complete()) throw MetricsError("matrix is incomplete");
}

}  // namespace

std::vector<double> stability_curve(const AccuracyMatrix& m, std::optional<std::size_t> k) {
    const std::size_t last = last_row(m, k);
    std::vector<double> out;
    for (std::size_t i = 0; i <= last; ++i) out.push_back(m.at(i, 0));
    return out;
}

std::vector<double> plasticity_curve(const AccuracyMatrix& m, std::optional<std::size_t> k) {
    const std::size_t last = last_row(m, k);
    std::vector<double> out;
    for (std::size_t i = 0; i <= last; ++i) out.push_back(m.at(i, i));
    return out;
}

double forgetting(const AccuracyMatrix& m, std::size_t k) {
    if (k == 0) throw MetricsError("forgetting needs at least one earlier step");
    last_row(m, k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        double gap = -std::numeric_limits<double>::infinity();
        for (std::size_t l = j; l < k; ++l) gap = std::max(gap, m.at(l, j) - m.at(k, j));
        total += gap;
    }
    return total / static_cast<double>(k);
}

std::vector<double> forgetting_curve(const AccuracyMatrix& m) {
    std::vector<double> out;
    for (std::size_t k = 1; k < m.complete_rows(); ++k) out.push_back(forgetting(m, k));
    return out;
}

std::vector<double> seen_accuracy_curve(const AccuracyMatrix& m) {
    std::vector<double> out;
    for (std::size_t i = 0; i < m.complete_rows(); ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j <= i; ++j) row += m.at(i, j);
        out.push_back(row / static_cast<double>(i + 1));
    }
    return out;
}

double avg_incremental_accuracy(const AccuracyMatrix& m) {
    require_complete(m);
    const auto curve = seen_accuracy_curve(m);
    double total = 0.0;
    for (double v : curve) total += v;
    return total / static_cast<double>(m.size());
}

double last_task_accuracy(const AccuracyMatrix& m) {
    require_complete(m);
    const std::size_t last = m.size() - 1;
    double total = 0.0;
    for (std::size_t j = 0; j <= last; ++j) total += m.at(last, j);
    return total / static_cast<double>(m.size());
}

std::pair<double, double> mean_std(std::span<const double> values) {
    if (values.empty()) throw MetricsError("mean of an empty list");
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (*lo == *hi) return {*lo, 0.0};
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    return {mean, std::sqrt(var / static_cast<double>(values.size()))};
}

SeedAggregate aggregate_seeds(std::span<const AccuracyMatrix> runs) {
    if (runs.empty()) throw MetricsError("aggregate_seeds needs at least one matrix");
    const std::size_t n = runs[0].size();
    for (const auto& r : runs)
        if (r.size() != n) throw MetricsError("matrices to aggregate differ in size");
    SeedAggregate out{AccuracyMatrix(n), AccuracyMatrix(n)};
    std::vector<double> vals;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            vals.clear();
            for (const auto& r : runs)
                if (r.has(i, j)) vals.push_back(r.at(i, j));
            if (vals.empty()) continue;
            if (vals.size() != runs.size()) throw MetricsError("matrices to aggregate differ in populated cells");
            const auto [mu, sd] = mean_std(vals);
            out.mean.record(i, j, std::clamp(mu, 0.0, 1.0));
            out.stddev.record(i, j, sd);
        }
    return out;
}

std::string to_csv(const AccuracyMatrix& m) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < m.size(); ++i) {
        for (std::size_t j = 0; j < m.size(); ++j) {
            if (j) os << ',';
            if (m.has(i, j)) os << m.at(i, j);
        }
        os << '\n';
    }
    return os.str();
}

AccuracyMatrix from_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        rows.push_back(std::move(fields));
    }
    AccuracyMatrix m(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows.size()) throw MetricsError("CSV matrix is not square");
        for (std::size_t j = 0; j < rows.size(); ++j) {
            const std::string& f = rows[i][j];
            if (f.empty()) continue;
            double v = 0.0;
            const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
            if (res.ec != std::errc{} || res.ptr != f.data() + f.size())
                throw MetricsError("bad CSV field '" + f + "'");
            m.record(i, j, v);
        }
    }
    return m;
}

}  // namespace padkit
