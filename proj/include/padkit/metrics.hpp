#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace padkit {

/// Invalid access to, or update of, an accuracy matrix.
class MetricsError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

/// Max-gap forgetting, as written into output files.
inline constexpr const char* kForgettingFormula = "F_k = mean_{j<k} max_{l in [j,k-1]} (M[l][j] - M[k][j])";

/// T x T lower-trapezoidal matrix: M(i, j) is the test accuracy on task j
/// after training task i, defined only for j <= i. Every cell is written once.
class AccuracyMatrix {
   public:
    explicit AccuracyMatrix(std::size_t num_tasks = 0);

    std::size_t size() const { return n_; }
    /// Requires task <= step < size(), acc in [0, 1] and an unset cell.
    void record(std::size_t step, std::size_t task, double acc);
    bool has(std::size_t step, std::size_t task) const;
    double at(std::size_t step, std::size_t task) const;
    /// Rows 0..k-1 fully populated for the returned k.
    std::size_t complete_rows() const;
    bool complete() const { return complete_rows() == n_; }

    bool operator==(const AccuracyMatrix&) const = default;

   private:
    void check_cell(std::size_t step, std::size_t task) const;

    std::size_t n_;
    std::vector<std::optional<double>> cells_;
};

/// Column 0 for rows 0..k (k defaults to the last complete row).
std::vector<double> stability_curve(const AccuracyMatrix& m, std::optional<std::size_t> k = std::nullopt);
/// Diagonal entries 0..k.
std::vector<double> plasticity_curve(const AccuracyMatrix& m, std::optional<std::size_t> k = std::nullopt);

/// Unclipped: negative values indicate backward transfer.
double forgetting(const AccuracyMatrix& m, std::size_t k);
/// forgetting(m, k) for k = 1 .. complete_rows() - 1.
std::vector<double> forgetting_curve(const AccuracyMatrix& m);

/// Mean accuracy over tasks 0..i for every complete row i.
std::vector<double> seen_accuracy_curve(const AccuracyMatrix& m);
double avg_incremental_accuracy(const AccuracyMatrix& m);
double last_task_accuracy(const AccuracyMatrix& m);

struct SeedAggregate {
    AccuracyMatrix mean;
    AccuracyMatrix stddev;
};

/// Cellwise mean and population standard deviation over defined cells.
SeedAggregate aggregate_seeds(std::span<const AccuracyMatrix> runs);

/// Population mean and standard deviation of a list of values.
std::pair<double, double> mean_std(std::span<const double> values);

/// One row per step, comma separated, empty fields above the diagonal.
std::string to_csv(const AccuracyMatrix& m);
AccuracyMatrix from_csv(const std::string& text);

}  // namespace padkit
