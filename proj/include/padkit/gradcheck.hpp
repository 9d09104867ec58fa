#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "padkit/tensor.hpp"

namespace padkit {

/// Worst coordinate found by a finite-difference comparison.
struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t tensor_index = 0;
    std::size_t coordinate = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coordinates_checked = 0;
};

/// Compares the taped gradient of scalar `f` at `x` with central differences.
/// Error per coordinate is |a - n| / max(|a|, |n|, 1e-6 * max(1, |f(x)|)), a
/// floor above the rounding noise of a central difference at eps 1e-5. `x` is
/// perturbed in place and restored.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5);

/// Multi-tensor variant. When `max_coords_per_tensor` is nonzero, each tensor
/// is probed on that many coordinates drawn from `seed` (all coordinates when
/// the tensor is smaller).
GradCheckResult grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  double eps = 1e-5, std::size_t max_coords_per_tensor = 0,
                                  std::uint64_t seed = 0);

}  // namespace padkit
