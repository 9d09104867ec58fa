#pragma once

#include <string>
#include <vector>

#include "padkit/gradcheck.hpp"

namespace padkit {

/// Pass threshold on the worst relative error of any item.
inline constexpr double kGradCheckTolerance = 1e-4;
/// Central-difference step used by every suite item.
inline constexpr double kGradCheckEps = 1e-5;

enum class GradScope { ops, model, losses };

/// Throws std::invalid_argument for names other than ops, model and losses.
GradScope parse_grad_scope(const std::string& name);

struct GradCheckItem {
    std::string name;
    GradCheckResult result;
    /// Parameter or input holding the worst coordinate.
    std::string worst_at;

    bool passed() const { return result.max_rel_error < kGradCheckTolerance; }
};

/// Finite-difference checks for one scope: every differentiable op, the desk
/// model end to end (logits and captured traces), or the full training
/// objective of every method. `inject_fault` appends an item whose gradient
/// path hides a term from the tape, which must fail.
std::vector<GradCheckItem> run_gradcheck_suite(GradScope scope, bool inject_fault = false);

}  // namespace padkit
