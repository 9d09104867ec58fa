#include "padkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "padkit/prng.hpp"

namespace padkit {

GradCheckResult grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps,
                                  std::size_t max_coords_per_tensor, std::uint64_t seed) {
    std::vector<bool> saved_flags;
    for (auto& p : params) {
        saved_flags.push_back(p.requires_grad());
        p.set_requires_grad(true);
        p.zero_grad();
    }
    double value = 0.0;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = f();
        value = loss.item();
        tape.backward(loss);
    }
    const double floor = 1e-6 * std::max(1.0, std::abs(value));

    GradCheckResult result;
    Prng prng(seed);
    for (std::size_t t = 0; t < params.size(); ++t) {
        Tensor& p = params[t];
        const std::vector<double> analytic = p.grad();
        std::vector<std::size_t> coords(p.numel());
        std::iota(coords.begin(), coords.end(), 0);
        if (max_coords_per_tensor != 0 && coords.size() > max_coords_per_tensor) {
            for (std::size_t i = 0; i < max_coords_per_tensor; ++i) {
                std::swap(coords[i], coords[i + prng.below(coords.size() - i)]);
            }
            coords.resize(max_coords_per_tensor);
        }
        auto values = p.mutable_data();
        NoGradScope no_grad;
        for (std::size_t c : coords) {
            const double original = values[c];
            values[c] = original + eps;
            const double up = f().item();
            values[c] = original - eps;
            const double down = f().item();
            values[c] = original;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[c];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            ++result.coordinates_checked;
            if (err >= result.max_rel_error) {
                result.max_rel_error = err;
                result.tensor_index = t;
                result.coordinate = c;
                result.analytic = a;
                result.numeric = numeric;
            }
        }
    }
    for (std::size_t t = 0; t < params.size(); ++t) {
        params[t].zero_grad();
        params[t].set_requires_grad(saved_flags[t]);
    }
    return result;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
    return grad_check_params([&] { return f(x); }, {x}, eps).max_rel_error;
}

}  // namespace padkit
