#include "padkit/prng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace padkit {

std::uint64_t Prng::below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Prng::below: n must be positive");
    // Lemire-style rejection keeps the draw unbiased.
    const std::uint64_t limit = -n % n;
    for (;;) {
        const std::uint64_t r = next_u64();
        if (r >= limit) return r % n;
    }
}

double Prng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    return radius * std::cos(angle);
}

Prng Prng::split(std::uint64_t stream) const {
    Prng mixer(state_ ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
    return Prng(mixer.next_u64());
}

}  // namespace padkit
