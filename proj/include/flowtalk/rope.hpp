#pragma once

#include <cmath>
#include <vector>

#include "flowtalk/common.hpp"
#include "flowtalk/mat.hpp"

namespace flowtalk::net {

inline constexpr double kRopeBase = 10000.0;

// Rotary position encoding over one head block: consecutive coordinate pairs
// (2i, 2i+1) are rotated by angle pos * base^(-2i/d). Positions are real
// valued; streams with different rates may use fractional positions.
template <typename S>
void rope_rotate_inplace(MatT<S>& x, const std::vector<double>& pos, double base, bool inverse = false) {
    const Eigen::Index n = x.rows(), d = x.cols();
    if (d % 2 != 0) throw ValidationError("rotary encoding requires an even head dimension");
    if (Eigen::Index(pos.size()) != n) throw ValidationError("rotary positions must match sequence length");
    for (Eigen::Index i = 0; i < d / 2; ++i) {
        const double freq = std::pow(base, -2.0 * double(i) / double(d));
        for (Eigen::Index r = 0; r < n; ++r) {
            double theta = pos[size_t(r)] * freq;
            if (inverse) theta = -theta;
            const S c = S(std::cos(theta)), s = S(std::sin(theta));
            const S a = x(r, 2 * i), b = x(r, 2 * i + 1);
            x(r, 2 * i) = a * c - b * s;
            x(r, 2 * i + 1) = a * s + b * c;
        }
    }
}

template <typename S>
MatT<S> rope_rotate(const MatT<S>& x, const std::vector<double>& pos, double base, bool inverse = false) {
    MatT<S> y = x;
    rope_rotate_inplace(y, pos, base, inverse);
    return y;
}

}  // namespace flowtalk::net
