#pragma once

#include <algorithm>
#include <cmath>

namespace codiff::testing {

// Whether a published squared error, printed to `decimals` places, is
// consistent with true/pred values that were themselves rounded to the same
// number of places.
inline bool squared_error_attainable(double y_true, double y_hat, double published, int decimals) {
    const double half = 0.5 * std::pow(10.0, -decimals);
    const double d = std::abs(y_true - y_hat);
    const double lo = std::max(0.0, d - 2.0 * half), hi = d + 2.0 * half;
    return hi * hi >= published - half && lo * lo <= published + half;
}

inline double round_to(double v, int decimals) {
    const double scale = std::pow(10.0, decimals);
    return std::round(v * scale) / scale;
}

}  // namespace codiff::testing
