#pragma once

#include <cmath>

namespace moss {

// Reflected boundary indexing (abc|cba): -1 -> 0, -2 -> 1, n -> n-1.
// Used consistently by blur padding and bicubic interpolation.
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

// Cubic convolution weight with a = -0.5 (Keys kernel).
inline double cubic_weight(double t) {
    t = std::fabs(t);
    if (t <= 1.0) return (1.5 * t - 2.5) * t * t + 1.0;
    if (t < 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
    return 0.0;
}

}  // namespace moss
