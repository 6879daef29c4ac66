#pragma once

#include <cmath>
#include <vector>

#include "mdtbox/errors.hpp"

namespace mdtbox {

// Fixed sinusoidal embeddings (never trained).

// Classic interleaved sin/cos over token index: out [L, D].
inline std::vector<double> sincos_pos_1d(int L, int D) {
    std::vector<double> pe(static_cast<size_t>(L) * D);
    for (int pos = 0; pos < L; ++pos)
        for (int i = 0; i < D; i += 2) {
            double omega = std::pow(10000.0, -static_cast<double>(i) / D);
            pe[static_cast<size_t>(pos) * D + i] = std::sin(pos * omega);
            if (i + 1 < D) pe[static_cast<size_t>(pos) * D + i + 1] = std::cos(pos * omega);
        }
    return pe;
}

// Grid embedding: first D/2 dims encode the row, last D/2 the column, each as
// [sin(p*w), cos(p*w)] halves. Rows are raster order (row-major). D % 4 == 0.
inline std::vector<double> sincos_pos_2d(int gh, int gw, int D) {
    if (D % 4 != 0) throw ShapeError("2d positional embedding needs width divisible by 4");
    const int quarter = D / 4;
    auto axis = [&](int p, int j) {
        double omega = std::pow(10000.0, -static_cast<double>(j) / quarter);
        return std::pair<double, double>{std::sin(p * omega), std::cos(p * omega)};
    };
    std::vector<double> pe(static_cast<size_t>(gh) * gw * D);
    for (int y = 0; y < gh; ++y)
        for (int x = 0; x < gw; ++x) {
            double* row = pe.data() + (static_cast<size_t>(y) * gw + x) * D;
            for (int j = 0; j < quarter; ++j) {
                auto [sy, cy] = axis(y, j);
                auto [sx, cx] = axis(x, j);
                row[j] = sy;
                row[quarter + j] = cy;
                row[2 * quarter + j] = sx;
                row[3 * quarter + j] = cx;
            }
        }
    return pe;
}

// Timestep embedding: [cos(t*w), sin(t*w)] with log-spaced frequencies.
inline void timestep_embedding(double t, int dim, double* out) {
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out[i] = std::cos(t * freq);
        out[half + i] = std::sin(t * freq);
    }
    if (dim % 2) out[dim - 1] = 0.0;
}

} // namespace mdtbox
