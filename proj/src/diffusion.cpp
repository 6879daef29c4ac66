#include "mdtbox/diffusion.hpp"

#include <cmath>

namespace mdtbox {

NoiseSchedule make_linear_schedule(int T, double beta_min, double beta_max) {
    if (T <= 0) throw ParameterError("schedule needs T > 0");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(static_cast<size_t>(T) + 1, 0.0);
    s.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        s.beta[static_cast<size_t>(t)] =
            T == 1 ? beta_min : beta_min + (beta_max - beta_min) * (t - 1) / (T - 1);
        s.alpha_bar[static_cast<size_t>(t)] =
            s.alpha_bar[static_cast<size_t>(t) - 1] * (1.0 - s.beta[static_cast<size_t>(t)]);
    }
    return s;
}

LatentTensor q_sample(const LatentTensor& y0, int t, const LatentTensor& eps,
                      const NoiseSchedule& s) {
    if (t < 0 || t > s.T) throw ParameterError("q_sample timestep out of [0, T]");
    if (y0.h != eps.h || y0.w != eps.w) throw ShapeError("q_sample eps shape mismatch");
    const double ab = s.alpha_bar[static_cast<size_t>(t)];
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    LatentTensor y(y0.h, y0.w);
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = a * y0.data[i] + b * eps.data[i];
    return y;
}

} // namespace mdtbox
