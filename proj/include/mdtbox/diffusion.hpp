#pragma once

#include <vector>

#include "mdtbox/codec.hpp"
#include "mdtbox/errors.hpp"

namespace mdtbox {

// Forward-process schedule. Index convention: t runs over [0, T] with
// alpha_bar[0] = 1 (no noise) and beta[t] the step-t variance for t >= 1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;      // [T+1], beta[0] unused
    std::vector<double> alpha_bar; // [T+1]
};

NoiseSchedule make_linear_schedule(int T, double beta_min = 1e-4, double beta_max = 2e-2);

// y_t = sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps
LatentTensor q_sample(const LatentTensor& y0, int t, const LatentTensor& eps,
                      const NoiseSchedule& s);

} // namespace mdtbox
