#pragma once

#include <cstdint>
#include <vector>

#include "mdtbox/ccnet.hpp"
#include "mdtbox/diffusion.hpp"
#include "mdtbox/dit.hpp"

namespace mdtbox {

// DDIM step grid plus the per-step dynamic guidance weights. Timesteps are a
// uniform-stride descending subsequence of [0, T]; beta_t is evaluated at the
// original training timestep of each step.
struct SamplerSchedule {
    int T = 1000;
    int ddim_steps = 50;
    double beta_max = 2.0;
    double gamma = 0.01;
    double eta_ddim = 0.0; // 0 = deterministic
    std::vector<int> timesteps;  // descending, size ddim_steps; last step lands on 0
    std::vector<double> beta_t;  // guidance weight per entry of `timesteps`
};

// beta_t = (1 - cos(pi * (t/T)^gamma)) / 2 * beta
double dynamic_beta(int t, int T, double beta, double gamma);

// eps_hat = beta_t * eps_cond + (1 - beta_t) * eps_uncond, arranged so that
// identical branches combine to the branch bit-for-bit.
void cfg_combine(double* out, const double* eps_cond, const double* eps_uncond, double beta_t,
                 size_t n);

SamplerSchedule make_sampler_schedule(int T, int ddim_steps, double beta, double gamma,
                                      double eta_ddim = 0.0);

// Deterministic DDIM sampling with two forward passes per step (conditional c
// and the zero vector) combined by the dynamic guidance weight. Returns y_0.
LatentTensor ddim_sample(const DitModel& model, DitPass& pass, const LatentTensor& hint_latent,
                         const CompactCondition& c, const SamplerSchedule& schedule,
                         const NoiseSchedule& noise, uint64_t seed);

} // namespace mdtbox
