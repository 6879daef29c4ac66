#include "mdtbox/sampler.hpp"

#include <cmath>
#include <numbers>

namespace mdtbox {

double dynamic_beta(int t, int T, double beta, double gamma) {
    if (T <= 0) throw ParameterError("dynamic_beta requires T > 0");
    if (gamma <= 0.0) throw ParameterError("dynamic_beta requires gamma > 0");
    if (t < 0 || t > T) throw ParameterError("dynamic_beta timestep out of [0, T]");
    const double frac = static_cast<double>(t) / T;
    return (1.0 - std::cos(std::numbers::pi * std::pow(frac, gamma))) / 2.0 * beta;
}

void cfg_combine(double* out, const double* eps_cond, const double* eps_uncond, double beta_t,
                 size_t n) {
    if (beta_t == 1.0) {
        for (size_t i = 0; i < n; ++i) out[i] = eps_cond[i];
        return;
    }
    if (beta_t == 0.0) {
        for (size_t i = 0; i < n; ++i) out[i] = eps_uncond[i];
        return;
    }
    // u + b*(c - u): equal branches stay bit-identical for any beta_t
    for (size_t i = 0; i < n; ++i)
        out[i] = eps_uncond[i] + beta_t * (eps_cond[i] - eps_uncond[i]);
}

SamplerSchedule make_sampler_schedule(int T, int ddim_steps, double beta, double gamma,
                                      double eta_ddim) {
    if (ddim_steps <= 0) throw ParameterError("ddim_steps must be positive");
    if (ddim_steps > T) throw ParameterError("ddim_steps must not exceed T");
    SamplerSchedule s;
    s.T = T;
    s.ddim_steps = ddim_steps;
    s.beta_max = beta;
    s.gamma = gamma;
    s.eta_ddim = eta_ddim;
    s.timesteps.resize(static_cast<size_t>(ddim_steps));
    s.beta_t.resize(static_cast<size_t>(ddim_steps));
    for (int i = 0; i < ddim_steps; ++i) {
        // uniform stride over [0, T]: T, T - T/S, ..., T/S
        int t = static_cast<int>(std::llround(static_cast<double>(T) * (ddim_steps - i) /
                                              ddim_steps));
        s.timesteps[static_cast<size_t>(i)] = t;
        s.beta_t[static_cast<size_t>(i)] = dynamic_beta(t, T, beta, gamma);
    }
    return s;
}

LatentTensor ddim_sample(const DitModel& model, DitPass& pass, const LatentTensor& hint_latent,
                         const CompactCondition& c, const SamplerSchedule& schedule,
                         const NoiseSchedule& noise, uint64_t seed) {
    const ModelConfig& cfg = model.config();
    if (hint_latent.h != cfg.latent_h || hint_latent.w != cfg.latent_w)
        throw ShapeError("hint latent dims mismatch the model");
    if (static_cast<int>(c.size()) != cfg.width)
        throw ShapeError("condition width mismatches the model");
    if (schedule.T != noise.T) throw ParameterError("sampler and noise schedules disagree on T");

    Rng rng = Rng::child(seed, "ddim");
    LatentTensor y(cfg.latent_h, cfg.latent_w);
    for (auto& v : y.data) v = rng.gaussian();

    const CompactCondition null_c(c.size(), 0.0);
    const size_t n = y.data.size();
    std::vector<double> eps_hat(n);

    for (int i = 0; i < schedule.ddim_steps; ++i) {
        const int t = schedule.timesteps[static_cast<size_t>(i)];
        const int s = (i + 1 < schedule.ddim_steps)
                          ? schedule.timesteps[static_cast<size_t>(i) + 1]
                          : 0;
        auto ycat = concat_hint(hint_latent, y);

        model.forward(pass, ycat.data(), c.data(), &t, 1, nullptr);
        std::vector<double> eps_c = pass.eps;
        model.forward(pass, ycat.data(), null_c.data(), &t, 1, nullptr);
        const std::vector<double>& eps_u = pass.eps;
        cfg_combine(eps_hat.data(), eps_c.data(), eps_u.data(),
                    schedule.beta_t[static_cast<size_t>(i)], n);

        const double ab_t = noise.alpha_bar[static_cast<size_t>(t)];
        const double ab_s = noise.alpha_bar[static_cast<size_t>(s)];
        const double sqab_t = std::sqrt(ab_t), sqab_s = std::sqrt(ab_s);
        double sigma = 0.0;
        if (schedule.eta_ddim > 0.0 && s > 0) {
            sigma = schedule.eta_ddim * std::sqrt((1.0 - ab_s) / (1.0 - ab_t)) *
                    std::sqrt(1.0 - ab_t / ab_s);
        }
        const double dir = std::sqrt(std::max(0.0, 1.0 - ab_s - sigma * sigma));
        for (size_t j = 0; j < n; ++j) {
            const double y0_pred = (y.data[j] - std::sqrt(1.0 - ab_t) * eps_hat[j]) / sqab_t;
            y.data[j] = sqab_s * y0_pred + dir * eps_hat[j];
            if (sigma > 0.0) y.data[j] += sigma * rng.gaussian();
        }
    }
    return y;
}

} // namespace mdtbox
