#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "mdtbox/sampler.hpp"

using namespace mdtbox;

namespace {

struct Fixture {
    ModelConfig cfg;
    ParamStore ps;
    DitModel model;
    explicit Fixture(uint64_t seed = 0) : cfg(), ps(), model(cfg, ps) {
        ps.finalize();
        Rng rng = Rng::child(seed, "test.sampler");
        model.init_weights(rng);
    }
};

} // namespace

TEST_CASE("dynamic beta: endpoints, midpoint value, monotonicity") {
    const int T = 1000;
    CHECK(dynamic_beta(0, T, 2.0, 0.01) == 0.0);
    CHECK(dynamic_beta(T, T, 2.0, 0.01) == doctest::Approx(2.0).epsilon(1e-15));

    // midpoint against a direct evaluation of the power-cosine form
    double expect = (1.0 - std::cos(std::numbers::pi * std::pow(0.5, 0.01))) / 2.0 * 2.0;
    CHECK(std::abs(dynamic_beta(T / 2, T, 2.0, 0.01) - expect) < 1e-9);
    CHECK(dynamic_beta(T / 2, T, 2.0, 0.01) == doctest::Approx(1.9998).epsilon(1e-4));

    double prev = -1.0;
    for (int t = 0; t <= T; ++t) {
        double b = dynamic_beta(t, T, 2.0, 0.01);
        CHECK(b >= prev);
        CHECK(b >= 0.0);
        CHECK(b <= 2.0);
        prev = b;
    }

    CHECK_THROWS_AS(dynamic_beta(1, 0, 2.0, 0.01), ParameterError);
    CHECK_THROWS_AS(dynamic_beta(1, 10, 2.0, 0.0), ParameterError);
    CHECK_THROWS_AS(dynamic_beta(-1, 10, 2.0, 0.01), ParameterError);
}

TEST_CASE("cfg_combine: endpoints exact, extrapolation, identical branches") {
    Rng rng(1);
    const size_t n = 64;
    std::vector<double> c(n), u(n), out(n);
    for (auto& v : c) v = rng.gaussian();
    for (auto& v : u) v = rng.gaussian();

    cfg_combine(out.data(), c.data(), u.data(), 1.0, n);
    CHECK(out == c);
    cfg_combine(out.data(), c.data(), u.data(), 0.0, n);
    CHECK(out == u);

    cfg_combine(out.data(), c.data(), u.data(), 2.0, n);
    for (size_t i = 0; i < n; ++i)
        CHECK(out[i] == doctest::Approx(2 * c[i] - u[i]).epsilon(1e-12));

    // equal branches collapse to the branch for any weight
    cfg_combine(out.data(), c.data(), c.data(), 0.73, n);
    CHECK(out == c);
}

TEST_CASE("sampler schedule: grid endpoints and count") {
    SamplerSchedule s = make_sampler_schedule(1000, 50, 2.0, 0.01);
    CHECK(s.timesteps.size() == 50);
    CHECK(s.timesteps.front() == 1000);
    CHECK(s.timesteps.back() == 20);
    for (size_t i = 1; i < s.timesteps.size(); ++i)
        CHECK(s.timesteps[i] == s.timesteps[i - 1] - 20);
    for (size_t i = 0; i < s.beta_t.size(); ++i)
        CHECK(s.beta_t[i] ==
              doctest::Approx(dynamic_beta(s.timesteps[i], 1000, 2.0, 0.01)).epsilon(1e-15));
    CHECK_THROWS_AS(make_sampler_schedule(100, 101, 2.0, 0.01), ParameterError);
}

TEST_CASE("zero-predictor DDIM single step matches the closed form") {
    // at init the model predicts exactly zero noise, so each DDIM step maps
    // y_t -> sqrt(ab_s/ab_t) * y_t; with one step the whole run is closed form
    Fixture f;
    NoiseSchedule noise = make_linear_schedule(1000);
    SamplerSchedule sched = make_sampler_schedule(1000, 1, 2.0, 0.01);
    REQUIRE(sched.timesteps == std::vector<int>{1000});

    LatentTensor hint(16, 16);
    CompactCondition c(128, 0.3);
    DitPass pass;
    LatentTensor y0 = ddim_sample(f.model, pass, hint, c, sched, noise, 77);

    Rng rng = Rng::child(77, "ddim");
    LatentTensor yT(16, 16);
    for (auto& v : yT.data) v = rng.gaussian();
    const double scale = std::sqrt(noise.alpha_bar[0]) / std::sqrt(noise.alpha_bar[1000]);
    for (size_t i = 0; i < y0.data.size(); ++i)
        CHECK(std::abs(y0.data[i] - scale * yT.data[i]) < 1e-9 * std::max(1.0, std::abs(y0.data[i])));

    // multi-step with the zero predictor composes the same closed form
    SamplerSchedule sched5 = make_sampler_schedule(1000, 5, 2.0, 0.01);
    LatentTensor y0b = ddim_sample(f.model, pass, hint, c, sched5, noise, 77);
    for (size_t i = 0; i < y0b.data.size(); ++i)
        CHECK(std::abs(y0b.data[i] - scale * yT.data[i]) < 1e-9 * std::max(1.0, std::abs(y0b.data[i])));
}

TEST_CASE("ddim_sample is bit-deterministic in the seed") {
    Fixture f(3);
    Rng rng(4);
    for (const auto& ti : f.ps.tensors()) f.ps.init_normal(f.ps.find(ti.name), rng, 0.05);
    NoiseSchedule noise = make_linear_schedule(1000);
    SamplerSchedule sched = make_sampler_schedule(1000, 10, 2.0, 0.01);
    LatentTensor hint(16, 16);
    for (auto& v : hint.data) v = rng.gaussian();
    CompactCondition c(128);
    for (auto& v : c) v = rng.gaussian();

    DitPass pass;
    LatentTensor a = ddim_sample(f.model, pass, hint, c, sched, noise, 123);
    LatentTensor b = ddim_sample(f.model, pass, hint, c, sched, noise, 123);
    CHECK(a.data == b.data);
    LatentTensor d = ddim_sample(f.model, pass, hint, c, sched, noise, 124);
    CHECK(a.data != d.data);
}

TEST_CASE("zero condition makes guided and unguided trajectories coincide") {
    Fixture f(5);
    Rng rng(6);
    for (const auto& ti : f.ps.tensors()) f.ps.init_normal(f.ps.find(ti.name), rng, 0.05);
    NoiseSchedule noise = make_linear_schedule(1000);
    LatentTensor hint(16, 16);
    for (auto& v : hint.data) v = rng.gaussian();
    CompactCondition zero(128, 0.0);

    DitPass pass;
    SamplerSchedule guided = make_sampler_schedule(1000, 8, 2.0, 0.01);
    SamplerSchedule unguided = make_sampler_schedule(1000, 8, 0.0, 0.01);
    LatentTensor a = ddim_sample(f.model, pass, hint, zero, guided, noise, 9);
    LatentTensor b = ddim_sample(f.model, pass, hint, zero, unguided, noise, 9);
    CHECK(a.data == b.data);

    // beta = 0 everywhere: output is independent of the condition entirely
    CompactCondition c(128);
    for (auto& v : c) v = rng.gaussian();
    LatentTensor d = ddim_sample(f.model, pass, hint, c, unguided, noise, 9);
    CHECK(d.data == b.data);
}
