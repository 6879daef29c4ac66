#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mdtbox/diffusion.hpp"
#include "mdtbox/dit.hpp"

using namespace mdtbox;

namespace {

struct Fixture {
    ModelConfig cfg;
    ParamStore ps;
    DitModel model;
    explicit Fixture(ModelConfig c, uint64_t seed = 0) : cfg(c), ps(), model(cfg, ps) {
        ps.finalize();
        Rng rng = Rng::child(seed, "test.dit");
        model.init_weights(rng);
    }
};

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_enc = 1;
    c.n_dec = 1;
    c.width = 16;
    c.heads = 2;
    c.latent_h = c.latent_w = 4;
    c.t_freq = 16;
    return c;
}

std::vector<double> randv(Rng& rng, size_t n, double s = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.gaussian() * s;
    return v;
}

} // namespace

TEST_CASE("concat_hint stacks hint then noisy channels") {
    LatentTensor hint(16, 16), noisy(16, 16);
    Rng rng(1);
    for (auto& v : noisy.data) v = rng.gaussian();
    auto cat = concat_hint(hint, noisy);
    CHECK(cat.size() == static_cast<size_t>(8) * 16 * 16);
    for (size_t i = 0; i < hint.data.size(); ++i) CHECK(cat[i] == 0.0);
    for (size_t i = 0; i < noisy.data.size(); ++i)
        CHECK(cat[hint.data.size() + i] == noisy.data[i]);

    LatentTensor other(8, 8);
    CHECK_THROWS_AS(concat_hint(hint, other), ShapeError);
}

TEST_CASE("patchify and unpatchify invert each other on random latents") {
    Rng rng(2);
    const int C = 4, h = 16, w = 16, p = 2;
    auto grid = randv(rng, static_cast<size_t>(C) * h * w);
    std::vector<double> tokens(static_cast<size_t>(h / p) * (w / p) * C * p * p);
    std::vector<double> back(grid.size());
    patchify(grid.data(), C, h, w, p, tokens.data());
    unpatchify(tokens.data(), C, h, w, p, back.data());
    CHECK(back == grid);

    std::vector<double> tokens2(tokens.size());
    patchify(back.data(), C, h, w, p, tokens2.data());
    CHECK(tokens2 == tokens);
}

TEST_CASE("q_sample endpoints and linear-schedule shape") {
    NoiseSchedule s = make_linear_schedule(1000);
    CHECK(s.alpha_bar[0] == 1.0);
    CHECK(s.alpha_bar[1000] < 1e-4);
    for (int t = 1; t <= 1000; ++t) {
        CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        CHECK(s.beta[t] >= 1e-4 - 1e-15);
        CHECK(s.beta[t] <= 2e-2 + 1e-15);
    }
    CHECK(s.beta[1] == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.beta[1000] == doctest::Approx(2e-2).epsilon(1e-12));

    Rng rng(3);
    LatentTensor y0(4, 4), eps(4, 4);
    for (auto& v : y0.data) v = rng.gaussian();
    for (auto& v : eps.data) v = rng.gaussian();

    LatentTensor yt = q_sample(y0, 0, eps, s); // alpha_bar = 1 -> y0
    CHECK(yt.data == y0.data);

    NoiseSchedule z = s;
    z.alpha_bar[z.T] = 0.0; // alpha_bar = 0 -> pure noise
    LatentTensor yT = q_sample(y0, z.T, eps, z);
    CHECK(yT.data == eps.data);

    CHECK_THROWS_AS(q_sample(y0, -1, eps, s), ParameterError);
    CHECK_THROWS_AS(q_sample(y0, 1001, eps, s), ParameterError);
    LatentTensor small(2, 2);
    CHECK_THROWS_AS(q_sample(y0, 5, small, s), ShapeError);
}

TEST_CASE("mask bookkeeping: cardinality, uniqueness, order, frequency") {
    Rng rng(4);
    MaskSpec spec = make_mask(1024, 0.3, rng);
    CHECK(spec.masked.size() == 307); // floor(307.2)
    CHECK(spec.kept.size() == 1024 - 307);
    for (size_t i = 1; i < spec.masked.size(); ++i) CHECK(spec.masked[i] > spec.masked[i - 1]);
    for (size_t i = 1; i < spec.kept.size(); ++i) CHECK(spec.kept[i] > spec.kept[i - 1]);

    MaskSpec none = make_mask(64, 0.0, rng);
    CHECK(none.masked.empty());
    CHECK(none.kept.size() == 64);
    CHECK_THROWS_AS(make_mask(64, 1.0, rng), ParameterError);

    // per-position masking frequency over 1,000 draws, L=64, ratio 0.3
    std::vector<int> hits(64, 0);
    for (int d = 0; d < 1000; ++d) {
        MaskSpec m = make_mask(64, 0.3, rng);
        CHECK(m.masked.size() == 19); // floor(19.2)
        for (int idx : m.masked) hits[static_cast<size_t>(idx)]++;
    }
    for (int h : hits) {
        double f = h / 1000.0;
        CHECK(f > 0.25);
        CHECK(f < 0.35);
    }

    // the op view: kept tokens preserve original order
    TokenSequence toks;
    toks.length = 8;
    toks.width = 4;
    toks.data.resize(32);
    for (int i = 0; i < 8; ++i)
        for (int d = 0; d < 4; ++d) toks.data[static_cast<size_t>(i) * 4 + d] = i;
    auto [kept, spec2] = mask_tokens(toks, 0.5, rng);
    CHECK(kept.length == 4);
    for (int r = 0; r < kept.length; ++r)
        CHECK(kept.row(r)[0] == static_cast<double>(spec2.kept[static_cast<size_t>(r)]));
}

TEST_CASE("identity at init: eps_pred is exactly zero on both paths") {
    Fixture f(ModelConfig{});
    const int B = 2;
    Rng rng(5);
    const size_t cat = static_cast<size_t>(8) * 16 * 16;
    DitPass pass;
    for (int trial = 0; trial < 10; ++trial) {
        auto ycat = randv(rng, B * cat);
        auto c = randv(rng, static_cast<size_t>(B) * f.cfg.width);
        std::vector<int> t{rng.uniform_int(1000) + 1, rng.uniform_int(1000) + 1};
        f.model.forward(pass, ycat.data(), c.data(), t.data(), B, nullptr);
        for (double v : pass.eps) REQUIRE(std::abs(v) < 1e-12);

        std::vector<MaskSpec> specs;
        for (int b = 0; b < B; ++b) specs.push_back(make_mask(f.cfg.tokens(), 0.3, rng));
        f.model.forward(pass, ycat.data(), c.data(), t.data(), B, &specs);
        for (double v : pass.eps) REQUIRE(std::abs(v) < 1e-12);
        // encoder length bookkeeping during the masked pass
        CHECK(pass.blocks[0].L == f.cfg.tokens() - 19); // floor(0.3*64)=19 masked
        CHECK(pass.blocks[f.cfg.blocks() - 1].L == f.cfg.tokens());
    }
}

TEST_CASE("forward_masked with ratio 0 and untrained interpolator equals forward_full") {
    Fixture f(ModelConfig{}, 7);
    // randomize every weight except the side-interpolator output projection,
    // which stays zero-initialized
    Rng rng(8);
    int sproj_w = f.ps.find("dit.side.proj.w");
    int sproj_b = f.ps.find("dit.side.proj.b");
    for (const auto& ti : f.ps.tensors()) {
        int id = f.ps.find(ti.name);
        if (id == sproj_w || id == sproj_b) continue;
        f.ps.init_normal(id, rng, 0.05);
    }

    const int B = 3;
    const size_t cat = static_cast<size_t>(8) * 16 * 16;
    auto ycat = randv(rng, B * cat);
    auto c = randv(rng, static_cast<size_t>(B) * f.cfg.width);
    std::vector<int> t{17, 500, 999};

    DitPass full, masked;
    f.model.forward(full, ycat.data(), c.data(), t.data(), B, nullptr);
    std::vector<MaskSpec> specs(B);
    for (auto& s : specs) {
        Rng r(0);
        s = make_mask(f.cfg.tokens(), 0.0, r);
    }
    f.model.forward(masked, ycat.data(), c.data(), t.data(), B, &specs);
    REQUIRE(full.eps.size() == masked.eps.size());
    for (size_t i = 0; i < full.eps.size(); ++i) REQUIRE(full.eps[i] == masked.eps[i]);
}

TEST_CASE("side_interpolate: zero projection is the identity, output adds attention") {
    Fixture f(ModelConfig{}, 9);
    Rng rng(10);
    TokenSequence z;
    z.length = 64;
    z.width = f.cfg.width;
    z.data = randv(rng, static_cast<size_t>(z.length) * z.width);
    TokenSequence out = f.model.side_interpolate(z);
    CHECK(out.data == z.data); // proj zero-initialized

    f.ps.init_normal(f.ps.find("dit.side.proj.w"), rng, 0.05);
    TokenSequence out2 = f.model.side_interpolate(z);
    CHECK(out2.data != z.data);
}

TEST_CASE("model output is deterministic") {
    Fixture f(ModelConfig{}, 11);
    Rng rng(12);
    for (const auto& ti : f.ps.tensors()) f.ps.init_normal(f.ps.find(ti.name), rng, 0.05);
    const int B = 2;
    const size_t cat = static_cast<size_t>(8) * 16 * 16;
    auto ycat = randv(rng, B * cat);
    auto c = randv(rng, static_cast<size_t>(B) * f.cfg.width);
    std::vector<int> t{100, 900};
    DitPass p1, p2;
    f.model.forward(p1, ycat.data(), c.data(), t.data(), B, nullptr);
    f.model.forward(p2, ycat.data(), c.data(), t.data(), B, nullptr);
    CHECK(p1.eps == p2.eps);
}

TEST_CASE("count_params: enumeration oracle, paper scale, depth scaling") {
    // tiny config: the analytic count matches the allocated registry exactly
    Fixture tiny(tiny_config());
    ParamCount pc = count_params(tiny.cfg);
    CHECK(pc.total() == static_cast<long long>(tiny.model.param_count()));

    // hand enumeration for 1 block, D=8, 1 head: every weight listed
    ModelConfig one;
    one.n_enc = 1;
    one.n_dec = 1;
    one.width = 8;
    one.heads = 1;
    one.latent_h = one.latent_w = 4;
    one.t_freq = 8;
    ParamCount p1 = count_params(one);
    const long long D = 8;
    long long blocks2 = 2 * ((6 * D * D + 6 * D) + (3 * D * D + 3 * D) + (D * D + D) +
                             (4 * D * D + 4 * D) + (4 * D * D + D));
    CHECK(p1.blocks == blocks2);
    CHECK(p1.patch_embed == D * 32 + D);
    CHECK(p1.t_embedder == D * 8 + D + D * D + D);
    CHECK(p1.final_layer == 2 * D * D + 2 * D + 16 * D + 16);
    CHECK(p1.mask_token == D);
    CHECK(p1.side_interp == 4 * D * D + 4 * D);
    Fixture fone(one);
    CHECK(p1.total() == static_cast<long long>(fone.model.param_count()));

    // paper scale: 24 blocks, D=1024, 16 heads, p=2, 64x64 latent, 8-ch input
    ModelConfig paper;
    paper.n_enc = 22;
    paper.n_dec = 2;
    paper.width = 1024;
    paper.heads = 16;
    paper.latent_h = paper.latent_w = 64;
    ParamCount pp = count_params(paper);
    const double target = 458.0e6;
    CHECK(std::abs(pp.core() - target) / target < 0.05);

    // doubling the depth roughly doubles the block subtotal
    ModelConfig deep = paper;
    deep.n_enc = 44;
    deep.n_dec = 4;
    CHECK(count_params(deep).blocks == 2 * pp.blocks);
}

TEST_CASE("analytic gradients match finite differences on the tiny config") {
    Fixture f(tiny_config(), 21);
    Rng rng(22);
    // move off the zero init so every path is active
    for (const auto& ti : f.ps.tensors()) f.ps.init_normal(f.ps.find(ti.name), rng, 0.08);

    const int B = 2;
    const int D = f.cfg.width;
    const size_t cat = static_cast<size_t>(8) * 4 * 4;
    auto ycat = randv(rng, B * cat);
    auto cvec = randv(rng, static_cast<size_t>(B) * D);
    std::vector<int> t{3, 7};
    std::vector<MaskSpec> specs;
    for (int b = 0; b < B; ++b) specs.push_back(make_mask(f.cfg.tokens(), 0.25, rng));
    auto probe_full = randv(rng, B * 4 * 4 * 4);
    auto probe_mask = randv(rng, B * 4 * 4 * 4);

    auto loss = [&]() {
        DitPass pf, pm;
        f.model.forward(pf, ycat.data(), cvec.data(), t.data(), B, nullptr);
        f.model.forward(pm, ycat.data(), cvec.data(), t.data(), B, &specs);
        double s = 0.0;
        for (size_t i = 0; i < pf.eps.size(); ++i)
            s += probe_full[i] * pf.eps[i] + probe_mask[i] * pm.eps[i];
        return s;
    };

    DitPass pf, pm;
    f.model.forward(pf, ycat.data(), cvec.data(), t.data(), B, nullptr);
    f.model.forward(pm, ycat.data(), cvec.data(), t.data(), B, &specs);
    f.ps.zero_grads();
    std::vector<double> dc(static_cast<size_t>(B) * D, 0.0);
    f.model.backward(pf, probe_full.data(), dc.data());
    f.model.backward(pm, probe_mask.data(), dc.data());

    auto& vals = f.ps.values();
    Rng pick(23);
    int checked = 0;
    for (int trial = 0; trial < 120 && checked < 100; ++trial) {
        size_t i = static_cast<size_t>(pick.uniform_int(static_cast<int>(vals.size())));
        const double h = 1e-5;
        double keep = vals[i];
        vals[i] = keep + h;
        double fp = loss();
        vals[i] = keep - h;
        double fm = loss();
        vals[i] = keep;
        double want = (fp - fm) / (2 * h);
        double got = f.ps.grads()[i];
        if (std::abs(want) < 1e-12 && std::abs(got) < 1e-12) continue;
        ++checked;
        double rel = std::abs(want - got) / std::max({std::abs(want), std::abs(got), 1e-8});
        CHECK(rel < 1e-4);
    }
    CHECK(checked > 50);

    // conditioning gradient dc against finite differences
    for (size_t i : {size_t(0), static_cast<size_t>(D) + 3, cvec.size() - 1}) {
        const double h = 1e-5;
        double keep = cvec[i];
        cvec[i] = keep + h;
        double fp = loss();
        cvec[i] = keep - h;
        double fm = loss();
        cvec[i] = keep;
        double want = (fp - fm) / (2 * h);
        CHECK(std::abs(want - dc[i]) < 1e-6 * std::max(1.0, std::abs(want)));
    }
}
