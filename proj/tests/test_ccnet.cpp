#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mdtbox/ccnet.hpp"
#include "mdtbox/data_synth.hpp"

using namespace mdtbox;

namespace {

struct Fixture {
    CCNetConfig cfg;
    ParamStore ps;
    CCNetModel model;
    explicit Fixture(CCNetConfig c, uint64_t seed = 3)
        : cfg(c), ps(), model(cfg, ps) {
        ps.finalize();
        Rng rng = Rng::child(seed, "test.ccnet");
        model.init_weights(rng);
    }
};

std::vector<double> randv(Rng& rng, size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.gaussian();
    return v;
}

} // namespace

TEST_CASE("fusion arithmetic: paper scale 1024+1+514=1539, desk scale 64+1+130=195") {
    CCNetConfig paper;
    paper.latent_h = paper.latent_w = 64;
    paper.patch = 2;
    paper.width = 1024;
    paper.feat_width = 1024;
    paper.extractor_tokens = 257;
    CHECK(paper.lsif_tokens() == 1024);
    CHECK(paper.gsif_tokens() == 514);
    CHECK(paper.fusion_len() == 1539);
    // instantiating at paper scale allocates the m=1539 fusion weights
    Fixture fp(paper);
    CHECK(fp.ps.info(fp.ps.find("ccnet.fusion.w")).shape == std::vector<int>{1539});

    CCNetConfig desk;
    CHECK(desk.lsif_tokens() == 64);
    CHECK(desk.gsif_tokens() == 130);
    CHECK(desk.fusion_len() == 195);
}

TEST_CASE("lsif: token count, zero latent with zero bias gives pure positional rows") {
    Fixture f(CCNetConfig{});
    LatentTensor z(16, 16);
    TokenSequence t = f.model.extract_lsif(z);
    CHECK(t.length == 64);
    CHECK(t.width == 128);
    // zero latent and zero-init bias: rows equal the fixed positional table
    TokenSequence t2 = f.model.extract_lsif(z);
    CHECK(t.data == t2.data);
    LatentTensor z2(16, 16);
    z2.at(0, 0, 0) = 1.0;
    TokenSequence t3 = f.model.extract_lsif(z2);
    bool only_first = true;
    for (int i = 1; i < t3.length; ++i)
        for (int d = 0; d < t3.width; ++d)
            if (t3.row(i)[d] != t.row(i)[d]) only_first = false;
    CHECK(only_first); // patchified embedding is local to its patch

    LatentTensor bad(15, 15);
    CHECK_THROWS_AS(f.model.extract_lsif(bad), ShapeError);
}

TEST_CASE("tbf: zero reduction weights make v_B input independent") {
    Fixture f(CCNetConfig{});
    ExtractorModel ex(ExtractorConfig{});
    int rw = f.ps.find("ccnet.tbf.reduce.w");
    std::fill(f.ps.val(rw), f.ps.val(rw) + f.ps.size(rw), 0.0);

    SynthParams p;
    SceneSample s1 = generate_scene(5, p);
    SceneSample s2 = generate_scene(6, p);
    auto v1 = f.model.compute_tbf(s1.box_viz, ex);
    auto v2 = f.model.compute_tbf(s2.box_viz, ex);
    CHECK(v1.size() == 128);
    CHECK(v1 == v2);

    // analytic constant: proj(rb * ones) + proj bias
    double rb = *f.ps.val(f.ps.find("ccnet.tbf.reduce.b"));
    const double* pw = f.ps.val(f.ps.find("ccnet.tbf.proj.w"));
    const double* pb = f.ps.val(f.ps.find("ccnet.tbf.proj.b"));
    for (int d = 0; d < 128; ++d) {
        double want = pb[d];
        for (int j = 0; j < 64; ++j) want += pw[d * 64 + j] * rb;
        CHECK(v1[static_cast<size_t>(d)] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("gsif: concatenation length and per-token independence") {
    Fixture f(CCNetConfig{});
    Rng rng(31);
    TokenSequence a, b;
    a.length = b.length = 65;
    a.width = b.width = 64;
    a.data = randv(rng, 65 * 64);
    b.data = randv(rng, 65 * 64);

    TokenSequence g = f.model.compute_gsif(a, b);
    CHECK(g.length == 130);
    CHECK(g.width == 128);

    // perturbing hint token 3 changes only output position 65+3
    TokenSequence b2 = b;
    b2.row(3)[7] += 1.0;
    TokenSequence g2 = f.model.compute_gsif(a, b2);
    for (int i = 0; i < g.length; ++i) {
        bool same = true;
        for (int d = 0; d < g.width; ++d)
            if (g.row(i)[d] != g2.row(i)[d]) same = false;
        CHECK(same == (i != 65 + 3));
    }

    TokenSequence wrong = a;
    wrong.width = 32;
    wrong.data.resize(static_cast<size_t>(wrong.length) * 32);
    CHECK_THROWS_AS(f.model.compute_gsif(wrong, b), ShapeError);
}

TEST_CASE("collect_condition: linearity with zero fusion bias matches explicit matmul") {
    Fixture f(CCNetConfig{});
    const int D = 128;
    int fb = f.ps.find("ccnet.fusion.b");
    std::fill(f.ps.val(fb), f.ps.val(fb) + 1, 0.0);

    Rng rng(32);
    auto make_stack = [&](uint64_t) {
        TokenSequence lsif, gsif;
        lsif.length = 64;
        lsif.width = D;
        lsif.data = randv(rng, 64 * D);
        gsif.length = 130;
        gsif.width = D;
        gsif.data = randv(rng, 130 * D);
        std::vector<double> vb = randv(rng, D);
        return std::tuple{lsif, vb, gsif};
    };
    auto [l1, v1, g1] = make_stack(0);
    auto [l2, v2, g2] = make_stack(1);

    auto c1 = f.model.collect_condition(l1, v1, g1);
    auto c2 = f.model.collect_condition(l2, v2, g2);

    TokenSequence lsum = l1, gsum = g1;
    for (size_t i = 0; i < lsum.data.size(); ++i) lsum.data[i] += l2.data[i];
    for (size_t i = 0; i < gsum.data.size(); ++i) gsum.data[i] += g2.data[i];
    std::vector<double> vsum(v1);
    for (size_t i = 0; i < vsum.size(); ++i) vsum[i] += v2[i];
    auto csum = f.model.collect_condition(lsum, vsum, gsum);
    for (int d = 0; d < D; ++d)
        CHECK(csum[d] == doctest::Approx(c1[d] + c2[d]).epsilon(1e-9));

    // independent oracle: explicit dense multiply over the concatenated stack
    const double* fw = f.ps.val(f.ps.find("ccnet.fusion.w"));
    std::vector<double> expect(D, 0.0);
    for (int j = 0; j < 195; ++j) {
        const double* row = j < 64            ? l1.row(j)
                            : j == 64         ? v1.data()
                                              : g1.row(j - 65);
        for (int d = 0; d < D; ++d) expect[d] += fw[j] * row[d];
    }
    for (int d = 0; d < D; ++d) CHECK(c1[d] == doctest::Approx(expect[d]).epsilon(1e-12));

    TokenSequence short_gsif = g1;
    short_gsif.length = 129;
    short_gsif.data.resize(static_cast<size_t>(129) * D);
    CHECK_THROWS_AS(f.model.collect_condition(l1, v1, short_gsif), ShapeError);
}

TEST_CASE("drop_condition: endpoints and binomial statistics") {
    CompactCondition c(16, 1.5);
    Rng rng(33);
    for (int i = 0; i < 20; ++i) {
        CHECK(drop_condition(c, 0.0, rng) == c);
        CHECK(drop_condition(c, 1.0, rng) == CompactCondition(16, 0.0));
    }
    // eta=0.1 over 10,000 draws: zeroed fraction within +/-4 sigma of 0.1
    int zeroed = 0;
    for (int i = 0; i < 10000; ++i)
        if (drop_condition(c, 0.1, rng)[0] == 0.0) ++zeroed;
    double frac = zeroed / 10000.0;
    CHECK(frac > 0.085);
    CHECK(frac < 0.115);

    CHECK_THROWS_AS(drop_condition(c, -0.1, rng), ParameterError);
    CHECK_THROWS_AS(drop_condition(c, 1.1, rng), ParameterError);
}

TEST_CASE("batched forward matches the single-sample operations") {
    Fixture f(CCNetConfig{});
    ExtractorModel ex(ExtractorConfig{});
    CodecModel codec = CodecModel::make_block(CodecConfig{});
    SynthParams p;

    const int B = 3;
    std::vector<SceneSample> scenes;
    for (int b = 0; b < B; ++b) scenes.push_back(generate_scene(50 + b, p));

    std::vector<double> lats, tbf, src, hint;
    for (const auto& s : scenes) {
        LatentTensor z = codec.encode(s.source_image);
        lats.insert(lats.end(), z.data.begin(), z.data.end());
        auto tb = ex.extract_tokens(s.box_viz);
        tbf.insert(tbf.end(), tb.data.begin(), tb.data.end());
        auto ts = ex.extract_tokens(s.source_image);
        src.insert(src.end(), ts.data.begin(), ts.data.end());
        auto th = ex.extract_tokens(s.hint_image);
        hint.insert(hint.end(), th.data.begin(), th.data.end());
    }
    CCNetActs acts;
    f.model.forward(acts, lats.data(), tbf.data(), src.data(), hint.data(), B);

    for (int b = 0; b < B; ++b) {
        CompactCondition want = f.model.condition_for(scenes[b], codec, ex);
        for (int d = 0; d < 128; ++d)
            CHECK(acts.c[static_cast<size_t>(b) * 128 + d] ==
                  doctest::Approx(want[d]).epsilon(1e-10));
    }
}

TEST_CASE("backward gradients match central finite differences") {
    CCNetConfig small;
    small.latent_h = small.latent_w = 4;
    small.patch = 2;
    small.width = 8;
    small.feat_width = 4;
    small.extractor_tokens = 5;
    Fixture f(small);

    Rng rng(41);
    const int B = 2;
    auto lats = randv(rng, static_cast<size_t>(B) * 4 * 4 * 4);
    auto tbf = randv(rng, static_cast<size_t>(B) * 5 * 4);
    auto src = randv(rng, static_cast<size_t>(B) * 5 * 4);
    auto hint = randv(rng, static_cast<size_t>(B) * 5 * 4);
    auto probe = randv(rng, static_cast<size_t>(B) * 8);

    auto loss = [&]() {
        CCNetActs a;
        f.model.forward(a, lats.data(), tbf.data(), src.data(), hint.data(), B);
        double s = 0;
        for (size_t i = 0; i < a.c.size(); ++i) s += probe[i] * a.c[i];
        return s;
    };
    CCNetActs a;
    f.model.forward(a, lats.data(), tbf.data(), src.data(), hint.data(), B);
    f.ps.zero_grads();
    f.model.backward(a, probe.data());

    auto& vals = f.ps.values();
    Rng pick(42);
    for (int trial = 0; trial < 30; ++trial) {
        size_t i = static_cast<size_t>(pick.uniform_int(static_cast<int>(vals.size())));
        double keep = vals[i];
        const double h = 1e-6;
        vals[i] = keep + h;
        double fp = loss();
        vals[i] = keep - h;
        double fm = loss();
        vals[i] = keep;
        double want = (fp - fm) / (2 * h);
        double got = f.ps.grads()[i];
        CHECK(std::abs(want - got) < 1e-5 * std::max(1.0, std::abs(want)));
    }
}
