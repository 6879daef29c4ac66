// Acceptance suite: one criterion per section, one PASS/FAIL line each.
// Criterion 9 trains the full desk-scale model and leaves its artifacts in
// the work directory; criterion 10 evaluates them. Run with --only N,M to
// select criteria (9 must have run before 10 in the same work directory).

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>

#include "mdtbox/metrics.hpp"
#include "mdtbox/sampler.hpp"
#include "mdtbox/train.hpp"

using namespace mdtbox;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

fs::path g_work = "acceptance_work";

Outcome ok(std::string d) { return {true, std::move(d)}; }
Outcome bad(std::string d) { return {false, std::move(d)}; }

std::string fmt(double v, int prec = 4) {
    std::ostringstream ss;
    ss.precision(prec);
    ss << v;
    return ss.str();
}

// ---- 1: dynamic CFG schedule --------------------------------------------
Outcome criterion_cfg_schedule() {
    const int T = 1000;
    if (dynamic_beta(0, T, 2.0, 0.01) != 0.0) return bad("beta_0 != 0");
    if (dynamic_beta(T, T, 2.0, 0.01) != 2.0) return bad("beta_T != 2.0");
    const double direct =
        (1.0 - std::cos(std::numbers::pi * std::pow(0.5, 0.01))) / 2.0 * 2.0;
    const double got = dynamic_beta(T / 2, T, 2.0, 0.01);
    if (std::abs(got - direct) >= 1e-9)
        return bad("beta_{T/2} off by " + fmt(std::abs(got - direct), 3));
    double prev = -1.0;
    for (int i = 0; i <= 1000; ++i) {
        double b = dynamic_beta(i, 1000, 2.0, 0.01);
        if (b < prev) return bad("not monotone at t=" + std::to_string(i));
        prev = b;
    }
    return ok("beta_0=0, beta_T=2, beta_{T/2}=" + fmt(got, 6) + ", monotone on 1000 points");
}

// ---- 2: CCNet fusion arithmetic ------------------------------------------
Outcome criterion_ccnet_arithmetic() {
    CCNetConfig paper;
    paper.latent_h = paper.latent_w = 64;
    paper.patch = 2;
    paper.width = 1024;
    paper.feat_width = 1024;
    paper.extractor_tokens = 257;
    if (paper.lsif_tokens() != 1024 || paper.gsif_tokens() != 514 || paper.fusion_len() != 1539)
        return bad("paper-scale fusion arithmetic broken");
    ParamStore ps;
    CCNetModel model(paper, ps);
    ps.finalize();
    if (ps.info(ps.find("ccnet.fusion.w")).shape != std::vector<int>{1539})
        return bad("paper-scale fusion weights not 1539 long");

    CCNetConfig desk;
    if (desk.fusion_len() != 195 || desk.lsif_tokens() != 64 || desk.gsif_tokens() != 130)
        return bad("desk-scale fusion arithmetic broken");
    return ok("paper 1024+1+514=1539, desk 64+1+130=195");
}

// ---- 3: mask bookkeeping --------------------------------------------------
Outcome criterion_mask() {
    Rng rng = Rng::child(3, "acceptance.mask");
    MaskSpec spec = make_mask(1024, 0.3, rng);
    if (spec.masked.size() != 307) return bad("masked count != 307");
    for (size_t i = 1; i < spec.masked.size(); ++i)
        if (spec.masked[i] <= spec.masked[i - 1]) return bad("indices not unique/ascending");
    if (spec.masked.front() < 0 || spec.masked.back() >= 1024) return bad("index out of range");

    // frequency bound at L=64 (the binomial-bound oracle scale)
    std::vector<int> hits(64, 0);
    for (int d = 0; d < 1000; ++d) {
        MaskSpec m = make_mask(64, 0.3, rng);
        if (m.masked.size() != 19) return bad("L=64 masked count != 19");
        for (int idx : m.masked) hits[static_cast<size_t>(idx)]++;
    }
    double lo = 1.0, hi = 0.0;
    for (int h : hits) {
        double f = h / 1000.0;
        lo = std::min(lo, f);
        hi = std::max(hi, f);
    }
    if (lo <= 0.25 || hi >= 0.35)
        return bad("per-position frequency range [" + fmt(lo) + ", " + fmt(hi) + "]");
    return ok("1024@0.3 -> 307 unique; L=64 frequencies in [" + fmt(lo, 3) + ", " + fmt(hi, 3) +
              "]");
}

// ---- 4: identity at init --------------------------------------------------
Outcome criterion_identity_at_init() {
    ModelConfig cfg;
    ParamStore ps;
    DitModel model(cfg, ps);
    ps.finalize();
    Rng init = Rng::child(4, "acceptance.init");
    model.init_weights(init);

    Rng rng = Rng::child(4, "acceptance.inputs");
    const size_t cat = static_cast<size_t>(8) * 16 * 16;
    DitPass pass;
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> ycat(cat), c(static_cast<size_t>(cfg.width));
        for (auto& v : ycat) v = rng.gaussian();
        for (auto& v : c) v = rng.gaussian();
        int t = 1 + rng.uniform_int(1000);
        model.forward(pass, ycat.data(), c.data(), &t, 1, nullptr);
        for (double v : pass.eps) worst = std::max(worst, std::abs(v));
        std::vector<MaskSpec> specs{make_mask(cfg.tokens(), 0.3, rng)};
        model.forward(pass, ycat.data(), c.data(), &t, 1, &specs);
        for (double v : pass.eps) worst = std::max(worst, std::abs(v));
    }
    if (worst >= 1e-12) return bad("max |eps_pred| at init = " + fmt(worst, 3));

    // ratio-0 masked pass vs full pass, bit for bit, off the zero init
    Rng scramble = Rng::child(5, "acceptance.scramble");
    for (const auto& ti : ps.tensors()) {
        if (ti.name == "dit.side.proj.w" || ti.name == "dit.side.proj.b") continue;
        ps.init_normal(ps.find(ti.name), scramble, 0.05);
    }
    std::vector<double> ycat(cat), c(static_cast<size_t>(cfg.width));
    for (auto& v : ycat) v = scramble.gaussian();
    for (auto& v : c) v = scramble.gaussian();
    int t = 321;
    DitPass full, masked;
    model.forward(full, ycat.data(), c.data(), &t, 1, nullptr);
    Rng zero(0);
    std::vector<MaskSpec> specs{make_mask(cfg.tokens(), 0.0, zero)};
    model.forward(masked, ycat.data(), c.data(), &t, 1, &specs);
    for (size_t i = 0; i < full.eps.size(); ++i)
        if (full.eps[i] != masked.eps[i]) return bad("ratio-0 mismatch at element " + std::to_string(i));
    return ok("max |eps_pred| = " + fmt(worst, 3) + " over 10 inputs; ratio-0 bit-exact");
}

// ---- 5: gradient check on the tiny config ---------------------------------
Outcome criterion_gradient_check() {
    SynthParams sp;
    sp.image_size = 16;
    sp.downsample = 4;
    std::vector<SceneSample> scenes;
    for (int i = 0; i < 4; ++i) {
        SceneSample s = generate_scene(5000 + i, sp);
        s.scene_id = "g" + std::to_string(i);
        scenes.push_back(std::move(s));
    }
    fs::path dir = g_work / "gradcheck_data";
    write_dataset(scenes, dir, sp.image_size, sp.downsample);
    Dataset data = load_dataset(dir);

    TrainConfig cfg;
    cfg.batch = 2;
    cfg.T = 50;
    cfg.seed = 5;
    cfg.mask_ratio = 0.25;
    cfg.eta_dropout = 0.1;
    cfg.lambda_mask = 1.0;
    cfg.model.n_enc = 1;
    cfg.model.n_dec = 1;
    cfg.model.width = 16;
    cfg.model.heads = 2;
    cfg.model.t_freq = 16;
    cfg.extractor.patch = 8;
    cfg.extractor.width = 8;
    cfg.extractor.heads = 2;
    Trainer tr(cfg, data);

    // move off the zero init so every parameter participates
    Rng scramble = Rng::child(6, "acceptance.grad");
    for (const auto& ti : tr.params().tensors())
        tr.params().init_normal(tr.params().find(ti.name), scramble, 0.08);

    StepDraws draws = tr.draw_step();
    Batch batch = tr.assemble(draws.sample_idx);
    tr.compute_joint_loss(batch, draws, true);
    std::vector<double> analytic = tr.params().grads();

    auto loss = [&]() { return tr.compute_joint_loss(batch, draws, false).join; };
    auto& vals = tr.params().values();
    Rng pick = Rng::child(7, "acceptance.pick");
    const double h = 1e-5;
    int checked = 0;
    double worst_rel = 0.0;
    while (checked < 100) {
        size_t i = static_cast<size_t>(pick.uniform_int(static_cast<int>(vals.size())));
        double keep = vals[i];
        vals[i] = keep + h;
        double fp = loss();
        vals[i] = keep - h;
        double fm = loss();
        vals[i] = keep;
        double want = (fp - fm) / (2 * h);
        double got = analytic[i];
        if (std::abs(want) < 1e-12 && std::abs(got) < 1e-12) continue;
        double rel = std::abs(want - got) / std::max({std::abs(want), std::abs(got), 1e-8});
        worst_rel = std::max(worst_rel, rel);
        ++checked;
    }
    if (worst_rel >= 1e-4) return bad("worst relative error " + fmt(worst_rel, 3));
    return ok("100 parameters, worst relative error " + fmt(worst_rel, 3));
}

// ---- 6: analytic parameter count ------------------------------------------
Outcome criterion_param_count() {
    ModelConfig paper;
    paper.n_enc = 22;
    paper.n_dec = 2;
    paper.width = 1024;
    paper.heads = 16;
    paper.latent_h = paper.latent_w = 64;
    ParamCount pc = count_params(paper);
    double rel = std::abs(pc.core() - 458.0e6) / 458.0e6;
    if (rel >= 0.05) return bad("paper-scale core off by " + fmt(100 * rel, 3) + "%");

    ModelConfig tiny;
    tiny.n_enc = 1;
    tiny.n_dec = 1;
    tiny.width = 16;
    tiny.heads = 2;
    tiny.latent_h = tiny.latent_w = 4;
    tiny.t_freq = 16;
    ParamStore ps;
    DitModel model(tiny, ps);
    ps.finalize();
    if (count_params(tiny).total() != static_cast<long long>(model.param_count()))
        return bad("tiny-config count mismatches the weight enumeration");
    return ok("core " + fmt(pc.core() / 1e6, 4) + "M vs 458.0M (" + fmt(100 * rel, 2) +
              "%); tiny config exact");
}

// ---- 7: sampler determinism and the closed-form step ----------------------
Outcome criterion_sampler_determinism() {
    ModelConfig cfg;
    ParamStore ps;
    DitModel model(cfg, ps);
    ps.finalize();
    Rng init = Rng::child(8, "acceptance.sampler");
    model.init_weights(init);

    NoiseSchedule noise = make_linear_schedule(1000);
    // zero-predictor single step against the closed form
    SamplerSchedule one = make_sampler_schedule(1000, 1, 2.0, 0.01);
    LatentTensor hint(16, 16);
    CompactCondition c(static_cast<size_t>(cfg.width), 0.2);
    DitPass pass;
    LatentTensor y0 = ddim_sample(model, pass, hint, c, one, noise, 99);
    Rng replay = Rng::child(99, "ddim");
    double worst = 0.0;
    const double scale = 1.0 / std::sqrt(noise.alpha_bar[1000]);
    for (double& v : y0.data) {
        double yT = replay.gaussian();
        worst = std::max(worst, std::abs(v - scale * yT));
    }
    if (worst >= 1e-9) return bad("closed-form deviation " + fmt(worst, 3));

    // bit-identical reruns with trained-looking weights
    Rng scramble = Rng::child(9, "acceptance.sampler2");
    for (const auto& ti : ps.tensors()) ps.init_normal(ps.find(ti.name), scramble, 0.05);
    for (auto& v : hint.data) v = scramble.gaussian();
    for (auto& v : c) v = scramble.gaussian();
    SamplerSchedule sched = make_sampler_schedule(1000, 50, 2.0, 0.01);
    LatentTensor a = ddim_sample(model, pass, hint, c, sched, noise, 1234);
    LatentTensor b = ddim_sample(model, pass, hint, c, sched, noise, 1234);
    if (a.data != b.data) return bad("two runs with one seed differ");
    return ok("closed-form deviation " + fmt(worst, 3) + "; 50-step rerun bit-identical");
}

// ---- 8: dropout statistics -------------------------------------------------
Outcome criterion_dropout() {
    Rng rng = Rng::child(10, "acceptance.dropout");
    CompactCondition c(16, 1.0);
    int zeroed = 0;
    for (int i = 0; i < 10000; ++i)
        if (drop_condition(c, 0.1, rng)[0] == 0.0) ++zeroed;
    double frac = zeroed / 10000.0;
    if (frac <= 0.085 || frac >= 0.115) return bad("zeroed fraction " + fmt(frac, 4));
    return ok("zeroed fraction " + fmt(frac, 4) + " in [0.085, 0.115]");
}

// ---- 9: end-to-end desk run ------------------------------------------------
struct E2EPaths {
    fs::path train_data, eval_data, views_data, ckpt0, ckpt_final, loss_csv;
};

E2EPaths e2e_paths() {
    E2EPaths p;
    p.train_data = g_work / "train_data";
    p.eval_data = g_work / "eval_data";
    p.views_data = g_work / "views_data";
    p.ckpt0 = g_work / "checkpoint_step0.bin";
    p.ckpt_final = g_work / "checkpoint_final.bin";
    p.loss_csv = g_work / "loss.csv";
    return p;
}

void make_scenes(const fs::path& dir, int n, uint64_t seed, int views) {
    if (fs::exists(dir / "manifest.json")) return; // reuse across runs
    SynthParams p;
    Rng master = Rng::child(seed, "acceptance.data");
    std::vector<SceneSample> samples;
    for (int i = 0; i < n; ++i) {
        uint64_t scene_seed = master.next_u64();
        uint64_t view_seed = master.next_u64();
        SceneSample base = generate_scene(scene_seed, p);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "scene%05d", i);
        if (views == 1) {
            base.scene_id = buf;
            base.view_group = i;
            samples.push_back(std::move(base));
        } else {
            auto vs = generate_views(base, views, view_seed, p);
            for (int v = 0; v < views; ++v) {
                SceneSample s = base;
                s.scene_id = std::string(buf) + "_v" + std::to_string(v);
                s.source_image = vs[static_cast<size_t>(v)];
                s.view_id = v;
                s.view_group = i;
                samples.push_back(std::move(s));
            }
        }
    }
    write_dataset(samples, dir, p.image_size, p.downsample);
}

TrainConfig desk_config() {
    TrainConfig cfg; // the defaults are the pinned desk-scale settings
    cfg.seed = 11;
    return cfg;
}

struct EvalStats {
    double outside_box_psnr = 0.0;
    double l1 = 0.0;
    double hist_nats = 0.0;
};

EvalStats evaluate_checkpoint(const fs::path& ckpt, const Dataset& eval_data, uint64_t seed) {
    ModelBundle bundle = load_bundle(ckpt, /*use_ema=*/true);
    SamplerSchedule sched = make_sampler_schedule(bundle.cfg.T, 50, 2.0, 0.01);
    Rng master = Rng::child(seed, "acceptance.eval");
    DitPass pass;
    EvalStats st;
    std::vector<ImageTensor> generated, reference;
    for (int i = 0; i < eval_data.size(); ++i) {
        SceneSample s = eval_data.load(i);
        LatentTensor hint = bundle.codec.encode(s.hint_image);
        CompactCondition c = bundle.ccnet->condition_for(s, bundle.codec, *bundle.extractor);
        LatentTensor y0 =
            ddim_sample(*bundle.dit, pass, hint, c, sched, bundle.noise, master.next_u64());
        ImageTensor img = bundle.codec.decode(y0);
        for (auto& v : img.data) v = std::clamp(v, -1.0, 1.0);
        st.outside_box_psnr += psnr_outside_box(img, s.hint_image, s.box);
        st.l1 += l1_metric(img, s.target_image);
        generated.push_back(std::move(img));
        reference.push_back(s.target_image);
    }
    st.outside_box_psnr /= eval_data.size();
    st.l1 /= eval_data.size();
    st.hist_nats = histogram_divergence(generated, reference).nats;
    return st;
}

Outcome criterion_end_to_end() {
    E2EPaths paths = e2e_paths();
    make_scenes(paths.train_data, 1000, 100, 1);
    make_scenes(paths.eval_data, 32, 200, 1);
    make_scenes(paths.views_data, 20, 300, 4);

    Dataset train_data = load_dataset(paths.train_data);
    Trainer tr(desk_config(), train_data);
    tr.save_checkpoint(paths.ckpt0);

    std::ofstream csv(paths.loss_csv);
    csv << "step,L_join,L_denoising,L_denoising_mask\n";
    auto t0 = std::chrono::steady_clock::now();
    while (tr.step() < tr.config().steps) {
        LossTriple l = tr.train_step();
        csv << tr.step() << "," << l.join << "," << l.denoising << "," << l.denoising_mask
            << "\n";
        if (tr.step() % 100 == 0) {
            double dt =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::cerr << "  [e2e] step " << tr.step() << "/" << tr.config().steps << " L_join "
                      << fmt(l.join, 4) << " (" << fmt(dt / tr.step(), 3) << " s/step)\n";
            csv.flush();
        }
    }
    tr.save_checkpoint(paths.ckpt_final);

    // (a) smoothed loss: mean of the last 200 steps vs mean of steps 1..200
    const auto& hist = tr.history();
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 200; ++i) early += hist[static_cast<size_t>(i)].join;
    for (size_t i = hist.size() - 200; i < hist.size(); ++i) late += hist[i].join;
    early /= 200.0;
    late /= 200.0;
    bool pass_a = late < 0.6 * early;

    Dataset eval_data = load_dataset(paths.eval_data);
    EvalStats final_st = evaluate_checkpoint(paths.ckpt_final, eval_data, 400);
    EvalStats init_st = evaluate_checkpoint(paths.ckpt0, eval_data, 400);

    bool pass_b = final_st.outside_box_psnr > 20.0;
    bool pass_c = final_st.l1 <= 0.6 * init_st.l1;
    bool pass_d = final_st.hist_nats < init_st.hist_nats;

    std::string detail = "loss " + fmt(early, 4) + "->" + fmt(late, 4) + " (ratio " +
                         fmt(late / early, 3) + "); outside-box " +
                         fmt(final_st.outside_box_psnr, 4) + " dB; L1 " + fmt(init_st.l1, 4) +
                         "->" + fmt(final_st.l1, 4) + "; hist " + fmt(init_st.hist_nats, 4) +
                         "->" + fmt(final_st.hist_nats, 4);
    if (!(pass_a && pass_b && pass_c && pass_d)) {
        std::string fails;
        if (!pass_a) fails += " (a)";
        if (!pass_b) fails += " (b)";
        if (!pass_c) fails += " (c)";
        if (!pass_d) fails += " (d)";
        return bad("failed" + fails + ": " + detail);
    }
    return ok(detail);
}

// ---- 10: alignment trend ----------------------------------------------------
Outcome criterion_alignment() {
    E2EPaths paths = e2e_paths();
    if (!fs::exists(paths.ckpt_final) || !fs::exists(paths.ckpt0))
        return bad("end-to-end artifacts missing; run criterion 9 first");
    Dataset views = load_dataset(paths.views_data);
    auto groups = views.view_groups();
    if (groups.size() != 20) return bad("expected 20 view groups");

    ModelBundle final_b = load_bundle(paths.ckpt_final, true);
    ModelBundle init_b = load_bundle(paths.ckpt0, true);
    AlignmentResult trained = cross_view_alignment(*final_b.ccnet, final_b.codec,
                                                   *final_b.extractor, views, groups);
    AlignmentResult untrained =
        cross_view_alignment(*init_b.ccnet, init_b.codec, *init_b.extractor, views, groups);

    write_similarity_plot(g_work / "alignment_trained.png", trained);
    write_similarity_plot(g_work / "alignment_untrained.png", untrained);

    double margin = trained.within - trained.between;
    bool pass_margin = margin > 0.05;
    bool pass_trend = trained.within > untrained.within;
    std::string detail = "within " + fmt(trained.within, 4) + ", between " +
                         fmt(trained.between, 4) + ", margin " + fmt(margin, 4) +
                         "; untrained within " + fmt(untrained.within, 4);
    if (!(pass_margin && pass_trend)) {
        std::string fails;
        if (!pass_margin) fails += " (margin <= 0.05)";
        if (!pass_trend) fails += " (no gain over untrained)";
        return bad("failed" + fails + ": " + detail);
    }
    return ok(detail);
}

// ---- 11: data invariants -----------------------------------------------------
Outcome criterion_data_invariants() {
    SynthParams p;
    Rng master = Rng::child(12, "acceptance.datainv");
    for (int i = 0; i < 1000; ++i) {
        SceneSample s = generate_scene(master.next_u64(), p);
        s.box.validate(p.image_size, p.downsample);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < p.image_size; ++y)
                for (int x = 0; x < p.image_size; ++x) {
                    if (s.box.contains(x, y)) {
                        if (s.hint_image.at(c, y, x) != 0.0)
                            return bad("scene " + std::to_string(i) + ": hint not zero in box");
                    } else if (s.hint_image.at(c, y, x) != s.target_image.at(c, y, x)) {
                        return bad("scene " + std::to_string(i) + ": hint != target outside box");
                    }
                }
    }
    return ok("1000 scenes: hint/target equality, zero box interior, grid alignment");
}

} // namespace

int main(int argc, char** argv) {
    std::vector<int> only;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
            std::istringstream in(argv[++i]);
            std::string tok;
            while (std::getline(in, tok, ',')) only.push_back(std::stoi(tok));
        } else if (std::strcmp(argv[i], "--workdir") == 0 && i + 1 < argc) {
            g_work = argv[++i];
        }
    }
    fs::create_directories(g_work);

    struct Entry {
        int id;
        const char* name;
        std::function<Outcome()> fn;
    };
    std::vector<Entry> entries{
        {1, "cfg-schedule", criterion_cfg_schedule},
        {2, "ccnet-arithmetic", criterion_ccnet_arithmetic},
        {3, "mask-bookkeeping", criterion_mask},
        {4, "identity-at-init", criterion_identity_at_init},
        {5, "gradient-check", criterion_gradient_check},
        {6, "parameter-count", criterion_param_count},
        {7, "sampler-determinism", criterion_sampler_determinism},
        {8, "dropout-statistics", criterion_dropout},
        {9, "end-to-end-desk-run", criterion_end_to_end},
        {10, "alignment-trend", criterion_alignment},
        {11, "data-invariants", criterion_data_invariants},
    };

    int failures = 0;
    for (const auto& e : entries) {
        if (!only.empty() && std::find(only.begin(), only.end(), e.id) == only.end()) continue;
        auto t0 = std::chrono::steady_clock::now();
        Outcome r;
        try {
            r = e.fn();
        } catch (const std::exception& ex) {
            r = bad(std::string("exception: ") + ex.what());
        }
        double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %2d %-22s [%8.2fs] %s\n", r.pass ? "PASS" : "FAIL", e.id, e.name, dt,
                    r.detail.c_str());
        std::fflush(stdout);
        if (!r.pass) ++failures;
    }
    return failures;
}
