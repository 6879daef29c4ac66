// mdtbox: synthetic box-conditioned object customization with a masked
// diffusion transformer, trained and sampled entirely on the CPU.
//
// Subcommands: synth-data, fit-codec, train, sample, eval, profile.
// Errors print a single line `error <category>: message` and exit 1;
// usage problems exit 2. All randomness derives from --seed.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>

#include "mdtbox/metrics.hpp"
#include "mdtbox/sampler.hpp"
#include "mdtbox/train.hpp"

using namespace mdtbox;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void write_resolved(const fs::path& dir, const std::string& command, const KvConfig& kv) {
    KvConfig out = kv;
    out["command"] = command;
    std::error_code ec;
    fs::create_directories(dir, ec);
    write_kv_file(dir / "resolved.cfg", out);
}

ImageTensor clamp_image(ImageTensor img) {
    for (auto& v : img.data) v = std::clamp(v, -1.0, 1.0);
    return img;
}

struct SynthArgs {
    std::string out;
    int num = 100;
    int image_size = 64;
    int f = 4;
    uint64_t seed = 0;
    int views = 1;
};

int run_synth(const SynthArgs& a) {
    SynthParams p;
    p.image_size = a.image_size;
    p.downsample = a.f;
    p.validate();
    if (a.num <= 0) throw ParameterError("--num must be positive");
    if (a.views < 1) throw ParameterError("--views must be >= 1");

    Rng master = Rng::child(a.seed, "synth-data");
    std::vector<SceneSample> samples;
    samples.reserve(static_cast<size_t>(a.num) * a.views);
    for (int i = 0; i < a.num; ++i) {
        uint64_t scene_seed = master.next_u64();
        uint64_t view_seed = master.next_u64();
        SceneSample base = generate_scene(scene_seed, p);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "scene%05d", i);
        if (a.views == 1) {
            base.scene_id = buf;
            base.view_group = i;
            samples.push_back(std::move(base));
        } else {
            auto views = generate_views(base, a.views, view_seed, p);
            for (int v = 0; v < a.views; ++v) {
                SceneSample s = base;
                s.scene_id = std::string(buf) + "_v" + std::to_string(v);
                s.source_image = views[static_cast<size_t>(v)];
                s.view_id = v;
                s.view_group = i;
                samples.push_back(std::move(s));
            }
        }
    }
    write_dataset(samples, a.out, p.image_size, p.downsample);
    KvConfig kv{{"out", a.out},
                {"num", std::to_string(a.num)},
                {"image_size", std::to_string(a.image_size)},
                {"f", std::to_string(a.f)},
                {"seed", std::to_string(a.seed)},
                {"views", std::to_string(a.views)}};
    write_resolved(a.out, "synth-data", kv);
    std::cerr << "wrote " << samples.size() << " samples to " << a.out << "\n";
    return 0;
}

struct FitCodecArgs {
    std::string data, mode = "learned", out;
    uint64_t seed = 0;
    int steps = 4000, hidden = 32, batch = 8, f = 4;
    double lr = 2e-3;
};

int run_fit_codec(const FitCodecArgs& a) {
    Dataset data = load_dataset(a.data);
    CodecConfig cfg;
    cfg.f = a.f;
    cfg.seed = a.seed;
    cfg.hidden = a.hidden;
    cfg.steps = a.steps;
    cfg.batch = a.batch;
    cfg.lr = a.lr;

    fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    if (a.mode == "block") {
        cfg.mode = CodecMode::block;
        CodecModel codec = CodecModel::make_block(cfg);
        codec.set_scale(compute_latent_scale(codec, data));
        codec.save(out);
        std::cerr << "block codec written to " << a.out << " (scale " << codec.scale() << ")\n";
    } else if (a.mode == "learned") {
        cfg.mode = CodecMode::learned;
        CodecFitResult fit = fit_codec(data, cfg, a.seed);
        fit.model.save(out);
        std::ofstream csv(out.string() + ".loss.csv");
        csv << "step,loss\n";
        for (size_t i = 0; i < fit.loss_history.size(); ++i)
            csv << i << "," << fit.loss_history[i] << "\n";
        std::cerr << "learned codec written to " << a.out << " (final loss "
                  << (fit.loss_history.empty() ? 0.0 : fit.loss_history.back()) << ")\n";
    } else {
        throw ParameterError("--mode must be learned or block");
    }
    KvConfig kv{{"data", a.data},          {"mode", a.mode},
                {"out", a.out},            {"seed", std::to_string(a.seed)},
                {"steps", std::to_string(a.steps)}, {"hidden", std::to_string(a.hidden)},
                {"batch", std::to_string(a.batch)}, {"f", std::to_string(a.f)}};
    write_resolved(out.has_parent_path() ? out.parent_path() : fs::path("."), "fit-codec", kv);
    return 0;
}

struct TrainArgs {
    std::string config, data, out, resume;
    int64_t seed = -1;
    int steps = -1;
    int save_every = 1000;
    int log_every = 50;
};

int run_train(const TrainArgs& a) {
    TrainConfig cfg = train_config_from_kv(parse_kv_file(a.config));
    if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
    if (a.steps >= 0) cfg.steps = a.steps;

    Dataset data = load_dataset(a.data);
    Trainer tr(cfg, data);

    fs::create_directories(a.out);
    write_resolved(a.out, "train", train_config_to_kv(tr.config()));

    fs::path loss_csv = fs::path(a.out) / "loss.csv";
    bool fresh = true;
    if (!a.resume.empty()) {
        tr.restore(a.resume);
        fresh = false;
        std::cerr << "resumed from " << a.resume << " at step " << tr.step() << "\n";
    }
    std::ofstream csv(loss_csv, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw IoError("cannot open " + loss_csv.string());
    if (fresh) csv << "step,L_join,L_denoising,L_denoising_mask\n";

    if (fresh) tr.save_checkpoint(fs::path(a.out) / "checkpoint_step0.bin");

    auto t0 = std::chrono::steady_clock::now();
    while (tr.step() < tr.config().steps) {
        LossTriple l = tr.train_step();
        csv << tr.step() << "," << l.join << "," << l.denoising << "," << l.denoising_mask
            << "\n";
        if (tr.step() % a.log_every == 0 || tr.step() == tr.config().steps) {
            double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                            .count();
            std::cerr << "step " << tr.step() << "/" << tr.config().steps << "  L_join "
                      << l.join << "  (" << dt / tr.step() << " s/step)\n";
            csv.flush();
        }
        if (a.save_every > 0 && tr.step() % a.save_every == 0)
            tr.save_checkpoint(fs::path(a.out) / "checkpoint.bin");
    }
    tr.save_checkpoint(fs::path(a.out) / "checkpoint.bin");
    std::cerr << "final checkpoint: " << (fs::path(a.out) / "checkpoint.bin").string() << "\n";
    return 0;
}

std::vector<int> resolve_ids(const Dataset& data, const std::string& ids) {
    std::vector<int> out;
    std::string token;
    std::istringstream in(ids);
    while (std::getline(in, token, ',')) {
        if (token.empty()) continue;
        int idx = data.find(token);
        if (idx < 0) {
            try {
                size_t pos = 0;
                idx = std::stoi(token, &pos);
                if (pos != token.size()) idx = -1;
            } catch (...) {
                idx = -1;
            }
        }
        if (idx < 0 || idx >= data.size())
            throw DataError("unknown sample id '" + token + "'");
        out.push_back(idx);
    }
    if (out.empty()) throw ParameterError("--ids resolved to an empty list");
    return out;
}

struct SampleArgs {
    std::string ckpt, data, ids, out, weights = "ema";
    int steps = 50;
    double beta = 2.0, gamma = 0.01;
    uint64_t seed = 0;
};

int run_sample(const SampleArgs& a) {
    ModelBundle bundle = load_bundle(a.ckpt, a.weights == "ema");
    Dataset data = load_dataset(a.data);
    std::vector<int> ids = resolve_ids(data, a.ids);
    SamplerSchedule sched = make_sampler_schedule(bundle.cfg.T, a.steps, a.beta, a.gamma);

    fs::create_directories(a.out);
    Rng master = Rng::child(a.seed, "sample");
    DitPass pass;
    json meta = json::array();
    for (int idx : ids) {
        SceneSample s = data.load(idx);
        auto t0 = std::chrono::steady_clock::now();
        LatentTensor hint = bundle.codec.encode(s.hint_image);
        CompactCondition c = bundle.ccnet->condition_for(s, bundle.codec, *bundle.extractor);
        uint64_t sample_seed = master.next_u64();
        LatentTensor y0 = ddim_sample(*bundle.dit, pass, hint, c, sched, bundle.noise,
                                      sample_seed);
        ImageTensor img = clamp_image(bundle.codec.decode(y0));
        double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                          .count();
        std::string name = s.scene_id + "_sample.png";
        png_write_rgb8(fs::path(a.out) / name, img);
        meta.push_back(json{{"scene_id", s.scene_id},
                            {"output", name},
                            {"seed", sample_seed},
                            {"steps", a.steps},
                            {"beta", a.beta},
                            {"gamma", a.gamma},
                            {"weights", a.weights},
                            {"wall_seconds", wall}});
        std::cerr << "sampled " << s.scene_id << " in " << wall << " s\n";
    }
    std::ofstream jf(fs::path(a.out) / "samples.json");
    jf << meta.dump(2) << "\n";
    KvConfig kv{{"ckpt", a.ckpt},   {"data", a.data},
                {"ids", a.ids},     {"steps", std::to_string(a.steps)},
                {"beta", std::to_string(a.beta)}, {"gamma", std::to_string(a.gamma)},
                {"seed", std::to_string(a.seed)}, {"weights", a.weights}};
    write_resolved(a.out, "sample", kv);
    return 0;
}

struct EvalArgs {
    std::string ckpt, data, out, weights = "ema";
    int steps = 50;
    double beta = 2.0, gamma = 0.01;
    uint64_t seed = 0;
    int max_scenes = 32;
};

int run_eval(const EvalArgs& a) {
    ModelBundle bundle = load_bundle(a.ckpt, a.weights == "ema");
    Dataset data = load_dataset(a.data);
    const int n = std::min(a.max_scenes, data.size());
    if (n == 0) throw DataError("evaluation dataset is empty");
    SamplerSchedule sched = make_sampler_schedule(bundle.cfg.T, a.steps, a.beta, a.gamma);

    fs::create_directories(fs::path(a.out) / "samples");
    Rng master = Rng::child(a.seed, "eval");
    DitPass pass;

    json per_sample = json::array();
    std::vector<ImageTensor> generated, reference;
    double m_psnr = 0, m_ssim = 0, m_l1 = 0, m_obox = 0;
    std::ofstream csv(fs::path(a.out) / "report.csv");
    csv << "scene_id,psnr,ssim,l1,outside_box_psnr\n";
    for (int i = 0; i < n; ++i) {
        SceneSample s = data.load(i);
        LatentTensor hint = bundle.codec.encode(s.hint_image);
        CompactCondition c = bundle.ccnet->condition_for(s, bundle.codec, *bundle.extractor);
        LatentTensor y0 = ddim_sample(*bundle.dit, pass, hint, c, sched, bundle.noise,
                                      master.next_u64());
        ImageTensor img = clamp_image(bundle.codec.decode(y0));
        png_write_rgb8(fs::path(a.out) / "samples" / (s.scene_id + ".png"), img);

        double v_psnr = psnr(img, s.target_image);
        double v_ssim = ssim(img, s.target_image);
        double v_l1 = l1_metric(img, s.target_image);
        double v_obox = psnr_outside_box(img, s.hint_image, s.box);
        m_psnr += v_psnr;
        m_ssim += v_ssim;
        m_l1 += v_l1;
        m_obox += v_obox;
        per_sample.push_back(json{{"scene_id", s.scene_id},
                                  {"psnr", v_psnr},
                                  {"ssim", v_ssim},
                                  {"l1", v_l1},
                                  {"outside_box_psnr", v_obox}});
        csv << s.scene_id << "," << v_psnr << "," << v_ssim << "," << v_l1 << "," << v_obox
            << "\n";
        generated.push_back(std::move(img));
        reference.push_back(s.target_image);
        std::cerr << "evaluated " << s.scene_id << " (" << i + 1 << "/" << n << ")\n";
    }
    HistogramDivergence hist = histogram_divergence(generated, reference);
    write_histogram_csv(fs::path(a.out) / "histogram.csv", hist);
    write_histogram_plot(fs::path(a.out) / "histogram.png", hist);

    json report{{"checkpoint", a.ckpt},
                {"step", bundle.step},
                {"weights", a.weights},
                {"n_scenes", n},
                {"ddim_steps", a.steps},
                {"beta", a.beta},
                {"gamma", a.gamma},
                {"seed", a.seed},
                {"aggregate",
                 {{"psnr", m_psnr / n},
                  {"ssim", m_ssim / n},
                  {"l1", m_l1 / n},
                  {"outside_box_psnr", m_obox / n},
                  {"histogram_divergence_nats", hist.nats}}},
                {"per_sample", per_sample}};

    auto groups = data.view_groups();
    if (groups.size() >= 2) {
        AlignmentResult align =
            cross_view_alignment(*bundle.ccnet, bundle.codec, *bundle.extractor, data, groups);
        write_similarity_plot(fs::path(a.out) / "similarity.png", align);
        report["alignment"] = json{{"within", align.within},
                                   {"between", align.between},
                                   {"excluded", align.excluded},
                                   {"vectors", align.n}};
    }
    std::ofstream jf(fs::path(a.out) / "report.json");
    jf << report.dump(2) << "\n";
    std::cout << report["aggregate"].dump(2) << "\n";

    KvConfig kv{{"ckpt", a.ckpt},   {"data", a.data},   {"out", a.out},
                {"weights", a.weights}, {"steps", std::to_string(a.steps)},
                {"beta", std::to_string(a.beta)},       {"gamma", std::to_string(a.gamma)},
                {"seed", std::to_string(a.seed)},       {"max_scenes", std::to_string(a.max_scenes)}};
    write_resolved(a.out, "eval", kv);
    return 0;
}

struct ProfileArgs {
    std::string ckpt, data;
    int runs = 10;
    int steps = 50;
    uint64_t seed = 0;
};

int run_profile(const ProfileArgs& a) {
    ModelBundle bundle = load_bundle(a.ckpt, true);
    SceneSample sample;
    if (!a.data.empty()) {
        sample = load_dataset(a.data).load(0);
    } else {
        SynthParams p;
        p.image_size = bundle.cfg.model.latent_h * bundle.codec.downsample();
        p.downsample = bundle.codec.downsample();
        sample = generate_scene(a.seed, p);
    }
    ProfileResult r = profile_run(bundle, sample, a.runs, a.steps);
    json out{{"param_count", r.param_count},
             {"ccnet_param_count", r.ccnet_param_count},
             {"runs", r.runs},
             {"ddim_steps", r.ddim_steps},
             {"mean_seconds", r.mean_seconds},
             {"std_seconds", r.std_seconds},
             {"forward_pair_seconds", r.forward_pair_seconds},
             {"peak_rss_kb", r.peak_rss_kb}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"box-conditioned object customization with a masked diffusion transformer"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth-data", "generate a synthetic scene dataset");
    synth->add_option("--out", sa.out, "output directory")->required();
    synth->add_option("--num", sa.num, "number of scenes");
    synth->add_option("--image-size", sa.image_size, "square image size");
    synth->add_option("--f", sa.f, "codec downsample factor");
    synth->add_option("--seed", sa.seed, "master seed");
    synth->add_option("--views", sa.views, "source views per scene");

    FitCodecArgs fa;
    auto* fit = app.add_subcommand("fit-codec", "fit or construct the latent codec");
    fit->add_option("--data", fa.data, "dataset directory")->required();
    fit->add_option("--mode", fa.mode, "learned|block");
    fit->add_option("--out", fa.out, "checkpoint path")->required();
    fit->add_option("--seed", fa.seed, "seed");
    fit->add_option("--steps", fa.steps, "training steps (learned)");
    fit->add_option("--hidden", fa.hidden, "hidden channels (learned)");
    fit->add_option("--batch", fa.batch, "batch size (learned)");
    fit->add_option("--f", fa.f, "downsample factor");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "train the diffusion model");
    train->add_option("--config", ta.config, "key=value config file")->required();
    train->add_option("--data", ta.data, "dataset directory")->required();
    train->add_option("--out", ta.out, "output directory")->required();
    train->add_option("--resume", ta.resume, "checkpoint to resume from");
    train->add_option("--seed", ta.seed, "override config seed");
    train->add_option("--steps", ta.steps, "override config steps");
    train->add_option("--save-every", ta.save_every, "checkpoint interval");
    train->add_option("--log-every", ta.log_every, "log interval");

    SampleArgs pa;
    auto* sample = app.add_subcommand("sample", "DDIM sampling with dynamic guidance");
    sample->add_option("--ckpt", pa.ckpt, "training checkpoint")->required();
    sample->add_option("--data", pa.data, "dataset directory")->required();
    sample->add_option("--ids", pa.ids, "comma-separated scene ids or indices")->required();
    sample->add_option("--steps", pa.steps, "DDIM steps");
    sample->add_option("--beta", pa.beta, "max guidance weight");
    sample->add_option("--gamma", pa.gamma, "power-cosine exponent");
    sample->add_option("--seed", pa.seed, "sampling seed");
    sample->add_option("--out", pa.out, "output directory")->required();
    sample->add_option("--weights", pa.weights, "ema|raw");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "sample and score against ground truth");
    eval->add_option("--ckpt", ea.ckpt, "training checkpoint")->required();
    eval->add_option("--data", ea.data, "dataset directory")->required();
    eval->add_option("--out", ea.out, "output directory")->required();
    eval->add_option("--weights", ea.weights, "ema|raw");
    eval->add_option("--steps", ea.steps, "DDIM steps");
    eval->add_option("--beta", ea.beta, "max guidance weight");
    eval->add_option("--gamma", ea.gamma, "power-cosine exponent");
    eval->add_option("--seed", ea.seed, "sampling seed");
    eval->add_option("--max-scenes", ea.max_scenes, "number of scenes to evaluate");

    ProfileArgs ra;
    auto* prof = app.add_subcommand("profile", "parameter count and sampling wall time");
    prof->add_option("--ckpt", ra.ckpt, "training checkpoint")->required();
    prof->add_option("--runs", ra.runs, "timed sampler invocations");
    prof->add_option("--steps", ra.steps, "DDIM steps");
    prof->add_option("--data", ra.data, "dataset for the probe scene");
    prof->add_option("--seed", ra.seed, "seed for the synthetic probe scene");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error usage: " << e.what() << "\n";
        return 2;
    }

    try {
        if (synth->parsed()) return run_synth(sa);
        if (fit->parsed()) return run_fit_codec(fa);
        if (train->parsed()) return run_train(ta);
        if (sample->parsed()) return run_sample(pa);
        if (eval->parsed()) return run_eval(ea);
        if (prof->parsed()) return run_profile(ra);
    } catch (const Error& e) {
        std::cerr << "error " << e.category() << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
