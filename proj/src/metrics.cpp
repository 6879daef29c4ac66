#include "mdtbox/metrics.hpp"

#include <sys/resource.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mdtbox/sampler.hpp"

namespace mdtbox {

namespace {

inline double to_unit(double v) { return (v + 1.0) * 0.5; }

double mse_unit(const ImageTensor& a, const ImageTensor& b, const Box* outside_of) {
    if (!a.same_shape(b)) throw ShapeError("metric inputs differ in shape");
    double acc = 0.0;
    size_t count = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < a.size; ++y)
            for (int x = 0; x < a.size; ++x) {
                if (outside_of && outside_of->contains(x, y)) continue;
                double d = to_unit(a.at(c, y, x)) - to_unit(b.at(c, y, x));
                acc += d * d;
                ++count;
            }
    if (count == 0) throw DataError("metric region is empty");
    return acc / static_cast<double>(count);
}

double psnr_from_mse(double mse) {
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(1.0 / mse);
}

} // namespace

double psnr(const ImageTensor& a, const ImageTensor& b) {
    return psnr_from_mse(mse_unit(a, b, nullptr));
}

double psnr_outside_box(const ImageTensor& a, const ImageTensor& b, const Box& box) {
    return psnr_from_mse(mse_unit(a, b, &box));
}

double l1_metric(const ImageTensor& a, const ImageTensor& b) {
    if (!a.same_shape(b)) throw ShapeError("metric inputs differ in shape");
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
        acc += std::abs(to_unit(a.data[i]) - to_unit(b.data[i]));
    return acc / static_cast<double>(a.data.size());
}

double ssim(const ImageTensor& a, const ImageTensor& b) {
    if (!a.same_shape(b)) throw ShapeError("metric inputs differ in shape");
    constexpr int W = 11, R = W / 2;
    constexpr double sigma = 1.5;
    constexpr double K1 = 0.01, K2 = 0.03, Lrange = 1.0;
    const double C1 = (K1 * Lrange) * (K1 * Lrange);
    const double C2 = (K2 * Lrange) * (K2 * Lrange);
    if (a.size < W) throw ShapeError("image smaller than the SSIM window");

    double kernel[W][W];
    double ksum = 0.0;
    for (int i = 0; i < W; ++i)
        for (int j = 0; j < W; ++j) {
            double dy = i - R, dx = j - R;
            kernel[i][j] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            ksum += kernel[i][j];
        }
    for (int i = 0; i < W; ++i)
        for (int j = 0; j < W; ++j) kernel[i][j] /= ksum;

    double total = 0.0;
    size_t windows = 0;
    for (int c = 0; c < 3; ++c) {
        for (int cy = R; cy < a.size - R; ++cy) {
            for (int cx = R; cx < a.size - R; ++cx) {
                double mu_a = 0, mu_b = 0, saa = 0, sbb = 0, sab = 0;
                for (int i = 0; i < W; ++i)
                    for (int j = 0; j < W; ++j) {
                        double va = to_unit(a.at(c, cy + i - R, cx + j - R));
                        double vb = to_unit(b.at(c, cy + i - R, cx + j - R));
                        double k = kernel[i][j];
                        mu_a += k * va;
                        mu_b += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                double var_a = saa - mu_a * mu_a;
                double var_b = sbb - mu_b * mu_b;
                double cov = sab - mu_a * mu_b;
                double s = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) /
                           ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
                total += s;
                ++windows;
            }
        }
    }
    return total / static_cast<double>(windows);
}

HistogramDivergence histogram_divergence(const std::vector<ImageTensor>& generated,
                                         const std::vector<ImageTensor>& reference) {
    if (generated.empty() || reference.empty())
        throw DataError("histogram_divergence requires non-empty image sets");
    auto histogram = [](const std::vector<ImageTensor>& imgs) {
        std::vector<double> counts(256, 1.0); // Laplace smoothing: +1 per bin
        for (const auto& img : imgs)
            for (double v : img.data) counts[quantize8(v)] += 1.0;
        double total = 0.0;
        for (double c : counts) total += c;
        for (double& c : counts) c /= total;
        return counts;
    };
    HistogramDivergence h;
    h.p_gen = histogram(generated);
    h.p_ref = histogram(reference);
    double kl_pq = 0.0, kl_qp = 0.0;
    for (int i = 0; i < 256; ++i) {
        kl_pq += h.p_gen[i] * std::log(h.p_gen[i] / h.p_ref[i]);
        kl_qp += h.p_ref[i] * std::log(h.p_ref[i] / h.p_gen[i]);
    }
    h.nats = kl_pq + kl_qp;
    return h;
}

void write_histogram_csv(const std::filesystem::path& path, const HistogramDivergence& h) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "bin,p_generated,p_reference\n";
    for (int i = 0; i < 256; ++i)
        out << i << "," << h.p_gen[i] << "," << h.p_ref[i] << "\n";
}

void write_histogram_plot(const std::filesystem::path& path, const HistogramDivergence& h) {
    const int Wp = 512, Hp = 256;
    ImageTensor canvas(Wp);
    std::fill(canvas.data.begin(), canvas.data.end(), 1.0);
    // vertical scale to the larger of the two distributions
    double pmax = 1e-12;
    for (int i = 0; i < 256; ++i) pmax = std::max({pmax, h.p_gen[i], h.p_ref[i]});
    auto draw = [&](const std::vector<double>& p, int channel) {
        for (int i = 0; i < 256; ++i) {
            int height = static_cast<int>(std::lround(p[i] / pmax * (Hp - 16)));
            for (int y = 0; y < height; ++y)
                for (int x = 2 * i; x < 2 * i + 2; ++x) {
                    for (int c = 0; c < 3; ++c)
                        if (c != channel) canvas.at(c, Hp - 1 - y, x) -= 0.85;
                }
        }
    };
    draw(h.p_gen, 0);  // generated in red
    draw(h.p_ref, 1);  // reference in green
    for (auto& v : canvas.data) v = std::clamp(v, -1.0, 1.0);
    // the canvas is square (512); crop rows below Hp by leaving them white
    png_write_rgb8(path, canvas);
}

AlignmentResult cross_view_alignment(const CCNetModel& ccnet, const CodecModel& codec,
                                     const ExtractorModel& extractor, const Dataset& data,
                                     const std::vector<std::vector<int>>& groups) {
    if (groups.size() < 2) throw DataError("cross_view_alignment needs at least 2 groups");
    for (const auto& g : groups)
        if (g.size() < 2) throw DataError("every view group needs at least 2 views");

    AlignmentResult r;
    std::vector<std::vector<double>> vecs;
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        SceneSample anchor = data.load(groups[gi][0]);
        for (int idx : groups[gi]) {
            SceneSample s = data.load(idx);
            // fixed hint/box per group: only the source view varies
            s.hint_image = anchor.hint_image;
            s.box_viz = anchor.box_viz;
            CompactCondition c = ccnet.condition_for(s, codec, extractor);
            double norm = 0.0;
            for (double v : c) norm += v * v;
            norm = std::sqrt(norm);
            if (norm < 1e-12) {
                ++r.excluded;
                continue;
            }
            for (double& v : c) v /= norm;
            vecs.push_back(std::move(c));
            r.group_of.push_back(static_cast<int>(gi));
        }
    }
    r.n = static_cast<int>(vecs.size());
    if (r.n < 2) throw DataError("all condition vectors were degenerate");
    r.cosine.assign(static_cast<size_t>(r.n) * r.n, 0.0);
    double within = 0.0, between = 0.0;
    long nw = 0, nb = 0;
    for (int i = 0; i < r.n; ++i)
        for (int j = 0; j < r.n; ++j) {
            double d = 0.0;
            for (size_t k = 0; k < vecs[static_cast<size_t>(i)].size(); ++k)
                d += vecs[static_cast<size_t>(i)][k] * vecs[static_cast<size_t>(j)][k];
            r.cosine[static_cast<size_t>(i) * r.n + j] = d;
            if (i < j) {
                if (r.group_of[static_cast<size_t>(i)] == r.group_of[static_cast<size_t>(j)]) {
                    within += d;
                    ++nw;
                } else {
                    between += d;
                    ++nb;
                }
            }
        }
    r.within = nw ? within / nw : 0.0;
    r.between = nb ? between / nb : 0.0;
    return r;
}

void write_similarity_plot(const std::filesystem::path& path, const AlignmentResult& r) {
    const int cell = std::max(1, 256 / std::max(1, r.n));
    const int S = cell * r.n;
    ImageTensor canvas(S);
    for (int i = 0; i < r.n; ++i)
        for (int j = 0; j < r.n; ++j) {
            double v = r.cosine[static_cast<size_t>(i) * r.n + j]; // [-1, 1]
            for (int y = i * cell; y < (i + 1) * cell; ++y)
                for (int x = j * cell; x < (j + 1) * cell; ++x) {
                    canvas.at(0, y, x) = v;         // red rises with similarity
                    canvas.at(1, y, x) = -0.2;
                    canvas.at(2, y, x) = -v;        // blue falls
                }
        }
    png_write_rgb8(path, canvas);
}

ProfileResult profile_run(const ModelBundle& bundle, const SceneSample& sample, int n,
                          int ddim_steps, double beta, double gamma) {
    if (n < 1) throw ParameterError("profile_run requires n >= 1");
    using clock = std::chrono::steady_clock;

    ProfileResult r;
    r.param_count = count_params(bundle.cfg.model).total();
    r.ccnet_param_count = static_cast<long long>(bundle.ccnet->param_count());
    r.runs = n;
    r.ddim_steps = ddim_steps;

    LatentTensor hint = bundle.codec.encode(sample.hint_image);
    CompactCondition c = bundle.ccnet->condition_for(sample, bundle.codec, *bundle.extractor);
    SamplerSchedule sched = make_sampler_schedule(bundle.cfg.T, ddim_steps, beta, gamma);
    DitPass pass;

    // one conditional+unconditional forward pair at a representative step
    {
        LatentTensor y(hint.h, hint.w);
        Rng rng(0);
        for (auto& v : y.data) v = rng.gaussian();
        auto ycat = concat_hint(hint, y);
        const int t = bundle.cfg.T / 2;
        CompactCondition zero(c.size(), 0.0);
        auto t0 = clock::now();
        bundle.dit->forward(pass, ycat.data(), c.data(), &t, 1, nullptr);
        bundle.dit->forward(pass, ycat.data(), zero.data(), &t, 1, nullptr);
        r.forward_pair_seconds = std::chrono::duration<double>(clock::now() - t0).count();
    }

    std::vector<double> times(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto t0 = clock::now();
        ddim_sample(*bundle.dit, pass, hint, c, sched, bundle.noise,
                    static_cast<uint64_t>(i) + 1);
        times[static_cast<size_t>(i)] = std::chrono::duration<double>(clock::now() - t0).count();
    }
    double mean = 0.0;
    for (double t : times) mean += t;
    mean /= n;
    double var = 0.0;
    for (double t : times) var += (t - mean) * (t - mean);
    r.mean_seconds = mean;
    r.std_seconds = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;

    rusage usage{};
    if (getrusage(RUSAGE_SELF, &usage) == 0) r.peak_rss_kb = usage.ru_maxrss;
    return r;
}

} // namespace mdtbox
