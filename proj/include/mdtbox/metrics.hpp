#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "mdtbox/data_synth.hpp"
#include "mdtbox/train.hpp"

namespace mdtbox {

// All image metrics remap [-1,1] pixel values to [0,1] internally and are
// pure functions of their inputs.

// 10*log10(1/MSE), capped at 100 dB when MSE < 1e-10.
double psnr(const ImageTensor& a, const ImageTensor& b);
// Same, restricted to pixels strictly outside the box.
double psnr_outside_box(const ImageTensor& a, const ImageTensor& b, const Box& box);

// Standard SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1.0, valid-region mean over the three channels.
double ssim(const ImageTensor& a, const ImageTensor& b);

double l1_metric(const ImageTensor& a, const ImageTensor& b);

struct HistogramDivergence {
    double nats = 0.0;
    std::vector<double> p_gen, p_ref; // Laplace-smoothed bin probabilities, 256 each
};

// 256-bin channel-pooled 8-bit histograms, +1 smoothing, symmetric KL.
HistogramDivergence histogram_divergence(const std::vector<ImageTensor>& generated,
                                         const std::vector<ImageTensor>& reference);
void write_histogram_csv(const std::filesystem::path& path, const HistogramDivergence& h);
void write_histogram_plot(const std::filesystem::path& path, const HistogramDivergence& h);

struct AlignmentResult {
    double within = 0.0;  // mean pairwise cosine inside groups
    double between = 0.0; // mean pairwise cosine across groups
    int excluded = 0;     // zero vectors dropped
    int n = 0;
    std::vector<int> group_of;  // group id per vector
    std::vector<double> cosine; // n x n similarity matrix
};

// CompactCondition alignment across view groups; hint and box are taken from
// the first member of each group.
AlignmentResult cross_view_alignment(const CCNetModel& ccnet, const CodecModel& codec,
                                     const ExtractorModel& extractor, const Dataset& data,
                                     const std::vector<std::vector<int>>& groups);
void write_similarity_plot(const std::filesystem::path& path, const AlignmentResult& r);

struct ProfileResult {
    long long param_count = 0;       // transformer core + mask extras
    long long ccnet_param_count = 0;
    double mean_seconds = 0.0;
    double std_seconds = 0.0;
    double forward_pair_seconds = 0.0; // one conditional+unconditional pair
    long peak_rss_kb = -1;             // -1 when the platform hides it
    int runs = 0;
    int ddim_steps = 0;
};

ProfileResult profile_run(const ModelBundle& bundle, const SceneSample& sample, int n,
                          int ddim_steps = 50, double beta = 2.0, double gamma = 0.01);

} // namespace mdtbox
