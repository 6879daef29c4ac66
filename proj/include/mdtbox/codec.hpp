#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mdtbox/data_synth.hpp"
#include "mdtbox/image.hpp"
#include "mdtbox/rng.hpp"

namespace mdtbox {

// 4-channel spatial latent, CHW layout, h = H/f, w = W/f.
struct LatentTensor {
    static constexpr int channels = 4;
    int h = 0, w = 0;
    std::vector<double> data; // 4 * h * w

    LatentTensor() = default;
    LatentTensor(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(4) * h_ * w_, 0.0) {}
    double& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * h + y) * w + x]; }
    double at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * h + y) * w + x]; }
};

enum class CodecMode { block, learned };

struct CodecConfig {
    CodecMode mode = CodecMode::block;
    int f = 4;
    uint64_t seed = 1;
    // learned-mode training knobs
    int hidden = 32;
    double lr = 2e-3;
    int batch = 8;
    int steps = 4000;
};

// Frozen pixel<->latent map. Block mode is a seeded orthonormal linear map
// per f x f x 3 block (decode is its transpose), so encode is exactly local
// to the block grid. Learned mode is a small strided conv autoencoder fit by
// fit_codec. Latents are divided by `scale` so the training set is roughly
// unit variance; decode multiplies it back.
class CodecModel {
public:
    static CodecModel make_block(const CodecConfig& cfg);
    static CodecModel make_learned_untrained(const CodecConfig& cfg);

    LatentTensor encode(const ImageTensor& image) const;
    ImageTensor decode(const LatentTensor& latent) const;

    const CodecConfig& config() const { return cfg_; }
    CodecMode mode() const { return cfg_.mode; }
    int downsample() const { return cfg_.f; }
    double scale() const { return scale_; }
    void set_scale(double s) { scale_ = s; }

    // latent cells that a box could influence, beyond the latent box itself
    int receptive_margin() const { return cfg_.mode == CodecMode::block ? 0 : 2; }

    void save(const std::filesystem::path& path) const;
    static CodecModel load(const std::filesystem::path& path);

    // learned-mode internals exposed for fit_codec
    std::vector<double>& weights() { return w_; }
    const std::vector<double>& weights() const { return w_; }

    struct LearnedLayout {
        // offsets into w_: conv1 w/b, conv2 w/b, dec1 w/b, dec2 w/b
        size_t c1w, c1b, c2w, c2b, d1w, d1b, d2w, d2b, total;
    };
    LearnedLayout learned_layout() const;

private:
    CodecConfig cfg_;
    double scale_ = 1.0;
    std::vector<double> w_; // block: [4, 3*f*f]; learned: packed conv params
};

struct CodecFitResult {
    CodecModel model;
    std::vector<double> loss_history; // one entry per optimization step
};

// Trains the learned codec by mean-squared reconstruction on the dataset
// (throws on an empty dataset or block mode), then freezes it and sets the
// latent scale from the training set.
CodecFitResult fit_codec(const Dataset& data, const CodecConfig& cfg, uint64_t seed);

// Latent standard deviation over (a prefix of) the dataset with scale forced
// to 1; used to normalize latents to unit variance.
double compute_latent_scale(const CodecModel& codec, const Dataset& data, int max_images = 256);

} // namespace mdtbox
