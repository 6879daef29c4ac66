#include "mdtbox/codec.hpp"

#include <json.hpp>

#include <cmath>

#include "mdtbox/kernels.hpp"
#include "mdtbox/params.hpp"

namespace mdtbox {

namespace k = kern;
using nlohmann::json;

namespace {

// Orthonormalized rows of a seeded Gaussian matrix [rows, cols], rows <= cols.
std::vector<double> orthonormal_rows(int rows, int cols, Rng& rng) {
    std::vector<double> w(static_cast<size_t>(rows) * cols);
    for (auto& v : w) v = rng.gaussian();
    for (int r = 0; r < rows; ++r) {
        double* wr = w.data() + static_cast<size_t>(r) * cols;
        for (int p = 0; p < r; ++p) {
            const double* wp = w.data() + static_cast<size_t>(p) * cols;
            double d = 0.0;
            for (int c = 0; c < cols; ++c) d += wr[c] * wp[c];
            for (int c = 0; c < cols; ++c) wr[c] -= d * wp[c];
        }
        double n2 = 0.0;
        for (int c = 0; c < cols; ++c) n2 += wr[c] * wr[c];
        double inv = 1.0 / std::sqrt(n2);
        for (int c = 0; c < cols; ++c) wr[c] *= inv;
    }
    return w;
}

} // namespace

CodecModel::LearnedLayout CodecModel::learned_layout() const {
    const int hd = cfg_.hidden;
    LearnedLayout L{};
    size_t off = 0;
    L.c1w = off; off += static_cast<size_t>(hd) * 3 * 9;
    L.c1b = off; off += static_cast<size_t>(hd);
    L.c2w = off; off += static_cast<size_t>(4) * hd * 9;
    L.c2b = off; off += 4;
    L.d1w = off; off += static_cast<size_t>(4) * hd * 4;
    L.d1b = off; off += static_cast<size_t>(hd);
    L.d2w = off; off += static_cast<size_t>(hd) * 3 * 4;
    L.d2b = off; off += 3;
    L.total = off;
    return L;
}

CodecModel CodecModel::make_block(const CodecConfig& cfg) {
    if (cfg.mode != CodecMode::block) throw ConfigError("make_block requires block mode");
    if (cfg.f <= 0) throw ConfigError("downsample factor must be positive");
    CodecModel m;
    m.cfg_ = cfg;
    Rng rng = Rng::child(cfg.seed, "codec.block");
    m.w_ = orthonormal_rows(4, 3 * cfg.f * cfg.f, rng);
    return m;
}

CodecModel CodecModel::make_learned_untrained(const CodecConfig& cfg) {
    if (cfg.mode != CodecMode::learned) throw ConfigError("make_learned requires learned mode");
    if (cfg.f != 4) throw ConfigError("learned codec uses two stride-2 convs, so f must be 4");
    CodecModel m;
    m.cfg_ = cfg;
    auto L = m.learned_layout();
    m.w_.assign(L.total, 0.0);
    Rng rng = Rng::child(cfg.seed, "codec.learned");
    auto init = [&](size_t off, size_t n, int fan_in) {
        double s = std::sqrt(1.0 / fan_in);
        for (size_t i = 0; i < n; ++i) m.w_[off + i] = rng.gaussian() * s;
    };
    const int hd = cfg.hidden;
    init(L.c1w, static_cast<size_t>(hd) * 3 * 9, 3 * 9);
    init(L.c2w, static_cast<size_t>(4) * hd * 9, hd * 9);
    init(L.d1w, static_cast<size_t>(4) * hd * 4, 4);
    init(L.d2w, static_cast<size_t>(hd) * 3 * 4, hd);
    return m;
}

LatentTensor CodecModel::encode(const ImageTensor& image) const {
    const int f = cfg_.f;
    if (image.size <= 0 || image.size % f != 0)
        throw ShapeError("image size " + std::to_string(image.size) +
                         " not divisible by codec factor " + std::to_string(f));
    const int n = image.size / f;
    LatentTensor z(n, n);
    const double inv_scale = 1.0 / scale_;

    if (cfg_.mode == CodecMode::block) {
        const int in_dim = 3 * f * f;
        std::vector<double> blk(static_cast<size_t>(in_dim));
        for (int by = 0; by < n; ++by) {
            for (int bx = 0; bx < n; ++bx) {
                int i = 0;
                for (int c = 0; c < 3; ++c)
                    for (int dy = 0; dy < f; ++dy)
                        for (int dx = 0; dx < f; ++dx)
                            blk[i++] = image.at(c, by * f + dy, bx * f + dx);
                for (int c4 = 0; c4 < 4; ++c4) {
                    const double* wr = w_.data() + static_cast<size_t>(c4) * in_dim;
                    double acc = 0.0;
                    for (int j = 0; j < in_dim; ++j) acc += wr[j] * blk[j];
                    z.at(c4, by, bx) = acc * inv_scale;
                }
            }
        }
        return z;
    }

    auto L = learned_layout();
    const int hd = cfg_.hidden;
    const int H = image.size, Hh = H / 2;
    std::vector<double> c1(static_cast<size_t>(hd) * Hh * Hh);
    k::conv3x3s2_fwd(c1.data(), image.data.data(), w_.data() + L.c1w, w_.data() + L.c1b, 3, H, H, hd);
    std::vector<double> g1(c1.size());
    k::gelu_fwd(g1.data(), c1.data(), c1.size());
    k::conv3x3s2_fwd(z.data.data(), g1.data(), w_.data() + L.c2w, w_.data() + L.c2b, hd, Hh, Hh, 4);
    k::scale_inplace(z.data.data(), inv_scale, z.data.size());
    return z;
}

ImageTensor CodecModel::decode(const LatentTensor& latent) const {
    const int f = cfg_.f;
    if (latent.h <= 0 || latent.h != latent.w)
        throw ShapeError("decode expects a square latent");
    const int n = latent.h;
    ImageTensor img(n * f);

    if (cfg_.mode == CodecMode::block) {
        const int in_dim = 3 * f * f;
        for (int by = 0; by < n; ++by) {
            for (int bx = 0; bx < n; ++bx) {
                for (int c = 0; c < 3; ++c)
                    for (int dy = 0; dy < f; ++dy)
                        for (int dx = 0; dx < f; ++dx) {
                            int j = (c * f + dy) * f + dx;
                            double acc = 0.0;
                            for (int c4 = 0; c4 < 4; ++c4)
                                acc += w_[static_cast<size_t>(c4) * in_dim + j] *
                                       latent.at(c4, by, bx);
                            img.at(c, by * f + dy, bx * f + dx) = acc * scale_;
                        }
            }
        }
        return img;
    }

    auto L = learned_layout();
    const int hd = cfg_.hidden;
    std::vector<double> zs(latent.data);
    k::scale_inplace(zs.data(), scale_, zs.size());
    std::vector<double> d1(static_cast<size_t>(hd) * 2 * n * 2 * n);
    k::deconv2x2s2_fwd(d1.data(), zs.data(), w_.data() + L.d1w, w_.data() + L.d1b, 4, n, n, hd);
    std::vector<double> g2(d1.size());
    k::gelu_fwd(g2.data(), d1.data(), d1.size());
    k::deconv2x2s2_fwd(img.data.data(), g2.data(), w_.data() + L.d2w, w_.data() + L.d2b, hd,
                       2 * n, 2 * n, 3);
    return img;
}

void CodecModel::save(const std::filesystem::path& path) const {
    json meta{{"type", "codec"},
              {"mode", cfg_.mode == CodecMode::block ? "block" : "learned"},
              {"f", cfg_.f},
              {"seed", cfg_.seed},
              {"hidden", cfg_.hidden},
              {"scale", scale_}};
    std::vector<std::pair<TensorInfo, std::span<const double>>> tensors;
    TensorInfo wi{"codec.w", {static_cast<int>(w_.size())}, 0, w_.size()};
    tensors.emplace_back(wi, std::span<const double>(w_));
    write_tensor_file(path, meta, tensors);
}

CodecModel CodecModel::load(const std::filesystem::path& path) {
    TensorFile tf = read_tensor_file(path);
    if (tf.meta.value("type", "") != "codec")
        throw DataError("not a codec checkpoint: " + path.string());
    CodecConfig cfg;
    cfg.mode = tf.meta.at("mode").get<std::string>() == "block" ? CodecMode::block
                                                                : CodecMode::learned;
    cfg.f = tf.meta.at("f").get<int>();
    cfg.seed = tf.meta.at("seed").get<uint64_t>();
    cfg.hidden = tf.meta.value("hidden", 32);
    CodecModel m = cfg.mode == CodecMode::block ? make_block(cfg) : make_learned_untrained(cfg);
    m.w_ = tf.require("codec.w").data;
    m.scale_ = tf.meta.at("scale").get<double>();
    return m;
}

double compute_latent_scale(const CodecModel& codec, const Dataset& data, int max_images) {
    const int n = std::min(data.size(), max_images);
    if (n == 0) throw DataError("cannot compute latent scale on an empty dataset");
    double sum2 = 0.0;
    size_t count = 0;
    for (int i = 0; i < n; ++i) {
        SceneSample s = data.load(i);
        for (const ImageTensor* img : {&s.target_image, &s.source_image}) {
            LatentTensor z = codec.encode(*img);
            for (double v : z.data) sum2 += v * v;
            count += z.data.size();
        }
    }
    double std = std::sqrt(sum2 / static_cast<double>(count));
    return std > 1e-12 ? std : 1.0;
}

CodecFitResult fit_codec(const Dataset& data, const CodecConfig& cfg, uint64_t seed) {
    if (cfg.mode != CodecMode::learned)
        throw ParameterError("fit_codec applies to the learned codec mode only");
    if (data.size() == 0) throw DataError("fit_codec requires a non-empty dataset");

    CodecModel model = CodecModel::make_learned_untrained(cfg);
    auto L = model.learned_layout();
    std::vector<double>& w = model.weights();
    const int hd = cfg.hidden;

    // training pool: target and source images
    const int pool = 2 * data.size();
    Rng rng = Rng::child(seed, "codec.fit");
    auto load_image = [&](int pix) {
        SceneSample s = data.load(pix / 2);
        return (pix % 2 == 0) ? s.target_image : s.source_image;
    };

    std::vector<double> grads(L.total, 0.0), m1(L.total, 0.0), m2(L.total, 0.0);
    std::vector<double> history;
    history.reserve(static_cast<size_t>(cfg.steps));

    const int H = data.manifest().image_size;
    const int Hh = H / 2, Hq = H / 4;
    const size_t nc1 = static_cast<size_t>(hd) * Hh * Hh;
    const size_t nz = static_cast<size_t>(4) * Hq * Hq;
    std::vector<double> c1(nc1), g1(nc1), z(nz), d1(nc1), g2(nc1), y(static_cast<size_t>(3) * H * H);
    std::vector<double> dy(y.size()), dg2(nc1), dd1(nc1), dz(nz), dg1(nc1), dc1(nc1);

    for (int step = 0; step < cfg.steps; ++step) {
        std::fill(grads.begin(), grads.end(), 0.0);
        double loss = 0.0;
        for (int bi = 0; bi < cfg.batch; ++bi) {
            ImageTensor img = load_image(rng.uniform_int(pool));
            const double* x = img.data.data();
            k::conv3x3s2_fwd(c1.data(), x, w.data() + L.c1w, w.data() + L.c1b, 3, H, H, hd);
            k::gelu_fwd(g1.data(), c1.data(), nc1);
            k::conv3x3s2_fwd(z.data(), g1.data(), w.data() + L.c2w, w.data() + L.c2b, hd, Hh, Hh, 4);
            k::deconv2x2s2_fwd(d1.data(), z.data(), w.data() + L.d1w, w.data() + L.d1b, 4, Hq, Hq, hd);
            k::gelu_fwd(g2.data(), d1.data(), nc1);
            k::deconv2x2s2_fwd(y.data(), g2.data(), w.data() + L.d2w, w.data() + L.d2b, hd, Hh, Hh, 3);

            const double inv_n = 1.0 / static_cast<double>(y.size());
            double li = 0.0;
            for (size_t i = 0; i < y.size(); ++i) {
                double d = y[i] - x[i];
                li += d * d;
                dy[i] = 2.0 * d * inv_n / cfg.batch;
            }
            loss += li * inv_n / cfg.batch;

            std::fill(dg2.begin(), dg2.end(), 0.0);
            std::fill(dd1.begin(), dd1.end(), 0.0);
            std::fill(dz.begin(), dz.end(), 0.0);
            std::fill(dg1.begin(), dg1.end(), 0.0);
            std::fill(dc1.begin(), dc1.end(), 0.0);
            k::deconv2x2s2_bwd(dg2.data(), grads.data() + L.d2w, grads.data() + L.d2b, dy.data(),
                               g2.data(), w.data() + L.d2w, hd, Hh, Hh, 3);
            k::gelu_bwd(dd1.data(), dg2.data(), d1.data(), nc1);
            k::deconv2x2s2_bwd(dz.data(), grads.data() + L.d1w, grads.data() + L.d1b, dd1.data(),
                               z.data(), w.data() + L.d1w, 4, Hq, Hq, hd);
            k::conv3x3s2_bwd(dg1.data(), grads.data() + L.c2w, grads.data() + L.c2b, dz.data(),
                             g1.data(), w.data() + L.c2w, hd, Hh, Hh, 4);
            k::gelu_bwd(dc1.data(), dg1.data(), c1.data(), nc1);
            k::conv3x3s2_bwd(nullptr, grads.data() + L.c1w, grads.data() + L.c1b, dc1.data(),
                             x, w.data() + L.c1w, 3, H, H, hd);
        }
        // Adam
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double bc1 = 1.0 - std::pow(b1, step + 1);
        const double bc2 = 1.0 - std::pow(b2, step + 1);
#pragma omp parallel for schedule(static)
        for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(L.total); ++i) {
            m1[i] = b1 * m1[i] + (1 - b1) * grads[i];
            m2[i] = b2 * m2[i] + (1 - b2) * grads[i] * grads[i];
            w[i] -= cfg.lr * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + eps);
        }
        history.push_back(loss);
    }

    model.set_scale(compute_latent_scale(model, data));
    return CodecFitResult{std::move(model), std::move(history)};
}

} // namespace mdtbox
