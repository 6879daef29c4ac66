#include "mdtbox/extractor.hpp"

#include <cstring>

#include "mdtbox/embed.hpp"
#include "mdtbox/kernels.hpp"

namespace mdtbox {

namespace k = kern;

ExtractorModel::ExtractorModel(const ExtractorConfig& cfg) : cfg_(cfg) {
    if (cfg.width % cfg.heads != 0)
        throw ConfigError("extractor width must be divisible by heads");
    const int D = cfg.width;
    const int in_dim = 3 * cfg.patch * cfg.patch;
    ids_.embed_w = params_.add("ex.embed.w", {D, in_dim});
    ids_.embed_b = params_.add("ex.embed.b", {D});
    ids_.cls = params_.add("ex.cls", {D});
    for (int i = 0; i < cfg.depth; ++i) {
        std::string p = "ex.block" + std::to_string(i) + ".";
        ids_.qkv_w.push_back(params_.add(p + "qkv.w", {3 * D, D}));
        ids_.qkv_b.push_back(params_.add(p + "qkv.b", {3 * D}));
        ids_.proj_w.push_back(params_.add(p + "proj.w", {D, D}));
        ids_.proj_b.push_back(params_.add(p + "proj.b", {D}));
        ids_.fc1_w.push_back(params_.add(p + "fc1.w", {4 * D, D}));
        ids_.fc1_b.push_back(params_.add(p + "fc1.b", {4 * D}));
        ids_.fc2_w.push_back(params_.add(p + "fc2.w", {D, 4 * D}));
        ids_.fc2_b.push_back(params_.add(p + "fc2.b", {D}));
    }
    params_.finalize();

    Rng rng = Rng::child(cfg.seed, "extractor");
    params_.init_xavier_uniform(ids_.embed_w, rng);
    params_.init_zero(ids_.embed_b);
    params_.init_normal(ids_.cls, rng, 0.02);
    for (int i = 0; i < cfg.depth; ++i) {
        params_.init_xavier_uniform(ids_.qkv_w[i], rng);
        params_.init_zero(ids_.qkv_b[i]);
        params_.init_xavier_uniform(ids_.proj_w[i], rng);
        params_.init_zero(ids_.proj_b[i]);
        params_.init_xavier_uniform(ids_.fc1_w[i], rng);
        params_.init_zero(ids_.fc1_b[i]);
        params_.init_xavier_uniform(ids_.fc2_w[i], rng);
        params_.init_zero(ids_.fc2_b[i]);
    }
}

TokenSequence ExtractorModel::extract_tokens(const ImageTensor& image) const {
    const int P = cfg_.patch;
    if (image.size <= 0 || image.size % P != 0)
        throw ShapeError("image size " + std::to_string(image.size) +
                         " not divisible by extractor patch " + std::to_string(P));
    const int g = image.size / P;
    const int D = cfg_.width;
    const int L = 1 + g * g;
    const int in_dim = 3 * P * P;

    // patchify in (c, dy, dx) order, raster patch order
    std::vector<double> patches(static_cast<size_t>(g) * g * in_dim);
    for (int py = 0; py < g; ++py)
        for (int px = 0; px < g; ++px) {
            double* dst = patches.data() + (static_cast<size_t>(py) * g + px) * in_dim;
            int i = 0;
            for (int c = 0; c < 3; ++c)
                for (int dy = 0; dy < P; ++dy)
                    for (int dx = 0; dx < P; ++dx)
                        dst[i++] = image.at(c, py * P + dy, px * P + dx);
        }

    TokenSequence seq;
    seq.length = L;
    seq.width = D;
    seq.cls_first = true;
    seq.data.assign(static_cast<size_t>(L) * D, 0.0);
    std::memcpy(seq.row(0), params_.val(ids_.cls), sizeof(double) * D);
    k::matmul_fwd(seq.row(1), patches.data(), params_.val(ids_.embed_w),
                  params_.val(ids_.embed_b), g * g, in_dim, D);

    std::vector<double> pos = sincos_pos_1d(L, D);
    k::add_inplace(seq.data.data(), pos.data(), seq.data.size());

    // pre-LN encoder blocks
    std::vector<double> ln(seq.data.size()), mean(L), rstd(L);
    std::vector<double> qkv(static_cast<size_t>(L) * 3 * D);
    std::vector<double> att(static_cast<size_t>(cfg_.heads) * L * L);
    std::vector<double> atto(seq.data.size()), proj(seq.data.size());
    std::vector<double> f1(static_cast<size_t>(L) * 4 * D), g1(f1.size()), f2(seq.data.size());
    for (int b = 0; b < cfg_.depth; ++b) {
        k::layernorm_fwd(ln.data(), mean.data(), rstd.data(), seq.data.data(), L, D);
        k::matmul_fwd(qkv.data(), ln.data(), params_.val(ids_.qkv_w[b]),
                      params_.val(ids_.qkv_b[b]), L, D, 3 * D);
        k::attention_fwd(atto.data(), att.data(), qkv.data(), 1, L, D, cfg_.heads);
        k::matmul_fwd(proj.data(), atto.data(), params_.val(ids_.proj_w[b]),
                      params_.val(ids_.proj_b[b]), L, D, D);
        k::add_inplace(seq.data.data(), proj.data(), seq.data.size());

        k::layernorm_fwd(ln.data(), mean.data(), rstd.data(), seq.data.data(), L, D);
        k::matmul_fwd(f1.data(), ln.data(), params_.val(ids_.fc1_w[b]),
                      params_.val(ids_.fc1_b[b]), L, D, 4 * D);
        k::gelu_fwd(g1.data(), f1.data(), f1.size());
        k::matmul_fwd(f2.data(), g1.data(), params_.val(ids_.fc2_w[b]),
                      params_.val(ids_.fc2_b[b]), L, 4 * D, D);
        k::add_inplace(seq.data.data(), f2.data(), seq.data.size());
    }
    k::layernorm_fwd(ln.data(), mean.data(), rstd.data(), seq.data.data(), L, D);
    seq.data = std::move(ln);
    return seq;
}

} // namespace mdtbox
