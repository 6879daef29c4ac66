#include "mdtbox/ccnet.hpp"

#include <cstring>

#include "mdtbox/embed.hpp"
#include "mdtbox/kernels.hpp"

namespace mdtbox {

namespace k = kern;

void CCNetConfig::validate() const {
    if (latent_h <= 0 || latent_w <= 0 || latent_h % patch || latent_w % patch)
        throw ShapeError("ccnet latent dims must be positive multiples of the patch size");
    if (width <= 0 || feat_width <= 0 || extractor_tokens <= 0)
        throw ConfigError("ccnet widths and token counts must be positive");
}

CCNetModel::CCNetModel(const CCNetConfig& cfg, ParamStore& store, std::string prefix)
    : cfg_(cfg), ps_(&store), prefix_(std::move(prefix)) {
    cfg_.validate();
    const int D = cfg_.width, Df = cfg_.feat_width;
    const int in_dim = 4 * cfg_.patch * cfg_.patch;
    ids_.lsif_w = store.add(prefix_ + "lsif.embed.w", {D, in_dim});
    ids_.lsif_b = store.add(prefix_ + "lsif.embed.b", {D});
    ids_.tbf_rw = store.add(prefix_ + "tbf.reduce.w", {cfg_.extractor_tokens});
    ids_.tbf_rb = store.add(prefix_ + "tbf.reduce.b", {1});
    if (has_proj()) {
        ids_.tbf_pw = store.add(prefix_ + "tbf.proj.w", {D, Df});
        ids_.tbf_pb = store.add(prefix_ + "tbf.proj.b", {D});
    }
    ids_.gsif_w = store.add(prefix_ + "gsif.mlp.w", {D, Df});
    ids_.gsif_b = store.add(prefix_ + "gsif.mlp.b", {D});
    ids_.fus_w = store.add(prefix_ + "fusion.w", {cfg_.fusion_len()});
    ids_.fus_b = store.add(prefix_ + "fusion.b", {1});

    pos_lsif_ = sincos_pos_2d(cfg_.latent_h / cfg_.patch, cfg_.latent_w / cfg_.patch, D);
}

void CCNetModel::init_weights(Rng& rng) {
    ps_->init_xavier_uniform(ids_.lsif_w, rng);
    ps_->init_zero(ids_.lsif_b);
    ps_->init_xavier_uniform(ids_.tbf_rw, rng);
    ps_->init_zero(ids_.tbf_rb);
    if (has_proj()) {
        ps_->init_xavier_uniform(ids_.tbf_pw, rng);
        ps_->init_zero(ids_.tbf_pb);
    }
    ps_->init_xavier_uniform(ids_.gsif_w, rng);
    ps_->init_zero(ids_.gsif_b);
    ps_->init_xavier_uniform(ids_.fus_w, rng);
    ps_->init_zero(ids_.fus_b);
}

size_t CCNetModel::param_count() const {
    size_t n = 0;
    for (const auto& t : ps_->tensors())
        if (t.name.rfind(prefix_, 0) == 0) n += t.size;
    return n;
}

namespace {

// latent [4,h,w] -> patch rows [(h/p)(w/p), 4*p*p], (c, dy, dx) order
void latent_patches(const double* latent, int h, int w, int p, double* out) {
    const int gh = h / p, gw = w / p;
    const int in_dim = 4 * p * p;
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
            double* dst = out + (static_cast<size_t>(py) * gw + px) * in_dim;
            int i = 0;
            for (int c = 0; c < 4; ++c)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        dst[i++] = latent[(static_cast<size_t>(c) * h + py * p + dy) * w +
                                          px * p + dx];
        }
}

} // namespace

void CCNetModel::forward(CCNetActs& a, const double* source_latents, const double* tbf_tokens,
                         const double* src_tokens, const double* hint_tokens, int B) const {
    const int D = cfg_.width, Df = cfg_.feat_width;
    const int Lx = cfg_.lsif_tokens(), Lt = cfg_.extractor_tokens;
    const int Lg = cfg_.gsif_tokens(), m = cfg_.fusion_len();
    const int in_dim = 4 * cfg_.patch * cfg_.patch;
    const size_t lat_sz = static_cast<size_t>(4) * cfg_.latent_h * cfg_.latent_w;

    a.B = B;
    a.lsif_patches.assign(static_cast<size_t>(B) * Lx * in_dim, 0.0);
    a.lsif.assign(static_cast<size_t>(B) * Lx * D, 0.0);
    a.tbf_tokens.assign(tbf_tokens, tbf_tokens + static_cast<size_t>(B) * Lt * Df);
    a.tbf_red.assign(static_cast<size_t>(B) * Df, 0.0);
    a.vb.assign(static_cast<size_t>(B) * D, 0.0);
    a.gsif_in.assign(static_cast<size_t>(B) * Lg * Df, 0.0);
    a.gsif.assign(static_cast<size_t>(B) * Lg * D, 0.0);
    a.stack.assign(static_cast<size_t>(B) * m * D, 0.0);
    a.c.assign(static_cast<size_t>(B) * D, 0.0);

    for (int b = 0; b < B; ++b)
        latent_patches(source_latents + static_cast<size_t>(b) * lat_sz, cfg_.latent_h,
                       cfg_.latent_w, cfg_.patch,
                       a.lsif_patches.data() + static_cast<size_t>(b) * Lx * in_dim);
    k::matmul_fwd(a.lsif.data(), a.lsif_patches.data(), ps_->val(ids_.lsif_w),
                  ps_->val(ids_.lsif_b), B * Lx, in_dim, D);
    for (int b = 0; b < B; ++b)
        k::add_inplace(a.lsif.data() + static_cast<size_t>(b) * Lx * D, pos_lsif_.data(),
                       pos_lsif_.size());

    // TBF: reduce tokens to one vector, then project to width D
    const double* rw = ps_->val(ids_.tbf_rw);
    const double rb = *ps_->val(ids_.tbf_rb);
    for (int b = 0; b < B; ++b) {
        double* red = a.tbf_red.data() + static_cast<size_t>(b) * Df;
        const double* toks = a.tbf_tokens.data() + static_cast<size_t>(b) * Lt * Df;
        for (int f = 0; f < Df; ++f) red[f] = rb;
        for (int j = 0; j < Lt; ++j) {
            const double* tj = toks + static_cast<size_t>(j) * Df;
            for (int f = 0; f < Df; ++f) red[f] += rw[j] * tj[f];
        }
    }
    if (has_proj()) {
        k::matmul_fwd(a.vb.data(), a.tbf_red.data(), ps_->val(ids_.tbf_pw),
                      ps_->val(ids_.tbf_pb), B, Df, D);
    } else {
        a.vb = a.tbf_red;
    }

    // GSIF: concat source and hint tokens, shared per-token linear map
    for (int b = 0; b < B; ++b) {
        double* dst = a.gsif_in.data() + static_cast<size_t>(b) * Lg * Df;
        std::memcpy(dst, src_tokens + static_cast<size_t>(b) * Lt * Df,
                    sizeof(double) * Lt * Df);
        std::memcpy(dst + static_cast<size_t>(Lt) * Df,
                    hint_tokens + static_cast<size_t>(b) * Lt * Df, sizeof(double) * Lt * Df);
    }
    k::matmul_fwd(a.gsif.data(), a.gsif_in.data(), ps_->val(ids_.gsif_w),
                  ps_->val(ids_.gsif_b), B * Lg, Df, D);

    // fusion: concat (lsif, v_B, gsif) along the token axis, reduce to one
    for (int b = 0; b < B; ++b) {
        double* st = a.stack.data() + static_cast<size_t>(b) * m * D;
        std::memcpy(st, a.lsif.data() + static_cast<size_t>(b) * Lx * D,
                    sizeof(double) * Lx * D);
        std::memcpy(st + static_cast<size_t>(Lx) * D, a.vb.data() + static_cast<size_t>(b) * D,
                    sizeof(double) * D);
        std::memcpy(st + static_cast<size_t>(Lx + 1) * D,
                    a.gsif.data() + static_cast<size_t>(b) * Lg * D, sizeof(double) * Lg * D);
    }
    const double* fw = ps_->val(ids_.fus_w);
    const double fb = *ps_->val(ids_.fus_b);
    for (int b = 0; b < B; ++b) {
        double* cb = a.c.data() + static_cast<size_t>(b) * D;
        const double* st = a.stack.data() + static_cast<size_t>(b) * m * D;
        for (int d = 0; d < D; ++d) cb[d] = fb;
        for (int j = 0; j < m; ++j) {
            const double* sj = st + static_cast<size_t>(j) * D;
            for (int d = 0; d < D; ++d) cb[d] += fw[j] * sj[d];
        }
    }
}

void CCNetModel::backward(const CCNetActs& a, const double* dc) const {
    const int B = a.B;
    const int D = cfg_.width, Df = cfg_.feat_width;
    const int Lx = cfg_.lsif_tokens(), Lt = cfg_.extractor_tokens;
    const int Lg = cfg_.gsif_tokens(), m = cfg_.fusion_len();
    const int in_dim = 4 * cfg_.patch * cfg_.patch;

    // fusion backward
    std::vector<double> dstack(static_cast<size_t>(B) * m * D, 0.0);
    const double* fw = ps_->val(ids_.fus_w);
    double* dfw = ps_->grad(ids_.fus_w);
    double* dfb = ps_->grad(ids_.fus_b);
    for (int b = 0; b < B; ++b) {
        const double* dcb = dc + static_cast<size_t>(b) * D;
        const double* st = a.stack.data() + static_cast<size_t>(b) * m * D;
        double* dst = dstack.data() + static_cast<size_t>(b) * m * D;
        for (int d = 0; d < D; ++d) *dfb += dcb[d];
        for (int j = 0; j < m; ++j) {
            const double* sj = st + static_cast<size_t>(j) * D;
            double* dj = dst + static_cast<size_t>(j) * D;
            double acc = 0.0;
            for (int d = 0; d < D; ++d) {
                acc += dcb[d] * sj[d];
                dj[d] += fw[j] * dcb[d];
            }
            dfw[j] += acc;
        }
    }

    // split the stack gradient
    std::vector<double> dlsif(static_cast<size_t>(B) * Lx * D);
    std::vector<double> dvb(static_cast<size_t>(B) * D);
    std::vector<double> dgsif(static_cast<size_t>(B) * Lg * D);
    for (int b = 0; b < B; ++b) {
        const double* dst = dstack.data() + static_cast<size_t>(b) * m * D;
        std::memcpy(dlsif.data() + static_cast<size_t>(b) * Lx * D, dst,
                    sizeof(double) * Lx * D);
        std::memcpy(dvb.data() + static_cast<size_t>(b) * D, dst + static_cast<size_t>(Lx) * D,
                    sizeof(double) * D);
        std::memcpy(dgsif.data() + static_cast<size_t>(b) * Lg * D,
                    dst + static_cast<size_t>(Lx + 1) * D, sizeof(double) * Lg * D);
    }

    // gsif backward (inputs are frozen extractor outputs, no input grad)
    k::matmul_bwd_params(ps_->grad(ids_.gsif_w), ps_->grad(ids_.gsif_b), dgsif.data(),
                         a.gsif_in.data(), B * Lg, Df, D);

    // v_B backward
    std::vector<double> dred(static_cast<size_t>(B) * Df, 0.0);
    if (has_proj()) {
        k::matmul_bwd_params(ps_->grad(ids_.tbf_pw), ps_->grad(ids_.tbf_pb), dvb.data(),
                             a.tbf_red.data(), B, Df, D);
        k::matmul_bwd_input(dred.data(), dvb.data(), ps_->val(ids_.tbf_pw), B, Df, D);
    } else {
        dred = dvb;
    }
    double* drw = ps_->grad(ids_.tbf_rw);
    double* drb = ps_->grad(ids_.tbf_rb);
    for (int b = 0; b < B; ++b) {
        const double* dr = dred.data() + static_cast<size_t>(b) * Df;
        const double* toks = a.tbf_tokens.data() + static_cast<size_t>(b) * Lt * Df;
        for (int f = 0; f < Df; ++f) *drb += dr[f];
        for (int j = 0; j < Lt; ++j) {
            const double* tj = toks + static_cast<size_t>(j) * Df;
            double acc = 0.0;
            for (int f = 0; f < Df; ++f) acc += dr[f] * tj[f];
            drw[j] += acc;
        }
    }

    // lsif backward (positional encodings are fixed)
    k::matmul_bwd_params(ps_->grad(ids_.lsif_w), ps_->grad(ids_.lsif_b), dlsif.data(),
                         a.lsif_patches.data(), B * Lx, in_dim, D);
}

TokenSequence CCNetModel::extract_lsif(const LatentTensor& source_latent) const {
    if (source_latent.h != cfg_.latent_h || source_latent.w != cfg_.latent_w)
        throw ShapeError("lsif latent dims mismatch the configured grid");
    const int Lx = cfg_.lsif_tokens(), D = cfg_.width;
    const int in_dim = 4 * cfg_.patch * cfg_.patch;
    std::vector<double> patches(static_cast<size_t>(Lx) * in_dim);
    latent_patches(source_latent.data.data(), cfg_.latent_h, cfg_.latent_w, cfg_.patch,
                   patches.data());
    TokenSequence t;
    t.length = Lx;
    t.width = D;
    t.data.assign(static_cast<size_t>(Lx) * D, 0.0);
    k::matmul_fwd(t.data.data(), patches.data(), ps_->val(ids_.lsif_w), ps_->val(ids_.lsif_b),
                  Lx, in_dim, D);
    k::add_inplace(t.data.data(), pos_lsif_.data(), t.data.size());
    return t;
}

std::vector<double> CCNetModel::compute_tbf(const ImageTensor& box_viz,
                                            const ExtractorModel& extractor) const {
    TokenSequence toks = extractor.extract_tokens(box_viz);
    if (toks.length != cfg_.extractor_tokens || toks.width != cfg_.feat_width)
        throw ShapeError("tbf extractor tokens mismatch the configured model");
    const int D = cfg_.width, Df = cfg_.feat_width, Lt = cfg_.extractor_tokens;
    std::vector<double> red(static_cast<size_t>(Df), *ps_->val(ids_.tbf_rb));
    const double* rw = ps_->val(ids_.tbf_rw);
    for (int j = 0; j < Lt; ++j)
        for (int f = 0; f < Df; ++f) red[static_cast<size_t>(f)] += rw[j] * toks.row(j)[f];
    if (!has_proj()) return red;
    std::vector<double> vb(static_cast<size_t>(D));
    k::matmul_fwd(vb.data(), red.data(), ps_->val(ids_.tbf_pw), ps_->val(ids_.tbf_pb), 1, Df, D);
    return vb;
}

TokenSequence CCNetModel::compute_gsif(const TokenSequence& source_tokens,
                                       const TokenSequence& hint_tokens) const {
    if (source_tokens.width != cfg_.feat_width || hint_tokens.width != cfg_.feat_width)
        throw ShapeError("gsif token width mismatch");
    TokenSequence out;
    out.length = source_tokens.length + hint_tokens.length;
    out.width = cfg_.width;
    out.data.assign(static_cast<size_t>(out.length) * out.width, 0.0);
    std::vector<double> in(static_cast<size_t>(out.length) * cfg_.feat_width);
    std::memcpy(in.data(), source_tokens.data.data(), sizeof(double) * source_tokens.data.size());
    std::memcpy(in.data() + source_tokens.data.size(), hint_tokens.data.data(),
                sizeof(double) * hint_tokens.data.size());
    k::matmul_fwd(out.data.data(), in.data(), ps_->val(ids_.gsif_w), ps_->val(ids_.gsif_b),
                  out.length, cfg_.feat_width, cfg_.width);
    return out;
}

CompactCondition CCNetModel::collect_condition(const TokenSequence& lsif,
                                               const std::vector<double>& v_b,
                                               const TokenSequence& gsif) const {
    const int D = cfg_.width;
    if (lsif.width != D || static_cast<int>(v_b.size()) != D || gsif.width != D)
        throw ShapeError("collect_condition requires width-D inputs");
    const int m = lsif.length + 1 + gsif.length;
    if (m != cfg_.fusion_len())
        throw ShapeError("fusion length " + std::to_string(m) + " mismatches model " +
                         std::to_string(cfg_.fusion_len()));
    const double* fw = ps_->val(ids_.fus_w);
    CompactCondition c(static_cast<size_t>(D), *ps_->val(ids_.fus_b));
    int j = 0;
    for (int i = 0; i < lsif.length; ++i, ++j)
        for (int d = 0; d < D; ++d) c[static_cast<size_t>(d)] += fw[j] * lsif.row(i)[d];
    for (int d = 0; d < D; ++d) c[static_cast<size_t>(d)] += fw[j] * v_b[static_cast<size_t>(d)];
    ++j;
    for (int i = 0; i < gsif.length; ++i, ++j)
        for (int d = 0; d < D; ++d) c[static_cast<size_t>(d)] += fw[j] * gsif.row(i)[d];
    return c;
}

CompactCondition CCNetModel::condition_for(const SceneSample& sample, const CodecModel& codec,
                                           const ExtractorModel& extractor) const {
    LatentTensor src = codec.encode(sample.source_image);
    TokenSequence lsif = extract_lsif(src);
    std::vector<double> vb = compute_tbf(sample.box_viz, extractor);
    TokenSequence gsif = compute_gsif(extractor.extract_tokens(sample.source_image),
                                      extractor.extract_tokens(sample.hint_image));
    return collect_condition(lsif, vb, gsif);
}

CompactCondition drop_condition(const CompactCondition& c, double eta, Rng& rng) {
    if (eta < 0.0 || eta > 1.0) throw ParameterError("dropout probability out of [0,1]");
    if (rng.uniform() < eta) return CompactCondition(c.size(), 0.0);
    return c;
}

} // namespace mdtbox
