#include "mdtbox/dit.hpp"

#include <cmath>
#include <cstring>

#include "mdtbox/embed.hpp"
#include "mdtbox/kernels.hpp"

namespace mdtbox {

namespace k = kern;

void ModelConfig::validate() const {
    if (n_enc < 1 || n_dec < 1) throw ConfigError("model needs N1 >= 1 and N2 >= 1");
    if (width <= 0 || width % heads != 0)
        throw ConfigError("model width must be a positive multiple of heads");
    if (latent_h % patch || latent_w % patch)
        throw ShapeError("latent dims must be divisible by the patch size");
    if (width % 4 != 0) throw ConfigError("width must be divisible by 4 for positional tables");
}

MaskSpec make_mask(int L, double ratio, Rng& rng) {
    if (ratio < 0.0 || ratio >= 1.0) throw ParameterError("mask ratio must lie in [0, 1)");
    MaskSpec spec;
    spec.ratio = ratio;
    const int count = static_cast<int>(std::floor(ratio * L));
    spec.masked = rng.sample_without_replacement(L, count);
    spec.kept.reserve(static_cast<size_t>(L - count));
    size_t mi = 0;
    for (int i = 0; i < L; ++i) {
        if (mi < spec.masked.size() && spec.masked[mi] == i) {
            ++mi;
        } else {
            spec.kept.push_back(i);
        }
    }
    return spec;
}

std::pair<TokenSequence, MaskSpec> mask_tokens(const TokenSequence& tokens, double ratio,
                                               Rng& rng) {
    MaskSpec spec = make_mask(tokens.length, ratio, rng);
    TokenSequence kept;
    kept.length = static_cast<int>(spec.kept.size());
    kept.width = tokens.width;
    kept.data.resize(static_cast<size_t>(kept.length) * kept.width);
    for (int r = 0; r < kept.length; ++r)
        std::memcpy(kept.data.data() + static_cast<size_t>(r) * kept.width,
                    tokens.row(spec.kept[static_cast<size_t>(r)]),
                    sizeof(double) * static_cast<size_t>(kept.width));
    return {std::move(kept), std::move(spec)};
}

std::vector<double> concat_hint(const LatentTensor& hint, const LatentTensor& noisy) {
    if (hint.h != noisy.h || hint.w != noisy.w)
        throw ShapeError("concat_hint requires identical spatial dims");
    std::vector<double> out(static_cast<size_t>(8) * hint.h * hint.w);
    std::memcpy(out.data(), hint.data.data(), sizeof(double) * hint.data.size());
    std::memcpy(out.data() + hint.data.size(), noisy.data.data(),
                sizeof(double) * noisy.data.size());
    return out;
}

void patchify(const double* grid, int C, int h, int w, int p, double* out) {
    if (h % p || w % p) throw ShapeError("patchify dims not divisible by patch size");
    const int gh = h / p, gw = w / p;
    const int dim = C * p * p;
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
            double* dst = out + (static_cast<size_t>(py) * gw + px) * dim;
            int i = 0;
            for (int c = 0; c < C; ++c)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        dst[i++] = grid[(static_cast<size_t>(c) * h + py * p + dy) * w +
                                        px * p + dx];
        }
}

void unpatchify(const double* tokens, int C, int h, int w, int p, double* grid) {
    if (h % p || w % p) throw ShapeError("unpatchify dims not divisible by patch size");
    const int gh = h / p, gw = w / p;
    const int dim = C * p * p;
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
            const double* src = tokens + (static_cast<size_t>(py) * gw + px) * dim;
            int i = 0;
            for (int c = 0; c < C; ++c)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        grid[(static_cast<size_t>(c) * h + py * p + dy) * w + px * p + dx] =
                            src[i++];
        }
}

ParamCount count_params(const ModelConfig& cfg) {
    cfg.validate();
    const long long D = cfg.width;
    ParamCount pc;
    pc.patch_embed = D * cfg.in_dim() + D;
    pc.t_embedder = D * cfg.t_freq + D + D * D + D;
    pc.blocks = static_cast<long long>(cfg.blocks()) * (18 * D * D + 15 * D);
    pc.final_layer = (2 * D * D + 2 * D) + (static_cast<long long>(cfg.out_dim()) * D + cfg.out_dim());
    pc.mask_token = D;
    pc.side_interp = (3 * D * D + 3 * D) + (D * D + D);
    return pc;
}

DitModel::DitModel(const ModelConfig& cfg, ParamStore& store, std::string prefix)
    : cfg_(cfg), ps_(&store), prefix_(std::move(prefix)) {
    cfg_.validate();
    const int D = cfg_.width;
    ids_.embed_w = store.add(prefix_ + "embed.w", {D, cfg_.in_dim()});
    ids_.embed_b = store.add(prefix_ + "embed.b", {D});
    ids_.tmlp1_w = store.add(prefix_ + "temb.fc1.w", {D, cfg_.t_freq});
    ids_.tmlp1_b = store.add(prefix_ + "temb.fc1.b", {D});
    ids_.tmlp2_w = store.add(prefix_ + "temb.fc2.w", {D, D});
    ids_.tmlp2_b = store.add(prefix_ + "temb.fc2.b", {D});
    for (int i = 0; i < cfg_.blocks(); ++i) {
        std::string p = prefix_ + "block" + std::to_string(i) + ".";
        ids_.mod_w.push_back(store.add(p + "mod.w", {6 * D, D}));
        ids_.mod_b.push_back(store.add(p + "mod.b", {6 * D}));
        ids_.qkv_w.push_back(store.add(p + "qkv.w", {3 * D, D}));
        ids_.qkv_b.push_back(store.add(p + "qkv.b", {3 * D}));
        ids_.proj_w.push_back(store.add(p + "proj.w", {D, D}));
        ids_.proj_b.push_back(store.add(p + "proj.b", {D}));
        ids_.fc1_w.push_back(store.add(p + "mlp.fc1.w", {4 * D, D}));
        ids_.fc1_b.push_back(store.add(p + "mlp.fc1.b", {4 * D}));
        ids_.fc2_w.push_back(store.add(p + "mlp.fc2.w", {D, 4 * D}));
        ids_.fc2_b.push_back(store.add(p + "mlp.fc2.b", {D}));
    }
    ids_.fmod_w = store.add(prefix_ + "final.mod.w", {2 * D, D});
    ids_.fmod_b = store.add(prefix_ + "final.mod.b", {2 * D});
    ids_.fout_w = store.add(prefix_ + "final.out.w", {cfg_.out_dim(), D});
    ids_.fout_b = store.add(prefix_ + "final.out.b", {cfg_.out_dim()});
    ids_.mask_token = store.add(prefix_ + "mask_token", {D});
    ids_.s_qkv_w = store.add(prefix_ + "side.qkv.w", {3 * D, D});
    ids_.s_qkv_b = store.add(prefix_ + "side.qkv.b", {3 * D});
    ids_.s_proj_w = store.add(prefix_ + "side.proj.w", {D, D});
    ids_.s_proj_b = store.add(prefix_ + "side.proj.b", {D});

    pos_ = sincos_pos_2d(cfg_.latent_h / cfg_.patch, cfg_.latent_w / cfg_.patch, D);
}

void DitModel::init_weights(Rng& rng) {
    ps_->init_xavier_uniform(ids_.embed_w, rng);
    ps_->init_zero(ids_.embed_b);
    ps_->init_normal(ids_.tmlp1_w, rng, 0.02);
    ps_->init_zero(ids_.tmlp1_b);
    ps_->init_normal(ids_.tmlp2_w, rng, 0.02);
    ps_->init_zero(ids_.tmlp2_b);
    for (int i = 0; i < cfg_.blocks(); ++i) {
        // AdaLN-Zero: modulation starts at zero so every block is the identity
        ps_->init_zero(ids_.mod_w[i]);
        ps_->init_zero(ids_.mod_b[i]);
        ps_->init_xavier_uniform(ids_.qkv_w[i], rng);
        ps_->init_zero(ids_.qkv_b[i]);
        ps_->init_xavier_uniform(ids_.proj_w[i], rng);
        ps_->init_zero(ids_.proj_b[i]);
        ps_->init_xavier_uniform(ids_.fc1_w[i], rng);
        ps_->init_zero(ids_.fc1_b[i]);
        ps_->init_xavier_uniform(ids_.fc2_w[i], rng);
        ps_->init_zero(ids_.fc2_b[i]);
    }
    ps_->init_zero(ids_.fmod_w);
    ps_->init_zero(ids_.fmod_b);
    ps_->init_zero(ids_.fout_w); // zero final projection: eps_pred == 0 at init
    ps_->init_zero(ids_.fout_b);
    ps_->init_normal(ids_.mask_token, rng, 0.02);
    ps_->init_xavier_uniform(ids_.s_qkv_w, rng);
    ps_->init_zero(ids_.s_qkv_b);
    ps_->init_zero(ids_.s_proj_w); // side-interpolator starts as the identity
    ps_->init_zero(ids_.s_proj_b);
}

TokenSequence DitModel::side_interpolate(const TokenSequence& z) const {
    const int D = cfg_.width;
    if (z.width != D) throw ShapeError("side_interpolate expects width-D tokens");
    const int L = z.length;
    std::vector<double> qkv(static_cast<size_t>(L) * 3 * D);
    k::matmul_fwd(qkv.data(), z.data.data(), ps_->val(ids_.s_qkv_w), ps_->val(ids_.s_qkv_b), L,
                  D, 3 * D);
    std::vector<double> att(static_cast<size_t>(cfg_.heads) * L * L);
    std::vector<double> atto(static_cast<size_t>(L) * D);
    k::attention_fwd(atto.data(), att.data(), qkv.data(), 1, L, D, cfg_.heads);
    TokenSequence out = z;
    std::vector<double> proj(static_cast<size_t>(L) * D);
    k::matmul_fwd(proj.data(), atto.data(), ps_->val(ids_.s_proj_w), ps_->val(ids_.s_proj_b), L,
                  D, D);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += proj[i];
    return out;
}

size_t DitModel::param_count() const {
    size_t n = 0;
    for (const auto& t : ps_->tensors())
        if (t.name.rfind(prefix_, 0) == 0) n += t.size;
    return n;
}

void DitModel::block_forward(int i, DitBlockActs& a, const double* x, double* y, int B, int L,
                             const double* scond) const {
    const int D = cfg_.width;
    const size_t rows = static_cast<size_t>(B) * L;
    a.L = L;
    a.x_in.assign(x, x + rows * D);
    a.mod.assign(static_cast<size_t>(6) * B * D, 0.0);
    for (int c = 0; c < 6; ++c)
        k::matmul_fwd(a.mod.data() + static_cast<size_t>(c) * B * D, scond,
                      ps_->val(ids_.mod_w[i]) + static_cast<size_t>(c) * D * D,
                      ps_->val(ids_.mod_b[i]) + static_cast<size_t>(c) * D, B, D, D);
    const double* shift1 = a.mod.data();
    const double* scale1 = a.mod.data() + static_cast<size_t>(1) * B * D;
    const double* gate1 = a.mod.data() + static_cast<size_t>(2) * B * D;
    const double* shift2 = a.mod.data() + static_cast<size_t>(3) * B * D;
    const double* scale2 = a.mod.data() + static_cast<size_t>(4) * B * D;
    const double* gate2 = a.mod.data() + static_cast<size_t>(5) * B * D;

    a.ln1_mean.assign(rows, 0.0);
    a.ln1_rstd.assign(rows, 0.0);
    a.h1m.assign(rows * D, 0.0);
    k::layernorm_fwd(a.h1m.data(), a.ln1_mean.data(), a.ln1_rstd.data(), a.x_in.data(),
                     static_cast<int>(rows), D);
    k::modulate_fwd(a.h1m.data(), a.h1m.data(), shift1, scale1, B, L, D);

    a.qkv.assign(rows * 3 * D, 0.0);
    k::matmul_fwd(a.qkv.data(), a.h1m.data(), ps_->val(ids_.qkv_w[i]), ps_->val(ids_.qkv_b[i]),
                  static_cast<int>(rows), D, 3 * D);
    a.att.assign(static_cast<size_t>(B) * cfg_.heads * L * L, 0.0);
    a.atto.assign(rows * D, 0.0);
    k::attention_fwd(a.atto.data(), a.att.data(), a.qkv.data(), B, L, D, cfg_.heads);
    a.attp.assign(rows * D, 0.0);
    k::matmul_fwd(a.attp.data(), a.atto.data(), ps_->val(ids_.proj_w[i]),
                  ps_->val(ids_.proj_b[i]), static_cast<int>(rows), D, D);
    a.xmid.assign(rows * D, 0.0);
    k::gate_add_fwd(a.xmid.data(), a.x_in.data(), gate1, a.attp.data(), B, L, D);

    a.ln2_mean.assign(rows, 0.0);
    a.ln2_rstd.assign(rows, 0.0);
    a.h2m.assign(rows * D, 0.0);
    k::layernorm_fwd(a.h2m.data(), a.ln2_mean.data(), a.ln2_rstd.data(), a.xmid.data(),
                     static_cast<int>(rows), D);
    k::modulate_fwd(a.h2m.data(), a.h2m.data(), shift2, scale2, B, L, D);
    a.f1.assign(rows * 4 * D, 0.0);
    k::matmul_fwd(a.f1.data(), a.h2m.data(), ps_->val(ids_.fc1_w[i]), ps_->val(ids_.fc1_b[i]),
                  static_cast<int>(rows), D, 4 * D);
    a.g.assign(rows * 4 * D, 0.0);
    k::gelu_fwd(a.g.data(), a.f1.data(), a.g.size());
    a.f2.assign(rows * D, 0.0);
    k::matmul_fwd(a.f2.data(), a.g.data(), ps_->val(ids_.fc2_w[i]), ps_->val(ids_.fc2_b[i]),
                  static_cast<int>(rows), 4 * D, D);
    k::gate_add_fwd(y, a.xmid.data(), gate2, a.f2.data(), B, L, D);
}

namespace {

// rebuild layernorm output from saved stats
void recompute_norm(std::vector<double>& out, const std::vector<double>& x,
                    const std::vector<double>& mean, const std::vector<double>& rstd, int R,
                    int C) {
    out.resize(static_cast<size_t>(R) * C);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
            out[static_cast<size_t>(r) * C + c] =
                (x[static_cast<size_t>(r) * C + c] - mean[static_cast<size_t>(r)]) *
                rstd[static_cast<size_t>(r)];
}

} // namespace

void DitModel::block_backward(int i, const DitBlockActs& a, const double* dy, double* dx,
                              const double* scond, double* dscond, double* scratch,
                              int B) const {
    const int D = cfg_.width;
    const int L = a.L;
    const size_t rows = static_cast<size_t>(B) * L;
    const double* scale1 = a.mod.data() + static_cast<size_t>(1) * B * D;
    const double* gate1 = a.mod.data() + static_cast<size_t>(2) * B * D;
    const double* scale2 = a.mod.data() + static_cast<size_t>(4) * B * D;
    const double* gate2 = a.mod.data() + static_cast<size_t>(5) * B * D;

    std::vector<double> dmod(static_cast<size_t>(6) * B * D, 0.0);
    double* dshift1 = dmod.data();
    double* dscale1 = dmod.data() + static_cast<size_t>(1) * B * D;
    double* dgate1 = dmod.data() + static_cast<size_t>(2) * B * D;
    double* dshift2 = dmod.data() + static_cast<size_t>(3) * B * D;
    double* dscale2 = dmod.data() + static_cast<size_t>(4) * B * D;
    double* dgate2 = dmod.data() + static_cast<size_t>(5) * B * D;

    // second residual: y = xmid + gate2 (.) f2
    std::vector<double> dxmid(rows * D, 0.0), df2(rows * D, 0.0);
    k::gate_add_bwd(dxmid.data(), dgate2, df2.data(), dy, gate2, a.f2.data(), B, L, D);

    // mlp
    std::vector<double> dg(rows * 4 * D, 0.0), df1(rows * 4 * D, 0.0), dh2m(rows * D, 0.0);
    k::matmul_bwd_params(ps_->grad(ids_.fc2_w[i]), ps_->grad(ids_.fc2_b[i]), df2.data(),
                         a.g.data(), static_cast<int>(rows), 4 * D, D);
    k::matmul_bwd_input(dg.data(), df2.data(), ps_->val(ids_.fc2_w[i]),
                        static_cast<int>(rows), 4 * D, D);
    k::gelu_bwd(df1.data(), dg.data(), a.f1.data(), dg.size());
    k::matmul_bwd_params(ps_->grad(ids_.fc1_w[i]), ps_->grad(ids_.fc1_b[i]), df1.data(),
                         a.h2m.data(), static_cast<int>(rows), D, 4 * D);
    k::matmul_bwd_input(dh2m.data(), df1.data(), ps_->val(ids_.fc1_w[i]),
                        static_cast<int>(rows), D, 4 * D);

    std::vector<double> norm, dnorm(rows * D, 0.0);
    recompute_norm(norm, a.xmid, a.ln2_mean, a.ln2_rstd, static_cast<int>(rows), D);
    k::modulate_bwd(dnorm.data(), dshift2, dscale2, dh2m.data(), norm.data(), scale2, B, L, D);
    k::layernorm_bwd(dxmid.data(), dnorm.data(), a.xmid.data(), a.ln2_mean.data(),
                     a.ln2_rstd.data(), static_cast<int>(rows), D);

    // first residual: xmid = x_in + gate1 (.) attp
    std::vector<double> dattp(rows * D, 0.0);
    std::fill(dx, dx + rows * D, 0.0);
    k::gate_add_bwd(dx, dgate1, dattp.data(), dxmid.data(), gate1, a.attp.data(), B, L, D);

    // attention
    std::vector<double> datto(rows * D, 0.0), dqkv(rows * 3 * D, 0.0), dh1m(rows * D, 0.0);
    k::matmul_bwd_params(ps_->grad(ids_.proj_w[i]), ps_->grad(ids_.proj_b[i]), dattp.data(),
                         a.atto.data(), static_cast<int>(rows), D, D);
    k::matmul_bwd_input(datto.data(), dattp.data(), ps_->val(ids_.proj_w[i]),
                        static_cast<int>(rows), D, D);
    k::attention_bwd(dqkv.data(), datto.data(), a.att.data(), a.qkv.data(), scratch, B, L, D,
                     cfg_.heads);
    k::matmul_bwd_params(ps_->grad(ids_.qkv_w[i]), ps_->grad(ids_.qkv_b[i]), dqkv.data(),
                         a.h1m.data(), static_cast<int>(rows), D, 3 * D);
    k::matmul_bwd_input(dh1m.data(), dqkv.data(), ps_->val(ids_.qkv_w[i]),
                        static_cast<int>(rows), D, 3 * D);

    std::fill(dnorm.begin(), dnorm.end(), 0.0);
    recompute_norm(norm, a.x_in, a.ln1_mean, a.ln1_rstd, static_cast<int>(rows), D);
    k::modulate_bwd(dnorm.data(), dshift1, dscale1, dh1m.data(), norm.data(), scale1, B, L, D);
    k::layernorm_bwd(dx, dnorm.data(), a.x_in.data(), a.ln1_mean.data(), a.ln1_rstd.data(),
                     static_cast<int>(rows), D);

    // modulation parameters and the conditioning gradient
    for (int c = 0; c < 6; ++c) {
        k::matmul_bwd_params(ps_->grad(ids_.mod_w[i]) + static_cast<size_t>(c) * D * D,
                             ps_->grad(ids_.mod_b[i]) + static_cast<size_t>(c) * D,
                             dmod.data() + static_cast<size_t>(c) * B * D, scond, B, D, D);
        k::matmul_bwd_input(dscond, dmod.data() + static_cast<size_t>(c) * B * D,
                            ps_->val(ids_.mod_w[i]) + static_cast<size_t>(c) * D * D, B, D, D);
    }
}

void DitModel::forward(DitPass& p, const double* ycat, const double* c, const int* t, int B,
                       const std::vector<MaskSpec>* specs) const {
    const int D = cfg_.width;
    const int L = cfg_.tokens();
    const int in_dim = cfg_.in_dim();
    const int out_dim = cfg_.out_dim();
    const int lh = cfg_.latent_h, lw = cfg_.latent_w;
    const size_t cat_sz = static_cast<size_t>(8) * lh * lw;

    p.B = B;
    p.masked = specs != nullptr;
    if (p.masked) {
        if (static_cast<int>(specs->size()) != B)
            throw ShapeError("mask specs count mismatches the batch");
        p.specs = *specs;
        const size_t kept0 = p.specs[0].kept.size();
        for (const auto& s : p.specs)
            if (s.kept.size() != kept0) throw ShapeError("mask specs must share the kept count");
    } else {
        p.specs.clear();
    }

    p.patches.assign(static_cast<size_t>(B) * L * in_dim, 0.0);
    for (int b = 0; b < B; ++b)
        patchify(ycat + static_cast<size_t>(b) * cat_sz, 8, lh, lw, cfg_.patch,
                 p.patches.data() + static_cast<size_t>(b) * L * in_dim);
    p.tok0.assign(static_cast<size_t>(B) * L * D, 0.0);
    k::matmul_fwd(p.tok0.data(), p.patches.data(), ps_->val(ids_.embed_w),
                  ps_->val(ids_.embed_b), B * L, in_dim, D);
    for (int b = 0; b < B; ++b)
        k::add_inplace(p.tok0.data() + static_cast<size_t>(b) * L * D, pos_.data(), pos_.size());

    // conditioning: cond = t_embedder(t) + c, both width D
    p.tfreq.assign(static_cast<size_t>(B) * cfg_.t_freq, 0.0);
    for (int b = 0; b < B; ++b)
        timestep_embedding(static_cast<double>(t[b]), cfg_.t_freq,
                           p.tfreq.data() + static_cast<size_t>(b) * cfg_.t_freq);
    p.th.assign(static_cast<size_t>(B) * D, 0.0);
    k::matmul_fwd(p.th.data(), p.tfreq.data(), ps_->val(ids_.tmlp1_w), ps_->val(ids_.tmlp1_b),
                  B, cfg_.t_freq, D);
    p.ths.assign(static_cast<size_t>(B) * D, 0.0);
    k::silu_fwd(p.ths.data(), p.th.data(), p.ths.size());
    p.temb.assign(static_cast<size_t>(B) * D, 0.0);
    k::matmul_fwd(p.temb.data(), p.ths.data(), ps_->val(ids_.tmlp2_w), ps_->val(ids_.tmlp2_b),
                  B, D, D);
    p.cond.assign(static_cast<size_t>(B) * D, 0.0);
    for (size_t i = 0; i < p.cond.size(); ++i) p.cond[i] = p.temb[i] + c[i];
    p.scond.assign(static_cast<size_t>(B) * D, 0.0);
    k::silu_fwd(p.scond.data(), p.cond.data(), p.scond.size());

    p.blocks.resize(static_cast<size_t>(cfg_.blocks()));
    const int Lk = p.masked ? static_cast<int>(p.specs[0].kept.size()) : L;

    std::vector<double> xbuf;
    if (p.masked) {
        p.kept_idx.resize(static_cast<size_t>(B) * Lk);
        for (int b = 0; b < B; ++b)
            for (int r = 0; r < Lk; ++r)
                p.kept_idx[static_cast<size_t>(b) * Lk + r] =
                    b * L + p.specs[static_cast<size_t>(b)].kept[static_cast<size_t>(r)];
        p.enc_in.assign(static_cast<size_t>(B) * Lk * D, 0.0);
        k::gather_rows(p.enc_in.data(), p.tok0.data(), p.kept_idx.data(), B * Lk, D);
        xbuf = p.enc_in;
    } else {
        xbuf = p.tok0;
    }

    for (int i = 0; i < cfg_.n_enc; ++i)
        block_forward(i, p.blocks[static_cast<size_t>(i)], xbuf.data(), xbuf.data(), B, Lk,
                      p.scond.data());

    if (p.masked) {
        // restore the full sequence: mask token + positions at masked slots
        p.side_in.assign(static_cast<size_t>(B) * L * D, 0.0);
        const double* mtok = ps_->val(ids_.mask_token);
        for (int b = 0; b < B; ++b) {
            double* base = p.side_in.data() + static_cast<size_t>(b) * L * D;
            for (int idx : p.specs[static_cast<size_t>(b)].masked) {
                double* row = base + static_cast<size_t>(idx) * D;
                const double* pe = pos_.data() + static_cast<size_t>(idx) * D;
                for (int d = 0; d < D; ++d) row[d] = mtok[d] + pe[d];
            }
        }
        for (int r = 0; r < B * Lk; ++r)
            std::memcpy(p.side_in.data() + static_cast<size_t>(p.kept_idx[r]) * D,
                        xbuf.data() + static_cast<size_t>(r) * D, sizeof(double) * D);

        // side-interpolator: z + selfattention(z)
        p.side_qkv.assign(static_cast<size_t>(B) * L * 3 * D, 0.0);
        k::matmul_fwd(p.side_qkv.data(), p.side_in.data(), ps_->val(ids_.s_qkv_w),
                      ps_->val(ids_.s_qkv_b), B * L, D, 3 * D);
        p.side_att.assign(static_cast<size_t>(B) * cfg_.heads * L * L, 0.0);
        p.side_atto.assign(static_cast<size_t>(B) * L * D, 0.0);
        k::attention_fwd(p.side_atto.data(), p.side_att.data(), p.side_qkv.data(), B, L, D,
                         cfg_.heads);
        p.side_proj.assign(static_cast<size_t>(B) * L * D, 0.0);
        k::matmul_fwd(p.side_proj.data(), p.side_atto.data(), ps_->val(ids_.s_proj_w),
                      ps_->val(ids_.s_proj_b), B * L, D, D);
        xbuf.resize(static_cast<size_t>(B) * L * D);
        for (size_t i = 0; i < xbuf.size(); ++i) xbuf[i] = p.side_in[i] + p.side_proj[i];
    }

    for (int i = cfg_.n_enc; i < cfg_.blocks(); ++i)
        block_forward(i, p.blocks[static_cast<size_t>(i)], xbuf.data(), xbuf.data(), B, L,
                      p.scond.data());
    p.x_final = xbuf;

    // final layer: LN -> modulate -> linear -> unpatchify
    const size_t rows = static_cast<size_t>(B) * L;
    p.lnf_mean.assign(rows, 0.0);
    p.lnf_rstd.assign(rows, 0.0);
    p.hfm.assign(rows * D, 0.0);
    k::layernorm_fwd(p.hfm.data(), p.lnf_mean.data(), p.lnf_rstd.data(), p.x_final.data(),
                     static_cast<int>(rows), D);
    p.fmod.assign(static_cast<size_t>(2) * B * D, 0.0);
    for (int cix = 0; cix < 2; ++cix)
        k::matmul_fwd(p.fmod.data() + static_cast<size_t>(cix) * B * D, p.scond.data(),
                      ps_->val(ids_.fmod_w) + static_cast<size_t>(cix) * D * D,
                      ps_->val(ids_.fmod_b) + static_cast<size_t>(cix) * D, B, D, D);
    k::modulate_fwd(p.hfm.data(), p.hfm.data(), p.fmod.data(),
                    p.fmod.data() + static_cast<size_t>(B) * D, B, L, D);
    p.out_tokens.assign(rows * out_dim, 0.0);
    k::matmul_fwd(p.out_tokens.data(), p.hfm.data(), ps_->val(ids_.fout_w),
                  ps_->val(ids_.fout_b), static_cast<int>(rows), D, out_dim);
    p.eps.assign(static_cast<size_t>(B) * 4 * lh * lw, 0.0);
    for (int b = 0; b < B; ++b)
        unpatchify(p.out_tokens.data() + static_cast<size_t>(b) * L * out_dim, 4, lh, lw,
                   cfg_.patch, p.eps.data() + static_cast<size_t>(b) * 4 * lh * lw);

    p.scratch.assign(static_cast<size_t>(B) * cfg_.heads * L * L, 0.0);
}

void DitModel::backward(DitPass& p, const double* d_eps, double* dc) const {
    const int B = p.B;
    const int D = cfg_.width;
    const int L = cfg_.tokens();
    const int out_dim = cfg_.out_dim();
    const int lh = cfg_.latent_h, lw = cfg_.latent_w;
    const size_t rows = static_cast<size_t>(B) * L;
    const int Lk = p.masked ? static_cast<int>(p.specs[0].kept.size()) : L;

    std::vector<double> dscond(static_cast<size_t>(B) * D, 0.0);

    // final layer
    std::vector<double> dout(rows * out_dim, 0.0);
    for (int b = 0; b < B; ++b)
        patchify(d_eps + static_cast<size_t>(b) * 4 * lh * lw, 4, lh, lw, cfg_.patch,
                 dout.data() + static_cast<size_t>(b) * L * out_dim);
    k::matmul_bwd_params(ps_->grad(ids_.fout_w), ps_->grad(ids_.fout_b), dout.data(),
                         p.hfm.data(), static_cast<int>(rows), D, out_dim);
    std::vector<double> dhfm(rows * D, 0.0);
    k::matmul_bwd_input(dhfm.data(), dout.data(), ps_->val(ids_.fout_w),
                        static_cast<int>(rows), D, out_dim);

    std::vector<double> normf, dnormf(rows * D, 0.0);
    recompute_norm(normf, p.x_final, p.lnf_mean, p.lnf_rstd, static_cast<int>(rows), D);
    std::vector<double> dfmod(static_cast<size_t>(2) * B * D, 0.0);
    k::modulate_bwd(dnormf.data(), dfmod.data(), dfmod.data() + static_cast<size_t>(B) * D,
                    dhfm.data(), normf.data(), p.fmod.data() + static_cast<size_t>(B) * D, B, L,
                    D);
    for (int cix = 0; cix < 2; ++cix) {
        k::matmul_bwd_params(ps_->grad(ids_.fmod_w) + static_cast<size_t>(cix) * D * D,
                             ps_->grad(ids_.fmod_b) + static_cast<size_t>(cix) * D,
                             dfmod.data() + static_cast<size_t>(cix) * B * D, p.scond.data(), B,
                             D, D);
        k::matmul_bwd_input(dscond.data(), dfmod.data() + static_cast<size_t>(cix) * B * D,
                            ps_->val(ids_.fmod_w) + static_cast<size_t>(cix) * D * D, B, D, D);
    }
    std::vector<double> dx(rows * D, 0.0);
    k::layernorm_bwd(dx.data(), dnormf.data(), p.x_final.data(), p.lnf_mean.data(),
                     p.lnf_rstd.data(), static_cast<int>(rows), D);

    // decoder blocks
    std::vector<double> dprev(rows * D, 0.0);
    for (int i = cfg_.blocks() - 1; i >= cfg_.n_enc; --i) {
        block_backward(i, p.blocks[static_cast<size_t>(i)], dx.data(), dprev.data(),
                       p.scond.data(), dscond.data(), p.scratch.data(), B);
        std::swap(dx, dprev);
    }

    if (p.masked) {
        // side-interpolator backward
        std::vector<double> dside_in(dx); // residual branch
        k::matmul_bwd_params(ps_->grad(ids_.s_proj_w), ps_->grad(ids_.s_proj_b), dx.data(),
                             p.side_atto.data(), static_cast<int>(rows), D, D);
        std::vector<double> datto(rows * D, 0.0);
        k::matmul_bwd_input(datto.data(), dx.data(), ps_->val(ids_.s_proj_w),
                            static_cast<int>(rows), D, D);
        std::vector<double> dqkv(rows * 3 * D, 0.0);
        k::attention_bwd(dqkv.data(), datto.data(), p.side_att.data(), p.side_qkv.data(),
                         p.scratch.data(), B, L, D, cfg_.heads);
        k::matmul_bwd_params(ps_->grad(ids_.s_qkv_w), ps_->grad(ids_.s_qkv_b), dqkv.data(),
                             p.side_in.data(), static_cast<int>(rows), D, 3 * D);
        k::matmul_bwd_input(dside_in.data(), dqkv.data(), ps_->val(ids_.s_qkv_w),
                            static_cast<int>(rows), D, 3 * D);

        // split: kept rows flow back into the encoder, masked rows into the token
        double* dmtok = ps_->grad(ids_.mask_token);
        for (int b = 0; b < B; ++b)
            for (int idx : p.specs[static_cast<size_t>(b)].masked) {
                const double* row =
                    dside_in.data() + (static_cast<size_t>(b) * L + idx) * D;
                for (int d = 0; d < D; ++d) dmtok[d] += row[d];
            }
        std::vector<double> denc(static_cast<size_t>(B) * Lk * D, 0.0);
        k::gather_rows(denc.data(), dside_in.data(), p.kept_idx.data(), B * Lk, D);
        dx = std::move(denc);
        dprev.assign(dx.size(), 0.0);
    }

    for (int i = cfg_.n_enc - 1; i >= 0; --i) {
        block_backward(i, p.blocks[static_cast<size_t>(i)], dx.data(), dprev.data(),
                       p.scond.data(), dscond.data(), p.scratch.data(), B);
        std::swap(dx, dprev);
    }

    // token gradient back to the embedding
    std::vector<double> dtok0;
    if (p.masked) {
        dtok0.assign(static_cast<size_t>(B) * L * D, 0.0);
        k::scatter_add_rows(dtok0.data(), dx.data(), p.kept_idx.data(), B * Lk, D);
    } else {
        dtok0 = std::move(dx);
    }
    k::matmul_bwd_params(ps_->grad(ids_.embed_w), ps_->grad(ids_.embed_b), dtok0.data(),
                         p.patches.data(), B * L, cfg_.in_dim(), D);

    // conditioning chain
    std::vector<double> dcond(static_cast<size_t>(B) * D, 0.0);
    k::silu_bwd(dcond.data(), dscond.data(), p.cond.data(), dcond.size());
    k::add_inplace(dc, dcond.data(), dcond.size());
    k::matmul_bwd_params(ps_->grad(ids_.tmlp2_w), ps_->grad(ids_.tmlp2_b), dcond.data(),
                         p.ths.data(), B, D, D);
    std::vector<double> dths(static_cast<size_t>(B) * D, 0.0);
    k::matmul_bwd_input(dths.data(), dcond.data(), ps_->val(ids_.tmlp2_w), B, D, D);
    std::vector<double> dth(static_cast<size_t>(B) * D, 0.0);
    k::silu_bwd(dth.data(), dths.data(), p.th.data(), dth.size());
    k::matmul_bwd_params(ps_->grad(ids_.tmlp1_w), ps_->grad(ids_.tmlp1_b), dth.data(),
                         p.tfreq.data(), B, cfg_.t_freq, D);
}

} // namespace mdtbox
