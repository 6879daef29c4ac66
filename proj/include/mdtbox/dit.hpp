#pragma once

#include <string>
#include <vector>

#include "mdtbox/codec.hpp"
#include "mdtbox/extractor.hpp"
#include "mdtbox/params.hpp"
#include "mdtbox/rng.hpp"

namespace mdtbox {

struct ModelConfig {
    int n_enc = 4, n_dec = 2; // encoder/decoder block split (N1, N2)
    int width = 128;          // D
    int heads = 8;
    int patch = 2;
    int latent_h = 16, latent_w = 16;
    int latent_ch = 4, hint_ch = 4;
    int t_freq = 256; // timestep frequency-embedding size

    int blocks() const { return n_enc + n_dec; }
    int tokens() const { return (latent_h / patch) * (latent_w / patch); }
    int in_dim() const { return (latent_ch + hint_ch) * patch * patch; }
    int out_dim() const { return latent_ch * patch * patch; }
    void validate() const;
};

// Random token mask: |masked| = floor(ratio * L), unique positions, kept
// tokens preserve their original relative order.
struct MaskSpec {
    double ratio = 0.0;
    std::vector<int> masked; // ascending
    std::vector<int> kept;   // ascending complement
};

MaskSpec make_mask(int L, double ratio, Rng& rng);
std::pair<TokenSequence, MaskSpec> mask_tokens(const TokenSequence& tokens, double ratio,
                                               Rng& rng);

// Channel-stack [hint(4), noisy(4)] -> [8, h, w].
std::vector<double> concat_hint(const LatentTensor& hint, const LatentTensor& noisy);

// Raster-order patch extraction [C,h,w] -> [(h/p)(w/p), C*p*p] and its exact
// inverse. The channel-fastest order inside a patch is (c, dy, dx).
void patchify(const double* grid, int C, int h, int w, int p, double* out);
void unpatchify(const double* tokens, int C, int h, int w, int p, double* grid);

struct ParamCount {
    long long patch_embed = 0, t_embedder = 0, blocks = 0, final_layer = 0;
    long long mask_token = 0, side_interp = 0;
    long long core() const { return patch_embed + t_embedder + blocks + final_layer; }
    long long total() const { return core() + mask_token + side_interp; }
};

// Analytic parameter count of the transformer (no allocation).
ParamCount count_params(const ModelConfig& cfg);

// Activations of one forward pass, kept for backward. Reused across calls.
struct DitBlockActs {
    int L = 0;
    std::vector<double> x_in, mod, ln1_mean, ln1_rstd, h1m, qkv, att, atto, attp;
    std::vector<double> xmid, ln2_mean, ln2_rstd, h2m, f1, g, f2;
};

struct DitPass {
    int B = 0;
    bool masked = false;
    std::vector<MaskSpec> specs;
    std::vector<double> patches, tok0;
    std::vector<double> tfreq, th, ths, temb, cond, scond;
    std::vector<int> kept_idx;                   // [B*Lk] flat row indices
    std::vector<double> enc_in;                  // gathered kept tokens
    std::vector<double> side_in, side_qkv, side_att, side_atto, side_proj;
    std::vector<DitBlockActs> blocks;
    std::vector<double> x_final;                 // decoder output
    std::vector<double> lnf_mean, lnf_rstd, hfm, fmod;
    std::vector<double> out_tokens;
    std::vector<double> eps;                     // [B, 4, h, w]
    std::vector<double> scratch;                 // attention backward workspace
};

// Denoising transformer with AdaLN-Zero conditioning and the asymmetric
// masked path (encoder on kept tokens, side-interpolator, full decoder).
// Both paths share the same block weights.
class DitModel {
public:
    DitModel(const ModelConfig& cfg, ParamStore& store, std::string prefix = "dit.");
    void init_weights(Rng& rng); // store must be finalized

    const ModelConfig& config() const { return cfg_; }

    // y_cat: [B, 8, h, w]; c: [B, D]; t: [B]; specs null for the full path.
    // Fills p.eps with the predicted noise [B, 4, h, w].
    void forward(DitPass& p, const double* ycat, const double* c, const int* t, int B,
                 const std::vector<MaskSpec>* specs) const;
    // d_eps: [B, 4, h, w]. Accumulates parameter grads; adds dL/dc into dc.
    void backward(DitPass& p, const double* d_eps, double* dc) const;

    // Side-interpolator as a standalone map: z + selfattention(z). The input
    // is the full-length sequence with masked slots already filled.
    TokenSequence side_interpolate(const TokenSequence& z) const;

    size_t param_count() const; // enumerated from the registry

private:
    void block_forward(int i, DitBlockActs& a, const double* x, double* y, int B, int L,
                       const double* scond) const;
    void block_backward(int i, const DitBlockActs& a, const double* dy, double* dx,
                        const double* scond, double* dscond, double* scratch, int B) const;

    ModelConfig cfg_;
    ParamStore* ps_;
    std::string prefix_;
    std::vector<double> pos_; // [L, D] fixed sinusoidal
    struct Ids {
        int embed_w, embed_b;
        int tmlp1_w, tmlp1_b, tmlp2_w, tmlp2_b;
        std::vector<int> mod_w, mod_b, qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b;
        int fmod_w, fmod_b, fout_w, fout_b;
        int mask_token;
        int s_qkv_w, s_qkv_b, s_proj_w, s_proj_b;
    } ids_;
};

} // namespace mdtbox
