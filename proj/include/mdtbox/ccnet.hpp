#pragma once

#include <vector>

#include "mdtbox/codec.hpp"
#include "mdtbox/extractor.hpp"
#include "mdtbox/params.hpp"
#include "mdtbox/rng.hpp"

namespace mdtbox {

// Width-D condition vector; the zero vector is the null condition used for
// classifier-free guidance.
using CompactCondition = std::vector<double>;

struct CCNetConfig {
    int latent_h = 16, latent_w = 16; // source latent grid
    int patch = 2;
    int width = 128;          // D, must match the transformer width
    int feat_width = 64;      // extractor token width
    int extractor_tokens = 65; // tokens per extractor call

    int lsif_tokens() const { return (latent_h / patch) * (latent_w / patch); }
    int gsif_tokens() const { return 2 * extractor_tokens; }
    int fusion_len() const { return lsif_tokens() + 1 + gsif_tokens(); }
    void validate() const;
};

// Per-batch activations kept for the backward pass.
struct CCNetActs {
    int B = 0;
    std::vector<double> lsif_patches; // [B*Lx, 4*p*p]
    std::vector<double> lsif;         // [B*Lx, D]
    std::vector<double> tbf_tokens;   // [B, Lt, Df] (frozen extractor output)
    std::vector<double> tbf_red;      // [B, Df]
    std::vector<double> vb;           // [B, D]
    std::vector<double> gsif_in;      // [B*2Lt, Df]
    std::vector<double> gsif;         // [B*2Lt, D]
    std::vector<double> stack;        // [B, m, D]
    std::vector<double> c;            // [B, D]
};

// Conditions Collector: fuses local source latent tokens (LSIF), the reduced
// box-visualization feature v_B, and the MLP-combined global source/hint
// features (GSIF) into one compact width-D vector per sample.
class CCNetModel {
public:
    CCNetModel(const CCNetConfig& cfg, ParamStore& store, std::string prefix = "ccnet.");
    void init_weights(Rng& rng); // call after store.finalize()

    const CCNetConfig& config() const { return cfg_; }
    bool has_proj() const { return cfg_.feat_width != cfg_.width; }

    // --- single-sample operations ---
    TokenSequence extract_lsif(const LatentTensor& source_latent) const;
    std::vector<double> compute_tbf(const ImageTensor& box_viz,
                                    const ExtractorModel& extractor) const;
    TokenSequence compute_gsif(const TokenSequence& source_tokens,
                               const TokenSequence& hint_tokens) const;
    CompactCondition collect_condition(const TokenSequence& lsif, const std::vector<double>& v_b,
                                       const TokenSequence& gsif) const;
    CompactCondition condition_for(const SceneSample& sample, const CodecModel& codec,
                                   const ExtractorModel& extractor) const;

    // --- batched training path ---
    // source_latents: [B, 4, h, w]; token inputs: [B, Lt, Df] each.
    void forward(CCNetActs& a, const double* source_latents, const double* tbf_tokens,
                 const double* src_tokens, const double* hint_tokens, int B) const;
    // dc: [B, D]; accumulates parameter gradients.
    void backward(const CCNetActs& a, const double* dc) const;

    size_t param_count() const;

private:
    CCNetConfig cfg_;
    ParamStore* ps_;
    std::string prefix_;
    std::vector<double> pos_lsif_; // fixed sinusoidal [Lx, D]
    struct Ids {
        int lsif_w, lsif_b;
        int tbf_rw, tbf_rb;
        int tbf_pw = -1, tbf_pb = -1; // projection present only when Df != D
        int gsif_w, gsif_b;
        int fus_w, fus_b;
    } ids_;
};

// Training-time condition dropout: the zero vector with probability eta.
CompactCondition drop_condition(const CompactCondition& c, double eta, Rng& rng);

} // namespace mdtbox
