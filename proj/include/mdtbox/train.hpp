#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "mdtbox/ccnet.hpp"
#include "mdtbox/codec.hpp"
#include "mdtbox/config.hpp"
#include "mdtbox/data_synth.hpp"
#include "mdtbox/diffusion.hpp"
#include "mdtbox/dit.hpp"
#include "mdtbox/extractor.hpp"

namespace mdtbox {

struct TrainConfig {
    double lr = 1e-4;
    int batch = 16;
    int steps = 3000;
    double mask_ratio = 0.3;
    double lambda_mask = 1.0; // weight of the masked denoising loss
    double eta_dropout = 0.1; // condition dropout probability
    double ema_decay = 0.995;
    uint64_t seed = 0;
    int T = 1000;
    double beta_min = 1e-4, beta_max = 2e-2;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    ModelConfig model;          // latent dims are derived from the dataset
    ExtractorConfig extractor;
    CodecConfig codec;
    std::string codec_checkpoint; // when non-empty, load instead of building

    void validate() const;
};

KvConfig train_config_to_kv(const TrainConfig& cfg);
TrainConfig train_config_from_kv(const KvConfig& kv); // rejects unknown keys

struct LossTriple {
    double join = 0.0, denoising = 0.0, denoising_mask = 0.0;
};

// One training step's random draws; frozen so a loss can be re-evaluated at
// perturbed parameters (gradient checking) or resumed deterministically.
struct StepDraws {
    std::vector<int> sample_idx;
    std::vector<int> t;
    std::vector<double> eps; // [B, 4, h, w]
    std::vector<char> drop;
    std::vector<MaskSpec> masks;
};

struct Batch {
    int B = 0;
    std::vector<double> y0;   // target latents [B,4,h,w]
    std::vector<double> hint; // hint latents
    std::vector<double> src;  // source latents
    std::vector<double> tbf_tokens, src_tokens, hint_tokens; // [B, Lt, Df]
};

// Everything needed to run the model outside training (sampling, eval).
struct ModelBundle {
    TrainConfig cfg;
    std::unique_ptr<ParamStore> ps;
    std::unique_ptr<DitModel> dit;
    std::unique_ptr<CCNetModel> ccnet;
    std::unique_ptr<ExtractorModel> extractor;
    CodecModel codec;
    NoiseSchedule noise;
    int64_t step = 0;
};

ModelBundle load_bundle(const std::filesystem::path& ckpt, bool use_ema);

// ema' = decay * ema + (1 - decay) * w, elementwise.
void ema_update(std::vector<double>& ema, const std::vector<double>& w, double decay);

class Trainer {
public:
    Trainer(TrainConfig cfg, Dataset data);

    LossTriple train_step();
    // one optimizer update on a caller-fixed batch and draw set
    LossTriple step_with(const Batch& batch, const StepDraws& draws);
    StepDraws draw_step(); // advances the training rng streams
    Batch assemble(const std::vector<int>& idx) const;
    LossTriple compute_joint_loss(const Batch& batch, const StepDraws& draws,
                                  bool with_backward);

    void save_checkpoint(const std::filesystem::path& path) const;
    // Restores weights, optimizer, EMA and rng streams; the config embedded in
    // the checkpoint must hash-match `cfg`.
    void restore(const std::filesystem::path& path);

    int64_t step() const { return step_; }
    const std::vector<LossTriple>& history() const { return history_; }
    const TrainConfig& config() const { return cfg_; }
    ParamStore& params() { return *ps_; }
    const std::vector<double>& ema() const { return ema_; }
    const CodecModel& codec() const { return codec_; }
    const ExtractorModel& extractor() const { return *extractor_; }
    const CCNetModel& ccnet() const { return *ccnet_; }
    const DitModel& dit() const { return *dit_; }
    const Dataset& data() const { return data_; }
    const NoiseSchedule& noise() const { return noise_; }

private:
    TrainConfig cfg_;
    Dataset data_;
    CodecModel codec_;
    std::unique_ptr<ExtractorModel> extractor_;
    std::unique_ptr<ParamStore> ps_;
    std::unique_ptr<DitModel> dit_;
    std::unique_ptr<CCNetModel> ccnet_;
    NoiseSchedule noise_;
    std::vector<double> ema_, adam_m_, adam_v_;
    int64_t step_ = 0;
    Rng rng_batch_, rng_noise_, rng_mask_, rng_drop_;
    std::vector<LossTriple> history_;
    // reused activations
    DitPass pass_full_, pass_mask_;
    CCNetActs ccnet_acts_;
};

} // namespace mdtbox
