#include "mdtbox/train.hpp"

#include <cmath>
#include <cstdio>

#include "mdtbox/kernels.hpp"

namespace mdtbox {

namespace k = kern;
using nlohmann::json;

void TrainConfig::validate() const {
    if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
    if (batch <= 0 || steps < 0) throw ConfigError("batch/steps invalid");
    if (mask_ratio < 0.0 || mask_ratio >= 1.0) throw ConfigError("mask ratio out of [0,1)");
    if (lambda_mask < 0.0) throw ConfigError("lambda must be >= 0");
    if (eta_dropout < 0.0 || eta_dropout > 1.0) throw ConfigError("eta out of [0,1]");
    if (ema_decay <= 0.0 || ema_decay >= 1.0) throw ConfigError("EMA decay out of (0,1)");
    if (T <= 0) throw ConfigError("T must be positive");
    model.validate();
}

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double(const std::string& s, const std::string& key) {
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (...) {
        throw ConfigError("key " + key + ": cannot parse '" + s + "' as a number");
    }
}

int parse_int(const std::string& s, const std::string& key) {
    try {
        size_t pos = 0;
        long v = std::stol(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return static_cast<int>(v);
    } catch (...) {
        throw ConfigError("key " + key + ": cannot parse '" + s + "' as an integer");
    }
}

uint64_t parse_u64(const std::string& s, const std::string& key) {
    try {
        size_t pos = 0;
        unsigned long long v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (...) {
        throw ConfigError("key " + key + ": cannot parse '" + s + "' as an integer");
    }
}

} // namespace

KvConfig train_config_to_kv(const TrainConfig& c) {
    KvConfig kv;
    kv["seed"] = std::to_string(c.seed);
    kv["train.lr"] = fmt_double(c.lr);
    kv["train.batch"] = std::to_string(c.batch);
    kv["train.steps"] = std::to_string(c.steps);
    kv["train.mask_ratio"] = fmt_double(c.mask_ratio);
    kv["train.lambda"] = fmt_double(c.lambda_mask);
    kv["train.eta"] = fmt_double(c.eta_dropout);
    kv["train.ema_decay"] = fmt_double(c.ema_decay);
    kv["diffusion.T"] = std::to_string(c.T);
    kv["diffusion.beta_min"] = fmt_double(c.beta_min);
    kv["diffusion.beta_max"] = fmt_double(c.beta_max);
    kv["adam.beta1"] = fmt_double(c.adam_beta1);
    kv["adam.beta2"] = fmt_double(c.adam_beta2);
    kv["adam.eps"] = fmt_double(c.adam_eps);
    kv["model.n_enc"] = std::to_string(c.model.n_enc);
    kv["model.n_dec"] = std::to_string(c.model.n_dec);
    kv["model.width"] = std::to_string(c.model.width);
    kv["model.heads"] = std::to_string(c.model.heads);
    kv["model.patch"] = std::to_string(c.model.patch);
    kv["model.t_freq"] = std::to_string(c.model.t_freq);
    kv["model.latent_h"] = std::to_string(c.model.latent_h);
    kv["model.latent_w"] = std::to_string(c.model.latent_w);
    kv["codec.mode"] = c.codec.mode == CodecMode::block ? "block" : "learned";
    kv["codec.f"] = std::to_string(c.codec.f);
    kv["codec.seed"] = std::to_string(c.codec.seed);
    kv["codec.hidden"] = std::to_string(c.codec.hidden);
    kv["codec.checkpoint"] = c.codec_checkpoint;
    kv["extractor.patch"] = std::to_string(c.extractor.patch);
    kv["extractor.width"] = std::to_string(c.extractor.width);
    kv["extractor.depth"] = std::to_string(c.extractor.depth);
    kv["extractor.heads"] = std::to_string(c.extractor.heads);
    kv["extractor.seed"] = std::to_string(c.extractor.seed);
    return kv;
}

TrainConfig train_config_from_kv(const KvConfig& kv) {
    TrainConfig c;
    KvConfig defaults = train_config_to_kv(c);
    for (const auto& [key, val] : kv)
        if (!defaults.count(key)) throw ConfigError("unknown config key " + key);

    auto get = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        return it == kv.end() ? defaults.at(key) : it->second;
    };
    c.seed = parse_u64(get("seed"), "seed");
    c.lr = parse_double(get("train.lr"), "train.lr");
    c.batch = parse_int(get("train.batch"), "train.batch");
    c.steps = parse_int(get("train.steps"), "train.steps");
    c.mask_ratio = parse_double(get("train.mask_ratio"), "train.mask_ratio");
    c.lambda_mask = parse_double(get("train.lambda"), "train.lambda");
    c.eta_dropout = parse_double(get("train.eta"), "train.eta");
    c.ema_decay = parse_double(get("train.ema_decay"), "train.ema_decay");
    c.T = parse_int(get("diffusion.T"), "diffusion.T");
    c.beta_min = parse_double(get("diffusion.beta_min"), "diffusion.beta_min");
    c.beta_max = parse_double(get("diffusion.beta_max"), "diffusion.beta_max");
    c.adam_beta1 = parse_double(get("adam.beta1"), "adam.beta1");
    c.adam_beta2 = parse_double(get("adam.beta2"), "adam.beta2");
    c.adam_eps = parse_double(get("adam.eps"), "adam.eps");
    c.model.n_enc = parse_int(get("model.n_enc"), "model.n_enc");
    c.model.n_dec = parse_int(get("model.n_dec"), "model.n_dec");
    c.model.width = parse_int(get("model.width"), "model.width");
    c.model.heads = parse_int(get("model.heads"), "model.heads");
    c.model.patch = parse_int(get("model.patch"), "model.patch");
    c.model.t_freq = parse_int(get("model.t_freq"), "model.t_freq");
    c.model.latent_h = parse_int(get("model.latent_h"), "model.latent_h");
    c.model.latent_w = parse_int(get("model.latent_w"), "model.latent_w");
    std::string mode = get("codec.mode");
    if (mode == "block")
        c.codec.mode = CodecMode::block;
    else if (mode == "learned")
        c.codec.mode = CodecMode::learned;
    else
        throw ConfigError("codec.mode must be block or learned");
    c.codec.f = parse_int(get("codec.f"), "codec.f");
    c.codec.seed = parse_u64(get("codec.seed"), "codec.seed");
    c.codec.hidden = parse_int(get("codec.hidden"), "codec.hidden");
    c.codec_checkpoint = get("codec.checkpoint");
    c.extractor.patch = parse_int(get("extractor.patch"), "extractor.patch");
    c.extractor.width = parse_int(get("extractor.width"), "extractor.width");
    c.extractor.depth = parse_int(get("extractor.depth"), "extractor.depth");
    c.extractor.heads = parse_int(get("extractor.heads"), "extractor.heads");
    c.extractor.seed = parse_u64(get("extractor.seed"), "extractor.seed");
    return c;
}

void ema_update(std::vector<double>& ema, const std::vector<double>& w, double decay) {
    if (ema.size() != w.size()) throw ShapeError("EMA/weight size mismatch");
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(ema.size()); ++i)
        ema[i] = decay * ema[i] + (1.0 - decay) * w[i];
}

namespace {

CodecModel build_codec(const TrainConfig& cfg, const Dataset& data) {
    if (!cfg.codec_checkpoint.empty()) return CodecModel::load(cfg.codec_checkpoint);
    if (cfg.codec.mode == CodecMode::block) {
        CodecModel codec = CodecModel::make_block(cfg.codec);
        codec.set_scale(compute_latent_scale(codec, data));
        return codec;
    }
    throw ConfigError("learned codec requires codec.checkpoint (run fit-codec first)");
}

} // namespace

Trainer::Trainer(TrainConfig cfg, Dataset data)
    : cfg_(std::move(cfg)),
      data_(std::move(data)),
      codec_(build_codec(cfg_, data_)),
      rng_batch_(Rng::child(cfg_.seed, "train.batch")),
      rng_noise_(Rng::child(cfg_.seed, "train.noise")),
      rng_mask_(Rng::child(cfg_.seed, "train.mask")),
      rng_drop_(Rng::child(cfg_.seed, "train.drop")) {
    if (data_.size() == 0) throw DataError("training dataset is empty");
    const int image_size = data_.manifest().image_size;
    if (image_size % codec_.downsample() != 0)
        throw ShapeError("dataset image size not divisible by the codec factor");
    cfg_.model.latent_h = image_size / codec_.downsample();
    cfg_.model.latent_w = image_size / codec_.downsample();
    cfg_.validate();

    extractor_ = std::make_unique<ExtractorModel>(cfg_.extractor);

    ps_ = std::make_unique<ParamStore>();
    dit_ = std::make_unique<DitModel>(cfg_.model, *ps_);
    CCNetConfig cc;
    cc.latent_h = cfg_.model.latent_h;
    cc.latent_w = cfg_.model.latent_w;
    cc.patch = cfg_.model.patch;
    cc.width = cfg_.model.width;
    cc.feat_width = cfg_.extractor.width;
    cc.extractor_tokens = extractor_->token_count(image_size);
    ccnet_ = std::make_unique<CCNetModel>(cc, *ps_);
    ps_->finalize();

    Rng rng_dit = Rng::child(cfg_.seed, "init.dit");
    dit_->init_weights(rng_dit);
    Rng rng_cc = Rng::child(cfg_.seed, "init.ccnet");
    ccnet_->init_weights(rng_cc);

    ema_ = ps_->values();
    adam_m_.assign(ps_->total_size(), 0.0);
    adam_v_.assign(ps_->total_size(), 0.0);
    noise_ = make_linear_schedule(cfg_.T, cfg_.beta_min, cfg_.beta_max);
}

StepDraws Trainer::draw_step() {
    const int B = cfg_.batch;
    const int lh = cfg_.model.latent_h, lw = cfg_.model.latent_w;
    StepDraws d;
    d.sample_idx.resize(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) d.sample_idx[static_cast<size_t>(b)] = rng_batch_.uniform_int(data_.size());
    d.t.resize(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) d.t[static_cast<size_t>(b)] = 1 + rng_noise_.uniform_int(cfg_.T);
    d.eps.resize(static_cast<size_t>(B) * 4 * lh * lw);
    rng_noise_.fill_gaussian(d.eps.data(), d.eps.size());
    d.drop.resize(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) d.drop[static_cast<size_t>(b)] = rng_drop_.bernoulli(cfg_.eta_dropout) ? 1 : 0;
    d.masks.reserve(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) d.masks.push_back(make_mask(cfg_.model.tokens(), cfg_.mask_ratio, rng_mask_));
    return d;
}

Batch Trainer::assemble(const std::vector<int>& idx) const {
    const int B = static_cast<int>(idx.size());
    const int lh = cfg_.model.latent_h, lw = cfg_.model.latent_w;
    const size_t lat = static_cast<size_t>(4) * lh * lw;
    const int Lt = ccnet_->config().extractor_tokens;
    const int Df = cfg_.extractor.width;
    const size_t tok = static_cast<size_t>(Lt) * Df;

    Batch b;
    b.B = B;
    b.y0.resize(B * lat);
    b.hint.resize(B * lat);
    b.src.resize(B * lat);
    b.tbf_tokens.resize(B * tok);
    b.src_tokens.resize(B * tok);
    b.hint_tokens.resize(B * tok);
    for (int i = 0; i < B; ++i) {
        SceneSample s = data_.load(idx[static_cast<size_t>(i)]);
        LatentTensor zy = codec_.encode(s.target_image);
        LatentTensor zh = codec_.encode(s.hint_image);
        LatentTensor zs = codec_.encode(s.source_image);
        std::copy(zy.data.begin(), zy.data.end(), b.y0.begin() + i * lat);
        std::copy(zh.data.begin(), zh.data.end(), b.hint.begin() + i * lat);
        std::copy(zs.data.begin(), zs.data.end(), b.src.begin() + i * lat);
        TokenSequence tb = extractor_->extract_tokens(s.box_viz);
        TokenSequence ts = extractor_->extract_tokens(s.source_image);
        TokenSequence th = extractor_->extract_tokens(s.hint_image);
        std::copy(tb.data.begin(), tb.data.end(), b.tbf_tokens.begin() + i * tok);
        std::copy(ts.data.begin(), ts.data.end(), b.src_tokens.begin() + i * tok);
        std::copy(th.data.begin(), th.data.end(), b.hint_tokens.begin() + i * tok);
    }
    return b;
}

LossTriple Trainer::compute_joint_loss(const Batch& batch, const StepDraws& draws,
                                       bool with_backward) {
    const int B = batch.B;
    const int D = cfg_.model.width;
    const int lh = cfg_.model.latent_h, lw = cfg_.model.latent_w;
    const size_t lat = static_cast<size_t>(4) * lh * lw;
    const size_t cat = static_cast<size_t>(8) * lh * lw;

    ccnet_->forward(ccnet_acts_, batch.src.data(), batch.tbf_tokens.data(),
                    batch.src_tokens.data(), batch.hint_tokens.data(), B);

    // condition dropout: one decision per sample, shared by both passes
    std::vector<double> c_used(static_cast<size_t>(B) * D, 0.0);
    for (int b = 0; b < B; ++b)
        if (!draws.drop[static_cast<size_t>(b)])
            std::copy(ccnet_acts_.c.begin() + static_cast<size_t>(b) * D,
                      ccnet_acts_.c.begin() + static_cast<size_t>(b + 1) * D,
                      c_used.begin() + static_cast<size_t>(b) * D);

    // shared (t, eps) noise draw for the full and masked passes
    std::vector<double> ycat(static_cast<size_t>(B) * cat);
    for (int b = 0; b < B; ++b) {
        const double ab = noise_.alpha_bar[static_cast<size_t>(draws.t[static_cast<size_t>(b)])];
        const double a = std::sqrt(ab), bb = std::sqrt(1.0 - ab);
        double* dst = ycat.data() + static_cast<size_t>(b) * cat;
        const double* hintp = batch.hint.data() + static_cast<size_t>(b) * lat;
        const double* y0p = batch.y0.data() + static_cast<size_t>(b) * lat;
        const double* ep = draws.eps.data() + static_cast<size_t>(b) * lat;
        std::copy(hintp, hintp + lat, dst);
        for (size_t i = 0; i < lat; ++i) dst[lat + i] = a * y0p[i] + bb * ep[i];
    }

    dit_->forward(pass_full_, ycat.data(), c_used.data(), draws.t.data(), B, nullptr);
    dit_->forward(pass_mask_, ycat.data(), c_used.data(), draws.t.data(), B, &draws.masks);

    const size_t n = static_cast<size_t>(B) * lat;
    double l_full = 0.0, l_mask = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double df = pass_full_.eps[i] - draws.eps[i];
        const double dm = pass_mask_.eps[i] - draws.eps[i];
        l_full += df * df;
        l_mask += dm * dm;
    }
    l_full /= static_cast<double>(n);
    l_mask /= static_cast<double>(n);
    LossTriple loss{l_full + cfg_.lambda_mask * l_mask, l_full, l_mask};
    if (!std::isfinite(loss.join))
        throw NumericError("non-finite joint loss at step " + std::to_string(step_) +
                           " (denoising=" + std::to_string(l_full) +
                           ", mask=" + std::to_string(l_mask) + ")");

    if (with_backward) {
        ps_->zero_grads();
        std::vector<double> d_eps(n);
        std::vector<double> dc(static_cast<size_t>(B) * D, 0.0);
        const double sf = 2.0 / static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) d_eps[i] = sf * (pass_full_.eps[i] - draws.eps[i]);
        dit_->backward(pass_full_, d_eps.data(), dc.data());
        const double sm = cfg_.lambda_mask * 2.0 / static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) d_eps[i] = sm * (pass_mask_.eps[i] - draws.eps[i]);
        dit_->backward(pass_mask_, d_eps.data(), dc.data());
        // dropped conditions block the gradient into CCNet
        for (int b = 0; b < B; ++b)
            if (draws.drop[static_cast<size_t>(b)])
                std::fill(dc.begin() + static_cast<size_t>(b) * D,
                          dc.begin() + static_cast<size_t>(b + 1) * D, 0.0);
        ccnet_->backward(ccnet_acts_, dc.data());
    }
    return loss;
}

LossTriple Trainer::train_step() {
    StepDraws draws = draw_step();
    Batch batch = assemble(draws.sample_idx);
    return step_with(batch, draws);
}

LossTriple Trainer::step_with(const Batch& batch, const StepDraws& draws) {
    LossTriple loss = compute_joint_loss(batch, draws, true);

    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2, eps = cfg_.adam_eps;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_ + 1));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_ + 1));
    auto& w = ps_->values();
    const auto& g = ps_->grads();
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(w.size()); ++i) {
        adam_m_[i] = b1 * adam_m_[i] + (1 - b1) * g[i];
        adam_v_[i] = b2 * adam_v_[i] + (1 - b2) * g[i] * g[i];
        w[i] -= cfg_.lr * (adam_m_[i] / bc1) / (std::sqrt(adam_v_[i] / bc2) + eps);
    }
    ema_update(ema_, w, cfg_.ema_decay);
    ++step_;
    history_.push_back(loss);
    return loss;
}

namespace {

// train.steps is excluded from the identity hash so a run can be resumed and
// extended without counting as a different configuration.
std::string checkpoint_hash(const TrainConfig& cfg) {
    KvConfig kv = train_config_to_kv(cfg);
    kv.erase("train.steps");
    return config_hash_hex(kv);
}

} // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
    KvConfig kv = train_config_to_kv(cfg_);
    json meta{{"type", "train"},
              {"step", step_},
              {"config", serialize_kv(kv)},
              {"config_hash", checkpoint_hash(cfg_)},
              {"rng", {rng_batch_.state(), rng_noise_.state(), rng_mask_.state(), rng_drop_.state()}},
              {"codec",
               {{"mode", codec_.mode() == CodecMode::block ? "block" : "learned"},
                {"f", codec_.config().f},
                {"seed", codec_.config().seed},
                {"hidden", codec_.config().hidden},
                {"scale", codec_.scale()}}}};
    std::vector<std::pair<TensorInfo, std::span<const double>>> tensors;
    for (const auto& ti : ps_->tensors())
        tensors.emplace_back(ti, std::span<const double>(ps_->val(ps_->find(ti.name)),
                                                         ti.size));
    TensorInfo te{"ema", {static_cast<int>(ema_.size())}, 0, ema_.size()};
    tensors.emplace_back(te, std::span<const double>(ema_));
    TensorInfo tm{"adam.m", {static_cast<int>(adam_m_.size())}, 0, adam_m_.size()};
    tensors.emplace_back(tm, std::span<const double>(adam_m_));
    TensorInfo tv{"adam.v", {static_cast<int>(adam_v_.size())}, 0, adam_v_.size()};
    tensors.emplace_back(tv, std::span<const double>(adam_v_));
    TensorInfo tc{"codec.w", {static_cast<int>(codec_.weights().size())}, 0,
                  codec_.weights().size()};
    tensors.emplace_back(tc, std::span<const double>(codec_.weights()));
    write_tensor_file(path, meta, tensors);
}

void Trainer::restore(const std::filesystem::path& path) {
    TensorFile tf = read_tensor_file(path);
    if (tf.meta.value("type", "") != "train")
        throw DataError("not a training checkpoint: " + path.string());
    if (tf.meta.at("config_hash").get<std::string>() != checkpoint_hash(cfg_))
        throw ConfigError("config hash mismatch: checkpoint was written with different settings");

    for (const auto& ti : ps_->tensors()) {
        const TensorFileEntry& e = tf.require(ti.name);
        if (e.info.size != ti.size) throw DataError("tensor size mismatch for " + ti.name);
        std::copy(e.data.begin(), e.data.end(), ps_->val(ps_->find(ti.name)));
    }
    const auto& ema = tf.require("ema");
    const auto& am = tf.require("adam.m");
    const auto& av = tf.require("adam.v");
    if (ema.data.size() != ema_.size() || am.data.size() != adam_m_.size() ||
        av.data.size() != adam_v_.size())
        throw DataError("optimizer state size mismatch");
    ema_ = ema.data;
    adam_m_ = am.data;
    adam_v_ = av.data;
    codec_.weights() = tf.require("codec.w").data;
    codec_.set_scale(tf.meta.at("codec").at("scale").get<double>());

    step_ = tf.meta.at("step").get<int64_t>();
    auto rng = tf.meta.at("rng");
    rng_batch_.set_state(rng.at(0).get<uint64_t>());
    rng_noise_.set_state(rng.at(1).get<uint64_t>());
    rng_mask_.set_state(rng.at(2).get<uint64_t>());
    rng_drop_.set_state(rng.at(3).get<uint64_t>());
}

ModelBundle load_bundle(const std::filesystem::path& ckpt, bool use_ema) {
    TensorFile tf = read_tensor_file(ckpt);
    if (tf.meta.value("type", "") != "train")
        throw DataError("not a training checkpoint: " + ckpt.string());
    ModelBundle b;
    b.cfg = train_config_from_kv(parse_kv_text(tf.meta.at("config").get<std::string>()));
    b.step = tf.meta.at("step").get<int64_t>();

    // codec from the embedded weights
    CodecConfig ccfg = b.cfg.codec;
    auto jc = tf.meta.at("codec");
    ccfg.mode = jc.at("mode").get<std::string>() == "block" ? CodecMode::block
                                                            : CodecMode::learned;
    ccfg.f = jc.at("f").get<int>();
    ccfg.seed = jc.at("seed").get<uint64_t>();
    ccfg.hidden = jc.at("hidden").get<int>();
    b.codec = ccfg.mode == CodecMode::block ? CodecModel::make_block(ccfg)
                                            : CodecModel::make_learned_untrained(ccfg);
    b.codec.weights() = tf.require("codec.w").data;
    b.codec.set_scale(jc.at("scale").get<double>());

    b.extractor = std::make_unique<ExtractorModel>(b.cfg.extractor);
    b.ps = std::make_unique<ParamStore>();
    b.dit = std::make_unique<DitModel>(b.cfg.model, *b.ps);
    CCNetConfig cc;
    cc.latent_h = b.cfg.model.latent_h;
    cc.latent_w = b.cfg.model.latent_w;
    cc.patch = b.cfg.model.patch;
    cc.width = b.cfg.model.width;
    cc.feat_width = b.cfg.extractor.width;
    cc.extractor_tokens = b.extractor->token_count(b.cfg.model.latent_h * ccfg.f);
    b.ccnet = std::make_unique<CCNetModel>(cc, *b.ps);
    b.ps->finalize();

    if (use_ema) {
        const auto& ema = tf.require("ema");
        if (ema.data.size() != b.ps->total_size()) throw DataError("EMA blob size mismatch");
        b.ps->values() = ema.data;
    } else {
        for (const auto& ti : b.ps->tensors()) {
            const TensorFileEntry& e = tf.require(ti.name);
            if (e.info.size != ti.size) throw DataError("tensor size mismatch for " + ti.name);
            std::copy(e.data.begin(), e.data.end(), b.ps->val(b.ps->find(ti.name)));
        }
    }
    b.noise = make_linear_schedule(b.cfg.T, b.cfg.beta_min, b.cfg.beta_max);
    return b;
}

} // namespace mdtbox
