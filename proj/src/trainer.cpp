#include "apt/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>

#include <json.hpp>

namespace apt {

namespace fs = std::filesystem;

uint64_t derive_seed(uint64_t seed, uint64_t tag) {
    uint64_t z = seed ^ (tag * 0x9e3779b97f4a7c15ULL);
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void AptConfig::validate() const {
    if (!(lambda_dist >= 0.0) || !(lambda_attn >= 0.0))
        throw std::invalid_argument("config: lambda weights must be >= 0");
    if (!(p_max >= 0.0 && p_max <= 1.0))
        throw std::invalid_argument("config: p_max must be in [0, 1]");
    if (bins < 1) throw std::invalid_argument("config: bins must be >= 1");
    if (!(ema_alpha > 0.0 && ema_alpha <= 1.0))
        throw std::invalid_argument("config: ema_alpha must be in (0, 1]");
    if (adapter_rank < 0) throw std::invalid_argument("config: adapter_rank must be >= 0");
    if (!(lr_adapter > 0.0) || !(lr_token > 0.0))
        throw std::invalid_argument("config: learning rates must be > 0");
    if (steps < 0) throw std::invalid_argument("config: steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (checkpoint_every < 0) throw std::invalid_argument("config: checkpoint_every must be >= 0");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("config: weight_decay must be >= 0");
    if (align_self_attention)
        throw std::invalid_argument(
            "config: align_self_attention is an extension point; only false is implemented");
    if (identifier.empty() || identifier.find_first_of(" \t") != std::string::npos)
        throw std::invalid_argument("config: identifier must be a single non-empty token");
}

void PretrainConfig::validate() const {
    if (steps < 0) throw std::invalid_argument("config: pretrain.steps must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("config: pretrain.lr must be > 0");
    if (corpus_size < 1) throw std::invalid_argument("config: pretrain.corpus_size must be >= 1");
    if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0))
        throw std::invalid_argument("config: pretrain.cond_dropout must be in [0, 1]");
}

void RunConfig::validate() const {
    net.validate();
    if (T < 2) throw std::invalid_argument("config: sched.T must be >= 2");
    if (T % train.bins != 0)
        throw std::invalid_argument("config: bins must divide T (" + std::to_string(train.bins) +
                                    " vs " + std::to_string(T) + ")");
    train.validate();
    pretrain.validate();
    augment.validate();
    if (!(sample.guidance >= 0.0)) throw std::invalid_argument("config: sample.guidance must be >= 0");
    if (sample.count < 1) throw std::invalid_argument("config: sample.count must be >= 1");
    make_schedule(T, beta_start, beta_end); // range-checks the betas
}

namespace {

using nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* section) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : keys)
            if (it.key() == k) ok = true;
        if (!ok)
            throw std::invalid_argument(std::string("config: unknown key '") + it.key() +
                                        "' in section " + section);
    }
}

json net_to_json(const NetConfig& n) {
    return json{{"image_size", n.image_size},
                {"in_channels", n.in_channels},
                {"base_channels", n.base_channels},
                {"channel_multipliers", n.channel_multipliers},
                {"attention_levels", n.attention_levels},
                {"tap_levels", n.tap_levels},
                {"num_heads", n.num_heads},
                {"token_dim", n.token_dim},
                {"time_dim", n.time_dim},
                {"norm_groups", n.norm_groups}};
}

} // namespace

std::string RunConfig::canonical_json() const {
    json j;
    j["net"] = net_to_json(net);
    j["sched"] = {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}};
    j["train"] = {
        {"lambda_dist", train.lambda_dist},
        {"lambda_attn", train.lambda_attn},
        {"p_max", train.p_max},
        {"bins", train.bins},
        {"ema_alpha", train.ema_alpha},
        {"temperature_mode",
         train.temperature_mode == TemperatureMode::FullT ? "full-T" : "T-over-10"},
        {"adapter_rank", train.adapter_rank},
        {"lr_adapter", train.lr_adapter},
        {"lr_token", train.lr_token},
        {"steps", train.steps},
        {"seed", train.seed},
        {"ablation", {{"ata", train.ablation.ata}, {"rs", train.ablation.rs}, {"aa", train.ablation.aa}}},
        {"batch_size", train.batch_size},
        {"checkpoint_every", train.checkpoint_every},
        {"weight_decay", train.weight_decay},
        {"stat_reduction",
         train.stat_reduction == StatReduction::PerChannel ? "per-channel" : "global"},
        {"align_self_attention", train.align_self_attention},
        {"identifier", train.identifier},
    };
    j["augment"] = {{"scale_min", augment.scale_min},
                    {"scale_max", augment.scale_max},
                    {"max_rotation_deg", augment.max_rotation_deg},
                    {"fill", augment.fill_with_mean ? json("mean") : json(augment.fill_value)}};
    j["pretrain"] = {{"steps", pretrain.steps},       {"lr", pretrain.lr},
                     {"corpus_size", pretrain.corpus_size}, {"corpus_seed", pretrain.corpus_seed},
                     {"cond_dropout", pretrain.cond_dropout}, {"seed", pretrain.seed},
                     {"log_every", pretrain.log_every}};
    j["sample"] = {{"guidance", sample.guidance}, {"count", sample.count},
                   {"sample_T", sample.sample_T}};
    return j.dump(2);
}

uint64_t RunConfig::config_hash() const {
    const std::string s = canonical_json();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    const json j = json::parse(text);
    reject_unknown(j, {"net", "sched", "train", "augment", "pretrain", "sample"}, "(root)");
    RunConfig cfg;
    if (j.contains("net")) {
        const json& n = j["net"];
        reject_unknown(n,
                       {"image_size", "in_channels", "base_channels", "channel_multipliers",
                        "attention_levels", "tap_levels", "num_heads", "token_dim", "time_dim",
                        "norm_groups"},
                       "net");
        cfg.net.image_size = n.value("image_size", cfg.net.image_size);
        cfg.net.in_channels = n.value("in_channels", cfg.net.in_channels);
        cfg.net.base_channels = n.value("base_channels", cfg.net.base_channels);
        cfg.net.channel_multipliers = n.value("channel_multipliers", cfg.net.channel_multipliers);
        cfg.net.attention_levels = n.value("attention_levels", cfg.net.attention_levels);
        cfg.net.tap_levels = n.value("tap_levels", cfg.net.tap_levels);
        cfg.net.num_heads = n.value("num_heads", cfg.net.num_heads);
        cfg.net.token_dim = n.value("token_dim", cfg.net.token_dim);
        cfg.net.time_dim = n.value("time_dim", cfg.net.time_dim);
        cfg.net.norm_groups = n.value("norm_groups", cfg.net.norm_groups);
    }
    if (j.contains("sched")) {
        const json& s = j["sched"];
        reject_unknown(s, {"T", "beta_start", "beta_end"}, "sched");
        cfg.T = s.value("T", cfg.T);
        cfg.beta_start = s.value("beta_start", cfg.beta_start);
        cfg.beta_end = s.value("beta_end", cfg.beta_end);
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        reject_unknown(t,
                       {"lambda_dist", "lambda_attn", "p_max", "bins", "ema_alpha",
                        "temperature_mode", "adapter_rank", "lr_adapter", "lr_token", "steps",
                        "seed", "ablation", "batch_size", "checkpoint_every", "weight_decay",
                        "stat_reduction", "align_self_attention", "identifier"},
                       "train");
        auto& tr = cfg.train;
        tr.lambda_dist = t.value("lambda_dist", tr.lambda_dist);
        tr.lambda_attn = t.value("lambda_attn", tr.lambda_attn);
        tr.p_max = t.value("p_max", tr.p_max);
        tr.bins = t.value("bins", tr.bins);
        tr.ema_alpha = t.value("ema_alpha", tr.ema_alpha);
        if (t.contains("temperature_mode")) {
            const std::string m = t["temperature_mode"];
            if (m == "full-T")
                tr.temperature_mode = TemperatureMode::FullT;
            else if (m == "T-over-10")
                tr.temperature_mode = TemperatureMode::TOver10;
            else
                throw std::invalid_argument("config: temperature_mode must be 'full-T' or "
                                            "'T-over-10', got '" + m + "'");
        }
        tr.adapter_rank = t.value("adapter_rank", tr.adapter_rank);
        tr.lr_adapter = t.value("lr_adapter", tr.lr_adapter);
        tr.lr_token = t.value("lr_token", tr.lr_token);
        tr.steps = t.value("steps", tr.steps);
        tr.seed = t.value("seed", tr.seed);
        if (t.contains("ablation")) {
            const json& a = t["ablation"];
            reject_unknown(a, {"ata", "rs", "aa"}, "train.ablation");
            tr.ablation.ata = a.value("ata", tr.ablation.ata);
            tr.ablation.rs = a.value("rs", tr.ablation.rs);
            tr.ablation.aa = a.value("aa", tr.ablation.aa);
        }
        tr.batch_size = t.value("batch_size", tr.batch_size);
        tr.checkpoint_every = t.value("checkpoint_every", tr.checkpoint_every);
        tr.weight_decay = t.value("weight_decay", tr.weight_decay);
        if (t.contains("stat_reduction")) {
            const std::string m = t["stat_reduction"];
            if (m == "per-channel")
                tr.stat_reduction = StatReduction::PerChannel;
            else if (m == "global")
                tr.stat_reduction = StatReduction::Global;
            else
                throw std::invalid_argument(
                    "config: stat_reduction must be 'per-channel' or 'global'");
        }
        tr.align_self_attention = t.value("align_self_attention", tr.align_self_attention);
        tr.identifier = t.value("identifier", tr.identifier);
    }
    if (j.contains("augment")) {
        const json& a = j["augment"];
        reject_unknown(a, {"scale_min", "scale_max", "max_rotation_deg", "fill"}, "augment");
        cfg.augment.scale_min = a.value("scale_min", cfg.augment.scale_min);
        cfg.augment.scale_max = a.value("scale_max", cfg.augment.scale_max);
        cfg.augment.max_rotation_deg = a.value("max_rotation_deg", cfg.augment.max_rotation_deg);
        if (a.contains("fill")) {
            if (a["fill"].is_string() && a["fill"] == "mean") {
                cfg.augment.fill_with_mean = true;
            } else if (a["fill"].is_number()) {
                cfg.augment.fill_with_mean = false;
                cfg.augment.fill_value = a["fill"];
            } else {
                throw std::invalid_argument("config: augment.fill must be 'mean' or a number");
            }
        }
    }
    if (j.contains("pretrain")) {
        const json& p = j["pretrain"];
        reject_unknown(p, {"steps", "lr", "corpus_size", "corpus_seed", "cond_dropout", "seed",
                           "log_every"},
                       "pretrain");
        cfg.pretrain.steps = p.value("steps", cfg.pretrain.steps);
        cfg.pretrain.lr = p.value("lr", cfg.pretrain.lr);
        cfg.pretrain.corpus_size = p.value("corpus_size", cfg.pretrain.corpus_size);
        cfg.pretrain.corpus_seed = p.value("corpus_seed", cfg.pretrain.corpus_seed);
        cfg.pretrain.cond_dropout = p.value("cond_dropout", cfg.pretrain.cond_dropout);
        cfg.pretrain.seed = p.value("seed", cfg.pretrain.seed);
        cfg.pretrain.log_every = p.value("log_every", cfg.pretrain.log_every);
    }
    if (j.contains("sample")) {
        const json& s = j["sample"];
        reject_unknown(s, {"guidance", "count", "sample_T"}, "sample");
        cfg.sample.guidance = s.value("guidance", cfg.sample.guidance);
        cfg.sample.count = s.value("count", cfg.sample.count);
        cfg.sample.sample_T = s.value("sample_T", cfg.sample.sample_T);
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<Group> groups, double beta1, double beta2, double eps,
             double weight_decay)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (const auto& g : groups_)
        for (const auto& p : g.params) {
            m_.push_back(Tensor::zeros(p.value().shape));
            v_.push_back(Tensor::zeros(p.value().shape));
        }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    size_t idx = 0;
    for (auto& g : groups_) {
        for (auto& p : g.params) {
            Tensor& m = m_[idx];
            Tensor& v = v_[idx];
            ++idx;
            double* pv = p.value().data();
            const int64_t n = p.value().numel();
            const bool has_grad = p.grad().numel() == n;
            const double* gv = has_grad ? p.grad().data() : nullptr;
            for (int64_t i = 0; i < n; ++i) {
                const double grad = gv ? gv[i] : 0.0;
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad * grad;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                pv[i] -= g.lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * pv[i]);
            }
        }
    }
}

void AdamW::zero_grads() {
    for (auto& g : groups_)
        for (auto& p : g.params) p.node->grad = Tensor::zeros(p.value().shape);
}

void AdamW::serialize(std::vector<uint8_t>& out) const {
    auto put = [&out](const void* p, size_t n) {
        const uint8_t* b = static_cast<const uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    };
    put(&t_, sizeof(t_));
    for (const auto& t : {&m_, &v_})
        for (const auto& ten : *t) put(ten.data(), size_t(ten.numel()) * sizeof(double));
}

void AdamW::deserialize(const uint8_t*& p, const uint8_t* end) {
    auto get = [&p, end](void* dst, size_t n) {
        if (p + n > end) throw std::runtime_error("trainer state: truncated optimizer blob");
        std::memcpy(dst, p, n);
        p += n;
    };
    get(&t_, sizeof(t_));
    for (auto* t : {&m_, &v_})
        for (auto& ten : *t) get(ten.data(), size_t(ten.numel()) * sizeof(double));
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

PretrainResult pretrain(const std::vector<CorpusItem>& corpus, const RunConfig& cfg,
                        std::ostream* loss_log) {
    if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
    cfg.validate();
    const NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);

    Rng rng_init(derive_seed(cfg.pretrain.seed, 0));
    Rng rng_data(derive_seed(cfg.pretrain.seed, 1));
    Rng rng_noise(derive_seed(cfg.pretrain.seed, 2));
    Rng rng_drop(derive_seed(cfg.pretrain.seed, 3));

    PretrainResult out{UNet(cfg.net, rng_init),
                       Vocabulary(default_word_list(), cfg.net.token_dim, 16, rng_init)};
    out.net.set_trainable(true, false);
    out.vocab.base_table().node->requires_grad = true;
    out.vocab.positional().node->requires_grad = true;

    AdamW::Group group;
    group.params = out.net.base_params();
    group.params.push_back(out.vocab.base_table());
    group.params.push_back(out.vocab.positional());
    group.lr = cfg.pretrain.lr;
    AdamW opt({group}, 0.9, 0.999, 1e-8, 0.0);

    if (loss_log) *loss_log << "step,loss\n";
    for (int s = 0; s < cfg.pretrain.steps; ++s) {
        const CorpusItem& item = corpus[rng_data.uniform_int(corpus.size())];
        const int t = int(rng_data.uniform_int(uint64_t(sched.T)));
        Tensor eps = Tensor::randn(item.image.shape, rng_noise);
        Tensor x_t = q_sample(item.image, eps, t, sched);

        std::vector<int> ids =
            out.vocab.tokenize(fill_template(item.caption_template, item.class_word));
        if (rng_drop.uniform() < cfg.pretrain.cond_dropout)
            ids.assign(ids.size(), out.vocab.null_id());
        Var tokens = out.vocab.embed(ids);

        ForwardOptions fopt;
        fopt.adapters_on = false;
        auto res = out.net.forward(x_t, t, tokens, fopt);
        Var loss = mse(res.eps, constant(eps));
        if (!std::isfinite(loss.value()[0]))
            throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(s));
        backward(loss);
        opt.step();
        opt.zero_grads();
        if (loss_log && (s % cfg.pretrain.log_every == 0 || s + 1 == cfg.pretrain.steps))
            *loss_log << s << "," << fmt_double(loss.value()[0]) << "\n";
    }
    out.net.set_trainable(false, false);
    out.vocab.base_table().node->requires_grad = false;
    out.vocab.positional().node->requires_grad = false;
    return out;
}

double eval_denoise_loss(const UNet& net, const Vocabulary& vocab, const NoiseSchedule& sched,
                         const std::vector<CorpusItem>& corpus, int n, uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("eval_denoise_loss: empty corpus");
    NoGradGuard ng;
    Rng rng(seed);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const CorpusItem& item = corpus[rng.uniform_int(corpus.size())];
        const int t = int(rng.uniform_int(uint64_t(sched.T)));
        Tensor eps = Tensor::randn(item.image.shape, rng);
        Tensor x_t = q_sample(item.image, eps, t, sched);
        Var tokens =
            vocab.embed(vocab.tokenize(fill_template(item.caption_template, item.class_word)));
        ForwardOptions fopt;
        fopt.adapters_on = false;
        auto res = net.forward(x_t, t, tokens, fopt);
        total += mse(res.eps, constant(eps)).value()[0];
    }
    return total / double(n);
}

// ---------------------------------------------------------------------------
// personalization
// ---------------------------------------------------------------------------

PersonalizeSession::PersonalizeSession(Checkpoint prior, std::vector<CorpusItem> refs,
                                       RunConfig cfg, std::string run_dir)
    : cfg_(std::move(cfg)),
      sched_(make_schedule(prior.T, prior.beta_start, prior.beta_end)),
      binmap_(prior.T, cfg_.train.bins),
      net_(std::move(prior.net)),
      vocab_(std::move(prior.vocab)),
      refs_(std::move(refs)),
      indicator_(cfg_.train.bins, cfg_.train.ema_alpha, cfg_.train.temperature(prior.T)),
      run_dir_(std::move(run_dir)) {
    cfg_.validate();
    if (cfg_.T != prior.T)
        throw std::invalid_argument("personalize: config T does not match the prior checkpoint");
    if (!(net_.config() == cfg_.net))
        throw std::invalid_argument(
            "personalize: net config does not match the prior checkpoint");
    if (refs_.empty() || refs_.size() > 10)
        throw std::invalid_argument("personalize: need 1..10 reference images");
    for (const auto& r : refs_)
        if (r.class_word != refs_[0].class_word)
            throw std::invalid_argument(
                "personalize: all references must share one class word");

    fs::create_directories(run_dir_);

    const bool resuming = !prior.trainer_state.empty();
    if (!resuming) {
        if (net_.adapter_rank() != cfg_.train.adapter_rank) {
            Rng adapter_rng(derive_seed(cfg_.train.seed, 100));
            net_.attach_adapters(cfg_.train.adapter_rank, adapter_rng);
        }
        if (vocab_.identifiers().empty())
            vocab_.register_identifier(cfg_.train.identifier, refs_[0].class_word);
        rng_data_.seed(derive_seed(cfg_.train.seed, 1));
        rng_augment_.seed(derive_seed(cfg_.train.seed, 2));
        rng_noise_.seed(derive_seed(cfg_.train.seed, 3));
    }

    net_.set_trainable(false, true);
    vocab_.base_table().node->requires_grad = false;
    vocab_.positional().node->requires_grad = false;
    for (auto& slot : vocab_.identifiers()) slot.embedding.node->requires_grad = true;

    pairs_.reserve(refs_.size());
    for (const auto& r : refs_)
        pairs_.push_back(
            vocab_.build_pair(r.caption_template, cfg_.train.identifier, r.class_word));

    AdamW::Group adapters{net_.adapter_params(), cfg_.train.lr_adapter};
    AdamW::Group tokens;
    for (auto& slot : vocab_.identifiers()) tokens.params.push_back(slot.embedding);
    tokens.lr = cfg_.train.lr_token;
    opt_ = AdamW({adapters, tokens}, 0.9, 0.999, 1e-8, cfg_.train.weight_decay);

    if (resuming) restore_state(prior.trainer_state);
    base_checksum_ = net_.base_checksum();
    open_logs(!resuming);
}

void PersonalizeSession::open_logs(bool fresh) {
    const std::string train_path = run_dir_ + "/train_log.csv";
    const std::string ind_path = run_dir_ + "/indicator.csv";
    const bool need_train_header = fresh || !fs::exists(train_path);
    const bool need_ind_header = fresh || !fs::exists(ind_path);
    train_log_.open(train_path, fresh ? std::ios::trunc : std::ios::app);
    indicator_log_.open(ind_path, fresh ? std::ios::trunc : std::ios::app);
    if (!train_log_ || !indicator_log_)
        throw std::runtime_error("personalize: cannot open logs under " + run_dir_);
    if (need_train_header)
        train_log_ << "step,t,bin,l_dm_theta,l_dm_phi,gamma,weight,l_mu,l_sigma,l_attn,total,"
                      "aug_applied,aug_scale,aug_angle\n";
    if (need_ind_header) indicator_log_ << "step,bin,ema_phi,ema_theta,gamma\n";
}

void PersonalizeSession::abort_non_finite(const StepReport& rep) const {
    nlohmann::json diag{{"step", rep.step},       {"t", rep.t},
                        {"bin", rep.bin},         {"l_dm_theta", rep.l_dm_theta},
                        {"l_dm_phi", rep.l_dm_phi}, {"l_mu", rep.l_mu},
                        {"l_sigma", rep.l_sigma}, {"l_attn", rep.l_attn},
                        {"total", rep.total}};
    const std::string path = run_dir_ + "/diag_nonfinite.json";
    std::ofstream f(path);
    f << diag.dump(2) << "\n";
    throw std::runtime_error("personalize: non-finite loss at step " + std::to_string(rep.step) +
                             "; diagnostics written to " + path);
}

StepReport PersonalizeSession::step() {
    if (!grad_enabled())
        throw std::logic_error("personalize_step: gradient mode is disabled");
    const auto& tr = cfg_.train;
    StepReport rep;
    rep.step = step_;

    // (1) sample a reference and a timestep; read the pre-update gamma
    const size_t ref_idx = rng_data_.uniform_int(refs_.size());
    rep.t = int(rng_data_.uniform_int(uint64_t(sched_.T)));
    rep.bin = binmap_.bin_of(rep.t);
    rep.gamma = indicator_.gamma(rep.bin);
    const CorpusItem& ref = refs_[ref_idx];
    const ConditioningPair& pair = pairs_[ref_idx];

    // (2)-(3) adaptive augmentation, then noising; the whole batch shares
    // the reference and timestep, noise/augment draws are per item
    const int n = tr.batch_size;
    const int c = cfg_.net.in_channels, hw = cfg_.net.image_size;
    Tensor x_t({n, c, hw, hw});
    Tensor eps({n, c, hw, hw});
    const int64_t plane = int64_t(c) * hw * hw;
    for (int k = 0; k < n; ++k) {
        Tensor x0 = ref.image;
        if (tr.ablation.ata) {
            const double p = augment_probability(rep.gamma, tr.p_max);
            AugmentResult aug = maybe_augment(x0, p, cfg_.augment, rng_augment_);
            x0 = std::move(aug.image);
            if (k == 0) {
                rep.aug_applied = aug.applied;
                rep.aug_scale = aug.scale;
                rep.aug_angle = aug.angle_deg;
            }
        }
        Tensor e = Tensor::randn(x0.shape, rng_noise_);
        Tensor xt = q_sample(x0, e, rep.t, sched_);
        std::memcpy(eps.data() + k * plane, e.data(), size_t(plane) * sizeof(double));
        std::memcpy(x_t.data() + k * plane, xt.data(), size_t(plane) * sizeof(double));
    }

    const bool want_taps = tr.ablation.rs || tr.ablation.aa;

    // (4) fine-tuned pass: adapters on, identifier conditioning
    ForwardOptions topt;
    topt.adapters_on = true;
    topt.capture_taps = want_taps;
    Var tokens_star = vocab_.embed(pair.tokens_star, net_.adapter_scale());
    ForwardResult theta = net_.forward(x_t, rep.t, tokens_star, topt);
    Var l_theta = mse(theta.eps, constant(eps));
    rep.l_dm_theta = l_theta.value()[0];

    // (5) frozen-prior pass: adapters off, class conditioning, same x_t
    TapBundle phi_taps;
    {
        NoGradGuard ng;
        ForwardOptions popt;
        popt.adapters_on = false;
        popt.capture_taps = want_taps;
        Var tokens_class = vocab_.embed(pair.tokens_class);
        ForwardResult phi = net_.forward(x_t, rep.t, tokens_class, popt);
        rep.l_dm_phi = mse(phi.eps, constant(eps)).value()[0];
        phi_taps = std::move(phi.taps);
    }

    // (7) adaptive loss weighting on the denoising term only
    rep.weight = tr.ablation.ata ? adaptive_weight(rep.gamma) : 1.0;
    Var weighted = tr.ablation.ata ? scale(l_theta, rep.weight) : l_theta;

    // (8) regularizers
    Var l_mu = constant(Tensor({1}));
    Var l_sigma = constant(Tensor({1}));
    Var l_attn = constant(Tensor({1}));
    if (tr.ablation.rs) {
        RegOptions ropts;
        ropts.reduction = tr.stat_reduction;
        auto [mu, sig] = stat_losses(theta.taps, phi_taps, ropts);
        l_mu = mu;
        l_sigma = sig;
    }
    if (tr.ablation.aa) l_attn = attn_align_loss(theta.taps, phi_taps);
    rep.l_mu = l_mu.value()[0];
    rep.l_sigma = l_sigma.value()[0];
    rep.l_attn = l_attn.value()[0];

    for (double v : {rep.l_dm_theta, rep.l_dm_phi, rep.l_mu, rep.l_sigma, rep.l_attn})
        if (!std::isfinite(v)) abort_non_finite(rep);
    RegWeights weights{tr.lambda_dist, tr.lambda_attn};
    Var total = total_loss(weighted, l_mu, l_sigma, l_attn, weights);
    rep.total = total.value()[0];
    if (!std::isfinite(rep.total)) abort_non_finite(rep);

    // (9) update adapters and identifier embedding only
    backward(total);
    opt_.step();
    opt_.zero_grads();

    // (10) indicator update with the raw (unweighted) batch losses
    indicator_.ema_update(rep.bin, rep.l_dm_phi, rep.l_dm_theta);

    ++step_;
    return rep;
}

void PersonalizeSession::append_logs(const StepReport& r) {
    train_log_ << r.step << "," << r.t << "," << r.bin << "," << fmt_double(r.l_dm_theta) << ","
               << fmt_double(r.l_dm_phi) << "," << fmt_double(r.gamma) << ","
               << fmt_double(r.weight) << "," << fmt_double(r.l_mu) << ","
               << fmt_double(r.l_sigma) << "," << fmt_double(r.l_attn) << ","
               << fmt_double(r.total) << "," << (r.aug_applied ? 1 : 0) << ","
               << fmt_double(r.aug_scale) << "," << fmt_double(r.aug_angle) << "\n";
    indicator_log_ << r.step << "," << r.bin << "," << fmt_double(indicator_.ema_phi(r.bin)) << ","
                   << fmt_double(indicator_.ema_theta(r.bin)) << ","
                   << fmt_double(indicator_.gamma(r.bin)) << "\n";
}

std::string PersonalizeSession::save_checkpoint_now(const std::string& filename) const {
    const std::string path = run_dir_ + "/" + filename;
    const std::vector<uint8_t> blob = serialize_state();
    save_checkpoint(path, net_, vocab_, sched_.T, cfg_.beta_start, cfg_.beta_end, &blob);
    return path;
}

std::string PersonalizeSession::run() {
    const int total_steps = cfg_.train.steps;
    while (step_ < uint64_t(total_steps)) {
        const StepReport rep = step();
        append_logs(rep);
        if (cfg_.train.checkpoint_every > 0 && step_ % uint64_t(cfg_.train.checkpoint_every) == 0 &&
            step_ < uint64_t(total_steps)) {
            char name[48];
            std::snprintf(name, sizeof(name), "ckpt_%06llu.aptc",
                          static_cast<unsigned long long>(step_));
            save_checkpoint_now(name);
        }
    }
    train_log_.flush();
    indicator_log_.flush();
    if (net_.base_checksum() != base_checksum_)
        throw std::runtime_error("personalize: frozen base weights changed during training");
    return save_checkpoint_now("final.aptc");
}

namespace {

// resume compatibility ignores the target step count; continuing a run with
// more steps is the normal use of resume
uint64_t resume_hash(const RunConfig& cfg) {
    RunConfig c = cfg;
    c.train.steps = 0;
    return c.config_hash();
}

} // namespace

// trainer-state blob: step, indicator, rng streams, optimizer, config hash
std::vector<uint8_t> PersonalizeSession::serialize_state() const {
    std::vector<uint8_t> out;
    auto put = [&out](const void* p, size_t n) {
        const uint8_t* b = static_cast<const uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    };
    const uint64_t hash = resume_hash(cfg_);
    put(&hash, 8);
    put(&step_, 8);
    const int32_t bins = int32_t(indicator_.bins());
    put(&bins, 4);
    auto& self = const_cast<PersonalizeSession&>(*this);
    put(self.indicator_.raw_ema_phi().data(), size_t(bins) * 8);
    put(self.indicator_.raw_ema_theta().data(), size_t(bins) * 8);
    put(self.indicator_.raw_gamma().data(), size_t(bins) * 8);
    put(self.indicator_.raw_init().data(), size_t(bins));
    for (const Rng* r : {&rng_data_, &rng_augment_, &rng_noise_}) {
        const auto st = r->state();
        put(st.data(), 32);
    }
    opt_.serialize(out);
    return out;
}

void PersonalizeSession::restore_state(const std::vector<uint8_t>& blob) {
    const uint8_t* p = blob.data();
    const uint8_t* end = p + blob.size();
    auto get = [&p, end](void* dst, size_t n) {
        if (p + n > end) throw std::runtime_error("trainer state: truncated blob");
        std::memcpy(dst, p, n);
        p += n;
    };
    uint64_t hash = 0;
    get(&hash, 8);
    if (hash != resume_hash(cfg_))
        throw std::runtime_error("personalize: resume config does not match the saved run");
    get(&step_, 8);
    int32_t bins = 0;
    get(&bins, 4);
    if (bins != indicator_.bins())
        throw std::runtime_error("trainer state: bin count mismatch");
    get(indicator_.raw_ema_phi().data(), size_t(bins) * 8);
    get(indicator_.raw_ema_theta().data(), size_t(bins) * 8);
    get(indicator_.raw_gamma().data(), size_t(bins) * 8);
    get(indicator_.raw_init().data(), size_t(bins));
    for (Rng* r : {&rng_data_, &rng_augment_, &rng_noise_}) {
        std::array<uint64_t, 4> st;
        get(st.data(), 32);
        r->set_state(st);
    }
    opt_.deserialize(p, end);
    if (p != end) throw std::runtime_error("trainer state: trailing bytes");
}

} // namespace apt
