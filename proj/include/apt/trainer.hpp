#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "apt/augment.hpp"
#include "apt/checkpoint.hpp"
#include "apt/cond.hpp"
#include "apt/corpus.hpp"
#include "apt/indicator.hpp"
#include "apt/net.hpp"
#include "apt/reg.hpp"
#include "apt/rng.hpp"
#include "apt/sched.hpp"

namespace apt {

enum class TemperatureMode { FullT, TOver10 };

struct AblationFlags {
    bool ata = true;
    bool rs = true;
    bool aa = true;
};

// Personalization hyperparameters. Canonical defaults: lambda_dist=30,
// lambda_attn=3e-4, p_max=0.8, B=10, ema_alpha=0.1, rank-32 adapters,
// batch size 1. Learning rates are sized for the toy denoiser.
struct AptConfig {
    double lambda_dist = 30.0;
    double lambda_attn = 3e-4;
    double p_max = 0.8;
    int bins = 10;
    double ema_alpha = 0.1;
    TemperatureMode temperature_mode = TemperatureMode::FullT;
    int adapter_rank = 32;
    double lr_adapter = 1e-3;
    double lr_token = 1e-4;
    int steps = 2000;
    uint64_t seed = 0;
    AblationFlags ablation;
    int batch_size = 1;
    int checkpoint_every = 400;
    double weight_decay = 0.0;
    StatReduction stat_reduction = StatReduction::PerChannel;
    bool align_self_attention = false; // extension point; only false is implemented
    std::string identifier = "V*";

    double temperature(int T) const {
        return temperature_mode == TemperatureMode::FullT ? double(T) : double(T) / 10.0;
    }
    void validate() const;
};

struct PretrainConfig {
    int steps = 3000;
    double lr = 1e-3;
    int corpus_size = 256;
    uint64_t corpus_seed = 7;
    double cond_dropout = 0.1;
    uint64_t seed = 0;
    int log_every = 50;
    void validate() const;
};

struct SampleConfig {
    double guidance = 7.5;
    int count = 4;
    int sample_T = 0; // 0: use the checkpoint's full schedule
};

// Whole config file: net + schedule + train + augment + pretrain + sample.
struct RunConfig {
    NetConfig net;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    AptConfig train;
    AugmentPolicy augment;
    PretrainConfig pretrain;
    SampleConfig sample;

    void validate() const;
    std::string canonical_json() const;
    uint64_t config_hash() const;

    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_json_file(const std::string& path);
};

// AdamW over explicit parameter groups; moments serialize for resume.
class AdamW {
public:
    struct Group {
        std::vector<Var> params;
        double lr = 1e-3;
    };

    AdamW() = default;
    AdamW(std::vector<Group> groups, double beta1, double beta2, double eps, double weight_decay);

    void step();
    void zero_grads();

    int64_t steps_taken() const { return t_; }
    void serialize(std::vector<uint8_t>& out) const;
    void deserialize(const uint8_t*& p, const uint8_t* end);

private:
    std::vector<Group> groups_;
    std::vector<Tensor> m_, v_; // parallel to params in group order
    int64_t t_ = 0;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
};

struct StepReport {
    uint64_t step = 0;
    int t = 0;
    int bin = 0;
    double l_dm_theta = 0.0;
    double l_dm_phi = 0.0;
    double gamma = 0.0; // value consumed by this step (pre-update)
    double weight = 1.0;
    double l_mu = 0.0;
    double l_sigma = 0.0;
    double l_attn = 0.0;
    double total = 0.0;
    bool aug_applied = false;
    double aug_scale = 1.0;
    double aug_angle = 0.0;
};

// ---------------------------------------------------------------------------
// pretraining the prior
// ---------------------------------------------------------------------------

struct PretrainResult {
    UNet net;
    Vocabulary vocab;
};

// plain denoising training of all base weights on a captioned corpus;
// adapters are untouched
PretrainResult pretrain(const std::vector<CorpusItem>& corpus, const RunConfig& cfg,
                        std::ostream* loss_log = nullptr);

// mean denoising loss of the adapters-off model over sampled corpus tuples
double eval_denoise_loss(const UNet& net, const Vocabulary& vocab, const NoiseSchedule& sched,
                         const std::vector<CorpusItem>& corpus, int n, uint64_t seed);

// ---------------------------------------------------------------------------
// personalization
// ---------------------------------------------------------------------------

// One APT personalization run over a handful of reference images. Owns the
// model, vocabulary, indicator state, rng streams, optimizer, and logs.
class PersonalizeSession {
public:
    // fresh run (prior checkpoint without trainer state) or resume (with)
    PersonalizeSession(Checkpoint prior, std::vector<CorpusItem> refs, RunConfig cfg,
                       std::string run_dir);

    StepReport step();
    // loops to cfg.train.steps with logging and periodic checkpoints;
    // returns the final checkpoint path
    std::string run();

    uint64_t current_step() const { return step_; }
    const IndicatorState& indicator() const { return indicator_; }
    UNet& net() { return net_; }
    Vocabulary& vocab() { return vocab_; }
    const NoiseSchedule& schedule() const { return sched_; }
    const std::string& run_dir() const { return run_dir_; }
    uint64_t base_checksum_at_start() const { return base_checksum_; }

    std::string save_checkpoint_now(const std::string& filename) const;

private:
    std::vector<uint8_t> serialize_state() const;
    void restore_state(const std::vector<uint8_t>& blob);
    void append_logs(const StepReport& rep);
    void open_logs(bool fresh);
    [[noreturn]] void abort_non_finite(const StepReport& rep) const;

    RunConfig cfg_;
    NoiseSchedule sched_;
    BinMap binmap_;
    UNet net_;
    Vocabulary vocab_;
    std::vector<CorpusItem> refs_;
    std::vector<ConditioningPair> pairs_;
    IndicatorState indicator_;
    Rng rng_data_, rng_augment_, rng_noise_;
    AdamW opt_;
    uint64_t step_ = 0;
    uint64_t base_checksum_ = 0;
    std::string run_dir_;
    std::ofstream train_log_, indicator_log_;
};

// derives independent substream seeds from a master seed
uint64_t derive_seed(uint64_t seed, uint64_t tag);

// fixed-format double printing for diffable CSV logs
std::string fmt_double(double v);

} // namespace apt
