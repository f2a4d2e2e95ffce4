#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "apt/eval.hpp"
#include "apt/trainer.hpp"
#include "test_util.hpp"

using namespace apt;
using apt::test::TempDir;

namespace {

// tiny everything so trainer tests stay fast
RunConfig tiny_run_cfg() {
    RunConfig cfg;
    cfg.net.image_size = 16;
    cfg.net.in_channels = 1;
    cfg.net.base_channels = 8;
    cfg.net.channel_multipliers = {1, 2};
    cfg.net.attention_levels = {1};
    cfg.net.tap_levels = {0};
    cfg.net.num_heads = 2;
    cfg.net.token_dim = 8;
    cfg.net.time_dim = 16;
    cfg.net.norm_groups = 4;
    cfg.T = 40;
    cfg.train.bins = 10;
    cfg.train.adapter_rank = 4;
    cfg.train.steps = 8;
    cfg.train.checkpoint_every = 0;
    cfg.pretrain.steps = 0;
    cfg.pretrain.corpus_size = 4;
    return cfg;
}

std::vector<CorpusItem> tiny_refs(int n = 1) {
    return generate_references(n, "circle", 16, 1, 42);
}

Checkpoint make_prior(const RunConfig& cfg, const TempDir& dir, const char* name = "prior.aptc") {
    CorpusSpec spec;
    spec.count = cfg.pretrain.corpus_size;
    spec.image_size = cfg.net.image_size;
    spec.channels = cfg.net.in_channels;
    spec.seed = cfg.pretrain.corpus_seed;
    PretrainResult pre = pretrain(generate_corpus(spec), cfg);
    const std::string path = dir.file(name);
    save_checkpoint(path, pre.net, pre.vocab, cfg.T, cfg.beta_start, cfg.beta_end);
    return load_checkpoint(path);
}

} // namespace

TEST_CASE("config json parsing, defaults, and rejection") {
    const RunConfig defaults = RunConfig::from_json_text("{}");
    CHECK(defaults.train.lambda_dist == 30.0);
    CHECK(defaults.train.lambda_attn == 3e-4);
    CHECK(defaults.train.p_max == 0.8);
    CHECK(defaults.train.bins == 10);
    CHECK(defaults.train.ema_alpha == 0.1);
    CHECK(defaults.train.adapter_rank == 32);
    CHECK(defaults.train.batch_size == 1);
    CHECK(defaults.train.ablation.ata);
    CHECK(defaults.train.ablation.rs);
    CHECK(defaults.train.ablation.aa);
    CHECK(defaults.T == 1000);

    const RunConfig c = RunConfig::from_json_text(R"({
        "train": {"temperature_mode": "T-over-10", "steps": 5,
                  "ablation": {"rs": false}},
        "sched": {"T": 100}
    })");
    CHECK(c.train.temperature_mode == TemperatureMode::TOver10);
    CHECK(c.train.temperature(100) == 10.0);
    CHECK(c.train.steps == 5);
    CHECK_FALSE(c.train.ablation.rs);
    CHECK(c.train.ablation.ata);

    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"train": {"lr_adaptor": 1.0}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"sched": {"T": 45}})"), // bins don't divide
                    std::invalid_argument);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"train": {"temperature_mode": "warm"}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"train": {"align_self_attention": true}})"),
                    std::invalid_argument);

    // canonical dump re-parses to the same hash
    const RunConfig back = RunConfig::from_json_text(c.canonical_json());
    CHECK(back.config_hash() == c.config_hash());
}

TEST_CASE("adamw descends a quadratic") {
    Var p(Tensor::full({4}, 5.0), true);
    AdamW opt({AdamW::Group{{p}, 0.1}}, 0.9, 0.999, 1e-8, 0.0);
    for (int i = 0; i < 200; ++i) {
        backward(sum_all(square(p)));
        opt.step();
        opt.zero_grads();
    }
    for (int64_t i = 0; i < 4; ++i) CHECK(std::fabs(p.value()[i]) < 0.2);
}

TEST_CASE("pretrain with zero steps equals the seeded initialization") {
    RunConfig cfg = tiny_run_cfg();
    CorpusSpec spec;
    spec.count = 4;
    spec.image_size = 16;
    spec.channels = 1;
    const auto corpus = generate_corpus(spec);
    PretrainResult a = pretrain(corpus, cfg);
    PretrainResult b = pretrain(corpus, cfg);
    CHECK(a.net.base_checksum() == b.net.base_checksum());
    // matches direct construction from the derived init stream
    Rng init(derive_seed(cfg.pretrain.seed, 0));
    UNet expect(cfg.net, init);
    CHECK(a.net.base_checksum() == expect.base_checksum());
}

TEST_CASE("pretrain is deterministic and reduces the loss") {
    RunConfig cfg = tiny_run_cfg();
    cfg.pretrain.steps = 260;
    cfg.pretrain.corpus_size = 12;
    CorpusSpec spec;
    spec.count = 12;
    spec.image_size = 16;
    spec.channels = 1;
    const auto corpus = generate_corpus(spec);

    PretrainResult r1 = pretrain(corpus, cfg);
    PretrainResult r2 = pretrain(corpus, cfg);
    CHECK(r1.net.base_checksum() == r2.net.base_checksum());

    RunConfig cfg0 = cfg;
    cfg0.pretrain.steps = 0;
    PretrainResult init = pretrain(corpus, cfg0);
    const NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    const double before = eval_denoise_loss(init.net, init.vocab, sched, corpus, 64, 9);
    const double after = eval_denoise_loss(r1.net, r1.vocab, sched, corpus, 64, 9);
    CHECK(after < before);

    CHECK_THROWS_AS(pretrain({}, cfg), std::invalid_argument);
}

TEST_CASE("first personalize step: theta equals phi exactly") {
    TempDir dir("per_fresh");
    RunConfig cfg = tiny_run_cfg();
    Checkpoint prior = make_prior(cfg, dir);
    PersonalizeSession session(std::move(prior), tiny_refs(), cfg, dir.file("run"));
    const StepReport rep = session.step();
    CHECK(rep.l_dm_theta == rep.l_dm_phi);
    CHECK(rep.gamma == 0.0);
    CHECK(rep.l_mu == 0.0);
    CHECK(rep.l_sigma == 0.0);
    CHECK(rep.l_attn == 0.0);
    CHECK(session.indicator().gamma(rep.bin) == 0.0);
}

TEST_CASE("all-off ablation with zero lambdas reduces to the raw denoising loss") {
    TempDir dir("per_base");
    RunConfig cfg = tiny_run_cfg();
    cfg.train.ablation = {false, false, false};
    cfg.train.lambda_dist = 0.0;
    cfg.train.lambda_attn = 0.0;
    Checkpoint prior = make_prior(cfg, dir);
    PersonalizeSession session(std::move(prior), tiny_refs(), cfg, dir.file("run"));
    for (int i = 0; i < 4; ++i) {
        const StepReport rep = session.step();
        CHECK(rep.total == rep.l_dm_theta);
        CHECK(rep.weight == 1.0);
        CHECK(rep.l_mu == 0.0);
        CHECK(rep.l_sigma == 0.0);
        CHECK(rep.l_attn == 0.0);
        CHECK_FALSE(rep.aug_applied);
    }
}

TEST_CASE("disabled components report exactly zero") {
    TempDir dir("per_lattice");
    RunConfig cfg = tiny_run_cfg();
    cfg.train.ablation = {true, false, false};
    Checkpoint prior = make_prior(cfg, dir);
    PersonalizeSession session(std::move(prior), tiny_refs(), cfg, dir.file("run"));
    for (int i = 0; i < 4; ++i) {
        const StepReport rep = session.step();
        CHECK(rep.l_mu == 0.0);
        CHECK(rep.l_sigma == 0.0);
        CHECK(rep.l_attn == 0.0);
    }
}

TEST_CASE("identical seeds give identical step streams") {
    TempDir dir("per_det");
    RunConfig cfg = tiny_run_cfg();
    Checkpoint p1 = make_prior(cfg, dir, "p1.aptc");
    Checkpoint p2 = load_checkpoint(dir.file("p1.aptc"));
    PersonalizeSession s1(std::move(p1), tiny_refs(), cfg, dir.file("run1"));
    PersonalizeSession s2(std::move(p2), tiny_refs(), cfg, dir.file("run2"));
    for (int i = 0; i < 6; ++i) {
        const StepReport a = s1.step();
        const StepReport b = s2.step();
        CHECK(a.t == b.t);
        CHECK(a.l_dm_theta == b.l_dm_theta);
        CHECK(a.l_dm_phi == b.l_dm_phi);
        CHECK(a.gamma == b.gamma);
        CHECK(a.l_mu == b.l_mu);
        CHECK(a.l_sigma == b.l_sigma);
        CHECK(a.l_attn == b.l_attn);
        CHECK(a.total == b.total);
        CHECK(a.aug_applied == b.aug_applied);
        CHECK(a.aug_scale == b.aug_scale);
    }
}

TEST_CASE("gamma causality: each step consumes the pre-update value") {
    TempDir dir("per_causal");
    RunConfig cfg = tiny_run_cfg();
    cfg.train.steps = 12;
    Checkpoint prior = make_prior(cfg, dir);
    PersonalizeSession session(std::move(prior), tiny_refs(), cfg, dir.file("run"));
    for (int i = 0; i < 12; ++i) {
        std::vector<double> pre = session.indicator().gammas();
        const StepReport rep = session.step();
        CHECK(rep.gamma == pre[size_t(rep.bin)]);
    }
}

TEST_CASE("frozen base weights survive personalization") {
    TempDir dir("per_frozen");
    RunConfig cfg = tiny_run_cfg();
    cfg.train.steps = 6;
    Checkpoint prior = make_prior(cfg, dir);
    PersonalizeSession session(std::move(prior), tiny_refs(), cfg, dir.file("run"));
    const uint64_t before = session.net().base_checksum();
    session.run();
    CHECK(session.net().base_checksum() == before);
    CHECK(session.base_checksum_at_start() == before);
    // the identifier embedding drifted away from its class initialization
    const Tensor& ident = session.vocab().identifiers()[0].embedding.value();
    Tensor cls({session.vocab().token_dim()});
    const double* src = session.vocab().base_table().value().data() +
                        size_t(session.vocab().identifiers()[0].class_id) *
                            session.vocab().token_dim();
    double diff = 0;
    for (int i = 0; i < session.vocab().token_dim(); ++i) {
        cls[i] = src[i];
        diff += (ident[i] - cls[i]) * (ident[i] - cls[i]);
    }
    CHECK(diff > 0.0);
}

TEST_CASE("resume reproduces the unbroken run bit-exactly") {
    TempDir dir("per_resume");
    RunConfig cfg = tiny_run_cfg();
    cfg.train.steps = 10;
    cfg.train.checkpoint_every = 0;
    Checkpoint prior = make_prior(cfg, dir, "p.aptc");

    // unbroken 10-step run
    PersonalizeSession full(std::move(prior), tiny_refs(), cfg, dir.file("full"));
    const std::string full_final = full.run();

    // 5 steps, save, then resume to 10 in a fresh session
    RunConfig cfg5 = cfg;
    cfg5.train.steps = 5;
    Checkpoint prior2 = load_checkpoint(dir.file("p.aptc"));
    PersonalizeSession half(std::move(prior2), tiny_refs(), cfg5, dir.file("split"));
    const std::string half_final = half.run();

    Checkpoint mid = load_checkpoint(half_final);
    CHECK_FALSE(mid.trainer_state.empty());
    PersonalizeSession rest(std::move(mid), tiny_refs(), cfg, dir.file("split"));
    CHECK(rest.current_step() == 5);
    const std::string rest_final = rest.run();

    // final checkpoints and logs agree byte-for-byte
    CHECK(apt::test::read_file(full_final) == apt::test::read_file(rest_final));
    CHECK(apt::test::read_file(dir.file("full/train_log.csv")) ==
          apt::test::read_file(dir.file("split/train_log.csv")));
    CHECK(apt::test::read_file(dir.file("full/indicator.csv")) ==
          apt::test::read_file(dir.file("split/indicator.csv")));
}

TEST_CASE("resume rejects a mismatched config") {
    TempDir dir("per_resume_bad");
    RunConfig cfg = tiny_run_cfg();
    cfg.train.steps = 3;
    Checkpoint prior = make_prior(cfg, dir);
    PersonalizeSession s(std::move(prior), tiny_refs(), cfg, dir.file("run"));
    const std::string final_path = s.run();
    Checkpoint mid = load_checkpoint(final_path);
    RunConfig changed = cfg;
    changed.train.lr_adapter *= 2.0;
    changed.train.steps = 6;
    CHECK_THROWS_AS(PersonalizeSession(std::move(mid), tiny_refs(), changed, dir.file("run2")),
                    std::runtime_error);
}

TEST_CASE("personalize rejects bad reference sets") {
    TempDir dir("per_refs");
    RunConfig cfg = tiny_run_cfg();
    Checkpoint prior = make_prior(cfg, dir);
    CHECK_THROWS_AS(PersonalizeSession(std::move(prior), {}, cfg, dir.file("r0")),
                    std::invalid_argument);
    Checkpoint prior2 = load_checkpoint(dir.file("prior.aptc"));
    auto refs = tiny_refs(2);
    refs[1].class_word = "square";
    CHECK_THROWS_AS(PersonalizeSession(std::move(prior2), refs, cfg, dir.file("r1")),
                    std::invalid_argument);
}

TEST_CASE("non-finite losses abort with a diagnostic dump") {
    TempDir dir("per_nan");
    RunConfig cfg = tiny_run_cfg();
    Checkpoint prior = make_prior(cfg, dir);
    auto refs = tiny_refs();
    refs[0].image[0] = std::nan("");
    PersonalizeSession s(std::move(prior), refs, cfg, dir.file("run"));
    CHECK_THROWS_AS(s.step(), std::runtime_error);
    CHECK(std::filesystem::exists(dir.file("run/diag_nonfinite.json")));
}

TEST_CASE("steps=0 personalization leaves the model at the prior") {
    TempDir dir("per_zero");
    RunConfig cfg = tiny_run_cfg();
    cfg.train.steps = 0;
    Checkpoint prior = make_prior(cfg, dir);
    const uint64_t prior_checksum = prior.net.base_checksum();
    PersonalizeSession s(std::move(prior), tiny_refs(), cfg, dir.file("run"));
    const std::string final_path = s.run();
    const Checkpoint out = load_checkpoint(final_path);
    CHECK(out.net.base_checksum() == prior_checksum);
    // adapters still zero-delta: toggling changes nothing
    NoGradGuard ng;
    Rng rng(5);
    Tensor x = Tensor::randn({1, 1, 16, 16}, rng);
    Var tokens = out.vocab.embed(out.vocab.tokenize("a photo of circle on a red solid background"));
    ForwardOptions on, off;
    on.adapters_on = true;
    off.adapters_on = false;
    CHECK(apt::test::tensors_equal(out.net.forward(x, 3, tokens, on).eps.value(),
                                   out.net.forward(x, 3, tokens, off).eps.value()));
}
