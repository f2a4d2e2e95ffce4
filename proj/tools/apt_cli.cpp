// Command-line surface for the adaptive personalization trainer.
//
// Verbs: pretrain, personalize, sample, delta-noise, gamma-report, ablate.
// Every verb reads the structured JSON config (--config or APT_CONFIG env)
// plus flag overrides. Outputs land in a run directory named by config hash
// and seed. Exit code 0 on success; nonzero with a machine-readable JSON
// error on stderr otherwise.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "apt/checkpoint.hpp"
#include "apt/corpus.hpp"
#include "apt/eval.hpp"
#include "apt/image.hpp"
#include "apt/trainer.hpp"

namespace fs = std::filesystem;
using namespace apt;

namespace {

std::string hash_hex(uint64_t h) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

RunConfig load_config(const std::string& config_path) {
    std::string path = config_path;
    if (path.empty()) {
        const char* env = std::getenv("APT_CONFIG");
        if (env) path = env;
    }
    if (path.empty()) return RunConfig{}; // defaults
    return RunConfig::from_json_file(path);
}

std::string make_run_dir(const std::string& out_root, const std::string& kind,
                         const RunConfig& cfg, uint64_t seed) {
    const std::string dir =
        (fs::path(out_root) / (kind + "_" + hash_hex(cfg.config_hash()) + "_s" +
                               std::to_string(seed)))
            .string();
    fs::create_directories(dir);
    std::ofstream f(fs::path(dir) / "config.json");
    f << cfg.canonical_json() << "\n";
    return dir;
}

std::vector<CorpusItem> resolve_refs(const std::string& manifest, int synthetic_count,
                                     const std::string& class_word, uint64_t refs_seed,
                                     const RunConfig& cfg, const std::string& run_dir) {
    if (!manifest.empty()) return load_corpus(manifest);
    if (synthetic_count > 0) {
        auto refs = generate_references(synthetic_count, class_word, cfg.net.image_size,
                                        cfg.net.in_channels, refs_seed);
        write_corpus(refs, (fs::path(run_dir) / "refs").string());
        return refs;
    }
    throw std::invalid_argument("no references: pass --refs manifest or --synthetic-refs N");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive personalization trainer for a miniature diffusion model"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (or APT_CONFIG env)");

    // ---- pretrain ----
    auto* cmd_pre = app.add_subcommand("pretrain", "train the prior on the procedural corpus");
    std::string pre_out = "runs";
    int pre_steps = -1;
    int64_t pre_seed = -1;
    cmd_pre->add_option("--out", pre_out, "output root directory");
    cmd_pre->add_option("--steps", pre_steps, "override pretrain.steps");
    cmd_pre->add_option("--seed", pre_seed, "override pretrain.seed");

    // ---- personalize ----
    auto* cmd_per = app.add_subcommand("personalize", "run APT personalization");
    std::string per_prior, per_refs, per_out = "runs", per_resume, per_class = "circle";
    int per_steps = -1, per_synth = 0;
    int64_t per_seed = -1;
    uint64_t per_refs_seed = 99;
    std::string per_ablation;
    cmd_per->add_option("--prior", per_prior, "prior checkpoint path");
    cmd_per->add_option("--refs", per_refs, "reference manifest file");
    cmd_per->add_option("--synthetic-refs", per_synth, "generate N synthetic reference images");
    cmd_per->add_option("--class", per_class, "class word for synthetic references");
    cmd_per->add_option("--refs-seed", per_refs_seed, "seed for synthetic references");
    cmd_per->add_option("--out", per_out, "output root directory");
    cmd_per->add_option("--resume", per_resume, "checkpoint to resume from");
    cmd_per->add_option("--steps", per_steps, "override train.steps");
    cmd_per->add_option("--seed", per_seed, "override train.seed");
    cmd_per->add_option("--ablation", per_ablation,
                        "ablation variant: base | ata | ata-rs | full");

    // ---- sample ----
    auto* cmd_sam = app.add_subcommand("sample", "generate an image grid from a checkpoint");
    std::string sam_ckpt, sam_caption, sam_out = "samples.png";
    int sam_n = -1;
    double sam_guidance = -1.0;
    uint64_t sam_seed = 0;
    cmd_sam->add_option("--ckpt", sam_ckpt, "checkpoint path")->required();
    cmd_sam->add_option("--caption", sam_caption, "caption text")->required();
    cmd_sam->add_option("-n,--count", sam_n, "number of images");
    cmd_sam->add_option("--guidance", sam_guidance, "guidance scale (default 7.5)");
    cmd_sam->add_option("--seed", sam_seed, "sampling seed");
    cmd_sam->add_option("--out", sam_out, "output PNG path");

    // ---- delta-noise ----
    auto* cmd_dn = app.add_subcommand("delta-noise", "prior/fine-tuned divergence on a probe set");
    std::vector<std::string> dn_ckpts;
    uint64_t dn_probe_seed = 0x9a7c;
    int dn_count = 64;
    bool dn_same = false;
    std::string dn_out;
    cmd_dn->add_option("--ckpt", dn_ckpts, "checkpoint path(s)")->required();
    cmd_dn->add_option("--probe-seed", dn_probe_seed, "probe set seed");
    cmd_dn->add_option("--count", dn_count, "probe count");
    cmd_dn->add_flag("--same-conditioning", dn_same,
                     "use the class caption for both models");
    cmd_dn->add_option("--out", dn_out, "also append results to this CSV");

    // ---- gamma-report ----
    auto* cmd_gr = app.add_subcommand("gamma-report", "per-bin gamma curves and summary");
    std::string gr_log, gr_out = ".", gr_prefix = "gamma";
    int gr_bins = 10;
    cmd_gr->add_option("--log", gr_log, "indicator CSV path")->required();
    cmd_gr->add_option("--bins", gr_bins, "bin count");
    cmd_gr->add_option("--out", gr_out, "output directory");
    cmd_gr->add_option("--prefix", gr_prefix, "output filename prefix");

    // ---- ablate ----
    auto* cmd_ab = app.add_subcommand("ablate", "train and compare the four ablation variants");
    std::string ab_prior, ab_refs, ab_out = "runs", ab_class = "circle";
    int ab_synth = 0;
    uint64_t ab_refs_seed = 99, ab_probe_seed = 0x9a7c;
    int ab_steps = -1;
    int64_t ab_seed = -1;
    cmd_ab->add_option("--prior", ab_prior, "prior checkpoint path")->required();
    cmd_ab->add_option("--refs", ab_refs, "reference manifest file");
    cmd_ab->add_option("--synthetic-refs", ab_synth, "generate N synthetic reference images");
    cmd_ab->add_option("--class", ab_class, "class word for synthetic references");
    cmd_ab->add_option("--refs-seed", ab_refs_seed, "seed for synthetic references");
    cmd_ab->add_option("--probe-seed", ab_probe_seed, "probe set seed");
    cmd_ab->add_option("--out", ab_out, "output root directory");
    cmd_ab->add_option("--steps", ab_steps, "override train.steps");
    cmd_ab->add_option("--seed", ab_seed, "override train.seed");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = load_config(config_path);

        if (*cmd_pre) {
            if (pre_steps >= 0) cfg.pretrain.steps = pre_steps;
            if (pre_seed >= 0) cfg.pretrain.seed = uint64_t(pre_seed);
            cfg.validate();
            const std::string dir = make_run_dir(pre_out, "pretrain", cfg, cfg.pretrain.seed);
            CorpusSpec spec;
            spec.count = cfg.pretrain.corpus_size;
            spec.image_size = cfg.net.image_size;
            spec.channels = cfg.net.in_channels;
            spec.seed = cfg.pretrain.corpus_seed;
            const auto corpus = generate_corpus(spec);
            std::ofstream log(fs::path(dir) / "pretrain_log.csv");
            PretrainResult res = pretrain(corpus, cfg, &log);
            const std::string ckpt = (fs::path(dir) / "prior.aptc").string();
            save_checkpoint(ckpt, res.net, res.vocab, cfg.T, cfg.beta_start, cfg.beta_end);
            std::cout << ckpt << "\n";
        } else if (*cmd_per) {
            if (per_steps >= 0) cfg.train.steps = per_steps;
            if (per_seed >= 0) cfg.train.seed = uint64_t(per_seed);
            if (!per_ablation.empty()) {
                if (per_ablation == "base") cfg.train.ablation = {false, false, false};
                else if (per_ablation == "ata") cfg.train.ablation = {true, false, false};
                else if (per_ablation == "ata-rs") cfg.train.ablation = {true, true, false};
                else if (per_ablation == "full") cfg.train.ablation = {true, true, true};
                else throw std::invalid_argument("unknown --ablation variant: " + per_ablation);
            }
            cfg.validate();
            const std::string dir = make_run_dir(per_out, "apt", cfg, cfg.train.seed);
            const auto refs =
                resolve_refs(per_refs, per_synth, per_class, per_refs_seed, cfg, dir);
            const std::string source = per_resume.empty() ? per_prior : per_resume;
            if (source.empty())
                throw std::invalid_argument("personalize needs --prior (or --resume)");
            Checkpoint start = load_checkpoint(source);
            if (per_resume.empty()) start.trainer_state.clear();
            PersonalizeSession session(std::move(start), refs, cfg, dir);
            const std::string final_path = session.run();
            std::cout << final_path << "\n";
        } else if (*cmd_sam) {
            const Checkpoint ckpt = load_checkpoint(sam_ckpt);
            SampleRequest req;
            req.caption = sam_caption;
            req.count = sam_n > 0 ? sam_n : cfg.sample.count;
            req.guidance = sam_guidance >= 0.0 ? sam_guidance : cfg.sample.guidance;
            req.seed = sam_seed;
            std::cout << sample_to_png(ckpt, req, sam_out) << "\n";
        } else if (*cmd_dn) {
            std::vector<std::pair<std::string, double>> results;
            for (const auto& path : dn_ckpts) {
                const Checkpoint ckpt = load_checkpoint(path);
                const ProbeSet probes = build_probe_set(ckpt.net_cfg, ckpt.T, cfg.train.bins,
                                                        dn_count, dn_probe_seed);
                results.emplace_back(path, delta_noise(ckpt, probes, dn_same));
            }
            for (const auto& [path, d] : results)
                std::cout << path << "," << fmt_double(d) << "\n";
            if (!dn_out.empty()) {
                const bool fresh = !fs::exists(dn_out);
                std::ofstream f(dn_out, std::ios::app);
                if (fresh) f << "checkpoint,delta_noise\n";
                for (const auto& [path, d] : results) f << path << "," << fmt_double(d) << "\n";
            }
        } else if (*cmd_gr) {
            const GammaReport report = gamma_report(gr_log, gr_bins);
            write_gamma_report(report, gr_out, gr_prefix);
            for (const auto& s : report.summary)
                std::cout << "bin " << s.bin << ": final_gamma=" << fmt_double(s.final_gamma)
                          << " first_step_gt_0.5=" << s.first_step_above_half << "\n";
        } else if (*cmd_ab) {
            if (ab_steps >= 0) cfg.train.steps = ab_steps;
            if (ab_seed >= 0) cfg.train.seed = uint64_t(ab_seed);
            cfg.validate();
            const std::string dir = make_run_dir(ab_out, "ablate", cfg, cfg.train.seed);
            const auto refs = resolve_refs(ab_refs, ab_synth, ab_class, ab_refs_seed, cfg, dir);
            const auto rows = run_ablation_suite(cfg, refs, ab_prior, dir, ab_probe_seed);
            std::cout << dir << "/table.csv\n";
            for (const auto& r : rows)
                std::cout << r.variant << ": delta_first=" << fmt_double(r.delta_noise_first)
                          << " delta_final=" << fmt_double(r.delta_noise_final) << "\n";
        }
    } catch (const std::exception& e) {
        nlohmann::json err{{"error", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 0;
}
