#pragma once

#include <string>
#include <vector>

#include "apt/checkpoint.hpp"
#include "apt/corpus.hpp"
#include "apt/trainer.hpp"

namespace apt {

// ---------------------------------------------------------------------------
// noise-prediction divergence
// ---------------------------------------------------------------------------

struct ProbeItem {
    Tensor x0;
    Tensor eps;
    int t = 0;
    std::string caption_template;
    std::string class_word;
};

// Fixed probe set drawn from the prior-corpus distribution, timesteps
// stratified across the indicator bins.
struct ProbeSet {
    std::vector<ProbeItem> items;
};

ProbeSet build_probe_set(const NetConfig& net, int T, int bins, int count, uint64_t seed);

// Mean over probes of the mean-squared difference between the frozen-prior
// prediction (adapters off, class conditioning) and the fine-tuned
// prediction (adapters on, identifier conditioning). same_conditioning
// evaluates both with the class caption instead.
double delta_noise(const Checkpoint& ckpt, const ProbeSet& probes,
                   bool same_conditioning = false);

// ---------------------------------------------------------------------------
// indicator reports
// ---------------------------------------------------------------------------

struct GammaPoint {
    int64_t step;
    double gamma;
};

struct GammaBinSummary {
    int bin = 0;
    double final_gamma = 0.0;
    int64_t first_step_above_half = -1;
};

struct GammaReport {
    std::vector<std::vector<GammaPoint>> series; // indexed by bin
    std::vector<GammaBinSummary> summary;
};

// parses an indicator log CSV; parse failures carry the 1-based line number
GammaReport gamma_report(const std::string& indicator_csv_path, int bins);

// writes <prefix>_summary.csv and <prefix>_plot.png into out_dir
void write_gamma_report(const GammaReport& report, const std::string& out_dir,
                        const std::string& prefix);

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

struct SampleRequest {
    std::string caption;
    int count = 4;
    double guidance = 7.5;
    uint64_t seed = 0;
};

// ancestral sampling from pure noise with classifier-free guidance;
// returns CHW images in [-1, 1] (clamped on export only)
std::vector<Tensor> sample(const Checkpoint& ckpt, const SampleRequest& req);

// renders the sample grid to a PNG; returns the written path
std::string sample_to_png(const Checkpoint& ckpt, const SampleRequest& req,
                          const std::string& out_path);

// ---------------------------------------------------------------------------
// ablation driver
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string variant;
    bool ata = false, rs = false, aa = false;
    double delta_noise_first = 0.0;
    double delta_noise_final = 0.0;
    bool delta_noise_increasing = false;
    double gamma_low3_mean = 0.0;  // lowest-noise bins
    double gamma_high3_mean = 0.0; // highest-noise bins
};

// Trains Base / +ATA / +RS / +AA (full) with shared seeds, evaluates the
// noise-divergence trend per variant, and writes table.csv plus per-variant
// gamma plots under out_dir.
std::vector<AblationRow> run_ablation_suite(const RunConfig& cfg,
                                            const std::vector<CorpusItem>& refs,
                                            const std::string& prior_path,
                                            const std::string& out_dir,
                                            uint64_t probe_seed = 0x9a7c);

void write_ablation_table(const std::vector<AblationRow>& rows, const std::string& path);

// gamma means over the lowest-noise and highest-noise k bins of a summary
std::pair<double, double> gamma_band_means(const GammaReport& report, int k = 3);

} // namespace apt
