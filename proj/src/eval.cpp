#include "apt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "apt/image.hpp"

namespace apt {

namespace fs = std::filesystem;

ProbeSet build_probe_set(const NetConfig& net, int T, int bins, int count, uint64_t seed) {
    if (count < 1) throw std::invalid_argument("build_probe_set: count must be >= 1");
    CorpusSpec spec;
    spec.count = count;
    spec.image_size = net.image_size;
    spec.channels = net.in_channels;
    spec.seed = derive_seed(seed, 11);
    const std::vector<CorpusItem> corpus = generate_corpus(spec);
    const BinMap bm(T, bins);
    Rng rng(derive_seed(seed, 12));
    ProbeSet probes;
    for (int i = 0; i < count; ++i) {
        ProbeItem item;
        item.x0 = corpus[size_t(i)].image;
        item.caption_template = corpus[size_t(i)].caption_template;
        item.class_word = corpus[size_t(i)].class_word;
        item.eps = Tensor::randn(item.x0.shape, rng);
        const int bin = i % bins;
        item.t = bin * bm.width() + int(rng.uniform_int(uint64_t(bm.width())));
        probes.items.push_back(std::move(item));
    }
    return probes;
}

double delta_noise(const Checkpoint& ckpt, const ProbeSet& probes, bool same_conditioning) {
    if (probes.items.empty()) throw std::invalid_argument("delta_noise: empty probe set");
    NoGradGuard ng;
    const NoiseSchedule sched = ckpt.schedule();
    // training convention: the identifier stands in for its own class word;
    // probes of other classes keep the class caption on both sides
    std::string ident_token, ident_class;
    if (!ckpt.vocab.identifiers().empty()) {
        ident_token = ckpt.vocab.identifiers()[0].token;
        ident_class = ckpt.vocab.token_of(ckpt.vocab.identifiers()[0].class_id);
    }
    double total = 0.0;
    for (const auto& item : probes.items) {
        const Tensor x_t = q_sample(item.x0, item.eps, item.t, sched);
        const std::string class_caption = fill_template(item.caption_template, item.class_word);
        std::vector<int> ids_class = ckpt.vocab.tokenize(class_caption);
        std::vector<int> ids_theta = ids_class;
        if (!same_conditioning && !ident_token.empty() && item.class_word == ident_class)
            ids_theta = ckpt.vocab.tokenize(fill_template(item.caption_template, ident_token));

        ForwardOptions phi_opt;
        phi_opt.adapters_on = false;
        ForwardOptions theta_opt;
        theta_opt.adapters_on = true;
        const Var eps_phi = ckpt.net.forward(x_t, item.t, ckpt.vocab.embed(ids_class), phi_opt).eps;
        const Var eps_theta =
            ckpt.net.forward(x_t, item.t,
                             ckpt.vocab.embed(ids_theta, ckpt.net.adapter_scale()), theta_opt)
                .eps;
        total += mse(eps_phi, eps_theta).value()[0];
    }
    return total / double(probes.items.size());
}

// ---------------------------------------------------------------------------
// gamma report
// ---------------------------------------------------------------------------

GammaReport gamma_report(const std::string& path, int bins) {
    if (bins < 1) throw std::invalid_argument("gamma_report: bins must be >= 1");
    std::ifstream f(path);
    if (!f) throw std::runtime_error("gamma_report: cannot open " + path);
    GammaReport report;
    report.series.resize(size_t(bins));
    std::string line;
    int lineno = 0;
    bool header_seen = false;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (!header_seen) {
            header_seen = true;
            if (line.rfind("step,", 0) == 0) continue; // header row
        }
        std::istringstream ss(line);
        std::string field;
        int64_t step = 0;
        int bin = 0;
        double ema_phi = 0, ema_theta = 0, gamma = 0;
        try {
            std::getline(ss, field, ',');
            step = std::stoll(field);
            std::getline(ss, field, ',');
            bin = std::stoi(field);
            std::getline(ss, field, ',');
            ema_phi = std::stod(field);
            std::getline(ss, field, ',');
            ema_theta = std::stod(field);
            if (!std::getline(ss, field, ',')) throw std::invalid_argument("missing column");
            gamma = std::stod(field);
        } catch (const std::exception&) {
            throw std::runtime_error("gamma_report: parse error at line " +
                                     std::to_string(lineno) + " of " + path);
        }
        (void)ema_phi;
        (void)ema_theta;
        if (bin < 0 || bin >= bins)
            throw std::runtime_error("gamma_report: bin out of range at line " +
                                     std::to_string(lineno) + " of " + path);
        report.series[size_t(bin)].push_back({step, gamma});
    }
    report.summary.resize(size_t(bins));
    for (int b = 0; b < bins; ++b) {
        auto& s = report.summary[size_t(b)];
        s.bin = b;
        const auto& pts = report.series[size_t(b)];
        s.final_gamma = pts.empty() ? 0.0 : pts.back().gamma;
        s.first_step_above_half = -1;
        for (const auto& p : pts)
            if (p.gamma > 0.5) {
                s.first_step_above_half = p.step;
                break;
            }
    }
    return report;
}

namespace {

Rgb bin_color(int bin, int bins) {
    // hue sweep blue -> red
    const double t = bins > 1 ? double(bin) / double(bins - 1) : 0.0;
    const double r = std::min(1.0, 2.0 * t);
    const double b = std::min(1.0, 2.0 * (1.0 - t));
    const double g = 0.8 - 0.6 * std::abs(2.0 * t - 1.0);
    return Rgb{uint8_t(r * 255), uint8_t(g * 255), uint8_t(b * 255)};
}

} // namespace

void write_gamma_report(const GammaReport& report, const std::string& out_dir,
                        const std::string& prefix) {
    fs::create_directories(out_dir);
    const int bins = int(report.series.size());

    std::ofstream sm(fs::path(out_dir) / (prefix + "_summary.csv"));
    sm << "bin,final_gamma,first_step_gamma_gt_0.5\n";
    for (const auto& s : report.summary)
        sm << s.bin << "," << fmt_double(s.final_gamma) << "," << s.first_step_above_half << "\n";

    // line plot: gamma in [0,1] against training step
    const int W = 640, H = 400, ml = 46, mr = 90, mt = 16, mb = 34;
    ImageU8 img(W, H, 3, 255);
    int64_t max_step = 1;
    for (const auto& s : report.series)
        if (!s.empty()) max_step = std::max(max_step, s.back().step);
    const Rgb axis{40, 40, 40}, grid{220, 220, 220};
    for (int i = 0; i <= 5; ++i) {
        const int y = mt + int((H - mt - mb) * (1.0 - i / 5.0));
        draw_line(img, ml, y, W - mr, y, grid);
        char lbl[16];
        std::snprintf(lbl, sizeof(lbl), "%.1f", i / 5.0);
        draw_text(img, 8, y - 5, lbl, axis);
    }
    draw_line(img, ml, mt, ml, H - mb, axis);
    draw_line(img, ml, H - mb, W - mr, H - mb, axis);
    draw_text(img, ml, H - mb + 8, "0", axis);
    draw_text(img, W - mr - 40, H - mb + 8, std::to_string(max_step), axis);
    for (int b = 0; b < bins; ++b) {
        const auto& pts = report.series[size_t(b)];
        const Rgb col = bin_color(b, bins);
        for (size_t i = 1; i < pts.size(); ++i) {
            const double x0 = ml + double(W - ml - mr) * double(pts[i - 1].step) / double(max_step);
            const double x1 = ml + double(W - ml - mr) * double(pts[i].step) / double(max_step);
            const double y0 = mt + (H - mt - mb) * (1.0 - std::clamp(pts[i - 1].gamma, 0.0, 1.0));
            const double y1 = mt + (H - mt - mb) * (1.0 - std::clamp(pts[i].gamma, 0.0, 1.0));
            draw_line(img, x0, y0, x1, y1, col);
        }
        // legend
        const int ly = mt + b * 16;
        fill_rect(img, W - mr + 8, ly, W - mr + 20, ly + 10, col);
        draw_text(img, W - mr + 26, ly, std::to_string(b), axis);
    }
    save_png((fs::path(out_dir) / (prefix + "_plot.png")).string(), img);
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

std::vector<Tensor> sample(const Checkpoint& ckpt, const SampleRequest& req) {
    if (req.count < 1) throw std::invalid_argument("sample: count must be >= 1");
    NoGradGuard ng;
    const NoiseSchedule sched = ckpt.schedule();
    const std::vector<int> ids = ckpt.vocab.tokenize(req.caption); // unknown-token errors here
    if (ids.empty()) throw std::invalid_argument("sample: empty caption");
    const std::vector<int> null_ids(ids.size(), ckpt.vocab.null_id());
    const Var tokens_c = ckpt.vocab.embed(ids, ckpt.net.adapter_scale());
    const Var tokens_u = ckpt.vocab.embed(null_ids);

    const int n = req.count, c = ckpt.net_cfg.in_channels, s = ckpt.net_cfg.image_size;
    Rng rng(derive_seed(req.seed, 21));
    Tensor x = Tensor::randn({n, c, s, s}, rng);
    ForwardOptions opt;
    opt.adapters_on = true;
    for (int t = sched.T - 1; t >= 0; --t) {
        const Tensor eps_c = ckpt.net.forward(x, t, tokens_c, opt).eps.value();
        const Tensor eps_u = ckpt.net.forward(x, t, tokens_u, opt).eps.value();
        const Tensor eps = cfg_combine(eps_u, eps_c, req.guidance);
        x = sample_step(x, eps, t, sched, rng);
    }
    std::vector<Tensor> out;
    const int64_t plane = int64_t(c) * s * s;
    for (int i = 0; i < n; ++i) {
        Tensor img({c, s, s});
        std::copy(x.data() + i * plane, x.data() + (i + 1) * plane, img.data());
        out.push_back(std::move(img));
    }
    return out;
}

std::string sample_to_png(const Checkpoint& ckpt, const SampleRequest& req,
                          const std::string& out_path) {
    const std::vector<Tensor> imgs = sample(ckpt, req);
    save_png(out_path, make_grid(imgs));
    return out_path;
}

// ---------------------------------------------------------------------------
// ablation suite
// ---------------------------------------------------------------------------

std::pair<double, double> gamma_band_means(const GammaReport& report, int k) {
    const int bins = int(report.summary.size());
    const int kk = std::min(k, bins / 2);
    if (kk < 1) throw std::invalid_argument("gamma_band_means: too few bins");
    double low = 0.0, high = 0.0;
    for (int i = 0; i < kk; ++i) {
        low += report.summary[size_t(i)].final_gamma;
        high += report.summary[size_t(bins - 1 - i)].final_gamma;
    }
    return {low / kk, high / kk};
}

void write_ablation_table(const std::vector<AblationRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_ablation_table: cannot open " + path);
    f << "variant,ata,rs,aa,delta_noise_first,delta_noise_final,delta_noise_increasing,"
         "gamma_low3_mean,gamma_high3_mean\n";
    for (const auto& r : rows)
        f << r.variant << "," << int(r.ata) << "," << int(r.rs) << "," << int(r.aa) << ","
          << fmt_double(r.delta_noise_first) << "," << fmt_double(r.delta_noise_final) << ","
          << int(r.delta_noise_increasing) << "," << fmt_double(r.gamma_low3_mean) << ","
          << fmt_double(r.gamma_high3_mean) << "\n";
}

std::vector<AblationRow> run_ablation_suite(const RunConfig& cfg,
                                            const std::vector<CorpusItem>& refs,
                                            const std::string& prior_path,
                                            const std::string& out_dir, uint64_t probe_seed) {
    struct VariantSpec {
        const char* name;
        AblationFlags flags;
    };
    const VariantSpec variants[] = {
        {"base", {false, false, false}},
        {"ata", {true, false, false}},
        {"ata_rs", {true, true, false}},
        {"full_apt", {true, true, true}},
    };
    fs::create_directories(out_dir);
    const ProbeSet probes = build_probe_set(cfg.net, cfg.T, cfg.train.bins, 64, probe_seed);

    std::vector<AblationRow> rows;
    for (const auto& variant : variants) {
        RunConfig vcfg = cfg;
        vcfg.train.ablation = variant.flags;
        const std::string run_dir = (fs::path(out_dir) / variant.name).string();

        Checkpoint prior = load_checkpoint(prior_path);
        PersonalizeSession session(std::move(prior), refs, vcfg, run_dir);
        const std::string final_path = session.run();

        // evaluate the divergence trend over the periodic checkpoints
        std::vector<std::string> ckpts;
        for (const auto& e : fs::directory_iterator(run_dir)) {
            const std::string name = e.path().filename().string();
            if (name.rfind("ckpt_", 0) == 0 && name.size() > 5 && e.path().extension() == ".aptc")
                ckpts.push_back(e.path().string());
        }
        std::sort(ckpts.begin(), ckpts.end());
        ckpts.push_back(final_path);

        AblationRow row;
        row.variant = variant.name;
        row.ata = variant.flags.ata;
        row.rs = variant.flags.rs;
        row.aa = variant.flags.aa;
        std::vector<double> deltas;
        for (const auto& p : ckpts) deltas.push_back(delta_noise(load_checkpoint(p), probes));
        row.delta_noise_first = deltas.front();
        row.delta_noise_final = deltas.back();
        row.delta_noise_increasing = deltas.back() > deltas.front();

        const GammaReport gr = gamma_report(run_dir + "/indicator.csv", cfg.train.bins);
        write_gamma_report(gr, run_dir, "gamma");
        const auto [low, high] = gamma_band_means(gr);
        row.gamma_low3_mean = low;
        row.gamma_high3_mean = high;
        rows.push_back(std::move(row));
    }
    write_ablation_table(rows, (fs::path(out_dir) / "table.csv").string());
    return rows;
}

} // namespace apt
