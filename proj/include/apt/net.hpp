#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "apt/autodiff.hpp"
#include "apt/rng.hpp"

namespace apt {

struct NetConfig {
    int image_size = 32;
    int in_channels = 3;
    int base_channels = 12;
    std::vector<int> channel_multipliers = {1, 2, 2};
    // levels carrying self + cross attention (level L-1 is the bottleneck)
    std::vector<int> attention_levels = {1, 2};
    // up-block levels exposing feature/attention taps; a tapped up-block
    // always carries cross-attention so the tap has an attention map
    std::vector<int> tap_levels = {0, 1};
    int num_heads = 4;
    int token_dim = 32;
    int time_dim = 64;
    int norm_groups = 6;

    int levels() const { return int(channel_multipliers.size()); }
    int channels_at(int level) const { return base_channels * channel_multipliers[size_t(level)]; }
    bool attention_at(int level) const;
    bool tap_at(int level) const;
    bool cross_attention_at_up(int level) const { return attention_at(level) || tap_at(level); }
    void validate() const;

    bool operator==(const NetConfig& o) const = default;
};

// Captured intermediates from one forward pass: feature maps h^(l) and
// head-resolved cross-attention probabilities, keyed by up-block level.
struct TapBundle {
    std::map<int, Var> features;   // (N, C, H, W)
    std::map<int, Var> attentions; // (N, heads, queries, text tokens)
};

struct ForwardOptions {
    bool adapters_on = true;
    bool capture_taps = false;
};

struct ForwardResult {
    Var eps;
    TapBundle taps;
};

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

struct LinearLayer {
    Var w; // (in, out)
    Var b; // (out)
    void init(int in, int out, Rng& rng);
    Var forward(const Var& x) const { return linear(x, w, b); }
};

// Linear map with an optional rank-r delta: y = xW + b + scale * (xA)B.
// B starts at zero so a fresh adapter is a no-op; scale 0 or adapters_off
// skips the delta branch entirely, making the base path bit-identical.
struct AdaptedLinear {
    Var w; // (in, out)
    Var b; // (out)
    Var down; // (in, r)
    Var up;   // (r, out)
    int rank = 0;

    void init(int in, int out, Rng& rng);
    void attach_adapter(int r, Rng& rng);
    Var forward(const Var& x, bool adapters_on, double scale) const;
};

struct ConvLayer {
    Var w; // (out, in, k, k)
    Var b; // (out)
    int stride = 1;
    int pad = 1;
    void init(int in, int out, int k, int stride_, int pad_, Rng& rng, bool zero = false);
    Var forward(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct GroupNormLayer {
    Var g;
    Var b;
    int groups = 8;
    void init(int channels, int groups_);
    Var forward(const Var& x) const { return group_norm(x, g, b, groups); }
};

struct ResBlock {
    GroupNormLayer gn1, gn2;
    ConvLayer conv1, conv2;
    LinearLayer temb_proj; // time_dim -> out channels
    ConvLayer skip;        // 1x1 when channel count changes
    bool has_skip = false;

    void init(int in, int out, int time_dim, int groups, Rng& rng);
    Var forward(const Var& x, const Var& temb_act) const;
};

struct AttentionBlock {
    GroupNormLayer gn;
    bool has_self = false;
    AdaptedLinear sq, sk, sv, so;
    AdaptedLinear cq, ck, cv, co;
    int heads = 1;

    void init(int channels, int token_dim, int heads_, int groups, bool with_self, Rng& rng);
    // attn_tap, when non-null, receives cross-attention probabilities as
    // (N, heads, queries, tokens)
    Var forward(const Var& x, const Var& tokens, bool adapters_on, double scale,
                Var* attn_tap) const;
};

// ---------------------------------------------------------------------------
// the denoiser
// ---------------------------------------------------------------------------

// Miniature conditional U-Net. One parameter set serves as both the frozen
// prior (adapters off) and the fine-tuned model (adapters on).
class UNet {
public:
    UNet() = default;
    UNet(const NetConfig& cfg, Rng& rng);

    const NetConfig& config() const { return cfg_; }

    ForwardResult forward(const Tensor& x_t, int t, const Var& tokens,
                          const ForwardOptions& opt) const;

    void attach_adapters(int rank, Rng& rng);
    int adapter_rank() const { return adapter_rank_; }
    void set_adapter_scale(double scale);
    double adapter_scale() const { return adapter_scale_; }

    std::vector<Var> adapter_params() const;
    std::vector<Var> base_params() const;
    const std::vector<std::pair<std::string, Var>>& named_base() const { return named_base_; }
    const std::vector<std::pair<std::string, Var>>& named_adapters() const {
        return named_adapters_;
    }

    // flips requires_grad on the two parameter sets
    void set_trainable(bool base, bool adapters);

    uint64_t base_checksum() const;

private:
    struct DownLevel {
        ResBlock rb;
        std::optional<AttentionBlock> attn;
        ConvLayer down;
        bool has_down = false;
    };
    struct UpLevel {
        ResBlock rb;
        std::optional<AttentionBlock> attn;
    };

    void register_params();
    Var time_embedding(int t) const;

    NetConfig cfg_;
    ConvLayer conv_in_;
    std::vector<DownLevel> downs_;
    ResBlock mid1_, mid2_;
    std::optional<AttentionBlock> mid_attn_;
    std::vector<UpLevel> ups_; // index = level, defined for 0..L-2
    GroupNormLayer out_gn_;
    ConvLayer conv_out_;
    LinearLayer temb1_, temb2_;

    int adapter_rank_ = 0;
    double adapter_scale_ = 1.0;

    std::vector<std::pair<std::string, Var>> named_base_;
    std::vector<std::pair<std::string, Var>> named_adapters_;
};

} // namespace apt
