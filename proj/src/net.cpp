#include "apt/net.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace apt {

namespace {

bool contains(const std::vector<int>& v, int x) {
    return std::find(v.begin(), v.end(), x) != v.end();
}

} // namespace

bool NetConfig::attention_at(int level) const { return contains(attention_levels, level); }
bool NetConfig::tap_at(int level) const { return contains(tap_levels, level); }

void NetConfig::validate() const {
    const int L = levels();
    if (L < 2) throw std::invalid_argument("NetConfig: need at least 2 resolution levels");
    if (in_channels < 1) throw std::invalid_argument("NetConfig: in_channels must be >= 1");
    if (base_channels < 1) throw std::invalid_argument("NetConfig: base_channels must be >= 1");
    int div = 1;
    for (int i = 1; i < L; ++i) div *= 2;
    if (image_size < div || image_size % div != 0)
        throw std::invalid_argument("NetConfig: image_size must be divisible by 2^(levels-1)");
    for (int m : channel_multipliers)
        if (m < 1) throw std::invalid_argument("NetConfig: channel multipliers must be >= 1");
    if (num_heads < 1) throw std::invalid_argument("NetConfig: num_heads must be >= 1");
    if (token_dim < 1) throw std::invalid_argument("NetConfig: token_dim must be >= 1");
    if (time_dim < 2 || time_dim % 2 != 0)
        throw std::invalid_argument("NetConfig: time_dim must be even and >= 2");
    if (norm_groups < 1) throw std::invalid_argument("NetConfig: norm_groups must be >= 1");

    std::set<int> attn(attention_levels.begin(), attention_levels.end());
    if (attn.size() != attention_levels.size())
        throw std::invalid_argument("NetConfig: duplicate attention level");
    for (int l : attention_levels)
        if (l < 0 || l >= L) throw std::invalid_argument("NetConfig: attention level out of range");
    std::set<int> taps(tap_levels.begin(), tap_levels.end());
    if (taps.size() != tap_levels.size())
        throw std::invalid_argument("NetConfig: duplicate tap level");
    for (int l : tap_levels)
        if (l < 0 || l > L - 2)
            throw std::invalid_argument("NetConfig: tap levels must name up-blocks (0.." +
                                        std::to_string(L - 2) + ")");

    for (int l = 0; l < L; ++l) {
        const int c = channels_at(l);
        if (c % norm_groups != 0)
            throw std::invalid_argument("NetConfig: norm_groups must divide channels at level " +
                                        std::to_string(l));
        if ((attention_at(l) || (l <= L - 2 && tap_at(l))) && c % num_heads != 0)
            throw std::invalid_argument("NetConfig: num_heads must divide channels at level " +
                                        std::to_string(l));
    }
    for (int l = 0; l + 1 < L; ++l) {
        if ((channels_at(l) + channels_at(l + 1)) % norm_groups != 0)
            throw std::invalid_argument(
                "NetConfig: norm_groups must divide concatenated up-block channels at level " +
                std::to_string(l));
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

void LinearLayer::init(int in, int out, Rng& rng) {
    w = Var(Tensor::randn({in, out}, rng, std::sqrt(1.0 / in)), false);
    b = Var(Tensor::zeros({out}), false);
}

void AdaptedLinear::init(int in, int out, Rng& rng) {
    w = Var(Tensor::randn({in, out}, rng, std::sqrt(1.0 / in)), false);
    b = Var(Tensor::zeros({out}), false);
    rank = 0;
    down = Var();
    up = Var();
}

void AdaptedLinear::attach_adapter(int r, Rng& rng) {
    rank = r;
    if (r == 0) {
        down = Var();
        up = Var();
        return;
    }
    const int in = w.value().dim(0);
    const int out = w.value().dim(1);
    down = Var(Tensor::randn({in, r}, rng, std::sqrt(1.0 / in)), false);
    up = Var(Tensor::zeros({r, out}), false);
}

Var AdaptedLinear::forward(const Var& x, bool adapters_on, double scale) const {
    Var base = linear(x, w, b);
    if (!adapters_on || rank == 0 || scale == 0.0) return base;
    Var delta = linear(linear(x, down), up);
    return add(base, apt::scale(delta, scale));
}

void ConvLayer::init(int in, int out, int k, int stride_, int pad_, Rng& rng, bool zero) {
    stride = stride_;
    pad = pad_;
    if (zero)
        w = Var(Tensor::zeros({out, in, k, k}), false);
    else
        w = Var(Tensor::randn({out, in, k, k}, rng, std::sqrt(2.0 / (in * k * k))), false);
    b = Var(Tensor::zeros({out}), false);
}

void GroupNormLayer::init(int channels, int groups_) {
    groups = groups_;
    g = Var(Tensor::full({channels}, 1.0), false);
    b = Var(Tensor::zeros({channels}), false);
}

void ResBlock::init(int in, int out, int time_dim, int groups, Rng& rng) {
    gn1.init(in, groups);
    conv1.init(in, out, 3, 1, 1, rng);
    temb_proj.init(time_dim, out, rng);
    gn2.init(out, groups);
    conv2.init(out, out, 3, 1, 1, rng);
    has_skip = in != out;
    if (has_skip) skip.init(in, out, 1, 1, 0, rng);
}

Var ResBlock::forward(const Var& x, const Var& temb_act) const {
    Var h = conv1.forward(silu(gn1.forward(x)));
    const int c = h.value().dim(1);
    h = add_channel_bias(h, reshape(temb_proj.forward(temb_act), {c}));
    h = conv2.forward(silu(gn2.forward(h)));
    Var res = has_skip ? skip.forward(x) : x;
    return add(res, h);
}

void AttentionBlock::init(int channels, int token_dim, int heads_, int groups, bool with_self,
                          Rng& rng) {
    heads = heads_;
    has_self = with_self;
    gn.init(channels, groups);
    if (with_self) {
        sq.init(channels, channels, rng);
        sk.init(channels, channels, rng);
        sv.init(channels, channels, rng);
        so.init(channels, channels, rng);
        for (auto& w : so.w.value().v) w *= 0.2; // damp the residual branch at init
    }
    cq.init(channels, channels, rng);
    ck.init(token_dim, channels, rng);
    cv.init(token_dim, channels, rng);
    co.init(channels, channels, rng);
    for (auto& w : co.w.value().v) w *= 0.2;
}

Var AttentionBlock::forward(const Var& x, const Var& tokens, bool adapters_on, double ascale,
                            Var* attn_tap) const {
    const Tensor& xv = x.value();
    const int n = xv.dim(0), c = xv.dim(1), hh = xv.dim(2), ww = xv.dim(3);
    const int dh = c / heads;
    const double qk_scale = 1.0 / std::sqrt(double(dh));

    Var t = nchw_to_tokens(gn.forward(x)); // (N, Q, C)
    if (has_self) {
        Var q = split_heads(sq.forward(t, adapters_on, ascale), heads);
        Var k = split_heads(sk.forward(t, adapters_on, ascale), heads);
        Var v = split_heads(sv.forward(t, adapters_on, ascale), heads);
        Var att = softmax_last(apt::scale(bmm(q, k, true), qk_scale));
        Var o = merge_heads(bmm(att, v), heads);
        t = add(t, so.forward(o, adapters_on, ascale));
    }
    {
        const int s = tokens.value().dim(0);
        Var q = split_heads(cq.forward(t, adapters_on, ascale), heads); // (NH, Q, Dh)
        Var k = repeat_block0(
            split_heads(reshape(ck.forward(tokens, adapters_on, ascale), {1, s, c}), heads), n);
        Var v = repeat_block0(
            split_heads(reshape(cv.forward(tokens, adapters_on, ascale), {1, s, c}), heads), n);
        Var att = softmax_last(apt::scale(bmm(q, k, true), qk_scale)); // (NH, Q, S)
        if (attn_tap) *attn_tap = reshape(att, {n, heads, hh * ww, s});
        Var o = merge_heads(bmm(att, v), heads);
        t = add(t, co.forward(o, adapters_on, ascale));
    }
    return add(x, tokens_to_nchw(t, hh, ww));
}

// ---------------------------------------------------------------------------
// UNet
// ---------------------------------------------------------------------------

UNet::UNet(const NetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int L = cfg_.levels();
    const int td = cfg_.time_dim;
    const int g = cfg_.norm_groups;

    temb1_.init(td, td, rng);
    temb2_.init(td, td, rng);
    conv_in_.init(cfg_.in_channels, cfg_.channels_at(0), 3, 1, 1, rng);

    downs_.resize(size_t(L));
    for (int l = 0; l < L; ++l) {
        const int c = cfg_.channels_at(l);
        downs_[size_t(l)].rb.init(c, c, td, g, rng);
        if (cfg_.attention_at(l)) {
            downs_[size_t(l)].attn.emplace();
            downs_[size_t(l)].attn->init(c, cfg_.token_dim, cfg_.num_heads, g, true, rng);
        }
        if (l < L - 1) {
            downs_[size_t(l)].down.init(c, cfg_.channels_at(l + 1), 3, 2, 1, rng);
            downs_[size_t(l)].has_down = true;
        }
    }

    const int cb = cfg_.channels_at(L - 1);
    mid1_.init(cb, cb, td, g, rng);
    if (cfg_.attention_at(L - 1)) {
        mid_attn_.emplace();
        mid_attn_->init(cb, cfg_.token_dim, cfg_.num_heads, g, true, rng);
    }
    mid2_.init(cb, cb, td, g, rng);

    ups_.resize(size_t(L - 1));
    for (int l = L - 2; l >= 0; --l) {
        const int c = cfg_.channels_at(l);
        ups_[size_t(l)].rb.init(cfg_.channels_at(l + 1) + c, c, td, g, rng);
        if (cfg_.cross_attention_at_up(l)) {
            ups_[size_t(l)].attn.emplace();
            ups_[size_t(l)].attn->init(c, cfg_.token_dim, cfg_.num_heads, g,
                                       cfg_.attention_at(l), rng);
        }
    }

    out_gn_.init(cfg_.channels_at(0), g);
    // small but non-zero: keeps the initial prediction near zero while
    // letting gradients reach every upstream parameter from step one
    conv_out_.init(cfg_.channels_at(0), cfg_.in_channels, 3, 1, 1, rng);
    for (auto& w : conv_out_.w.value().v) w *= 0.1;

    register_params();
}

Var UNet::time_embedding(int t) const {
    const int half = cfg_.time_dim / 2;
    Tensor emb({1, cfg_.time_dim});
    for (int i = 0; i < half; ++i) {
        const double freq =
            std::exp(-std::log(10000.0) * double(i) / double(std::max(1, half - 1)));
        emb[i] = std::sin(double(t) * freq);
        emb[half + i] = std::cos(double(t) * freq);
    }
    return constant(std::move(emb));
}

ForwardResult UNet::forward(const Tensor& x_t, int t, const Var& tokens,
                            const ForwardOptions& opt) const {
    const bool batched = x_t.ndim() == 4;
    if (!batched && x_t.ndim() != 3)
        throw std::invalid_argument("UNet::forward: input must be CHW or NCHW");
    Tensor xin = batched ? x_t : x_t.reshaped({1, x_t.dim(0), x_t.dim(1), x_t.dim(2)});
    if (xin.dim(1) != cfg_.in_channels || xin.dim(2) != cfg_.image_size ||
        xin.dim(3) != cfg_.image_size)
        throw std::invalid_argument("UNet::forward: input shape " + shape_str(x_t.shape) +
                                    " does not match config");
    if (t < 0) throw std::out_of_range("UNet::forward: negative timestep");
    if (!tokens.defined() || tokens.value().ndim() != 2 || tokens.value().dim(0) == 0)
        throw std::invalid_argument("UNet::forward: empty token sequence");
    if (tokens.value().dim(1) != cfg_.token_dim)
        throw std::invalid_argument("UNet::forward: token width mismatch");

    const int L = cfg_.levels();
    const bool on = opt.adapters_on;
    const double sc = adapter_scale_;

    ForwardResult result;
    Var temb_act = silu(temb2_.forward(silu(temb1_.forward(time_embedding(t)))));
    Var h = conv_in_.forward(constant(std::move(xin)));

    std::vector<Var> skips;
    skips.resize(size_t(L));
    for (int l = 0; l < L; ++l) {
        h = downs_[size_t(l)].rb.forward(h, temb_act);
        if (downs_[size_t(l)].attn)
            h = downs_[size_t(l)].attn->forward(h, tokens, on, sc, nullptr);
        skips[size_t(l)] = h;
        if (downs_[size_t(l)].has_down) h = downs_[size_t(l)].down.forward(h);
    }

    h = mid1_.forward(h, temb_act);
    if (mid_attn_) h = mid_attn_->forward(h, tokens, on, sc, nullptr);
    h = mid2_.forward(h, temb_act);

    for (int l = L - 2; l >= 0; --l) {
        h = upsample_nearest2(h);
        h = concat_channels(h, skips[size_t(l)]);
        h = ups_[size_t(l)].rb.forward(h, temb_act);
        const bool want_tap = opt.capture_taps && cfg_.tap_at(l);
        Var attn_tap;
        if (ups_[size_t(l)].attn)
            h = ups_[size_t(l)].attn->forward(h, tokens, on, sc, want_tap ? &attn_tap : nullptr);
        if (want_tap) {
            result.taps.features.emplace(l, h);
            result.taps.attentions.emplace(l, attn_tap);
        }
    }

    Var out = conv_out_.forward(silu(out_gn_.forward(h)));
    result.eps = batched ? out : reshape(out, {cfg_.in_channels, cfg_.image_size, cfg_.image_size});
    return result;
}

void UNet::attach_adapters(int rank, Rng& rng) {
    if (rank < 0) throw std::invalid_argument("attach_adapters: rank must be >= 0");
    adapter_rank_ = rank;
    auto attach = [&](AttentionBlock& blk) {
        if (blk.has_self) {
            blk.sq.attach_adapter(rank, rng);
            blk.sk.attach_adapter(rank, rng);
            blk.sv.attach_adapter(rank, rng);
            blk.so.attach_adapter(rank, rng);
        }
        blk.cq.attach_adapter(rank, rng);
        blk.ck.attach_adapter(rank, rng);
        blk.cv.attach_adapter(rank, rng);
        blk.co.attach_adapter(rank, rng);
    };
    for (auto& d : downs_)
        if (d.attn) attach(*d.attn);
    if (mid_attn_) attach(*mid_attn_);
    for (auto& u : ups_)
        if (u.attn) attach(*u.attn);
    register_params();
}

void UNet::set_adapter_scale(double scale) {
    if (!(scale >= 0.0 && scale <= 1.0))
        throw std::invalid_argument("set_adapter_scale: scale must be in [0, 1]");
    adapter_scale_ = scale;
}

void UNet::register_params() {
    named_base_.clear();
    named_adapters_.clear();
    auto base = [&](const std::string& name, const Var& v) { named_base_.emplace_back(name, v); };
    auto reg_linear = [&](const std::string& p, const LinearLayer& l) {
        base(p + ".w", l.w);
        base(p + ".b", l.b);
    };
    auto reg_conv = [&](const std::string& p, const ConvLayer& c) {
        base(p + ".w", c.w);
        base(p + ".b", c.b);
    };
    auto reg_gn = [&](const std::string& p, const GroupNormLayer& g) {
        base(p + ".g", g.g);
        base(p + ".b", g.b);
    };
    auto reg_adapted = [&](const std::string& p, const AdaptedLinear& a) {
        base(p + ".w", a.w);
        base(p + ".b", a.b);
        if (a.rank > 0) {
            named_adapters_.emplace_back(p + ".lora_down", a.down);
            named_adapters_.emplace_back(p + ".lora_up", a.up);
        }
    };
    auto reg_rb = [&](const std::string& p, const ResBlock& r) {
        reg_gn(p + ".gn1", r.gn1);
        reg_conv(p + ".conv1", r.conv1);
        reg_linear(p + ".temb", r.temb_proj);
        reg_gn(p + ".gn2", r.gn2);
        reg_conv(p + ".conv2", r.conv2);
        if (r.has_skip) reg_conv(p + ".skip", r.skip);
    };
    auto reg_attn = [&](const std::string& p, const AttentionBlock& a) {
        reg_gn(p + ".gn", a.gn);
        if (a.has_self) {
            reg_adapted(p + ".sq", a.sq);
            reg_adapted(p + ".sk", a.sk);
            reg_adapted(p + ".sv", a.sv);
            reg_adapted(p + ".so", a.so);
        }
        reg_adapted(p + ".cq", a.cq);
        reg_adapted(p + ".ck", a.ck);
        reg_adapted(p + ".cv", a.cv);
        reg_adapted(p + ".co", a.co);
    };

    reg_linear("temb1", temb1_);
    reg_linear("temb2", temb2_);
    reg_conv("conv_in", conv_in_);
    for (int l = 0; l < int(downs_.size()); ++l) {
        const std::string p = "down" + std::to_string(l);
        reg_rb(p + ".rb", downs_[size_t(l)].rb);
        if (downs_[size_t(l)].attn) reg_attn(p + ".attn", *downs_[size_t(l)].attn);
        if (downs_[size_t(l)].has_down) reg_conv(p + ".down", downs_[size_t(l)].down);
    }
    reg_rb("mid.rb1", mid1_);
    if (mid_attn_) reg_attn("mid.attn", *mid_attn_);
    reg_rb("mid.rb2", mid2_);
    for (int l = 0; l < int(ups_.size()); ++l) {
        const std::string p = "up" + std::to_string(l);
        reg_rb(p + ".rb", ups_[size_t(l)].rb);
        if (ups_[size_t(l)].attn) reg_attn(p + ".attn", *ups_[size_t(l)].attn);
    }
    reg_gn("out.gn", out_gn_);
    reg_conv("out.conv", conv_out_);
}

std::vector<Var> UNet::adapter_params() const {
    std::vector<Var> out;
    out.reserve(named_adapters_.size());
    for (const auto& [name, v] : named_adapters_) out.push_back(v);
    return out;
}

std::vector<Var> UNet::base_params() const {
    std::vector<Var> out;
    out.reserve(named_base_.size());
    for (const auto& [name, v] : named_base_) out.push_back(v);
    return out;
}

void UNet::set_trainable(bool base, bool adapters) {
    for (auto& [name, v] : named_base_) v.node->requires_grad = base;
    for (auto& [name, v] : named_adapters_) v.node->requires_grad = adapters;
}

uint64_t UNet::base_checksum() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, size_t n) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, v] : named_base_) {
        mix(name.data(), name.size());
        mix(v.value().data(), size_t(v.value().numel()) * sizeof(double));
    }
    return h;
}

} // namespace apt
