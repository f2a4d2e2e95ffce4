#include "apt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace apt {

namespace {

constexpr char kMagic[8] = {'A', 'P', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

struct BinWriter {
    std::ofstream f;
    explicit BinWriter(const std::string& path) : f(path, std::ios::binary) {
        if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    }
    void bytes(const void* p, size_t n) { f.write(static_cast<const char*>(p), std::streamsize(n)); }
    void u32(uint32_t v) { bytes(&v, 4); }
    void u64(uint64_t v) { bytes(&v, 8); }
    void i32(int32_t v) { bytes(&v, 4); }
    void f64(double v) { bytes(&v, 8); }
    void str(const std::string& s) {
        u32(uint32_t(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        u32(uint32_t(t.shape.size()));
        for (int d : t.shape) i32(d);
        bytes(t.data(), size_t(t.numel()) * sizeof(double));
    }
};

struct BinReader {
    std::ifstream f;
    explicit BinReader(const std::string& path) : f(path, std::ios::binary) {
        if (!f) throw std::runtime_error("checkpoint: cannot open for read: " + path);
    }
    void bytes(void* p, size_t n) {
        f.read(static_cast<char*>(p), std::streamsize(n));
        if (!f) throw std::runtime_error("checkpoint: truncated file");
    }
    uint32_t u32() {
        uint32_t v;
        bytes(&v, 4);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        bytes(&v, 8);
        return v;
    }
    int32_t i32() {
        int32_t v;
        bytes(&v, 4);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, 8);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        std::string s(n, '\0');
        if (n) bytes(s.data(), n);
        return s;
    }
    Tensor tensor() {
        const uint32_t nd = u32();
        std::vector<int> shape(nd);
        for (auto& d : shape) d = i32();
        Tensor t(shape);
        if (t.numel()) bytes(t.data(), size_t(t.numel()) * sizeof(double));
        return t;
    }
};

} // namespace

std::string net_config_to_json(const NetConfig& cfg) {
    nlohmann::json j;
    j["image_size"] = cfg.image_size;
    j["in_channels"] = cfg.in_channels;
    j["base_channels"] = cfg.base_channels;
    j["channel_multipliers"] = cfg.channel_multipliers;
    j["attention_levels"] = cfg.attention_levels;
    j["tap_levels"] = cfg.tap_levels;
    j["num_heads"] = cfg.num_heads;
    j["token_dim"] = cfg.token_dim;
    j["time_dim"] = cfg.time_dim;
    j["norm_groups"] = cfg.norm_groups;
    return j.dump();
}

NetConfig net_config_from_json(const std::string& json_text) {
    const auto j = nlohmann::json::parse(json_text);
    NetConfig cfg;
    cfg.image_size = j.value("image_size", cfg.image_size);
    cfg.in_channels = j.value("in_channels", cfg.in_channels);
    cfg.base_channels = j.value("base_channels", cfg.base_channels);
    cfg.channel_multipliers = j.value("channel_multipliers", cfg.channel_multipliers);
    cfg.attention_levels = j.value("attention_levels", cfg.attention_levels);
    cfg.tap_levels = j.value("tap_levels", cfg.tap_levels);
    cfg.num_heads = j.value("num_heads", cfg.num_heads);
    cfg.token_dim = j.value("token_dim", cfg.token_dim);
    cfg.time_dim = j.value("time_dim", cfg.time_dim);
    cfg.norm_groups = j.value("norm_groups", cfg.norm_groups);
    return cfg;
}

void save_checkpoint(const std::string& path, const UNet& net, const Vocabulary& vocab, int T,
                     double beta_start, double beta_end,
                     const std::vector<uint8_t>* trainer_state) {
    BinWriter w(path);
    w.bytes(kMagic, 8);
    w.u32(kVersion);
    w.str(net_config_to_json(net.config()));
    w.i32(T);
    w.f64(beta_start);
    w.f64(beta_end);
    w.i32(net.adapter_rank());
    w.f64(net.adapter_scale());

    // vocabulary
    w.u32(uint32_t(vocab.tokens().size()));
    for (const auto& t : vocab.tokens()) w.str(t);
    w.tensor(vocab.base_table().value());
    w.tensor(vocab.positional().value());
    w.u32(uint32_t(vocab.identifiers().size()));
    for (const auto& slot : vocab.identifiers()) {
        w.str(slot.token);
        w.i32(slot.class_id);
        w.tensor(slot.embedding.value());
    }

    // weights
    w.u32(uint32_t(net.named_base().size()));
    for (const auto& [name, v] : net.named_base()) {
        w.str(name);
        w.tensor(v.value());
    }
    w.u32(uint32_t(net.named_adapters().size()));
    for (const auto& [name, v] : net.named_adapters()) {
        w.str(name);
        w.tensor(v.value());
    }

    if (trainer_state && !trainer_state->empty()) {
        w.u32(1);
        w.u64(trainer_state->size());
        w.bytes(trainer_state->data(), trainer_state->size());
    } else {
        w.u32(0);
    }
    if (!w.f) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    BinReader r(path);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    if (r.u32() != kVersion) throw std::runtime_error("checkpoint: unsupported version in " + path);

    Checkpoint ckpt;
    ckpt.net_cfg = net_config_from_json(r.str());
    ckpt.net_cfg.validate();
    ckpt.T = r.i32();
    ckpt.beta_start = r.f64();
    ckpt.beta_end = r.f64();
    const int rank = r.i32();
    const double scale = r.f64();

    const uint32_t ntok = r.u32();
    std::vector<std::string> words(ntok);
    for (auto& t : words) t = r.str();
    Tensor table = r.tensor();
    Tensor pos = r.tensor();
    const uint32_t nident = r.u32();
    std::vector<IdentifierSlot> slots;
    for (uint32_t i = 0; i < nident; ++i) {
        IdentifierSlot slot;
        slot.token = r.str();
        slot.class_id = r.i32();
        slot.embedding = Var(r.tensor(), true);
        slots.push_back(std::move(slot));
    }
    ckpt.vocab = Vocabulary::from_parts(std::move(words), std::move(table), std::move(pos),
                                        std::move(slots));
    if (ckpt.vocab.token_dim() != ckpt.net_cfg.token_dim)
        throw std::runtime_error("checkpoint: vocabulary width disagrees with net config");

    Rng scratch(0);
    ckpt.net = UNet(ckpt.net_cfg, scratch);
    if (rank > 0) ckpt.net.attach_adapters(rank, scratch);
    ckpt.net.set_adapter_scale(scale);

    auto restore = [&](const std::vector<std::pair<std::string, Var>>& named, const char* kind) {
        std::map<std::string, Var> by_name(named.begin(), named.end());
        const uint32_t n = r.u32();
        if (n != by_name.size())
            throw std::runtime_error(std::string("checkpoint: ") + kind + " tensor count " +
                                     std::to_string(n) + " does not match net config (" +
                                     std::to_string(by_name.size()) + ")");
        for (uint32_t i = 0; i < n; ++i) {
            const std::string name = r.str();
            Tensor t = r.tensor();
            auto it = by_name.find(name);
            if (it == by_name.end())
                throw std::runtime_error("checkpoint: unknown tensor '" + name + "'");
            if (!it->second.value().same_shape(t))
                throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " +
                                         shape_str(t.shape) + ", config expects " +
                                         shape_str(it->second.value().shape));
            it->second.value() = std::move(t);
        }
    };
    restore(ckpt.net.named_base(), "base");
    restore(ckpt.net.named_adapters(), "adapter");

    if (r.u32() != 0) {
        const uint64_t n = r.u64();
        ckpt.trainer_state.resize(n);
        if (n) r.bytes(ckpt.trainer_state.data(), n);
    }
    return ckpt;
}

} // namespace apt
