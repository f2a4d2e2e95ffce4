#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "apt/cond.hpp"
#include "apt/net.hpp"
#include "apt/sched.hpp"

namespace apt {

// Versioned binary container: net config (JSON), schedule parameters,
// vocabulary with identifier embeddings, base and adapter weights, and an
// opaque trainer-state blob for resume. Byte layout is documented in
// docs/FORMATS.md; all scalars little-endian, tensor data raw float64.
struct Checkpoint {
    NetConfig net_cfg;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    UNet net;
    Vocabulary vocab;
    std::vector<uint8_t> trainer_state; // empty when absent

    NoiseSchedule schedule() const { return make_schedule(T, beta_start, beta_end); }
};

void save_checkpoint(const std::string& path, const UNet& net, const Vocabulary& vocab, int T,
                     double beta_start, double beta_end,
                     const std::vector<uint8_t>* trainer_state = nullptr);

// rejects bad magic/version and any tensor whose shape disagrees with the
// embedded NetConfig
Checkpoint load_checkpoint(const std::string& path);

std::string net_config_to_json(const NetConfig& cfg);
NetConfig net_config_from_json(const std::string& json_text);

} // namespace apt
