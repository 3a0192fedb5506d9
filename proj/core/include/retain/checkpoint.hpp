#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "retain/ewc.hpp"
#include "retain/layers.hpp"

namespace retain {

// Binary container: magic, version, length-prefixed architecture descriptor
// and metadata text blocks, a tensor directory (name, dtype, shape, offset),
// little-endian float32 payloads, and a trailing 64-bit FNV-1a checksum over
// everything before it. save -> load -> save is byte-identical.
struct Checkpoint {
    uint32_t version = 1;
    std::string arch;
    std::vector<std::pair<std::string, Tensor>> tensors;  // order preserved on disk
    std::map<std::string, std::string> metadata;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    static Checkpoint from_network(Network& net, std::map<std::string, std::string> metadata = {});
    // Rebuilds the network from the descriptor and verifies every tensor
    // shape; fisher.* / snapshot.* entries are ignored here.
    Network to_network() const;

    const Tensor* find(const std::string& name) const;
    // parameter/buffer entries only (reserved prefixes stripped out)
    std::map<std::string, Tensor> state_map() const;

    bool has_ewc_entries() const;
};

// dst with its .running_mean/.running_var entries replaced by src's; BN
// structure must be congruent. Metadata records the source iff any
// statistic actually changed (so self-transplant stays byte-identical).
Checkpoint bn_stats_transplant(const Checkpoint& dst, const Checkpoint& src);

// fisher.* / snapshot.* entries appended under reserved prefixes; sample
// count and source id go to metadata.
void attach_ewc_entries(Checkpoint& ckpt, const FisherDiagonal& fisher, const ParameterSnapshot& snapshot);
FisherDiagonal fisher_from_checkpoint(const Checkpoint& ckpt);
ParameterSnapshot snapshot_from_checkpoint(const Checkpoint& ckpt);

}  // namespace retain
