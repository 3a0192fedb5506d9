#pragma once

#include <string>
#include <vector>

#include "retain/data.hpp"
#include "retain/layers.hpp"

namespace retain {

struct VarianceProbeRow {
    std::string layer;
    int64_t channel;
    StatsMode mode;
    double measured_var;  // biased per-channel variance of the BN output
    double theory_var;    // gamma^2 * Var(x) / (sigma_stat^2 + eps); equals
                          // gamma^2 when the stats match the probe input
};

struct VarianceProbeReport {
    std::vector<VarianceProbeRow> rows;
    std::string batch_provenance;
    void write_csv(const std::string& path) const;  // layer,channel,mode,measured_var,theory_var
};

// Inference pass over the probe batch capturing every BN layer's output.
// Batches below `min_batch` are rejected (variance estimate too noisy).
VarianceProbeReport bn_variance_probe(Network& net, const LabeledDataset& probe_batch, int64_t min_batch = 8);

// CSV "label,f0,f1,..."; row order = dataset order.
void export_penultimate_features(Network& net, const LabeledDataset& dataset, const std::string& path);

}  // namespace retain
