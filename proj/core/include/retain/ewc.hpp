#pragma once

#include <map>
#include <string>
#include <vector>

#include "retain/data.hpp"
#include "retain/layers.hpp"

namespace retain {

// Frozen copy of the origin optimum; immutable after creation.
struct ParameterSnapshot {
    std::map<std::string, Tensor> values;
    std::string source_id;
};

// Diagonal empirical Fisher: per-parameter mean of squared gradients of the
// ground-truth-label log-likelihood, accumulated one sample at a time.
struct FisherDiagonal {
    std::map<std::string, Tensor> values;  // every entry >= 0
    int64_t sample_count = 0;
};

struct EwcConfig {
    double lambda = 0.0;  // >= 0
};

ParameterSnapshot snapshot_parameters(Network& net, const std::string& source_id = "");

// Inference phase (running statistics, dropout off), batch size 1; the
// `sample_count` samples are picked by a seeded shuffle of the dataset.
FisherDiagonal compute_fisher_diagonal(Network& net, const LabeledDataset& dataset, int64_t sample_count,
                                       uint64_t seed);

// sum_i (lambda/2) * F_i * (theta_i - theta*_i)^2 over the currently
// trainable parameters; differentiable wrt theta. Trainable parameters
// missing from the snapshot/fisher contribute zero and are reported through
// `missing` when given.
ag::Var ewc_penalty(Network& net, const ParameterSnapshot& snapshot, const FisherDiagonal& fisher,
                    const EwcConfig& config, std::vector<std::string>* missing = nullptr);

// task + penalty; both terms keep their gradients.
ag::Var combined_loss(const ag::Var& task_loss, const ag::Var& penalty);

// Mean absolute distance between current trainable parameters and the
// snapshot, over all snapshot-covered entries.
double mean_param_distance(Network& net, const ParameterSnapshot& snapshot);

}  // namespace retain
