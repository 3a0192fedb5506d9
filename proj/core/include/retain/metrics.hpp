#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "retain/tensor.hpp"

namespace retain {

struct ConfusionMatrix {
    explicit ConfusionMatrix(int64_t k);
    void accumulate(int true_class, int predicted);
    int64_t at(int64_t i, int64_t j) const { return counts[static_cast<size_t>(i * k + j)]; }
    int64_t& at(int64_t i, int64_t j) { return counts[static_cast<size_t>(i * k + j)]; }
    int64_t total() const;

    int64_t k;
    std::vector<int64_t> counts;  // rows = true class, columns = predicted
};

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

// kappa = 1 - sum(w*o)/sum(w*e), w_ij = |i-j|/(K-1), e = outer product of
// marginals. If expected disagreement is zero (all mass concentrated in one
// cell for both raters), kappa is 1 for perfect observed agreement and an
// error otherwise.
double linear_weighted_kappa(const ConfusionMatrix& cm);

// Bands: 0.21-0.40 fair, 0.41-0.60 moderate, 0.61-0.80 substantial;
// anything outside those intervals is "unclassified".
std::string kappa_band(double kappa);

struct GroupPrediction {
    int64_t group;
    std::vector<double> mean_probs;
    int predicted;
};

// Arithmetic mean of probability rows per group (rows must sum to 1 +- 1e-5);
// prediction = argmax of the mean, ties broken toward the lower class index.
// Results are ordered by ascending group id.
std::vector<GroupPrediction> group_average_predictions(const Tensor& per_sample_probs,
                                                       const std::vector<int64_t>& group_ids);

std::vector<int> argmax_rows(const Tensor& probs_or_logits);

}  // namespace retain
