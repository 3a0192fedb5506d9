#include "retain/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace retain {

ConfusionMatrix::ConfusionMatrix(int64_t k_) : k(k_), counts(static_cast<size_t>(k_ * k_), 0) {
    if (k_ < 1) throw std::invalid_argument("confusion matrix needs k >= 1");
}

void ConfusionMatrix::accumulate(int true_class, int predicted) {
    if (true_class < 0 || true_class >= k || predicted < 0 || predicted >= k)
        throw std::out_of_range("confusion matrix: class out of range");
    ++at(true_class, predicted);
}

int64_t ConfusionMatrix::total() const {
    int64_t t = 0;
    for (int64_t c : counts) t += c;
    return t;
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
    if (predictions.empty()) throw std::invalid_argument("accuracy: empty input");
    int64_t hits = 0;
    for (size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double linear_weighted_kappa(const ConfusionMatrix& cm) {
    const int64_t k = cm.k;
    const double total = static_cast<double>(cm.total());
    if (total <= 0) throw std::invalid_argument("kappa: empty confusion matrix");
    if (k == 1) return 1.0;  // single class: agreement is trivially perfect

    std::vector<double> row_marginal(static_cast<size_t>(k), 0.0), col_marginal(static_cast<size_t>(k), 0.0);
    for (int64_t i = 0; i < k; ++i)
        for (int64_t j = 0; j < k; ++j) {
            const double o = static_cast<double>(cm.at(i, j)) / total;
            row_marginal[static_cast<size_t>(i)] += o;
            col_marginal[static_cast<size_t>(j)] += o;
        }

    double observed = 0.0, expected = 0.0;
    for (int64_t i = 0; i < k; ++i)
        for (int64_t j = 0; j < k; ++j) {
            const double w = static_cast<double>(std::llabs(i - j)) / static_cast<double>(k - 1);
            observed += w * static_cast<double>(cm.at(i, j)) / total;
            expected += w * row_marginal[static_cast<size_t>(i)] * col_marginal[static_cast<size_t>(j)];
        }

    if (expected == 0.0) {
        // both marginals concentrated in a single class
        if (observed == 0.0) return 1.0;
        throw std::domain_error("kappa: degenerate expected disagreement with imperfect agreement");
    }
    return 1.0 - observed / expected;
}

std::string kappa_band(double kappa) {
    if (kappa >= 0.21 && kappa <= 0.40) return "fair";
    if (kappa >= 0.41 && kappa <= 0.60) return "moderate";
    if (kappa >= 0.61 && kappa <= 0.80) return "substantial";
    return "unclassified";
}

std::vector<GroupPrediction> group_average_predictions(const Tensor& per_sample_probs,
                                                       const std::vector<int64_t>& group_ids) {
    if (per_sample_probs.rank() != 2) throw std::invalid_argument("group_average_predictions: probs must be [N,K]");
    const int64_t n = per_sample_probs.shape[0], k = per_sample_probs.shape[1];
    if (static_cast<int64_t>(group_ids.size()) != n)
        throw std::invalid_argument("group_average_predictions: group id count mismatch");
    if (n == 0) throw std::invalid_argument("group_average_predictions: empty input");

    for (int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < k; ++j) s += per_sample_probs.data[static_cast<size_t>(i * k + j)];
        if (std::abs(s - 1.0) > 1e-5)
            throw std::invalid_argument("group_average_predictions: probability row " + std::to_string(i) +
                                        " sums to " + std::to_string(s));
    }

    std::map<int64_t, std::pair<std::vector<double>, int64_t>> acc;  // group -> (sum, count)
    for (int64_t i = 0; i < n; ++i) {
        auto& slot = acc[group_ids[static_cast<size_t>(i)]];
        if (slot.first.empty()) slot.first.assign(static_cast<size_t>(k), 0.0);
        for (int64_t j = 0; j < k; ++j) slot.first[static_cast<size_t>(j)] += per_sample_probs.data[static_cast<size_t>(i * k + j)];
        slot.second++;
    }

    std::vector<GroupPrediction> out;
    out.reserve(acc.size());
    for (auto& [group, slot] : acc) {
        GroupPrediction gp;
        gp.group = group;
        gp.mean_probs.resize(static_cast<size_t>(k));
        for (int64_t j = 0; j < k; ++j) gp.mean_probs[static_cast<size_t>(j)] = slot.first[static_cast<size_t>(j)] / static_cast<double>(slot.second);
        gp.predicted = 0;
        for (int64_t j = 1; j < k; ++j)
            if (gp.mean_probs[static_cast<size_t>(j)] > gp.mean_probs[static_cast<size_t>(gp.predicted)]) gp.predicted = static_cast<int>(j);
        out.push_back(std::move(gp));
    }
    return out;
}

std::vector<int> argmax_rows(const Tensor& t) {
    if (t.rank() != 2) throw std::invalid_argument("argmax_rows: expected [N,K]");
    const int64_t n = t.shape[0], k = t.shape[1];
    std::vector<int> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int best = 0;
        for (int64_t j = 1; j < k; ++j)
            if (t.data[static_cast<size_t>(i * k + j)] > t.data[static_cast<size_t>(i * k + best)]) best = static_cast<int>(j);
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

}  // namespace retain
