#include "retain/ewc.hpp"

#include <cmath>
#include <stdexcept>

#include "retain/ops.hpp"
#include "retain/rng.hpp"

namespace retain {

ParameterSnapshot snapshot_parameters(Network& net, const std::string& source_id) {
    ParameterSnapshot snap;
    snap.source_id = source_id;
    for (auto& p : net.named_params())
        if (p.param->trainable) snap.values[p.name] = p.param->var->value;
    return snap;
}

FisherDiagonal compute_fisher_diagonal(Network& net, const LabeledDataset& dataset, int64_t sample_count,
                                       uint64_t seed) {
    if (sample_count <= 0) throw std::invalid_argument("compute_fisher_diagonal: sample_count must be positive");
    if (sample_count > dataset.size())
        throw std::invalid_argument("compute_fisher_diagonal: sample_count exceeds dataset size");
    auto params = net.named_params();
    std::vector<NamedParam> trainable;
    for (auto& p : params)
        if (p.param->trainable) trainable.push_back(p);
    if (trainable.empty()) throw std::invalid_argument("compute_fisher_diagonal: network has no trainable parameters");

    Rng rng(mix_seeds(0x66697368ULL, seed));
    std::vector<int64_t> order = rng.permutation(dataset.size());
    order.resize(static_cast<size_t>(sample_count));

    // accumulate squared gradients in double
    std::map<std::string, std::vector<double>> acc;
    for (auto& p : trainable) acc[p.name].assign(p.param->var->value.data.size(), 0.0);

    for (int64_t idx : order) {
        Tensor x = dataset.sample_batch({idx});
        net.zero_grad();
        ag::Var logits = net.forward(x, Phase::Infer);
        ag::Var nll = ops::softmax_cross_entropy(logits, {dataset.labels[static_cast<size_t>(idx)]});
        ag::backward(nll);
        for (auto& p : trainable) {
            // d(-log p)/dtheta squares to the same value as d(log p)/dtheta
            const Tensor& g = p.param->var->grad();
            auto& a = acc[p.name];
            for (size_t i = 0; i < a.size(); ++i) a[i] += static_cast<double>(g.data[i]) * g.data[i];
        }
    }
    net.zero_grad();

    FisherDiagonal fisher;
    fisher.sample_count = sample_count;
    for (auto& p : trainable) {
        Tensor f(p.param->var->value.shape);
        const auto& a = acc[p.name];
        for (size_t i = 0; i < a.size(); ++i) f.data[i] = static_cast<float>(a[i] / static_cast<double>(sample_count));
        fisher.values[p.name] = std::move(f);
    }
    return fisher;
}

ag::Var ewc_penalty(Network& net, const ParameterSnapshot& snapshot, const FisherDiagonal& fisher,
                    const EwcConfig& config, std::vector<std::string>* missing) {
    if (config.lambda < 0) throw std::invalid_argument("ewc_penalty: lambda must be nonnegative");
    ag::Var total;
    for (auto& p : net.named_params()) {
        if (!p.param->trainable) continue;
        auto sit = snapshot.values.find(p.name);
        auto fit = fisher.values.find(p.name);
        if (sit == snapshot.values.end() || fit == fisher.values.end()) {
            if (missing) missing->push_back(p.name);
            continue;
        }
        if (sit->second.shape != p.param->var->value.shape || fit->second.shape != p.param->var->value.shape)
            throw std::invalid_argument("ewc_penalty: shape mismatch for " + p.name);
        ag::Var diff = ops::sub(p.param->var, ag::constant(sit->second));
        ag::Var term = ops::sum(ops::mul(ag::constant(fit->second), ops::mul(diff, diff)));
        total = total ? ops::add(total, term) : term;
    }
    if (!total) total = ag::constant(Tensor::scalar(0.0f));
    return ops::scale(total, static_cast<float>(config.lambda / 2.0));
}

ag::Var combined_loss(const ag::Var& task_loss, const ag::Var& penalty) { return ops::add(task_loss, penalty); }

double mean_param_distance(Network& net, const ParameterSnapshot& snapshot) {
    double acc = 0.0;
    int64_t count = 0;
    for (auto& p : net.named_params()) {
        auto it = snapshot.values.find(p.name);
        if (it == snapshot.values.end()) continue;
        for (size_t i = 0; i < it->second.data.size(); ++i) {
            acc += std::abs(static_cast<double>(p.param->var->value.data[i]) - it->second.data[i]);
            ++count;
        }
    }
    return count ? acc / static_cast<double>(count) : 0.0;
}

}  // namespace retain
