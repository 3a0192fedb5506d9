#include "retain/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "retain/ops.hpp"
#include "retain/rng.hpp"

namespace retain {

const char* finetune_mode_name(FinetuneMode m) {
    switch (m) {
        case FinetuneMode::Scratch: return "scratch";
        case FinetuneMode::AllLayers: return "all-layers";
        case FinetuneMode::BnOnly: return "bn-only";
    }
    return "?";
}

const char* stats_source_name(StatsSource s) {
    return s == StatsSource::SelfLive ? "self-live" : "frozen-origin";
}

void Adam::step(const std::vector<NamedParam>& params) {
    ++step_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(step_));
    for (const auto& p : params) {
        if (!p.param->trainable) continue;
        ag::Node& node = *p.param->var;
        if (!node.has_grad()) continue;
        const Tensor& g = node.grad();
        for (float gv : g.data)
            if (std::isnan(gv)) throw std::runtime_error("adam: NaN gradient in parameter " + p.name);

        auto& mom = state_[p.name];
        if (mom.m.data.empty()) {
            mom.m = Tensor(node.value.shape, 0.0f);
            mom.v = Tensor(node.value.shape, 0.0f);
        }
        for (size_t i = 0; i < g.data.size(); ++i) {
            mom.m.data[i] = config_.beta1 * mom.m.data[i] + (1.0f - config_.beta1) * g.data[i];
            mom.v.data[i] = config_.beta2 * mom.v.data[i] + (1.0f - config_.beta2) * g.data[i] * g.data[i];
            const double mhat = mom.m.data[i] / bc1;
            const double vhat = mom.v.data[i] / bc2;
            node.value.data[i] -= static_cast<float>(config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
        }
    }
}

namespace {

bool any_live_bn(Network& net) {
    for (auto* bn : net.batchnorm_layers())
        if (bn->mode == StatsMode::BatchLive) return true;
    return false;
}

double dataset_loss(Network& net, const LabeledDataset& ds, int64_t chunk = 256) {
    double acc = 0.0;
    for (int64_t start = 0; start < ds.size(); start += chunk) {
        const int64_t end = std::min(ds.size(), start + chunk);
        std::vector<int64_t> idx(static_cast<size_t>(end - start));
        for (int64_t i = start; i < end; ++i) idx[static_cast<size_t>(i - start)] = i;
        ag::Var logits = net.forward(ds.sample_batch(idx), Phase::Infer);
        std::vector<int> labels(static_cast<size_t>(end - start));
        for (int64_t i = start; i < end; ++i) labels[static_cast<size_t>(i - start)] = ds.labels[static_cast<size_t>(i)];
        ag::Var loss = ops::softmax_cross_entropy(logits, labels);
        acc += static_cast<double>(loss->value.data[0]) * static_cast<double>(end - start);
    }
    return acc / static_cast<double>(ds.size());
}

Tensor predict_probs(Network& net, const LabeledDataset& ds, int64_t chunk = 256) {
    Tensor probs;
    for (int64_t start = 0; start < ds.size(); start += chunk) {
        const int64_t end = std::min(ds.size(), start + chunk);
        std::vector<int64_t> idx(static_cast<size_t>(end - start));
        for (int64_t i = start; i < end; ++i) idx[static_cast<size_t>(i - start)] = i;
        ag::Var logits = net.forward(ds.sample_batch(idx), Phase::Infer);
        Tensor p = ops::softmax_rows(logits->value);
        if (probs.data.empty()) {
            probs = Tensor({ds.size(), p.shape[1]});
        }
        std::copy(p.data.begin(), p.data.end(), probs.data.begin() + static_cast<size_t>(start * p.shape[1]));
    }
    return probs;
}

}  // namespace

EvalResult evaluate(Network& net, const LabeledDataset& dataset, const std::map<std::string, Tensor>* origin_stats) {
    if (dataset.size() == 0) throw std::invalid_argument("evaluate: empty dataset");

    // swap in foreign running statistics for the duration of the pass
    std::vector<std::pair<Tensor*, Tensor>> saved;
    if (origin_stats) {
        for (auto& b : net.named_buffers()) {
            auto it = origin_stats->find(b.name);
            if (it == origin_stats->end())
                throw std::invalid_argument("evaluate: origin statistics missing " + b.name);
            if (it->second.shape != b.tensor->shape)
                throw std::invalid_argument("evaluate: origin statistics shape mismatch for " + b.name);
            saved.emplace_back(b.tensor, *b.tensor);
            *b.tensor = it->second;
        }
    }

    Tensor probs = predict_probs(net, dataset);
    EvalResult result;
    result.n = dataset.size();
    ConfusionMatrix cm(dataset.class_count);
    if (!dataset.groups.empty()) {
        result.grouped = true;
        auto groups = group_average_predictions(probs, dataset.groups);
        std::map<int64_t, int> group_label;
        for (int64_t i = 0; i < dataset.size(); ++i) {
            auto [it, inserted] = group_label.try_emplace(dataset.groups[static_cast<size_t>(i)],
                                                          dataset.labels[static_cast<size_t>(i)]);
            if (!inserted && it->second != dataset.labels[static_cast<size_t>(i)])
                throw std::invalid_argument("evaluate: group members disagree on the label");
        }
        std::vector<int> predictions, labels;
        for (const auto& g : groups) {
            predictions.push_back(g.predicted);
            labels.push_back(group_label.at(g.group));
            cm.accumulate(group_label.at(g.group), g.predicted);
        }
        result.accuracy = accuracy(predictions, labels);
    } else {
        std::vector<int> predictions = argmax_rows(probs);
        for (int64_t i = 0; i < dataset.size(); ++i)
            cm.accumulate(dataset.labels[static_cast<size_t>(i)], predictions[static_cast<size_t>(i)]);
        result.accuracy = accuracy(predictions, dataset.labels);
    }
    result.kappa = linear_weighted_kappa(cm);
    result.band = kappa_band(result.kappa);

    for (auto& [slot, value] : saved) *slot = value;
    return result;
}

FitResult fit(Network& net, const LabeledDataset& train_set, const LabeledDataset& val_set, const TrainConfig& config,
              const EwcContext* ewc, std::ostream* progress) {
    if (train_set.size() == 0 || val_set.size() == 0) throw std::invalid_argument("fit: empty dataset");
    if (config.patience < 1) throw std::invalid_argument("fit: patience must be >= 1");
    if (config.batch_size < 2 && any_live_bn(net))
        throw std::invalid_argument("fit: batch_size must be >= 2 with BatchLive batch norm");
    const bool use_penalty = ewc && ewc->config.lambda > 0.0;
    if (use_penalty && (!ewc->snapshot || !ewc->fisher))
        throw std::invalid_argument("fit: EWC requested without snapshot/fisher");

    Adam adam(config.adam);
    FitResult result;
    const bool live_bn = any_live_bn(net);

    for (int64_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        Rng shuffle_rng(mix_seeds(config.seed, static_cast<uint64_t>(epoch)));
        std::vector<int64_t> order = shuffle_rng.permutation(train_set.size());

        double loss_acc = 0.0;
        int64_t seen = 0;
        int64_t batch_index = 0;
        for (int64_t start = 0; start < train_set.size(); start += config.batch_size, ++batch_index) {
            const int64_t end = std::min(train_set.size(), start + config.batch_size);
            if (end - start < 2 && live_bn) continue;  // trailing singleton cannot be normalized
            std::vector<int64_t> idx(order.begin() + start, order.begin() + end);
            Tensor batch = train_set.sample_batch(idx);
            if (config.augment)
                batch = augment(batch, mix_seeds(config.seed, static_cast<uint64_t>(epoch),
                                                 static_cast<uint64_t>(batch_index)));
            std::vector<int> labels(idx.size());
            for (size_t i = 0; i < idx.size(); ++i) labels[i] = train_set.labels[static_cast<size_t>(idx[i])];

            ag::Var logits = net.forward(batch, Phase::Train);
            ag::Var task = ops::softmax_cross_entropy(logits, labels);
            ag::Var loss = task;
            if (use_penalty) loss = combined_loss(task, ewc_penalty(net, *ewc->snapshot, *ewc->fisher, ewc->config));

            net.zero_grad();
            ag::backward(loss);
            adam.step(net.named_params());

            loss_acc += static_cast<double>(task->value.data[0]) * static_cast<double>(end - start);
            seen += end - start;
        }
        if (seen == 0) throw std::invalid_argument("fit: batch_size leaves no usable training batches");

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_acc / static_cast<double>(seen);
        stats.val_loss = dataset_loss(net, val_set);
        stats.val_accuracy = evaluate(net, val_set).accuracy;
        result.history.push_back(stats);
        result.stopped_epoch = epoch;
        if (progress)
            (*progress) << "epoch," << epoch << ",train_loss," << stats.train_loss << ",val_acc,"
                        << stats.val_accuracy << "\n";

        if (result.history.size() == 1 || stats.val_accuracy > result.best_val_accuracy) {
            result.best_val_accuracy = stats.val_accuracy;
            result.best_epoch = epoch;
            result.best = Checkpoint::from_network(
                net, {{"epoch", std::to_string(epoch)},
                      {"val_accuracy", std::to_string(stats.val_accuracy)},
                      {"seed", std::to_string(config.seed)}});
        }
        if (epoch - result.best_epoch >= config.patience) break;
    }

    net.set_state(result.best.state_map());
    return result;
}

FitResult finetune(const Checkpoint& origin, const LabeledDataset& target_train, const LabeledDataset& target_val,
                   const TrainConfig& config, Network& net_out, const LabeledDataset* origin_train_for_fisher,
                   int64_t fisher_samples, std::ostream* progress) {
    net_out = origin.to_network();
    net_out.set_dropout_streams(mix_seeds(config.seed, 0x64726fULL));

    // Fisher and snapshot come from the origin model under its own inference
    // statistics, before any freezing or statistics swap.
    ParameterSnapshot snapshot;
    FisherDiagonal fisher;
    EwcContext ewc_ctx;
    const bool use_ewc = config.ewc.has_value() && config.ewc->lambda > 0.0;
    if (use_ewc) {
        if (origin.has_ewc_entries()) {
            fisher = fisher_from_checkpoint(origin);
            snapshot = snapshot_from_checkpoint(origin);
        } else {
            if (!origin_train_for_fisher)
                throw std::invalid_argument("finetune: EWC requested but no origin dataset for the Fisher");
            fisher = compute_fisher_diagonal(net_out, *origin_train_for_fisher,
                                             std::min<int64_t>(fisher_samples, origin_train_for_fisher->size()),
                                             mix_seeds(config.seed, 0x666973ULL));
            snapshot = snapshot_parameters(net_out, "origin");
        }
        ewc_ctx.snapshot = &snapshot;
        ewc_ctx.fisher = &fisher;
        ewc_ctx.config = *config.ewc;
    }

    switch (config.finetune_mode) {
        case FinetuneMode::Scratch:
            throw std::invalid_argument("finetune: Scratch mode belongs to fit(), not finetune()");
        case FinetuneMode::BnOnly:
            freeze_non_bn(net_out);
            break;
        case FinetuneMode::AllLayers:
            break;
    }
    if (config.stats_source == StatsSource::FrozenOrigin) {
        const auto origin_state = origin.state_map();
        set_stats_source(net_out, &origin_state);
    }

    return fit(net_out, target_train, target_val, config, use_ewc ? &ewc_ctx : nullptr, progress);
}

}  // namespace retain
