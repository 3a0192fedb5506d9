#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "retain/checkpoint.hpp"
#include "retain/data.hpp"
#include "retain/ewc.hpp"
#include "retain/layers.hpp"
#include "retain/metrics.hpp"

namespace retain {

enum class FinetuneMode { Scratch, AllLayers, BnOnly };
enum class StatsSource { SelfLive, FrozenOrigin };

const char* finetune_mode_name(FinetuneMode m);
const char* stats_source_name(StatsSource s);

struct AdamConfig {
    float lr = 1e-3f;  // desk-scale default; the reference setting used 1e-6
                       // under an ImageNet-pretrained backbone
    float beta1 = 0.9f;
    float beta2 = 0.99f;
    float eps = 1e-7f;
};

// Standard Adam with bias correction; updates only trainable parameters and
// aborts with the parameter name on a NaN gradient.
class Adam {
  public:
    explicit Adam(AdamConfig config) : config_(config) {}
    void step(const std::vector<NamedParam>& params);
    int64_t steps_taken() const { return step_; }

  private:
    struct Moments {
        Tensor m, v;
    };
    AdamConfig config_;
    std::map<std::string, Moments> state_;
    int64_t step_ = 0;
};

struct TrainConfig {
    int64_t batch_size = 32;
    int64_t max_epochs = 30;
    int64_t patience = 5;
    uint64_t seed = 0;
    FinetuneMode finetune_mode = FinetuneMode::Scratch;
    StatsSource stats_source = StatsSource::SelfLive;
    std::optional<EwcConfig> ewc;
    AdamConfig adam;
    bool augment = false;
};

struct EpochStats {
    int64_t epoch;
    double train_loss;
    double val_loss;
    double val_accuracy;
};

struct FitResult {
    Checkpoint best;  // state at the max-validation-accuracy epoch
    int64_t best_epoch = 0;
    double best_val_accuracy = 0.0;
    std::vector<EpochStats> history;
    int64_t stopped_epoch = 0;
};

// Optional EWC anchoring for fit(); lambda == 0 trains exactly like the
// plain task loss (the penalty term is skipped outright).
struct EwcContext {
    const ParameterSnapshot* snapshot = nullptr;
    const FisherDiagonal* fisher = nullptr;
    EwcConfig config;
};

// Seeded-shuffled minibatch epochs with early stopping on validation
// accuracy. Writes "epoch,<n>,train_loss,<v>,val_acc,<v>" lines to
// `progress` when given. The network is left at the best epoch's state.
FitResult fit(Network& net, const LabeledDataset& train_set, const LabeledDataset& val_set, const TrainConfig& config,
              const EwcContext* ewc = nullptr, std::ostream* progress = nullptr);

struct EvalResult {
    double accuracy = 0.0;
    double kappa = 0.0;
    std::string band;
    int64_t n = 0;
    bool grouped = false;
};

// Inference-phase metrics. With `origin_stats` given, BN running statistics
// are swapped to the origin's for the pass and restored afterwards. Datasets
// carrying group ids are scored on group-averaged probabilities.
EvalResult evaluate(Network& net, const LabeledDataset& dataset,
                    const std::map<std::string, Tensor>* origin_stats = nullptr);

// The fine-tuning construct: loads the origin parameters, applies the
// mode/stats-source pair, optionally computes the Fisher and snapshot on the
// origin training data, then fits on the target data.
FitResult finetune(const Checkpoint& origin, const LabeledDataset& target_train, const LabeledDataset& target_val,
                   const TrainConfig& config, Network& net_out, const LabeledDataset* origin_train_for_fisher = nullptr,
                   int64_t fisher_samples = 2048, std::ostream* progress = nullptr);

}  // namespace retain
