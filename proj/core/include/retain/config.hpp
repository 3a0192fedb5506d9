#pragma once

#include <string>
#include <vector>

#include "retain/data.hpp"
#include "retain/train.hpp"

namespace retain {

struct ArchConfig {
    std::string kind = "mlp-bn";  // mlp-bn | cnn-bn
    std::vector<int64_t> hidden = {128, 64};
    float dropout_p = 0.0f;
};

struct TaskConfig {
    std::string kind;  // permuted-mnist | synthetic-domain

    // permuted-mnist
    std::string mnist_images, mnist_labels;  // empty -> built-in glyph corpus
    int64_t train_per_task = 10000, val_per_task = 2000, test_per_task = 2000;
    uint64_t permute_seed_o = 0, permute_seed_t = 1;
    uint64_t subset_seed = 3;

    // synthetic-domain
    int64_t classes = 4, image_size = 28, n_per_class = 400, images_per_group = 1;
    uint64_t split_seed = 7;
    SyntheticDomainSpec spec_o, spec_t;
};

// One cell matrix description. Parsed from a JSON document with strict
// schema validation: unknown keys are rejected at every level.
struct ExperimentConfig {
    std::string experiment;
    uint64_t seed = 0;
    std::string out_dir;
    TaskConfig task;
    ArchConfig arch;
    TrainConfig phase1;  // train on O
    TrainConfig phase2;  // fine-tune on T
    std::vector<double> lambda_grid = {0.0, 0.005, 0.05, 0.5, 1.0, 10.0, 1e3, 1e5};
    int64_t fisher_samples = 2048;

    std::string config_hash;  // FNV-1a of the canonical JSON, hex

    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig from_json_file(const std::string& path);
};

struct TaskData {
    LabeledDataset o_train, o_val, o_test;
    LabeledDataset t_train, t_val, t_test;
};

// Deterministic materialization of the config's task pair.
TaskData build_task_data(const ExperimentConfig& cfg);

int64_t task_classes(const ExperimentConfig& cfg);
Network build_arch(const ExperimentConfig& cfg);

uint64_t fnv1a_hash(const std::string& bytes);
std::string hash_hex(uint64_t h);

}  // namespace retain
