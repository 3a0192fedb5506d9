#include "retain/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "retain/rng.hpp"

namespace retain {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& context) {
    if (!obj.is_object()) throw std::invalid_argument("config: " + context + " must be an object");
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key)) throw std::invalid_argument("config: unknown key '" + key + "' in " + context);
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
    auto it = obj.find(key);
    if (it == obj.end()) return fallback;
    return it->get<T>();
}

const json& require(const json& obj, const std::string& key, const std::string& context) {
    auto it = obj.find(key);
    if (it == obj.end()) throw std::invalid_argument("config: missing key '" + key + "' in " + context);
    return *it;
}

SyntheticDomainSpec parse_domain_spec(const json& obj, const std::string& context) {
    reject_unknown(obj, {"gain", "offset", "noise_sigma", "seed"}, context);
    SyntheticDomainSpec spec;
    spec.gain = require(obj, "gain", context).get<float>();
    spec.offset = require(obj, "offset", context).get<float>();
    spec.noise_sigma = get_or<float>(obj, "noise_sigma", 0.0f);
    spec.seed = get_or<uint64_t>(obj, "seed", 0);
    return spec;
}

FinetuneMode parse_mode(const std::string& s, const std::string& context) {
    if (s == "scratch") return FinetuneMode::Scratch;
    if (s == "all-layers") return FinetuneMode::AllLayers;
    if (s == "bn-only") return FinetuneMode::BnOnly;
    throw std::invalid_argument("config: bad finetune_mode '" + s + "' in " + context);
}

StatsSource parse_stats(const std::string& s, const std::string& context) {
    if (s == "self-live") return StatsSource::SelfLive;
    if (s == "frozen-origin") return StatsSource::FrozenOrigin;
    throw std::invalid_argument("config: bad stats_source '" + s + "' in " + context);
}

TrainConfig parse_train(const json& obj, const std::string& context, FinetuneMode default_mode) {
    reject_unknown(obj,
                   {"batch_size", "max_epochs", "patience", "seed", "lr", "beta1", "beta2", "eps_adam", "augment",
                    "finetune_mode", "stats_source", "lambda"},
                   context);
    TrainConfig tc;
    tc.finetune_mode = default_mode;
    tc.batch_size = get_or<int64_t>(obj, "batch_size", 32);
    tc.max_epochs = get_or<int64_t>(obj, "max_epochs", 30);
    tc.patience = get_or<int64_t>(obj, "patience", 5);
    tc.seed = get_or<uint64_t>(obj, "seed", 0);
    tc.adam.lr = get_or<float>(obj, "lr", 1e-3f);
    tc.adam.beta1 = get_or<float>(obj, "beta1", 0.9f);
    tc.adam.beta2 = get_or<float>(obj, "beta2", 0.99f);
    tc.adam.eps = get_or<float>(obj, "eps_adam", 1e-7f);
    tc.augment = get_or<bool>(obj, "augment", false);
    if (obj.contains("finetune_mode")) tc.finetune_mode = parse_mode(obj["finetune_mode"].get<std::string>(), context);
    if (obj.contains("stats_source")) tc.stats_source = parse_stats(obj["stats_source"].get<std::string>(), context);
    if (obj.contains("lambda")) tc.ewc = EwcConfig{obj["lambda"].get<double>()};
    if (tc.patience < 1) throw std::invalid_argument("config: patience must be >= 1 in " + context);
    if (tc.batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1 in " + context);
    if (tc.ewc && tc.ewc->lambda < 0) throw std::invalid_argument("config: lambda must be >= 0 in " + context);
    return tc;
}

TaskConfig parse_task(const json& obj) {
    const std::string kind = require(obj, "kind", "task").get<std::string>();
    TaskConfig task;
    task.kind = kind;
    if (kind == "permuted-mnist") {
        reject_unknown(obj,
                       {"kind", "mnist_images", "mnist_labels", "train_per_task", "val_per_task", "test_per_task",
                        "permute_seed_o", "permute_seed_t", "subset_seed"},
                       "task");
        task.mnist_images = get_or<std::string>(obj, "mnist_images", "");
        task.mnist_labels = get_or<std::string>(obj, "mnist_labels", "");
        if (task.mnist_images.empty() != task.mnist_labels.empty())
            throw std::invalid_argument("config: mnist_images and mnist_labels must be given together");
        task.train_per_task = get_or<int64_t>(obj, "train_per_task", 10000);
        task.val_per_task = get_or<int64_t>(obj, "val_per_task", 2000);
        task.test_per_task = get_or<int64_t>(obj, "test_per_task", 2000);
        task.permute_seed_o = get_or<uint64_t>(obj, "permute_seed_o", 0);
        task.permute_seed_t = get_or<uint64_t>(obj, "permute_seed_t", 1);
        task.subset_seed = get_or<uint64_t>(obj, "subset_seed", 3);
    } else if (kind == "synthetic-domain") {
        reject_unknown(obj,
                       {"kind", "classes", "image_size", "n_per_class", "images_per_group", "split_seed", "spec_o",
                        "spec_t"},
                       "task");
        task.classes = get_or<int64_t>(obj, "classes", 4);
        task.image_size = get_or<int64_t>(obj, "image_size", 28);
        task.n_per_class = get_or<int64_t>(obj, "n_per_class", 400);
        task.images_per_group = get_or<int64_t>(obj, "images_per_group", 1);
        task.split_seed = get_or<uint64_t>(obj, "split_seed", 7);
        task.spec_o = parse_domain_spec(require(obj, "spec_o", "task"), "task.spec_o");
        task.spec_t = parse_domain_spec(require(obj, "spec_t", "task"), "task.spec_t");
    } else {
        throw std::invalid_argument("config: unknown task kind '" + kind + "'");
    }
    return task;
}

ArchConfig parse_arch(const json& obj) {
    reject_unknown(obj, {"kind", "hidden", "dropout_p"}, "arch");
    ArchConfig arch;
    arch.kind = require(obj, "kind", "arch").get<std::string>();
    if (arch.kind != "mlp-bn" && arch.kind != "cnn-bn")
        throw std::invalid_argument("config: unknown arch kind '" + arch.kind + "'");
    if (obj.contains("hidden")) arch.hidden = obj["hidden"].get<std::vector<int64_t>>();
    arch.dropout_p = get_or<float>(obj, "dropout_p", 0.0f);
    return arch;
}

}  // namespace

uint64_t fnv1a_hash(const std::string& bytes) {
    uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hash_hex(uint64_t h) {
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json root = json::parse(text);
    reject_unknown(root, {"experiment", "seed", "out", "task", "arch", "phase1", "phase2", "lambda_grid",
                          "fisher_samples"},
                   "top level");

    ExperimentConfig cfg;
    cfg.experiment = require(root, "experiment", "top level").get<std::string>();
    cfg.seed = require(root, "seed", "top level").get<uint64_t>();
    cfg.out_dir = get_or<std::string>(root, "out", "runs/" + cfg.experiment);
    cfg.task = parse_task(require(root, "task", "top level"));
    cfg.arch = parse_arch(require(root, "arch", "top level"));
    cfg.phase1 = parse_train(require(root, "phase1", "top level"), "phase1", FinetuneMode::Scratch);
    cfg.phase2 = parse_train(require(root, "phase2", "top level"), "phase2", FinetuneMode::AllLayers);
    if (root.contains("lambda_grid")) {
        cfg.lambda_grid = root["lambda_grid"].get<std::vector<double>>();
        if (cfg.lambda_grid.empty()) throw std::invalid_argument("config: lambda_grid must not be empty");
        for (double l : cfg.lambda_grid)
            if (l < 0) throw std::invalid_argument("config: lambda_grid entries must be >= 0");
    }
    cfg.fisher_samples = get_or<int64_t>(root, "fisher_samples", 2048);
    if (cfg.fisher_samples < 1) throw std::invalid_argument("config: fisher_samples must be >= 1");

    if (cfg.task.kind == "permuted-mnist" && (cfg.phase1.augment || cfg.phase2.augment))
        throw std::invalid_argument(
            "config: augmentation is not valid for permuted-mnist (rotation breaks the pixel permutation)");

    cfg.config_hash = hash_hex(fnv1a_hash(root.dump()));
    return cfg;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

TaskData build_task_data(const ExperimentConfig& cfg) {
    TaskData data;
    const TaskConfig& task = cfg.task;
    if (task.kind == "permuted-mnist") {
        const int64_t need = task.train_per_task + task.val_per_task + task.test_per_task;
        LabeledDataset base;
        if (!task.mnist_images.empty()) {
            base = load_mnist_idx(task.mnist_images, task.mnist_labels);
            if (base.size() < need)
                throw std::invalid_argument("task: MNIST file has " + std::to_string(base.size()) +
                                            " samples, need " + std::to_string(need));
        } else {
            base = make_digit_glyphs(need, mix_seeds(cfg.seed, 0x676c7966ULL));
        }
        Rng rng(mix_seeds(cfg.seed, task.subset_seed));
        std::vector<int64_t> order = rng.permutation(base.size());
        order.resize(static_cast<size_t>(need));
        LabeledDataset subset = take(base, order);

        LabeledDataset task_o = make_permuted_task(subset, task.permute_seed_o);
        LabeledDataset task_t = make_permuted_task(subset, task.permute_seed_t);
        auto slice = [&](const LabeledDataset& ds, int64_t begin, int64_t count) {
            std::vector<int64_t> idx(static_cast<size_t>(count));
            for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = begin + i;
            return take(ds, idx);
        };
        data.o_train = slice(task_o, 0, task.train_per_task);
        data.o_val = slice(task_o, task.train_per_task, task.val_per_task);
        data.o_test = slice(task_o, task.train_per_task + task.val_per_task, task.test_per_task);
        data.t_train = slice(task_t, 0, task.train_per_task);
        data.t_val = slice(task_t, task.train_per_task, task.val_per_task);
        data.t_test = slice(task_t, task.train_per_task + task.val_per_task, task.test_per_task);
    } else if (task.kind == "synthetic-domain") {
        auto [o, t] = make_synthetic_domain_pair(task.n_per_class, task.classes, task.image_size, task.spec_o,
                                                 task.spec_t, mix_seeds(cfg.seed, 0x73796eULL), task.images_per_group);
        SplitSpec spec{task.split_seed};
        std::tie(data.o_train, data.o_val, data.o_test) = split(o, spec);
        std::tie(data.t_train, data.t_val, data.t_test) = split(t, spec);
    } else {
        throw std::invalid_argument("task: unknown kind " + task.kind);
    }
    return data;
}

int64_t task_classes(const ExperimentConfig& cfg) {
    return cfg.task.kind == "permuted-mnist" ? 10 : cfg.task.classes;
}

Network build_arch(const ExperimentConfig& cfg) {
    std::vector<int64_t> input_shape;
    if (cfg.task.kind == "permuted-mnist")
        input_shape = {1, 28, 28};
    else
        input_shape = {1, cfg.task.image_size, cfg.task.image_size};
    if (cfg.arch.kind == "mlp-bn") return make_mlp_bn(input_shape, cfg.arch.hidden, task_classes(cfg), cfg.arch.dropout_p);
    return make_cnn_bn(input_shape, task_classes(cfg), cfg.arch.dropout_p);
}

}  // namespace retain
