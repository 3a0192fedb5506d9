#include <doctest.h>

#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "retain/ops.hpp"
#include "retain/train.hpp"

using namespace retain;
using ag::Var;

namespace {

LabeledDataset blobs_2class(int64_t n, uint64_t seed) {
    // two well-separated gaussian blobs in the unit square, flat [N,2] images
    LabeledDataset ds;
    ds.class_count = 2;
    ds.provenance = "blobs";
    ds.images = Tensor({n, 2});
    ds.labels.resize(static_cast<size_t>(n));
    Rng rng(seed);
    for (int64_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(rng.next_below(2));
        ds.labels[static_cast<size_t>(i)] = y;
        const double cx = y == 0 ? 0.25 : 0.75;
        ds.images.data[i * 2 + 0] = static_cast<float>(std::clamp(cx + 0.05 * rng.next_normal(), 0.0, 1.0));
        ds.images.data[i * 2 + 1] = static_cast<float>(std::clamp(cx + 0.05 * rng.next_normal(), 0.0, 1.0));
    }
    return ds;
}

LabeledDataset noise_dataset(int64_t n, int64_t d, uint64_t seed) {
    LabeledDataset ds;
    ds.class_count = 2;
    ds.provenance = "noise";
    ds.images = ops::seeded_randn({n, d}, seed, 0.1);
    for (auto& v : ds.images.data) v = std::clamp(v + 0.5f, 0.0f, 1.0f);
    ds.labels.resize(static_cast<size_t>(n));
    Rng rng(seed + 1);
    for (auto& y : ds.labels) y = static_cast<int>(rng.next_below(2));
    return ds;
}

std::map<std::string, std::vector<float>> full_state(Network& net) {
    std::map<std::string, std::vector<float>> s;
    for (auto& [k, t] : net.state()) s[k] = t.data;
    return s;
}

}  // namespace

TEST_SUITE("adam") {
    TEST_CASE("zero gradient leaves parameters unchanged") {
        Param p;
        p.var = ag::leaf(Tensor::from({3}, {1, 2, 3}), true, "p");
        p.var->grad();  // allocated, all zeros
        Adam adam({1e-2f, 0.9f, 0.99f, 1e-7f});
        adam.step({{"p", &p}});
        CHECK(p.var->value.data == std::vector<float>{1, 2, 3});
    }

    TEST_CASE("first step magnitude is lr within the eps correction") {
        Param p;
        p.var = ag::leaf(Tensor::from({1}, {0.0f}), true, "p");
        p.var->grad().data[0] = 1.0f;
        const float lr = 1e-3f;
        Adam adam({lr, 0.9f, 0.99f, 1e-7f});
        adam.step({{"p", &p}});
        CHECK(p.var->value.data[0] == doctest::Approx(-lr).epsilon(1e-4));
    }

    TEST_CASE("matches a double-precision loop oracle over 5 steps") {
        const int64_t n = 10;
        Param p;
        p.var = ag::leaf(ops::seeded_randn({n}, 4001, 1.0), true, "p");
        std::vector<double> theta(p.var->value.data.begin(), p.var->value.data.end());
        std::vector<double> m(n, 0.0), v(n, 0.0);
        const double lr = 1e-3, b1 = 0.9, b2 = 0.99, eps = 1e-7;

        Adam adam({1e-3f, 0.9f, 0.99f, 1e-7f});
        for (int step = 1; step <= 5; ++step) {
            Tensor g = ops::seeded_randn({n}, 4001 + static_cast<uint64_t>(step), 1.0);
            p.var->zero_grad();
            p.var->grad() = g;
            adam.step({{"p", &p}});
            for (int64_t i = 0; i < n; ++i) {
                m[i] = b1 * m[i] + (1 - b1) * g.data[i];
                v[i] = b2 * v[i] + (1 - b2) * g.data[i] * g.data[i];
                const double mhat = m[i] / (1 - std::pow(b1, step));
                const double vhat = v[i] / (1 - std::pow(b2, step));
                theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
        for (int64_t i = 0; i < n; ++i) CHECK(std::abs(p.var->value.data[i] - theta[i]) < 1e-7);
    }

    TEST_CASE("non-finite gradient aborts naming the parameter") {
        Param p;
        p.var = ag::leaf(Tensor::from({1}, {0.0f}), true, "layer9.weight");
        p.var->grad().data[0] = std::nanf("");
        Adam adam({1e-3f, 0.9f, 0.99f, 1e-7f});
        CHECK_THROWS_WITH_AS(adam.step({{"layer9.weight", &p}}),
                             doctest::Contains("layer9.weight"), std::runtime_error);
    }

    TEST_CASE("untrainable parameters are skipped") {
        Param p;
        p.var = ag::leaf(Tensor::from({1}, {1.0f}), true, "p");
        p.var->grad().data[0] = 1.0f;
        p.trainable = false;
        Adam adam({1e-1f, 0.9f, 0.99f, 1e-7f});
        adam.step({{"p", &p}});
        CHECK(p.var->value.data[0] == 1.0f);
    }
}

TEST_SUITE("fit") {
    TEST_CASE("no improvement for `patience` epochs stops the run") {
        // plain linear model, lr 0: every epoch evaluates identically, so the
        // first epoch stays best and patience expires right after it
        Network net;
        net.input_shape = {2};
        net.add(std::make_unique<LinearLayer>(2, 2));
        net.init(5001);
        LabeledDataset train = noise_dataset(40, 2, 5002);
        LabeledDataset val = noise_dataset(20, 2, 5003);
        TrainConfig tc;
        tc.max_epochs = 50;
        tc.patience = 1;
        tc.adam.lr = 0.0f;
        tc.seed = 5;
        FitResult r = fit(net, train, val, tc);
        CHECK(r.best_epoch == 1);
        CHECK(r.stopped_epoch == 2);
        CHECK(r.stopped_epoch - r.best_epoch <= tc.patience);
    }

    TEST_CASE("identical config and seed reproduce the run bit-exactly") {
        auto run = [&] {
            Network net = make_mlp_bn({2}, {6}, 2);
            net.init(5011);
            TrainConfig tc;
            tc.max_epochs = 4;
            tc.batch_size = 8;
            tc.seed = 17;
            LabeledDataset train = blobs_2class(64, 5012);
            LabeledDataset val = blobs_2class(32, 5013);
            FitResult r = fit(net, train, val, tc);
            return std::make_pair(r, full_state(net));
        };
        auto [r1, s1] = run();
        auto [r2, s2] = run();
        REQUIRE(r1.history.size() == r2.history.size());
        for (size_t i = 0; i < r1.history.size(); ++i) {
            CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
            CHECK(r1.history[i].val_accuracy == r2.history[i].val_accuracy);
        }
        CHECK(s1 == s2);
    }

    TEST_CASE("separable blobs reach 99% validation accuracy") {
        Network net = make_mlp_bn({2}, {8}, 2);
        net.init(5021);
        TrainConfig tc;
        tc.max_epochs = 20;
        tc.patience = 20;
        tc.batch_size = 16;
        tc.seed = 3;
        LabeledDataset train = blobs_2class(160, 5022);
        LabeledDataset val = blobs_2class(64, 5023);
        FitResult r = fit(net, train, val, tc);
        CHECK(r.best_val_accuracy >= 0.99);
        CHECK(r.stopped_epoch <= 20);
    }

    TEST_CASE("progress lines are machine-parseable") {
        Network net = make_mlp_bn({2}, {4}, 2);
        net.init(5031);
        TrainConfig tc;
        tc.max_epochs = 2;
        tc.patience = 5;
        tc.seed = 6;
        std::ostringstream out;
        fit(net, blobs_2class(32, 5032), blobs_2class(16, 5033), tc, nullptr, &out);
        std::istringstream lines(out.str());
        std::string line;
        int n = 0;
        while (std::getline(lines, line)) {
            CHECK(line.rfind("epoch," + std::to_string(n + 1) + ",train_loss,", 0) == 0);
            CHECK(line.find(",val_acc,") != std::string::npos);
            ++n;
        }
        CHECK(n == 2);
    }

    TEST_CASE("empty datasets and bad configs rejected") {
        Network net = make_mlp_bn({2}, {4}, 2);
        net.init(5041);
        LabeledDataset empty;
        empty.images = Tensor();
        empty.class_count = 2;
        LabeledDataset data = blobs_2class(16, 5042);
        TrainConfig tc;
        CHECK_THROWS(fit(net, empty, data, tc));
        TrainConfig bad_patience;
        bad_patience.patience = 0;
        CHECK_THROWS(fit(net, data, data, bad_patience));
        TrainConfig tiny_batch;
        tiny_batch.batch_size = 1;
        CHECK_THROWS(fit(net, data, data, tiny_batch));  // live BN needs >= 2
    }

    TEST_CASE("early stopping invariant on a real run") {
        Network net = make_mlp_bn({2}, {6}, 2);
        net.init(5051);
        TrainConfig tc;
        tc.max_epochs = 30;
        tc.patience = 3;
        tc.seed = 9;
        FitResult r = fit(net, blobs_2class(64, 5052), blobs_2class(32, 5053), tc);
        CHECK(r.stopped_epoch - r.best_epoch <= tc.patience);
        CHECK(r.best_val_accuracy == r.history[static_cast<size_t>(r.best_epoch - 1)].val_accuracy);
    }
}

TEST_SUITE("evaluate") {
    TEST_CASE("reproduces the recorded best validation accuracy") {
        Network net = make_mlp_bn({2}, {6}, 2);
        net.init(6001);
        TrainConfig tc;
        tc.max_epochs = 6;
        tc.seed = 11;
        LabeledDataset val = blobs_2class(32, 6003);
        FitResult r = fit(net, blobs_2class(64, 6002), val, tc);
        // fit leaves the network at the best epoch's state
        CHECK(evaluate(net, val).accuracy == doctest::Approx(r.best_val_accuracy));
    }

    TEST_CASE("deterministic and self-transplant is a no-op") {
        Network net = make_mlp_bn({2}, {6}, 2);
        net.init(6011);
        LabeledDataset data = blobs_2class(40, 6012);
        EvalResult a = evaluate(net, data);
        EvalResult b = evaluate(net, data);
        CHECK(a.accuracy == b.accuracy);
        CHECK(a.kappa == b.kappa);
        auto own = net.state();
        EvalResult c = evaluate(net, data, &own);
        CHECK(c.accuracy == a.accuracy);
        CHECK(c.kappa == a.kappa);
    }

    TEST_CASE("grouped datasets score group-averaged predictions") {
        Network net = make_mlp_bn({2}, {6}, 2);
        net.init(6021);
        LabeledDataset data = blobs_2class(24, 6022);
        data.groups.resize(24);
        std::vector<int> sorted_labels = data.labels;
        // pair consecutive same-label samples into groups
        std::vector<int64_t> by_label[2];
        for (int64_t i = 0; i < 24; ++i) by_label[data.labels[static_cast<size_t>(i)]].push_back(i);
        int64_t g = 0;
        for (auto& bucket : by_label)
            for (size_t i = 0; i + 1 < bucket.size(); i += 2) {
                data.groups[static_cast<size_t>(bucket[i])] = g;
                data.groups[static_cast<size_t>(bucket[i + 1])] = g;
                ++g;
            }
        // odd leftovers become singletons
        for (auto& bucket : by_label)
            if (bucket.size() % 2) data.groups[static_cast<size_t>(bucket.back())] = g++;
        EvalResult r = evaluate(net, data);
        CHECK(r.grouped);
        CHECK(r.n == 24);
    }
}

TEST_SUITE("finetune") {
    namespace {
        struct Pair {
            LabeledDataset o_train, o_val, t_train, t_val;
        };

        Pair tiny_domain_pair(uint64_t seed) {
            SyntheticDomainSpec so{1.0f, 0.0f, 0.02f, 21};
            SyntheticDomainSpec st{0.6f, 0.3f, 0.05f, 22};
            auto [o, t] = make_synthetic_domain_pair(30, 2, 12, so, st, seed);
            auto [otr, ova, ote] = split(o, SplitSpec{1});
            auto [ttr, tva, tte] = split(t, SplitSpec{1});
            return {otr, ova, ttr, tva};
        }

        Checkpoint train_origin(const Pair& p, uint64_t seed) {
            Network net = make_mlp_bn({1, 12, 12}, {16}, 2);
            net.init(seed);
            TrainConfig tc;
            tc.max_epochs = 8;
            tc.patience = 8;
            tc.seed = seed;
            fit(net, p.o_train, p.o_val, tc);
            return Checkpoint::from_network(net, {{"id", "origin"}});
        }
    }  // namespace

    TEST_CASE("BnOnly leaves every non-BN parameter byte-identical") {
        Pair p = tiny_domain_pair(7001);
        Checkpoint origin = train_origin(p, 7002);
        TrainConfig tc;
        tc.max_epochs = 4;
        tc.seed = 7003;
        tc.finetune_mode = FinetuneMode::BnOnly;
        tc.stats_source = StatsSource::SelfLive;
        Network net;
        finetune(origin, p.t_train, p.t_val, tc, net);
        for (auto& np : net.named_params()) {
            if (np.name.find(".gamma") != std::string::npos || np.name.find(".beta") != std::string::npos) continue;
            CHECK(np.param->var->value.data == origin.find(np.name)->data);
        }
        // and the BN parameters did move
        bool bn_moved = false;
        for (auto& np : net.named_params())
            if (np.name.ends_with(".gamma") && np.param->var->value.data != origin.find(np.name)->data)
                bn_moved = true;
        CHECK(bn_moved);
    }

    TEST_CASE("FrozenOrigin leaves running statistics byte-identical") {
        Pair p = tiny_domain_pair(7011);
        Checkpoint origin = train_origin(p, 7012);
        TrainConfig tc;
        tc.max_epochs = 4;
        tc.seed = 7013;
        tc.finetune_mode = FinetuneMode::AllLayers;
        tc.stats_source = StatsSource::FrozenOrigin;
        Network net;
        finetune(origin, p.t_train, p.t_val, tc, net);
        for (auto& b : net.named_buffers()) CHECK(b.tensor->data == origin.find(b.name)->data);
        // weights did move
        bool moved = false;
        for (auto& np : net.named_params())
            if (np.param->var->value.data != origin.find(np.name)->data) moved = true;
        CHECK(moved);
    }

    TEST_CASE("SelfLive fine-tuning rewrites the running statistics") {
        Pair p = tiny_domain_pair(7021);
        Checkpoint origin = train_origin(p, 7022);
        TrainConfig tc;
        tc.max_epochs = 2;
        tc.seed = 7023;
        tc.finetune_mode = FinetuneMode::AllLayers;
        tc.stats_source = StatsSource::SelfLive;
        Network net;
        finetune(origin, p.t_train, p.t_val, tc, net);
        bool stats_moved = false;
        for (auto& b : net.named_buffers())
            if (b.tensor->data != origin.find(b.name)->data) stats_moved = true;
        CHECK(stats_moved);
    }

    TEST_CASE("mean parameter distance shrinks monotonically along the lambda grid") {
        Pair p = tiny_domain_pair(7031);
        Checkpoint origin = train_origin(p, 7032);
        ParameterSnapshot anchor;
        for (const auto& [name, t] : origin.tensors)
            if (name.find("running_") == std::string::npos) anchor.values[name] = t;

        std::vector<double> dist;
        for (double lambda : {0.0, 100.0, 1e5}) {
            TrainConfig tc;
            tc.max_epochs = 5;
            tc.seed = 7033;
            tc.finetune_mode = FinetuneMode::AllLayers;
            tc.stats_source = StatsSource::FrozenOrigin;
            tc.ewc = EwcConfig{lambda};
            Network net;
            finetune(origin, p.t_train, p.t_val, tc, net, &p.o_train, 64);
            dist.push_back(mean_param_distance(net, anchor));
        }
        CHECK(dist[1] <= dist[0] + 1e-9);
        CHECK(dist[2] <= dist[1] + 1e-9);
        CHECK(dist[2] < 0.05 * dist[0] + 1e-6);
    }

    TEST_CASE("EWC without an origin dataset is rejected") {
        Pair p = tiny_domain_pair(7041);
        Checkpoint origin = train_origin(p, 7042);
        TrainConfig tc;
        tc.finetune_mode = FinetuneMode::AllLayers;
        tc.ewc = EwcConfig{0.5};
        Network net;
        CHECK_THROWS(finetune(origin, p.t_train, p.t_val, tc, net, nullptr));
    }

    TEST_CASE("freeze soundness: BnOnly changes exactly the BN parameters") {
        Pair p = tiny_domain_pair(7051);
        Checkpoint origin = train_origin(p, 7052);
        TrainConfig tc;
        tc.max_epochs = 3;
        tc.seed = 7053;
        tc.finetune_mode = FinetuneMode::BnOnly;
        tc.stats_source = StatsSource::FrozenOrigin;
        Network net;
        finetune(origin, p.t_train, p.t_val, tc, net);
        for (auto& np : net.named_params()) {
            const bool is_bn_param = np.name.ends_with(".gamma") || np.name.ends_with(".beta");
            const bool changed = np.param->var->value.data != origin.find(np.name)->data;
            if (!is_bn_param) CHECK(!changed);
        }
        // frozen stats branch: buffers also byte-identical
        for (auto& b : net.named_buffers()) CHECK(b.tensor->data == origin.find(b.name)->data);
    }
}
