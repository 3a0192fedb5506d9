#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "retain/ops.hpp"

using namespace retain;
using ops::seeded_randn;
using ag::Var;

namespace {

Var randn_leaf(const std::vector<int64_t>& shape, uint64_t seed, double scale = 1.0) {
    return ag::leaf(seeded_randn(shape, seed, scale), true);
}

}  // namespace

TEST_SUITE("tensor") {
    TEST_CASE("shape/data invariants") {
        Tensor t({2, 3}, 0.5f);
        CHECK(t.numel() == 6);
        CHECK_THROWS(Tensor({2, 0}));
        CHECK_THROWS(Tensor::from({3}, {1.0f, 2.0f}));
        CHECK(Tensor::scalar(2.0f).numel() == 1);
    }
}

TEST_SUITE("seeded_randn") {
    TEST_CASE("deterministic for a fixed seed") {
        Tensor a = seeded_randn({4}, 7, 1.0);
        Tensor b = seeded_randn({4}, 7, 1.0);
        CHECK(a.data == b.data);
        Tensor c = seeded_randn({4}, 8, 1.0);
        CHECK(a.data != c.data);
    }

    TEST_CASE("sample mean approaches 0") {
        Tensor t = seeded_randn({10000}, 1, 1.0);
        double mean = 0.0;
        for (float v : t.data) mean += v;
        mean /= t.numel();
        CHECK(std::abs(mean) < 0.05);
    }

    TEST_CASE("sample variance approaches scale^2") {
        Tensor t = seeded_randn({10000}, 1, 2.0);
        double mean = 0.0;
        for (float v : t.data) mean += v;
        mean /= t.numel();
        double var = 0.0;
        for (float v : t.data) var += (v - mean) * (v - mean);
        var /= t.numel();
        CHECK(std::abs(var - 4.0) < 0.2);
    }

    TEST_CASE("rejects zero extents and bad scale") {
        CHECK_THROWS(seeded_randn({0}, 1, 1.0));
        CHECK_THROWS(seeded_randn({2, 0}, 1, 1.0));
        CHECK_THROWS(seeded_randn({}, 1, 1.0));
        CHECK_THROWS(seeded_randn({2}, 1, 0.0));
    }
}

TEST_SUITE("matmul") {
    TEST_CASE("identity passthrough") {
        Var eye = ag::constant(Tensor::from({2, 2}, {1, 0, 0, 1}));
        Var b = ag::constant(Tensor::from({2, 2}, {5, 6, 7, 8}));
        CHECK(ops::matmul(eye, b)->value.data == b->value.data);
    }

    TEST_CASE("hand-computed 2x2 product") {
        Var a = ag::constant(Tensor::from({2, 2}, {1, 2, 3, 4}));
        Var b = ag::constant(Tensor::from({2, 2}, {5, 6, 7, 8}));
        Tensor out = ops::matmul(a, b)->value;
        CHECK(out.data == std::vector<float>{19, 22, 43, 50});
    }

    TEST_CASE("dimension mismatch rejected") {
        Var a = ag::constant(Tensor({2, 3}));
        Var b = ag::constant(Tensor({2, 3}));
        CHECK_THROWS(ops::matmul(a, b));
    }

    TEST_CASE("gradient matches finite differences") {
        Var a = randn_leaf({3, 4}, 11);
        Var b = randn_leaf({4, 2}, 12);
        auto loss = [&] { return ops::sum(ops::matmul(a, b)); };
        CHECK(testutil::fd_gradient_error(loss, {a, b}) < 1e-3);
    }
}

TEST_SUITE("conv2d") {
    TEST_CASE("1x1 unit kernel is the identity") {
        Var x = randn_leaf({1, 1, 3, 3}, 21);
        Var k = ag::constant(Tensor::from({1, 1, 1, 1}, {1.0f}));
        Tensor out = ops::conv2d(x, k, 1, 0)->value;
        CHECK(out.shape == x->value.shape);
        for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data[i] == doctest::Approx(x->value.data[i]));
    }

    TEST_CASE("all-ones 3x3 kernel sums the window") {
        Var x = ag::constant(Tensor({1, 1, 3, 3}, 1.0f));
        Var k = ag::constant(Tensor({1, 1, 3, 3}, 1.0f));
        Tensor out = ops::conv2d(x, k, 1, 0)->value;
        CHECK(out.shape == std::vector<int64_t>{1, 1, 1, 1});
        CHECK(out.data[0] == doctest::Approx(9.0f));
    }

    TEST_CASE("non-integral output size rejected") {
        Var x = ag::constant(Tensor({1, 1, 5, 5}));
        Var k = ag::constant(Tensor({1, 1, 2, 2}));
        CHECK_THROWS(ops::conv2d(x, k, 2, 0));
    }

    TEST_CASE("gradient matches finite differences") {
        Var x = randn_leaf({1, 2, 5, 5}, 31, 0.5);
        Var k = randn_leaf({3, 2, 3, 3}, 32, 0.5);
        auto loss = [&] { return ops::sum(ops::conv2d(x, k, 2, 1)); };
        CHECK(testutil::fd_gradient_error(loss, {x, k}) < 1e-3);
    }
}

TEST_SUITE("elementwise") {
    TEST_CASE("relu clamps negatives, add is pointwise") {
        Var x = ag::constant(Tensor::from({3}, {-1, 0, 2}));
        CHECK(ops::relu(x)->value.data == std::vector<float>{0, 0, 2});
        Var a = ag::constant(Tensor::from({2}, {1, 2}));
        Var b = ag::constant(Tensor::from({2}, {3, 4}));
        CHECK(ops::add(a, b)->value.data == std::vector<float>{4, 6});
    }

    TEST_CASE("relu gradient is zero at exactly zero") {
        Var x = ag::leaf(Tensor::from({3}, {-1, 0, 2}), true);
        ag::backward(ops::sum(ops::relu(x)));
        CHECK(x->grad().data == std::vector<float>{0, 0, 1});
    }

    TEST_CASE("per-channel broadcast matches a loop oracle") {
        const int64_t n = 5, c = 3;
        Tensor x = seeded_randn({n, c}, 41, 1.0);
        Tensor g = seeded_randn({c}, 42, 1.0);
        Tensor out = ops::mul(ag::constant(x), ag::constant(g))->value;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < c; ++j)
                CHECK(out.data[i * c + j] ==
                      doctest::Approx(x.data[i * c + j] * g.data[j]).epsilon(1e-6));

        // 4D layout against the same oracle
        Tensor x4 = seeded_randn({2, c, 2, 2}, 43, 1.0);
        Tensor out4 = ops::mul(ag::constant(x4), ag::constant(g))->value;
        for (int64_t i = 0; i < x4.numel(); ++i) {
            const int64_t channel = (i / 4) % c;
            CHECK(out4.data[i] == doctest::Approx(x4.data[i] * g.data[channel]).epsilon(1e-6));
        }
    }

    TEST_CASE("broadcast gradient matches finite differences") {
        Var x = randn_leaf({4, 3}, 44);
        Var g = randn_leaf({3}, 45);
        auto loss = [&] { return ops::sum(ops::mul(ops::sub(x, g), g)); };
        CHECK(testutil::fd_gradient_error(loss, {x, g}) < 1e-3);
    }

    TEST_CASE("division by zero and bad shapes rejected") {
        Var a = ag::constant(Tensor::from({2}, {1, 2}));
        Var z = ag::constant(Tensor::from({2}, {1, 0}));
        CHECK_THROWS(ops::divide(a, z));
        Var b = ag::constant(Tensor({3}));
        CHECK_THROWS(ops::add(a, b));
        // [C] on the left of a broadcast is not supported either
        Var m = ag::constant(Tensor({4, 2}));
        CHECK_THROWS(ops::add(b, m));
    }

    TEST_CASE("scale by a constant") {
        Var x = ag::leaf(Tensor::from({2}, {1, -2}), true);
        Var y = ops::scale(x, 3.0f);
        CHECK(y->value.data == std::vector<float>{3, -6});
        ag::backward(ops::sum(y));
        CHECK(x->grad().data == std::vector<float>{3, 3});
    }
}

TEST_SUITE("softmax_cross_entropy") {
    TEST_CASE("uniform logits give ln K") {
        Var logits = ag::constant(Tensor({2, 4}, 0.0f));
        Var loss = ops::softmax_cross_entropy(logits, {0, 3});
        CHECK(loss->value.data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    }

    TEST_CASE("saturated correct class gives near-zero loss") {
        Var logits = ag::constant(Tensor::from({1, 2}, {10, -10}));
        Var loss = ops::softmax_cross_entropy(logits, {0});
        CHECK(loss->value.data[0] < 1e-4);
    }

    TEST_CASE("label out of range rejected") {
        Var logits = ag::constant(Tensor({1, 2}));
        CHECK_THROWS(ops::softmax_cross_entropy(logits, {2}));
        CHECK_THROWS(ops::softmax_cross_entropy(logits, {-1}));
    }

    TEST_CASE("gradient matches finite differences") {
        Var logits = randn_leaf({5, 3}, 51);
        auto loss = [&] { return ops::softmax_cross_entropy(logits, {0, 2, 1, 1, 0}); };
        CHECK(testutil::fd_gradient_error(loss, {logits}) < 1e-3);
    }
}

TEST_SUITE("moments") {
    TEST_CASE("constant tensor has zero variance") {
        Var x = ag::constant(Tensor({4, 2}, 3.5f));
        auto [mean, var] = ops::moments(x, {0});
        CHECK(mean->value.data == std::vector<float>{3.5f, 3.5f});
        CHECK(var->value.data == std::vector<float>{0.0f, 0.0f});
    }

    TEST_CASE("biased variance on a 3-element column") {
        Var x = ag::constant(Tensor::from({3, 1}, {1, 2, 3}));
        auto [mean, var] = ops::moments(x, {0});
        CHECK(mean->value.data[0] == doctest::Approx(2.0));
        CHECK(var->value.data[0] == doctest::Approx(2.0 / 3.0));
    }

    TEST_CASE("single-element reduction yields variance 0") {
        Var x = ag::constant(Tensor::from({1, 2}, {4, 5}));
        auto [mean, var] = ops::moments(x, {0});
        CHECK(var->value.data == std::vector<float>{0, 0});
    }

    TEST_CASE("matches a two-pass loop oracle on random 8x4") {
        Tensor x = seeded_randn({8, 4}, 61, 1.0);
        auto [mean, var] = ops::moments(ag::constant(x), {0});
        for (int64_t j = 0; j < 4; ++j) {
            double m = 0;
            for (int64_t i = 0; i < 8; ++i) m += x.data[i * 4 + j];
            m /= 8;
            double v = 0;
            for (int64_t i = 0; i < 8; ++i) v += (x.data[i * 4 + j] - m) * (x.data[i * 4 + j] - m);
            v /= 8;
            CHECK(std::abs(mean->value.data[j] - m) < 1e-6);
            CHECK(std::abs(var->value.data[j] - v) < 1e-6);
        }
    }

    TEST_CASE("shift covariance") {
        Tensor x = seeded_randn({16, 3}, 62, 1.0);
        Tensor shifted = x;
        for (auto& v : shifted.data) v += 0.75f;
        auto [m0, v0] = ops::moments(ag::constant(x), {0});
        auto [m1, v1] = ops::moments(ag::constant(shifted), {0});
        for (int64_t j = 0; j < 3; ++j) {
            CHECK(m1->value.data[j] == doctest::Approx(m0->value.data[j] + 0.75f).epsilon(1e-6));
            CHECK(std::abs(v1->value.data[j] - v0->value.data[j]) < 1e-6);
        }
    }

    TEST_CASE("4D reduction over N,H,W") {
        Tensor x = seeded_randn({2, 3, 4, 4}, 63, 1.0);
        auto [mean, var] = ops::moments(ag::constant(x), {0, 2, 3});
        CHECK(mean->value.shape == std::vector<int64_t>{3});
        for (int64_t ch = 0; ch < 3; ++ch) {
            double m = 0;
            int64_t cnt = 0;
            for (int64_t n = 0; n < 2; ++n)
                for (int64_t i = 0; i < 16; ++i) {
                    m += x.data[(n * 3 + ch) * 16 + i];
                    ++cnt;
                }
            CHECK(mean->value.data[ch] == doctest::Approx(m / cnt).epsilon(1e-5));
        }
    }

    TEST_CASE("gradient through moments matches finite differences") {
        Var x = randn_leaf({6, 3}, 64);
        auto loss = [&] {
            auto [mean, var] = ops::moments(x, {0});
            return ops::add(ops::sum(ops::mul(mean, mean)), ops::sum(var));
        };
        CHECK(testutil::fd_gradient_error(loss, {x}) < 1e-3);
    }
}

TEST_SUITE("backward") {
    TEST_CASE("gradient of a plain sum is ones") {
        Var x = ag::leaf(Tensor::from({3}, {1, 2, 3}), true);
        ag::backward(ops::sum(x));
        CHECK(x->grad().data == std::vector<float>{1, 1, 1});
    }

    TEST_CASE("gradient of sum of squares") {
        Var x = ag::leaf(Tensor::from({2}, {1, 2}), true);
        ag::backward(ops::sum(ops::mul(x, x)));
        CHECK(x->grad().data == std::vector<float>{2, 4});
    }

    TEST_CASE("loss grad wrt itself is one") {
        Var x = ag::leaf(Tensor::scalar(4.0f), true);
        Var loss = ops::scale(x, 1.0f);
        ag::backward(loss);
        CHECK(loss->grad().data[0] == 1.0f);
    }

    TEST_CASE("repeated backward accumulates leaf grads until cleared") {
        Var x = ag::leaf(Tensor::from({2}, {1, 2}), true);
        Var loss = ops::sum(x);
        ag::backward(loss);
        ag::backward(loss);
        CHECK(x->grad().data == std::vector<float>{2, 2});
        x->zero_grad();
        ag::backward(loss);
        CHECK(x->grad().data == std::vector<float>{1, 1});
    }

    TEST_CASE("non-scalar loss rejected") {
        Var x = ag::leaf(Tensor({3}), true);
        CHECK_THROWS(ag::backward(x));
    }

    TEST_CASE("diamond-shaped graph sums both paths") {
        Var x = ag::leaf(Tensor::scalar(3.0f), true);
        Var y = ops::add(ops::mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 7
        ag::backward(ops::sum(y));
        CHECK(x->grad().data[0] == doctest::Approx(7.0f));
    }

    TEST_CASE("whole MLP-with-BN gradient matches finite differences") {
        Network net = make_mlp_bn({6}, {5}, 3);
        net.init(77);
        Tensor batch = seeded_randn({4, 6}, 78, 1.0);
        for (auto& v : batch.data) v = std::clamp(v * 0.2f + 0.5f, 0.0f, 1.0f);
        std::vector<int> labels = {0, 1, 2, 1};
        auto loss = [&] { return ops::softmax_cross_entropy(net.forward(batch, Phase::Train), labels); };
        CHECK(testutil::fd_gradient_error(loss, testutil::trainable_vars(net)) < 1e-3);
    }
}
