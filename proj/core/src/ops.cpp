#include "retain/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "retain/rng.hpp"

namespace retain::ops {

namespace {

ag::Var make_op(Tensor value, std::vector<Var> parents, std::function<void(ag::Node&)> backprop) {
    auto n = std::make_shared<ag::Node>();
    n->value = std::move(value);
    for (auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    n->parents = std::move(parents);
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

// Channel extent of the broadcast target, or -1 when shapes do not qualify.
int64_t channel_extent(const Tensor& t) {
    if (t.rank() == 2 || t.rank() == 4) return t.shape[1];
    return -1;
}

// positions per channel block: for [N,C] it's 1, for [N,C,H,W] it's H*W
int64_t inner_extent(const Tensor& t) {
    if (t.rank() == 2) return 1;
    return t.shape[2] * t.shape[3];
}

enum class BinaryShape { Same, ChannelVec };

BinaryShape classify_binary(const Tensor& a, const Tensor& b, const char* opname) {
    if (a.same_shape(b)) return BinaryShape::Same;
    if (b.rank() == 1 && channel_extent(a) == b.shape[0]) return BinaryShape::ChannelVec;
    throw std::invalid_argument(std::string(opname) + ": shapes " + a.shape_str() + " and " + b.shape_str() +
                                " are neither equal nor [N,C(,H,W)] vs [C]");
}

// channel index of flat position i in an [N,C] or [N,C,H,W] tensor
inline int64_t channel_of(int64_t i, int64_t channels, int64_t inner) { return (i / inner) % channels; }

template <typename Fwd, typename BwdA, typename BwdB>
Var binary_op(const Var& a, const Var& b, const char* opname, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
    BinaryShape bs = classify_binary(a->value, b->value, opname);
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    Tensor out(av.shape);
    const int64_t n = av.numel();
    if (bs == BinaryShape::Same) {
        for (int64_t i = 0; i < n; ++i) out.data[i] = fwd(av.data[i], bv.data[i]);
    } else {
        const int64_t channels = channel_extent(av);
        const int64_t inner = inner_extent(av);
        for (int64_t i = 0; i < n; ++i) out.data[i] = fwd(av.data[i], bv.data[channel_of(i, channels, inner)]);
    }
    ensure_finite(out, opname);

    return make_op(std::move(out), {a, b}, [a, b, bs, bwd_a, bwd_b](ag::Node& node) {
        const Tensor& go = node.grad();
        const Tensor& av2 = a->value;
        const Tensor& bv2 = b->value;
        const int64_t count = av2.numel();
        const int64_t channels = bs == BinaryShape::ChannelVec ? channel_extent(av2) : 0;
        const int64_t inner = bs == BinaryShape::ChannelVec ? inner_extent(av2) : 0;
        if (a->requires_grad) {
            Tensor& ga = a->grad();
            for (int64_t i = 0; i < count; ++i) {
                float bi = bs == BinaryShape::Same ? bv2.data[i] : bv2.data[channel_of(i, channels, inner)];
                ga.data[i] += bwd_a(go.data[i], av2.data[i], bi);
            }
        }
        if (b->requires_grad) {
            Tensor& gb = b->grad();
            for (int64_t i = 0; i < count; ++i) {
                int64_t j = bs == BinaryShape::Same ? i : channel_of(i, channels, inner);
                gb.data[j] += bwd_b(go.data[i], av2.data[i], bv2.data[j]);
            }
        }
    });
}

}  // namespace

Tensor seeded_randn(const std::vector<int64_t>& shape, uint64_t seed, double scale) {
    if (shape.empty()) throw std::invalid_argument("seeded_randn: empty shape");
    if (!(scale > 0)) throw std::invalid_argument("seeded_randn: scale must be positive");
    Tensor t(shape);  // shape_numel rejects zero extents
    Rng rng(seed);
    for (auto& v : t.data) v = static_cast<float>(rng.next_normal() * scale);
    return t;
}

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
        throw std::invalid_argument("matmul: incompatible shapes " + av.shape_str() + " x " + bv.shape_str());
    const int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        std::vector<double> acc(static_cast<size_t>(n), 0.0);
        const float* arow = &av.data[static_cast<size_t>(i * k)];
        for (int64_t kk = 0; kk < k; ++kk) {
            const double aik = arow[kk];
            const float* brow = &bv.data[static_cast<size_t>(kk * n)];
            for (int64_t j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += aik * brow[j];
        }
        float* orow = &out.data[static_cast<size_t>(i * n)];
        for (int64_t j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[static_cast<size_t>(j)]);
    }
    ensure_finite(out, "matmul");

    return make_op(std::move(out), {a, b}, [a, b, m, k, n](ag::Node& node) {
        const Tensor& go = node.grad();
        if (a->requires_grad) {
            // grad_a = go . b^T
            Tensor& ga = a->grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < n; ++j)
                        acc += static_cast<double>(go.data[static_cast<size_t>(i * n + j)]) * b->value.data[static_cast<size_t>(kk * n + j)];
                    ga.data[static_cast<size_t>(i * k + kk)] += static_cast<float>(acc);
                }
        }
        if (b->requires_grad) {
            // grad_b = a^T . go
            Tensor& gb = b->grad();
            for (int64_t kk = 0; kk < k; ++kk)
                for (int64_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < m; ++i)
                        acc += static_cast<double>(a->value.data[static_cast<size_t>(i * k + kk)]) * go.data[static_cast<size_t>(i * n + j)];
                    gb.data[static_cast<size_t>(kk * n + j)] += static_cast<float>(acc);
                }
        }
    });
}

Var conv2d(const Var& x, const Var& kernel, int stride, int pad) {
    const Tensor& xv = x->value;
    const Tensor& kv = kernel->value;
    if (xv.rank() != 4 || kv.rank() != 4) throw std::invalid_argument("conv2d: expected 4D input and kernel");
    if (xv.shape[1] != kv.shape[1])
        throw std::invalid_argument("conv2d: channel mismatch " + xv.shape_str() + " vs " + kv.shape_str());
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    const int64_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    const int64_t F = kv.shape[0], kh = kv.shape[2], kw = kv.shape[3];
    const int64_t hnum = H + 2 * pad - kh, wnum = W + 2 * pad - kw;
    if (hnum < 0 || wnum < 0 || hnum % stride != 0 || wnum % stride != 0)
        throw std::invalid_argument("conv2d: non-integral output size for input " + xv.shape_str());
    const int64_t Ho = hnum / stride + 1, Wo = wnum / stride + 1;

    auto xat = [&](const Tensor& t, int64_t n, int64_t c, int64_t h, int64_t w) -> float {
        return t.data[static_cast<size_t>(((n * C + c) * H + h) * W + w)];
    };

    Tensor out({N, F, Ho, Wo});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t f = 0; f < F; ++f)
            for (int64_t ho = 0; ho < Ho; ++ho)
                for (int64_t wo = 0; wo < Wo; ++wo) {
                    double acc = 0.0;
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t i = 0; i < kh; ++i)
                            for (int64_t j = 0; j < kw; ++j) {
                                const int64_t h = ho * stride - pad + i;
                                const int64_t w = wo * stride - pad + j;
                                if (h < 0 || h >= H || w < 0 || w >= W) continue;
                                acc += static_cast<double>(xat(xv, n, c, h, w)) *
                                       kv.data[static_cast<size_t>(((f * C + c) * kh + i) * kw + j)];
                            }
                    out.data[static_cast<size_t>(((n * F + f) * Ho + ho) * Wo + wo)] = static_cast<float>(acc);
                }
    ensure_finite(out, "conv2d");

    return make_op(std::move(out), {x, kernel}, [x, kernel, stride, pad, N, C, H, W, F, kh, kw, Ho, Wo](ag::Node& node) {
        const Tensor& go = node.grad();
        auto gidx = [&](int64_t n, int64_t f, int64_t ho, int64_t wo) {
            return static_cast<size_t>(((n * F + f) * Ho + ho) * Wo + wo);
        };
        auto xidx = [&](int64_t n, int64_t c, int64_t h, int64_t w) {
            return static_cast<size_t>(((n * C + c) * H + h) * W + w);
        };
        auto kidx = [&](int64_t f, int64_t c, int64_t i, int64_t j) {
            return static_cast<size_t>(((f * C + c) * kh + i) * kw + j);
        };
        const bool need_x = x->requires_grad;
        const bool need_k = kernel->requires_grad;
        Tensor* gx = need_x ? &x->grad() : nullptr;
        Tensor* gk = need_k ? &kernel->grad() : nullptr;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t f = 0; f < F; ++f)
                for (int64_t ho = 0; ho < Ho; ++ho)
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        const float g = go.data[gidx(n, f, ho, wo)];
                        if (g == 0.0f) continue;
                        for (int64_t c = 0; c < C; ++c)
                            for (int64_t i = 0; i < kh; ++i)
                                for (int64_t j = 0; j < kw; ++j) {
                                    const int64_t h = ho * stride - pad + i;
                                    const int64_t w = wo * stride - pad + j;
                                    if (h < 0 || h >= H || w < 0 || w >= W) continue;
                                    if (need_x) gx->data[xidx(n, c, h, w)] += g * kernel->value.data[kidx(f, c, i, j)];
                                    if (need_k) gk->data[kidx(f, c, i, j)] += g * x->value.data[xidx(n, c, h, w)];
                                }
                    }
    });
}

Var add(const Var& a, const Var& b) {
    return binary_op(
        a, b, "add", [](float x, float y) { return x + y; },
        [](float g, float, float) { return g; }, [](float g, float, float) { return g; });
}

Var sub(const Var& a, const Var& b) {
    return binary_op(
        a, b, "sub", [](float x, float y) { return x - y; },
        [](float g, float, float) { return g; }, [](float g, float, float) { return -g; });
}

Var mul(const Var& a, const Var& b) {
    return binary_op(
        a, b, "mul", [](float x, float y) { return x * y; },
        [](float g, float, float y) { return g * y; }, [](float g, float x, float) { return g * x; });
}

Var divide(const Var& a, const Var& b) {
    for (float v : b->value.data)
        if (v == 0.0f) throw std::invalid_argument("divide: zero divisor");
    return binary_op(
        a, b, "divide", [](float x, float y) { return x / y; },
        [](float g, float, float y) { return g / y; },
        [](float g, float x, float y) { return -g * x / (y * y); });
}

Var relu(const Var& x) {
    Tensor out(x->value.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = x->value.data[i] > 0.0f ? x->value.data[i] : 0.0f;
    return make_op(std::move(out), {x}, [x](ag::Node& node) {
        const Tensor& go = node.grad();
        Tensor& gx = x->grad();
        for (int64_t i = 0; i < go.numel(); ++i)
            if (x->value.data[i] > 0.0f) gx.data[i] += go.data[i];
    });
}

Var scale(const Var& x, float c) {
    Tensor out(x->value.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = c * x->value.data[i];
    ensure_finite(out, "scale");
    return make_op(std::move(out), {x}, [x, c](ag::Node& node) {
        const Tensor& go = node.grad();
        Tensor& gx = x->grad();
        for (int64_t i = 0; i < go.numel(); ++i) gx.data[i] += c * go.data[i];
    });
}

Var sum(const Var& x) {
    double acc = 0.0;
    for (float v : x->value.data) acc += v;
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    ensure_finite(out, "sum");
    return make_op(std::move(out), {x}, [x](ag::Node& node) {
        const float g = node.grad().data[0];
        Tensor& gx = x->grad();
        for (auto& v : gx.data) v += g;
    });
}

Var reshape(const Var& x, std::vector<int64_t> new_shape) {
    if (shape_numel(new_shape) != x->value.numel())
        throw std::invalid_argument("reshape: element count mismatch " + x->value.shape_str() + " -> " +
                                    shape_to_string(new_shape));
    Tensor out;
    out.shape = std::move(new_shape);
    out.data = x->value.data;
    return make_op(std::move(out), {x}, [x](ag::Node& node) {
        const Tensor& go = node.grad();
        Tensor& gx = x->grad();
        for (int64_t i = 0; i < go.numel(); ++i) gx.data[i] += go.data[i];
    });
}

Var rsqrt_shift(const Var& v, float eps) {
    Tensor out(v->value.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        const float s = v->value.data[i] + eps;
        if (s <= 0.0f) throw std::invalid_argument("rsqrt_shift: non-positive argument");
        out.data[i] = 1.0f / std::sqrt(s);
    }
    ensure_finite(out, "rsqrt_shift");
    return make_op(std::move(out), {v}, [v, eps](ag::Node& node) {
        const Tensor& go = node.grad();
        Tensor& gv = v->grad();
        for (int64_t i = 0; i < go.numel(); ++i) {
            const double s = static_cast<double>(v->value.data[i]) + eps;
            gv.data[i] += static_cast<float>(-0.5 * go.data[i] / (s * std::sqrt(s)));
        }
    });
}

std::pair<Var, Var> moments(const Var& x, const std::vector<int>& axes) {
    const Tensor& xv = x->value;
    const size_t rank = xv.rank();
    std::vector<bool> reduced(rank, false);
    for (int a : axes) {
        if (a < 0 || static_cast<size_t>(a) >= rank) throw std::invalid_argument("moments: axis out of range");
        if (reduced[static_cast<size_t>(a)]) throw std::invalid_argument("moments: duplicate axis");
        reduced[static_cast<size_t>(a)] = true;
    }
    std::vector<int64_t> out_shape;
    for (size_t d = 0; d < rank; ++d)
        if (!reduced[d]) out_shape.push_back(xv.shape[d]);
    if (out_shape.empty()) out_shape.push_back(1);  // full reduction -> scalar

    // strides of x, and the flat output slot of every element
    std::vector<int64_t> strides(rank, 1);
    for (size_t d = rank - 1; d > 0; --d) strides[d - 1] = strides[d] * xv.shape[d];
    const int64_t out_n = shape_numel(out_shape);
    const int64_t n = xv.numel();
    const int64_t group = n / out_n;  // elements reduced per output slot

    std::vector<int64_t> slot(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int64_t rem = i, s = 0;
        for (size_t d = 0; d < rank; ++d) {
            const int64_t coord = rem / strides[d];
            rem %= strides[d];
            if (!reduced[d]) s = s * xv.shape[d] + coord;
        }
        slot[static_cast<size_t>(i)] = s;
    }

    std::vector<double> mean_acc(static_cast<size_t>(out_n), 0.0);
    for (int64_t i = 0; i < n; ++i) mean_acc[static_cast<size_t>(slot[static_cast<size_t>(i)])] += xv.data[i];
    Tensor mean_t(out_shape);
    for (int64_t s = 0; s < out_n; ++s) mean_t.data[s] = static_cast<float>(mean_acc[static_cast<size_t>(s)] / group);

    std::vector<double> var_acc(static_cast<size_t>(out_n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(xv.data[i]) - mean_t.data[slot[static_cast<size_t>(i)]];
        var_acc[static_cast<size_t>(slot[static_cast<size_t>(i)])] += d * d;
    }
    Tensor var_t(out_shape);
    for (int64_t s = 0; s < out_n; ++s) var_t.data[s] = static_cast<float>(var_acc[static_cast<size_t>(s)] / group);
    ensure_finite(mean_t, "moments");
    ensure_finite(var_t, "moments");

    // Shared backward state: both outputs pull gradient into x.
    auto slots = std::make_shared<std::vector<int64_t>>(std::move(slot));
    auto mean_back = [x, slots, group](ag::Node& node) {
        const Tensor& go = node.grad();
        Tensor& gx = x->grad();
        const float inv = 1.0f / static_cast<float>(group);
        for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += go.data[(*slots)[static_cast<size_t>(i)]] * inv;
    };
    Var mean_node = make_op(std::move(mean_t), {x}, mean_back);
    // var backward needs the mean values; capture the mean node (already computed)
    auto var_back = [x, slots, group, mean_node](ag::Node& node) {
        const Tensor& go = node.grad();
        Tensor& gx = x->grad();
        const float inv2 = 2.0f / static_cast<float>(group);
        for (int64_t i = 0; i < gx.numel(); ++i) {
            const int64_t s = (*slots)[static_cast<size_t>(i)];
            gx.data[i] += go.data[s] * inv2 * (x->value.data[i] - mean_node->value.data[s]);
        }
    };
    Var var_node = make_op(std::move(var_t), {x}, var_back);
    return {mean_node, var_node};
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Tensor& lv = logits->value;
    if (lv.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be [N,K]");
    const int64_t N = lv.shape[0], K = lv.shape[1];
    if (static_cast<int64_t>(labels.size()) != N)
        throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= K) throw std::invalid_argument("softmax_cross_entropy: label out of range");

    // keep the row softmax for the backward rule
    auto probs = std::make_shared<Tensor>(softmax_rows(lv));
    double loss_acc = 0.0;
    for (int64_t i = 0; i < N; ++i) {
        const float* row = &lv.data[static_cast<size_t>(i * K)];
        double mx = row[0];
        for (int64_t j = 1; j < K; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double lse = 0.0;
        for (int64_t j = 0; j < K; ++j) lse += std::exp(static_cast<double>(row[j]) - mx);
        lse = std::log(lse) + mx;
        loss_acc += lse - row[labels[static_cast<size_t>(i)]];
    }
    Tensor out = Tensor::scalar(static_cast<float>(loss_acc / static_cast<double>(N)));
    ensure_finite(out, "softmax_cross_entropy");

    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    return make_op(std::move(out), {logits}, [logits, probs, labels_copy, N, K](ag::Node& node) {
        const float g = node.grad().data[0];
        Tensor& gl = logits->grad();
        const float invn = 1.0f / static_cast<float>(N);
        for (int64_t i = 0; i < N; ++i)
            for (int64_t j = 0; j < K; ++j) {
                float p = probs->data[static_cast<size_t>(i * K + j)];
                if (j == (*labels_copy)[static_cast<size_t>(i)]) p -= 1.0f;
                gl.data[static_cast<size_t>(i * K + j)] += g * p * invn;
            }
    });
}

Tensor softmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax_rows: expected [N,K]");
    const int64_t N = logits.shape[0], K = logits.shape[1];
    Tensor out(logits.shape);
    for (int64_t i = 0; i < N; ++i) {
        const float* row = &logits.data[static_cast<size_t>(i * K)];
        float* orow = &out.data[static_cast<size_t>(i * K)];
        double mx = row[0];
        for (int64_t j = 1; j < K; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int64_t j = 0; j < K; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        for (int64_t j = 0; j < K; ++j)
            orow[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / denom);
    }
    return out;
}

}  // namespace retain::ops
