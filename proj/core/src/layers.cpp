#include "retain/layers.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "retain/rng.hpp"

namespace retain {

namespace {

std::string fmt_f32(float v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
}

int64_t channel_extent_of(const Tensor& t, const std::string& layer) {
    if (t.rank() == 2 || t.rank() == 4) return t.shape[1];
    throw std::invalid_argument(layer + ": expected [N,C] or [N,C,H,W] input, got " + t.shape_str());
}

}  // namespace

const char* stats_mode_name(StatsMode m) { return m == StatsMode::BatchLive ? "live" : "frozen"; }

// ---- Linear ----------------------------------------------------------------

LinearLayer::LinearLayer(int64_t in_, int64_t out_) : in(in_), out(out_) {
    weight.var = ag::leaf(Tensor({in, out}), true);
    bias.var = ag::leaf(Tensor({out}), true);
}

ag::Var LinearLayer::forward(const ag::Var& x, Phase, ForwardTrace*) {
    if (x->value.rank() != 2 || x->value.shape[1] != in)
        throw std::invalid_argument(name + ": expected [N," + std::to_string(in) + "], got " + x->value.shape_str());
    return ops::add(ops::matmul(x, weight.var), bias.var);
}

void LinearLayer::collect_params(std::vector<NamedParam>& out_params) {
    out_params.push_back({name + ".weight", &weight});
    out_params.push_back({name + ".bias", &bias});
}

void LinearLayer::init_params(uint64_t seed) {
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    weight.var->value = ops::seeded_randn({in, out}, mix_seeds(seed, 1), scale);
    bias.var->value = Tensor({out}, 0.0f);
}

std::string LinearLayer::descriptor_line() const {
    return "linear " + std::to_string(in) + " " + std::to_string(out);
}

// ---- Conv2d ----------------------------------------------------------------

Conv2dLayer::Conv2dLayer(int64_t in_ch_, int64_t out_ch_, int64_t ksize_, int stride_, int pad_)
    : in_ch(in_ch_), out_ch(out_ch_), ksize(ksize_), stride(stride_), pad(pad_) {
    kernel.var = ag::leaf(Tensor({out_ch, in_ch, ksize, ksize}), true);
    bias.var = ag::leaf(Tensor({out_ch}), true);
}

ag::Var Conv2dLayer::forward(const ag::Var& x, Phase, ForwardTrace*) {
    return ops::add(ops::conv2d(x, kernel.var, stride, pad), bias.var);
}

void Conv2dLayer::collect_params(std::vector<NamedParam>& out_params) {
    out_params.push_back({name + ".kernel", &kernel});
    out_params.push_back({name + ".bias", &bias});
}

void Conv2dLayer::init_params(uint64_t seed) {
    const double scale = std::sqrt(2.0 / static_cast<double>(in_ch * ksize * ksize));
    kernel.var->value = ops::seeded_randn({out_ch, in_ch, ksize, ksize}, mix_seeds(seed, 1), scale);
    bias.var->value = Tensor({out_ch}, 0.0f);
}

std::string Conv2dLayer::descriptor_line() const {
    std::ostringstream os;
    os << "conv " << in_ch << " " << out_ch << " " << ksize << " stride=" << stride << " pad=" << pad;
    return os.str();
}

// ---- BatchNorm -------------------------------------------------------------

BatchNormLayer::BatchNormLayer(int64_t channels_, float eps_, float momentum_)
    : channels(channels_), eps(eps_), momentum(momentum_) {
    gamma.var = ag::leaf(Tensor({channels}, 1.0f), true);
    beta.var = ag::leaf(Tensor({channels}, 0.0f), true);
    running_mean = Tensor({channels}, 0.0f);
    running_var = Tensor({channels}, 1.0f);
}

ag::Var BatchNormLayer::forward(const ag::Var& x, Phase phase, ForwardTrace* trace) {
    if (channel_extent_of(x->value, name) != channels)
        throw std::invalid_argument(name + ": channel mismatch, layer has " + std::to_string(channels) +
                                    ", input is " + x->value.shape_str());

    ag::Var mean, var;
    Tensor used_var;
    const bool live_train = mode == StatsMode::BatchLive && phase == Phase::Train;
    if (live_train) {
        if (x->value.shape[0] < 2)
            throw std::invalid_argument(name + ": BatchLive training needs batch size >= 2, got " +
                                        std::to_string(x->value.shape[0]));
        std::vector<int> axes = x->value.rank() == 2 ? std::vector<int>{0} : std::vector<int>{0, 2, 3};
        auto mv = ops::moments(x, axes);
        mean = mv.first;
        var = mv.second;
        used_var = var->value;
    } else {
        mean = ag::constant(running_mean);
        var = ag::constant(running_var);
        used_var = running_var;
    }

    ag::Var inv_std = ops::rsqrt_shift(var, eps);
    ag::Var xhat = ops::mul(ops::sub(x, mean), inv_std);
    ag::Var y = ops::add(ops::mul(xhat, gamma.var), beta.var);

    if (live_train) update_running_stats(mean->value, var->value);

    if (trace) trace->taps.push_back({name, mode, x->value, y->value, gamma.var->value, used_var, eps});
    return y;
}

void BatchNormLayer::update_running_stats(const Tensor& batch_mean, const Tensor& batch_var) {
    if (mode == StatsMode::FrozenExternal)
        throw std::logic_error(name + ": running statistics are frozen; update forbidden");
    if (!batch_mean.same_shape(running_mean) || !batch_var.same_shape(running_var))
        throw std::invalid_argument(name + ": batch statistics shape mismatch");
    for (int64_t c = 0; c < channels; ++c) {
        running_mean.data[c] = momentum * running_mean.data[c] + (1.0f - momentum) * batch_mean.data[c];
        running_var.data[c] = momentum * running_var.data[c] + (1.0f - momentum) * batch_var.data[c];
    }
}

void BatchNormLayer::collect_params(std::vector<NamedParam>& out_params) {
    out_params.push_back({name + ".gamma", &gamma});
    out_params.push_back({name + ".beta", &beta});
}

void BatchNormLayer::collect_buffers(std::vector<NamedBuffer>& out_buffers) {
    out_buffers.push_back({name + ".running_mean", &running_mean});
    out_buffers.push_back({name + ".running_var", &running_var});
}

std::string BatchNormLayer::descriptor_line() const {
    std::ostringstream os;
    os << "batchnorm " << channels << " eps=" << fmt_f32(eps) << " momentum=" << fmt_f32(momentum)
       << " mode=" << stats_mode_name(mode);
    return os.str();
}

// ---- ReLU / Dropout / Flatten ----------------------------------------------

ag::Var ReluLayer::forward(const ag::Var& x, Phase, ForwardTrace*) { return ops::relu(x); }

DropoutLayer::DropoutLayer(float p_) : p(p_) {
    if (p < 0.0f || p >= 1.0f) throw std::invalid_argument("dropout: p must be in [0,1)");
}

void DropoutLayer::set_stream(uint64_t seed) {
    stream_seed = seed;
    calls = 0;
}

ag::Var DropoutLayer::forward(const ag::Var& x, Phase phase, ForwardTrace*) {
    if (phase == Phase::Infer || p == 0.0f) return x;
    Rng rng(mix_seeds(stream_seed, calls++));
    Tensor mask(x->value.shape);
    const float keep_scale = 1.0f / (1.0f - p);
    for (auto& v : mask.data) v = rng.next_uniform() < p ? 0.0f : keep_scale;
    return ops::mul(x, ag::constant(std::move(mask)));
}

std::string DropoutLayer::descriptor_line() const { return "dropout p=" + fmt_f32(p); }

ag::Var FlattenLayer::forward(const ag::Var& x, Phase, ForwardTrace*) {
    if (x->value.rank() == 2) return x;
    int64_t flat = 1;
    for (size_t d = 1; d < x->value.rank(); ++d) flat *= x->value.shape[d];
    return ops::reshape(x, {x->value.shape[0], flat});
}

// ---- Network ---------------------------------------------------------------

void Network::add(std::unique_ptr<Layer> layer) {
    layer->name = layer->kind() + std::to_string(layers.size());
    layers.push_back(std::move(layer));
}

ag::Var Network::forward(const Tensor& batch, Phase phase, ForwardTrace* trace) {
    if (batch.rank() < 2) throw std::invalid_argument("network forward: batch must have a leading N axis");
    std::vector<int64_t> sample_shape(batch.shape.begin() + 1, batch.shape.end());
    if (!input_shape.empty() && sample_shape != input_shape)
        throw std::invalid_argument("network forward: sample shape " + shape_to_string(sample_shape) +
                                    " does not match expected " + shape_to_string(input_shape));
    ag::Var h = ag::constant(batch);
    for (auto& layer : layers) h = layer->forward(h, phase, trace);
    return h;
}

Tensor Network::penultimate_features(const Tensor& batch, Phase phase) {
    if (layers.size() < 2) throw std::logic_error("penultimate_features: network needs at least 2 layers");
    ag::Var h = ag::constant(batch);
    for (size_t i = 0; i + 1 < layers.size(); ++i) h = layers[i]->forward(h, phase, nullptr);
    return h->value;
}

std::vector<NamedParam> Network::named_params() {
    std::vector<NamedParam> out;
    for (auto& layer : layers) layer->collect_params(out);
    return out;
}

std::vector<NamedBuffer> Network::named_buffers() {
    std::vector<NamedBuffer> out;
    for (auto& layer : layers) layer->collect_buffers(out);
    return out;
}

std::map<std::string, Tensor> Network::state() {
    std::map<std::string, Tensor> s;
    for (auto& p : named_params()) s[p.name] = p.param->var->value;
    for (auto& b : named_buffers()) s[b.name] = *b.tensor;
    return s;
}

void Network::set_state(const std::map<std::string, Tensor>& s) {
    auto fetch = [&](const std::string& name, const Tensor& current) -> const Tensor& {
        auto it = s.find(name);
        if (it == s.end()) throw std::invalid_argument("set_state: missing tensor " + name);
        if (it->second.shape != current.shape)
            throw std::invalid_argument("set_state: shape mismatch for " + name + ": expected " + current.shape_str() +
                                        ", got " + it->second.shape_str());
        return it->second;
    };
    for (auto& p : named_params()) {
        p.param->var->value = fetch(p.name, p.param->var->value);
        p.param->var->zero_grad();
    }
    for (auto& b : named_buffers()) *b.tensor = fetch(b.name, *b.tensor);
}

void Network::init(uint64_t seed) {
    for (size_t i = 0; i < layers.size(); ++i) layers[i]->init_params(mix_seeds(seed, i));
    set_dropout_streams(mix_seeds(seed, 0x6472u));
}

void Network::set_dropout_streams(uint64_t seed) {
    for (size_t i = 0; i < layers.size(); ++i)
        if (auto* d = dynamic_cast<DropoutLayer*>(layers[i].get())) d->set_stream(mix_seeds(seed, i));
}

void Network::zero_grad() {
    for (auto& p : named_params()) p.param->var->zero_grad();
}

std::string Network::descriptor() const {
    std::ostringstream os;
    os << "retain-arch v1\ninput";
    for (int64_t d : input_shape) os << " " << d;
    os << "\n";
    for (const auto& layer : layers) os << layer->descriptor_line() << "\n";
    return os.str();
}

std::vector<BatchNormLayer*> Network::batchnorm_layers() {
    std::vector<BatchNormLayer*> out;
    for (auto& layer : layers)
        if (auto* bn = dynamic_cast<BatchNormLayer*>(layer.get())) out.push_back(bn);
    return out;
}

namespace {

// "key=value" -> value, throwing when the key differs
std::string expect_kv(const std::string& token, const std::string& key) {
    auto pos = token.find('=');
    if (pos == std::string::npos || token.substr(0, pos) != key)
        throw std::invalid_argument("architecture descriptor: expected " + key + "=..., got '" + token + "'");
    return token.substr(pos + 1);
}

}  // namespace

Network Network::from_descriptor(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "retain-arch v1")
        throw std::invalid_argument("architecture descriptor: bad header '" + line + "'");

    Network net;
    bool have_input = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string word, tok;
        ls >> word;
        std::vector<std::string> toks;
        while (ls >> tok) toks.push_back(tok);

        if (word == "input") {
            net.input_shape.clear();
            for (const auto& t : toks) net.input_shape.push_back(std::stoll(t));
            have_input = true;
        } else if (word == "linear") {
            if (toks.size() != 2) throw std::invalid_argument("descriptor: bad linear line '" + line + "'");
            net.add(std::make_unique<LinearLayer>(std::stoll(toks[0]), std::stoll(toks[1])));
        } else if (word == "conv") {
            if (toks.size() != 5) throw std::invalid_argument("descriptor: bad conv line '" + line + "'");
            net.add(std::make_unique<Conv2dLayer>(std::stoll(toks[0]), std::stoll(toks[1]), std::stoll(toks[2]),
                                                  std::stoi(expect_kv(toks[3], "stride")),
                                                  std::stoi(expect_kv(toks[4], "pad"))));
        } else if (word == "batchnorm") {
            if (toks.size() != 4) throw std::invalid_argument("descriptor: bad batchnorm line '" + line + "'");
            auto bn = std::make_unique<BatchNormLayer>(std::stoll(toks[0]), std::stof(expect_kv(toks[1], "eps")),
                                                       std::stof(expect_kv(toks[2], "momentum")));
            const std::string mode = expect_kv(toks[3], "mode");
            if (mode == "live")
                bn->mode = StatsMode::BatchLive;
            else if (mode == "frozen")
                bn->mode = StatsMode::FrozenExternal;
            else
                throw std::invalid_argument("descriptor: unknown batchnorm mode '" + mode + "'");
            net.add(std::move(bn));
        } else if (word == "relu") {
            net.add(std::make_unique<ReluLayer>());
        } else if (word == "dropout") {
            if (toks.size() != 1) throw std::invalid_argument("descriptor: bad dropout line '" + line + "'");
            net.add(std::make_unique<DropoutLayer>(std::stof(expect_kv(toks[0], "p"))));
        } else if (word == "flatten") {
            net.add(std::make_unique<FlattenLayer>());
        } else {
            throw std::invalid_argument("architecture descriptor: unknown layer '" + word + "'");
        }
    }
    if (!have_input) throw std::invalid_argument("architecture descriptor: missing input line");
    return net;
}

void freeze_non_bn(Network& net) {
    for (auto& layer : net.layers) {
        std::vector<NamedParam> ps;
        layer->collect_params(ps);
        const bool keep = layer->is_batchnorm();
        for (auto& p : ps) p.param->trainable = keep;
    }
}

void set_stats_source(Network& net, const std::map<std::string, Tensor>* src_state) {
    auto bns = net.batchnorm_layers();
    if (src_state) {
        // congruence first, then copy, so a mismatch leaves the net untouched
        size_t src_stat_entries = 0;
        for (const auto& [k, v] : *src_state)
            if (k.ends_with(".running_mean") || k.ends_with(".running_var")) src_stat_entries++;
        if (src_stat_entries != 2 * bns.size())
            throw std::invalid_argument("set_stats_source: source has " + std::to_string(src_stat_entries) +
                                        " BN stat tensors, network expects " + std::to_string(2 * bns.size()));
        for (auto* bn : bns) {
            auto mit = src_state->find(bn->name + ".running_mean");
            auto vit = src_state->find(bn->name + ".running_var");
            if (mit == src_state->end() || vit == src_state->end())
                throw std::invalid_argument("set_stats_source: source missing statistics for " + bn->name);
            if (mit->second.shape != bn->running_mean.shape || vit->second.shape != bn->running_var.shape)
                throw std::invalid_argument("set_stats_source: channel mismatch for " + bn->name);
        }
        for (auto* bn : bns) {
            bn->running_mean = src_state->at(bn->name + ".running_mean");
            bn->running_var = src_state->at(bn->name + ".running_var");
        }
    }
    for (auto* bn : bns) bn->mode = StatsMode::FrozenExternal;
}

Network make_mlp_bn(std::vector<int64_t> input_shape, const std::vector<int64_t>& hidden, int64_t classes,
                    float dropout_p) {
    Network net;
    net.input_shape = std::move(input_shape);
    int64_t width = 1;
    for (int64_t d : net.input_shape) width *= d;
    if (net.input_shape.size() > 1) net.add(std::make_unique<FlattenLayer>());
    for (int64_t h : hidden) {
        net.add(std::make_unique<LinearLayer>(width, h));
        net.add(std::make_unique<BatchNormLayer>(h));
        net.add(std::make_unique<ReluLayer>());
        width = h;
    }
    if (dropout_p > 0.0f) net.add(std::make_unique<DropoutLayer>(dropout_p));
    net.add(std::make_unique<LinearLayer>(width, classes));
    return net;
}

Network make_cnn_bn(std::vector<int64_t> input_shape, int64_t classes, float dropout_p) {
    if (input_shape.size() != 3) throw std::invalid_argument("make_cnn_bn: input shape must be [C,H,W]");
    Network net;
    const int64_t C = input_shape[0], H = input_shape[1], W = input_shape[2];
    net.input_shape = std::move(input_shape);
    net.add(std::make_unique<Conv2dLayer>(C, 8, 3, 1, 1));
    net.add(std::make_unique<BatchNormLayer>(8));
    net.add(std::make_unique<ReluLayer>());
    // 4x4 stride-2 keeps the output extent integral for even inputs
    net.add(std::make_unique<Conv2dLayer>(8, 16, 4, 2, 1));
    net.add(std::make_unique<BatchNormLayer>(16));
    net.add(std::make_unique<ReluLayer>());
    net.add(std::make_unique<FlattenLayer>());
    if (dropout_p > 0.0f) net.add(std::make_unique<DropoutLayer>(dropout_p));
    const int64_t Ho = (H + 2 - 4) / 2 + 1, Wo = (W + 2 - 4) / 2 + 1;
    net.add(std::make_unique<LinearLayer>(16 * Ho * Wo, classes));
    return net;
}

}  // namespace retain
