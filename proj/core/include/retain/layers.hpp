#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "retain/autograd.hpp"
#include "retain/ops.hpp"
#include "retain/tensor.hpp"

namespace retain {

enum class Phase { Train, Infer };

// BatchLive: batch statistics during training, running statistics at
// inference, running buffers maintained.
// FrozenExternal: the stored statistics are used verbatim in BOTH phases and
// are never written; backward treats them as constants.
enum class StatsMode { BatchLive, FrozenExternal };

const char* stats_mode_name(StatsMode m);

struct Param {
    ag::Var var;
    bool trainable = true;
};

struct NamedParam {
    std::string name;
    Param* param;
};

struct NamedBuffer {
    std::string name;
    Tensor* tensor;
};

// Per-BN-layer capture for the variance probes.
struct BnTap {
    std::string layer;
    StatsMode mode;
    Tensor input;
    Tensor output;
    Tensor gamma;
    Tensor stats_var;  // the variance actually used to normalize
    float eps;
};

struct ForwardTrace {
    std::vector<BnTap> taps;
};

class Layer {
  public:
    virtual ~Layer() = default;
    std::string name;

    virtual ag::Var forward(const ag::Var& x, Phase phase, ForwardTrace* trace) = 0;
    virtual void collect_params(std::vector<NamedParam>&) {}
    virtual void collect_buffers(std::vector<NamedBuffer>&) {}
    virtual void init_params(uint64_t) {}
    virtual std::string descriptor_line() const = 0;
    virtual std::string kind() const = 0;
    virtual bool is_batchnorm() const { return false; }
};

class LinearLayer : public Layer {
  public:
    LinearLayer(int64_t in, int64_t out);
    ag::Var forward(const ag::Var& x, Phase phase, ForwardTrace* trace) override;
    void collect_params(std::vector<NamedParam>& out) override;
    void init_params(uint64_t seed) override;
    std::string descriptor_line() const override;
    std::string kind() const override { return "linear"; }

    int64_t in, out;
    Param weight;  // [in, out]
    Param bias;    // [out]
};

class Conv2dLayer : public Layer {
  public:
    Conv2dLayer(int64_t in_ch, int64_t out_ch, int64_t ksize, int stride, int pad);
    ag::Var forward(const ag::Var& x, Phase phase, ForwardTrace* trace) override;
    void collect_params(std::vector<NamedParam>& out) override;
    void init_params(uint64_t seed) override;
    std::string descriptor_line() const override;
    std::string kind() const override { return "conv"; }

    int64_t in_ch, out_ch, ksize;
    int stride, pad;
    Param kernel;  // [out_ch, in_ch, k, k]
    Param bias;    // [out_ch]
};

class BatchNormLayer : public Layer {
  public:
    explicit BatchNormLayer(int64_t channels, float eps = 1e-5f, float momentum = 0.9f);
    ag::Var forward(const ag::Var& x, Phase phase, ForwardTrace* trace) override;
    void collect_params(std::vector<NamedParam>& out) override;
    void collect_buffers(std::vector<NamedBuffer>& out) override;
    std::string descriptor_line() const override;
    std::string kind() const override { return "batchnorm"; }
    bool is_batchnorm() const override { return true; }

    // Convex running update with momentum; rejected in FrozenExternal mode.
    void update_running_stats(const Tensor& batch_mean, const Tensor& batch_var);

    int64_t channels;
    float eps;
    float momentum;
    StatsMode mode = StatsMode::BatchLive;
    Param gamma;  // [C], init 1
    Param beta;   // [C], init 0
    Tensor running_mean;  // [C], init 0
    Tensor running_var;   // [C], init 1
};

class ReluLayer : public Layer {
  public:
    ag::Var forward(const ag::Var& x, Phase phase, ForwardTrace* trace) override;
    std::string descriptor_line() const override { return "relu"; }
    std::string kind() const override { return "relu"; }
};

class DropoutLayer : public Layer {
  public:
    explicit DropoutLayer(float p);
    ag::Var forward(const ag::Var& x, Phase phase, ForwardTrace* trace) override;
    std::string descriptor_line() const override;
    std::string kind() const override { return "dropout"; }

    // Masks come from a counter-based stream so one run seed reproduces the
    // whole run; fresh mask per training-phase forward.
    void set_stream(uint64_t seed);

    float p;
    uint64_t stream_seed = 0;
    uint64_t calls = 0;
};

class FlattenLayer : public Layer {
  public:
    ag::Var forward(const ag::Var& x, Phase phase, ForwardTrace* trace) override;
    std::string descriptor_line() const override { return "flatten"; }
    std::string kind() const override { return "flatten"; }
};

class Network {
  public:
    Network() = default;
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    void add(std::unique_ptr<Layer> layer);

    ag::Var forward(const Tensor& batch, Phase phase, ForwardTrace* trace = nullptr);
    Tensor penultimate_features(const Tensor& batch, Phase phase);

    std::vector<NamedParam> named_params();
    std::vector<NamedBuffer> named_buffers();
    std::map<std::string, Tensor> state();
    // Replaces parameter and buffer values; throws naming the tensor on any
    // missing entry or shape mismatch.
    void set_state(const std::map<std::string, Tensor>& s);

    void init(uint64_t seed);                 // parameter init + dropout streams
    void set_dropout_streams(uint64_t seed);  // dropout streams only
    void zero_grad();

    std::string descriptor() const;
    static Network from_descriptor(const std::string& text);

    std::vector<BatchNormLayer*> batchnorm_layers();

    std::vector<int64_t> input_shape;  // per-sample shape, e.g. {1,28,28} or {784}
    std::vector<std::unique_ptr<Layer>> layers;
};

// Marks every non-BN parameter untrainable and every BN gamma/beta trainable.
// Values are untouched; gradients still flow through frozen layers.
void freeze_non_bn(Network& net);

// Switches every BN layer to FrozenExternal. With `src_state` given, running
// statistics are replaced by the source's (congruence checked); with nullptr
// the layer's own current statistics become the frozen ones.
void set_stats_source(Network& net, const std::map<std::string, Tensor>* src_state);

Network make_mlp_bn(std::vector<int64_t> input_shape, const std::vector<int64_t>& hidden, int64_t classes,
                    float dropout_p = 0.0f);
Network make_cnn_bn(std::vector<int64_t> input_shape, int64_t classes, float dropout_p = 0.0f);

}  // namespace retain
