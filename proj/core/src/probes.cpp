#include "retain/probes.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace retain {

namespace {

// per-channel biased variance of an [N,C] or [N,C,H,W] tensor
std::vector<double> channel_variance(const Tensor& t) {
    const int64_t channels = t.shape[1];
    const int64_t inner = t.rank() == 4 ? t.shape[2] * t.shape[3] : 1;
    const int64_t n = t.numel();
    const int64_t per_channel = n / channels;
    std::vector<double> mean(static_cast<size_t>(channels), 0.0), var(static_cast<size_t>(channels), 0.0);
    for (int64_t i = 0; i < n; ++i) mean[static_cast<size_t>((i / inner) % channels)] += t.data[i];
    for (auto& m : mean) m /= static_cast<double>(per_channel);
    for (int64_t i = 0; i < n; ++i) {
        const size_t c = static_cast<size_t>((i / inner) % channels);
        const double d = t.data[i] - mean[c];
        var[c] += d * d;
    }
    for (auto& v : var) v /= static_cast<double>(per_channel);
    return var;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

VarianceProbeReport bn_variance_probe(Network& net, const LabeledDataset& probe_batch, int64_t min_batch) {
    if (probe_batch.size() < min_batch)
        throw std::invalid_argument("bn_variance_probe: probe batch of " + std::to_string(probe_batch.size()) +
                                    " is below the floor of " + std::to_string(min_batch));
    ForwardTrace trace;
    net.forward(probe_batch.images, Phase::Infer, &trace);

    VarianceProbeReport report;
    report.batch_provenance = probe_batch.provenance;
    for (const auto& tap : trace.taps) {
        const auto in_var = channel_variance(tap.input);
        const auto out_var = channel_variance(tap.output);
        for (int64_t c = 0; c < static_cast<int64_t>(in_var.size()); ++c) {
            const double g = tap.gamma.data[static_cast<size_t>(c)];
            const double denom = static_cast<double>(tap.stats_var.data[static_cast<size_t>(c)]) + tap.eps;
            report.rows.push_back({tap.layer, c, tap.mode, out_var[static_cast<size_t>(c)],
                                   g * g * in_var[static_cast<size_t>(c)] / denom});
        }
    }
    return report;
}

void VarianceProbeReport::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "layer,channel,mode,measured_var,theory_var\n";
    for (const auto& r : rows)
        out << r.layer << "," << r.channel << "," << stats_mode_name(r.mode) << "," << fmt_double(r.measured_var)
            << "," << fmt_double(r.theory_var) << "\n";
    if (!out) throw std::runtime_error("write failed for " + path);
}

void export_penultimate_features(Network& net, const LabeledDataset& dataset, const std::string& path) {
    if (net.layers.size() < 2) throw std::logic_error("export_penultimate_features: network needs >= 2 layers");
    Tensor feats = net.penultimate_features(dataset.images, Phase::Infer);
    if (feats.rank() != 2) {
        int64_t flat = 1;
        for (size_t d = 1; d < feats.rank(); ++d) flat *= feats.shape[d];
        std::vector<int64_t> shape{feats.shape[0], flat};
        feats.shape = shape;
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "label";
    for (int64_t j = 0; j < feats.shape[1]; ++j) out << ",f" << j;
    out << "\n";
    for (int64_t i = 0; i < feats.shape[0]; ++i) {
        out << dataset.labels[static_cast<size_t>(i)];
        for (int64_t j = 0; j < feats.shape[1]; ++j)
            out << "," << fmt_double(feats.data[static_cast<size_t>(i * feats.shape[1] + j)]);
        out << "\n";
    }
    if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace retain
