#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "retain/autograd.hpp"
#include "retain/layers.hpp"

namespace testutil {

// L2-norm relative error between an analytic gradient and a central
// finite-difference estimate, maximized over the given parameters. The loss
// builder must recompute the forward pass from the parameters' current
// values on every call.
inline double fd_gradient_error(const std::function<retain::ag::Var()>& build_loss,
                                const std::vector<retain::ag::Var>& params, double step = 1e-3) {
    using retain::ag::Var;

    for (const Var& p : params) p->zero_grad();
    Var loss = build_loss();
    retain::ag::backward(loss);
    std::vector<std::vector<float>> analytic;
    for (const Var& p : params) analytic.push_back(p->grad().data);

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const Var& p = params[pi];
        std::vector<double> fd(p->value.data.size());
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            const float saved = p->value.data[i];
            p->value.data[i] = static_cast<float>(saved + step);
            const double up = build_loss()->value.data[0];
            p->value.data[i] = static_cast<float>(saved - step);
            const double down = build_loss()->value.data[0];
            p->value.data[i] = saved;
            fd[i] = (up - down) / (2.0 * step);
        }
        double diff2 = 0.0, a2 = 0.0, f2 = 0.0;
        for (size_t i = 0; i < fd.size(); ++i) {
            const double d = static_cast<double>(analytic[pi][i]) - fd[i];
            diff2 += d * d;
            a2 += static_cast<double>(analytic[pi][i]) * analytic[pi][i];
            f2 += fd[i] * fd[i];
        }
        const double denom = std::max({std::sqrt(a2), std::sqrt(f2), 1e-12});
        worst = std::max(worst, std::sqrt(diff2) / denom);
    }
    return worst;
}

inline std::vector<retain::ag::Var> trainable_vars(retain::Network& net) {
    std::vector<retain::ag::Var> out;
    for (auto& p : net.named_params())
        if (p.param->trainable) out.push_back(p.param->var);
    return out;
}

// unique scratch directory under the build tree
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("retain_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline bool files_identical(const std::filesystem::path& a, const std::filesystem::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return sa == sb;
}

}  // namespace testutil
