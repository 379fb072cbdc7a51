#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>

#include "reft/model.hpp"

namespace reft {

struct AdamWParams {
    double learning_rate = 5e-4;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <class T>
struct OptimState {
    AdamWParams hp;
    Params<T> m;  // first moments
    Params<T> v;  // second moments
    std::uint64_t step = 0;
};

template <class T>
OptimState<T> make_optimizer(const ModelState<T>& state, const AdamWParams& hp) {
    return {hp, zeros_like(state.params), zeros_like(state.params), 0};
}

/// One decoupled-weight-decay Adam update over a flat parameter block, for
/// step number `step` (1-based):
///   p <- p * (1 - lr * wd)
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
template <class T>
void adamw_update(std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v, std::uint64_t step,
                  const AdamWParams& hp) {
    if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size())
        throw std::logic_error("adamw_update: block size mismatch");
    const double t = static_cast<double>(step);
    const T bc1 = static_cast<T>(1.0 - std::pow(hp.beta1, t));
    const T bc2 = static_cast<T>(1.0 - std::pow(hp.beta2, t));
    const T lr = static_cast<T>(hp.learning_rate);
    const T decay = static_cast<T>(1.0 - hp.learning_rate * hp.weight_decay);
    const T b1 = static_cast<T>(hp.beta1), b2 = static_cast<T>(hp.beta2), eps = static_cast<T>(hp.epsilon);
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        p[i] = p[i] * decay - lr * mhat / (std::sqrt(vhat) + eps);
    }
}

/// Applies one AdamW step to every tensor trainable under the state's mask;
/// frozen tensors are not touched.
template <class T>
void optim_step(ModelState<T>& state, OptimState<T>& opt, const Params<T>& grads) {
    const bool base = base_trainable(state.mask);
    const bool adapt = adapters_trainable(state.mask);
    // Shape check before any mutation.
    visit_tensors(
        [](const std::string& name, bool, const Mat<T>& p, const Mat<T>& g, const Mat<T>& m, const Mat<T>& v) {
            if (g.rows() != p.rows() || g.cols() != p.cols() || m.size() != p.size() || v.size() != p.size())
                throw std::logic_error("optim_step: shape mismatch for " + name);
        },
        state.params, grads, opt.m, opt.v);
    ++opt.step;
    visit_tensors(
        [&](const std::string&, bool is_adapter, Mat<T>& p, const Mat<T>& g, Mat<T>& m, Mat<T>& v) {
            if (is_adapter ? !adapt : !base) return;
            const auto n = static_cast<std::size_t>(p.size());
            adamw_update<T>(std::span<T>(p.data(), n), std::span<const T>(g.data(), n), std::span<T>(m.data(), n),
                            std::span<T>(v.data(), n), opt.step, opt.hp);
        },
        state.params, grads, opt.m, opt.v);
}

}  // namespace reft
