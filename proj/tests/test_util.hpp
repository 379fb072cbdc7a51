#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "reft/corpus.hpp"
#include "reft/loss.hpp"
#include "reft/model.hpp"
#include "reft/rng.hpp"

namespace testutil {

inline reft::ModelConfig tiny_config(int vocab_size) {
    reft::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.vocab_size = vocab_size;
    c.ctx_len = 40;
    c.tap_layer = 1;
    c.adapter_rank = 2;
    return c;
}

/// Tiny model whose adapter B matrices are non-zero, so every path carries gradient.
template <class T>
reft::ModelState<T> tiny_model(const reft::ModelConfig& c, std::uint64_t seed, double b_scale = 0.3) {
    auto s = reft::init_model<T>(c, seed);
    reft::Rng r(seed + 101);
    for (auto& L : s.params.layers)
        for (auto* m : {&L.bq, &L.bk, &L.bv})
            for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = static_cast<T>(b_scale * r.normal());
    return s;
}

inline reft::CorpusSpec small_spec() {
    reft::CorpusSpec s;
    s.n_align_harmful = 40;
    s.n_align_harmless = 40;
    s.n_user = 20;
    s.poison_ratio = 0.3;
    s.n_hs_probe = 10;
    s.n_fa_test = 10;
    s.n_cls_per_class = 10;
    s.n_pretrain = 100;
    return s;
}

struct FdStats {
    double worst_rel = 0;
    std::size_t checked = 0;
};

/// Central differences on `n` randomly chosen trainable scalars.
inline FdStats fd_check(reft::ModelState<double>& st, const std::function<double()>& loss,
                        const reft::Params<double>& grads, std::size_t n, std::uint64_t seed, double h = 1e-6) {
    std::vector<std::pair<reft::Mat<double>*, const reft::Mat<double>*>> tensors;
    reft::visit_tensors(
        [&](const std::string&, bool is_adapter, reft::Mat<double>& p, const reft::Mat<double>& g) {
            const bool trainable = is_adapter ? reft::adapters_trainable(st.mask) : reft::base_trainable(st.mask);
            if (trainable) tensors.emplace_back(&p, &g);
        },
        st.params, grads);
    reft::Rng rng(seed);
    FdStats s;
    for (std::size_t k = 0; k < n; ++k) {
        auto [p, g] = tensors[rng.below(tensors.size())];
        const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(p->size())));
        const double orig = p->data()[i];
        p->data()[i] = orig + h;
        const double lp = loss();
        p->data()[i] = orig - h;
        const double lm = loss();
        p->data()[i] = orig;
        const double fd = (lp - lm) / (2 * h);
        const double an = g->data()[i];
        const double rel = std::abs(fd - an) / std::max(1e-7, std::abs(fd) + std::abs(an));
        s.worst_rel = std::max(s.worst_rel, rel);
        ++s.checked;
    }
    return s;
}

template <class T>
double params_max_abs(const reft::Params<T>& p) {
    double m = 0;
    reft::visit_tensors(
        [&](const std::string&, bool, const reft::Mat<T>& t) {
            if (t.size()) m = std::max(m, static_cast<double>(t.cwiseAbs().maxCoeff()));
        },
        p);
    return m;
}

template <class T>
bool params_equal(const reft::Params<T>& a, const reft::Params<T>& b) {
    bool eq = true;
    reft::visit_tensors(
        [&](const std::string&, bool, const reft::Mat<T>& x, const reft::Mat<T>& y) {
            eq = eq && x.rows() == y.rows() && x.cols() == y.cols() && (x.array() == y.array()).all();
        },
        a, b);
    return eq;
}

}  // namespace testutil
