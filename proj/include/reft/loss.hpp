#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "reft/corpus.hpp"
#include "reft/model.hpp"

namespace reft {

/// A model input with the range of positions whose next-token prediction is
/// scored. Positions [target_begin, size-1) predict tokens[i+1].
struct TokenSequence {
    std::vector<int> tokens;
    std::size_t target_begin = 0;
    std::size_t feature_pos = 0;  // last input token before any response token

    std::size_t n_targets() const { return tokens.size() - 1 - target_begin; }
};

/// BOS prompt SEP: the input whose final position (SEP) carries the prompt feature.
inline std::vector<int> prompt_input(const SpecialIds& sp, const std::vector<int>& prompt) {
    std::vector<int> t;
    t.reserve(prompt.size() + 2);
    t.push_back(sp.bos);
    t.insert(t.end(), prompt.begin(), prompt.end());
    t.push_back(sp.sep);
    return t;
}

/// BOS prompt SEP response EOS, scored on the response and EOS only.
inline TokenSequence make_sequence(const SpecialIds& sp, const Example& ex) {
    TokenSequence s;
    s.tokens = prompt_input(sp, ex.prompt);
    s.feature_pos = s.tokens.size() - 1;
    s.target_begin = s.feature_pos;
    s.tokens.insert(s.tokens.end(), ex.response.begin(), ex.response.end());
    s.tokens.push_back(sp.eos);
    return s;
}

/// BOS text EOS, scored on every position (plain language modeling).
inline TokenSequence make_lm_sequence(const SpecialIds& sp, const std::vector<int>& text) {
    TokenSequence s;
    s.tokens.reserve(text.size() + 2);
    s.tokens.push_back(sp.bos);
    s.tokens.insert(s.tokens.end(), text.begin(), text.end());
    s.tokens.push_back(sp.eos);
    s.target_begin = 0;
    s.feature_pos = 0;
    return s;
}

struct CosineError : std::domain_error {
    using std::domain_error::domain_error;
};

inline constexpr double kMinNorm = 1e-12;

/// a.b / (|a||b|), clamped to [-1, 1].
template <class T>
T cosine_similarity(const Vec<T>& a, const Vec<T>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: size mismatch");
    const T na = a.norm(), nb = b.norm();
    if (!(na >= static_cast<T>(kMinNorm)) || !(nb >= static_cast<T>(kMinNorm)))
        throw CosineError("cosine_similarity: degenerate vector");
    const T c = a.dot(b) / (na * nb);
    return std::clamp(c, T(-1), T(1));
}

/// Per-sequence weights of the three loss terms. A term contributes
///   ce_weight  * CE  (mean token cross-entropy over scored positions)
///   reg_weight * |1 - reg_target * CS(feature, R)|
///   kd_weight  * KL  (mean over scored positions of KL(teacher^T || student^T))
template <class T>
struct LossItem {
    const TokenSequence* seq = nullptr;
    T ce_weight = 0;
    T reg_weight = 0;
    int reg_target = 1;  // +1 pulls the feature toward R, -1 away from it
    T kd_weight = 0;
    const Mat<T>* teacher_logits = nullptr;  // n_targets x vocab
};

template <class T>
struct LossContext {
    const Vec<T>* refusal = nullptr;
    int tap_layer = 1;
    T temperature = 1;
};

template <class T>
struct LossResult {
    T total = 0;
    std::vector<T> ce;   // raw per-item values, before weighting
    std::vector<T> cos;  // NaN when the item has no regularizer
    std::vector<T> reg;
    std::vector<T> kl;
    Params<T> grads;
};

namespace detail {

template <class T>
Vec<T> log_softmax(const Eigen::Ref<const Vec<T>>& z, T temperature) {
    Vec<T> s = z / temperature;
    const T mx = s.maxCoeff();
    const T lse = mx + std::log((s.array() - mx).exp().sum());
    return s.array() - lse;
}

}  // namespace detail

/// Evaluates a weighted sum of loss terms over a batch and, optionally, its
/// exact gradient w.r.t. the trainable parameters of `state`.
template <class T>
LossResult<T> lm_loss_and_grads(const ModelState<T>& state, const std::vector<LossItem<T>>& items,
                                const LossContext<T>& ctx, bool want_grads = true,
                                const ForwardResult<T>* precomputed = nullptr) {
    if (items.empty()) throw std::invalid_argument("lm_loss_and_grads: empty batch");
    if (!(ctx.temperature > T(0))) throw std::invalid_argument("temperature must be positive");
    const auto V = static_cast<Eigen::Index>(state.config.vocab_size);
    std::vector<const std::vector<int>*> seqs;
    bool any_reg = false;
    for (const auto& it : items) {
        if (!it.seq) throw std::invalid_argument("loss item without sequence");
        if (it.seq->n_targets() == 0 && (it.ce_weight != T(0) || it.kd_weight != T(0)))
            throw std::invalid_argument("loss item has no scored positions");
        if (it.reg_weight != T(0)) {
            any_reg = true;
            if (!ctx.refusal) throw std::invalid_argument("regularizer term requested without a refusal feature");
            if (it.reg_target != 1 && it.reg_target != -1) throw std::invalid_argument("reg_target must be +1 or -1");
        }
        if (it.kd_weight != T(0)) {
            if (!it.teacher_logits) throw std::invalid_argument("distillation term requested without teacher logits");
            if (it.teacher_logits->rows() != static_cast<Eigen::Index>(it.seq->n_targets()) ||
                it.teacher_logits->cols() != V)
                throw std::invalid_argument("teacher logits shape mismatch");
        }
        seqs.push_back(&it.seq->tokens);
    }
    if (any_reg && (ctx.tap_layer < 1 || ctx.tap_layer > state.config.n_layers))
        throw std::invalid_argument("tap layer out of range");

    ForwardResult<T> own;
    if (!precomputed) own = forward_batch(state, seqs, want_grads);
    const ForwardResult<T>& fw = precomputed ? *precomputed : own;
    if (fw.offsets.size() != items.size()) throw std::invalid_argument("precomputed forward does not match the batch");
    if (want_grads && fw.layers.empty()) throw std::invalid_argument("gradients need a cached forward pass");
    const auto N = fw.logits.rows();

    LossResult<T> res;
    const std::size_t n_items = items.size();
    res.ce.assign(n_items, T(0));
    res.cos.assign(n_items, std::numeric_limits<T>::quiet_NaN());
    res.reg.assign(n_items, T(0));
    res.kl.assign(n_items, T(0));

    Mat<T> d_logits;
    std::vector<Mat<T>> d_hidden;
    if (want_grads) {
        d_logits = Mat<T>::Zero(N, V);
        if (any_reg) {
            d_hidden.resize(static_cast<std::size_t>(ctx.tap_layer) + 1);
            d_hidden[static_cast<std::size_t>(ctx.tap_layer)] = Mat<T>::Zero(N, state.config.d_model);
        }
    }

    const T temp = ctx.temperature;
    T total = 0;
    for (std::size_t i = 0; i < n_items; ++i) {
        const auto& it = items[i];
        const auto& seq = *it.seq;
        const auto off = static_cast<Eigen::Index>(fw.offsets[i]);
        const std::size_t n_t = seq.n_targets();

        if (it.ce_weight != T(0)) {
            T ce = 0;
            for (std::size_t k = 0; k < n_t; ++k) {
                const auto row = off + static_cast<Eigen::Index>(seq.target_begin + k);
                const int target = seq.tokens[seq.target_begin + k + 1];
                const Vec<T> lp = detail::log_softmax<T>(fw.logits.row(row), T(1));
                ce -= lp(target);
                if (want_grads) {
                    const T w = it.ce_weight / static_cast<T>(n_t);
                    d_logits.row(row) += w * lp.array().exp().matrix();
                    d_logits(row, target) -= w;
                }
            }
            res.ce[i] = ce / static_cast<T>(n_t);
            total += it.ce_weight * res.ce[i];
        }

        if (it.kd_weight != T(0)) {
            T kl = 0;
            for (std::size_t k = 0; k < n_t; ++k) {
                const auto row = off + static_cast<Eigen::Index>(seq.target_begin + k);
                const Vec<T> lps = detail::log_softmax<T>(fw.logits.row(row), temp);
                const Vec<T> lpt = detail::log_softmax<T>(it.teacher_logits->row(static_cast<Eigen::Index>(k)), temp);
                const Vec<T> pt = lpt.array().exp();
                kl += (pt.array() * (lpt.array() - lps.array())).sum();
                if (want_grads) {
                    const T w = it.kd_weight / (static_cast<T>(n_t) * temp);
                    d_logits.row(row) += w * (lps.array().exp() - pt.array()).matrix();
                }
            }
            res.kl[i] = kl / static_cast<T>(n_t);
            total += it.kd_weight * res.kl[i];
        }

        if (it.reg_weight != T(0)) {
            const auto row = off + static_cast<Eigen::Index>(seq.feature_pos);
            const Vec<T> f = fw.hidden[static_cast<std::size_t>(ctx.tap_layer)].row(row);
            const Vec<T>& R = *ctx.refusal;
            const T cs = cosine_similarity<T>(f, R);
            const T s = static_cast<T>(it.reg_target);
            const T gap = T(1) - s * cs;  // >= 0 since |cs| <= 1
            res.cos[i] = cs;
            res.reg[i] = std::abs(gap);
            total += it.reg_weight * res.reg[i];
            if (want_grads && gap > T(0)) {
                const T nf = f.norm(), nr = R.norm();
                const T raw = f.dot(R) / (nf * nr);
                const Vec<T> dcs = R / (nf * nr) - raw * f / (nf * nf);
                d_hidden[static_cast<std::size_t>(ctx.tap_layer)].row(row) += (-s * it.reg_weight) * dcs;
            }
        }
    }
    res.total = total;
    if (want_grads) res.grads = backward(state, fw, d_logits, d_hidden);
    return res;
}

/// Hidden state at `layer` for the last input token of BOS prompt SEP.
template <class T>
Vec<T> last_token_feature(const ModelState<T>& state, const SpecialIds& sp, const std::vector<int>& prompt, int layer) {
    if (prompt.empty()) throw std::invalid_argument("last_token_feature: empty prompt");
    if (layer < 0 || layer > state.config.n_layers) throw std::invalid_argument("layer out of range");
    const auto input = prompt_input(sp, prompt);
    const auto fw = forward(state, input);
    return fw.hidden[static_cast<std::size_t>(layer)].row(fw.hidden[0].rows() - 1);
}

/// Teacher logits at the scored positions of a sequence, for distillation.
template <class T>
Mat<T> scored_logits(const ModelState<T>& state, const TokenSequence& seq) {
    const auto fw = forward(state, seq.tokens);
    return fw.logits.middleRows(static_cast<Eigen::Index>(seq.target_begin), static_cast<Eigen::Index>(seq.n_targets()));
}

}  // namespace reft
