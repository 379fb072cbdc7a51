#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "reft/corpus.hpp"
#include "reft/loss.hpp"
#include "reft/model.hpp"
#include "reft/optim.hpp"
#include "reft/refusal.hpp"

namespace reft {

struct TeacherConfig {
    double lambda = 0.1;
    std::size_t batch_per_class = 5;
    std::size_t cycle_batches = 6;
    double learning_rate = 2e-3;
    double weight_decay = 0.1;
    std::size_t epochs = 20;
    std::uint64_t seed = 0;
    std::size_t max_steps = 0;  // 0 = run every epoch to completion

    void validate() const {
        if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
        if (batch_per_class < 1) throw std::invalid_argument("batch_per_class must be >= 1");
        if (cycle_batches < 1) throw std::invalid_argument("cycle_batches must be >= 1");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
        if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    }
};

/// Components of the teacher objective for one batch of B harmless and B
/// harmful prompts (total = ce_safe + ce_unsafe + reg_safe + reg_unsafe):
///   ce_safe    = mean CE of harmless prompts against their helpful responses
///   ce_unsafe  = mean CE of harmful prompts against the refusal response
///   reg_safe   = lambda * mean |1 + CS(f(x_s), R)|
///   reg_unsafe = lambda * mean |1 - CS(f(x_us), R)|
template <class T>
struct TeacherLoss {
    T ce_safe = 0, ce_unsafe = 0, reg_safe = 0, reg_unsafe = 0, total = 0;
    T lambda_effective = 0;
    Params<T> grads;
    std::vector<Vec<T>> us_feats, s_feats;
};

namespace detail {

template <class T>
void check_teacher_batch(const std::vector<const Example*>& safe, const std::vector<const Example*>& unsafe) {
    if (safe.empty() || safe.size() != unsafe.size())
        throw std::invalid_argument("teacher batch needs B harmless and B harmful examples");
    for (const auto* e : safe)
        if (e->label != Label::Harmless) throw std::invalid_argument("teacher batch: harmful example in the safe half");
    for (const auto* e : unsafe)
        if (e->label != Label::Harmful) throw std::invalid_argument("teacher batch: harmless example in the unsafe half");
}

/// Runs one cached forward over [unsafe..., safe...] and returns the tap-layer
/// prompt features of both halves.
template <class T>
ForwardResult<T> teacher_forward(const ModelState<T>& state, const std::vector<TokenSequence>& seqs, std::size_t B,
                                 std::vector<Vec<T>>& us_feats, std::vector<Vec<T>>& s_feats, bool keep_cache) {
    std::vector<const std::vector<int>*> toks;
    for (const auto& s : seqs) toks.push_back(&s.tokens);
    auto fw = forward_batch(state, toks, keep_cache);
    const auto& hid = fw.hidden[static_cast<std::size_t>(state.config.tap_layer)];
    us_feats.clear();
    s_feats.clear();
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        Vec<T> f = hid.row(static_cast<Eigen::Index>(fw.offsets[i] + seqs[i].feature_pos));
        (i < B ? us_feats : s_feats).push_back(std::move(f));
    }
    return fw;
}

template <class T>
void teacher_terms(const ModelState<T>& state, const std::vector<TokenSequence>& seqs, std::size_t B,
                   const ForwardResult<T>& fw, const RefusalFeature<T>* R, double lambda, bool want_grads,
                   TeacherLoss<T>& out) {
    const T lam = R ? static_cast<T>(lambda) : T(0);
    const T inv_b = T(1) / static_cast<T>(B);
    std::vector<LossItem<T>> items(seqs.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        items[i].seq = &seqs[i];
        items[i].ce_weight = inv_b;
        items[i].reg_weight = lam * inv_b;
        items[i].reg_target = i < B ? 1 : -1;
    }
    LossContext<T> ctx;
    ctx.refusal = R ? &R->direction : nullptr;
    ctx.tap_layer = state.config.tap_layer;
    auto res = lm_loss_and_grads(state, items, ctx, want_grads, &fw);
    out.lambda_effective = lam;
    out.ce_safe = out.ce_unsafe = out.reg_safe = out.reg_unsafe = T(0);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (i < B) {
            out.ce_unsafe += res.ce[i] * inv_b;
            out.reg_unsafe += lam * res.reg[i] * inv_b;
        } else {
            out.ce_safe += res.ce[i] * inv_b;
            out.reg_safe += lam * res.reg[i] * inv_b;
        }
    }
    out.total = res.total;
    if (want_grads) out.grads = std::move(res.grads);
}

}  // namespace detail

/// Teacher objective on one batch. Without a refusal feature the regularizer is
/// disabled (lambda forced to 0).
template <class T>
TeacherLoss<T> teacher_loss(const ModelState<T>& state, const SpecialIds& sp, const RefusalFeature<T>* R,
                            const std::vector<const Example*>& safe, const std::vector<const Example*>& unsafe,
                            double lambda, bool want_grads = true) {
    detail::check_teacher_batch<T>(safe, unsafe);
    const std::size_t B = unsafe.size();
    std::vector<TokenSequence> seqs;
    for (const auto* e : unsafe) seqs.push_back(make_sequence(sp, *e));
    for (const auto* e : safe) seqs.push_back(make_sequence(sp, *e));
    TeacherLoss<T> out;
    const auto fw = detail::teacher_forward(state, seqs, B, out.us_feats, out.s_feats, want_grads);
    detail::teacher_terms(state, seqs, B, fw, R, lambda, want_grads, out);
    return out;
}

struct TeacherLogRow {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double ce_safe = 0, ce_unsafe = 0, reg_safe = 0, reg_unsafe = 0;
    double lambda_effective = 0;
    std::uint64_t r_version = 0;
    double total = 0;
};

template <class T>
struct TeacherResult {
    ModelState<T> teacher;
    std::optional<RefusalFeature<T>> refusal;
    std::vector<TeacherLogRow> log;
    std::size_t reshuffles = 0;
};

/// Teacher preparation. Each step draws B harmful and B harmless examples,
/// folds their tap-layer features into the cycle accumulator, refreshes the
/// refusal feature when a cycle completes, and takes one AdamW step on the
/// adapters. Each class is reshuffled at every epoch boundary; an epoch ends
/// when the smaller class runs out.
template <class T>
TeacherResult<T> train_teacher(const ModelState<T>& base, const SpecialIds& sp, const std::vector<Example>& align,
                               const TeacherConfig& cfg) {
    cfg.validate();
    std::vector<const Example*> harmful, harmless;
    for (const auto& e : align) (e.label == Label::Harmful ? harmful : harmless).push_back(&e);
    const std::size_t B = cfg.batch_per_class;
    if (harmful.size() < B || harmless.size() < B)
        throw std::invalid_argument("alignment corpus needs at least B examples of each class");

    TeacherResult<T> out;
    out.teacher = base;
    reset_adapters(out.teacher, derive_seed(cfg.seed, "teacher/adapters"));
    out.teacher.mask = TrainableMask::AdaptersOnly;
    auto& model = out.teacher;

    AdamWParams hp;
    hp.learning_rate = cfg.learning_rate;
    hp.weight_decay = cfg.weight_decay;
    auto opt = make_optimizer(model, hp);
    CycleAccumulator<T> acc(model.config.d_model, B, cfg.cycle_batches);
    const int layer = model.config.tap_layer;

    const std::size_t steps_per_epoch = std::min(harmful.size(), harmless.size()) / B;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, "teacher/epoch/" + std::to_string(epoch)));
        rng.shuffle(harmful);
        rng.shuffle(harmless);
        if (epoch > 0) ++out.reshuffles;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            if (cfg.max_steps && step >= cfg.max_steps) return out;
            std::vector<TokenSequence> seqs;
            seqs.reserve(2 * B);
            for (std::size_t i = 0; i < B; ++i) seqs.push_back(make_sequence(sp, *harmful[s * B + i]));
            for (std::size_t i = 0; i < B; ++i) seqs.push_back(make_sequence(sp, *harmless[s * B + i]));

            TeacherLoss<T> tl;
            const auto fw = detail::teacher_forward(model, seqs, B, tl.us_feats, tl.s_feats, true);
            acc.accumulate(tl.us_feats, tl.s_feats);
            if (auto r = acc.maybe_update(layer)) out.refusal = std::move(*r);
            detail::teacher_terms(model, seqs, B, fw, out.refusal ? &*out.refusal : nullptr, cfg.lambda, true, tl);
            optim_step(model, opt, tl.grads);

            ++step;
            TeacherLogRow row;
            row.step = step;
            row.epoch = epoch;
            row.ce_safe = static_cast<double>(tl.ce_safe);
            row.ce_unsafe = static_cast<double>(tl.ce_unsafe);
            row.reg_safe = static_cast<double>(tl.reg_safe);
            row.reg_unsafe = static_cast<double>(tl.reg_unsafe);
            row.lambda_effective = static_cast<double>(tl.lambda_effective);
            row.r_version = out.refusal ? out.refusal->version : 0;
            row.total = static_cast<double>(tl.total);
            out.log.push_back(row);
        }
    }
    return out;
}

}  // namespace reft
