#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "reft/corpus.hpp"
#include "reft/loss.hpp"
#include "reft/model.hpp"
#include "reft/optim.hpp"
#include "reft/refusal.hpp"

namespace reft {

enum class FinetuneMode { Reft, SftBaseline, FilterOnly, AdOnly };

inline std::string_view to_string(FinetuneMode m) {
    switch (m) {
        case FinetuneMode::Reft: return "reft";
        case FinetuneMode::SftBaseline: return "sft-baseline";
        case FinetuneMode::FilterOnly: return "filter-only";
        case FinetuneMode::AdOnly: return "ad-only";
    }
    return "?";
}

inline FinetuneMode finetune_mode_from_string(std::string_view s) {
    for (auto m : {FinetuneMode::Reft, FinetuneMode::SftBaseline, FinetuneMode::FilterOnly, FinetuneMode::AdOnly})
        if (to_string(m) == s) return m;
    throw std::invalid_argument("unknown finetune mode '" + std::string(s) + "'");
}

inline bool uses_filter(FinetuneMode m) { return m == FinetuneMode::Reft || m == FinetuneMode::FilterOnly; }
inline bool uses_kd(FinetuneMode m) { return m == FinetuneMode::Reft || m == FinetuneMode::AdOnly; }
inline bool uses_align(FinetuneMode m) { return m != FinetuneMode::SftBaseline; }
inline bool needs_teacher(FinetuneMode m) { return m != FinetuneMode::SftBaseline; }

struct FinetuneConfig {
    double tau = 0.9;
    double alpha = 0.1;
    double temperature = 1.0;
    double learning_rate = 4e-3;
    double weight_decay = 0.1;
    std::size_t epochs = 20;
    std::size_t user_batch = 10;
    std::size_t align_batch = 10;
    std::uint64_t seed = 0;
    FinetuneMode mode = FinetuneMode::Reft;
    std::size_t max_steps = 0;  // 0 = all epochs

    void validate() const {
        if (!(tau >= -1.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in [-1, 1]");
        if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
        if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
        if (epochs < 1 || user_batch < 1 || align_batch < 1)
            throw std::invalid_argument("epochs and batch sizes must be >= 1");
    }
};

struct NothingToTrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FilterDecision {
    std::uint64_t uid = 0;
    double similarity = 0;
    int omega = 1;
    Label latent_label = Label::Harmless;  // eval-only
};

struct FilterResult {
    std::vector<Example> kept;             // input order
    std::vector<FilterDecision> decisions;  // sorted by uid
    std::size_t degenerate = 0;
};

/// omega = 0 iff CS(R, f(x)) > tau. A degenerate feature counts as harmful.
template <class T>
FilterResult filter_user_data(const ModelState<T>& teacher, const SpecialIds& sp, const RefusalFeature<T>& R,
                              const std::vector<Example>& user, double tau) {
    if (!(tau >= -1.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in [-1, 1]");
    FilterResult out;
    for (const auto& ex : user) {
        FilterDecision d;
        d.uid = ex.uid;
        d.latent_label = ex.label;
        const auto f = last_token_feature(teacher, sp, ex.prompt, R.layer);
        try {
            d.similarity = static_cast<double>(cosine_similarity<T>(R.direction, f));
            d.omega = d.similarity > tau ? 0 : 1;
        } catch (const CosineError&) {
            d.similarity = 0;
            d.omega = 0;
            ++out.degenerate;
        }
        if (d.omega) out.kept.push_back(ex);
        out.decisions.push_back(d);
    }
    std::sort(out.decisions.begin(), out.decisions.end(),
              [](const FilterDecision& a, const FilterDecision& b) { return a.uid < b.uid; });
    for (std::size_t i = 1; i < out.decisions.size(); ++i)
        if (out.decisions[i].uid == out.decisions[i - 1].uid) throw std::invalid_argument("duplicate uid in user data");
    return out;
}

template <class T>
struct DistillResult {
    T kl = 0;  // mean over the batch of the per-example position-mean KL
    Params<T> grads;
};

/// KL(teacher^T || student^T) on response positions, gradients to the student only.
template <class T>
DistillResult<T> distill_loss(const ModelState<T>& teacher, const ModelState<T>& student, const SpecialIds& sp,
                              const std::vector<const Example*>& align_batch, double temperature,
                              bool want_grads = true) {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    if (align_batch.empty()) throw std::invalid_argument("empty alignment batch");
    std::vector<TokenSequence> seqs;
    std::vector<Mat<T>> tl;
    for (const auto* e : align_batch) {
        seqs.push_back(make_sequence(sp, *e));
        tl.push_back(scored_logits(teacher, seqs.back()));
    }
    const T w = T(1) / static_cast<T>(seqs.size());
    std::vector<LossItem<T>> items(seqs.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        items[i].seq = &seqs[i];
        items[i].kd_weight = w;
        items[i].teacher_logits = &tl[i];
    }
    LossContext<T> ctx;
    ctx.temperature = static_cast<T>(temperature);
    auto res = lm_loss_and_grads(student, items, ctx, want_grads);
    DistillResult<T> out;
    out.kl = res.total;
    if (want_grads) out.grads = std::move(res.grads);
    return out;
}

/// Alignment half of a finetuning batch.
template <class T>
struct AlignItem {
    const Example* example = nullptr;
    const Mat<T>* teacher_logits = nullptr;  // required for KD
};

enum class AlignTerm { None, Distill, HardLabel };

template <class T>
struct FinetuneLoss {
    T sft_term = 0;     // (1/|user batch|) sum omega_i CE_i
    T align_raw = 0;    // mean KL (Distill) or mean CE (HardLabel)
    T align_term = 0;   // alpha T^2 align_raw (Distill) or alpha align_raw (HardLabel)
    T total = 0;
    std::size_t kept = 0;
    bool has_grads = false;  // false when no term contributed
    Params<T> grads;
};

/// total = mean over the user batch of omega_i CE_i + alpha T^2 mean KL.
/// Slots with omega = 0 stay in the denominator but are never forwarded.
template <class T>
FinetuneLoss<T> finetune_loss(const ModelState<T>& student, const SpecialIds& sp,
                              const std::vector<const Example*>& user_batch, const std::vector<int>& omega,
                              const std::vector<AlignItem<T>>& align_batch, AlignTerm term, double alpha,
                              double temperature, bool want_grads = true) {
    if (user_batch.size() != omega.size()) throw std::invalid_argument("omega count does not match the user batch");
    if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    std::vector<TokenSequence> seqs;
    std::vector<LossItem<T>> items;
    seqs.reserve(user_batch.size() + align_batch.size());
    FinetuneLoss<T> out;
    const T wu = user_batch.empty() ? T(0) : T(1) / static_cast<T>(user_batch.size());
    for (std::size_t i = 0; i < user_batch.size(); ++i) {
        if (omega[i] != 0 && omega[i] != 1) throw std::invalid_argument("omega must be 0 or 1");
        if (!omega[i]) continue;
        ++out.kept;
        seqs.push_back(make_sequence(sp, *user_batch[i]));
    }
    const std::size_t n_user = seqs.size();
    const bool align_on = term != AlignTerm::None && alpha != 0.0 && !align_batch.empty();
    const T T_ = static_cast<T>(temperature);
    const T coef = term == AlignTerm::Distill ? static_cast<T>(alpha) * T_ * T_ : static_cast<T>(alpha);
    const T wa = align_batch.empty() ? T(0) : T(1) / static_cast<T>(align_batch.size());
    if (align_on)
        for (const auto& a : align_batch) seqs.push_back(make_sequence(sp, *a.example));
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        LossItem<T> it;
        it.seq = &seqs[i];
        if (i < n_user) {
            it.ce_weight = wu;
        } else if (term == AlignTerm::Distill) {
            const auto& a = align_batch[i - n_user];
            if (!a.teacher_logits) throw std::invalid_argument("distillation needs teacher logits");
            it.kd_weight = coef * wa;
            it.teacher_logits = a.teacher_logits;
        } else {
            it.ce_weight = coef * wa;
        }
        items.push_back(it);
    }
    if (items.empty()) return out;
    LossContext<T> ctx;
    ctx.temperature = T_;
    auto res = lm_loss_and_grads(student, items, ctx, want_grads);
    for (std::size_t i = 0; i < n_user; ++i) out.sft_term += wu * res.ce[i];
    for (std::size_t i = n_user; i < items.size(); ++i)
        out.align_raw += wa * (term == AlignTerm::Distill ? res.kl[i] : res.ce[i]);
    out.align_term = coef * out.align_raw;
    out.total = res.total;
    if (want_grads) {
        out.grads = std::move(res.grads);
        out.has_grads = true;
    }
    return out;
}

struct FinetuneLogRow {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::size_t kept = 0;  // user examples with omega = 1 in the batch
    double sft_term = 0, align_raw = 0, align_term = 0, total = 0;
};

template <class T>
struct StudentResult {
    ModelState<T> student;
    std::optional<FilterResult> filter;
    std::vector<FinetuneLogRow> log;
};

/// Filters once, then trains the student's adapters on SFT + alignment terms.
/// Every step takes one user mini-batch and one alignment mini-batch.
template <class T>
StudentResult<T> train_student(const ModelState<T>& base, const ModelState<T>* teacher, const RefusalFeature<T>* R,
                               const SpecialIds& sp, const std::vector<Example>& user,
                               const std::vector<Example>& align_subset, const FinetuneConfig& cfg) {
    cfg.validate();
    const auto mode = cfg.mode;
    if (needs_teacher(mode) && !teacher) throw std::invalid_argument("mode '" + std::string(to_string(mode)) + "' needs a teacher");
    if (uses_filter(mode) && !R) throw std::invalid_argument("filtering needs the teacher's refusal feature");
    if (user.empty()) throw std::invalid_argument("empty user data");
    if (uses_align(mode) && align_subset.size() != user.size())
        throw std::invalid_argument("alignment subset size must equal the user data size");

    StudentResult<T> out;
    std::vector<int> omega(user.size(), 1);
    if (uses_filter(mode)) {
        out.filter = filter_user_data(*teacher, sp, *R, user, cfg.tau);
        std::vector<std::pair<std::uint64_t, int>> by_uid;
        for (const auto& d : out.filter->decisions) by_uid.emplace_back(d.uid, d.omega);
        for (std::size_t i = 0; i < user.size(); ++i) {
            const auto it = std::lower_bound(by_uid.begin(), by_uid.end(), std::make_pair(user[i].uid, -1));
            omega[i] = it->second;
        }
    }
    std::size_t n_kept = 0;
    for (int w : omega) n_kept += static_cast<std::size_t>(w);
    const AlignTerm term = uses_kd(mode) ? AlignTerm::Distill : (uses_align(mode) ? AlignTerm::HardLabel : AlignTerm::None);
    if (n_kept == 0 && (term == AlignTerm::None || cfg.alpha == 0.0))
        throw NothingToTrainError("nothing to train: every user example was filtered and alpha is 0");

    std::vector<Mat<T>> tlogits;
    if (term == AlignTerm::Distill) {
        tlogits.reserve(align_subset.size());
        for (const auto& e : align_subset) tlogits.push_back(scored_logits(*teacher, make_sequence(sp, e)));
    }

    out.student = base;
    reset_adapters(out.student, derive_seed(cfg.seed, "student/adapters"));
    out.student.mask = TrainableMask::AdaptersOnly;
    AdamWParams hp;
    hp.learning_rate = cfg.learning_rate;
    hp.weight_decay = cfg.weight_decay;
    auto opt = make_optimizer(out.student, hp);

    // Every mode walks the full user set in slots of user_batch; omega = 0
    // slots are skipped by finetune_loss but stay in the denominator.
    const std::size_t steps_per_epoch = (user.size() + cfg.user_batch - 1) / cfg.user_batch;
    std::vector<std::size_t> uorder(user.size()), aorder(align_subset.size());
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, "student/epoch/" + std::to_string(epoch)));
        for (std::size_t i = 0; i < uorder.size(); ++i) uorder[i] = i;
        for (std::size_t i = 0; i < aorder.size(); ++i) aorder[i] = i;
        rng.shuffle(uorder);
        rng.shuffle(aorder);
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            if (cfg.max_steps && step >= cfg.max_steps) return out;
            std::vector<const Example*> ub;
            std::vector<int> om;
            for (std::size_t k = s * cfg.user_batch; k < std::min(user.size(), (s + 1) * cfg.user_batch); ++k) {
                ub.push_back(&user[uorder[k]]);
                om.push_back(omega[uorder[k]]);
            }
            std::vector<AlignItem<T>> ab;
            if (term != AlignTerm::None) {
                for (std::size_t k = 0; k < cfg.align_batch; ++k) {
                    const std::size_t j = aorder[(s * cfg.align_batch + k) % aorder.size()];
                    ab.push_back({&align_subset[j], term == AlignTerm::Distill ? &tlogits[j] : nullptr});
                }
            }
            const auto fl = finetune_loss(out.student, sp, ub, om, ab, term, cfg.alpha, cfg.temperature);
            if (fl.has_grads) optim_step(out.student, opt, fl.grads);
            ++step;
            FinetuneLogRow row;
            row.step = step;
            row.epoch = epoch;
            row.kept = fl.kept;
            row.sft_term = static_cast<double>(fl.sft_term);
            row.align_raw = static_cast<double>(fl.align_raw);
            row.align_term = static_cast<double>(fl.align_term);
            row.total = static_cast<double>(fl.total);
            out.log.push_back(row);
        }
    }
    return out;
}

}  // namespace reft
