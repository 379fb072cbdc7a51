#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "reft/corpus.hpp"
#include "reft/loss.hpp"
#include "reft/model.hpp"
#include "reft/optim.hpp"

namespace reft {

/// Plain language-model pretraining of the base weights on statement text.
/// Produces the unaligned "base model" both finetuning stages start from.
struct PretrainConfig {
    std::size_t steps = 3000;
    std::size_t batch = 32;
    double learning_rate = 2e-3;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;

    void validate() const {
        if (steps < 1 || batch < 1) throw std::invalid_argument("pretrain steps and batch must be >= 1");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    }
};

template <class T>
struct PretrainResult {
    ModelState<T> base;
    std::vector<double> loss;  // per step
};

template <class T>
PretrainResult<T> pretrain_base(const ModelState<T>& init, const SpecialIds& sp,
                                const std::vector<std::vector<int>>& texts, const PretrainConfig& cfg) {
    cfg.validate();
    if (texts.empty()) throw std::invalid_argument("empty pretraining corpus");
    PretrainResult<T> out;
    out.base = init;
    out.base.mask = TrainableMask::BaseOnly;
    AdamWParams hp;
    hp.learning_rate = cfg.learning_rate;
    hp.weight_decay = cfg.weight_decay;
    auto opt = make_optimizer(out.base, hp);

    std::vector<TokenSequence> seqs;
    seqs.reserve(texts.size());
    for (const auto& t : texts) seqs.push_back(make_lm_sequence(sp, t));
    std::vector<std::size_t> order(seqs.size());
    std::size_t cursor = order.size(), epoch = 0;
    const T w = T(1) / static_cast<T>(cfg.batch);
    LossContext<T> ctx;
    out.loss.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<LossItem<T>> items;
        items.reserve(cfg.batch);
        while (items.size() < cfg.batch) {
            if (cursor == order.size()) {
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
                Rng rng(derive_seed(cfg.seed, "pretrain/epoch/" + std::to_string(epoch++)));
                rng.shuffle(order);
                cursor = 0;
            }
            LossItem<T> it;
            it.seq = &seqs[order[cursor++]];
            it.ce_weight = w;
            items.push_back(it);
        }
        auto res = lm_loss_and_grads(out.base, items, ctx);
        optim_step(out.base, opt, res.grads);
        out.loss.push_back(static_cast<double>(res.total));
    }
    out.base.mask = TrainableMask::AdaptersOnly;
    return out;
}

}  // namespace reft
