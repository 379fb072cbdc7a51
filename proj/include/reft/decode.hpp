#pragma once

#include <vector>

#include "reft/corpus.hpp"
#include "reft/loss.hpp"
#include "reft/model.hpp"

namespace reft {

/// Argmax decoding after BOS prompt SEP until EOS, max_new tokens, or the
/// context is full. Ties go to the lowest token id. EOS is not returned.
template <class T>
std::vector<int> greedy_decode(const ModelState<T>& state, const SpecialIds& sp, const std::vector<int>& prompt,
                               std::size_t max_new) {
    auto seq = prompt_input(sp, prompt);
    const auto ctx = static_cast<std::size_t>(state.config.ctx_len);
    if (seq.size() > ctx) throw LengthError("prompt does not fit the context");
    std::vector<int> out;
    while (out.size() < max_new && seq.size() < ctx) {
        const auto fw = forward_batch(state, {&seq});
        const auto last = fw.logits.row(fw.logits.rows() - 1);
        int best = 0;
        for (Eigen::Index j = 1; j < last.size(); ++j) {
            if (last(j) > last(best)) best = static_cast<int>(j);
        }
        if (best == sp.eos) break;
        out.push_back(best);
        seq.push_back(best);
    }
    return out;
}

}  // namespace reft
