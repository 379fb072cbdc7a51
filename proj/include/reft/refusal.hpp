#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "reft/corpus.hpp"
#include "reft/loss.hpp"
#include "reft/model.hpp"

namespace reft {

/// Mean harmful-prompt feature minus mean harmless-prompt feature at one layer.
template <class T>
struct RefusalFeature {
    Vec<T> direction;
    int layer = 0;
    std::size_t n_us = 0;
    std::size_t n_s = 0;
    std::uint64_t version = 0;
};

template <class T>
Vec<T> mean_of(const std::vector<Vec<T>>& feats) {
    Vec<T> sum = Vec<T>::Zero(feats.front().size());
    for (const auto& f : feats) {
        if (f.size() != sum.size()) throw std::invalid_argument("feature width mismatch");
        sum += f;
    }
    return sum / static_cast<T>(feats.size());
}

template <class T>
RefusalFeature<T> compute_refusal_feature(const std::vector<Vec<T>>& us_feats, const std::vector<Vec<T>>& s_feats,
                                          int layer, std::uint64_t version = 1) {
    if (us_feats.empty() || s_feats.empty())
        throw std::invalid_argument("compute_refusal_feature: both feature lists must be nonempty");
    RefusalFeature<T> r;
    r.direction = mean_of(us_feats) - mean_of(s_feats);
    r.layer = layer;
    r.n_us = us_feats.size();
    r.n_s = s_feats.size();
    r.version = version;
    return r;
}

/// Running per-class feature sums between refusal-feature recomputations.
/// `count` counts prompts per class; an update fires once it reaches
/// cycle_batches * batch_per_class.
template <class T>
class CycleAccumulator {
public:
    CycleAccumulator(int d_model, std::size_t batch_per_class, std::size_t cycle_batches)
        : sum_us_(Vec<T>::Zero(d_model)),
          sum_s_(Vec<T>::Zero(d_model)),
          batch_(batch_per_class),
          threshold_(batch_per_class * cycle_batches) {
        if (batch_per_class < 1 || cycle_batches < 1) throw std::invalid_argument("cycle accumulator sizes must be >= 1");
    }

    void accumulate(const std::vector<Vec<T>>& us_batch, const std::vector<Vec<T>>& s_batch) {
        if (us_batch.size() != batch_ || s_batch.size() != batch_)
            throw std::invalid_argument("accumulate: expected " + std::to_string(batch_) + " features per class");
        for (const auto& f : us_batch) sum_us_ += f;
        for (const auto& f : s_batch) sum_s_ += f;
        count_us_ += us_batch.size();
        count_s_ += s_batch.size();
        c_ += batch_;
    }

    /// Recomputes the refusal feature when the cycle is complete and resets
    /// the running state; otherwise leaves everything untouched.
    std::optional<RefusalFeature<T>> maybe_update(int layer) {
        if (c_ < threshold_) return std::nullopt;
        RefusalFeature<T> r;
        r.direction = sum_us_ / static_cast<T>(count_us_) - sum_s_ / static_cast<T>(count_s_);
        r.layer = layer;
        r.n_us = count_us_;
        r.n_s = count_s_;
        r.version = ++updates_;
        sum_us_.setZero();
        sum_s_.setZero();
        count_us_ = count_s_ = c_ = 0;
        return r;
    }

    const Vec<T>& sum_us() const { return sum_us_; }
    const Vec<T>& sum_s() const { return sum_s_; }
    std::size_t count_us() const { return count_us_; }
    std::size_t count_s() const { return count_s_; }
    std::size_t counter() const { return c_; }
    std::size_t threshold() const { return threshold_; }
    std::size_t batch_per_class() const { return batch_; }
    std::uint64_t updates() const { return updates_; }

private:
    Vec<T> sum_us_, sum_s_;
    std::size_t count_us_ = 0, count_s_ = 0, c_ = 0;
    std::size_t batch_, threshold_;
    std::uint64_t updates_ = 0;
};

struct Classification {
    Label label;
    double similarity;
};

/// Harmful iff CS(R, feature) > tau.
template <class T>
Classification classify(const Vec<T>& feature, const RefusalFeature<T>& r, double tau) {
    if (!(tau >= -1.0 && tau <= 1.0)) throw std::invalid_argument("threshold must lie in [-1, 1]");
    const double sim = static_cast<double>(cosine_similarity<T>(r.direction, feature));
    return {sim > tau ? Label::Harmful : Label::Harmless, sim};
}

}  // namespace reft
