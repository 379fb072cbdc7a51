#include <catch_amalgamated.hpp>

#include "reft/refusal.hpp"
#include "test_util.hpp"

using namespace reft;

namespace {

Vec<double> random_vec(Rng& r, int d, double scale = 1.0) {
    Vec<double> v(d);
    for (Eigen::Index i = 0; i < d; ++i) v(i) = scale * r.normal();
    return v;
}

// Mean difference computed element by element, no Eigen reductions.
Vec<double> brute_mean_diff(const std::vector<Vec<double>>& us, const std::vector<Vec<double>>& s) {
    const auto d = us.front().size();
    Vec<double> out(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        double a = 0, b = 0;
        for (const auto& f : us) a += f(j);
        for (const auto& f : s) b += f(j);
        out(j) = a / static_cast<double>(us.size()) - b / static_cast<double>(s.size());
    }
    return out;
}

}  // namespace

TEST_CASE("refusal feature is the mean difference") {
    Rng r(1);
    std::vector<Vec<double>> us, s;
    for (int i = 0; i < 7; ++i) us.push_back(random_vec(r, 5));
    for (int i = 0; i < 9; ++i) s.push_back(random_vec(r, 5));
    const auto R = compute_refusal_feature(us, s, 2);
    CHECK((R.direction - brute_mean_diff(us, s)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(R.layer == 2);
    CHECK(R.n_us == 7);
    CHECK(R.n_s == 9);
    CHECK_THROWS(compute_refusal_feature<double>({}, s, 2));
}

TEST_CASE("identical class means give a zero direction") {
    std::vector<Vec<double>> a{Vec<double>::Ones(4)}, b{Vec<double>::Ones(4)};
    CHECK(compute_refusal_feature(a, b, 1).direction.isZero(0));
}

TEST_CASE("cycle accumulator replays against brute force") {
    Rng r(2024);
    std::size_t cycles = 0;
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t B = 1 + r.below(6), C = 1 + r.below(7);
        const int d = 3 + static_cast<int>(r.below(6));
        CycleAccumulator<double> acc(d, B, C);
        std::vector<Vec<double>> log_us, log_s;
        for (std::size_t step = 1; step <= 6 * C; ++step) {
            std::vector<Vec<double>> us, s;
            for (std::size_t i = 0; i < B; ++i) {
                us.push_back(random_vec(r, d, 3.0));
                s.push_back(random_vec(r, d, 3.0));
            }
            log_us.insert(log_us.end(), us.begin(), us.end());
            log_s.insert(log_s.end(), s.begin(), s.end());
            acc.accumulate(us, s);
            const auto R = acc.maybe_update(1);
            if (step % C == 0) {
                REQUIRE(R.has_value());
                CHECK((R->direction - brute_mean_diff(log_us, log_s)).cwiseAbs().maxCoeff() <= 1e-12);
                CHECK(R->n_us == B * C);
                CHECK(R->version == step / C);
                CHECK(acc.counter() == 0);
                CHECK(acc.sum_us().isZero(0));
                log_us.clear();
                log_s.clear();
                ++cycles;
            } else {
                CHECK_FALSE(R.has_value());
                CHECK(acc.counter() == (step % C) * B);
            }
        }
    }
    CHECK(cycles >= 100);
}

TEST_CASE("accumulate checks batch sizes") {
    CycleAccumulator<double> acc(3, 2, 2);
    std::vector<Vec<double>> one{Vec<double>::Zero(3)};
    std::vector<Vec<double>> two{Vec<double>::Zero(3), Vec<double>::Zero(3)};
    CHECK_THROWS(acc.accumulate(one, two));
    CHECK_THROWS(CycleAccumulator<double>(3, 0, 2));
}

TEST_CASE("classify uses a strict threshold") {
    RefusalFeature<double> R;
    R.direction = Vec<double>::Zero(2);
    R.direction(0) = 1;
    Vec<double> f(2);
    f << 0.95, std::sqrt(1 - 0.95 * 0.95);
    auto c = classify(f, R, 0.9);
    CHECK(c.label == Label::Harmful);
    CHECK(c.similarity == Catch::Approx(0.95).epsilon(1e-12));
    // CS = 1 exactly at tau = 1 stays harmless
    c = classify(R.direction, R, 1.0);
    CHECK(c.similarity == 1.0);
    CHECK(c.label == Label::Harmless);
    CHECK_THROWS(classify(f, R, 1.5));
    CHECK_THROWS(classify(f, R, -1.01));
    CHECK_THROWS_AS(classify(Vec<double>(Vec<double>::Zero(2)), R, 0.9), CosineError);
}

TEST_CASE("classification is scale invariant") {
    Rng r(5);
    for (int t = 0; t < 200; ++t) {
        RefusalFeature<double> R;
        R.direction = random_vec(r, 6);
        const auto f = random_vec(r, 6);
        const double tau = r.uniform(-1, 1);
        const auto base = classify(f, R, tau);
        for (double k : {0.01, 0.5, 3.0, 1000.0}) {
            CHECK(classify(Vec<double>(k * f), R, tau).label == base.label);
            RefusalFeature<double> Rk = R;
            Rk.direction *= k;
            CHECK(classify(f, Rk, tau).label == base.label);
        }
    }
}
