#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "reft/rng.hpp"

using namespace reft;

TEST_CASE("derive_seed is stable and label sensitive") {
    CHECK(derive_seed(1, "teacher") == derive_seed(1, "teacher"));
    CHECK(derive_seed(1, "teacher") != derive_seed(1, "finetune"));
    CHECK(derive_seed(1, "teacher") != derive_seed(2, "teacher"));
}

TEST_CASE("fnv1a64 known vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("Rng streams repeat per seed") {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        CHECK(x == b.next_u64());
        differs = differs || x != c.next_u64();
    }
    CHECK(differs);
}

TEST_CASE("uniform and below stay in range") {
    Rng r(7);
    for (int i = 0; i < 10000; ++i) {
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(r.below(13) < 13u);
    }
    CHECK(r.below(1) == 0u);
}

TEST_CASE("normal draws have unit moments") {
    Rng r(11);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    const double mean = s / n, var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("shuffle permutes") {
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    auto w = v;
    Rng r(3);
    r.shuffle(w);
    CHECK(w != v);
    std::sort(w.begin(), w.end());
    CHECK(w == v);
}
