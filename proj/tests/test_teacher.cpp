#include <catch_amalgamated.hpp>

#include "reft/teacher.hpp"
#include "test_util.hpp"

using namespace reft;

namespace {

struct Fixture {
    Vocab vocab = build_vocab();
    CorpusBundle bundle = generate_corpus(vocab, testutil::small_spec());
    ModelConfig cfg = testutil::tiny_config(static_cast<int>(vocab.size()));
    std::vector<const Example*> safe, unsafe;

    explicit Fixture(std::size_t B = 5) {
        for (const auto& e : bundle.align) {
            auto& dst = e.label == Label::Harmful ? unsafe : safe;
            if (dst.size() < B) dst.push_back(&e);
        }
    }
};

RefusalFeature<double> random_refusal(int d, std::uint64_t seed) {
    Rng r(seed);
    RefusalFeature<double> R;
    R.direction.resize(d);
    for (Eigen::Index i = 0; i < d; ++i) R.direction(i) = r.normal();
    R.layer = 1;
    return R;
}

}  // namespace

TEST_CASE("lambda zero reduces to the two cross-entropies") {
    Fixture f;
    const auto st = testutil::tiny_model<double>(f.cfg, 1);
    const auto R = random_refusal(f.cfg.d_model, 2);
    const auto tl = teacher_loss(st, f.vocab.specials(), &R, f.safe, f.unsafe, 0.0);
    CHECK(tl.total == Catch::Approx(tl.ce_safe + tl.ce_unsafe).epsilon(1e-14));
    CHECK(tl.reg_safe == 0.0);
    CHECK(tl.reg_unsafe == 0.0);
}

TEST_CASE("no refusal feature forces lambda to zero") {
    Fixture f;
    const auto st = testutil::tiny_model<double>(f.cfg, 1);
    const auto tl = teacher_loss<double>(st, f.vocab.specials(), nullptr, f.safe, f.unsafe, 0.1);
    CHECK(tl.lambda_effective == 0.0);
    CHECK(tl.reg_safe == 0.0);
    CHECK(tl.reg_unsafe == 0.0);
    const auto with0 = teacher_loss<double>(st, f.vocab.specials(), nullptr, f.safe, f.unsafe, 0.0);
    CHECK(testutil::params_equal(tl.grads, with0.grads));
}

TEST_CASE("regularizer terms are bounded by 2 lambda") {
    Fixture f;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto st = testutil::tiny_model<double>(f.cfg, seed);
        const auto R = random_refusal(f.cfg.d_model, seed + 10);
        const auto tl = teacher_loss(st, f.vocab.specials(), &R, f.safe, f.unsafe, 0.1, false);
        CHECK(tl.reg_safe >= 0.0);
        CHECK(tl.reg_safe <= 0.2);
        CHECK(tl.reg_unsafe >= 0.0);
        CHECK(tl.reg_unsafe <= 0.2);
        CHECK(tl.total == Catch::Approx(tl.ce_safe + tl.ce_unsafe + tl.reg_safe + tl.reg_unsafe).epsilon(1e-12));
    }
}

TEST_CASE("teacher loss gradient matches finite differences") {
    Fixture f(3);
    auto st = testutil::tiny_model<double>(f.cfg, 4);
    st.mask = TrainableMask::BaseAndAdapters;
    const auto R = random_refusal(f.cfg.d_model, 5);
    const auto sp = f.vocab.specials();
    const auto tl = teacher_loss(st, sp, &R, f.safe, f.unsafe, 0.5);
    const auto s = testutil::fd_check(
        st, [&] { return teacher_loss(st, sp, &R, f.safe, f.unsafe, 0.5, false).total; }, tl.grads, 30, 9);
    CHECK(s.worst_rel <= 1e-4);
}

TEST_CASE("batch composition is validated") {
    Fixture f;
    const auto st = testutil::tiny_model<double>(f.cfg, 1);
    const auto sp = f.vocab.specials();
    auto short_safe = f.safe;
    short_safe.pop_back();
    CHECK_THROWS(teacher_loss<double>(st, sp, nullptr, short_safe, f.unsafe, 0.1));
    CHECK_THROWS(teacher_loss<double>(st, sp, nullptr, f.unsafe, f.safe, 0.1));
}

TEST_CASE("config validation") {
    TeacherConfig c;
    CHECK_NOTHROW(c.validate());
    c.lambda = -1;
    CHECK_THROWS(c.validate());
    c = {};
    c.cycle_batches = 0;
    CHECK_THROWS(c.validate());
}

TEST_CASE("gating: identical trajectory until the first refusal feature") {
    Fixture f;
    auto base = testutil::tiny_model<float>(f.cfg, 3);
    TeacherConfig c;
    c.epochs = 1;
    c.cycle_batches = 3;
    c.seed = 11;
    c.max_steps = c.cycle_batches - 1;
    auto c0 = c;
    c0.lambda = 0.0;
    const auto a = train_teacher(base, f.vocab.specials(), f.bundle.align, c);
    const auto b = train_teacher(base, f.vocab.specials(), f.bundle.align, c0);
    CHECK_FALSE(a.refusal.has_value());
    CHECK(testutil::params_equal(a.teacher.params, b.teacher.params));
    for (const auto& row : a.log) {
        CHECK(row.lambda_effective == 0.0);
        CHECK(row.r_version == 0);
    }
    // one more step and the regularizer switches on
    c.max_steps = c0.max_steps = c.cycle_batches;
    const auto a2 = train_teacher(base, f.vocab.specials(), f.bundle.align, c);
    const auto b2 = train_teacher(base, f.vocab.specials(), f.bundle.align, c0);
    REQUIRE(a2.refusal.has_value());
    CHECK(a2.log.back().r_version == 1);
    CHECK(a2.log.back().lambda_effective == Catch::Approx(0.1));
    CHECK_FALSE(testutil::params_equal(a2.teacher.params, b2.teacher.params));
}

TEST_CASE("teacher training touches adapters only and logs every step") {
    Fixture f;
    auto base = testutil::tiny_model<float>(f.cfg, 3);
    TeacherConfig c;
    c.epochs = 2;
    c.cycle_batches = 2;
    c.lambda = 0.0;
    const auto r = train_teacher(base, f.vocab.specials(), f.bundle.align, c);
    CHECK(r.log.size() == 2 * (40 / 5));
    CHECK(r.reshuffles == 1);
    REQUIRE(r.refusal.has_value());
    CHECK(r.refusal->version == r.log.size() / 2);
    for (const auto& row : r.log) {
        CHECK(row.reg_safe == 0.0);
        CHECK(row.reg_unsafe == 0.0);
    }
    visit_tensors(
        [](const std::string& name, bool is_adapter, const Mat<float>& x, const Mat<float>& y) {
            INFO(name);
            if (!is_adapter) CHECK((x.array() == y.array()).all());
        },
        r.teacher.params, base.params);
}
