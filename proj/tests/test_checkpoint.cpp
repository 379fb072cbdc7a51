#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "reft/checkpoint.hpp"
#include "reft/corpus.hpp"
#include "test_util.hpp"

using namespace reft;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("reft-ckpt-test-" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
}

RefusalFeature<float> some_refusal(int d) {
    RefusalFeature<float> r;
    r.direction = Vec<float>::LinSpaced(d, -1.0f, 2.0f);
    r.layer = 1;
    r.n_us = 30;
    r.n_s = 30;
    r.version = 4;
    return r;
}

}  // namespace

TEST_CASE("save, load and forward are bit-identical") {
    const auto vocab = build_vocab();
    const auto cfg = testutil::tiny_config(static_cast<int>(vocab.size()));
    const auto st = testutil::tiny_model<float>(cfg, 12);
    const auto dir = scratch("roundtrip");
    save_checkpoint(st, std::optional(some_refusal(cfg.d_model)), dir);
    const auto ck = load_checkpoint<float>(dir);
    CHECK(ck.state.config == st.config);
    CHECK(ck.state.mask == st.mask);
    CHECK(testutil::params_equal(ck.state.params, st.params));
    REQUIRE(ck.refusal.has_value());
    CHECK((ck.refusal->direction.array() == some_refusal(cfg.d_model).direction.array()).all());
    CHECK(ck.refusal->version == 4);
    const std::vector<int> toks{1, 20, 30, 3, 40, 2};
    CHECK((forward(st, toks).logits.array() == forward(ck.state, toks).logits.array()).all());
}

TEST_CASE("saving twice gives identical bytes") {
    const auto st = testutil::tiny_model<float>(testutil::tiny_config(214), 3);
    const auto a = scratch("twice-a"), b = scratch("twice-b");
    save_checkpoint(st, a);
    save_checkpoint(st, b);
    CHECK(slurp(a / kBlobName) == slurp(b / kBlobName));
    CHECK(slurp(a / kManifestName) == slurp(b / kManifestName));
    CHECK_FALSE(load_checkpoint<float>(a).refusal.has_value());
}

TEST_CASE("corrupted checkpoints are rejected") {
    const auto st = testutil::tiny_model<float>(testutil::tiny_config(214), 3);
    const auto dir = scratch("corrupt");
    save_checkpoint(st, std::optional(some_refusal(8)), dir);
    const auto blob = slurp(dir / kBlobName);
    const auto man = slurp(dir / kManifestName);

    SECTION("flipped byte") {
        auto b = blob;
        b[b.size() / 2] ^= 0x10;
        spit(dir / kBlobName, b);
        CHECK_THROWS_AS(load_checkpoint<float>(dir), CheckpointError);
    }
    SECTION("truncated blob") {
        spit(dir / kBlobName, blob.substr(0, blob.size() - 4));
        CHECK_THROWS_AS(load_checkpoint<float>(dir), CheckpointError);
    }
    SECTION("trailing data") {
        spit(dir / kBlobName, blob + std::string(4, '\0'));
        CHECK_THROWS_AS(load_checkpoint<float>(dir), CheckpointError);
    }
    SECTION("version mismatch") {
        auto m = man;
        m.replace(0, m.find('\n'), "reft-checkpoint 99");
        spit(dir / kManifestName, m);
        CHECK_THROWS_AS(load_checkpoint<float>(dir), CheckpointVersionError);
    }
    SECTION("missing end marker") {
        spit(dir / kManifestName, man.substr(0, man.rfind("end")));
        CHECK_THROWS_AS(load_checkpoint<float>(dir), CheckpointError);
    }
    SECTION("missing manifest") {
        fs::remove(dir / kManifestName);
        CHECK_THROWS_AS(load_checkpoint<float>(dir), CheckpointError);
    }
    SECTION("renamed tensor") {
        auto m = man;
        const auto pos = m.find("attn.wq");
        m.replace(pos, 7, "attn.wz");
        spit(dir / kManifestName, m);
        CHECK_THROWS_AS(load_checkpoint<float>(dir), CheckpointError);
    }
}

TEST_CASE("standalone refusal feature export") {
    const auto dir = scratch("refusal");
    fs::create_directories(dir);
    const auto r = some_refusal(8);
    export_refusal_feature(r, dir / "R");
    const auto back = import_refusal_feature<float>(dir / "R");
    CHECK((back.direction.array() == r.direction.array()).all());
    CHECK(back.layer == r.layer);
    CHECK(back.n_us == r.n_us);
    CHECK(back.version == r.version);
    auto b = slurp(dir / "R.bin");
    b[0] ^= 1;
    spit(dir / "R.bin", b);
    CHECK_THROWS_AS(import_refusal_feature<float>(dir / "R"), CheckpointError);
}
