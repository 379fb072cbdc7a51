#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "reft/pipeline.hpp"
#include "test_util.hpp"

using namespace reft;

namespace {

RunConfig tiny_run() {
    RunConfig c;
    c.seed = 3;
    c.corpus = testutil::small_spec();
    c.model = testutil::tiny_config(0);
    c.pretrain.steps = 20;
    c.pretrain.batch = 4;
    c.teacher.epochs = 1;
    c.teacher.cycle_batches = 2;
    c.finetune.epochs = 1;
    c.eval.ref_prompts_per_class = 10;
    return c;
}

Workspace fresh(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("reft-pipeline-test-" + name);
    fs::remove_all(p);
    return {p};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    return n;
}

}  // namespace

TEST_CASE("config round trip keeps every default") {
    const RunConfig c;
    const auto j = to_json(c);
    const auto back = config_from_json(nlohmann::json::parse(j.dump()));
    CHECK(to_json(back).dump() == j.dump());
    CHECK(j["teacher"]["lambda"] == 0.1);
    CHECK(j["teacher"]["cycle_batches"] == 6);
    CHECK(j["teacher"]["batch_per_class"] == 5);
    CHECK(j["finetune"]["tau"] == 0.9);
    CHECK(j["finetune"]["alpha"] == 0.1);
    CHECK(j["finetune"]["temperature"] == 1.0);
}

TEST_CASE("partial configs fill defaults and typos are rejected") {
    const auto c = config_from_json(nlohmann::json::parse(R"({"seed": 9, "finetune": {"mode": "ad-only"}})"));
    CHECK(c.seed == 9);
    CHECK(c.finetune.mode == FinetuneMode::AdOnly);
    CHECK(c.teacher.lambda == 0.1);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"teacher": {"lamda": 1}})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"finetune": {"mode": "both"}})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"seed": "x"})")), ConfigError);
}

TEST_CASE("stage seeds do not depend on probe sizes") {
    const auto v = build_vocab();
    RunConfig a, b;
    b.corpus.n_hs_probe = 7;
    CHECK(effective(a, v).teacher.seed == effective(b, v).teacher.seed);
    CHECK(effective(a, v).finetune.seed == effective(b, v).finetune.seed);
    CHECK(effective(a, v).teacher.seed != effective(a, v).finetune.seed);
}

TEST_CASE("gen-data writes every split and is repeatable") {
    const auto ws = fresh("gen");
    auto c = tiny_run();
    const auto a = gen_data(c, ws);
    for (const char* s : kSplitNames) CHECK(fs::exists(ws.corpus() / (std::string(s) + ".jsonl")));
    CHECK(fs::exists(ws.corpus() / "vocab.txt"));
    CHECK(fs::exists(ws.dir / "config.json"));
    const auto b = gen_data(c, ws);
    for (std::size_t i = 0; i < a.splits.size(); ++i) CHECK(a.splits[i].digest == b.splits[i].digest);

    c.corpus = CorpusSpec{};
    c.corpus.poison_ratio = 0.3;
    const auto big = gen_data(c, fresh("gen-big"));
    CHECK(big.splits[1].name == "user");
    CHECK(big.splits[1].count == 1000);
    CHECK(big.splits[1].harmful == 300);
}

TEST_CASE("stages report missing inputs") {
    const auto ws = fresh("missing");
    const auto c = tiny_run();
    CHECK_THROWS_WITH(train_teacher_stage(c, ws), Catch::Matchers::ContainsSubstring("run gen-data first"));
    gen_data(c, ws);
    CHECK_THROWS_WITH(finetune_stage(c, ws), Catch::Matchers::ContainsSubstring("run train-teacher first"));
    CHECK_THROWS_AS(evaluate_stage(c, ws, "teacher"), MissingInputError);
}

TEST_CASE("failed stages leave a marker") {
    const auto ws = fresh("marker");
    CHECK_THROWS(run_stage(ws, "train-teacher", [&] { return train_teacher_stage(tiny_run(), ws); }));
    CHECK(fs::exists(ws.dir / "train-teacher.failed"));
    gen_data(tiny_run(), ws);
    run_stage(ws, "train-teacher", [&] { return train_teacher_stage(tiny_run(), ws); });
    CHECK_FALSE(fs::exists(ws.dir / "train-teacher.failed"));
}

TEST_CASE("tiny end-to-end pipeline") {
    const auto ws = fresh("e2e");
    auto c = tiny_run();
    gen_data(c, ws);
    const auto t = train_teacher_stage(c, ws);
    CHECK(t.steps == 8);
    CHECK(t.r_version == 4);
    CHECK(fs::exists(ws.logs() / "teacher.csv"));
    CHECK(line_count(ws.logs() / "teacher.csv") == 9);

    SECTION("reft writes one decision per user example") {
        const auto r = finetune_stage(c, ws);
        REQUIRE(r.filter.has_value());
        CHECK(line_count(ws.reports() / "decisions-reft.csv") == c.corpus.n_user + 1);
        CHECK(r.kept_harmful + r.kept_harmless <= c.corpus.n_user);
        const auto rep = evaluate_stage(c, ws, "reft", {true, true});
        CHECK(*rep.hs >= 0.0);
        CHECK(*rep.hs <= 1.0);
        CHECK(*rep.fa >= 0.0);
        CHECK(*rep.fa <= 1.0);
        CHECK(fs::exists(ws.reports() / "student-reft" / "decisions.csv"));
        CHECK(fs::exists(ws.reports() / "student-reft" / "layer_sweep.csv"));
    }
    SECTION("baseline writes no decisions") {
        c.finetune.mode = FinetuneMode::SftBaseline;
        c.corpus.poison_ratio = 0.0;
        gen_data(c, ws);
        const auto r = finetune_stage(c, ws);
        CHECK_FALSE(r.filter.has_value());
        CHECK_FALSE(fs::exists(ws.reports() / "decisions-sft-baseline.csv"));
    }
    SECTION("evaluation is byte-identical on repeat") {
        evaluate_stage(c, ws, "teacher", {true, true});
        const auto a = slurp(ws.reports() / "teacher" / "report.json");
        const auto a_csv = slurp(ws.reports() / "teacher" / "sim_distribution.csv");
        evaluate_stage(c, ws, "teacher", {true, true});
        CHECK(slurp(ws.reports() / "teacher" / "report.json") == a);
        CHECK(slurp(ws.reports() / "teacher" / "sim_distribution.csv") == a_csv);
        const auto j = nlohmann::json::parse(a);
        CHECK(j["meta"]["refusal_source"] == "checkpoint");
        CHECK(j["layer_sweep"].size() == 2);
        CHECK(j["cls_table"].size() == 41);
    }
    SECTION("lambda zero logs zero regularizer columns") {
        c.teacher.lambda = 0.0;
        train_teacher_stage(c, ws);
        std::ifstream in(ws.logs() / "teacher.csv");
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            std::vector<std::string> cols;
            std::stringstream ss(line);
            for (std::string x; std::getline(ss, x, ',');) cols.push_back(x);
            REQUIRE(cols.size() == 9);
            CHECK(cols[4] == "0");
            CHECK(cols[5] == "0");
        }
    }
}

TEST_CASE("identical runs give identical bytes") {
    const auto c = tiny_run();
    std::vector<std::string> blobs;
    for (const char* name : {"det-a", "det-b"}) {
        const auto ws = fresh(name);
        gen_data(c, ws);
        train_teacher_stage(c, ws);
        finetune_stage(c, ws);
        evaluate_stage(c, ws, "reft");
        blobs.push_back(slurp(ws.checkpoint("teacher") / kBlobName) + slurp(ws.checkpoint("student-reft") / kBlobName) +
                        slurp(ws.reports() / "student-reft" / "report.json") +
                        slurp(ws.reports() / "decisions-reft.csv"));
    }
    CHECK(blobs[0] == blobs[1]);
}

TEST_CASE("a single-value sweep equals a direct run") {
    auto c = tiny_run();
    const auto ws = fresh("sweep");
    const auto rows = sweep_stage(c, ws, "alpha", {0.1});
    REQUIRE(rows.size() == 1);
    REQUIRE(rows[0].status == "ok");
    CHECK(fs::exists(ws.reports() / "sweep-alpha.csv"));

    const auto direct = fresh("sweep-direct");
    gen_data(c, direct);
    train_teacher_stage(c, direct);
    finetune_stage(c, direct);
    const auto rep = evaluate_stage(c, direct, "reft");
    CHECK(*rep.hs == rows[0].hs);
    CHECK(*rep.fa == rows[0].fa);

    const auto bad = sweep_stage(c, fresh("sweep-bad"), "n_user", {0.5});
    CHECK(bad[0].status.rfind("failed", 0) == 0);
    CHECK_THROWS_AS(sweep_stage(c, ws, "depth", {1}), ConfigError);
}
