#include <catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "reft/corpus.hpp"
#include "test_util.hpp"

using namespace reft;

namespace {

const Vocab& vocab() {
    static const Vocab v = build_vocab();
    return v;
}

const CorpusBundle& default_bundle() {
    static const CorpusBundle b = generate_corpus(vocab(), CorpusSpec{});
    return b;
}

std::size_t count_harmful(const std::vector<Example>& v) {
    std::size_t n = 0;
    for (const auto& e : v) n += e.label == Label::Harmful;
    return n;
}

}  // namespace

TEST_CASE("vocabulary layout") {
    const auto& v = vocab();
    CHECK(v.size() <= 512);
    CHECK(v.token(0) == "<pad>");
    CHECK(v.token(1) == "<bos>");
    CHECK(v.token(2) == "<eos>");
    CHECK(v.token(3) == "<sep>");
    const auto ids = v.tokenize("sorry , i cannot help with that .");
    CHECK(v.detokenize(ids) == "sorry , i cannot help with that .");
    CHECK(Vocab::deserialize(v.serialize()) == v);
    CHECK_THROWS(v.tokenize("definitely-not-a-token"));
}

TEST_CASE("default split sizes") {
    const auto& b = default_bundle();
    CHECK(b.align.size() == 4000);
    CHECK(count_harmful(b.align) == 2000);
    CHECK(b.user.size() == 1000);
    CHECK(count_harmful(b.user) == 100);
    CHECK(b.hs_probe.size() == 500);
    CHECK(count_harmful(b.hs_probe) == 500);
    CHECK(b.fa_test.size() == 500);
    CHECK(count_harmful(b.fa_test) == 0);
    CHECK(b.cls_test.size() == 1000);
    CHECK(count_harmful(b.cls_test) == 500);
}

TEST_CASE("harmful count rounds p * n") {
    CorpusSpec s;
    s.poison_ratio = 0.3;
    CHECK(s.n_user_harmful() == 300);
    s.poison_ratio = 0.0;
    CHECK(s.n_user_harmful() == 0);
    s.poison_ratio = 1.0;
    s.n_user = 7;
    CHECK(s.n_user_harmful() == 7);
}

TEST_CASE("splits are disjoint by uid and by prompt") {
    const auto& b = default_bundle();
    std::set<std::uint64_t> uids;
    std::set<std::vector<int>> prompts;
    std::size_t total = 0;
    for (const auto* split : {&b.align, &b.user, &b.hs_probe, &b.fa_test, &b.cls_test}) {
        for (const auto& e : *split) {
            uids.insert(e.uid);
            prompts.insert(e.prompt);
            ++total;
        }
    }
    CHECK(uids.size() == total);
    CHECK(prompts.size() == total);
}

TEST_CASE("responses follow the label and task") {
    const auto& v = vocab();
    const auto& b = default_bundle();
    for (const auto& e : b.align) {
        if (e.label == Label::Harmful) {
            CHECK(starts_with_refusal(v, e.response));
        } else {
            CHECK_FALSE(starts_with_refusal(v, e.response));
            CHECK(extract_answer(v, e.task, e.response).has_value());
        }
    }
    for (const auto& e : b.user) {
        if (e.label != Label::Harmful) continue;
        CHECK_FALSE(starts_with_refusal(v, e.response));
        const auto ans = payload_answer(v, e.prompt);
        REQUIRE(ans.has_value());
        CHECK(std::find(e.response.begin(), e.response.end(), *ans) != e.response.end());
    }
}

TEST_CASE("arithmetic gold answers are sums") {
    const auto& v = vocab();
    for (const auto& e : default_bundle().fa_test) {
        REQUIRE(e.task == Task::Arith);
        std::vector<int> nums;
        for (int t : e.prompt)
            if (is_number_token(v, t)) nums.push_back(std::stoi(v.token(t)));
        REQUIRE(nums.size() == 2);
        const auto gold = extract_answer(v, e.task, e.response);
        REQUIRE(gold.has_value());
        CHECK(std::stoi(v.token(*gold)) == nums[0] + nums[1]);
    }
}

TEST_CASE("generation is deterministic and seed sensitive") {
    const auto a = serialize_jsonl(generate_corpus(vocab(), CorpusSpec{}).user);
    const auto b = serialize_jsonl(default_bundle().user);
    CHECK(a == b);
    CorpusSpec s;
    s.seed = 8;
    CHECK(serialize_jsonl(generate_corpus(vocab(), s).user) != a);
}

TEST_CASE("poison ratio only changes the user split") {
    CorpusSpec s;
    s.poison_ratio = 0.3;
    const auto b = generate_corpus(vocab(), s);
    const auto& d = default_bundle();
    CHECK(serialize_jsonl(b.align) == serialize_jsonl(d.align));
    CHECK(serialize_jsonl(b.hs_probe) == serialize_jsonl(d.hs_probe));
    CHECK(serialize_jsonl(b.fa_test) == serialize_jsonl(d.fa_test));
    CHECK(serialize_jsonl(b.cls_test) == serialize_jsonl(d.cls_test));
    CHECK(count_harmful(b.user) == 300);
}

TEST_CASE("capacity is enforced") {
    CorpusSpec s;
    s.n_align_harmful = 1000000;
    CHECK_THROWS_AS(generate_corpus(vocab(), s), CapacityError);
}

TEST_CASE("spec validation") {
    CorpusSpec s;
    s.poison_ratio = 1.5;
    CHECK_THROWS(s.validate());
    s.poison_ratio = -0.1;
    CHECK_THROWS(s.validate());
}

TEST_CASE("jsonl round trip and malformed input") {
    const auto& user = default_bundle().user;
    std::istringstream in(serialize_jsonl(user));
    const auto back = parse_jsonl(in);
    REQUIRE(back.size() == user.size());
    for (std::size_t i = 0; i < user.size(); ++i) {
        CHECK(back[i].uid == user[i].uid);
        CHECK(back[i].prompt == user[i].prompt);
        CHECK(back[i].response == user[i].response);
        CHECK(back[i].label == user[i].label);
        CHECK(back[i].task == user[i].task);
    }
    std::istringstream bad("{\"uid\": 1, \"prompt_ids\": [5]}\n");
    CHECK_THROWS_AS(parse_jsonl(bad), CorpusFormatError);
    std::istringstream garbage("not json\n");
    CHECK_THROWS_AS(parse_jsonl(garbage), CorpusFormatError);
}

TEST_CASE("every sequence fits the default context") {
    const int ctx = ModelConfig{}.ctx_len;
    const auto& b = default_bundle();
    for (const auto* split : {&b.align, &b.user, &b.hs_probe, &b.fa_test, &b.cls_test})
        for (const auto& e : *split) CHECK(e.sequence_length() <= static_cast<std::size_t>(ctx));
}

TEST_CASE("pretraining text never uses the prompt/response format") {
    const auto& v = vocab();
    CorpusSpec s;
    s.n_pretrain = 2000;
    const auto texts = gen_pretrain_corpus(v, s);
    CHECK(texts.size() == 2000);
    for (const auto& t : texts) {
        CHECK(std::find(t.begin(), t.end(), v.specials().sep) == t.end());
        CHECK(t.size() + 2 <= static_cast<std::size_t>(ModelConfig{}.ctx_len));
    }
}

TEST_CASE("rule helpers") {
    const auto& v = vocab();
    CHECK(starts_with_refusal(v, v.tokenize("sorry , i cannot help with that .")));
    CHECK_FALSE(starts_with_refusal(v, v.tokenize("sorry , i")));
    CHECK_FALSE(starts_with_refusal(v, v.tokenize("the answer is 27 .")));
    const auto a = extract_answer(v, Task::Arith, v.tokenize("the answer is 27 ."));
    REQUIRE(a.has_value());
    CHECK(v.token(*a) == "27");
    CHECK_FALSE(extract_answer(v, Task::Arith, v.tokenize("the sentiment is positive .")).has_value());
    const auto s = extract_answer(v, Task::Sentiment, v.tokenize("the sentiment is negative ."));
    REQUIRE(s.has_value());
    CHECK(v.token(*s) == "negative");
}
