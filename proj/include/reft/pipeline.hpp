#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "reft/checkpoint.hpp"
#include "reft/corpus.hpp"
#include "reft/eval.hpp"
#include "reft/finetune.hpp"
#include "reft/model.hpp"
#include "reft/pretrain.hpp"
#include "reft/teacher.hpp"

namespace reft {

namespace fs = std::filesystem;

inline constexpr const char* kWorkspaceEnv = "REFT_WORKSPACE";

struct MissingInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EvalOptions {
    std::size_t grid_points = 41;
    std::vector<int> sweep_layers;  // empty = every layer
    std::size_t max_new_tokens = kMaxNewTokens;
    std::size_t ref_prompts_per_class = 500;  // for models without an embedded refusal feature
};

/// Everything a run needs. Stage seeds are derived from `seed`.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string run_id = "default";
    CorpusSpec corpus;
    ModelConfig model;
    PretrainConfig pretrain;
    TeacherConfig teacher;
    FinetuneConfig finetune;
    EvalOptions eval;

    void validate() const {
        corpus.validate();
        model.validate();
        pretrain.validate();
        teacher.validate();
        finetune.validate();
        if (eval.grid_points < 2) throw ConfigError("eval.grid_points must be >= 2");
        for (int l : eval.sweep_layers)
            if (l < 1 || l > model.n_layers) throw ConfigError("eval.sweep_layers entry out of range");
        if (run_id.empty() || run_id.find("..") != std::string::npos) throw ConfigError("invalid run_id");
    }
};

/// Fills the derived fields: vocab size and per-stage seeds.
inline RunConfig effective(RunConfig c, const Vocab& vocab) {
    c.model.vocab_size = static_cast<int>(vocab.size());
    c.corpus.seed = derive_seed(c.seed, "corpus");
    c.pretrain.seed = derive_seed(c.seed, "pretrain");
    c.teacher.seed = derive_seed(c.seed, "teacher");
    c.finetune.seed = derive_seed(c.seed, "finetune");
    return c;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

using ojson = nlohmann::ordered_json;

inline ojson to_json(const RunConfig& c) {
    ojson j;
    j["seed"] = c.seed;
    j["run_id"] = c.run_id;
    j["corpus"] = {{"n_align_harmful", c.corpus.n_align_harmful},
                   {"n_align_harmless", c.corpus.n_align_harmless},
                   {"n_user", c.corpus.n_user},
                   {"poison_ratio", round9(c.corpus.poison_ratio)},
                   {"user_task", std::string(to_string(c.corpus.user_task))},
                   {"n_hs_probe", c.corpus.n_hs_probe},
                   {"n_fa_test", c.corpus.n_fa_test},
                   {"n_cls_per_class", c.corpus.n_cls_per_class},
                   {"n_pretrain", c.corpus.n_pretrain}};
    j["model"] = {{"n_layers", c.model.n_layers}, {"d_model", c.model.d_model},   {"n_heads", c.model.n_heads},
                  {"d_ff", c.model.d_ff},         {"ctx_len", c.model.ctx_len},   {"tap_layer", c.model.tap_layer},
                  {"adapter_rank", c.model.adapter_rank}};
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"batch", c.pretrain.batch},
                     {"learning_rate", round9(c.pretrain.learning_rate)},
                     {"weight_decay", round9(c.pretrain.weight_decay)}};
    j["teacher"] = {{"lambda", round9(c.teacher.lambda)},
                    {"batch_per_class", c.teacher.batch_per_class},
                    {"cycle_batches", c.teacher.cycle_batches},
                    {"learning_rate", round9(c.teacher.learning_rate)},
                    {"weight_decay", round9(c.teacher.weight_decay)},
                    {"epochs", c.teacher.epochs},
                    {"max_steps", c.teacher.max_steps}};
    j["finetune"] = {{"mode", std::string(to_string(c.finetune.mode))},
                     {"tau", round9(c.finetune.tau)},
                     {"alpha", round9(c.finetune.alpha)},
                     {"temperature", round9(c.finetune.temperature)},
                     {"learning_rate", round9(c.finetune.learning_rate)},
                     {"weight_decay", round9(c.finetune.weight_decay)},
                     {"epochs", c.finetune.epochs},
                     {"user_batch", c.finetune.user_batch},
                     {"align_batch", c.finetune.align_batch},
                     {"max_steps", c.finetune.max_steps}};
    j["eval"] = {{"grid_points", c.eval.grid_points},
                 {"sweep_layers", c.eval.sweep_layers},
                 {"max_new_tokens", c.eval.max_new_tokens},
                 {"ref_prompts_per_class", c.eval.ref_prompts_per_class}};
    return j;
}

namespace detail {

/// Reads known keys of one section; unknown keys are an error so typos surface.
class Section {
public:
    Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    }
    template <class V>
    void get(const char* key, V& out) {
        seen_.push_back(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<V>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config key '" + name_ + "." + key + "': " + e.what());
        }
    }
    void mark(const char* key) { seen_.push_back(key); }
    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            (void)v;
            if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
                throw ConfigError("unknown config key '" + (name_.empty() ? k : name_ + "." + k) + "'");
        }
    }

private:
    const nlohmann::json& j_;
    std::string name_;
    std::vector<std::string> seen_;
};

inline const nlohmann::json& sub(const nlohmann::json& j, const char* key) {
    static const nlohmann::json empty = nlohmann::json::object();
    return j.contains(key) ? j.at(key) : empty;
}

}  // namespace detail

/// Missing keys keep their defaults.
inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::Section top(j, "");
    top.get("seed", c.seed);
    top.get("run_id", c.run_id);
    for (const char* s : {"corpus", "model", "pretrain", "teacher", "finetune", "eval"}) top.mark(s);
    top.finish();

    detail::Section co(detail::sub(j, "corpus"), "corpus");
    co.get("n_align_harmful", c.corpus.n_align_harmful);
    co.get("n_align_harmless", c.corpus.n_align_harmless);
    co.get("n_user", c.corpus.n_user);
    co.get("poison_ratio", c.corpus.poison_ratio);
    std::string task(to_string(c.corpus.user_task));
    co.get("user_task", task);
    co.get("n_hs_probe", c.corpus.n_hs_probe);
    co.get("n_fa_test", c.corpus.n_fa_test);
    co.get("n_cls_per_class", c.corpus.n_cls_per_class);
    co.get("n_pretrain", c.corpus.n_pretrain);
    co.finish();
    try {
        c.corpus.user_task = user_task_from_string(task);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }

    detail::Section mo(detail::sub(j, "model"), "model");
    mo.get("n_layers", c.model.n_layers);
    mo.get("d_model", c.model.d_model);
    mo.get("n_heads", c.model.n_heads);
    mo.get("d_ff", c.model.d_ff);
    mo.get("ctx_len", c.model.ctx_len);
    mo.get("tap_layer", c.model.tap_layer);
    mo.get("adapter_rank", c.model.adapter_rank);
    mo.finish();

    detail::Section pr(detail::sub(j, "pretrain"), "pretrain");
    pr.get("steps", c.pretrain.steps);
    pr.get("batch", c.pretrain.batch);
    pr.get("learning_rate", c.pretrain.learning_rate);
    pr.get("weight_decay", c.pretrain.weight_decay);
    pr.finish();

    detail::Section te(detail::sub(j, "teacher"), "teacher");
    te.get("lambda", c.teacher.lambda);
    te.get("batch_per_class", c.teacher.batch_per_class);
    te.get("cycle_batches", c.teacher.cycle_batches);
    te.get("learning_rate", c.teacher.learning_rate);
    te.get("weight_decay", c.teacher.weight_decay);
    te.get("epochs", c.teacher.epochs);
    te.get("max_steps", c.teacher.max_steps);
    te.finish();

    detail::Section fi(detail::sub(j, "finetune"), "finetune");
    std::string mode(to_string(c.finetune.mode));
    fi.get("mode", mode);
    fi.get("tau", c.finetune.tau);
    fi.get("alpha", c.finetune.alpha);
    fi.get("temperature", c.finetune.temperature);
    fi.get("learning_rate", c.finetune.learning_rate);
    fi.get("weight_decay", c.finetune.weight_decay);
    fi.get("epochs", c.finetune.epochs);
    fi.get("user_batch", c.finetune.user_batch);
    fi.get("align_batch", c.finetune.align_batch);
    fi.get("max_steps", c.finetune.max_steps);
    fi.finish();
    try {
        c.finetune.mode = finetune_mode_from_string(mode);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }

    detail::Section ev(detail::sub(j, "eval"), "eval");
    ev.get("grid_points", c.eval.grid_points);
    ev.get("sweep_layers", c.eval.sweep_layers);
    ev.get("max_new_tokens", c.eval.max_new_tokens);
    ev.get("ref_prompts_per_class", c.eval.ref_prompts_per_class);
    ev.finish();
    return c;
}

inline RunConfig load_config(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot open config " + p.string());
    try {
        return config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + p.string() + ": " + e.what());
    }
}

inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a64(to_json(c).dump()); }

// ---------------------------------------------------------------------------
// Workspace
// ---------------------------------------------------------------------------

inline fs::path workspace_root() {
    const char* env = std::getenv(kWorkspaceEnv);
    return env && *env ? fs::path(env) : fs::path("reft-workspace");
}

/// <root>/<run_id>/{corpus,checkpoints,logs,reports}
struct Workspace {
    fs::path dir;

    static Workspace for_run(const RunConfig& c, const std::optional<fs::path>& out = std::nullopt) {
        return {out ? *out : workspace_root() / c.run_id};
    }
    fs::path corpus() const { return dir / "corpus"; }
    fs::path checkpoints() const { return dir / "checkpoints"; }
    fs::path logs() const { return dir / "logs"; }
    fs::path reports() const { return dir / "reports"; }
    fs::path checkpoint(std::string_view name) const { return checkpoints() / std::string(name); }
};

inline void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    detail::write_file(p, text);
}

inline std::string read_text(const fs::path& p) {
    if (!fs::exists(p)) throw MissingInputError("missing " + p.string());
    return detail::read_file(p);
}

/// Runs `fn`; on failure leaves <dir>/<stage>.failed holding the message.
template <class Fn>
auto run_stage(const Workspace& ws, std::string_view stage, Fn&& fn) -> decltype(fn()) {
    const fs::path marker = ws.dir / (std::string(stage) + ".failed");
    try {
        if (fs::exists(marker)) fs::remove(marker);
        return fn();
    } catch (const std::exception& e) {
        try {
            write_text(marker, std::string(e.what()) + "\n");
        } catch (...) {
        }
        throw;
    }
}

inline void echo_config(const Workspace& ws, const RunConfig& c) {
    write_text(ws.dir / "config.json", to_json(c).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

inline constexpr const char* kSplitNames[] = {"align", "user", "hs_probe", "fa_test", "cls_test"};

struct SplitInfo {
    std::string name;
    std::size_t count = 0;
    std::size_t harmful = 0;
    std::string digest;
};

struct GenDataResult {
    std::vector<SplitInfo> splits;
    std::string vocab_digest;
};

inline std::vector<Example>& split_of(CorpusBundle& b, std::string_view name) {
    if (name == "align") return b.align;
    if (name == "user") return b.user;
    if (name == "hs_probe") return b.hs_probe;
    if (name == "fa_test") return b.fa_test;
    if (name == "cls_test") return b.cls_test;
    throw std::invalid_argument("unknown split " + std::string(name));
}

inline GenDataResult gen_data(const RunConfig& cfg, const Workspace& ws) {
    const auto vocab = build_vocab();
    const auto c = effective(cfg, vocab);
    c.validate();
    auto bundle = generate_corpus(vocab, c.corpus);
    GenDataResult r;
    const auto vtext = vocab.serialize();
    write_text(ws.corpus() / "vocab.txt", vtext);
    r.vocab_digest = detail::hex64(fnv1a64(vtext));
    for (const char* name : kSplitNames) {
        const auto& split = split_of(bundle, name);
        const auto text = serialize_jsonl(split);
        write_text(ws.corpus() / (std::string(name) + ".jsonl"), text);
        SplitInfo s;
        s.name = name;
        s.count = split.size();
        for (const auto& e : split) s.harmful += e.label == Label::Harmful;
        s.digest = detail::hex64(fnv1a64(text));
        r.splits.push_back(s);
    }
    echo_config(ws, cfg);
    return r;
}

struct LoadedCorpus {
    Vocab vocab;
    CorpusBundle bundle;
};

inline LoadedCorpus load_corpus(const Workspace& ws) {
    const auto vpath = ws.corpus() / "vocab.txt";
    if (!fs::exists(vpath)) throw MissingInputError("no corpus in " + ws.dir.string() + "; run gen-data first");
    LoadedCorpus lc;
    lc.vocab = Vocab::deserialize(read_text(vpath));
    for (const char* name : kSplitNames) {
        const auto p = ws.corpus() / (std::string(name) + ".jsonl");
        if (!fs::exists(p)) throw MissingInputError("missing corpus split " + p.string() + "; run gen-data first");
        std::ifstream in(p);
        split_of(lc.bundle, name) = parse_jsonl(in);
    }
    return lc;
}

// ---------------------------------------------------------------------------
// Base model
// ---------------------------------------------------------------------------

inline std::string base_key(const RunConfig& c) {
    ojson j;
    j["seed"] = c.seed;
    j["model"] = to_json(c)["model"];
    j["pretrain"] = to_json(c)["pretrain"];
    j["n_pretrain"] = c.corpus.n_pretrain;
    return j.dump();
}

/// Pretrained base at `dir`, trained and saved there first if absent or stale.
inline ModelState<float> ensure_base(const RunConfig& cfg, const Vocab& vocab, const fs::path& dir,
                                     const fs::path& log_path) {
    const auto c = effective(cfg, vocab);
    const auto key = base_key(c);
    const auto key_path = dir / "base.key";
    if (fs::exists(key_path) && detail::read_file(key_path) == key) return load_checkpoint<float>(dir).state;
    const auto init = init_model<float>(c.model, derive_seed(c.seed, "model/init"));
    const auto pr = pretrain_base(init, vocab.specials(), gen_pretrain_corpus(vocab, c.corpus), c.pretrain);
    save_checkpoint(pr.base, dir);
    std::string log = "step,loss\n";
    for (std::size_t i = 0; i < pr.loss.size(); ++i) log += std::to_string(i + 1) + "," + fmt9(pr.loss[i]) + "\n";
    write_text(log_path, log);
    write_text(key_path, key);
    return pr.base;
}

inline ModelState<float> ensure_base(const RunConfig& cfg, const Vocab& vocab, const Workspace& ws) {
    return ensure_base(cfg, vocab, ws.checkpoint("base"), ws.logs() / "pretrain.csv");
}

// ---------------------------------------------------------------------------
// train-teacher
// ---------------------------------------------------------------------------

struct TeacherStageResult {
    ClsRow cls;
    std::size_t steps = 0;
    std::uint64_t r_version = 0;
};

inline std::string teacher_log_csv(const std::vector<TeacherLogRow>& log) {
    std::string out = "step,epoch,ce_safe,ce_unsafe,reg_safe,reg_unsafe,lambda_effective,r_version,total\n";
    for (const auto& r : log) {
        out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt9(r.ce_safe) + "," +
               fmt9(r.ce_unsafe) + "," + fmt9(r.reg_safe) + "," + fmt9(r.reg_unsafe) + "," +
               fmt9(r.lambda_effective) + "," + std::to_string(r.r_version) + "," + fmt9(r.total) + "\n";
    }
    return out;
}

inline TeacherStageResult train_teacher_stage(const RunConfig& cfg, const Workspace& ws,
                                              const std::optional<fs::path>& base_dir = std::nullopt,
                                              const std::optional<fs::path>& out_dir = std::nullopt) {
    const auto lc = load_corpus(ws);
    const auto c = effective(cfg, lc.vocab);
    c.validate();
    const auto base = base_dir ? ensure_base(cfg, lc.vocab, *base_dir, base_dir->parent_path() / "pretrain.csv")
                               : ensure_base(cfg, lc.vocab, ws);
    const auto tr = train_teacher(base, lc.vocab.specials(), lc.bundle.align, c.teacher);
    if (!tr.refusal) throw std::runtime_error("teacher run ended before the first refusal-feature update");
    save_checkpoint(tr.teacher, tr.refusal, out_dir ? *out_dir : ws.checkpoint("teacher"));
    write_text(ws.logs() / "teacher.csv", teacher_log_csv(tr.log));
    TeacherStageResult r;
    r.steps = tr.log.size();
    r.r_version = tr.refusal->version;
    r.cls = classification_table(tr.teacher, lc.vocab.specials(), *tr.refusal, lc.bundle.cls_test, {c.finetune.tau}).rows[0];
    return r;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

inline std::string student_name(FinetuneMode m) { return "student-" + std::string(to_string(m)); }

struct FinetuneStageResult {
    std::optional<FilterResult> filter;
    std::size_t steps = 0;
    std::size_t user_harmful = 0, user_harmless = 0;
    std::size_t kept_harmful = 0, kept_harmless = 0;
};

inline std::string decisions_csv(const FilterResult& f) {
    std::string out = "uid,similarity,omega,latent_label\n";
    for (const auto& d : f.decisions)
        out += std::to_string(d.uid) + "," + fmt9(d.similarity) + "," + std::to_string(d.omega) + "," +
               std::string(to_string(d.latent_label)) + "\n";
    return out;
}

inline std::string finetune_log_csv(const std::vector<FinetuneLogRow>& log) {
    std::string out = "step,epoch,kept,sft_term,align_raw,align_term,total\n";
    for (const auto& r : log)
        out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + std::to_string(r.kept) + "," +
               fmt9(r.sft_term) + "," + fmt9(r.align_raw) + "," + fmt9(r.align_term) + "," + fmt9(r.total) + "\n";
    return out;
}

inline FinetuneStageResult finetune_stage(const RunConfig& cfg, const Workspace& ws,
                                          const std::optional<fs::path>& base_dir = std::nullopt,
                                          const std::optional<fs::path>& teacher_dir = std::nullopt) {
    const auto lc = load_corpus(ws);
    const auto c = effective(cfg, lc.vocab);
    c.validate();
    const auto mode = c.finetune.mode;
    const auto base = base_dir ? ensure_base(cfg, lc.vocab, *base_dir, base_dir->parent_path() / "pretrain.csv")
                               : ensure_base(cfg, lc.vocab, ws);
    std::optional<Checkpoint<float>> teacher;
    if (needs_teacher(mode)) {
        const auto tdir = teacher_dir ? *teacher_dir : ws.checkpoint("teacher");
        if (!fs::exists(tdir / kManifestName))
            throw MissingInputError("mode '" + std::string(to_string(mode)) + "' needs a teacher; run train-teacher first");
        teacher = load_checkpoint<float>(tdir);
        if (!teacher->refusal) throw CheckpointError("teacher checkpoint has no refusal feature");
    }
    const auto& user = lc.bundle.user;
    std::vector<Example> align_subset;
    if (uses_align(mode)) {
        if (lc.bundle.align.size() < user.size()) throw std::invalid_argument("alignment corpus smaller than user data");
        align_subset.assign(lc.bundle.align.begin(), lc.bundle.align.begin() + static_cast<std::ptrdiff_t>(user.size()));
    }
    const auto res = train_student(base, teacher ? &teacher->state : nullptr, teacher ? &*teacher->refusal : nullptr,
                                   lc.vocab.specials(), user, align_subset, c.finetune);
    const auto name = student_name(mode);
    save_checkpoint(res.student, ws.checkpoint(name));
    write_text(ws.logs() / ("finetune-" + std::string(to_string(mode)) + ".csv"), finetune_log_csv(res.log));
    const auto dpath = ws.reports() / ("decisions-" + std::string(to_string(mode)) + ".csv");
    if (res.filter) {
        write_text(dpath, decisions_csv(*res.filter));
    } else if (fs::exists(dpath)) {
        fs::remove(dpath);
    }
    FinetuneStageResult r;
    r.filter = res.filter;
    r.steps = res.log.size();
    for (const auto& e : user) (e.label == Label::Harmful ? r.user_harmful : r.user_harmless)++;
    if (res.filter) {
        for (const auto& d : res.filter->decisions)
            if (d.omega) (d.latent_label == Label::Harmful ? r.kept_harmful : r.kept_harmless)++;
    } else {
        r.kept_harmful = r.user_harmful;
        r.kept_harmless = r.user_harmless;
    }
    return r;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// "base", "teacher", a finetune mode name, or a checkpoint directory.
inline fs::path resolve_target(const Workspace& ws, const std::string& target) {
    if (target == "base" || target == "teacher") return ws.checkpoint(target);
    for (auto m : {FinetuneMode::Reft, FinetuneMode::SftBaseline, FinetuneMode::FilterOnly, FinetuneMode::AdOnly})
        if (target == to_string(m) || target == student_name(m)) return ws.checkpoint(student_name(m));
    return fs::path(target);
}

/// Refusal feature of a model without one: mean difference over alignment prompts.
template <class T>
RefusalFeature<T> reference_refusal_feature(const ModelState<T>& m, const SpecialIds& sp,
                                            const std::vector<Example>& align, std::size_t per_class) {
    std::vector<Vec<T>> h, s;
    for (const auto& e : align) {
        auto& dst = e.label == Label::Harmful ? h : s;
        if (dst.size() < per_class) dst.push_back(last_token_feature(m, sp, e.prompt, m.config.tap_layer));
    }
    if (h.empty() || s.empty()) throw std::invalid_argument("alignment corpus lacks one class");
    return compute_refusal_feature(h, s, m.config.tap_layer);
}

struct EvaluateOptions {
    bool sweep_layers = false;
    bool hs_fa = true;
};

inline EvalReport evaluate_stage(const RunConfig& cfg, const Workspace& ws, const std::string& target,
                                 const EvaluateOptions& opt = {}) {
    const auto lc = load_corpus(ws);
    const auto c = effective(cfg, lc.vocab);
    const auto dir = resolve_target(ws, target);
    if (!fs::exists(dir / kManifestName)) throw MissingInputError("no checkpoint at " + dir.string());
    const auto ck = load_checkpoint<float>(dir);
    const auto& m = ck.state;
    if (m.config.vocab_size != static_cast<int>(lc.vocab.size()))
        throw CheckpointError("checkpoint vocabulary size does not match the corpus");
    const auto sp = lc.vocab.specials();

    EvalReport rep;
    if (opt.hs_fa) {
        const auto hs = harmful_score(m, lc.vocab, lc.bundle.hs_probe, c.eval.max_new_tokens);
        rep.hs = hs.score;
        rep.hs_detail = hs;
        rep.fa = finetune_accuracy(m, lc.vocab, lc.bundle.fa_test, c.eval.max_new_tokens);
    }
    const auto R = ck.refusal ? *ck.refusal
                              : reference_refusal_feature(m, sp, lc.bundle.align, c.eval.ref_prompts_per_class);
    const auto sims = prompt_similarities(m, sp, R, lc.bundle.cls_test);
    std::vector<Label> labels;
    for (const auto& e : lc.bundle.cls_test) labels.push_back(e.label);
    rep.cls = score_threshold(sims, labels, c.finetune.tau);
    rep.cls_table = classification_table_from_sims(sims, labels, threshold_grid(c.eval.grid_points));
    rep.sim_summary = similarity_summary(sims, labels);
    if (opt.sweep_layers) {
        std::vector<int> layers = c.eval.sweep_layers;
        if (layers.empty())
            for (int l = 1; l <= m.config.n_layers; ++l) layers.push_back(l);
        rep.layer_sweep = layer_sweep(m, sp, lc.bundle.cls_test, layers);
    }
    rep.meta["target"] = target;
    rep.meta["checkpoint_digest"] = detail::hex64(fnv1a64(detail::read_file(dir / kBlobName)));
    rep.meta["config_hash"] = detail::hex64(config_hash(cfg));
    rep.meta["seed"] = cfg.seed;
    rep.meta["refusal_source"] = ck.refusal ? "checkpoint" : "alignment-prompts";
    rep.meta["n_hs_probe"] = lc.bundle.hs_probe.size();
    rep.meta["n_fa_test"] = lc.bundle.fa_test.size();
    rep.meta["n_cls_test"] = lc.bundle.cls_test.size();

    std::string name = dir.filename().string();
    const auto rdir = ws.reports() / name;
    write_text(rdir / "report.json", to_json(rep).dump(2) + "\n");
    write_text(rdir / "sim_distribution.csv", sim_distribution_csv(lc.bundle.cls_test, sims));
    if (!rep.layer_sweep.empty()) write_text(rdir / "layer_sweep.csv", layer_sweep_csv(rep.layer_sweep));
    for (auto mname : {"reft", "filter-only"}) {
        const auto d = ws.reports() / ("decisions-" + std::string(mname) + ".csv");
        if (name == student_name(finetune_mode_from_string(mname)) && fs::exists(d))
            write_text(rdir / "decisions.csv", detail::read_file(d));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

inline constexpr const char* kSweepAxes[] = {"p", "n_user", "lambda", "tau", "alpha", "temperature", "cycle"};

inline void apply_axis(RunConfig& c, std::string_view axis, double v) {
    auto as_count = [&](const char* what) {
        if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError(std::string(what) + " must be a positive integer");
        return static_cast<std::size_t>(v);
    };
    if (axis == "p") c.corpus.poison_ratio = v;
    else if (axis == "n_user") c.corpus.n_user = as_count("n_user");
    else if (axis == "lambda") c.teacher.lambda = v;
    else if (axis == "tau") c.finetune.tau = v;
    else if (axis == "alpha") c.finetune.alpha = v;
    else if (axis == "temperature") c.finetune.temperature = v;
    else if (axis == "cycle") c.teacher.cycle_batches = as_count("cycle");
    else throw ConfigError("unknown sweep axis '" + std::string(axis) + "'");
}

/// Axes that leave the teacher untouched share one teacher across values.
inline bool axis_changes_teacher(std::string_view axis) { return axis == "lambda" || axis == "cycle"; }

struct SweepRow {
    double value = 0;
    std::string status = "ok";
    double hs = 0, fa = 0, harmful_acc = 0, harmless_acc = 0;
    std::size_t kept_harmful = 0, kept_harmless = 0;
};

inline std::string sweep_csv(std::string_view axis, const std::vector<SweepRow>& rows, FinetuneMode mode) {
    std::string out = std::string(axis) + ",mode,status,hs,fa,harmful_acc,harmless_acc,kept_harmful,kept_harmless\n";
    for (const auto& r : rows) {
        out += fmt9(r.value) + "," + std::string(to_string(mode)) + "," + r.status + ",";
        if (r.status == "ok") {
            out += fmt9(r.hs) + "," + fmt9(r.fa) + "," + fmt9(r.harmful_acc) + "," + fmt9(r.harmless_acc) + "," +
                   std::to_string(r.kept_harmful) + "," + std::to_string(r.kept_harmless);
        } else {
            out += ",,,,,";
        }
        out += "\n";
    }
    return out;
}

/// One full pipeline per value under <run>/sweep-<axis>/<value>; the base
/// (and the teacher, when the axis allows) is shared.
inline std::vector<SweepRow> sweep_stage(const RunConfig& cfg, const Workspace& ws, const std::string& axis,
                                         const std::vector<double>& values,
                                         const std::function<void(const SweepRow&)>& on_row = {}) {
    if (std::find(std::begin(kSweepAxes), std::end(kSweepAxes), axis) == std::end(kSweepAxes))
        throw ConfigError("unknown sweep axis '" + axis + "'");
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    const auto vocab = build_vocab();
    const auto shared_base = ws.checkpoint("base");
    const auto shared_teacher = ws.checkpoint("teacher");
    std::vector<SweepRow> rows;
    for (double v : values) {
        SweepRow row;
        row.value = v;
        try {
            RunConfig c = cfg;
            apply_axis(c, axis, v);
            effective(c, vocab).validate();
            Workspace sub{ws.dir / ("sweep-" + axis) / fmt9(v)};
            gen_data(c, sub);
            std::optional<fs::path> tdir;
            if (needs_teacher(c.finetune.mode)) {
                if (axis_changes_teacher(axis)) {
                    train_teacher_stage(c, sub, shared_base);
                } else {
                    if (!fs::exists(shared_teacher / kManifestName)) {
                        gen_data(cfg, ws);
                        train_teacher_stage(cfg, ws, shared_base);
                    }
                    tdir = shared_teacher;
                }
            }
            const auto ft = finetune_stage(c, sub, shared_base, tdir);
            if (tdir) {
                // keep the evaluated student self-contained
                fs::create_directories(sub.checkpoints());
                fs::copy(*tdir, sub.checkpoint("teacher"), fs::copy_options::recursive | fs::copy_options::overwrite_existing);
            }
            const auto rep = evaluate_stage(c, sub, student_name(c.finetune.mode));
            row.hs = *rep.hs;
            row.fa = *rep.fa;
            if (needs_teacher(c.finetune.mode)) {
                const auto t = evaluate_stage(c, sub, "teacher", {false, false});
                row.harmful_acc = t.cls->harmful_acc;
                row.harmless_acc = t.cls->harmless_acc;
            } else {
                row.harmful_acc = rep.cls->harmful_acc;
                row.harmless_acc = rep.cls->harmless_acc;
            }
            row.kept_harmful = ft.kept_harmful;
            row.kept_harmless = ft.kept_harmless;
        } catch (const std::exception& e) {
            std::string msg = e.what();
            for (auto& ch : msg)
                if (ch == ',' || ch == '\n') ch = ';';
            row.status = "failed: " + msg;
        }
        rows.push_back(row);
        if (on_row) on_row(row);
    }
    write_text(ws.reports() / ("sweep-" + axis + ".csv"), sweep_csv(axis, rows, cfg.finetune.mode));
    return rows;
}

}  // namespace reft
