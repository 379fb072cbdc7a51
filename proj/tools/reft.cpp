#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "reft/pipeline.hpp"

using namespace reft;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
    std::optional<double> poison_ratio, tau, lambda, alpha, temperature;
    bool sweep_layers = false;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "run config (JSON); missing keys take defaults")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "root seed");
    cmd->add_option("--mode", o.mode, "finetune mode: reft, sft-baseline, filter-only, ad-only");
    cmd->add_option("--poison-ratio", o.poison_ratio, "fraction of harmful user examples");
    cmd->add_option("--tau", o.tau, "filtering threshold");
    cmd->add_option("--lambda", o.lambda, "teacher regularizer strength");
    cmd->add_option("--alpha", o.alpha, "distillation weight");
    cmd->add_option("--temperature", o.temperature, "distillation temperature");
    cmd->add_flag("--sweep-layers", o.sweep_layers, "add a layer sweep to evaluate");
    cmd->add_option("--out", o.out, "run directory (default $" + std::string(kWorkspaceEnv) + "/<run_id>)");
}

RunConfig resolve(const Overrides& o) {
    RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
    if (o.seed) c.seed = *o.seed;
    if (o.mode) c.finetune.mode = finetune_mode_from_string(*o.mode);
    if (o.poison_ratio) c.corpus.poison_ratio = *o.poison_ratio;
    if (o.tau) c.finetune.tau = *o.tau;
    if (o.lambda) c.teacher.lambda = *o.lambda;
    if (o.alpha) c.finetune.alpha = *o.alpha;
    if (o.temperature) c.finetune.temperature = *o.temperature;
    effective(c, build_vocab()).validate();
    return c;
}

std::vector<double> parse_values(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        const double v = std::stod(item, &used);
        if (used != item.size()) throw ConfigError("bad sweep value '" + item + "'");
        out.push_back(v);
    }
    return out;
}

void print_cls(const char* what, const ClsRow& r) {
    std::printf("%s tau=%s harmful_acc=%s harmless_acc=%s total_acc=%s\n", what, fmt9(r.threshold).c_str(),
                fmt9(r.harmful_acc).c_str(), fmt9(r.harmless_acc).c_str(), fmt9(r.total_acc).c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Refusal-feature guided safe finetuning on a tiny transformer"};
    app.require_subcommand(1);
    Overrides o;
    std::string target;
    std::string axis;
    std::string values;

    auto* gen = app.add_subcommand("gen-data", "write the corpus splits and vocabulary");
    auto* pre = app.add_subcommand("pretrain", "pretrain the base model (run implicitly when missing)");
    auto* tea = app.add_subcommand("train-teacher", "teacher preparation with refusal-feature updates");
    auto* fin = app.add_subcommand("finetune", "filter user data and train the student");
    auto* eva = app.add_subcommand("evaluate", "HS, FA, classification and similarity reports");
    auto* swp = app.add_subcommand("sweep", "rerun the pipeline over one hyperparameter");
    for (auto* c : {gen, pre, tea, fin, eva, swp}) add_common(c, o);
    eva->add_option("target", target, "base, teacher, a finetune mode, or a checkpoint directory");
    swp->add_option("--axis", axis, "p, n_user, lambda, tau, alpha, temperature, cycle")->required();
    swp->add_option("--values", values, "comma separated values")->required();

    CLI11_PARSE(app, argc, argv);

    std::optional<Workspace> ws;
    try {
        const RunConfig cfg = resolve(o);
        ws = Workspace::for_run(cfg, o.out ? std::optional<fs::path>(*o.out) : std::nullopt);
        fs::create_directories(ws->dir);
        echo_config(*ws, cfg);

        if (*gen) {
            const auto r = run_stage(*ws, "gen-data", [&] { return gen_data(cfg, *ws); });
            for (const auto& s : r.splits)
                std::printf("%-9s count=%zu harmful=%zu digest=%s\n", s.name.c_str(), s.count, s.harmful,
                            s.digest.c_str());
            std::printf("vocab     digest=%s\n", r.vocab_digest.c_str());
        } else if (*pre) {
            run_stage(*ws, "pretrain", [&] {
                const auto lc = load_corpus(*ws);
                ensure_base(cfg, lc.vocab, *ws);
                return 0;
            });
            std::printf("base checkpoint: %s\n", ws->checkpoint("base").c_str());
        } else if (*tea) {
            const auto r = run_stage(*ws, "train-teacher", [&] { return train_teacher_stage(cfg, *ws); });
            std::printf("teacher steps=%zu refusal_version=%llu\n", r.steps,
                        static_cast<unsigned long long>(r.r_version));
            print_cls("cls_test", r.cls);
        } else if (*fin) {
            const auto r = run_stage(*ws, "finetune", [&] { return finetune_stage(cfg, *ws); });
            std::printf("mode=%s steps=%zu user_harmful=%zu user_harmless=%zu kept_harmful=%zu kept_harmless=%zu\n",
                        std::string(to_string(cfg.finetune.mode)).c_str(), r.steps, r.user_harmful, r.user_harmless,
                        r.kept_harmful, r.kept_harmless);
        } else if (*eva) {
            if (target.empty()) target = student_name(cfg.finetune.mode);
            EvaluateOptions eo;
            eo.sweep_layers = o.sweep_layers;
            const auto rep = run_stage(*ws, "evaluate", [&] { return evaluate_stage(cfg, *ws, target, eo); });
            std::printf("target=%s hs=%s fa=%s\n", target.c_str(), fmt9(*rep.hs).c_str(), fmt9(*rep.fa).c_str());
            print_cls("cls_test", *rep.cls);
            print_cls("cls_best", rep.cls_table->best);
            if (!rep.layer_sweep.empty()) std::printf("best_layer=%d\n", best_layer(rep.layer_sweep));
        } else if (*swp) {
            const auto vals = parse_values(values);
            std::printf("%s,status,hs,fa,harmful_acc,harmless_acc\n", axis.c_str());
            const auto rows = run_stage(*ws, "sweep", [&] {
                return sweep_stage(cfg, *ws, axis, vals, [&](const SweepRow& r) {
                    std::printf("%s,%s,%s,%s,%s,%s\n", fmt9(r.value).c_str(), r.status.c_str(), fmt9(r.hs).c_str(),
                                fmt9(r.fa).c_str(), fmt9(r.harmful_acc).c_str(), fmt9(r.harmless_acc).c_str());
                    std::fflush(stdout);
                });
            });
            for (const auto& r : rows)
                if (r.status != "ok") return 1;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
