#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lpbert/commands.hpp"

namespace {

int exit_code_for(lpbert::ErrorKind kind) { return kind == lpbert::ErrorKind::usage ? 2 : 1; }

lpbert::Split parse_eval_split(const std::string& s) {
    if (s == "valid") return lpbert::Split::valid;
    if (s == "test") return lpbert::Split::test;
    throw lpbert::Error(lpbert::ErrorKind::usage, "--split must be valid or test, got " + s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LP-BERT style link prediction: ingest, pretrain, finetune, evaluate, resplit-unseen, predict"};
    app.require_subcommand(1);
    app.fallthrough();

    lpbert::GlobalOptions g;
    std::string config, out;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::vector<std::string> sets;
    auto* config_opt = app.add_option("--config", config, "YAML config file")->check(CLI::ExistingFile);
    auto* seed_opt = app.add_option("--seed", seed, "random seed");
    auto* out_opt = app.add_option("--out", out, "workspace / output directory");
    auto* threads_opt = app.add_option("--threads", threads, "evaluation threads")->check(CLI::PositiveNumber);
    app.add_flag("--force", g.force, "overwrite existing artifacts");
    app.add_option("--set", sets, "config override key=value (repeatable)");

    auto* ingest = app.add_subcommand("ingest", "load a dataset, build vocabulary and catalogs, print statistics");
    std::string dataset;
    ingest->add_option("dataset", dataset, "dataset directory")->required();

    auto* pretrain = app.add_subcommand("pretrain", "multi-task masked pre-training");

    auto* finetune = app.add_subcommand("finetune", "Siamese fine-tuning with in-batch negatives");
    lpbert::FinetuneCommandOptions ft;
    std::string ft_ckpt;
    auto* ft_ckpt_opt = finetune->add_option("--checkpoint", ft_ckpt, "starting checkpoint (default: pretrain.ckpt)");
    finetune->add_flag("--from-scratch", ft.from_scratch, "start from random initialization");

    auto* evaluate = app.add_subcommand("evaluate", "filtered ranking evaluation");
    std::string split = "test", ev_ckpt;
    evaluate->add_option("--split", split, "valid or test");
    auto* ev_ckpt_opt = evaluate->add_option("--checkpoint", ev_ckpt, "checkpoint (default: finetune.ckpt)");

    auto* resplit = app.add_subcommand("resplit-unseen", "re-split so that valid/test entities never occur in train");
    lpbert::ResplitCommandOptions rs;
    std::string rs_dataset;
    resplit->add_option("dataset", rs_dataset, "source dataset directory")->required();
    resplit->add_option("--ratio", rs.ratio, "fraction of entities held out for each of valid and test");

    auto* predict = app.add_subcommand("predict", "top-k tail entities for (head, relation, ?)");
    lpbert::PredictCommandOptions pr;
    std::string pr_ckpt;
    predict->add_option("--head", pr.head, "head entity identifier, or free text")->required();
    predict->add_option("--relation", pr.relation, "relation identifier")->required();
    predict->add_option("-k", pr.k, "number of results");
    predict->add_flag("--filtered", pr.filtered, "drop known-true completions");
    auto* pr_ckpt_opt = predict->add_option("--checkpoint", pr_ckpt, "checkpoint (default: finetune.ckpt)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*config_opt) g.config_file = config;
        if (*seed_opt) g.seed = seed;
        if (*out_opt) g.out = out;
        if (*threads_opt) g.threads = threads;
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos || eq == 0) throw lpbert::Error(lpbert::ErrorKind::usage, "--set expects key=value, got " + s);
            g.overrides[s.substr(0, eq)] = s.substr(eq + 1);
        }

        if (*ingest) {
            lpbert::cmd_ingest(g, dataset, std::cout);
        } else if (*pretrain) {
            lpbert::cmd_pretrain(g, std::cout);
        } else if (*finetune) {
            if (*ft_ckpt_opt) ft.checkpoint = ft_ckpt;
            lpbert::cmd_finetune(g, ft, std::cout);
        } else if (*evaluate) {
            lpbert::EvaluateCommandOptions ev{parse_eval_split(split), std::nullopt};
            if (*ev_ckpt_opt) ev.checkpoint = ev_ckpt;
            lpbert::cmd_evaluate(g, ev, std::cout);
        } else if (*resplit) {
            rs.dataset = rs_dataset;
            lpbert::cmd_resplit_unseen(g, rs, std::cout);
        } else if (*predict) {
            if (*pr_ckpt_opt) pr.checkpoint = pr_ckpt;
            lpbert::cmd_predict(g, pr, std::cout);
        }
    } catch (const lpbert::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
