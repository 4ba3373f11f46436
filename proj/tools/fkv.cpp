// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

// fkv: pipeline driver. One subcommand per stage; every stage works inside one run directory.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fkv/error.hpp"
#include "fkv/parallel.hpp"
#include "fkv/pipeline.hpp"

namespace {

enum Exit { ok = 0, usage = 1, invariant = 2, missing = 3 };

int exit_for(fkv::ErrorKind k)
{
    switch (k) {
    case fkv::ErrorKind::invalid_argument:
        return usage;
    case fkv::ErrorKind::missing_artifact:
        return missing;
    case fkv::ErrorKind::invariant:
    case fkv::ErrorKind::format:
        return invariant;
    }
    return invariant;
}

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c)
{
    cmd->add_option("--config", c.config, "run config (JSON, or a stage stamp)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "master seed; re-derives every sub-seed");
    cmd->add_option("--threads", c.threads, "worker threads (default: FKV_THREADS or 1)")->check(CLI::PositiveNumber);
    cmd->add_option("--out", c.out, "run directory (overrides output_dir)");
}

fkv::Pipeline make_pipeline(const Common& c)
{
    fkv::RunConfig cfg = c.config.empty() ? fkv::config_from_json(fkv::json::object(), c.seed)
                                          : fkv::load_config_file(c.config, c.seed);
    if (!c.out.empty()) {
        cfg.output_dir = c.out;
    }
    const fkv::fs::path dir = cfg.output_dir;
    return fkv::Pipeline(std::move(cfg), dir, c.threads.value_or(fkv::default_threads()));
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"fkv: foresight KV-cache eviction lab"};
    app.require_subcommand(1);

    Common common;
    auto* gen = app.add_subcommand("gen-data", "build the toy model and the corpora");
    auto* labels = app.add_subcommand("golden-labels", "run golden eviction and store ranking labels");
    auto* sft = app.add_subcommand("train-sft", "fit the scorers to the golden labels");
    auto* rl = app.add_subcommand("train-rl", "GRPO fine-tuning from the SFT checkpoint");
    auto* eval = app.add_subcommand("eval", "loss-ratio, entropy-bucket, similarity and capacity report");
    auto* dump = app.add_subcommand("dump-attn", "write full-pass attention maps as CSV");
    auto* cmp = app.add_subcommand("compare", "per-cell deltas between two report CSVs");
    for (auto* c : {gen, labels, sft, rl, eval, dump}) {
        add_common(c, common);
    }

    std::size_t dump_seq = 0;
    std::optional<std::size_t> dump_layer;
    std::optional<std::size_t> dump_head;
    dump->add_option("--sequence", dump_seq, "corpus sequence index");
    dump->add_option("--layer", dump_layer, "layer (default: all)");
    dump->add_option("--head", dump_head, "query head (default: all)");

    std::string report_a;
    std::string report_b;
    std::string cmp_out;
    cmp->add_option("a", report_a, "baseline report.csv")->required();
    cmp->add_option("b", report_b, "candidate report.csv")->required();
    cmp->add_option("--out", cmp_out, "also write the comparison to this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ok : usage;
    }

    try {
        if (cmp->parsed()) {
            const std::string text = fkv::compare_report_files(report_a, report_b);
            std::cout << text;
            if (!cmp_out.empty()) {
                fkv::write_atomic(cmp_out, text);
            }
            return ok;
        }
        const fkv::Pipeline p = make_pipeline(common);
        if (gen->parsed()) {
            p.gen_data();
        } else if (labels->parsed()) {
            p.golden_labels();
        } else if (sft->parsed()) {
            p.train_sft();
        } else if (rl->parsed()) {
            p.train_rl();
        } else if (eval->parsed()) {
            std::cout << fkv::report_text(p.eval());
        } else if (dump->parsed()) {
            const auto files = p.dump_attn(dump_seq, dump_layer, dump_head);
            std::cerr << "fkv: wrote " << files.size() << " attention maps\n";
        }
        std::cerr << "fkv: " << app.get_subcommands().front()->get_name() << " done in " << p.dir().string() << "\n";
        return ok;
    } catch (const fkv::Error& e) {
        std::cerr << "fkv: error: " << e.what() << "\n";
        return exit_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "fkv: error: " << e.what() << "\n";
        return invariant;
    }
}
