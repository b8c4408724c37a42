// peftlab command-line experiment runner.
//
//   peftlab train               run one spec (build/load parent, tune, score)
//   peftlab evaluate            score an existing checkpoint on a spec's test split
//   peftlab budget              parameter-count report for a set of methods
//   peftlab sweep               budget sweep across adapter/prefix families
//   peftlab distance-experiment relative performance vs synthetic language distance
//   peftlab size-experiment     BLEU vs training-set size on nested subsets
//   peftlab report              pretty-print a results.csv

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "peftlab/peftlab.hpp"

namespace {

using namespace peftlab;

struct CommonFlags {
    std::string spec_path;
    std::string method;
    std::string out_dir;
    std::int64_t seed = -1;
    std::string precision = "f64";
};

ExperimentSpec load_spec(const CommonFlags& flags) {
    ExperimentSpec spec = ExperimentSpec::from_file(flags.spec_path);
    if (!flags.method.empty()) spec.method = flags.method;
    if (!flags.out_dir.empty()) spec.out_dir = flags.out_dir;
    if (flags.seed >= 0) spec.train_cfg.seed = static_cast<std::uint64_t>(flags.seed);
    spec.validate();
    return spec;
}

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--spec", flags.spec_path, "experiment spec (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--method", flags.method,
                    "tuning method: full | noft | adapter:<b> | prefix:<p> | bitfit:lnbias | "
                    "bitfit:lnweights | xattn");
    cmd->add_option("--out", flags.out_dir, "output directory (overrides the spec)");
    cmd->add_option("--seed", flags.seed, "training seed (overrides the spec)");
    cmd->add_option("--precision", flags.precision, "f32 or f64 (default f64)")
        ->check(CLI::IsMember({"f32", "f64"}));
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

template <class Fn>
int with_precision(const std::string& precision, Fn&& fn) {
    if (precision == "f32") return fn(float{});
    return fn(double{});
}

int cmd_train(const CommonFlags& flags) {
    const ExperimentSpec spec = load_spec(flags);
    return with_precision(flags.precision, [&](auto tag) {
        using T = decltype(tag);
        RunOptions opts;
        opts.quiet = false;
        const ExperimentResult r = run_experiment<T>(spec, opts);
        std::printf("results written to %s\n",
                    (std::filesystem::path(spec.out_dir) / "results.csv").string().c_str());
        if (r.rel_perf_pct) {
            std::printf("relative performance vs full FT: %.2f%%\n", *r.rel_perf_pct);
        }
        return 0;
    });
}

int cmd_evaluate(const CommonFlags& flags, const std::string& checkpoint) {
    const ExperimentSpec spec = load_spec(flags);
    return with_precision(flags.precision, [&](auto tag) {
        using T = decltype(tag);
        CheckpointInfo info;
        auto model = load_checkpoint<T>(checkpoint, &info);
        MaterializedTask task = materialize_task(spec.task);
        const double ppl = perplexity(model, task.splits.dev);
        const EvaluatedCorpus scored = evaluate_on(model, task.splits.test, task.vocab);
        std::printf("checkpoint %s (trained as %s)\n", checkpoint.c_str(), info.method.c_str());
        std::printf("dev perplexity %.4f\n", ppl);
        std::printf("test BLEU %.2f  chrF %.2f  (%zu sentences, BP %.4f)\n", scored.report.bleu,
                    scored.report.chrf, scored.report.n_sentences, scored.report.brevity_penalty);
        return 0;
    });
}

int cmd_budget(const CommonFlags& flags, const std::vector<std::string>& extra_methods,
               bool paper_scale) {
    ModelConfig config = ModelConfig::desk_scale();
    std::string out_dir = flags.out_dir.empty() ? "." : flags.out_dir;
    if (!flags.spec_path.empty()) {
        const ExperimentSpec spec = ExperimentSpec::from_file(flags.spec_path);
        config = spec.model;
        if (flags.out_dir.empty()) out_dir = spec.out_dir;
    }
    if (paper_scale) config = ModelConfig::paper_scale_reference();

    std::vector<std::string> methods{"full", "noft", "bitfit:lnbias", "bitfit:lnweights", "xattn"};
    for (const auto& m : extra_methods) methods.push_back(m);

    std::filesystem::create_directories(out_dir);
    const std::string csv_path = (std::filesystem::path(out_dir) / "budget.csv").string();
    std::ofstream csv(csv_path, std::ios::binary);
    csv << "method,trainable,total,ratio_pct\n";
    std::printf("%-18s %14s %14s %10s  %s\n", "method", "trainable", "total", "ratio_%",
                "breakdown");
    for (const auto& name : methods) {
        const BudgetReport report = count_trainable(config, PeftMethod::parse(name));
        std::string breakdown;
        for (const auto& [group, n] : report.breakdown) {
            if (!breakdown.empty()) breakdown += " ";
            breakdown += group + "=" + std::to_string(n);
        }
        if (report.prefix_cost) {
            breakdown += " | " + report.prefix_cost->attention_note;
        }
        std::printf("%-18s %14zu %14zu %10.4f  %s\n", name.c_str(), report.trainable, report.total,
                    report.ratio_pct, breakdown.c_str());
        char row[160];
        std::snprintf(row, sizeof(row), "%s,%zu,%zu,%.4f\n", name.c_str(), report.trainable,
                      report.total, report.ratio_pct);
        csv << row;
    }
    std::printf("budget table written to %s\n", csv_path.c_str());
    return 0;
}

int cmd_sweep(const CommonFlags& flags, const std::string& families_arg,
              const std::string& budgets_arg) {
    const ExperimentSpec base = load_spec(flags);
    std::vector<PeftKind> families;
    for (const auto& f : split_list(families_arg)) {
        if (f == "adapter") {
            families.push_back(PeftKind::adapter);
        } else if (f == "prefix") {
            families.push_back(PeftKind::prefix);
        } else {
            throw std::invalid_argument("sweep: family must be adapter or prefix, got '" + f + "'");
        }
    }
    std::vector<std::size_t> budgets;
    for (const auto& b : split_list(budgets_arg)) budgets.push_back(std::stoull(b));
    return with_precision(flags.precision, [&](auto tag) {
        using T = decltype(tag);
        RunOptions opts;
        opts.quiet = false;
        const auto rows = run_sweep<T>(base, families, budgets, opts);
        std::printf("%zu sweep rows -> %s\n", rows.size(),
                    (std::filesystem::path(base.out_dir) / "sweep.csv").string().c_str());
        return 0;
    });
}

int cmd_distance(const CommonFlags& flags, const std::string& points_arg,
                 const std::string& methods_arg) {
    const ExperimentSpec base = load_spec(flags);
    std::vector<std::pair<double, double>> points;
    for (const auto& p : split_list(points_arg)) {
        const auto colon = p.find(':');
        if (colon == std::string::npos) {
            throw std::invalid_argument("distance: points are s:r pairs, got '" + p + "'");
        }
        points.emplace_back(std::stod(p.substr(0, colon)), std::stod(p.substr(colon + 1)));
    }
    const auto methods = split_list(methods_arg);
    return with_precision(flags.precision, [&](auto tag) {
        using T = decltype(tag);
        RunOptions opts;
        opts.quiet = false;
        const DistanceOutcome outcome = run_distance_experiment<T>(base, points, methods, opts);
        std::printf("\n%-16s %10s %10s %4s\n", "method", "pearson_r", "p_value", "n");
        for (const auto& c : outcome.correlations) {
            std::printf("%-16s %10.4f %10.4f %4zu%s\n", c.method.c_str(), c.r, c.p_value, c.n,
                        c.p_value <= 0.05 ? "  *" : "");
        }
        return 0;
    });
}

int cmd_size(const CommonFlags& flags, const std::string& sizes_arg,
             const std::string& methods_arg) {
    const ExperimentSpec base = load_spec(flags);
    std::vector<std::size_t> sizes;
    for (const auto& s : split_list(sizes_arg)) sizes.push_back(std::stoull(s));
    const auto methods = split_list(methods_arg);
    return with_precision(flags.precision, [&](auto tag) {
        using T = decltype(tag);
        RunOptions opts;
        opts.quiet = false;
        const auto rows = run_size_experiment<T>(base, sizes, methods, opts);
        std::printf("%zu size rows -> %s\n", rows.size(),
                    (std::filesystem::path(base.out_dir) / "size.csv").string().c_str());
        return 0;
    });
}

int cmd_report(const std::string& out_dir) {
    const std::string path = (std::filesystem::path(out_dir) / "results.csv").string();
    const ResultsTable table = ResultsTable::load(path);
    if (table.rows().empty()) {
        std::printf("no results at %s\n", path.c_str());
        return 1;
    }
    std::printf("%-22s %-18s %12s %10s %8s %8s %10s %9s %9s\n", "name", "method", "trainable",
                "ratio_%", "BLEU", "chrF", "dev_ppl", "rel_%", "seconds");
    for (const auto& r : table.rows()) {
        char rel[32] = "-";
        if (r.rel_perf_pct) std::snprintf(rel, sizeof(rel), "%.2f", *r.rel_perf_pct);
        std::printf("%-22s %-18s %12zu %10.4f %8.2f %8.2f %10.4f %9s %9.1f\n", r.name.c_str(),
                    r.method.c_str(), r.trainable, r.ratio_pct, r.bleu, r.chrf, r.dev_ppl, rel,
                    r.seconds);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale laboratory for parameter-efficient fine-tuning of encoder-decoder "
                 "transformers"};
    app.require_subcommand(1);

    CommonFlags train_flags, eval_flags, budget_flags, sweep_flags, dist_flags, size_flags;
    std::string eval_checkpoint, report_dir = ".";
    std::vector<std::string> budget_methods;
    bool budget_paper = false;
    std::string sweep_families = "adapter,prefix", sweep_budgets;
    std::string dist_points, dist_methods = "noft";
    std::string size_sizes = "250,1000,4000", size_methods = "full,adapter:16";

    auto* train_cmd = app.add_subcommand("train", "run one experiment spec");
    add_common(train_cmd, train_flags);

    auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on a spec's test split");
    add_common(eval_cmd, eval_flags);
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint to load")
        ->required()
        ->check(CLI::ExistingFile);

    auto* budget_cmd = app.add_subcommand("budget", "parameter-count report");
    budget_cmd->add_option("--spec", budget_flags.spec_path, "spec providing the model shape")
        ->check(CLI::ExistingFile);
    budget_cmd->add_option("--method", budget_methods, "extra methods to tabulate")->take_all();
    budget_cmd->add_option("--out", budget_flags.out_dir, "where to write budget.csv");
    budget_cmd->add_flag("--paper-scale", budget_paper,
                         "use the 12+12/d=1024 reference architecture");

    auto* sweep_cmd = app.add_subcommand("sweep", "budget sweep over adjustable families");
    add_common(sweep_cmd, sweep_flags);
    sweep_cmd->add_option("--families", sweep_families, "comma list from {adapter,prefix}");
    sweep_cmd->add_option("--budgets", sweep_budgets, "comma list of trainable-parameter targets")
        ->required();

    auto* dist_cmd =
        app.add_subcommand("distance-experiment", "correlation with synthetic language distance");
    add_common(dist_cmd, dist_flags);
    dist_cmd->add_option("--points", dist_points, "comma list of s:r pairs, e.g. 0:0,0.5:0.1")
        ->required();
    dist_cmd->add_option("--methods", dist_methods, "comma list of method strings");

    auto* size_cmd = app.add_subcommand("size-experiment", "BLEU vs training-set size");
    add_common(size_cmd, size_flags);
    size_cmd->add_option("--sizes", size_sizes, "comma list of subset sizes");
    size_cmd->add_option("--methods", size_methods, "comma list of method strings");

    auto* report_cmd = app.add_subcommand("report", "pretty-print results.csv");
    report_cmd->add_option("--out", report_dir, "directory holding results.csv");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(train_flags);
        if (eval_cmd->parsed()) return cmd_evaluate(eval_flags, eval_checkpoint);
        if (budget_cmd->parsed()) return cmd_budget(budget_flags, budget_methods, budget_paper);
        if (sweep_cmd->parsed()) return cmd_sweep(sweep_flags, sweep_families, sweep_budgets);
        if (dist_cmd->parsed()) return cmd_distance(dist_flags, dist_points, dist_methods);
        if (size_cmd->parsed()) return cmd_size(size_flags, size_sizes, size_methods);
        if (report_cmd->parsed()) return cmd_report(report_dir);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
