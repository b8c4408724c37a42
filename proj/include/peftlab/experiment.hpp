#pragma once

// Experiment orchestration: JSON specs, single runs, budget sweeps, the
// dataset-size control and the language-distance control, with results
// persisted as CSV and SVG charts.
//
// A run is a pure function of its spec (seeds included): rerunning a spec
// reproduces every metric bit-for-bit. results.csv is keyed by (name,
// method); a rerun overwrites its row. Relative performance is recomputed
// from the full-FT sibling row whenever the table is saved, so it appears
// exactly when a baseline exists. The seconds column is wall-clock and is
// the one field a rerun may change.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "peftlab/budget.hpp"
#include "peftlab/data.hpp"
#include "peftlab/eval.hpp"
#include "peftlab/model.hpp"
#include "peftlab/svg_plot.hpp"
#include "peftlab/train.hpp"

namespace peftlab {

using nlohmann::json;

// ----------------------------------------------------------------- TaskSpec
struct TaskSpec {
    enum class Kind { synthetic, files };
    Kind kind = Kind::synthetic;

    SyntheticTaskSpec synth;
    std::size_t train_pairs = 4000;

    // files variant
    std::string src, tgt, dev_src, dev_tgt, test_src, test_tgt;
    std::string vocab_file;  // optional; built from the training side otherwise

    json to_json() const {
        json j;
        if (kind == Kind::synthetic) {
            j["type"] = "synthetic";
            j["task"] = to_string(synth.task);
            j["vocab_size"] = synth.vocab_size;
            j["len_min"] = synth.len_min;
            j["len_max"] = synth.len_max;
            j["substitution_rate"] = synth.substitution_rate;
            j["reorder_rate"] = synth.reorder_rate;
            j["seed"] = synth.seed;
            j["train_pairs"] = train_pairs;
        } else {
            j["type"] = "files";
            j["src"] = src;
            j["tgt"] = tgt;
            j["dev_src"] = dev_src;
            j["dev_tgt"] = dev_tgt;
            j["test_src"] = test_src;
            j["test_tgt"] = test_tgt;
            if (!vocab_file.empty()) j["vocab"] = vocab_file;
        }
        return j;
    }

    static TaskSpec from_json(const json& j) {
        TaskSpec t;
        const std::string type = j.value("type", "synthetic");
        if (type == "synthetic") {
            t.kind = Kind::synthetic;
            t.synth.task = synthetic_task_from_string(j.value("task", "copy"));
            t.synth.vocab_size = j.value("vocab_size", 64);
            t.synth.len_min = j.value("len_min", 4);
            t.synth.len_max = j.value("len_max", 10);
            t.synth.substitution_rate = j.value("substitution_rate", 0.0);
            t.synth.reorder_rate = j.value("reorder_rate", 0.0);
            t.synth.seed = j.value("seed", 1ull);
            t.train_pairs = j.value("train_pairs", 4000ull);
        } else if (type == "files") {
            t.kind = Kind::files;
            t.src = j.at("src").get<std::string>();
            t.tgt = j.at("tgt").get<std::string>();
            t.dev_src = j.at("dev_src").get<std::string>();
            t.dev_tgt = j.at("dev_tgt").get<std::string>();
            t.test_src = j.at("test_src").get<std::string>();
            t.test_tgt = j.at("test_tgt").get<std::string>();
            t.vocab_file = j.value("vocab", "");
        } else {
            throw std::invalid_argument("task type must be synthetic or files, got '" + type + "'");
        }
        return t;
    }
};

// ------------------------------------------------------------ ExperimentSpec
struct ExperimentSpec {
    std::string name = "experiment";
    ModelConfig model;
    std::string method = "full";
    TaskSpec task;
    TrainConfig train_cfg;
    std::string init_checkpoint;  // optional pretrained parent (base weights)
    std::string out_dir = "runs";

    void validate() const {
        if (name.empty() || name.find_first_of(",\n\r") != std::string::npos) {
            throw std::invalid_argument("spec: name must be non-empty and free of commas");
        }
        model.validate();
        train_cfg.validate();
        PeftMethod::parse(method);
        if (task.kind == TaskSpec::Kind::synthetic) task.synth.validate();
    }

    json to_json() const {
        json j;
        j["name"] = name;
        j["method"] = method;
        j["out_dir"] = out_dir;
        if (!init_checkpoint.empty()) j["init_checkpoint"] = init_checkpoint;
        j["model"] = {{"enc_layers", model.enc_layers},
                      {"dec_layers", model.dec_layers},
                      {"d_model", model.d_model},
                      {"heads", model.heads},
                      {"ffn_dim", model.ffn_dim},
                      {"vocab_size", model.vocab_size},
                      {"max_positions", model.max_positions},
                      {"dropout", model.dropout},
                      {"tied_embeddings", model.tied_embeddings},
                      {"activation", to_string(model.activation)},
                      {"seed", model.seed}};
        j["task"] = task.to_json();
        j["train"] = {{"max_lr", train_cfg.max_lr},
                      {"warmup_steps", train_cfg.warmup_steps},
                      {"total_steps", train_cfg.total_steps},
                      {"label_smoothing", train_cfg.label_smoothing},
                      {"dropout", train_cfg.dropout},
                      {"max_tokens_per_batch", train_cfg.max_tokens_per_batch},
                      {"update_frequency", train_cfg.update_frequency},
                      {"patience_epochs", train_cfg.patience_epochs},
                      {"seed", train_cfg.seed}};
        return j;
    }

    static ExperimentSpec from_json(const json& j) {
        ExperimentSpec s;
        s.name = j.value("name", "experiment");
        s.method = j.value("method", "full");
        s.out_dir = j.value("out_dir", "runs");
        s.init_checkpoint = j.value("init_checkpoint", "");
        if (j.contains("model")) {
            const json& m = j.at("model");
            s.model.enc_layers = m.value("enc_layers", s.model.enc_layers);
            s.model.dec_layers = m.value("dec_layers", s.model.dec_layers);
            s.model.d_model = m.value("d_model", s.model.d_model);
            s.model.heads = m.value("heads", s.model.heads);
            s.model.ffn_dim = m.value("ffn_dim", s.model.ffn_dim);
            s.model.vocab_size = m.value("vocab_size", s.model.vocab_size);
            s.model.max_positions = m.value("max_positions", s.model.max_positions);
            s.model.dropout = m.value("dropout", s.model.dropout);
            s.model.tied_embeddings = m.value("tied_embeddings", s.model.tied_embeddings);
            s.model.activation = activation_from_string(m.value("activation", "relu"));
            s.model.seed = m.value("seed", s.model.seed);
        }
        if (j.contains("task")) s.task = TaskSpec::from_json(j.at("task"));
        if (j.contains("train")) {
            const json& t = j.at("train");
            s.train_cfg.max_lr = t.value("max_lr", s.train_cfg.max_lr);
            s.train_cfg.warmup_steps = t.value("warmup_steps", s.train_cfg.warmup_steps);
            s.train_cfg.total_steps = t.value("total_steps", s.train_cfg.total_steps);
            s.train_cfg.label_smoothing = t.value("label_smoothing", s.train_cfg.label_smoothing);
            s.train_cfg.dropout = t.value("dropout", s.train_cfg.dropout);
            s.train_cfg.max_tokens_per_batch =
                t.value("max_tokens_per_batch", s.train_cfg.max_tokens_per_batch);
            s.train_cfg.update_frequency = t.value("update_frequency", s.train_cfg.update_frequency);
            s.train_cfg.patience_epochs = t.value("patience_epochs", s.train_cfg.patience_epochs);
            s.train_cfg.seed = t.value("seed", s.train_cfg.seed);
        }
        return s;
    }

    static ExperimentSpec from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("spec: cannot open " + path);
        json j;
        in >> j;
        return from_json(j);
    }

    std::string canonical() const { return to_json().dump(); }

    std::string hash() const {
        std::uint64_t h = 1469598103934665603ull;
        for (unsigned char c : canonical()) {
            h ^= c;
            h *= 1099511628211ull;
        }
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }
};

// ---------------------------------------------------------- results storage
struct ExperimentResult {
    std::string name;
    std::string method;
    std::size_t trainable = 0;
    std::size_t total = 0;
    double ratio_pct = 0.0;
    double bleu = 0.0;
    double chrf = 0.0;
    double dev_ppl = 0.0;
    std::optional<double> rel_perf_pct;
    double seconds = 0.0;
};

class ResultsTable {
public:
    static constexpr const char* kHeader =
        "name,method,trainable,total,ratio_pct,bleu,chrf,dev_ppl,rel_perf_pct,seconds";

    static ResultsTable load(const std::string& path) {
        ResultsTable table;
        std::ifstream in(path);
        if (!in) return table;
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> cells;
            std::istringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) cells.push_back(cell);
            if (line.back() == ',') cells.push_back("");
            if (cells.size() != 10) {
                throw std::runtime_error("results: malformed row in " + path + ": " + line);
            }
            ExperimentResult r;
            r.name = cells[0];
            r.method = cells[1];
            r.trainable = std::stoull(cells[2]);
            r.total = std::stoull(cells[3]);
            r.ratio_pct = std::stod(cells[4]);
            r.bleu = std::stod(cells[5]);
            r.chrf = std::stod(cells[6]);
            r.dev_ppl = std::stod(cells[7]);
            if (!cells[8].empty()) r.rel_perf_pct = std::stod(cells[8]);
            r.seconds = std::stod(cells[9]);
            table.rows_.push_back(std::move(r));
        }
        return table;
    }

    void upsert(const ExperimentResult& row) {
        for (auto& r : rows_) {
            if (r.name == row.name && r.method == row.method) {
                r = row;
                return;
            }
        }
        rows_.push_back(row);
    }

    const ExperimentResult* find(const std::string& name, const std::string& method) const {
        for (const auto& r : rows_) {
            if (r.name == name && r.method == method) return &r;
        }
        return nullptr;
    }

    const std::vector<ExperimentResult>& rows() const { return rows_; }

    /// Recomputes relative performance from each row's full-FT sibling, sorts
    /// by (name, method) and writes the file.
    void save(const std::string& path) {
        for (auto& r : rows_) {
            const auto* baseline = find(r.name, "full");
            if (baseline && baseline->bleu > 0.0) {
                r.rel_perf_pct = relative_performance(r.bleu, baseline->bleu);
            } else if (r.method != "full") {
                r.rel_perf_pct.reset();
            }
        }
        std::sort(rows_.begin(), rows_.end(), [](const auto& a, const auto& b) {
            return a.name != b.name ? a.name < b.name : a.method < b.method;
        });
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("results: cannot write " + path);
        out << kHeader << "\n";
        char buf[320];
        for (const auto& r : rows_) {
            std::string rel;
            if (r.rel_perf_pct) {
                char rb[32];
                std::snprintf(rb, sizeof(rb), "%.2f", *r.rel_perf_pct);
                rel = rb;
            }
            std::snprintf(buf, sizeof(buf), "%s,%s,%zu,%zu,%.4f,%.2f,%.2f,%.4f,%s,%.3f\n",
                          r.name.c_str(), r.method.c_str(), r.trainable, r.total, r.ratio_pct,
                          r.bleu, r.chrf, r.dev_ppl, rel.c_str(), r.seconds);
            out << buf;
        }
    }

private:
    std::vector<ExperimentResult> rows_;
};

// ------------------------------------------------------------- task loading
struct MaterializedTask {
    CorpusSplits splits;
    Vocab vocab;
};

inline MaterializedTask materialize_task(const TaskSpec& task) {
    MaterializedTask out;
    if (task.kind == TaskSpec::Kind::synthetic) {
        out.vocab = synthetic_vocab(task.synth);
        out.splits = make_synthetic_splits(task.synth, task.train_pairs);
        return out;
    }
    if (!task.vocab_file.empty()) {
        out.vocab = Vocab::from_file(task.vocab_file);
    } else {
        std::vector<std::string> lines = detail::read_lines_utf8(task.src);
        const auto tgt_lines = detail::read_lines_utf8(task.tgt);
        lines.insert(lines.end(), tgt_lines.begin(), tgt_lines.end());
        out.vocab = Vocab::build(lines);
    }
    out.splits.train = load_parallel(task.src, task.tgt, out.vocab);
    out.splits.dev = load_parallel(task.dev_src, task.dev_tgt, out.vocab);
    out.splits.test = load_parallel(task.test_src, task.test_tgt, out.vocab);
    return out;
}

// ------------------------------------------------------------- running one
namespace detail {

template <class T>
Transformer<T> model_for_spec(const ExperimentSpec& spec) {
    if (!spec.init_checkpoint.empty()) {
        CheckpointInfo info;
        auto model = load_checkpoint<T>(spec.init_checkpoint, &info);
        if (model.instrumented()) {
            throw std::runtime_error("spec: init_checkpoint " + spec.init_checkpoint +
                                     " carries extra " + info.method +
                                     " parameters; parent checkpoints must hold base weights only");
        }
        return model;
    }
    return Transformer<T>(spec.model);
}

inline std::string sanitize(const std::string& s) {
    std::string out = s;
    for (char& c : out) {
        if (c == ':' || c == '/' || c == ' ') c = '_';
    }
    return out;
}

}  // namespace detail

struct EvaluatedCorpus {
    MetricReport report;
    std::vector<std::string> hypotheses;
    std::vector<std::string> references;
};

/// Greedy-decodes the corpus and scores BLEU and chrF against the references.
template <class T>
EvaluatedCorpus evaluate_on(const Transformer<T>& model, const ParallelCorpus& corpus,
                            const Vocab& vocab) {
    EvaluatedCorpus out;
    const std::size_t cap = static_cast<std::size_t>(model.config().max_positions) - 1;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const std::size_t limit = std::min(cap, corpus.src[i].size() * 2 + 6);
        out.hypotheses.push_back(detokenize(model.greedy_decode(corpus.src[i], limit), vocab));
        out.references.push_back(detokenize(corpus.tgt[i], vocab));
    }
    out.report = bleu_report(out.hypotheses, out.references);
    out.report.chrf = chrf(out.hypotheses, out.references);
    out.report.n_sentences = corpus.size();
    return out;
}

struct RunOptions {
    bool quiet = false;
    bool persist_checkpoint = true;
};

template <class T = double>
ExperimentResult run_experiment(const ExperimentSpec& spec, const RunOptions& opts = {}) {
    spec.validate();
    const auto started = std::chrono::steady_clock::now();
    namespace fs = std::filesystem;
    fs::create_directories(spec.out_dir);

    const PeftMethod method = PeftMethod::parse(spec.method);
    MaterializedTask task = materialize_task(spec.task);
    if (static_cast<std::size_t>(spec.model.vocab_size) < task.vocab.size()) {
        throw std::invalid_argument("spec: model vocab_size " + std::to_string(spec.model.vocab_size) +
                                    " is smaller than the task vocabulary (" +
                                    std::to_string(task.vocab.size()) + ")");
    }

    auto model = detail::model_for_spec<T>(spec);
    apply_method(model, method);

    // closed-form counts must match the instrumented model exactly
    const BudgetReport budget = count_trainable(model.config(), method);
    if (budget.trainable != model.store().trainable_params()) {
        throw std::logic_error("budget mismatch for " + spec.method + ": closed form " +
                               std::to_string(budget.trainable) + " vs model " +
                               std::to_string(model.store().trainable_params()));
    }

    const TrainResult trained = train(model, task.splits.train, task.splits.dev, spec.train_cfg);
    const double dev_ppl = trained.history.empty() ? perplexity(model, task.splits.dev)
                                                   : trained.best_dev_ppl;
    const EvaluatedCorpus scored = evaluate_on(model, task.splits.test, task.vocab);

    ExperimentResult result;
    result.name = spec.name;
    result.method = spec.method;
    result.trainable = budget.trainable;
    result.total = budget.total;
    result.ratio_pct = budget.ratio_pct;
    result.bleu = scored.report.bleu;
    result.chrf = scored.report.chrf;
    result.dev_ppl = dev_ppl;
    result.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    const std::string base = detail::sanitize(spec.name + "-" + spec.method);
    if (opts.persist_checkpoint) {
        save_checkpoint(model, (fs::path(spec.out_dir) / (base + ".ckpt")).string());
    }
    save_history_csv(trained.history,
                     (fs::path(spec.out_dir) / (base + "-history.csv")).string());

    const std::string results_path = (fs::path(spec.out_dir) / "results.csv").string();
    ResultsTable table = ResultsTable::load(results_path);
    table.upsert(result);
    table.save(results_path);
    if (const auto* self = table.find(result.name, result.method)) result = *self;

    if (!opts.quiet) {
        std::printf("%-18s %-16s trainable %10zu (%.4f%%)  BLEU %6.2f  chrF %6.2f  dev_ppl %8.4f\n",
                    spec.name.c_str(), spec.method.c_str(), result.trainable, result.ratio_pct,
                    result.bleu, result.chrf, result.dev_ppl);
    }
    return result;
}

// ------------------------------------------------------------------- sweeps
struct SweepRow {
    std::string method;
    std::size_t trainable = 0;
    double bleu = 0.0;
    double chrf = 0.0;
    double rel_perf_pct = 0.0;
};

inline void save_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("sweep: cannot write " + path);
    out << "method,trainable,bleu,chrf,rel_perf_pct\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%zu,%.2f,%.2f,%.2f\n", r.method.c_str(), r.trainable,
                      r.bleu, r.chrf, r.rel_perf_pct);
        out << buf;
    }
}

/// Budget sweep: for each target budget, solve each adjustable family to that
/// budget and train it; a full-FT baseline run anchors relative performance.
/// Emits sweep.csv sorted by trainable count and sweep.svg with one series
/// per family.
template <class T = double>
std::vector<SweepRow> run_sweep(const ExperimentSpec& base, const std::vector<PeftKind>& families,
                                const std::vector<std::size_t>& budgets,
                                const RunOptions& opts = {}) {
    if (families.empty() || budgets.empty()) {
        throw std::invalid_argument("sweep: need at least one family and one budget");
    }
    ExperimentSpec full_spec = base;
    full_spec.method = "full";
    const ExperimentResult full = run_experiment<T>(full_spec, opts);
    if (!(full.bleu > 0.0)) {
        throw std::runtime_error("sweep: full fine-tuning baseline scored BLEU 0; "
                                 "tune the base spec before sweeping");
    }

    std::vector<SweepRow> rows;
    std::map<std::string, std::vector<std::pair<double, double>>> series_points;
    for (std::size_t budget : budgets) {
        for (PeftKind family : families) {
            ExperimentSpec spec = base;
            spec.method = solve_budget(base.model, family, budget).str();
            const ExperimentResult r = run_experiment<T>(spec, opts);
            SweepRow row{r.method, r.trainable, r.bleu, r.chrf,
                         relative_performance(r.bleu, full.bleu)};
            rows.push_back(row);
            series_points[family == PeftKind::adapter ? "adapter" : "prefix"].emplace_back(
                static_cast<double>(row.trainable), row.rel_perf_pct);
        }
    }
    rows.push_back(SweepRow{"full", full.trainable, full.bleu, full.chrf, 100.0});
    std::sort(rows.begin(), rows.end(),
              [](const auto& a, const auto& b) { return a.trainable < b.trainable; });

    namespace fs = std::filesystem;
    save_sweep_csv(rows, (fs::path(base.out_dir) / "sweep.csv").string());
    std::vector<PlotSeries> series;
    for (auto& [label, pts] : series_points) {
        std::sort(pts.begin(), pts.end());
        series.push_back(PlotSeries{label, pts});
    }
    PlotOptions plot;
    plot.title = "Relative performance vs trainable parameters";
    plot.x_label = "trainable parameters";
    plot.y_label = "relative performance (%)";
    plot.log_x = true;
    write_line_chart((fs::path(base.out_dir) / "sweep.svg").string(), plot, series);
    return rows;
}

// ---------------------------------------------------------- size experiment
struct SizeRow {
    std::string method;
    std::size_t size = 0;
    std::size_t trainable = 0;
    double bleu = 0.0;
    double chrf = 0.0;
    std::optional<double> rel_perf_pct;
};

/// Trains each method on nested subsets of the training data. Emits size.csv,
/// size.svg (BLEU vs size per method) and size_meta.json recording subset
/// nestedness.
template <class T = double>
std::vector<SizeRow> run_size_experiment(const ExperimentSpec& base,
                                         const std::vector<std::size_t>& sizes,
                                         const std::vector<std::string>& methods,
                                         const RunOptions& opts = {}) {
    if (sizes.empty() || methods.empty()) {
        throw std::invalid_argument("size experiment: need sizes and methods");
    }
    MaterializedTask task = materialize_task(base.task);
    std::vector<std::size_t> ordered = sizes;
    std::sort(ordered.begin(), ordered.end());

    // nestedness of the seeded subsets, recorded in the metadata
    json meta;
    meta["sizes"] = ordered;
    meta["nested"] = json::array();
    for (std::size_t i = 0; i + 1 < ordered.size(); ++i) {
        const auto small = subset(task.splits.train, ordered[i], base.train_cfg.seed);
        const auto big = subset(task.splits.train, ordered[i + 1], base.train_cfg.seed);
        bool nested = true;
        for (std::size_t k = 0; k < small.size(); ++k) {
            nested = nested && small.src[k] == big.src[k] && small.tgt[k] == big.tgt[k];
        }
        meta["nested"].push_back(nested);
    }

    std::vector<SizeRow> rows;
    std::map<std::string, std::vector<std::pair<double, double>>> series_points;
    for (std::size_t size : ordered) {
        std::map<std::string, double> bleu_at_size;
        for (const std::string& method : methods) {
            ExperimentSpec spec = base;
            spec.method = method;
            spec.name = base.name + "-n" + std::to_string(size);
            if (base.task.kind == TaskSpec::Kind::synthetic) {
                spec.task.train_pairs = size;
                if (size > task.splits.train.size()) {
                    throw std::invalid_argument("size experiment: size exceeds the corpus");
                }
                // nested subsets of one generated corpus, not regenerated data
            }
            // run on the subset by materializing manually
            ExperimentResult r;
            {
                spec.validate();
                const auto started = std::chrono::steady_clock::now();
                namespace fs = std::filesystem;
                fs::create_directories(spec.out_dir);
                const PeftMethod m = PeftMethod::parse(spec.method);
                auto model = detail::model_for_spec<T>(spec);
                apply_method(model, m);
                const BudgetReport budget = count_trainable(model.config(), m);
                const auto train_subset = subset(task.splits.train, size, base.train_cfg.seed);
                const TrainResult trained =
                    train(model, train_subset, task.splits.dev, spec.train_cfg);
                const double dev_ppl = trained.history.empty()
                                           ? perplexity(model, task.splits.dev)
                                           : trained.best_dev_ppl;
                const EvaluatedCorpus scored = evaluate_on(model, task.splits.test, task.vocab);
                r.name = spec.name;
                r.method = spec.method;
                r.trainable = budget.trainable;
                r.total = budget.total;
                r.ratio_pct = budget.ratio_pct;
                r.bleu = scored.report.bleu;
                r.chrf = scored.report.chrf;
                r.dev_ppl = dev_ppl;
                r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
                                .count();
                const std::string results_path = (fs::path(spec.out_dir) / "results.csv").string();
                ResultsTable table = ResultsTable::load(results_path);
                table.upsert(r);
                table.save(results_path);
                if (!opts.quiet) {
                    std::printf("%-22s %-16s n=%6zu  BLEU %6.2f  dev_ppl %8.4f\n", r.name.c_str(),
                                r.method.c_str(), size, r.bleu, r.dev_ppl);
                }
            }
            bleu_at_size[method] = r.bleu;
            SizeRow row;
            row.method = method;
            row.size = size;
            row.trainable = r.trainable;
            row.bleu = r.bleu;
            row.chrf = r.chrf;
            rows.push_back(row);
            series_points[method].emplace_back(static_cast<double>(size), r.bleu);
        }
        const auto full_it = bleu_at_size.find("full");
        if (full_it != bleu_at_size.end() && full_it->second > 0.0) {
            for (auto& row : rows) {
                if (row.size == size) {
                    row.rel_perf_pct = relative_performance(row.bleu, full_it->second);
                }
            }
        }
    }

    namespace fs = std::filesystem;
    {
        std::ofstream out((fs::path(base.out_dir) / "size.csv").string(), std::ios::binary);
        out << "method,size,trainable,bleu,chrf,rel_perf_pct\n";
        char buf[200];
        for (const auto& r : rows) {
            std::string rel;
            if (r.rel_perf_pct) {
                char rb[32];
                std::snprintf(rb, sizeof(rb), "%.2f", *r.rel_perf_pct);
                rel = rb;
            }
            std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%.2f,%.2f,%s\n", r.method.c_str(), r.size,
                          r.trainable, r.bleu, r.chrf, rel.c_str());
            out << buf;
        }
    }
    {
        std::ofstream out((fs::path(base.out_dir) / "size_meta.json").string(), std::ios::binary);
        out << meta.dump(2) << "\n";
    }
    std::vector<PlotSeries> series;
    for (auto& [label, pts] : series_points) {
        std::sort(pts.begin(), pts.end());
        series.push_back(PlotSeries{label, pts});
    }
    PlotOptions plot;
    plot.title = "BLEU vs fine-tuning dataset size";
    plot.x_label = "training pairs";
    plot.y_label = "BLEU";
    plot.log_x = true;
    write_line_chart((fs::path(base.out_dir) / "size.svg").string(), plot, series);
    return rows;
}

// ------------------------------------------------------ distance experiment
struct DistanceRow {
    std::string method;
    double substitution = 0.0;
    double reorder = 0.0;
    double distance = 0.0;
    double bleu = 0.0;
    std::optional<double> rel_perf_pct;
};

struct DistanceCorrelation {
    std::string method;
    double r = 0.0;
    double p_value = 1.0;
    std::size_t n = 0;
};

struct DistanceOutcome {
    std::vector<DistanceRow> rows;
    std::vector<DistanceCorrelation> correlations;
};

/// One synthetic corpus per (s, r) point; each method plus full FT trains on
/// every corpus, and per-method Pearson correlation of relative performance
/// against distance is reported.
template <class T = double>
DistanceOutcome run_distance_experiment(const ExperimentSpec& base,
                                        const std::vector<std::pair<double, double>>& points,
                                        const std::vector<std::string>& methods,
                                        const RunOptions& opts = {}) {
    if (points.size() < 3) {
        throw std::invalid_argument("distance experiment: need at least 3 distance points for a "
                                    "correlation");
    }
    if (base.task.kind != TaskSpec::Kind::synthetic) {
        throw std::invalid_argument("distance experiment: requires a synthetic task spec");
    }
    std::vector<std::string> all_methods = methods;
    if (std::find(all_methods.begin(), all_methods.end(), "full") == all_methods.end()) {
        all_methods.push_back("full");
    }

    DistanceOutcome outcome;
    std::map<std::string, std::vector<std::pair<double, double>>> rel_by_method;
    for (const auto& [s, r] : points) {
        ExperimentSpec point_spec = base;
        point_spec.task.synth.substitution_rate = s;
        point_spec.task.synth.reorder_rate = r;
        char label[48];
        std::snprintf(label, sizeof(label), "-d%.3f", point_spec.task.synth.distance());
        point_spec.name = base.name + label;

        double full_bleu = 0.0;
        std::vector<std::pair<std::string, double>> scored;
        for (const std::string& method : all_methods) {
            ExperimentSpec spec = point_spec;
            spec.method = method;
            const ExperimentResult res = run_experiment<T>(spec, opts);
            if (method == "full") {
                full_bleu = res.bleu;
            }
            scored.emplace_back(method, res.bleu);
        }
        for (const auto& [method, bleu_score] : scored) {
            DistanceRow row;
            row.method = method;
            row.substitution = s;
            row.reorder = r;
            row.distance = (s + r) / 2.0;
            row.bleu = bleu_score;
            if (full_bleu > 0.0) {
                row.rel_perf_pct = relative_performance(bleu_score, full_bleu);
                if (method != "full") {
                    rel_by_method[method].emplace_back(row.distance, *row.rel_perf_pct);
                }
            }
            outcome.rows.push_back(row);
        }
    }

    for (const auto& [method, pts] : rel_by_method) {
        std::vector<double> xs, ys;
        for (const auto& [d, rel] : pts) {
            xs.push_back(d);
            ys.push_back(rel);
        }
        const PearsonResult pr = pearson_r(xs, ys);  // degenerate inputs surface from here
        outcome.correlations.push_back(DistanceCorrelation{method, pr.r, pr.p_value, pr.n});
    }

    namespace fs = std::filesystem;
    fs::create_directories(base.out_dir);
    {
        std::ofstream out((fs::path(base.out_dir) / "distance.csv").string(), std::ios::binary);
        out << "method,substitution_rate,reorder_rate,distance,bleu,rel_perf_pct\n";
        char buf[200];
        for (const auto& r : outcome.rows) {
            std::string rel;
            if (r.rel_perf_pct) {
                char rb[32];
                std::snprintf(rb, sizeof(rb), "%.2f", *r.rel_perf_pct);
                rel = rb;
            }
            std::snprintf(buf, sizeof(buf), "%s,%.3f,%.3f,%.3f,%.2f,%s\n", r.method.c_str(),
                          r.substitution, r.reorder, r.distance, r.bleu, rel.c_str());
            out << buf;
        }
    }
    {
        std::ofstream out((fs::path(base.out_dir) / "correlations.csv").string(), std::ios::binary);
        out << "method,pearson_r,p_value,n\n";
        char buf[120];
        for (const auto& c : outcome.correlations) {
            std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%zu\n", c.method.c_str(), c.r, c.p_value,
                          c.n);
            out << buf;
        }
    }
    return outcome;
}

}  // namespace peftlab
