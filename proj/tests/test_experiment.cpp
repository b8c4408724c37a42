#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "peftlab/experiment.hpp"

using namespace peftlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("peftlab_exp_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

ExperimentSpec micro_spec(const std::string& out_dir, const std::string& name = "micro") {
    ExperimentSpec s;
    s.name = name;
    s.method = "full";
    s.out_dir = out_dir;
    s.model.enc_layers = 1;
    s.model.dec_layers = 1;
    s.model.d_model = 16;
    s.model.heads = 2;
    s.model.ffn_dim = 32;
    s.model.vocab_size = 16;
    s.model.max_positions = 24;
    s.model.dropout = 0.0;
    s.model.seed = 11;
    s.task.kind = TaskSpec::Kind::synthetic;
    s.task.synth.task = SyntheticTask::copy;
    s.task.synth.vocab_size = 16;
    s.task.synth.len_min = 3;
    s.task.synth.len_max = 5;
    s.task.synth.seed = 13;
    s.task.train_pairs = 32;
    s.train_cfg.total_steps = 6;
    s.train_cfg.warmup_steps = 2;
    s.train_cfg.max_lr = 1e-3;
    s.train_cfg.max_tokens_per_batch = 64;
    s.train_cfg.update_frequency = 2;
    s.train_cfg.dropout = 0.0;
    s.train_cfg.label_smoothing = 0.1;
    s.train_cfg.seed = 17;
    return s;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// results.csv with the wall-clock column blanked, for determinism checks
std::string results_modulo_seconds(const fs::path& p) {
    std::istringstream in(read_file(p));
    std::string line, out;
    while (std::getline(in, line)) {
        const auto last_comma = line.rfind(',');
        out += line.substr(0, last_comma);
        out += "\n";
    }
    return out;
}

}  // namespace

TEST_CASE("spec json round trip preserves every field", "[experiment]") {
    ExperimentSpec s = micro_spec("unused");
    s.method = "adapter:3";
    s.init_checkpoint = "parent.ckpt";
    s.model.activation = Activation::gelu;
    const json j = s.to_json();
    const ExperimentSpec back = ExperimentSpec::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.hash() == s.hash());
    CHECK(back.model.activation == Activation::gelu);
    CHECK(back.task.synth.vocab_size == 16);
    CHECK(back.train_cfg.update_frequency == 2);

    ExperimentSpec other = s;
    other.train_cfg.seed += 1;
    CHECK(other.hash() != s.hash());
}

TEST_CASE("spec validation catches malformed methods and names", "[experiment]") {
    ExperimentSpec s = micro_spec("unused");
    s.method = "adapter:x";
    CHECK_THROWS_WITH(s.validate(), Catch::Matchers::ContainsSubstring("adapter:<b>"));
    s = micro_spec("unused");
    s.name = "has,comma";
    CHECK_THROWS(s.validate());
}

TEST_CASE("file-based specs load through the task loader", "[experiment]") {
    TempDir tmp("files");
    auto write = [&](const char* name, const char* body) {
        std::ofstream out(tmp.path / name, std::ios::binary);
        out << body;
        return (tmp.path / name).string();
    };
    TaskSpec task;
    task.kind = TaskSpec::Kind::files;
    task.src = write("train.src", "a b\nb a\na a\n");
    task.tgt = write("train.tgt", "a b\nb a\na a\n");
    task.dev_src = write("dev.src", "a b\n");
    task.dev_tgt = write("dev.tgt", "a b\n");
    task.test_src = write("test.src", "b a\n");
    task.test_tgt = write("test.tgt", "b a\n");
    const auto loaded = materialize_task(task);
    CHECK(loaded.splits.train.size() == 3);
    CHECK(loaded.splits.dev.size() == 1);
    CHECK(loaded.vocab.size() == 6);  // 4 reserved + a + b

    const json j = task.to_json();
    const TaskSpec back = TaskSpec::from_json(j);
    CHECK(back.src == task.src);
    CHECK(back.kind == TaskSpec::Kind::files);
}

TEST_CASE("run_experiment writes a consistent results row", "[experiment]") {
    TempDir tmp("run");
    ExperimentSpec spec = micro_spec((tmp.path / "out").string());
    RunOptions quiet;
    quiet.quiet = true;
    const ExperimentResult full = run_experiment<double>(spec, quiet);
    CHECK(full.trainable == full.total);
    CHECK(full.ratio_pct == Catch::Approx(100.0));
    CHECK(full.rel_perf_pct.has_value());
    CHECK(*full.rel_perf_pct == Catch::Approx(100.0));

    spec.method = "adapter:2";
    const ExperimentResult adapted = run_experiment<double>(spec, quiet);
    CHECK(adapted.trainable == count_trainable(spec.model, PeftMethod::adapter(2)).trainable);
    CHECK(adapted.rel_perf_pct.has_value());  // full sibling exists

    const auto table = ResultsTable::load((tmp.path / "out" / "results.csv").string());
    REQUIRE(table.rows().size() == 2);
    CHECK(table.find("micro", "full") != nullptr);
    CHECK(table.find("micro", "adapter:2") != nullptr);

    // checkpoint and history artifacts exist
    CHECK(fs::exists(tmp.path / "out" / "micro-adapter_2.ckpt"));
    CHECK(fs::exists(tmp.path / "out" / "micro-full-history.csv"));
}

TEST_CASE("rerunning a spec reproduces results.csv up to wall-clock", "[experiment]") {
    TempDir tmp("rerun");
    ExperimentSpec spec = micro_spec((tmp.path / "out").string());
    RunOptions quiet;
    quiet.quiet = true;
    run_experiment<double>(spec, quiet);
    const std::string first = results_modulo_seconds(tmp.path / "out" / "results.csv");
    run_experiment<double>(spec, quiet);
    const std::string second = results_modulo_seconds(tmp.path / "out" / "results.csv");
    CHECK(first == second);

    const auto table = ResultsTable::load((tmp.path / "out" / "results.csv").string());
    CHECK(table.rows().size() == 1);  // overwrote its row, not appended
}

TEST_CASE("noft on a pretrained parent reports zero trainable", "[experiment]") {
    TempDir tmp("parent");
    ExperimentSpec spec = micro_spec((tmp.path / "out").string(), "parent");
    RunOptions quiet;
    quiet.quiet = true;
    run_experiment<double>(spec, quiet);

    ExperimentSpec child = spec;
    child.name = "child";
    child.method = "noft";
    child.init_checkpoint = (tmp.path / "out" / "parent-full.ckpt").string();
    const ExperimentResult r = run_experiment<double>(child, quiet);
    CHECK(r.trainable == 0);
    CHECK(r.ratio_pct == 0.0);
    CHECK_FALSE(r.rel_perf_pct.has_value());  // no full sibling under this name
}

TEST_CASE("adapter checkpoints are rejected as parents", "[experiment]") {
    TempDir tmp("badparent");
    ExperimentSpec spec = micro_spec((tmp.path / "out").string(), "adapted");
    spec.method = "adapter:2";
    RunOptions quiet;
    quiet.quiet = true;
    run_experiment<double>(spec, quiet);

    ExperimentSpec child = spec;
    child.name = "child";
    child.method = "full";
    child.init_checkpoint = (tmp.path / "out" / "adapted-adapter_2.ckpt").string();
    CHECK_THROWS_WITH(run_experiment<double>(child, quiet),
                      Catch::Matchers::ContainsSubstring("base weights"));
}

TEST_CASE("sweep emits a sorted csv with a full baseline row and an svg", "[experiment]") {
    TempDir tmp("sweep");
    ExperimentSpec spec = micro_spec((tmp.path / "out").string(), "sweep");
    RunOptions quiet;
    quiet.quiet = true;
    const std::vector<std::size_t> budgets{200, 800};
    const auto rows =
        run_sweep<double>(spec, {PeftKind::adapter, PeftKind::prefix}, budgets, quiet);
    CHECK(rows.size() == 2 * 2 + 1);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i - 1].trainable <= rows[i].trainable);
    }
    bool has_full = false;
    for (const auto& r : rows) has_full = has_full || r.method == "full";
    CHECK(has_full);

    const std::string csv = read_file(tmp.path / "out" / "sweep.csv");
    CHECK(csv.rfind("method,trainable,bleu,chrf,rel_perf_pct\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);  // header + 5 rows

    const std::string svg = read_file(tmp.path / "out" / "sweep.svg");
    CHECK(svg.rfind("<?xml", 0) == 0);
    CHECK(svg.find("</svg>") != std::string::npos);
    std::size_t polylines = 0, pos = 0;
    while ((pos = svg.find("<polyline", pos)) != std::string::npos) {
        ++polylines;
        pos += 9;
    }
    CHECK(polylines == 2);  // one per family
}

TEST_CASE("size experiment verifies nested subsets and emits rows per size", "[experiment]") {
    TempDir tmp("size");
    ExperimentSpec spec = micro_spec((tmp.path / "out").string(), "size");
    spec.task.train_pairs = 48;
    RunOptions quiet;
    quiet.quiet = true;
    const auto rows = run_size_experiment<double>(spec, {8, 24}, {"full", "adapter:2"}, quiet);
    CHECK(rows.size() == 4);
    for (const auto& r : rows) {
        if (r.method == "adapter:2") {
            CHECK(r.rel_perf_pct.has_value());
        }
    }
    const std::string meta = read_file(tmp.path / "out" / "size_meta.json");
    json parsed = json::parse(meta);
    REQUIRE(parsed["nested"].size() == 1);
    CHECK(parsed["nested"][0] == true);
    CHECK(fs::exists(tmp.path / "out" / "size.svg"));
    CHECK(fs::exists(tmp.path / "out" / "size.csv"));
}

TEST_CASE("distance experiment needs three points and nondegenerate outcomes", "[experiment]") {
    TempDir tmp("dist");
    ExperimentSpec spec = micro_spec((tmp.path / "out").string(), "dist");
    spec.task.synth.task = SyntheticTask::lexical_translation;
    RunOptions quiet;
    quiet.quiet = true;
    CHECK_THROWS_WITH(run_distance_experiment<double>(spec, {{0.0, 0.0}, {0.5, 0.0}}, {"noft"},
                                                      quiet),
                      Catch::Matchers::ContainsSubstring("3 distance points"));

    // identical corpora at every point make the correlation degenerate
    CHECK_THROWS_WITH(
        run_distance_experiment<double>(spec, {{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}}, {"noft"}, quiet),
        Catch::Matchers::ContainsSubstring("degenerate"));
}

TEST_CASE("distance experiment reports one correlation row per method", "[experiment]") {
    TempDir tmp("dist2");
    ExperimentSpec spec = micro_spec((tmp.path / "out").string(), "dist2");
    spec.task.synth.task = SyntheticTask::lexical_translation;
    spec.task.train_pairs = 24;
    spec.train_cfg.total_steps = 4;
    RunOptions quiet;
    quiet.quiet = true;
    const auto outcome = run_distance_experiment<double>(
        spec, {{0.0, 0.0}, {0.5, 0.1}, {1.0, 0.2}}, {"noft", "adapter:2"}, quiet);
    CHECK(outcome.correlations.size() == 2);
    CHECK(outcome.rows.size() == 3 * 3);  // methods + full at each point
    for (const auto& c : outcome.correlations) {
        CHECK(c.n == 3);
        CHECK(std::abs(c.r) <= 1.0);
    }
    CHECK(fs::exists(tmp.path / "out" / "distance.csv"));
    CHECK(fs::exists(tmp.path / "out" / "correlations.csv"));
}
