#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "peftlab/budget.hpp"
#include "peftlab/data.hpp"
#include "peftlab/eval.hpp"
#include "peftlab/model.hpp"
#include "peftlab/train.hpp"

using namespace peftlab;

namespace {

ModelConfig unit_model(int d = 32, int layers = 1, int vocab = 16) {
    ModelConfig c;
    c.enc_layers = layers;
    c.dec_layers = layers;
    c.d_model = d;
    c.heads = 4;
    c.ffn_dim = d * 4;
    c.vocab_size = vocab;
    c.max_positions = 32;
    c.dropout = 0.0;
    c.seed = 3;
    return c;
}

SyntheticTaskSpec copy_spec(int vocab = 16, std::uint64_t seed = 5) {
    SyntheticTaskSpec s;
    s.task = SyntheticTask::copy;
    s.vocab_size = vocab;
    s.len_min = 3;
    s.len_max = 6;
    s.seed = seed;
    return s;
}

}  // namespace

TEST_CASE("lr schedule hits the pinned points", "[train]") {
    TrainConfig cfg;
    cfg.max_lr = 1e-4;
    cfg.warmup_steps = 2500;
    cfg.total_steps = 100000;
    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(2500, cfg) == Catch::Approx(1e-4));
    CHECK(lr_at(51250, cfg) == Catch::Approx(5e-5));
    CHECK(lr_at(100000, cfg) == 0.0);
    CHECK(lr_at(100001, cfg) == 0.0);
    CHECK_THROWS(lr_at(-1, cfg));
}

TEST_CASE("lr schedule is continuous at warmup and zero at the end", "[train]") {
    TrainConfig cfg;
    cfg.max_lr = 3e-4;
    cfg.warmup_steps = 400;
    cfg.total_steps = 2000;
    const double before = lr_at(399, cfg);
    const double at = lr_at(400, cfg);
    const double after = lr_at(401, cfg);
    CHECK(at == Catch::Approx(cfg.max_lr));
    CHECK(std::abs(at - before) < cfg.max_lr / 300.0);
    CHECK(std::abs(at - after) < cfg.max_lr / 300.0);
    CHECK(lr_at(1999, cfg) > 0.0);
    CHECK(lr_at(2000, cfg) == 0.0);

    TrainConfig no_warmup = cfg;
    no_warmup.warmup_steps = 0;
    CHECK(lr_at(1, no_warmup) == Catch::Approx(cfg.max_lr * 1999.0 / 2000.0));
}

TEST_CASE("train config validation", "[train]") {
    TrainConfig cfg;
    cfg.warmup_steps = 10;
    cfg.total_steps = 5;
    CHECK_THROWS(cfg.validate());
    cfg = TrainConfig{};
    cfg.label_smoothing = 1.0;
    CHECK_THROWS(cfg.validate());
    cfg = TrainConfig{};
    cfg.patience_epochs = 0;
    CHECK_THROWS(cfg.validate());
}

TEST_CASE("perplexity of a uniform predictor equals the vocabulary size", "[train]") {
    ModelConfig c = unit_model(8, 1, 4);
    c.heads = 2;
    auto model = build_model(c);
    // zero output projection makes every logits row uniform
    auto& w = model.store().get("decoder.output_projection.weight").value();
    std::fill(w.begin(), w.end(), 0.0);
    ParallelCorpus data;
    data.src = {{0, 1}, {2}};
    data.tgt = {{kBosId, 0, kEosId}, {kBosId, 3, kEosId}};
    CHECK(perplexity(model, data) == Catch::Approx(4.0).margin(1e-9));
    CHECK_THROWS(perplexity(model, ParallelCorpus{}));
}

TEST_CASE("perplexity of a rigged perfect predictor approaches 1", "[train]") {
    ModelConfig c = unit_model(8, 1, 6);
    c.heads = 2;
    auto model = build_model(c);
    // freeze the final LN to a constant row and aim the projection at EOS
    auto& gamma = model.store().get("decoder.ln_final.gamma").value();
    auto& beta = model.store().get("decoder.ln_final.beta").value();
    std::fill(gamma.begin(), gamma.end(), 0.0);
    std::fill(beta.begin(), beta.end(), 1.0);
    auto& w = model.store().get("decoder.output_projection.weight").value();
    std::fill(w.begin(), w.end(), 0.0);
    for (int j = 0; j < 8; ++j) w[static_cast<std::size_t>(j) * 6 + kEosId] = 1000.0;
    ParallelCorpus data;
    data.src = {{4}};
    data.tgt = {{kBosId, kEosId}};
    CHECK(perplexity(model, data) == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("perplexity is never below 1", "[train]") {
    Rng rng(9);
    for (int trial = 0; trial < 3; ++trial) {
        ModelConfig c = unit_model(16, 1, 12);
        c.seed = 100 + static_cast<std::uint64_t>(trial);
        auto model = build_model(c);
        auto corpus = generate_synthetic(copy_spec(12, 7 + trial), 20);
        CHECK(perplexity(model, corpus) >= 1.0);
    }
}

TEST_CASE("noft training is a no-op", "[train]") {
    auto model = build_model(unit_model());
    apply_method(model, PeftMethod::none());
    const auto before = model.store().snapshot();
    auto splits = make_synthetic_splits(copy_spec(), 50);
    TrainConfig cfg;
    cfg.total_steps = 10;
    cfg.warmup_steps = 2;
    auto result = train(model, splits.train, splits.dev, cfg);
    CHECK(result.history.empty());
    CHECK(result.steps == 0);
    const auto after = model.store().snapshot();
    CHECK(before == after);
}

TEST_CASE("training requires instrumentation and data", "[train]") {
    auto model = build_model(unit_model());
    auto corpus = generate_synthetic(copy_spec(), 10);
    TrainConfig cfg;
    CHECK_THROWS_AS(train(model, corpus, corpus, cfg), std::logic_error);
    apply_method(model, PeftMethod::full());
    CHECK_THROWS_AS(train(model, ParallelCorpus{}, corpus, cfg), std::invalid_argument);
}

TEST_CASE("frozen parameters stay bit-identical through optimizer steps", "[train]") {
    auto model = build_model(unit_model());
    apply_method(model, PeftMethod::bitfit(BitFitVariant::ln_weights));
    const auto before = model.store().snapshot();
    const auto& entries = model.store().entries();

    auto corpus = generate_synthetic(copy_spec(), 60);
    auto dev = generate_synthetic(copy_spec(), 16, 1);
    TrainConfig cfg;
    cfg.total_steps = 30;
    cfg.warmup_steps = 5;
    cfg.max_lr = 3e-3;
    cfg.max_tokens_per_batch = 64;
    auto result = train(model, corpus, dev, cfg);
    CHECK(result.steps == 30);

    bool some_trainable_moved = false;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].trainable) {
            some_trainable_moved = some_trainable_moved || entries[i].tensor.value() != before[i];
        } else {
            REQUIRE(entries[i].tensor.value() == before[i]);
        }
    }
    CHECK(some_trainable_moved);
}

TEST_CASE("gradient accumulation equals one step on the concatenated batch", "[train]") {
    // same corpus, dropout off: two micro-batches of 2 rows vs one batch of 4
    auto corpus = generate_synthetic(copy_spec(12, 31), 4);
    TrainConfig split_cfg;
    split_cfg.total_steps = 1;
    split_cfg.warmup_steps = 1;
    split_cfg.max_lr = 1e-3;
    split_cfg.dropout = 0.0;
    split_cfg.update_frequency = 2;
    split_cfg.max_tokens_per_batch = 16;  // fits 2 rows of <= 8 tokens
    TrainConfig joint_cfg = split_cfg;
    joint_cfg.update_frequency = 1;
    joint_cfg.max_tokens_per_batch = 64;  // fits all 4 rows

    auto dev = generate_synthetic(copy_spec(12, 31), 4, 1);
    auto run = [&](const TrainConfig& cfg) {
        auto model = build_model(unit_model(16, 1, 12));
        apply_method(model, PeftMethod::full());
        train(model, corpus, dev, cfg);
        return model.store().snapshot();
    };
    const auto split = run(split_cfg);
    const auto joint = run(joint_cfg);
    REQUIRE(split.size() == joint.size());
    for (std::size_t i = 0; i < split.size(); ++i) {
        REQUIRE(split[i].size() == joint[i].size());
        for (std::size_t j = 0; j < split[i].size(); ++j) {
            REQUIRE(split[i][j] == Catch::Approx(joint[i][j]).margin(1e-10));
        }
    }
}

TEST_CASE("full fine-tuning masters the copy task", "[train][slow]") {
    auto splits = make_synthetic_splits(copy_spec(16, 77), 512);
    auto dev = generate_synthetic(copy_spec(16, 77), 64, 1);
    auto model = build_model(unit_model(32, 1, 16));
    apply_method(model, PeftMethod::full());
    TrainConfig cfg;
    cfg.total_steps = 360;
    cfg.warmup_steps = 40;
    cfg.max_lr = 3e-3;
    cfg.max_tokens_per_batch = 128;
    cfg.update_frequency = 2;
    cfg.label_smoothing = 0.0;
    cfg.dropout = 0.0;
    cfg.seed = 5;
    auto result = train(model, splits.train, dev, cfg);
    INFO("best dev perplexity " << result.best_dev_ppl);
    CHECK(result.best_dev_ppl < 1.5);

    // a converged copy model decodes its source
    int exact = 0, total = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        auto hyp = model.greedy_decode(splits.test.src[i], 16);
        if (!hyp.empty() && hyp.back() == kEosId) hyp.pop_back();
        exact += hyp == splits.test.src[i] ? 1 : 0;
        ++total;
    }
    CHECK(exact >= 18);

    // training history CSV round trip
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "peftlab_train_csv";
    fs::create_directories(dir);
    const auto path = (dir / "history.csv").string();
    save_history_csv(result.history, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,step,train_loss,dev_ppl,lr");
    fs::remove_all(dir);
}

TEST_CASE("copy-task loss is non-increasing after warmup across seeds", "[train][slow]") {
    int ok = 0;
    const int runs = 10;
    for (int seed = 1; seed <= runs; ++seed) {
        auto corpus = generate_synthetic(copy_spec(12, 200 + seed), 96);
        auto dev = generate_synthetic(copy_spec(12, 200 + seed), 24, 1);
        auto model = build_model(unit_model(16, 1, 12));
        apply_method(model, PeftMethod::full());
        TrainConfig cfg;
        cfg.total_steps = 48;
        cfg.warmup_steps = 8;
        cfg.max_lr = 2e-3;
        cfg.max_tokens_per_batch = 96;
        cfg.update_frequency = 2;
        cfg.dropout = 0.0;
        cfg.label_smoothing = 0.0;
        cfg.seed = static_cast<std::uint64_t>(seed);
        auto result = train(model, corpus, dev, cfg);
        // skip epochs that still contain warmup steps
        bool monotone = true;
        double prev = -1.0;
        for (const auto& row : result.history) {
            if (row.step <= cfg.warmup_steps) continue;
            if (prev >= 0.0 && row.train_loss > prev) monotone = false;
            prev = row.train_loss;
        }
        ok += monotone ? 1 : 0;
    }
    INFO(ok << " of " << runs << " seeded runs were monotone after warmup");
    CHECK(ok >= 9);
}
