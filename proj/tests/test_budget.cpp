#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <vector>

#include "peftlab/budget.hpp"

using namespace peftlab;

namespace {

const ModelConfig kPaper = ModelConfig::paper_scale_reference();

std::vector<PeftMethod> all_methods() {
    return {PeftMethod::full(),
            PeftMethod::none(),
            PeftMethod::adapter(1),
            PeftMethod::adapter(5),
            PeftMethod::prefix(2),
            PeftMethod::bitfit(BitFitVariant::ln_bias),
            PeftMethod::bitfit(BitFitVariant::ln_weights),
            PeftMethod::xattention()};
}

}  // namespace

TEST_CASE("paper-scale budget tiers are reproduced exactly", "[budget]") {
    CHECK(count_trainable(kPaper, PeftMethod::adapter(1024)).trainable == 50429952u);
    CHECK(count_trainable(kPaper, PeftMethod::adapter(5)).trainable == 319608u);
    CHECK(count_trainable(kPaper, PeftMethod::adapter(1)).trainable == 122904u);
    CHECK(count_trainable(kPaper, PeftMethod::prefix(13)).trainable == 319488u);
    CHECK(count_trainable(kPaper, PeftMethod::prefix(5)).trainable == 122880u);
}

TEST_CASE("bitfit sits in the 335k tier at paper scale", "[budget]") {
    const auto report = count_trainable(kPaper, PeftMethod::bitfit(BitFitVariant::ln_weights));
    CHECK(std::abs(static_cast<double>(report.trainable) - 335000.0) / 335000.0 < 0.02);
    const auto biases = count_trainable(kPaper, PeftMethod::bitfit(BitFitVariant::ln_bias));
    CHECK(biases.trainable == report.trainable);
}

TEST_CASE("noft counts zero everywhere, full counts the total", "[budget]") {
    for (const auto& cfg : {ModelConfig::desk_scale(), kPaper}) {
        CHECK(count_trainable(cfg, PeftMethod::none()).trainable == 0);
        const auto full = count_trainable(cfg, PeftMethod::full());
        CHECK(full.trainable == full.total);
        CHECK(full.ratio_pct == Catch::Approx(100.0));
    }
}

TEST_CASE("breakdown sums to the trainable count", "[budget]") {
    for (const auto& method : all_methods()) {
        const auto report = count_trainable(ModelConfig::desk_scale(), method);
        std::size_t sum = 0;
        for (const auto& [group, n] : report.breakdown) sum += n;
        CHECK(sum == report.trainable);
        CHECK(report.trainable <= report.total);
    }
}

TEST_CASE("prefix reports its sequence-length cost", "[budget]") {
    const auto report = count_trainable(ModelConfig::desk_scale(), PeftMethod::prefix(5));
    REQUIRE(report.prefix_cost.has_value());
    CHECK(report.prefix_cost->extra_rows == 5);
    CHECK(report.prefix_cost->attention_note.find("n-1+5") != std::string::npos);
    CHECK_FALSE(count_trainable(ModelConfig::desk_scale(), PeftMethod::adapter(2)).prefix_cost);
}

TEST_CASE("closed-form counts equal apply_method masks exactly", "[budget]") {
    Rng rng(41);
    for (int trial = 0; trial < 8; ++trial) {
        ModelConfig c;
        c.enc_layers = 1 + static_cast<int>(rng.below(3));
        c.dec_layers = 1 + static_cast<int>(rng.below(3));
        c.heads = 1 + static_cast<int>(rng.below(2));
        c.d_model = c.heads * (3 + static_cast<int>(rng.below(6)));
        c.ffn_dim = 5 + static_cast<int>(rng.below(30));
        c.vocab_size = 9 + static_cast<int>(rng.below(40));
        c.max_positions = 16;
        c.tied_embeddings = rng.below(2) == 0;
        for (const auto& method : all_methods()) {
            auto model = build_model(c);
            apply_method(model, method);
            const auto report = count_trainable(c, method);
            INFO("config trial " << trial << " method " << method.str());
            CHECK(report.trainable == model.store().trainable_params());
            CHECK(report.total == count_total(c));
        }
    }
}

TEST_CASE("adapter and prefix counts are strictly monotone", "[budget]") {
    const auto& c = ModelConfig::desk_scale();
    std::size_t prev = 0;
    for (int b = 1; b <= 24; ++b) {
        const auto n = count_trainable(c, PeftMethod::adapter(b)).trainable;
        CHECK(n > prev);
        prev = n;
    }
    prev = 0;
    for (int p = 1; p <= 24; ++p) {
        const auto n = count_trainable(c, PeftMethod::prefix(p)).trainable;
        CHECK(n > prev);
        prev = n;
    }
}

TEST_CASE("count laws hold for the instrumented model", "[budget]") {
    // trainable(prefix:p) = p*d*(E+D); trainable(adapter:b) = (E+D)*(2d+db+b+bd+d)
    ModelConfig c = ModelConfig::desk_scale();
    for (int p : {1, 3, 9}) {
        CHECK(count_trainable(c, PeftMethod::prefix(p)).trainable ==
              static_cast<std::size_t>(p) * 64 * 4);
    }
    for (int b : {1, 4, 7}) {
        const std::size_t expect =
            4 * (2 * 64 + 64 * static_cast<std::size_t>(b) * 2 + static_cast<std::size_t>(b) + 64);
        CHECK(count_trainable(c, PeftMethod::adapter(b)).trainable == expect);
    }
}

TEST_CASE("solve_budget finds the published settings", "[budget]") {
    CHECK(solve_budget(kPaper, PeftKind::adapter, 320000).bottleneck == 5);
    CHECK(solve_budget(kPaper, PeftKind::prefix, 123000).prefix_length == 5);
    CHECK(solve_budget(kPaper, PeftKind::prefix, 320000).prefix_length == 13);
    CHECK_THROWS_WITH(solve_budget(kPaper, PeftKind::adapter, 100),
                      Catch::Matchers::ContainsSubstring("minimum"));
}

TEST_CASE("solve_budget is optimal against brute-force enumeration", "[budget]") {
    Rng rng(43);
    const auto& c = kPaper;
    for (PeftKind family : {PeftKind::adapter, PeftKind::prefix}) {
        const std::size_t minimum = family_minimum(c, family);
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t target = minimum + rng.below(600000);
            const auto solved = solve_budget(c, family, target);
            const std::size_t solved_count = count_trainable(c, solved).trainable;
            const auto dev = [&](std::size_t n) {
                return n > target ? n - target : target - n;
            };
            // brute force over a generous hyperparameter range
            std::size_t best_dev = dev(solved_count);
            for (int x = 1; x < 64; ++x) {
                const auto m = family == PeftKind::adapter ? PeftMethod::adapter(x)
                                                           : PeftMethod::prefix(x);
                const std::size_t n = count_trainable(c, m).trainable;
                const std::size_t d = dev(n);
                // ties must resolve toward the smaller count
                if (d < best_dev || (d == best_dev && n < solved_count)) {
                    INFO("family " << (family == PeftKind::adapter ? "adapter" : "prefix")
                                   << " target " << target);
                    FAIL_CHECK("solver missed x=" << x << " with deviation " << d);
                }
            }
            CHECK(best_dev <= dev(solved_count));
        }
    }
}

TEST_CASE("tie between two counts resolves to the smaller", "[budget]") {
    // prefix counts are multiples of d*(E+D); pick the exact midpoint
    const auto& c = ModelConfig::desk_scale();  // step = 64*4 = 256
    const std::size_t mid = 256 + 128;          // halfway between p=1 and p=2
    CHECK(solve_budget(c, PeftKind::prefix, mid).prefix_length == 1);
}

TEST_CASE("equalize against constant-count anchors", "[budget]") {
    SECTION("bitfit anchor matches the paper's adapter-5 companion") {
        auto out = equalize(kPaper, {PeftKind::adapter, PeftKind::prefix},
                            PeftMethod::bitfit(BitFitVariant::ln_weights));
        REQUIRE(out.size() == 2);
        CHECK(out[0].method.bottleneck == 5);
        // Our BitFit count (333,824, every LN gamma included) sits past the
        // p=13/p=14 midpoint, so the deviation-minimizing prefix is 14; the
        // paper's prefix-13 pairs with the adapter-5 count instead, checked
        // below.
        CHECK(out[1].method.prefix_length == 14);
        const std::size_t adapter5 = count_trainable(kPaper, PeftMethod::adapter(5)).trainable;
        CHECK(solve_budget(kPaper, PeftKind::prefix, adapter5).prefix_length == 13);
        for (const auto& e : out) {
            CHECK(static_cast<std::size_t>(std::llabs(e.deviation)) * 20 <
                  count_trainable(kPaper, PeftMethod::bitfit(BitFitVariant::ln_weights)).trainable);
        }
    }
    SECTION("xattention anchor lands on adapter-1024") {
        auto out = equalize(kPaper, {PeftKind::adapter}, PeftMethod::xattention());
        REQUIRE(out.size() == 1);
        CHECK(out[0].method.bottleneck == 1024);
    }
    SECTION("noft anchor is unreachable") {
        CHECK_THROWS_WITH(equalize(kPaper, {PeftKind::adapter}, PeftMethod::none()),
                          Catch::Matchers::ContainsSubstring("minimum"));
    }
}

TEST_CASE("equalize deviations stay within 5% for the paper-scale anchors", "[budget]") {
    for (const auto& anchor :
         {PeftMethod::bitfit(BitFitVariant::ln_weights), PeftMethod::xattention()}) {
        const std::size_t target = count_trainable(kPaper, anchor).trainable;
        for (const auto& e : equalize(kPaper, {PeftKind::adapter, PeftKind::prefix}, anchor)) {
            CHECK(std::abs(static_cast<double>(e.deviation)) / static_cast<double>(target) < 0.05);
        }
    }
}
