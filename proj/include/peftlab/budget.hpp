#pragma once

// Parameter accounting and budget-matched configuration search. Counts are
// closed-form over the architecture shape, no model construction involved,
// and must agree exactly with what apply_method marks trainable on a built
// model (the unit suite enforces that equivalence).

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "peftlab/model.hpp"
#include "peftlab/peft.hpp"

namespace peftlab {

struct BudgetReport {
    PeftMethod method;
    std::size_t trainable = 0;
    std::size_t total = 0;   // parameters of the parent model
    double ratio_pct = 0.0;  // 100 * trainable / total
    std::vector<std::pair<std::string, std::size_t>> breakdown;  // group -> trainable count

    struct PrefixCost {
        int extra_rows = 0;  // every sequence grows by p rows in both stacks
        std::string attention_note;
    };
    std::optional<PrefixCost> prefix_cost;
};

/// Total parameter count of the uninstrumented architecture.
inline std::size_t count_total(const ModelConfig& c) {
    c.validate();
    const std::size_t d = static_cast<std::size_t>(c.d_model);
    const std::size_t f = static_cast<std::size_t>(c.ffn_dim);
    const std::size_t v = static_cast<std::size_t>(c.vocab_size);
    const std::size_t p = static_cast<std::size_t>(c.max_positions);
    const std::size_t e = static_cast<std::size_t>(c.enc_layers);
    const std::size_t de = static_cast<std::size_t>(c.dec_layers);
    const std::size_t attn = 4 * (d * d + d);
    const std::size_t enc_layer = attn + 4 * d + (d * f + f) + (f * d + d);
    const std::size_t dec_layer = enc_layer + attn + 2 * d;
    std::size_t total = 2 * v * d + 2 * p * d + e * enc_layer + de * dec_layer + 4 * d;
    if (!c.tied_embeddings) total += d * v;
    return total;
}

namespace detail {

inline std::size_t layers_total(const ModelConfig& c) {
    return static_cast<std::size_t>(c.enc_layers) + static_cast<std::size_t>(c.dec_layers);
}

/// Adapter(b) trainable count: (E+D) * (2d + db + b + bd + d).
inline std::size_t adapter_count(const ModelConfig& c, std::size_t b) {
    const std::size_t d = static_cast<std::size_t>(c.d_model);
    return layers_total(c) * (3 * d + b * (2 * d + 1));
}

/// Prefix(p) trainable count: p * d * (E+D).
inline std::size_t prefix_count(const ModelConfig& c, std::size_t p) {
    return p * static_cast<std::size_t>(c.d_model) * layers_total(c);
}

}  // namespace detail

/// Closed-form trainable count plus per-group breakdown for one method.
inline BudgetReport count_trainable(const ModelConfig& c, const PeftMethod& method) {
    c.validate();
    const std::size_t d = static_cast<std::size_t>(c.d_model);
    const std::size_t f = static_cast<std::size_t>(c.ffn_dim);
    const std::size_t e = static_cast<std::size_t>(c.enc_layers);
    const std::size_t de = static_cast<std::size_t>(c.dec_layers);

    BudgetReport report;
    report.method = method;
    report.total = count_total(c);

    auto put = [&](const char* group, std::size_t n) {
        if (n > 0) report.breakdown.emplace_back(group, n);
    };

    switch (method.kind) {
        case PeftKind::full_ft: {
            const std::size_t attn_w = (e + de) * 4 * d * d;
            const std::size_t attn_b = (e + de) * 4 * d;
            const std::size_t cross = de * 4 * (d * d + d);
            const std::size_t ffn_w = (e + de) * 2 * d * f;
            const std::size_t ffn_b = (e + de) * (f + d);
            const std::size_t ln_each = e * 2 * d + de * 3 * d + 2 * d;
            std::size_t emb = 2 * static_cast<std::size_t>(c.vocab_size) * d +
                              2 * static_cast<std::size_t>(c.max_positions) * d;
            if (!c.tied_embeddings) emb += d * static_cast<std::size_t>(c.vocab_size);
            put("embedding", emb);
            put("attention_weight", attn_w);
            put("attention_bias", attn_b);
            put("cross_attention", cross);
            put("ffn_weight", ffn_w);
            put("ffn_bias", ffn_b);
            put("ln_gamma", ln_each);
            put("ln_beta", ln_each);
            report.trainable = report.total;
            break;
        }
        case PeftKind::no_ft:
            report.trainable = 0;
            break;
        case PeftKind::adapter: {
            report.trainable = detail::adapter_count(c, static_cast<std::size_t>(method.bottleneck));
            put("adapter", report.trainable);
            break;
        }
        case PeftKind::prefix: {
            report.trainable = detail::prefix_count(c, static_cast<std::size_t>(method.prefix_length));
            put("prefix", report.trainable);
            report.prefix_cost = BudgetReport::PrefixCost{
                method.prefix_length,
                "decoder position n attends to n-1+" + std::to_string(method.prefix_length) +
                    " previous rows; every sequence carries " +
                    std::to_string(method.prefix_length) + " extra rows per stack"};
            break;
        }
        case PeftKind::bitfit: {
            // non-LN biases: q/k/v/out and FFN biases; no embedding-adjacent
            // biases exist in this architecture (output projection is
            // bias-free).
            const std::size_t self_b = (e + de) * 4 * d;
            const std::size_t cross_b = de * 4 * d;
            const std::size_t ffn_b = (e + de) * (f + d);
            const std::size_t ln = e * 2 * d + de * 3 * d + 2 * d;  // every LN, one vector each
            put("attention_bias", self_b);
            put("cross_attention", cross_b);
            put("ffn_bias", ffn_b);
            put(method.variant == BitFitVariant::ln_weights ? "ln_gamma" : "ln_beta", ln);
            report.trainable = self_b + cross_b + ffn_b + ln;
            break;
        }
        case PeftKind::xattention: {
            const std::size_t cross = de * 4 * (d * d + d);
            const std::size_t ln = de * d;
            put("cross_attention", cross);
            put("ln_gamma", ln);
            put("ln_beta", ln);
            report.trainable = cross + 2 * ln;
            break;
        }
    }
    report.ratio_pct = 100.0 * static_cast<double>(report.trainable) /
                       static_cast<double>(report.total);
    return report;
}

/// Smallest achievable count for an adjustable family (b = 1 or p = 1).
inline std::size_t family_minimum(const ModelConfig& c, PeftKind family) {
    if (family == PeftKind::adapter) return detail::adapter_count(c, 1);
    if (family == PeftKind::prefix) return detail::prefix_count(c, 1);
    throw std::invalid_argument("solve_budget: family must be adapter or prefix");
}

/// Hyperparameter whose count minimizes |count - target|; ties break toward
/// the smaller count.
inline PeftMethod solve_budget(const ModelConfig& c, PeftKind family, std::size_t target) {
    c.validate();
    const std::size_t minimum = family_minimum(c, family);
    if (target < minimum) {
        throw std::invalid_argument("solve_budget: target " + std::to_string(target) +
                                    " is below the family minimum " + std::to_string(minimum) +
                                    " (" + (family == PeftKind::adapter ? "b" : "p") + "=1)");
    }
    const auto count_at = [&](std::size_t x) {
        return family == PeftKind::adapter ? detail::adapter_count(c, x) : detail::prefix_count(c, x);
    };
    // counts are affine and strictly increasing in the hyperparameter
    const std::size_t step = count_at(2) - count_at(1);
    std::size_t lo = 1 + (target - minimum) / step;
    std::size_t hi = lo + 1;
    const std::size_t lo_count = count_at(lo);
    const std::size_t hi_count = count_at(hi);
    const std::size_t lo_dev = target - lo_count;  // lo_count <= target by construction
    const std::size_t hi_dev = hi_count - target;
    const std::size_t best = hi_dev < lo_dev ? hi : lo;
    return family == PeftKind::adapter ? PeftMethod::adapter(static_cast<int>(best))
                                       : PeftMethod::prefix(static_cast<int>(best));
}

struct EqualizedMethod {
    PeftMethod method;
    std::size_t trainable = 0;
    long long deviation = 0;  // achieved - anchor
};

/// Counts the anchor's trainable parameters and budget-matches each family
/// against that count.
inline std::vector<EqualizedMethod> equalize(const ModelConfig& c,
                                             const std::vector<PeftKind>& families,
                                             const PeftMethod& anchor) {
    const std::size_t target = count_trainable(c, anchor).trainable;
    std::vector<EqualizedMethod> out;
    out.reserve(families.size());
    for (PeftKind family : families) {
        const PeftMethod method = solve_budget(c, family, target);
        const std::size_t achieved = count_trainable(c, method).trainable;
        out.push_back(EqualizedMethod{method, achieved,
                                      static_cast<long long>(achieved) -
                                          static_cast<long long>(target)});
    }
    return out;
}

}  // namespace peftlab
