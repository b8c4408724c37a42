#pragma once

// The five tuning regimes, realized as trainable-flag masks over a parameter
// store plus (for adapters and prefixes) new parameters spliced into the
// forward pass.
//
//   full            every parameter trainable (upper bound)
//   noft            nothing trainable (lower bound)
//   adapter:<b>     bottleneck feed-forward unit per layer:
//                   h -> h + f(LN(h) W_down + b_down) W_up + b_up
//   prefix:<p>      p trainable rows prepended to the embeddings and
//                   overwritten with fresh vectors before every layer
//   bitfit:lnbias   all non-LN biases plus every LN beta
//   bitfit:lnweights all non-LN biases plus every LN gamma
//   xattn           decoder cross-attention blocks and their preceding LN
//
// absorb_ln_bias realizes the redundancy argument for bitfit:lnbias: for an
// LN followed by a linear layer, shifting LN's beta by delta is exactly a
// shift of the linear bias by W * delta, so beta adds nothing the downstream
// bias could not express. Tuning gamma instead escapes that collapse, which
// the expressiveness tests demonstrate constructively.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "peftlab/autodiff.hpp"

namespace peftlab {

inline constexpr double kLayerNormEps = 1e-5;

enum class Activation { relu, gelu };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "gelu") return Activation::gelu;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

template <class T>
Tensor<T> apply_activation(Tape<T>& tape, Activation act, const Tensor<T>& x) {
    return act == Activation::relu ? tape.relu(x) : tape.gelu(x);
}

// -------------------------------------------------------------- PeftMethod
enum class PeftKind { full_ft, no_ft, adapter, prefix, bitfit, xattention };
enum class BitFitVariant { ln_bias, ln_weights };

struct PeftMethod {
    PeftKind kind = PeftKind::full_ft;
    int bottleneck = 0;     // adapter only
    int prefix_length = 0;  // prefix only
    BitFitVariant variant = BitFitVariant::ln_weights;

    static PeftMethod full() { return {PeftKind::full_ft, 0, 0, BitFitVariant::ln_weights}; }
    static PeftMethod none() { return {PeftKind::no_ft, 0, 0, BitFitVariant::ln_weights}; }
    static PeftMethod adapter(int b) {
        if (b < 1) throw std::invalid_argument("adapter: bottleneck must be >= 1");
        return {PeftKind::adapter, b, 0, BitFitVariant::ln_weights};
    }
    static PeftMethod prefix(int p) {
        if (p < 1) throw std::invalid_argument("prefix: length must be >= 1");
        return {PeftKind::prefix, 0, p, BitFitVariant::ln_weights};
    }
    static PeftMethod bitfit(BitFitVariant v) { return {PeftKind::bitfit, 0, 0, v}; }
    static PeftMethod xattention() { return {PeftKind::xattention, 0, 0, BitFitVariant::ln_weights}; }

    /// Grammar: full | noft | adapter:<b> | prefix:<p> | bitfit:lnbias |
    /// bitfit:lnweights | xattn
    static PeftMethod parse(const std::string& s) {
        const auto usage = [&]() {
            return std::invalid_argument(
                "bad method '" + s +
                "'; expected full | noft | adapter:<b> | prefix:<p> | bitfit:lnbias | "
                "bitfit:lnweights | xattn");
        };
        if (s == "full") return full();
        if (s == "noft") return none();
        if (s == "xattn") return xattention();
        if (s == "bitfit:lnbias") return bitfit(BitFitVariant::ln_bias);
        if (s == "bitfit:lnweights") return bitfit(BitFitVariant::ln_weights);
        const auto colon = s.find(':');
        if (colon == std::string::npos) throw usage();
        const std::string head = s.substr(0, colon), arg = s.substr(colon + 1);
        if (head != "adapter" && head != "prefix") throw usage();
        int value = 0;
        try {
            std::size_t used = 0;
            value = std::stoi(arg, &used);
            if (used != arg.size()) throw usage();
        } catch (const std::invalid_argument&) {
            throw usage();
        } catch (const std::out_of_range&) {
            throw usage();
        }
        if (value < 1) throw usage();
        return head == "adapter" ? adapter(value) : prefix(value);
    }

    std::string str() const {
        switch (kind) {
            case PeftKind::full_ft: return "full";
            case PeftKind::no_ft: return "noft";
            case PeftKind::adapter: return "adapter:" + std::to_string(bottleneck);
            case PeftKind::prefix: return "prefix:" + std::to_string(prefix_length);
            case PeftKind::bitfit:
                return variant == BitFitVariant::ln_bias ? "bitfit:lnbias" : "bitfit:lnweights";
            case PeftKind::xattention: return "xattn";
        }
        return "?";
    }

    bool operator==(const PeftMethod&) const = default;
};

// ------------------------------------------------------------ AdapterModule
template <class T>
struct AdapterModule {
    Tensor<T> ln_gamma, ln_beta;  // [d]
    Tensor<T> w_down;             // [d x b]
    Tensor<T> b_down;             // [b]
    Tensor<T> w_up;               // [b x d], zero at init so the unit starts as identity
    Tensor<T> b_up;               // [d]
    Activation activation = Activation::relu;
};

/// h -> A(h) + h applied row-wise.
template <class T>
Tensor<T> adapter_forward(Tape<T>& tape, const AdapterModule<T>& a, const Tensor<T>& h) {
    const std::size_t d = a.ln_gamma.numel();
    if (h.last_dim() != d) {
        throw std::invalid_argument("adapter: input " + shape_str(h.shape()) +
                                    " does not end in d=" + std::to_string(d));
    }
    auto normed = tape.layer_norm(h, a.ln_gamma, a.ln_beta, static_cast<T>(kLayerNormEps));
    auto mid = apply_activation(tape, a.activation, tape.linear(normed, a.w_down, a.b_down));
    return tape.add(tape.linear(mid, a.w_up, a.b_up), h);
}

// --------------------------------------------------------------- PrefixBank
/// One [p x d] block per transformer layer per stack; entry 0 doubles as the
/// embedding-level prefix and the first layer's injection.
template <class T>
struct PrefixBank {
    int length = 0;
    std::vector<Tensor<T>> encoder;
    std::vector<Tensor<T>> decoder;
};

enum class PrefixStage { embeddings, layer };

/// At the embeddings, prepends the block: Concat(V, states). Before a later
/// layer, overwrites rows [0, p) with the block and leaves the rest intact.
template <class T>
Tensor<T> prefix_inject(Tape<T>& tape, const Tensor<T>& block, PrefixStage stage,
                        const Tensor<T>& states) {
    if (block.last_dim() != states.last_dim()) {
        throw std::invalid_argument("prefix: width mismatch " + shape_str(block.shape()) + " vs " +
                                    shape_str(states.shape()));
    }
    if (stage == PrefixStage::embeddings) {
        return tape.concat_rows(block, states);
    }
    if (states.rows() <= block.rows()) {
        throw std::invalid_argument("prefix: layer-stage states have " +
                                    std::to_string(states.rows()) + " rows, expected more than p=" +
                                    std::to_string(block.rows()));
    }
    return tape.overwrite_rows(states, block);
}

// ------------------------------------------------------------ LN absorption
/// Bias update of the linear layer following an LN that exactly reproduces an
/// LN-beta update of delta_beta: returns W * delta_beta for W [d_out x d].
template <class T>
Tensor<T> absorb_ln_bias(const Tensor<T>& w, const Tensor<T>& delta_beta) {
    if (w.rank() != 2 || delta_beta.rank() != 1 || w.shape()[1] != delta_beta.numel()) {
        throw std::invalid_argument("absorb_ln_bias: shape mismatch " + shape_str(w.shape()) +
                                    " vs " + shape_str(delta_beta.shape()));
    }
    const std::size_t m = w.shape()[0], n = w.shape()[1];
    Tensor<T> out = Tensor<T>::zeros(Shape{m});
    const auto& wv = w.value();
    const auto& dv = delta_beta.value();
    auto& ov = out.value();
    for (std::size_t i = 0; i < m; ++i) {
        T acc{0};
        for (std::size_t j = 0; j < n; ++j) acc += wv[i * n + j] * dv[j];
        ov[i] = acc;
    }
    return out;
}

// ------------------------------------------------- masks over a model store
// The functions below are templates over the model type so this header stays
// independent of model.hpp; any type exposing store() and config() works.

/// Non-LN biases everywhere, plus every LN beta (ln_bias) or every LN gamma
/// (ln_weights). Returns the trainable names.
template <class Model>
std::vector<std::string> select_bitfit(Model& model, BitFitVariant variant) {
    std::vector<std::string> mask;
    for (const auto& entry : model.store().entries()) {
        const std::string& name = entry.name;
        bool on = false;
        if (name.ends_with(".bias")) {
            on = true;  // LN parameters are named .gamma/.beta, so .bias is never LN
        } else if (name.ends_with(".gamma")) {
            on = variant == BitFitVariant::ln_weights;
        } else if (name.ends_with(".beta")) {
            on = variant == BitFitVariant::ln_bias;
        }
        model.store().set_trainable(name, on);
        if (on) mask.push_back(name);
    }
    return mask;
}

/// Decoder cross-attention blocks plus the LN immediately preceding each one.
template <class Model>
std::vector<std::string> select_xattention(Model& model) {
    std::vector<std::string> mask;
    for (const auto& entry : model.store().entries()) {
        const std::string& name = entry.name;
        const bool on = name.find(".cross_attn.") != std::string::npos ||
                        name.find(".ln_cross.") != std::string::npos;
        model.store().set_trainable(name, on);
        if (on) mask.push_back(name);
    }
    return mask;
}

/// Instruments a freshly built model with one method; errors on a second
/// instrumentation and on methods that freeze everything (except noft).
template <class Model>
std::vector<std::string> apply_method(Model& model, const PeftMethod& method) {
    if (model.instrumented()) {
        throw std::logic_error("model already instrumented with " + model.method().str());
    }
    std::vector<std::string> mask;
    switch (method.kind) {
        case PeftKind::full_ft:
            for (const auto& entry : model.store().entries()) {
                model.store().set_trainable(entry.name, true);
                mask.push_back(entry.name);
            }
            break;
        case PeftKind::no_ft:
            for (const auto& entry : model.store().entries()) {
                model.store().set_trainable(entry.name, false);
            }
            break;
        case PeftKind::adapter:
            for (const auto& entry : model.store().entries()) {
                model.store().set_trainable(entry.name, false);
            }
            mask = model.add_adapters(method.bottleneck);
            break;
        case PeftKind::prefix:
            for (const auto& entry : model.store().entries()) {
                model.store().set_trainable(entry.name, false);
            }
            mask = model.add_prefix(method.prefix_length);
            break;
        case PeftKind::bitfit:
            mask = select_bitfit(model, method.variant);
            break;
        case PeftKind::xattention:
            mask = select_xattention(model);
            break;
    }
    if (mask.empty() && method.kind != PeftKind::no_ft) {
        throw std::invalid_argument("method " + method.str() +
                                    " marks zero parameters trainable on this configuration");
    }
    model.set_method(method);
    return mask;
}

}  // namespace peftlab
