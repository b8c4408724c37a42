#pragma once

// Miniature pre-LN encoder-decoder transformer, trained from scratch. Every
// parameter lives in a ParameterStore under a hierarchical name (for
// example decoder.layer1.cross_attn.out.bias) with a per-name trainable flag;
// the flags are the mask every tuning method is defined by.
//
// Layer layout per stack, pre-LN:
//   x += dropout(self_attn(LN(x)))
//   x += dropout(cross_attn(LN(x), enc_out))     (decoder only)
//   x += dropout(fc2(act(fc1(LN(x)))))
//   x  = adapter(x)                              (when instrumented)
// plus a final LN per stack. Embeddings are learned token + position tables;
// the decoder output projection is untied by default.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "peftlab/autodiff.hpp"
#include "peftlab/peft.hpp"
#include "peftlab/rng.hpp"
#include "peftlab/special_tokens.hpp"

namespace peftlab {

// -------------------------------------------------------------- ModelConfig
struct ModelConfig {
    int enc_layers = 2;
    int dec_layers = 2;
    int d_model = 64;
    int heads = 4;
    int ffn_dim = 256;
    int vocab_size = 64;
    int max_positions = 128;
    double dropout = 0.1;
    bool tied_embeddings = false;
    Activation activation = Activation::relu;
    std::uint64_t seed = 1;

    void validate() const {
        if (enc_layers < 1 || dec_layers < 1 || d_model < 1 || heads < 1 || ffn_dim < 1 ||
            vocab_size < kNumReservedIds || max_positions < 1) {
            throw std::invalid_argument("model config: all sizes must be positive "
                                        "(vocab at least the 4 reserved ids)");
        }
        if (d_model % heads != 0) {
            throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                        " not divisible by heads " + std::to_string(heads));
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw std::invalid_argument("model config: dropout must be in [0,1)");
        }
    }

    static ModelConfig desk_scale() { return ModelConfig{}; }

    /// 12+12 layers, d=1024, 16 heads, ffn 4096. Used for parameter-count
    /// verification only; never trained here.
    static ModelConfig paper_scale_reference() {
        ModelConfig c;
        c.enc_layers = 12;
        c.dec_layers = 12;
        c.d_model = 1024;
        c.heads = 16;
        c.ffn_dim = 4096;
        c.vocab_size = 250000;
        c.max_positions = 1024;
        c.dropout = 0.3;
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

// ------------------------------------------------------------- ParameterStore
enum class ParamGroup {
    attention_weight,
    attention_bias,
    ffn_weight,
    ffn_bias,
    ln_gamma,
    ln_beta,
    embedding,
    cross_attention,
    adapter,
    prefix
};

inline const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::attention_weight: return "attention_weight";
        case ParamGroup::attention_bias: return "attention_bias";
        case ParamGroup::ffn_weight: return "ffn_weight";
        case ParamGroup::ffn_bias: return "ffn_bias";
        case ParamGroup::ln_gamma: return "ln_gamma";
        case ParamGroup::ln_beta: return "ln_beta";
        case ParamGroup::embedding: return "embedding";
        case ParamGroup::cross_attention: return "cross_attention";
        case ParamGroup::adapter: return "adapter";
        case ParamGroup::prefix: return "prefix";
    }
    return "?";
}

inline ParamGroup classify_parameter(const std::string& name) {
    if (name.find(".adapter.") != std::string::npos) return ParamGroup::adapter;
    if (name.rfind("prefix.", 0) == 0) return ParamGroup::prefix;
    if (name.find(".cross_attn.") != std::string::npos) return ParamGroup::cross_attention;
    if (name.ends_with(".gamma")) return ParamGroup::ln_gamma;
    if (name.ends_with(".beta")) return ParamGroup::ln_beta;
    if (name.find("embed") != std::string::npos ||
        name.find("output_projection") != std::string::npos) {
        return ParamGroup::embedding;
    }
    if (name.find(".self_attn.") != std::string::npos) {
        return name.ends_with(".weight") ? ParamGroup::attention_weight : ParamGroup::attention_bias;
    }
    if (name.find(".ffn.") != std::string::npos) {
        return name.ends_with(".weight") ? ParamGroup::ffn_weight : ParamGroup::ffn_bias;
    }
    throw std::logic_error("unclassifiable parameter name: " + name);
}

template <class T>
class ParameterStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
        bool trainable = true;
        ParamGroup group;
    };

    Tensor<T>& add(const std::string& name, Tensor<T> tensor, bool trainable) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
        tensor.set_requires_grad(trainable);
        index_.emplace(name, entries_.size());
        entries_.push_back(Entry{name, std::move(tensor), trainable, classify_parameter(name)});
        return entries_.back().tensor;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    const Tensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return entries_[it->second].tensor;
    }

    void set_trainable(const std::string& name, bool trainable) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        entries_[it->second].trainable = trainable;
        entries_[it->second].tensor.set_requires_grad(trainable);
    }

    bool trainable(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return entries_[it->second].trainable;
    }

    const std::vector<Entry>& entries() const { return entries_; }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    std::size_t trainable_params() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.tensor.numel();
        return n;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& e : entries_)
            if (e.trainable) out.push_back(e.name);
        return out;
    }

    void zero_grads() const {
        for (const auto& e : entries_) e.tensor.zero_grad();
    }

    /// Copies of all values in registration order.
    std::vector<std::vector<T>> snapshot() const {
        std::vector<std::vector<T>> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.tensor.value());
        return out;
    }

    void restore(const std::vector<std::vector<T>>& snap) {
        if (snap.size() != entries_.size()) {
            throw std::logic_error("snapshot does not match parameter store layout");
        }
        for (std::size_t i = 0; i < snap.size(); ++i) entries_[i].tensor.value() = snap[i];
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// --------------------------------------------------------------- Transformer
enum class RunMode { training, inference };

template <class T>
class Transformer {
public:
    struct AttentionParams {
        Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct Layer {
        AttentionParams self_attn;
        Tensor<T> ln1_g, ln1_b;
        bool has_cross = false;
        AttentionParams cross_attn;
        Tensor<T> lnc_g, lnc_b;
        Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
        Tensor<T> ln2_g, ln2_b;
        std::optional<AdapterModule<T>> adapter;
    };
    struct Stack {
        Tensor<T> embed_tokens, embed_positions;
        std::vector<Layer> layers;
        Tensor<T> lnf_g, lnf_b;
    };

    explicit Transformer(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        build_stack(encoder_, "encoder", cfg_.enc_layers, /*cross=*/false, rng);
        build_stack(decoder_, "decoder", cfg_.dec_layers, /*cross=*/true, rng);
        if (!cfg_.tied_embeddings) {
            output_projection_ = register_xavier("decoder.output_projection.weight",
                                                 Shape{dim(), vocab()}, rng);
        }
    }

    Transformer(const Transformer&) = delete;
    Transformer& operator=(const Transformer&) = delete;
    Transformer(Transformer&&) = default;
    Transformer& operator=(Transformer&&) = default;

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& store() { return store_; }
    const ParameterStore<T>& store() const { return store_; }

    bool instrumented() const { return instrumented_; }
    const PeftMethod& method() const { return method_; }
    void set_method(const PeftMethod& m) {
        method_ = m;
        instrumented_ = true;
    }

    bool has_prefix() const { return prefix_.has_value(); }
    const PrefixBank<T>& prefix_bank() const { return *prefix_; }

    /// Training dropout probability; config value unless overridden per run.
    double effective_dropout() const { return dropout_override_.value_or(cfg_.dropout); }
    void override_dropout(double p) { dropout_override_ = p; }

    // ------------------------------------------------------------- forward
    Tensor<T> encode(Tape<T>& tape, const std::vector<int>& src, RunMode mode, Rng* dropout_rng,
                     const std::vector<char>* src_mask) const {
        check_tokens(src, "source");
        if (src_mask) {
            if (src_mask->size() != src.size()) {
                throw std::invalid_argument("forward: source mask length mismatch");
            }
            if (std::find(src_mask->begin(), src_mask->end(), char{1}) == src_mask->end()) {
                throw std::invalid_argument("forward: source mask hides every position");
            }
        }
        auto x = embed(tape, encoder_, src, mode, dropout_rng);
        const std::size_t p = prefix_ ? static_cast<std::size_t>(prefix_->length) : 0;
        if (prefix_) x = prefix_inject(tape, prefix_->encoder[0], PrefixStage::embeddings, x);
        const auto key_mask = key_padding_mask(src.size() + p, src.size() + p, src_mask, p, false);
        for (std::size_t l = 0; l < encoder_.layers.size(); ++l) {
            if (prefix_ && l > 0) {
                x = prefix_inject(tape, prefix_->encoder[l], PrefixStage::layer, x);
            }
            x = run_layer(tape, encoder_.layers[l], x, nullptr, key_mask ? &*key_mask : nullptr,
                          nullptr, mode, dropout_rng);
        }
        return tape.layer_norm(x, encoder_.lnf_g, encoder_.lnf_b, eps());
    }

    /// Teacher-forced decoder pass; one logits row per tgt position.
    Tensor<T> decode(Tape<T>& tape, const Tensor<T>& enc_out, std::size_t src_len,
                     const std::vector<int>& tgt, RunMode mode, Rng* dropout_rng,
                     const std::vector<char>* src_mask) const {
        check_tokens(tgt, "target");
        const std::size_t p = prefix_ ? static_cast<std::size_t>(prefix_->length) : 0;
        auto x = embed(tape, decoder_, tgt, mode, dropout_rng);
        if (prefix_) x = prefix_inject(tape, prefix_->decoder[0], PrefixStage::embeddings, x);
        const std::size_t rows = tgt.size() + p;
        const auto causal = causal_mask(rows);
        const auto cross = key_padding_mask(rows, src_len + p, src_mask, p, true);
        for (std::size_t l = 0; l < decoder_.layers.size(); ++l) {
            if (prefix_ && l > 0) {
                x = prefix_inject(tape, prefix_->decoder[l], PrefixStage::layer, x);
            }
            x = run_layer(tape, decoder_.layers[l], x, &causal, cross ? &*cross : nullptr, &enc_out,
                          mode, dropout_rng);
        }
        x = tape.layer_norm(x, decoder_.lnf_g, decoder_.lnf_b, eps());
        if (prefix_) x = tape.slice_rows(x, p, tgt.size());  // prefix rows carry no loss
        if (cfg_.tied_embeddings) {
            return tape.matmul(x, tape.transpose(decoder_.embed_tokens));
        }
        return tape.matmul(x, output_projection_);
    }

    Tensor<T> forward(Tape<T>& tape, const std::vector<int>& src, const std::vector<int>& tgt,
                      RunMode mode = RunMode::inference, Rng* dropout_rng = nullptr,
                      const std::vector<char>* src_mask = nullptr) const {
        auto enc = encode(tape, src, mode, dropout_rng, src_mask);
        return decode(tape, enc, src.size(), tgt, mode, dropout_rng, src_mask);
    }

    /// Iterative argmax decoding from BOS; stops at EOS or max_len tokens.
    std::vector<int> greedy_decode(const std::vector<int>& src, std::size_t max_len) const {
        if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
        Tape<T> enc_tape(false);
        const auto enc = encode(enc_tape, src, RunMode::inference, nullptr, nullptr);
        std::vector<int> out;
        std::vector<int> cur{kBosId};
        while (out.size() < max_len) {
            Tape<T> tape(false);
            auto logits = decode(tape, enc, src.size(), cur, RunMode::inference, nullptr, nullptr);
            const std::size_t v = logits.last_dim();
            const T* row = logits.value().data() + (logits.rows() - 1) * v;
            int best = 0;
            for (std::size_t j = 1; j < v; ++j) {
                if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
            }
            out.push_back(best);
            if (best == kEosId) break;
            cur.push_back(best);
        }
        return out;
    }

    // ------------------------------------------------------ instrumentation
    /// Registers one adapter per layer in both stacks; returns the new names.
    std::vector<std::string> add_adapters(int bottleneck) {
        if (bottleneck < 1) throw std::invalid_argument("adapter: bottleneck must be >= 1");
        Rng rng(derive_seed(cfg_.seed, 0xADA97));
        std::vector<std::string> names;
        auto attach = [&](Stack& stack, const std::string& prefix_name) {
            for (std::size_t l = 0; l < stack.layers.size(); ++l) {
                const std::string base = prefix_name + ".layer" + std::to_string(l) + ".adapter";
                AdapterModule<T> a;
                a.activation = cfg_.activation;
                a.ln_gamma = store_.add(base + ".ln.gamma", Tensor<T>::full(Shape{dim()}, T{1}), true);
                a.ln_beta = store_.add(base + ".ln.beta", Tensor<T>::zeros(Shape{dim()}), true);
                a.w_down = store_.add(base + ".down.weight",
                                      xavier(Shape{dim(), static_cast<std::size_t>(bottleneck)}, rng),
                                      true);
                a.b_down = store_.add(base + ".down.bias",
                                      Tensor<T>::zeros(Shape{static_cast<std::size_t>(bottleneck)}),
                                      true);
                a.w_up = store_.add(base + ".up.weight",
                                    Tensor<T>::zeros(Shape{static_cast<std::size_t>(bottleneck), dim()}),
                                    true);
                a.b_up = store_.add(base + ".up.bias", Tensor<T>::zeros(Shape{dim()}), true);
                stack.layers[l].adapter = std::move(a);
                for (const char* leaf :
                     {".ln.gamma", ".ln.beta", ".down.weight", ".down.bias", ".up.weight", ".up.bias"}) {
                    names.push_back(base + leaf);
                }
            }
        };
        attach(encoder_, "encoder");
        attach(decoder_, "decoder");
        return names;
    }

    /// Registers one [p x d] block per layer per stack; returns the new names.
    std::vector<std::string> add_prefix(int length) {
        if (length < 1) throw std::invalid_argument("prefix: length must be >= 1");
        Rng rng(derive_seed(cfg_.seed, 0x9EF1C));
        PrefixBank<T> bank;
        bank.length = length;
        std::vector<std::string> names;
        auto attach = [&](std::vector<Tensor<T>>& side, const std::string& stack_name,
                          std::size_t layers) {
            for (std::size_t l = 0; l < layers; ++l) {
                const std::string name = "prefix." + stack_name + ".layer" + std::to_string(l);
                side.push_back(store_.add(
                    name, xavier(Shape{static_cast<std::size_t>(length), dim()}, rng), true));
                names.push_back(name);
            }
        };
        attach(bank.encoder, "encoder", encoder_.layers.size());
        attach(bank.decoder, "decoder", decoder_.layers.size());
        prefix_ = std::move(bank);
        return names;
    }

    /// Additive decoder self-attention mask: row i may attend to columns <= i.
    /// With a prefix of length p, real position n (1-based) sits on row
    /// p + n - 1 and therefore sees p + n - 1 previous rows.
    static Tensor<T> causal_mask(std::size_t rows) {
        Tensor<T> m = Tensor<T>::zeros(Shape{rows, rows});
        auto& v = m.value();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = i + 1; j < rows; ++j) v[i * rows + j] = masked_value();
        return m;
    }

    static constexpr T masked_value() { return static_cast<T>(-1e9); }

private:
    std::size_t dim() const { return static_cast<std::size_t>(cfg_.d_model); }
    std::size_t vocab() const { return static_cast<std::size_t>(cfg_.vocab_size); }
    T eps() const { return static_cast<T>(kLayerNormEps); }

    Tensor<T> xavier(Shape shape, Rng& rng) {
        const std::size_t fan_in = shape.size() == 2 ? shape[0] : shape[0];
        const std::size_t fan_out = shape.size() == 2 ? shape[1] : shape[0];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        const std::size_t n = shape_numel(shape);
        std::vector<T> data(n);
        for (auto& v : data) v = static_cast<T>(rng.uniform(-limit, limit));
        return Tensor<T>(std::move(shape), std::move(data));
    }

    Tensor<T>& register_xavier(const std::string& name, Shape shape, Rng& rng) {
        return store_.add(name, xavier(std::move(shape), rng), true);
    }

    Tensor<T>& register_zeros(const std::string& name, Shape shape) {
        return store_.add(name, Tensor<T>::zeros(std::move(shape)), true);
    }

    Tensor<T>& register_ones(const std::string& name, Shape shape) {
        return store_.add(name, Tensor<T>::full(std::move(shape), T{1}), true);
    }

    AttentionParams make_attention(const std::string& base, Rng& rng) {
        AttentionParams a;
        a.wq = register_xavier(base + ".q.weight", Shape{dim(), dim()}, rng);
        a.bq = register_zeros(base + ".q.bias", Shape{dim()});
        a.wk = register_xavier(base + ".k.weight", Shape{dim(), dim()}, rng);
        a.bk = register_zeros(base + ".k.bias", Shape{dim()});
        a.wv = register_xavier(base + ".v.weight", Shape{dim(), dim()}, rng);
        a.bv = register_zeros(base + ".v.bias", Shape{dim()});
        a.wo = register_xavier(base + ".out.weight", Shape{dim(), dim()}, rng);
        a.bo = register_zeros(base + ".out.bias", Shape{dim()});
        return a;
    }

    void build_stack(Stack& stack, const std::string& name, int n_layers, bool cross, Rng& rng) {
        stack.embed_tokens = register_xavier(name + ".embed_tokens.weight", Shape{vocab(), dim()}, rng);
        stack.embed_positions = register_xavier(
            name + ".embed_positions.weight", Shape{static_cast<std::size_t>(cfg_.max_positions), dim()},
            rng);
        stack.layers.resize(static_cast<std::size_t>(n_layers));
        for (int l = 0; l < n_layers; ++l) {
            const std::string base = name + ".layer" + std::to_string(l);
            Layer& layer = stack.layers[static_cast<std::size_t>(l)];
            layer.self_attn = make_attention(base + ".self_attn", rng);
            layer.ln1_g = register_ones(base + ".ln1.gamma", Shape{dim()});
            layer.ln1_b = register_zeros(base + ".ln1.beta", Shape{dim()});
            if (cross) {
                layer.has_cross = true;
                layer.cross_attn = make_attention(base + ".cross_attn", rng);
                layer.lnc_g = register_ones(base + ".ln_cross.gamma", Shape{dim()});
                layer.lnc_b = register_zeros(base + ".ln_cross.beta", Shape{dim()});
            }
            layer.fc1_w = register_xavier(base + ".ffn.fc1.weight",
                                          Shape{dim(), static_cast<std::size_t>(cfg_.ffn_dim)}, rng);
            layer.fc1_b = register_zeros(base + ".ffn.fc1.bias",
                                         Shape{static_cast<std::size_t>(cfg_.ffn_dim)});
            layer.fc2_w = register_xavier(base + ".ffn.fc2.weight",
                                          Shape{static_cast<std::size_t>(cfg_.ffn_dim), dim()}, rng);
            layer.fc2_b = register_zeros(base + ".ffn.fc2.bias", Shape{dim()});
            layer.ln2_g = register_ones(base + ".ln2.gamma", Shape{dim()});
            layer.ln2_b = register_zeros(base + ".ln2.beta", Shape{dim()});
        }
        stack.lnf_g = register_ones(name + ".ln_final.gamma", Shape{dim()});
        stack.lnf_b = register_zeros(name + ".ln_final.beta", Shape{dim()});
    }

    void check_tokens(const std::vector<int>& ids, const char* side) const {
        if (ids.empty()) throw std::invalid_argument(std::string("forward: empty ") + side);
        if (ids.size() > static_cast<std::size_t>(cfg_.max_positions)) {
            throw std::invalid_argument(std::string("forward: ") + side + " length " +
                                        std::to_string(ids.size()) + " exceeds max_positions " +
                                        std::to_string(cfg_.max_positions));
        }
        for (int id : ids) {
            if (id < 0 || id >= cfg_.vocab_size) {
                throw std::invalid_argument(std::string("forward: ") + side + " token " +
                                            std::to_string(id) + " outside vocabulary");
            }
        }
    }

    Tensor<T> embed(Tape<T>& tape, const Stack& stack, const std::vector<int>& ids, RunMode mode,
                    Rng* rng) const {
        auto x = tape.embedding(stack.embed_tokens, ids);
        std::vector<int> positions(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);
        x = tape.add(x, tape.embedding(stack.embed_positions, positions));
        return maybe_dropout(tape, x, mode, rng);
    }

    Tensor<T> maybe_dropout(Tape<T>& tape, const Tensor<T>& x, RunMode mode, Rng* rng) const {
        const double p = effective_dropout();
        if (mode != RunMode::training || p <= 0.0) return x;
        if (!rng) throw std::logic_error("training-mode forward needs a dropout rng");
        return tape.dropout(x, static_cast<T>(p), *rng);
    }

    /// Additive mask hiding padded source keys; nullopt when nothing is
    /// masked. Key columns shift right by prefix_len; prefix keys stay open.
    std::optional<Tensor<T>> key_padding_mask(std::size_t q_rows, std::size_t k_cols,
                                              const std::vector<char>* src_mask,
                                              std::size_t prefix_len, bool /*cross*/) const {
        if (!src_mask) return std::nullopt;
        bool any = false;
        for (char keep : *src_mask)
            if (!keep) any = true;
        if (!any) return std::nullopt;
        Tensor<T> m = Tensor<T>::zeros(Shape{q_rows, k_cols});
        auto& v = m.value();
        for (std::size_t j = 0; j < src_mask->size(); ++j) {
            if ((*src_mask)[j]) continue;
            for (std::size_t i = 0; i < q_rows; ++i) v[i * k_cols + prefix_len + j] = masked_value();
        }
        return m;
    }

    Tensor<T> attention(Tape<T>& tape, const AttentionParams& at, const Tensor<T>& q_in,
                        const Tensor<T>& kv_in, const Tensor<T>* add_mask) const {
        auto q = tape.linear(q_in, at.wq, at.bq);
        auto k = tape.linear(kv_in, at.wk, at.bk);
        auto v = tape.linear(kv_in, at.wv, at.bv);
        auto ctx = tape.attention_heads(q, k, v, static_cast<std::size_t>(cfg_.heads), add_mask);
        return tape.linear(ctx, at.wo, at.bo);
    }

    Tensor<T> run_layer(Tape<T>& tape, const Layer& layer, Tensor<T> x, const Tensor<T>* self_mask,
                        const Tensor<T>* key_mask, const Tensor<T>* enc_out, RunMode mode,
                        Rng* rng) const {
        // decoder: self_mask is causal, key_mask masks encoder pads for cross.
        // encoder: key_mask masks source pads in self-attention.
        {
            auto normed = tape.layer_norm(x, layer.ln1_g, layer.ln1_b, eps());
            const Tensor<T>* mask = enc_out ? self_mask : key_mask;
            auto a = attention(tape, layer.self_attn, normed, normed, mask);
            x = tape.add(x, maybe_dropout(tape, a, mode, rng));
        }
        if (layer.has_cross) {
            if (!enc_out) throw std::logic_error("decoder layer ran without encoder output");
            auto normed = tape.layer_norm(x, layer.lnc_g, layer.lnc_b, eps());
            auto c = attention(tape, layer.cross_attn, normed, *enc_out, key_mask);
            x = tape.add(x, maybe_dropout(tape, c, mode, rng));
        }
        {
            auto normed = tape.layer_norm(x, layer.ln2_g, layer.ln2_b, eps());
            auto f = tape.linear(normed, layer.fc1_w, layer.fc1_b);
            f = apply_activation(tape, cfg_.activation, f);
            f = tape.linear(f, layer.fc2_w, layer.fc2_b);
            x = tape.add(x, maybe_dropout(tape, f, mode, rng));
        }
        if (layer.adapter) x = adapter_forward(tape, *layer.adapter, x);
        return x;
    }

    ModelConfig cfg_;
    ParameterStore<T> store_;
    Stack encoder_, decoder_;
    Tensor<T> output_projection_;
    std::optional<PrefixBank<T>> prefix_;
    bool instrumented_ = false;
    PeftMethod method_ = PeftMethod::full();
    std::optional<double> dropout_override_;
};

template <class T = double>
Transformer<T> build_model(const ModelConfig& cfg) {
    return Transformer<T>(cfg);
}

// -------------------------------------------------------------- checkpoints
// Plain format: a text header (config, method, parameter names and shapes)
// followed by raw little-endian value bytes in header order. Values round-trip
// bit-exactly.

namespace detail {
static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");
}

template <class T>
void save_checkpoint(const Transformer<T>& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    const ModelConfig& c = model.config();
    out << std::setprecision(17);
    out << "peftlab-checkpoint 1\n";
    out << "dtype " << (sizeof(T) == 8 ? "f64" : "f32") << "\n";
    out << "config " << c.enc_layers << " " << c.dec_layers << " " << c.d_model << " " << c.heads
        << " " << c.ffn_dim << " " << c.vocab_size << " " << c.max_positions << " " << c.dropout
        << " " << (c.tied_embeddings ? 1 : 0) << " " << to_string(c.activation) << " " << c.seed
        << "\n";
    out << "method " << (model.instrumented() ? model.method().str() : "-") << "\n";
    out << "params " << model.store().entries().size() << "\n";
    for (const auto& e : model.store().entries()) {
        out << e.name << " " << e.tensor.rank();
        for (std::size_t d : e.tensor.shape()) out << " " << d;
        out << "\n";
    }
    out << "data\n";
    for (const auto& e : model.store().entries()) {
        out.write(reinterpret_cast<const char*>(e.tensor.value().data()),
                  static_cast<std::streamsize>(e.tensor.numel() * sizeof(T)));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

struct CheckpointInfo {
    ModelConfig config;
    std::string method;  // "-" when the checkpoint was never instrumented
};

template <class T>
Transformer<T> load_checkpoint(const std::string& path, CheckpointInfo* info_out = nullptr,
                               bool instrument = true) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string line;
    auto next_line = [&]() {
        if (!std::getline(in, line)) throw std::runtime_error("checkpoint: truncated " + path);
        return line;
    };
    if (next_line() != "peftlab-checkpoint 1") {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    std::string dtype_line = next_line();
    const std::string want = sizeof(T) == 8 ? "dtype f64" : "dtype f32";
    if (dtype_line != want) {
        throw std::runtime_error("checkpoint: " + path + " has '" + dtype_line + "', expected '" +
                                 want + "'");
    }
    CheckpointInfo info;
    {
        std::istringstream ss(next_line());
        std::string tag, act;
        int tied = 0;
        ModelConfig& c = info.config;
        ss >> tag >> c.enc_layers >> c.dec_layers >> c.d_model >> c.heads >> c.ffn_dim >>
            c.vocab_size >> c.max_positions >> c.dropout >> tied >> act >> c.seed;
        if (tag != "config" || !ss) throw std::runtime_error("checkpoint: bad config line");
        c.tied_embeddings = tied != 0;
        c.activation = activation_from_string(act);
    }
    {
        std::istringstream ss(next_line());
        std::string tag;
        ss >> tag >> info.method;
        if (tag != "method" || !ss) throw std::runtime_error("checkpoint: bad method line");
    }
    std::size_t n_params = 0;
    {
        std::istringstream ss(next_line());
        std::string tag;
        ss >> tag >> n_params;
        if (tag != "params" || !ss) throw std::runtime_error("checkpoint: bad params line");
    }
    std::vector<std::pair<std::string, Shape>> expected;
    expected.reserve(n_params);
    for (std::size_t i = 0; i < n_params; ++i) {
        std::istringstream ss(next_line());
        std::string name;
        std::size_t rank = 0;
        ss >> name >> rank;
        Shape shape(rank);
        for (auto& d : shape) ss >> d;
        if (!ss) throw std::runtime_error("checkpoint: bad shape line for " + name);
        expected.emplace_back(std::move(name), std::move(shape));
    }
    if (next_line() != "data") throw std::runtime_error("checkpoint: missing data section");

    Transformer<T> model(info.config);
    if (instrument && info.method != "-" && info.method != "full" && info.method != "noft") {
        apply_method(model, PeftMethod::parse(info.method));
    }
    const auto& entries = model.store().entries();
    if (entries.size() != expected.size()) {
        throw std::runtime_error("checkpoint: " + path + " holds " +
                                 std::to_string(expected.size()) + " parameters, model has " +
                                 std::to_string(entries.size()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].name != expected[i].first || entries[i].tensor.shape() != expected[i].second) {
            throw std::runtime_error("checkpoint: parameter mismatch at " + expected[i].first);
        }
        auto& value = entries[i].tensor.value();
        in.read(reinterpret_cast<char*>(value.data()),
                static_cast<std::streamsize>(value.size() * sizeof(T)));
        if (!in) throw std::runtime_error("checkpoint: truncated data in " + path);
    }
    if (info_out) *info_out = info;
    return model;
}

}  // namespace peftlab
