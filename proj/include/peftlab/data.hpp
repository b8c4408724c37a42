#pragma once

// Parallel-corpus ingestion, synthetic task generation, subsetting and
// token-based batching.
//
// File formats:
//   corpus     UTF-8 plain text, one sentence per line, parallel by line number
//   vocabulary one token per line, line number = id, first four lines reserved
//              for BOS/EOS/PAD/UNK
//   distances  CSV lang_pair,distance
//
// Synthetic corpora are pure functions of (spec, n): same bytes on every run
// and platform. The language-distance knob is (substitution + reorder) / 2: a
// fraction s of lexicon entries map to distinct target-side symbols and
// adjacent tokens swap with probability r per position.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "peftlab/rng.hpp"
#include "peftlab/special_tokens.hpp"

namespace peftlab {

// ---------------------------------------------------------------- vocabulary
class Vocab {
public:
    Vocab() { add_reserved(); }

    static Vocab from_tokens(const std::vector<std::string>& tokens) {
        Vocab v;
        for (const auto& t : tokens) v.add(t);
        return v;
    }

    /// One token per line; the first four lines must be the reserved symbols.
    static Vocab from_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("vocab: cannot open " + path);
        Vocab v;
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line_no < kNumReservedIds) {
                if (line != v.id_to_token_[static_cast<std::size_t>(line_no)]) {
                    throw std::runtime_error("vocab: line " + std::to_string(line_no + 1) + " of " +
                                             path + " must be the reserved symbol " +
                                             v.id_to_token_[static_cast<std::size_t>(line_no)]);
                }
            } else {
                v.add(line);
            }
            ++line_no;
        }
        if (line_no < kNumReservedIds) {
            throw std::runtime_error("vocab: " + path + " is missing the reserved symbols");
        }
        return v;
    }

    /// Frequency-then-lexicographic vocabulary from whitespace-tokenized lines.
    static Vocab build(const std::vector<std::string>& lines, std::size_t max_size = 0) {
        std::map<std::string, std::size_t> freq;
        for (const auto& line : lines) {
            std::istringstream ss(line);
            std::string tok;
            while (ss >> tok) ++freq[tok];
        }
        std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
        std::stable_sort(items.begin(), items.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        Vocab v;
        for (const auto& [tok, cnt] : items) {
            (void)cnt;
            if (max_size > 0 && v.size() >= max_size) break;
            v.add(tok);
        }
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("vocab: cannot write " + path);
        for (const auto& t : id_to_token_) out << t << "\n";
    }

    int add(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        const int id = static_cast<int>(id_to_token_.size());
        id_to_token_.push_back(token);
        token_to_id_.emplace(token, id);
        return id;
    }

    /// Lookup with UNK fallback.
    int id(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnkId : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
            throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
        }
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    std::size_t size() const { return id_to_token_.size(); }

private:
    void add_reserved() {
        id_to_token_ = {"<s>", "</s>", "<pad>", "<unk>"};
        for (int i = 0; i < kNumReservedIds; ++i) token_to_id_.emplace(id_to_token_[static_cast<std::size_t>(i)], i);
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

inline std::vector<int> tokenize(const std::string& line, const Vocab& vocab) {
    std::istringstream ss(line);
    std::string tok;
    std::vector<int> ids;
    while (ss >> tok) ids.push_back(vocab.id(tok));
    return ids;
}

/// Joins tokens with single spaces; reserved ids other than UNK are skipped.
inline std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == kBosId || id == kEosId || id == kPadId) continue;
        if (!out.empty()) out.push_back(' ');
        out += vocab.token(id);
    }
    return out;
}

// -------------------------------------------------------------------- corpus
struct ParallelCorpus {
    std::vector<std::vector<int>> src;  // source token ids
    std::vector<std::vector<int>> tgt;  // target ids, wrapped in BOS ... EOS
    std::string provenance;

    std::size_t size() const { return src.size(); }
    bool empty() const { return src.empty(); }
};

namespace detail {

inline bool valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        std::size_t len = 0;
        if (c < 0x80) {
            len = 1;
        } else if ((c & 0xE0) == 0xC0) {
            len = 2;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4;
        } else {
            return false;
        }
        if (i + len > s.size()) return false;
        for (std::size_t k = 1; k < len; ++k) {
            if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return false;
        }
        i += len;
    }
    return true;
}

inline std::vector<std::string> read_lines_utf8(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!valid_utf8(line)) {
            throw std::runtime_error("corpus: undecodable bytes in " + path + " at line " +
                                     std::to_string(lines.size() + 1));
        }
        lines.push_back(line);
    }
    return lines;
}

}  // namespace detail

/// Loads a line-parallel pair of files; targets get BOS/EOS.
inline ParallelCorpus load_parallel(const std::string& src_path, const std::string& tgt_path,
                                    const Vocab& vocab) {
    const auto src_lines = detail::read_lines_utf8(src_path);
    const auto tgt_lines = detail::read_lines_utf8(tgt_path);
    if (src_lines.size() != tgt_lines.size()) {
        throw std::runtime_error("corpus: line counts differ: " + src_path + " has " +
                                 std::to_string(src_lines.size()) + " lines, " + tgt_path +
                                 " has " + std::to_string(tgt_lines.size()));
    }
    ParallelCorpus corpus;
    corpus.provenance = src_path + " || " + tgt_path;
    for (std::size_t i = 0; i < src_lines.size(); ++i) {
        auto s = tokenize(src_lines[i], vocab);
        auto t = tokenize(tgt_lines[i], vocab);
        if (s.empty() || t.empty()) {
            throw std::runtime_error("corpus: empty sentence at line " + std::to_string(i + 1));
        }
        std::vector<int> wrapped;
        wrapped.reserve(t.size() + 2);
        wrapped.push_back(kBosId);
        wrapped.insert(wrapped.end(), t.begin(), t.end());
        wrapped.push_back(kEosId);
        corpus.src.push_back(std::move(s));
        corpus.tgt.push_back(std::move(wrapped));
    }
    return corpus;
}

// ---------------------------------------------------------- synthetic tasks
enum class SyntheticTask { copy, reverse, lexical_translation };

inline std::string to_string(SyntheticTask t) {
    switch (t) {
        case SyntheticTask::copy: return "copy";
        case SyntheticTask::reverse: return "reverse";
        case SyntheticTask::lexical_translation: return "lexical-translation";
    }
    return "?";
}

inline SyntheticTask synthetic_task_from_string(const std::string& s) {
    if (s == "copy") return SyntheticTask::copy;
    if (s == "reverse") return SyntheticTask::reverse;
    if (s == "lexical-translation" || s == "lexical") return SyntheticTask::lexical_translation;
    throw std::invalid_argument("unknown synthetic task '" + s + "'");
}

struct SyntheticTaskSpec {
    SyntheticTask task = SyntheticTask::copy;
    int vocab_size = 64;
    int len_min = 4;
    int len_max = 10;
    double substitution_rate = 0.0;  // s: fraction of lexicon entries remapped
    double reorder_rate = 0.0;       // r: adjacent-swap probability per position
    std::uint64_t seed = 1;

    double distance() const { return (substitution_rate + reorder_rate) / 2.0; }

    void validate() const {
        if (vocab_size < 8) {
            throw std::invalid_argument("synthetic: vocab_size must be at least 8 (4 reserved ids "
                                        "plus a source and target symbol)");
        }
        if (len_min < 1 || len_max < len_min) {
            throw std::invalid_argument("synthetic: bad length range");
        }
        if (substitution_rate < 0 || substitution_rate > 1 || reorder_rate < 0 || reorder_rate > 1) {
            throw std::invalid_argument("synthetic: rates must lie in [0,1]");
        }
    }

    /// Ids [4, 4+K) are source symbols, [4+K, 4+2K) their target counterparts.
    int lexicon_size() const { return (vocab_size - kNumReservedIds) / 2; }
};

/// Token strings are synthetic symbols: source "w<i>", counterpart "v<i>".
inline Vocab synthetic_vocab(const SyntheticTaskSpec& spec) {
    spec.validate();
    Vocab v;
    const int k = spec.lexicon_size();
    for (int i = 0; i < k; ++i) v.add("w" + std::to_string(i));
    for (int i = 0; i < k; ++i) v.add("v" + std::to_string(i));
    return v;
}

namespace detail {

/// Which lexicon entries get remapped: a seeded choice of floor(s*K) of them.
inline std::vector<bool> substitution_mask(const SyntheticTaskSpec& spec) {
    const int k = spec.lexicon_size();
    const int remapped = static_cast<int>(spec.substitution_rate * k + 1e-9);
    std::vector<int> order(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(derive_seed(spec.seed, 0xA11CE));
    rng.shuffle(order);
    std::vector<bool> mask(static_cast<std::size_t>(k), false);
    for (int i = 0; i < remapped; ++i) mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
    return mask;
}

}  // namespace detail

/// Deterministic synthetic corpus; the extra `stream` selects disjoint draws
/// for train/dev/test.
inline ParallelCorpus generate_synthetic(const SyntheticTaskSpec& spec, std::size_t n,
                                         std::uint64_t stream = 0) {
    spec.validate();
    if (n < 1) throw std::invalid_argument("synthetic: need at least one pair");
    const int k = spec.lexicon_size();
    const auto remap = detail::substitution_mask(spec);
    Rng rng(derive_seed(spec.seed, 0xDA7A0 + stream));

    ParallelCorpus corpus;
    corpus.provenance = "synthetic:" + to_string(spec.task) + " s=" +
                        std::to_string(spec.substitution_rate) + " r=" +
                        std::to_string(spec.reorder_rate) + " seed=" + std::to_string(spec.seed);
    for (std::size_t i = 0; i < n; ++i) {
        const int len = spec.len_min +
                        static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.len_max - spec.len_min + 1)));
        std::vector<int> src(static_cast<std::size_t>(len));
        for (auto& t : src) t = kNumReservedIds + static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));

        std::vector<int> tgt(src.size());
        for (std::size_t j = 0; j < src.size(); ++j) {
            const int entry = src[j] - kNumReservedIds;
            tgt[j] = remap[static_cast<std::size_t>(entry)] ? src[j] + k : src[j];
        }
        for (std::size_t j = 0; j + 1 < tgt.size(); ++j) {
            if (rng.uniform() < spec.reorder_rate) std::swap(tgt[j], tgt[j + 1]);
        }
        if (spec.task == SyntheticTask::reverse) {
            std::reverse(tgt.begin(), tgt.end());
        }

        std::vector<int> wrapped;
        wrapped.reserve(tgt.size() + 2);
        wrapped.push_back(kBosId);
        wrapped.insert(wrapped.end(), tgt.begin(), tgt.end());
        wrapped.push_back(kEosId);
        corpus.src.push_back(std::move(src));
        corpus.tgt.push_back(std::move(wrapped));
    }
    return corpus;
}

struct CorpusSplits {
    ParallelCorpus train, dev, test;
};

inline constexpr std::size_t kSyntheticDevSize = 1000;
inline constexpr std::size_t kSyntheticTestSize = 1000;

/// Train plus fixed 1000/1000 dev/test pairs from disjoint seed streams.
inline CorpusSplits make_synthetic_splits(const SyntheticTaskSpec& spec, std::size_t n_train) {
    return CorpusSplits{generate_synthetic(spec, n_train, 0),
                        generate_synthetic(spec, kSyntheticDevSize, 1),
                        generate_synthetic(spec, kSyntheticTestSize, 2)};
}

// ------------------------------------------------------------------ subsets
/// Uniform sample without replacement. Subsets of increasing size are nested
/// for the same seed: both are prefixes of one seeded permutation.
inline ParallelCorpus subset(const ParallelCorpus& corpus, std::size_t size, std::uint64_t seed) {
    if (size < 1) throw std::invalid_argument("subset: size must be positive");
    if (size > corpus.size()) {
        throw std::invalid_argument("subset: requested " + std::to_string(size) + " of " +
                                    std::to_string(corpus.size()) + " pairs");
    }
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0x5B5E7));
    rng.shuffle(order);
    ParallelCorpus out;
    out.provenance = corpus.provenance + " subset=" + std::to_string(size);
    out.src.reserve(size);
    out.tgt.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
        out.src.push_back(corpus.src[order[i]]);
        out.tgt.push_back(corpus.tgt[order[i]]);
    }
    return out;
}

// ----------------------------------------------------------------- batching
struct TokenBatch {
    std::vector<std::vector<int>> src;  // unpadded
    std::vector<std::vector<int>> tgt;  // padded to max_tgt_len with PAD
    std::vector<std::size_t> indices;   // positions in the source corpus
    std::size_t max_tgt_len = 0;

    std::size_t rows() const { return src.size(); }
};

/// Shuffled, length-bucketed batches with
/// (max target length in batch) * rows <= max_tokens.
inline std::vector<TokenBatch> batch_by_tokens(const ParallelCorpus& corpus,
                                               std::size_t max_tokens, std::uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("batch: empty corpus");
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (corpus.src[i].size() > max_tokens || corpus.tgt[i].size() > max_tokens) {
            throw std::invalid_argument("batch: sentence " + std::to_string(i) +
                                        " is longer than max_tokens " + std::to_string(max_tokens));
        }
    }
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0xBA7C4));
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return corpus.tgt[a].size() < corpus.tgt[b].size();
    });

    std::vector<TokenBatch> batches;
    TokenBatch cur;
    std::size_t cur_max = 0;
    auto flush = [&]() {
        if (cur.rows() == 0) return;
        cur.max_tgt_len = cur_max;
        for (auto& row : cur.tgt) row.resize(cur_max, kPadId);
        batches.push_back(std::move(cur));
        cur = TokenBatch{};
        cur_max = 0;
    };
    for (std::size_t idx : order) {
        const std::size_t cand_max = std::max(cur_max, corpus.tgt[idx].size());
        if (cur.rows() > 0 && cand_max * (cur.rows() + 1) > max_tokens) flush();
        cur_max = std::max(cur_max, corpus.tgt[idx].size());
        cur.src.push_back(corpus.src[idx]);
        cur.tgt.push_back(corpus.tgt[idx]);
        cur.indices.push_back(idx);
    }
    flush();
    rng.shuffle(batches);
    return batches;
}

// ------------------------------------------------------------ distance file
/// CSV of lang_pair,distance rows for externally supplied language distances.
inline std::map<std::string, double> load_distance_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("distances: cannot open " + path);
    std::map<std::string, double> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw std::runtime_error("distances: line " + std::to_string(line_no) +
                                     " is not lang_pair,distance");
        }
        if (line_no == 1 && line.rfind("lang_pair", 0) == 0) continue;  // optional header
        try {
            out[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
        } catch (const std::exception&) {
            throw std::runtime_error("distances: bad value at line " + std::to_string(line_no));
        }
    }
    return out;
}

}  // namespace peftlab
