#pragma once

// Translation-quality metrics and analysis statistics.
//
// BLEU follows the classic corpus-level recipe: 13a-style tokenization
// (unicode spaces normalized, punctuation split off), modified n-gram
// precision with clipping for n = 1..4, exponential smoothing of zero counts
// (the k-th zeroed order contributes 1 / (2^k * total)), and the brevity
// penalty exp(1 - ref_len / hyp_len) for short hypotheses.
//
// chrF is the chrF2++ configuration: character n-grams 1..6 with whitespace
// removed, word n-grams 1..2, beta = 2, orders without any n-grams excluded
// from the average.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace peftlab {

namespace detail {

inline void append_codepoint(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

/// Decodes one UTF-8 code point starting at `i`; on malformed input the byte
/// is passed through as-is.
inline char32_t next_codepoint(std::string_view s, std::size_t& i) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    char32_t cp = c;
    if (c >= 0xF0) {
        len = 4;
        cp = c & 0x07;
    } else if (c >= 0xE0) {
        len = 3;
        cp = c & 0x0F;
    } else if (c >= 0xC0) {
        len = 2;
        cp = c & 0x1F;
    }
    if (i + len > s.size()) {
        ++i;
        return c;
    }
    for (std::size_t k = 1; k < len; ++k) {
        const unsigned char cc = static_cast<unsigned char>(s[i + k]);
        if ((cc & 0xC0) != 0x80) {
            ++i;
            return c;
        }
        cp = (cp << 6) | (cc & 0x3F);
    }
    i += len;
    return cp;
}

inline bool is_unicode_space(char32_t cp) {
    switch (cp) {
        case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
        case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return cp >= 0x2000 && cp <= 0x200A;
    }
}

inline bool is_ascii_punct(char32_t cp) {
    return cp < 0x80 && std::ispunct(static_cast<int>(cp));
}

}  // namespace detail

/// 13a-style tokenization: unicode spaces become plain spaces, ASCII
/// punctuation is split into its own token, then the line splits on
/// whitespace.
inline std::vector<std::string> tokenize_13a(std::string_view line) {
    std::string padded;
    padded.reserve(line.size() + 8);
    std::size_t i = 0;
    while (i < line.size()) {
        const char32_t cp = detail::next_codepoint(line, i);
        if (detail::is_unicode_space(cp)) {
            padded.push_back(' ');
        } else if (detail::is_ascii_punct(cp)) {
            padded.push_back(' ');
            padded.push_back(static_cast<char>(cp));
            padded.push_back(' ');
        } else {
            detail::append_codepoint(padded, cp);
        }
    }
    std::vector<std::string> tokens;
    std::size_t pos = 0;
    while (pos < padded.size()) {
        while (pos < padded.size() && padded[pos] == ' ') ++pos;
        std::size_t end = pos;
        while (end < padded.size() && padded[end] != ' ') ++end;
        if (end > pos) tokens.emplace_back(padded.substr(pos, end - pos));
        pos = end;
    }
    return tokens;
}

struct MetricReport {
    double bleu = 0.0;
    double chrf = 0.0;
    std::size_t n_sentences = 0;
    double brevity_penalty = 1.0;
    std::vector<double> ngram_precisions;  // n = 1..4
};

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

inline NgramCounts word_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
    NgramCounts counts;
    if (tokens.size() >= n) {
        for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
            std::vector<std::string> gram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                          tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
            ++counts[std::move(gram)];
        }
    }
    return counts;
}

inline std::map<std::string, std::size_t> char_ngrams(const std::string& s, std::size_t n) {
    // s holds UTF-8; n-grams are over code points.
    std::vector<std::size_t> starts;
    std::size_t i = 0;
    while (i < s.size()) {
        starts.push_back(i);
        next_codepoint(s, i);
    }
    starts.push_back(s.size());
    std::map<std::string, std::size_t> counts;
    if (starts.size() > n) {
        for (std::size_t k = 0; k + n < starts.size(); ++k) {
            ++counts[s.substr(starts[k], starts[k + n] - starts[k])];
        }
    }
    return counts;
}

template <class Map>
inline std::size_t overlap(const Map& a, const Map& b) {
    std::size_t m = 0;
    for (const auto& [gram, cnt] : a) {
        auto it = b.find(gram);
        if (it != b.end()) m += std::min(cnt, it->second);
    }
    return m;
}

template <class Map>
inline std::size_t total(const Map& m) {
    std::size_t t = 0;
    for (const auto& [gram, cnt] : m) t += cnt;
    return t;
}

}  // namespace detail

/// Corpus-level BLEU-4 in [0,100] with full statistics.
inline MetricReport bleu_report(const std::vector<std::string>& hypotheses,
                                const std::vector<std::string>& references) {
    if (hypotheses.size() != references.size()) {
        throw std::invalid_argument("bleu: " + std::to_string(hypotheses.size()) +
                                    " hypotheses vs " + std::to_string(references.size()) +
                                    " references");
    }
    if (hypotheses.empty()) throw std::invalid_argument("bleu: empty corpus");

    constexpr std::size_t max_n = 4;
    std::size_t correct[max_n] = {0, 0, 0, 0};
    std::size_t totals[max_n] = {0, 0, 0, 0};
    std::size_t hyp_len = 0, ref_len = 0;
    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        const auto hyp = tokenize_13a(hypotheses[s]);
        const auto ref = tokenize_13a(references[s]);
        if (ref.empty()) {
            throw std::invalid_argument("bleu: empty reference at sentence " + std::to_string(s));
        }
        hyp_len += hyp.size();
        ref_len += ref.size();
        for (std::size_t n = 1; n <= max_n; ++n) {
            const auto hc = detail::word_ngrams(hyp, n);
            const auto rc = detail::word_ngrams(ref, n);
            correct[n - 1] += detail::overlap(hc, rc);
            totals[n - 1] += detail::total(hc);
        }
    }

    MetricReport report;
    report.n_sentences = hypotheses.size();
    report.ngram_precisions.assign(max_n, 0.0);
    if (hyp_len == 0) return report;

    double log_prec = 0.0;
    double smooth = 1.0;
    for (std::size_t n = 0; n < max_n; ++n) {
        double p = 0.0;
        if (totals[n] == 0) {
            report.ngram_precisions[n] = 0.0;
            return report;  // hypothesis too short for this order: score 0
        }
        if (correct[n] == 0) {
            smooth *= 2.0;
            p = 1.0 / (smooth * static_cast<double>(totals[n]));
        } else {
            p = static_cast<double>(correct[n]) / static_cast<double>(totals[n]);
        }
        report.ngram_precisions[n] = p;
        log_prec += std::log(p);
    }
    report.brevity_penalty =
        hyp_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
                          : 1.0;
    report.bleu = 100.0 * report.brevity_penalty * std::exp(log_prec / static_cast<double>(max_n));
    return report;
}

inline double bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references) {
    return bleu_report(hypotheses, references).bleu;
}

/// chrF in [0,100]; defaults are the chrF2++ configuration.
inline double chrf(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references, std::size_t char_n = 6,
                   std::size_t word_n = 2, double beta = 2.0) {
    if (hypotheses.size() != references.size()) {
        throw std::invalid_argument("chrf: " + std::to_string(hypotheses.size()) +
                                    " hypotheses vs " + std::to_string(references.size()) +
                                    " references");
    }
    if (hypotheses.empty()) throw std::invalid_argument("chrf: empty corpus");

    const std::size_t orders = char_n + word_n;
    std::vector<std::size_t> match(orders, 0), hyp_tot(orders, 0), ref_tot(orders, 0);

    auto strip_spaces = [](std::string_view s) {
        std::string out;
        out.reserve(s.size());
        std::size_t i = 0;
        while (i < s.size()) {
            std::size_t before = i;
            const char32_t cp = detail::next_codepoint(s, i);
            if (!detail::is_unicode_space(cp)) out.append(s.substr(before, i - before));
        }
        return out;
    };

    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        const std::string hyp_chars = strip_spaces(hypotheses[s]);
        const std::string ref_chars = strip_spaces(references[s]);
        for (std::size_t n = 1; n <= char_n; ++n) {
            const auto hc = detail::char_ngrams(hyp_chars, n);
            const auto rc = detail::char_ngrams(ref_chars, n);
            match[n - 1] += detail::overlap(hc, rc);
            hyp_tot[n - 1] += detail::total(hc);
            ref_tot[n - 1] += detail::total(rc);
        }
        const auto hyp_words = tokenize_13a(hypotheses[s]);
        const auto ref_words = tokenize_13a(references[s]);
        for (std::size_t n = 1; n <= word_n; ++n) {
            const auto hc = detail::word_ngrams(hyp_words, n);
            const auto rc = detail::word_ngrams(ref_words, n);
            match[char_n + n - 1] += detail::overlap(hc, rc);
            hyp_tot[char_n + n - 1] += detail::total(hc);
            ref_tot[char_n + n - 1] += detail::total(rc);
        }
    }

    double prec_sum = 0.0, rec_sum = 0.0;
    std::size_t live_orders = 0;
    for (std::size_t o = 0; o < orders; ++o) {
        if (hyp_tot[o] + ref_tot[o] == 0) continue;  // order absent from both sides
        ++live_orders;
        if (hyp_tot[o] > 0) prec_sum += static_cast<double>(match[o]) / static_cast<double>(hyp_tot[o]);
        if (ref_tot[o] > 0) rec_sum += static_cast<double>(match[o]) / static_cast<double>(ref_tot[o]);
    }
    if (live_orders == 0) return 0.0;
    const double p = prec_sum / static_cast<double>(live_orders);
    const double r = rec_sum / static_cast<double>(live_orders);
    const double b2 = beta * beta;
    if (p + r == 0.0) return 0.0;
    const double denom = b2 * p + r;
    if (denom == 0.0) return 0.0;
    return 100.0 * (1.0 + b2) * p * r / denom;
}

/// 100 * method / full_ft.
inline double relative_performance(double method_score, double full_ft_score) {
    if (!(full_ft_score > 0.0)) {
        throw std::invalid_argument("relative_performance: undefined baseline (full FT score " +
                                    std::to_string(full_ft_score) + " is not positive)");
    }
    return 100.0 * method_score / full_ft_score;
}

namespace detail {

/// Regularized incomplete beta I_x(a, b) via the continued fraction (Lentz).
inline double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
    const double front = std::exp(std::log(x) * a + std::log1p(-x) * b - ln_beta);

    auto contfrac = [](double aa, double bb, double xx) {
        constexpr double tiny = 1e-30;
        double c = 1.0, d = 0.0, f = 1.0;
        d = 1.0 - (aa + bb) * xx / (aa + 1.0);
        if (std::abs(d) < tiny) d = tiny;
        d = 1.0 / d;
        f = d;
        for (int m = 1; m <= 300; ++m) {
            const double dm = static_cast<double>(m);
            double num = dm * (bb - dm) * xx / ((aa + 2 * dm - 1) * (aa + 2 * dm));
            d = 1.0 + num * d;
            if (std::abs(d) < tiny) d = tiny;
            c = 1.0 + num / c;
            if (std::abs(c) < tiny) c = tiny;
            d = 1.0 / d;
            f *= d * c;
            num = -(aa + dm) * (aa + bb + dm) * xx / ((aa + 2 * dm) * (aa + 2 * dm + 1));
            d = 1.0 + num * d;
            if (std::abs(d) < tiny) d = tiny;
            c = 1.0 + num / c;
            if (std::abs(c) < tiny) c = tiny;
            d = 1.0 / d;
            const double delta = d * c;
            f *= delta;
            if (std::abs(delta - 1.0) < 1e-14) break;
        }
        return f;
    };

    // front is symmetric in (a,x) <-> (b,1-x), so it serves both branches of
    // I_x(a,b) = 1 - I_{1-x}(b,a).
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * contfrac(a, b, x) / a;
    }
    return 1.0 - front * contfrac(b, a, 1.0 - x) / b;
}

}  // namespace detail

struct PearsonResult {
    double r = 0.0;
    double p_value = 1.0;
    std::size_t n = 0;
};

/// Sample Pearson correlation with a two-sided p-value from the
/// t-distribution, t = r * sqrt((n-2) / (1-r^2)).
inline PearsonResult pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) {
        throw std::invalid_argument("pearson_r: length mismatch " + std::to_string(x.size()) +
                                    " vs " + std::to_string(y.size()));
    }
    const std::size_t n = x.size();
    if (n < 3) throw std::invalid_argument("pearson_r: need at least 3 points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw std::invalid_argument("pearson_r: degenerate input (zero variance)");
    }
    PearsonResult result;
    result.n = n;
    result.r = sxy / std::sqrt(sxx * syy);
    result.r = std::clamp(result.r, -1.0, 1.0);
    const double nu = static_cast<double>(n - 2);
    const double r2 = result.r * result.r;
    if (r2 >= 1.0) {
        result.p_value = 0.0;
    } else {
        const double t2 = r2 * nu / (1.0 - r2);
        result.p_value = detail::incomplete_beta(nu / 2.0, 0.5, nu / (nu + t2));
    }
    return result;
}

}  // namespace peftlab
