#pragma once

// ROUGE-1/2/L with per-language evaluation units. Alphabetic languages are
// lowercased and split on non-alphanumeric runs; CJK-script languages count
// every ideograph/kana/hangul codepoint as its own unit and apply the
// alphabetic rule to everything else.

#include "mixling/common.hpp"

#include <cstdio>
#include <map>
#include <ostream>
#include <unordered_map>

namespace mixling {

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;

    static RougeScore from_counts(double overlap, double cand_total, double ref_total) {
        RougeScore s;
        s.precision = cand_total > 0 ? overlap / cand_total : 0.0;
        s.recall = ref_total > 0 ? overlap / ref_total : 0.0;
        s.f1 = s.precision + s.recall > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
        return s;
    }
};

enum class Script { alphabetic, cjk };

inline Script script_for_language(std::string_view lang) {
    static const std::map<std::string, Script, std::less<>> registry = {
        {"en", Script::alphabetic}, {"xa", Script::alphabetic}, {"zh", Script::cjk},
        {"xb", Script::cjk},        {"ja", Script::cjk},        {"ko", Script::cjk},
    };
    auto it = registry.find(lang);
    if (it == registry.end()) throw Error("rouge: unregistered language '" + std::string(lang) + "'");
    return it->second;
}

namespace detail {

inline bool is_cjk(char32_t cp) {
    return (cp >= 0x4E00 && cp <= 0x9FFF) || (cp >= 0x3400 && cp <= 0x4DBF) || (cp >= 0xF900 && cp <= 0xFAFF) ||
           (cp >= 0x20000 && cp <= 0x2FFFF) || (cp >= 0x3040 && cp <= 0x30FF) || (cp >= 0xAC00 && cp <= 0xD7AF);
}

inline bool is_word_char(char32_t cp) {
    if (cp < 0x80) return (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
    if (cp <= 0xBF) return false;                       // Latin-1 punctuation and symbols
    if (cp >= 0x2000 && cp <= 0x2BFF) return false;     // general punctuation, symbols
    if (cp >= 0x3000 && cp <= 0x303F) return false;     // CJK punctuation
    if (cp >= 0xFE30 && cp <= 0xFE4F) return false;     // CJK compatibility forms
    if (cp >= 0xFF00 && cp <= 0xFF0F) return false;     // full-width punctuation
    if (cp >= 0xFF1A && cp <= 0xFF20) return false;
    if (cp >= 0xFF3B && cp <= 0xFF40) return false;
    if (cp >= 0xFF5B && cp <= 0xFF65) return false;
    return true;
}

// Decodes one codepoint; invalid bytes decode as themselves.
inline char32_t next_codepoint(std::string_view s, std::size_t& i) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c & 0xE0) == 0xC0 ? 2 : (c & 0xF0) == 0xE0 ? 3 : (c & 0xF8) == 0xF0 ? 4 : 0;
    if (len == 0 || i + len > s.size()) {
        ++i;
        return c;
    }
    char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1F) : len == 3 ? (c & 0x0F) : (c & 0x07);
    for (std::size_t k = 1; k < len; ++k) {
        const auto cc = static_cast<unsigned char>(s[i + k]);
        if ((cc & 0xC0) != 0x80) {
            ++i;
            return c;
        }
        cp = (cp << 6) | (cc & 0x3F);
    }
    i += len;
    return cp;
}

}  // namespace detail

inline std::vector<std::string> normalize(std::string_view text, Script script) {
    std::vector<std::string> units;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) units.push_back(std::move(word));
        word.clear();
    };
    std::size_t i = 0;
    while (i < text.size()) {
        const std::size_t start = i;
        const char32_t cp = detail::next_codepoint(text, i);
        if (script == Script::cjk && detail::is_cjk(cp)) {
            flush();
            units.emplace_back(text.substr(start, i - start));
        } else if (detail::is_word_char(cp)) {
            if (cp < 0x80) {
                word += static_cast<char>(cp >= 'A' && cp <= 'Z' ? cp - 'A' + 'a' : cp);
            } else {
                word.append(text.substr(start, i - start));
            }
        } else {
            flush();
        }
    }
    flush();
    return units;
}

inline std::vector<std::string> normalize(std::string_view text, std::string_view lang) {
    return normalize(text, script_for_language(lang));
}

using Units = std::vector<std::string>;

// Clipped n-gram overlap.
inline RougeScore rouge_n(const Units& cand, const Units& ref, std::size_t n) {
    if (n < 1) throw Error("rouge_n: n must be at least 1");
    auto grams = [n](const Units& u) {
        std::map<std::vector<std::string>, long> counts;
        for (std::size_t i = 0; i + n <= u.size(); ++i) {
            counts[std::vector<std::string>(u.begin() + static_cast<std::ptrdiff_t>(i),
                                            u.begin() + static_cast<std::ptrdiff_t>(i + n))] += 1;
        }
        return counts;
    };
    const auto c = grams(cand);
    const auto r = grams(ref);
    long overlap = 0;
    for (const auto& [g, k] : c) {
        if (auto it = r.find(g); it != r.end()) overlap += std::min(k, it->second);
    }
    const double cand_total = cand.size() >= n ? static_cast<double>(cand.size() - n + 1) : 0.0;
    const double ref_total = ref.size() >= n ? static_cast<double>(ref.size() - n + 1) : 0.0;
    return RougeScore::from_counts(static_cast<double>(overlap), cand_total, ref_total);
}

inline std::size_t lcs_length(const Units& a, const Units& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline RougeScore rouge_l(const Units& cand, const Units& ref) {
    return RougeScore::from_counts(static_cast<double>(lcs_length(cand, ref)), static_cast<double>(cand.size()),
                                   static_cast<double>(ref.size()));
}

struct CorpusRouge {
    RougeScore rouge1, rouge2, rougeL;
    std::size_t pairs = 0;
};

struct CandidateReference {
    std::string candidate;
    std::string reference;
};

// Per-pair scores averaged arithmetically (P, R and F1 each).
inline CorpusRouge corpus_rouge(const std::vector<CandidateReference>& pairs, std::string_view lang) {
    if (pairs.empty()) throw Error("corpus_rouge: no pairs");
    const Script script = script_for_language(lang);
    CorpusRouge out;
    auto add = [](RougeScore& acc, const RougeScore& s) {
        acc.precision += s.precision;
        acc.recall += s.recall;
        acc.f1 += s.f1;
    };
    for (const auto& p : pairs) {
        const auto c = normalize(p.candidate, script);
        const auto r = normalize(p.reference, script);
        add(out.rouge1, rouge_n(c, r, 1));
        add(out.rouge2, rouge_n(c, r, 2));
        add(out.rougeL, rouge_l(c, r));
    }
    const double n = static_cast<double>(pairs.size());
    for (auto* s : {&out.rouge1, &out.rouge2, &out.rougeL}) {
        s->precision /= n;
        s->recall /= n;
        s->f1 /= n;
    }
    out.pairs = pairs.size();
    return out;
}

inline void write_rouge_report(std::ostream& os, const CorpusRouge& r) {
    char buf[128];
    auto line = [&](const char* name, const RougeScore& s) {
        std::snprintf(buf, sizeof buf, "%-8s P=%.4f R=%.4f F1=%.4f\n", name, s.precision, s.recall, s.f1);
        os << buf;
    };
    os << "pairs " << r.pairs << '\n';
    line("ROUGE-1", r.rouge1);
    line("ROUGE-2", r.rouge2);
    line("ROUGE-L", r.rougeL);
}

}  // namespace mixling
