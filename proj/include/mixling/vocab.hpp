#pragma once

// Shared multilingual subword vocabulary.
//
// Id layout (all reserved ids sit below every learned piece):
//
//   [0, controls)                 pad, unk, bos, eos, sep, <M>, task symbols,
//                                 language symbols, 100 sentinels
//   [controls, controls + 256)    byte-fallback tokens <0x00>..<0xFF>
//   [reserved, size)              learned pieces: alphabet characters first,
//                                 then one piece per pair merge, in merge order
//
// Text is pre-split SentencePiece style: every space becomes U+2581 and a new
// chunk starts at each of them. Merges never cross chunk boundaries. Characters
// outside the learned alphabet, invalid UTF-8 and literal U+2581 are emitted as
// byte tokens, which keeps decode(encode(s)) == s for arbitrary bytes.

#include "mixling/common.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <sstream>
#include <unordered_map>
#include <unordered_set>
#include <utility>

namespace mixling {

inline constexpr int kNumSentinels = 100;
inline constexpr int kNumByteTokens = 256;
inline constexpr std::string_view kSpaceMarker = "\xE2\x96\x81";  // U+2581

struct SpecialTokens {
    TokenId pad_id = 0;
    TokenId unk_id = 1;
    TokenId bos_id = 2;
    TokenId eos_id = 3;
    TokenId separator_id = 4;
    TokenId shared_mask_id = 5;
    std::array<TokenId, kNumTasks> task_ids{};
    std::vector<std::string> lang_codes;
    std::vector<TokenId> lang_ids;
    std::vector<TokenId> sentinel_ids;

    static SpecialTokens make(std::vector<std::string> langs = {"en", "zh", "xa", "xb"}) {
        if (langs.empty()) throw Error("SpecialTokens: at least one language is required");
        std::unordered_set<std::string> seen;
        for (const auto& l : langs) {
            if (l.empty() || !seen.insert(l).second) throw Error("SpecialTokens: bad or duplicate language '" + l + "'");
        }
        SpecialTokens s;
        TokenId next = 6;
        for (auto& id : s.task_ids) id = next++;
        s.lang_codes = std::move(langs);
        for (std::size_t i = 0; i < s.lang_codes.size(); ++i) s.lang_ids.push_back(next++);
        for (int i = 0; i < kNumSentinels; ++i) s.sentinel_ids.push_back(next++);
        return s;
    }

    TokenId control_count() const { return sentinel_ids.back() + 1; }
    TokenId byte_base() const { return control_count(); }
    TokenId reserved_count() const { return byte_base() + kNumByteTokens; }

    bool is_control(TokenId id) const { return id >= 0 && id < control_count(); }
    bool is_byte(TokenId id) const { return id >= byte_base() && id < reserved_count(); }
    bool is_sentinel(TokenId id) const { return id >= sentinel_ids.front() && id <= sentinel_ids.back(); }
    bool is_task(TokenId id) const { return id >= task_ids.front() && id <= task_ids.back(); }
    bool is_lang(TokenId id) const { return id >= lang_ids.front() && id <= lang_ids.back(); }

    TokenId sentinel(int index) const {
        if (index < 0 || index >= kNumSentinels) throw Error("sentinel index out of range: " + std::to_string(index));
        return sentinel_ids[static_cast<std::size_t>(index)];
    }
    int sentinel_index(TokenId id) const { return is_sentinel(id) ? id - sentinel_ids.front() : -1; }

    TokenId task_id(Task t) const { return task_ids[static_cast<std::size_t>(t)]; }
    Task task_of(TokenId id) const {
        if (!is_task(id)) throw Error("id " + std::to_string(id) + " is not a task symbol");
        return static_cast<Task>(id - task_ids.front());
    }

    TokenId lang_id(std::string_view code) const {
        for (std::size_t i = 0; i < lang_codes.size(); ++i) {
            if (lang_codes[i] == code) return lang_ids[i];
        }
        throw Error("unregistered language '" + std::string(code) + "'");
    }
    const std::string& lang_code(TokenId id) const {
        if (!is_lang(id)) throw Error("id " + std::to_string(id) + " is not a language symbol");
        return lang_codes[static_cast<std::size_t>(id - lang_ids.front())];
    }

    // Bracketed canonical name of a control or byte token.
    std::string name(TokenId id) const {
        if (id == pad_id) return "<pad>";
        if (id == unk_id) return "<unk>";
        if (id == bos_id) return "<bos>";
        if (id == eos_id) return "<eos>";
        if (id == separator_id) return "<sep>";
        if (id == shared_mask_id) return "<M>";
        if (is_task(id)) return "<" + std::string(task_name(task_of(id))) + ">";
        if (is_lang(id)) return "<" + lang_code(id) + ">";
        if (is_sentinel(id)) return "<extra_" + std::to_string(sentinel_index(id)) + ">";
        if (is_byte(id)) {
            char buf[8];
            std::snprintf(buf, sizeof buf, "<0x%02X>", id - byte_base());
            return buf;
        }
        throw Error("id " + std::to_string(id) + " is not reserved");
    }
};

namespace detail {

struct TextUnit {
    std::string text;
    bool raw = false;  // must go through byte fallback
};

// Splits UTF-8 into characters. Spaces become the marker; invalid sequences
// and literal markers are flagged raw, one byte per unit.
inline std::vector<TextUnit> split_units(std::string_view s) {
    std::vector<TextUnit> out;
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        if (c == ' ') {
            out.push_back({std::string(kSpaceMarker), false});
            ++i;
            continue;
        }
        std::size_t len = 0;
        if (c < 0x80) len = 1;
        else if ((c & 0xE0) == 0xC0 && c >= 0xC2) len = 2;
        else if ((c & 0xF0) == 0xE0) len = 3;
        else if ((c & 0xF8) == 0xF0 && c <= 0xF4) len = 4;
        bool ok = len > 0 && i + len <= s.size();
        for (std::size_t k = 1; ok && k < len; ++k) {
            ok = (static_cast<unsigned char>(s[i + k]) & 0xC0) == 0x80;
        }
        if (ok && len == 3) {
            const auto c1 = static_cast<unsigned char>(s[i + 1]);
            if ((c == 0xE0 && c1 < 0xA0) || (c == 0xED && c1 >= 0xA0)) ok = false;
        } else if (ok && len == 4) {
            const auto c1 = static_cast<unsigned char>(s[i + 1]);
            if ((c == 0xF0 && c1 < 0x90) || (c == 0xF4 && c1 >= 0x90)) ok = false;
        }
        if (!ok) {
            out.push_back({std::string(1, s[i]), true});
            ++i;
            continue;
        }
        std::string ch(s.substr(i, len));
        const bool raw = ch == kSpaceMarker;
        if (raw) {
            for (char b : ch) out.push_back({std::string(1, b), true});
        } else {
            out.push_back({std::move(ch), false});
        }
        i += len;
    }
    return out;
}

inline std::string escape_field(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case '\t': out += "\\t"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string unescape_field(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '\\') {
            out += s[i];
            continue;
        }
        if (++i >= s.size()) throw Error("vocab file: dangling escape");
        switch (s[i]) {
            case '\\': out += '\\'; break;
            case 't': out += '\t'; break;
            case 'n': out += '\n'; break;
            case 'r': out += '\r'; break;
            default: throw Error("vocab file: unknown escape");
        }
    }
    return out;
}

struct PairHash {
    std::size_t operator()(const std::pair<TokenId, TokenId>& p) const noexcept {
        return std::hash<std::uint64_t>{}((static_cast<std::uint64_t>(static_cast<std::uint32_t>(p.first)) << 32) |
                                          static_cast<std::uint32_t>(p.second));
    }
};

}  // namespace detail

// One line of training text tagged with its language code.
struct LangText {
    std::string lang;
    std::string text;
};

struct VocabTrainOptions {
    std::size_t target_size = 4000;
    std::uint64_t seed = 0;
    bool balance_languages = true;
};

class Vocabulary {
   public:
    Vocabulary() = default;

    const SpecialTokens& specials() const { return specials_; }
    std::size_t size() const { return static_cast<std::size_t>(specials_.reserved_count()) + pieces_.size(); }
    std::size_t learned_count() const { return pieces_.size(); }
    // Size asked for at training time; larger than size() when the corpus ran
    // out of mergeable pairs.
    std::size_t requested_size() const { return requested_size_; }
    bool exhausted() const { return size() < requested_size_; }

    bool is_learned(TokenId id) const { return id >= specials_.reserved_count() && static_cast<std::size_t>(id) < size(); }

    // Raw piece text with the space marker still in place.
    const std::string& piece(TokenId id) const {
        if (!is_learned(id)) throw Error("id " + std::to_string(id) + " is not a learned piece");
        return pieces_[static_cast<std::size_t>(id - specials_.reserved_count())].text;
    }

    std::optional<TokenId> find_piece(std::string_view text) const {
        auto it = piece_index_.find(std::string(text));
        if (it == piece_index_.end()) return std::nullopt;
        return it->second;
    }

    TokenIds encode(std::string_view text) const {
        TokenIds out;
        const auto units = detail::split_units(text);
        std::vector<TokenId> chunk;
        auto flush = [&] {
            merge_chunk(chunk);
            out.insert(out.end(), chunk.begin(), chunk.end());
            chunk.clear();
        };
        for (const auto& u : units) {
            if (u.text == kSpaceMarker && !u.raw) flush();
            if (!u.raw) {
                if (auto it = alphabet_.find(u.text); it != alphabet_.end()) {
                    chunk.push_back(it->second);
                    continue;
                }
            }
            for (unsigned char b : u.text) chunk.push_back(specials_.byte_base() + b);
        }
        flush();
        return out;
    }

    std::string decode(std::span<const TokenId> ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const TokenId id = ids[i];
            if (id < 0 || static_cast<std::size_t>(id) >= size()) {
                throw Error("decode: id " + std::to_string(id) + " at index " + std::to_string(i) +
                            " is out of range for vocabulary of size " + std::to_string(size()));
            }
            if (specials_.is_control(id)) {
                out += specials_.name(id);
            } else if (specials_.is_byte(id)) {
                out += static_cast<char>(id - specials_.byte_base());
            } else {
                const std::string& p = piece(id);
                std::size_t pos = 0;
                while (pos < p.size()) {
                    if (p.compare(pos, kSpaceMarker.size(), kSpaceMarker) == 0) {
                        out += ' ';
                        pos += kSpaceMarker.size();
                    } else {
                        out += p[pos++];
                    }
                }
            }
        }
        return out;
    }

    std::string decode(const TokenIds& ids) const { return decode(std::span<const TokenId>(ids)); }

    // Human-readable token rendering, one string per id.
    std::string token_text(TokenId id) const {
        if (specials_.is_control(id) || specials_.is_byte(id)) return specials_.name(id);
        return piece(id);
    }

    static Vocabulary train(const std::vector<LangText>& corpus, const VocabTrainOptions& opts,
                            SpecialTokens specials = SpecialTokens::make());

    void save(std::ostream& os) const;
    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw Error("cannot write vocabulary to " + path);
        save(f);
    }
    static Vocabulary load(std::istream& is);
    static Vocabulary load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw Error("cannot open vocabulary " + path);
        return load(f);
    }

    static constexpr int kFormatVersion = 1;

   private:
    struct Piece {
        std::string text;
        TokenId left = -1;  // -1 for alphabet characters
        TokenId right = -1;
    };

    void add_piece(Piece p) {
        const TokenId id = specials_.reserved_count() + static_cast<TokenId>(pieces_.size());
        if (!piece_index_.emplace(p.text, id).second) throw Error("duplicate piece '" + p.text + "'");
        if (p.left < 0) {
            alphabet_.emplace(p.text, id);
        } else {
            merges_.emplace(std::make_pair(p.left, p.right), id);
        }
        pieces_.push_back(std::move(p));
    }

    // Greedy lowest-rank-first merging, all occurrences of the winning pair
    // merged left to right. Merged ids are assigned in merge order so the id
    // doubles as the rank.
    void merge_chunk(std::vector<TokenId>& syms) const {
        while (syms.size() > 1) {
            TokenId best = -1;
            std::pair<TokenId, TokenId> best_pair{};
            for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
                auto it = merges_.find({syms[i], syms[i + 1]});
                if (it != merges_.end() && (best < 0 || it->second < best)) {
                    best = it->second;
                    best_pair = it->first;
                }
            }
            if (best < 0) return;
            std::vector<TokenId> next;
            next.reserve(syms.size());
            for (std::size_t i = 0; i < syms.size(); ++i) {
                if (i + 1 < syms.size() && syms[i] == best_pair.first && syms[i + 1] == best_pair.second) {
                    next.push_back(best);
                    ++i;
                } else {
                    next.push_back(syms[i]);
                }
            }
            syms.swap(next);
        }
    }

    SpecialTokens specials_ = SpecialTokens::make();
    std::vector<Piece> pieces_;
    std::unordered_map<std::string, TokenId> piece_index_;
    std::unordered_map<std::string, TokenId> alphabet_;
    std::unordered_map<std::pair<TokenId, TokenId>, TokenId, detail::PairHash> merges_;
    std::size_t requested_size_ = 0;
};

inline Vocabulary Vocabulary::train(const std::vector<LangText>& corpus, const VocabTrainOptions& opts,
                                    SpecialTokens specials) {
    if (corpus.empty()) throw Error("train_vocab: empty corpus");
    const auto reserved = static_cast<std::size_t>(specials.reserved_count());
    if (opts.target_size <= reserved) {
        throw Error("train_vocab: target size " + std::to_string(opts.target_size) +
                    " must exceed the reserved block of " + std::to_string(reserved));
    }

    // Equal line counts per language, sampled without replacement.
    std::vector<const std::string*> lines;
    {
        std::map<std::string, std::vector<const std::string*>> by_lang;
        for (const auto& lt : corpus) by_lang[lt.lang].push_back(&lt.text);
        if (opts.balance_languages && by_lang.size() > 1) {
            std::size_t per_lang = SIZE_MAX;
            for (const auto& [_, v] : by_lang) per_lang = std::min(per_lang, v.size());
            Rng rng(derive_seed(opts.seed, "vocab-balance"));
            for (auto& [_, v] : by_lang) {
                shuffle_in_place(v, rng);
                lines.insert(lines.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(per_lang));
            }
        } else {
            for (const auto& lt : corpus) lines.push_back(&lt.text);
        }
    }

    // Chunk frequencies over characters; raw units split chunks.
    std::map<std::vector<std::string>, std::int64_t> chunk_freq;
    std::map<std::string, std::int64_t> char_freq;
    for (const std::string* line : lines) {
        std::vector<std::string> chunk;
        auto flush = [&] {
            if (!chunk.empty()) chunk_freq[chunk] += 1;
            chunk.clear();
        };
        for (auto& u : detail::split_units(*line)) {
            if (u.raw) {
                flush();
                continue;
            }
            if (u.text == kSpaceMarker) flush();
            char_freq[u.text] += 1;
            chunk.push_back(std::move(u.text));
        }
        flush();
    }

    Vocabulary v;
    v.specials_ = std::move(specials);
    v.requested_size_ = opts.target_size;

    // Alphabet: most frequent characters first, ties by byte order.
    std::vector<std::pair<std::string, std::int64_t>> chars(char_freq.begin(), char_freq.end());
    std::stable_sort(chars.begin(), chars.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    const std::size_t capacity = opts.target_size - reserved;
    if (chars.size() > capacity) chars.resize(capacity);
    for (const auto& [c, _] : chars) v.add_piece({c, -1, -1});

    // Words as symbol sequences; characters that missed the alphabet cut words.
    std::vector<std::vector<TokenId>> words;
    std::vector<std::int64_t> counts;
    for (const auto& [chunk, freq] : chunk_freq) {
        std::vector<TokenId> syms;
        auto push = [&] {
            if (syms.size() > 1) {
                words.push_back(syms);
                counts.push_back(freq);
            }
            syms.clear();
        };
        for (const auto& c : chunk) {
            auto it = v.alphabet_.find(c);
            if (it == v.alphabet_.end()) {
                push();
            } else {
                syms.push_back(it->second);
            }
        }
        push();
    }

    using Pair = std::pair<TokenId, TokenId>;
    std::unordered_map<Pair, std::int64_t, detail::PairHash> pair_count;
    std::unordered_map<Pair, std::vector<std::size_t>, detail::PairHash> where;
    auto add_word_pairs = [&](std::size_t w, std::int64_t sign) {
        const auto& s = words[w];
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            const Pair p{s[i], s[i + 1]};
            pair_count[p] += sign * counts[w];
            if (sign > 0) where[p].push_back(w);
        }
    };
    for (std::size_t w = 0; w < words.size(); ++w) add_word_pairs(w, +1);

    // Max-heap on (count, then smallest pair) with lazy invalidation.
    using Entry = std::pair<std::int64_t, Pair>;
    auto cmp = [](const Entry& a, const Entry& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second > b.second;
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(cmp)> heap(cmp);
    for (const auto& [p, c] : pair_count) heap.push({c, p});
    std::unordered_set<Pair, detail::PairHash> blocked;

    while (v.size() < opts.target_size && !heap.empty()) {
        const auto [count, pair] = heap.top();
        heap.pop();
        auto pc = pair_count.find(pair);
        if (pc == pair_count.end() || pc->second != count || count <= 0 || blocked.count(pair)) continue;
        std::string merged = v.piece(pair.first) + v.piece(pair.second);
        if (v.piece_index_.count(merged)) {
            // Would duplicate an existing piece string.
            blocked.insert(pair);
            continue;
        }
        v.add_piece({std::move(merged), pair.first, pair.second});
        const TokenId new_id = static_cast<TokenId>(v.size() - 1);

        auto affected = std::move(where[pair]);
        where.erase(pair);
        std::sort(affected.begin(), affected.end());
        affected.erase(std::unique(affected.begin(), affected.end()), affected.end());
        std::unordered_set<Pair, detail::PairHash> touched;
        for (std::size_t w : affected) {
            auto& s = words[w];
            bool present = false;
            for (std::size_t i = 0; i + 1 < s.size(); ++i) {
                if (s[i] == pair.first && s[i + 1] == pair.second) {
                    present = true;
                    break;
                }
            }
            if (!present) continue;
            for (std::size_t i = 0; i + 1 < s.size(); ++i) {
                const Pair p{s[i], s[i + 1]};
                pair_count[p] -= counts[w];
                touched.insert(p);
            }
            std::vector<TokenId> next;
            next.reserve(s.size());
            for (std::size_t i = 0; i < s.size(); ++i) {
                if (i + 1 < s.size() && s[i] == pair.first && s[i + 1] == pair.second) {
                    next.push_back(new_id);
                    ++i;
                } else {
                    next.push_back(s[i]);
                }
            }
            s.swap(next);
            for (std::size_t i = 0; i + 1 < s.size(); ++i) {
                const Pair p{s[i], s[i + 1]};
                pair_count[p] += counts[w];
                where[p].push_back(w);
                touched.insert(p);
            }
        }
        pair_count.erase(pair);
        for (const auto& p : touched) {
            auto it = pair_count.find(p);
            if (it != pair_count.end() && it->second > 0) heap.push({it->second, p});
        }
    }
    return v;
}

inline void Vocabulary::save(std::ostream& os) const {
    os << "mixling-vocab\tversion=" << kFormatVersion << "\tsize=" << size() << "\trequested=" << requested_size_
       << "\tcontrols=" << specials_.control_count() << "\tbytes=" << kNumByteTokens
       << "\tsentinels=" << kNumSentinels << "\tlangs=";
    for (std::size_t i = 0; i < specials_.lang_codes.size(); ++i) os << (i ? "," : "") << specials_.lang_codes[i];
    os << '\n';
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
        const auto& p = pieces_[i];
        os << specials_.reserved_count() + static_cast<TokenId>(i) << '\t' << p.left << '\t' << p.right << '\t'
           << detail::escape_field(p.text) << '\n';
    }
    if (!os) throw Error("vocabulary write failed");
}

inline Vocabulary Vocabulary::load(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw Error("vocab file: missing header");
    std::map<std::string, std::string> fields;
    std::istringstream hs(header);
    std::string tok;
    std::getline(hs, tok, '\t');
    if (tok != "mixling-vocab") throw Error("vocab file: bad magic");
    while (std::getline(hs, tok, '\t')) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw Error("vocab file: malformed header field '" + tok + "'");
        fields[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    auto field = [&](const std::string& k) -> const std::string& {
        auto it = fields.find(k);
        if (it == fields.end()) throw Error("vocab file: header lacks '" + k + "'");
        return it->second;
    };
    if (field("version") != std::to_string(kFormatVersion)) {
        throw Error("vocab file: unsupported format version " + field("version"));
    }
    std::vector<std::string> langs;
    {
        std::istringstream ls(field("langs"));
        std::string l;
        while (std::getline(ls, l, ',')) langs.push_back(l);
    }
    Vocabulary v;
    v.specials_ = SpecialTokens::make(langs);
    if (std::stoi(field("controls")) != v.specials_.control_count() ||
        std::stoi(field("bytes")) != kNumByteTokens || std::stoi(field("sentinels")) != kNumSentinels) {
        throw Error("vocab file: special layout does not match this build");
    }
    v.requested_size_ = std::stoull(field("requested"));
    const std::size_t size = std::stoull(field("size"));
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::array<std::string, 3> num;
        std::size_t pos = 0;
        for (auto& n : num) {
            const auto tab = line.find('\t', pos);
            if (tab == std::string::npos) throw Error("vocab file: malformed piece line '" + line + "'");
            n = line.substr(pos, tab - pos);
            pos = tab + 1;
        }
        const TokenId id = std::stoi(num[0]);
        if (static_cast<std::size_t>(id) != v.size()) throw Error("vocab file: pieces out of order at id " + num[0]);
        Piece p{detail::unescape_field(std::string_view(line).substr(pos)), std::stoi(num[1]), std::stoi(num[2])};
        if (p.left >= 0 && (!v.is_learned(p.left) || !v.is_learned(p.right) ||
                            v.piece(p.left) + v.piece(p.right) != p.text)) {
            throw Error("vocab file: inconsistent merge at id " + num[0]);
        }
        v.add_piece(std::move(p));
    }
    if (v.size() != size) throw Error("vocab file: header size does not match piece count");
    return v;
}

inline Vocabulary train_vocab(const std::vector<LangText>& corpus, std::size_t target_size, std::uint64_t seed = 0,
                              SpecialTokens specials = SpecialTokens::make()) {
    return Vocabulary::train(corpus, VocabTrainOptions{target_size, seed, true}, std::move(specials));
}

}  // namespace mixling
