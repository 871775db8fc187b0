#pragma once

// Line-delimited JSON corpora, deterministic subsampling, and the synthetic
// bilingual generator.
//
// Record schemas (one JSON object per line, "v" is the format version):
//   mono      {"v":1,"kind":"mono","id":..,"lang":..,"text":..}
//   parallel  {"v":1,"kind":"parallel","id":..,"lang_a":..,"lang_b":..,"text_a":..,"text_b":..}
//   summ      {"v":1,"kind":"summ","id":..,"doc_lang":..,"summ_lang":..,"doc":..,"summary":..}

#include "mixling/common.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>

namespace mixling {

inline constexpr int kCorpusFormatVersion = 1;

enum class RecordKind { mono, parallel, summ };

inline std::string_view kind_name(RecordKind k) {
    switch (k) {
        case RecordKind::mono: return "mono";
        case RecordKind::parallel: return "parallel";
        case RecordKind::summ: return "summ";
    }
    return "?";
}

inline RecordKind kind_from_name(std::string_view s) {
    if (s == "mono") return RecordKind::mono;
    if (s == "parallel") return RecordKind::parallel;
    if (s == "summ") return RecordKind::summ;
    throw Error("unknown record kind '" + std::string(s) + "'");
}

// `lang_a`/`text_a` hold the mono sentence, the first side of a pair, or the
// document; `lang_b`/`text_b` the second side or the summary.
struct CorpusRecord {
    RecordKind kind = RecordKind::mono;
    std::string id;
    std::string lang_a, text_a;
    std::string lang_b, text_b;

    static CorpusRecord mono(std::string id, std::string lang, std::string text) {
        return {RecordKind::mono, std::move(id), std::move(lang), std::move(text), {}, {}};
    }
    static CorpusRecord parallel(std::string id, std::string la, std::string ta, std::string lb, std::string tb) {
        return {RecordKind::parallel, std::move(id), std::move(la), std::move(ta), std::move(lb), std::move(tb)};
    }
    static CorpusRecord summ(std::string id, std::string doc_lang, std::string doc, std::string summ_lang,
                             std::string summary) {
        return {RecordKind::summ,      std::move(id),        std::move(doc_lang), std::move(doc),
                std::move(summ_lang), std::move(summary)};
    }

    void validate() const {
        auto need = [&](const std::string& s, const char* field) {
            if (s.empty()) throw Error(std::string(kind_name(kind)) + " record '" + id + "': empty " + field);
        };
        need(id, "id");
        need(lang_a, kind == RecordKind::summ ? "doc_lang" : kind == RecordKind::mono ? "lang" : "lang_a");
        need(text_a, kind == RecordKind::summ ? "doc" : kind == RecordKind::mono ? "text" : "text_a");
        if (kind == RecordKind::mono) return;
        need(lang_b, kind == RecordKind::summ ? "summ_lang" : "lang_b");
        need(text_b, kind == RecordKind::summ ? "summary" : "text_b");
        if (kind == RecordKind::parallel && lang_a == lang_b) {
            throw Error("parallel record '" + id + "': both sides are '" + lang_a + "'");
        }
    }

    bool operator==(const CorpusRecord&) const = default;
};

inline nlohmann::json record_to_json(const CorpusRecord& r) {
    nlohmann::json j;
    j["v"] = kCorpusFormatVersion;
    j["kind"] = kind_name(r.kind);
    j["id"] = r.id;
    switch (r.kind) {
        case RecordKind::mono:
            j["lang"] = r.lang_a;
            j["text"] = r.text_a;
            break;
        case RecordKind::parallel:
            j["lang_a"] = r.lang_a;
            j["lang_b"] = r.lang_b;
            j["text_a"] = r.text_a;
            j["text_b"] = r.text_b;
            break;
        case RecordKind::summ:
            j["doc_lang"] = r.lang_a;
            j["summ_lang"] = r.lang_b;
            j["doc"] = r.text_a;
            j["summary"] = r.text_b;
            break;
    }
    return j;
}

inline CorpusRecord record_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error("record is not a JSON object");
    auto str = [&](const char* key) -> std::string {
        auto it = j.find(key);
        if (it == j.end()) throw Error(std::string("missing field '") + key + "'");
        if (!it->is_string()) throw Error(std::string("field '") + key + "' is not a string");
        return it->get<std::string>();
    };
    auto v = j.find("v");
    if (v == j.end() || !v->is_number_integer()) throw Error("missing format version 'v'");
    if (v->get<int>() != kCorpusFormatVersion) throw Error("unsupported format version " + v->dump());
    CorpusRecord r;
    r.kind = kind_from_name(str("kind"));
    r.id = str("id");
    switch (r.kind) {
        case RecordKind::mono:
            r.lang_a = str("lang");
            r.text_a = str("text");
            break;
        case RecordKind::parallel:
            r.lang_a = str("lang_a");
            r.lang_b = str("lang_b");
            r.text_a = str("text_a");
            r.text_b = str("text_b");
            break;
        case RecordKind::summ:
            r.lang_a = str("doc_lang");
            r.lang_b = str("summ_lang");
            r.text_a = str("doc");
            r.text_b = str("summary");
            break;
    }
    r.validate();
    return r;
}

struct Diagnostic {
    std::size_t line = 0;  // 1-based
    std::string message;
};

// Streaming reader. Blank lines are skipped. In strict mode the first bad
// line throws; otherwise it is recorded and skipped.
class CorpusReader {
   public:
    CorpusReader(std::istream& in, std::optional<RecordKind> expected, bool strict, std::string source = "<stream>")
        : in_(in), expected_(expected), strict_(strict), source_(std::move(source)) {}

    std::optional<CorpusRecord> next() {
        std::string line;
        while (std::getline(in_, line)) {
            ++line_no_;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.find_first_not_of(" \t") == std::string::npos) continue;
            try {
                auto r = record_from_json(nlohmann::json::parse(line));
                if (expected_ && r.kind != *expected_) {
                    throw Error("expected a " + std::string(kind_name(*expected_)) + " record, found " +
                                std::string(kind_name(r.kind)));
                }
                ++count_;
                return r;
            } catch (const std::exception& e) {
                const std::string msg = e.what();
                if (strict_) throw Error(source_ + ":" + std::to_string(line_no_) + ": " + msg);
                diagnostics_.push_back({line_no_, msg});
            }
        }
        return std::nullopt;
    }

    const std::vector<Diagnostic>& diagnostics() const { return diagnostics_; }
    std::size_t records_read() const { return count_; }

   private:
    std::istream& in_;
    std::optional<RecordKind> expected_;
    bool strict_;
    std::string source_;
    std::size_t line_no_ = 0;
    std::size_t count_ = 0;
    std::vector<Diagnostic> diagnostics_;
};

struct LoadedCorpus {
    std::vector<CorpusRecord> records;
    std::vector<Diagnostic> diagnostics;
};

inline LoadedCorpus load_corpus(std::istream& in, std::optional<RecordKind> expected, bool strict = true,
                                const std::string& source = "<stream>") {
    CorpusReader reader(in, expected, strict, source);
    LoadedCorpus out;
    while (auto r = reader.next()) out.records.push_back(std::move(*r));
    out.diagnostics = reader.diagnostics();
    return out;
}

inline LoadedCorpus load_corpus(const std::string& path, std::optional<RecordKind> expected, bool strict = true) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open corpus file " + path);
    return load_corpus(f, expected, strict, path);
}

inline void write_corpus(std::ostream& os, const std::vector<CorpusRecord>& records) {
    for (const auto& r : records) os << record_to_json(r).dump() << '\n';
}

inline void write_corpus(const std::string& path, const std::vector<CorpusRecord>& records) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write corpus file " + path);
    write_corpus(f, records);
}

// Uniform draw of n items without replacement, kept in original order.
template <typename R>
std::vector<R> subsample(const std::vector<R>& records, std::size_t n, std::uint64_t seed) {
    if (n > records.size()) {
        throw Error("subsample: asked for " + std::to_string(n) + " of " + std::to_string(records.size()) + " records");
    }
    std::vector<std::size_t> idx(records.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "subsample"));
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    std::vector<R> out;
    out.reserve(n);
    for (std::size_t i : idx) out.push_back(records[i]);
    return out;
}

struct SyntheticSpec {
    std::string lang_a = "xa";
    std::string lang_b = "xb";
    std::size_t units = 48;        // alphabet size of each language
    std::uint64_t seed = 1;
    double zipf_exponent = 0.0;    // 0 draws units uniformly
    std::size_t sent_min = 4, sent_max = 10;
    std::size_t doc_min = 8, doc_max = 14;
    std::size_t lead_k = 3;
    std::size_t mono_a = 2000, mono_b = 2000, parallel = 2000, mono_summ = 2000;
    std::size_t cls_train = 2000, cls_valid = 100, cls_test = 200;

    void validate() const {
        if (lead_k < 1) throw Error("synthetic: lead_k must be at least 1");
        if (units < 2 || units > 2000) throw Error("synthetic: units must lie in [2, 2000]");
        if (sent_min < 1 || sent_min > sent_max) throw Error("synthetic: bad sentence length range");
        if (doc_min < lead_k || doc_min > doc_max) throw Error("synthetic: documents must hold at least lead_k units");
        if (lang_a == lang_b) throw Error("synthetic: the two languages must differ");
        for (std::size_t n : {mono_a, mono_b, parallel, mono_summ, cls_train, cls_valid, cls_test}) {
            if (n < 1) throw Error("synthetic: every corpus size must be at least 1");
        }
        if (!(zipf_exponent >= 0.0)) throw Error("synthetic: negative zipf exponent");
    }
};

inline nlohmann::json synthetic_to_json(const SyntheticSpec& s) {
    return {{"lang_a", s.lang_a},       {"lang_b", s.lang_b},       {"units", s.units},
            {"seed", s.seed},           {"zipf_exponent", s.zipf_exponent}, {"sent_min", s.sent_min},
            {"sent_max", s.sent_max},   {"doc_min", s.doc_min},     {"doc_max", s.doc_max},
            {"lead_k", s.lead_k},       {"mono_a", s.mono_a},       {"mono_b", s.mono_b},
            {"parallel", s.parallel},   {"mono_summ", s.mono_summ}, {"cls_train", s.cls_train},
            {"cls_valid", s.cls_valid}, {"cls_test", s.cls_test}};
}

inline SyntheticSpec synthetic_from_json(const nlohmann::json& j, SyntheticSpec s = {}) {
    for (const auto& [key, value] : j.items()) {
        if (key == "lang_a") s.lang_a = value.get<std::string>();
        else if (key == "lang_b") s.lang_b = value.get<std::string>();
        else if (key == "units") s.units = value.get<std::size_t>();
        else if (key == "seed") s.seed = value.get<std::uint64_t>();
        else if (key == "zipf_exponent") s.zipf_exponent = value.get<double>();
        else if (key == "sent_min") s.sent_min = value.get<std::size_t>();
        else if (key == "sent_max") s.sent_max = value.get<std::size_t>();
        else if (key == "doc_min") s.doc_min = value.get<std::size_t>();
        else if (key == "doc_max") s.doc_max = value.get<std::size_t>();
        else if (key == "lead_k") s.lead_k = value.get<std::size_t>();
        else if (key == "mono_a") s.mono_a = value.get<std::size_t>();
        else if (key == "mono_b") s.mono_b = value.get<std::size_t>();
        else if (key == "parallel") s.parallel = value.get<std::size_t>();
        else if (key == "mono_summ") s.mono_summ = value.get<std::size_t>();
        else if (key == "cls_train") s.cls_train = value.get<std::size_t>();
        else if (key == "cls_valid") s.cls_valid = value.get<std::size_t>();
        else if (key == "cls_test") s.cls_test = value.get<std::size_t>();
        else throw Error("synthetic: unknown key '" + key + "'");
    }
    s.validate();
    return s;
}

// The generating rules, sufficient to compute the ideal output for any input.
struct SyntheticOracle {
    std::string lang_a, lang_b;
    std::size_t lead_k = 3;
    std::vector<std::string> units_a;  // word-like units, written space-separated
    std::vector<std::string> units_b;  // single CJK codepoints, written unseparated
    std::map<std::string, std::string> a_to_b;

    std::vector<std::string> split_a(std::string_view text) const {
        std::vector<std::string> out;
        std::size_t i = 0;
        while (i < text.size()) {
            const std::size_t j = std::min(text.find(' ', i), text.size());
            if (j > i) out.emplace_back(text.substr(i, j - i));
            i = j + 1;
        }
        return out;
    }
    static std::vector<std::string> split_b(std::string_view text) {
        std::vector<std::string> out;
        std::size_t i = 0;
        while (i < text.size()) {
            const auto c = static_cast<unsigned char>(text[i]);
            const std::size_t len = c < 0x80 ? 1 : c < 0xE0 ? 2 : c < 0xF0 ? 3 : 4;
            out.emplace_back(text.substr(i, len));
            i += len;
        }
        return out;
    }
    std::string join_a(const std::vector<std::string>& units) const {
        std::string s;
        for (std::size_t i = 0; i < units.size(); ++i) s += (i ? " " : "") + units[i];
        return s;
    }
    static std::string join_b(const std::vector<std::string>& units) {
        std::string s;
        for (const auto& u : units) s += u;
        return s;
    }

    std::string translate(std::string_view text_a) const {
        std::vector<std::string> out;
        for (const auto& u : split_a(text_a)) {
            auto it = a_to_b.find(u);
            if (it == a_to_b.end()) throw Error("oracle: '" + u + "' is not a unit of " + lang_a);
            out.push_back(it->second);
        }
        return join_b(out);
    }
    std::string lead_a(std::string_view doc) const {
        auto u = split_a(doc);
        u.resize(std::min(u.size(), lead_k));
        return join_a(u);
    }
    std::string lead_b(std::string_view doc) const {
        auto u = split_b(doc);
        u.resize(std::min(u.size(), lead_k));
        return join_b(u);
    }
    std::string cross_summary(std::string_view doc_a) const { return translate(lead_a(doc_a)); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["lang_a"] = lang_a;
        j["lang_b"] = lang_b;
        j["lead_k"] = lead_k;
        j["units_a"] = units_a;
        j["units_b"] = units_b;
        j["rule"] = "summary = first lead_k units of the document; B text = unit-wise image of A text";
        return j;
    }
    static SyntheticOracle from_json(const nlohmann::json& j) {
        SyntheticOracle o;
        o.lang_a = j.at("lang_a").get<std::string>();
        o.lang_b = j.at("lang_b").get<std::string>();
        o.lead_k = j.at("lead_k").get<std::size_t>();
        o.units_a = j.at("units_a").get<std::vector<std::string>>();
        o.units_b = j.at("units_b").get<std::vector<std::string>>();
        if (o.units_a.size() != o.units_b.size()) throw Error("oracle: unit lists differ in length");
        for (std::size_t i = 0; i < o.units_a.size(); ++i) o.a_to_b[o.units_a[i]] = o.units_b[i];
        return o;
    }
};

struct SyntheticCorpus {
    std::vector<CorpusRecord> mono_a, mono_b, parallel, mono_summ;
    std::vector<CorpusRecord> cls_train, cls_valid, cls_test;
    SyntheticOracle oracle;
};

namespace detail {

inline std::string encode_utf8(char32_t cp) {
    std::string s;
    if (cp < 0x80) {
        s += static_cast<char>(cp);
    } else if (cp < 0x800) {
        s += static_cast<char>(0xC0 | (cp >> 6));
        s += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        s += static_cast<char>(0xE0 | (cp >> 12));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        s += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return s;
}

// Consonant-vowel syllable words of one or two syllables.
inline std::vector<std::string> syllable_words(std::size_t n, Rng& rng) {
    static constexpr std::string_view consonants = "bdfgklmnprstvz";
    static constexpr std::string_view vowels = "aeiou";
    std::vector<std::string> syllables;
    for (char c : consonants) {
        for (char v : vowels) syllables.push_back(std::string{c, v});
    }
    std::vector<std::string> pool = syllables;
    for (const auto& a : syllables) {
        for (const auto& b : syllables) pool.push_back(a + b);
    }
    shuffle_in_place(pool, rng);
    pool.resize(n);
    return pool;
}

class UnitSampler {
   public:
    UnitSampler(std::size_t n, double exponent) : cumulative_(n) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            total += exponent == 0.0 ? 1.0 : 1.0 / std::pow(static_cast<double>(i + 1), exponent);
            cumulative_[i] = total;
        }
        for (auto& c : cumulative_) c /= total;
    }
    std::size_t operator()(Rng& rng) const {
        const double u = uniform01(rng);
        const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
        return std::min(static_cast<std::size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
    }

   private:
    std::vector<double> cumulative_;
};

}  // namespace detail

// Language B is the unit-wise image of language A under a seeded bijection;
// summaries are the first lead_k units of their document.
inline SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticCorpus out;
    auto& o = out.oracle;
    o.lang_a = spec.lang_a;
    o.lang_b = spec.lang_b;
    o.lead_k = spec.lead_k;
    Rng alphabet_rng(derive_seed(spec.seed, "alphabet"));
    o.units_a = detail::syllable_words(spec.units, alphabet_rng);
    std::vector<char32_t> ideographs(spec.units * 4);
    std::iota(ideographs.begin(), ideographs.end(), char32_t{0x4E00});
    shuffle_in_place(ideographs, alphabet_rng);
    for (std::size_t i = 0; i < spec.units; ++i) {
        o.units_b.push_back(detail::encode_utf8(ideographs[i]));
        o.a_to_b[o.units_a[i]] = o.units_b[i];
    }

    const detail::UnitSampler sampler(spec.units, spec.zipf_exponent);
    Rng rng(derive_seed(spec.seed, "text"));
    auto sentence = [&](std::size_t lo, std::size_t hi) {
        const std::size_t len = lo + uniform_index(rng, hi - lo + 1);
        std::vector<std::string> units;
        for (std::size_t i = 0; i < len; ++i) units.push_back(o.units_a[sampler(rng)]);
        return units;
    };
    auto image = [&](const std::vector<std::string>& a) {
        std::vector<std::string> b;
        for (const auto& u : a) b.push_back(o.a_to_b.at(u));
        return b;
    };
    auto lead = [&](std::vector<std::string> u) {
        u.resize(spec.lead_k);
        return u;
    };
    auto id = [](const char* prefix, std::size_t i) { return std::string(prefix) + "-" + std::to_string(i); };

    for (std::size_t i = 0; i < spec.mono_a; ++i) {
        out.mono_a.push_back(CorpusRecord::mono(id("mono_a", i), o.lang_a, o.join_a(sentence(spec.sent_min, spec.sent_max))));
    }
    for (std::size_t i = 0; i < spec.mono_b; ++i) {
        out.mono_b.push_back(
            CorpusRecord::mono(id("mono_b", i), o.lang_b, o.join_b(image(sentence(spec.sent_min, spec.sent_max)))));
    }
    for (std::size_t i = 0; i < spec.parallel; ++i) {
        const auto a = sentence(spec.sent_min, spec.sent_max);
        out.parallel.push_back(CorpusRecord::parallel(id("par", i), o.lang_a, o.join_a(a), o.lang_b, o.join_b(image(a))));
    }
    // Monolingual summarization alternates between the two languages.
    for (std::size_t i = 0; i < spec.mono_summ; ++i) {
        const auto d = sentence(spec.doc_min, spec.doc_max);
        if (i % 2 == 0) {
            out.mono_summ.push_back(CorpusRecord::summ(id("ms", i), o.lang_a, o.join_a(d), o.lang_a, o.join_a(lead(d))));
        } else {
            out.mono_summ.push_back(
                CorpusRecord::summ(id("ms", i), o.lang_b, o.join_b(image(d)), o.lang_b, o.join_b(image(lead(d)))));
        }
    }
    auto cls = [&](std::vector<CorpusRecord>& dst, const char* prefix, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto d = sentence(spec.doc_min, spec.doc_max);
            dst.push_back(CorpusRecord::summ(id(prefix, i), o.lang_a, o.join_a(d), o.lang_b, o.join_b(image(lead(d)))));
        }
    };
    cls(out.cls_train, "cls_train", spec.cls_train);
    cls(out.cls_valid, "cls_valid", spec.cls_valid);
    cls(out.cls_test, "cls_test", spec.cls_test);
    return out;
}

// File names used for a corpus directory.
struct CorpusFiles {
    static constexpr const char* mono_a = "mono_a.jsonl";
    static constexpr const char* mono_b = "mono_b.jsonl";
    static constexpr const char* parallel = "parallel.jsonl";
    static constexpr const char* mono_summ = "ms.jsonl";
    static constexpr const char* cls_train = "cls_train.jsonl";
    static constexpr const char* cls_valid = "cls_valid.jsonl";
    static constexpr const char* cls_test = "cls_test.jsonl";
    static constexpr const char* oracle = "oracle.json";
};

inline void write_synthetic(const std::filesystem::path& dir, const SyntheticCorpus& c) {
    std::filesystem::create_directories(dir);
    write_corpus((dir / CorpusFiles::mono_a).string(), c.mono_a);
    write_corpus((dir / CorpusFiles::mono_b).string(), c.mono_b);
    write_corpus((dir / CorpusFiles::parallel).string(), c.parallel);
    write_corpus((dir / CorpusFiles::mono_summ).string(), c.mono_summ);
    write_corpus((dir / CorpusFiles::cls_train).string(), c.cls_train);
    write_corpus((dir / CorpusFiles::cls_valid).string(), c.cls_valid);
    write_corpus((dir / CorpusFiles::cls_test).string(), c.cls_test);
    std::ofstream f(dir / CorpusFiles::oracle, std::ios::binary);
    if (!f) throw Error("cannot write oracle metadata under " + dir.string());
    f << c.oracle.to_json().dump(2) << '\n';
}

// Reads a corpus directory laid out as CorpusFiles. Missing optional files
// yield empty sets; the oracle is loaded when present.
inline SyntheticCorpus read_corpus_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw Error("corpus directory not found: " + dir.string());
    SyntheticCorpus c;
    auto load = [&](const char* name, RecordKind kind, std::vector<CorpusRecord>& dst) {
        const auto path = dir / name;
        if (std::filesystem::exists(path)) dst = load_corpus(path.string(), kind, true).records;
    };
    load(CorpusFiles::mono_a, RecordKind::mono, c.mono_a);
    load(CorpusFiles::mono_b, RecordKind::mono, c.mono_b);
    load(CorpusFiles::parallel, RecordKind::parallel, c.parallel);
    load(CorpusFiles::mono_summ, RecordKind::summ, c.mono_summ);
    load(CorpusFiles::cls_train, RecordKind::summ, c.cls_train);
    load(CorpusFiles::cls_valid, RecordKind::summ, c.cls_valid);
    load(CorpusFiles::cls_test, RecordKind::summ, c.cls_test);
    if (c.cls_train.empty() || c.cls_test.empty()) {
        throw Error("corpus directory " + dir.string() + " needs cls_train.jsonl and cls_test.jsonl");
    }
    if (std::ifstream f(dir / CorpusFiles::oracle); f) c.oracle = SyntheticOracle::from_json(nlohmann::json::parse(f));
    return c;
}

}  // namespace mixling
