#pragma once

// Input/target construction for the five pre-training objectives and the
// cross-lingual summarization finetuning task, plus the task mixer that
// interleaves them into one training stream.

#include "mixling/common.hpp"
#include "mixling/vocab.hpp"

#include <algorithm>
#include <array>
#include <functional>
#include <numeric>

namespace mixling {

struct TrainingExample {
    TokenIds src_ids;
    TokenIds tgt_ids;  // control prefix excluded
    Task task = Task::mlm;
    TokenId tgt_lang = 0;

    bool operator==(const TrainingExample&) const = default;
};

struct ParallelPair {
    TokenId lang_a = 0;
    TokenId lang_b = 0;
    TokenIds sent_a;
    TokenIds sent_b;

    void validate() const {
        if (sent_a.empty() || sent_b.empty()) throw Error("parallel pair: empty sentence");
        if (lang_a == lang_b) throw Error("parallel pair: languages must differ");
    }
};

struct SummPair {
    TokenId doc_lang = 0;
    TokenId summ_lang = 0;
    TokenIds doc_ids;
    TokenIds summ_ids;

    void validate() const {
        if (doc_ids.empty() || summ_ids.empty()) throw Error("summarization pair: empty side");
    }
};

struct MixWeights {
    std::array<double, kNumPretrainTasks> weight{1.0, 1.0, 1.0, 1.0, 1.0};

    double& operator[](Task t) { return weight.at(static_cast<std::size_t>(t)); }
    double operator[](Task t) const { return weight.at(static_cast<std::size_t>(t)); }

    static MixWeights uniform() { return {}; }
    static MixWeights only(std::initializer_list<Task> tasks) {
        MixWeights w;
        w.weight.fill(0.0);
        for (Task t : tasks) w[t] = 1.0;
        return w;
    }

    void validate() const {
        double sum = 0.0;
        for (double x : weight) {
            if (!(x >= 0.0) || !std::isfinite(x)) throw Error("mix weights must be finite and nonnegative");
            sum += x;
        }
        if (sum <= 0.0) throw Error("mix weights sum to zero");
    }
};

inline constexpr double kMlmMaskProb = 0.15;
inline constexpr double kDaeMaskProb = 0.1;
inline constexpr double kDaeDropProb = 0.1;
inline constexpr int kDaeShuffleK = 3;

namespace detail {

inline void require_plain_text(std::span<const TokenId> tokens, const SpecialTokens& sp, const char* what) {
    if (tokens.empty()) throw Error(std::string(what) + ": empty token sequence");
    for (TokenId t : tokens) {
        if (t < 0 || sp.is_control(t)) {
            throw Error(std::string(what) + ": input contains reserved control id " + std::to_string(t));
        }
    }
}

inline void require_probability(double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw Error(std::string(what) + ": probability outside [0, 1]");
}

// Sentinel substitution shared by MLM and CMLM. Returns (corrupted, target).
inline std::pair<TokenIds, TokenIds> sentinel_mask(std::span<const TokenId> tokens, const std::vector<bool>& selected,
                                                   const SpecialTokens& sp) {
    if (selected.size() != tokens.size()) throw Error("mask selection length mismatch");
    TokenIds src;
    TokenIds tgt;
    int span = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!selected[i]) {
            src.push_back(tokens[i]);
            continue;
        }
        if (i == 0 || !selected[i - 1]) {
            if (span >= kNumSentinels) {
                throw Error("masking produced more than " + std::to_string(kNumSentinels) + " spans");
            }
            const TokenId s = sp.sentinel(span++);
            src.push_back(s);
            tgt.push_back(s);
        }
        tgt.push_back(tokens[i]);
    }
    return {std::move(src), std::move(tgt)};
}

inline std::vector<bool> select_tokens(std::size_t n, double p, Rng& rng) {
    std::vector<bool> sel(n);
    for (std::size_t i = 0; i < n; ++i) sel[i] = bernoulli(rng, p);
    return sel;
}

}  // namespace detail

// MLM with an explicit selection. Maximal runs of selected tokens become one
// sentinel each, numbered left to right.
inline TrainingExample mlm_from_selection(std::span<const TokenId> tokens, const std::vector<bool>& selected,
                                          TokenId lang, const SpecialTokens& sp) {
    detail::require_plain_text(tokens, sp, "mlm");
    auto [src, tgt] = detail::sentinel_mask(tokens, selected, sp);
    return {std::move(src), std::move(tgt), Task::mlm, lang};
}

inline TrainingExample corrupt_mlm(std::span<const TokenId> tokens, TokenId lang, double mask_prob, Rng& rng,
                                   const SpecialTokens& sp) {
    detail::require_plain_text(tokens, sp, "mlm");
    detail::require_probability(mask_prob, "mlm");
    return mlm_from_selection(tokens, detail::select_tokens(tokens.size(), mask_prob, rng), lang, sp);
}

// Replaces each sentinel in `corrupted` by its span from `target`. Inverse of
// the MLM corruption.
inline TokenIds restore_sentinels(std::span<const TokenId> corrupted, std::span<const TokenId> target,
                                  const SpecialTokens& sp) {
    std::vector<TokenIds> spans(kNumSentinels);
    std::vector<bool> seen(kNumSentinels, false);
    int current = -1;
    for (TokenId t : target) {
        if (sp.is_sentinel(t)) {
            current = sp.sentinel_index(t);
            if (seen[static_cast<std::size_t>(current)]) throw Error("target repeats a sentinel");
            seen[static_cast<std::size_t>(current)] = true;
        } else {
            if (current < 0) throw Error("target does not start with a sentinel");
            spans[static_cast<std::size_t>(current)].push_back(t);
        }
    }
    TokenIds out;
    for (TokenId t : corrupted) {
        if (sp.is_sentinel(t)) {
            const auto& s = spans[static_cast<std::size_t>(sp.sentinel_index(t))];
            if (s.empty()) throw Error("sentinel without a target span");
            out.insert(out.end(), s.begin(), s.end());
        } else {
            out.push_back(t);
        }
    }
    return out;
}

struct DaeNoise {
    double drop_prob = kDaeDropProb;
    double mask_prob = kDaeMaskProb;
    int shuffle_k = kDaeShuffleK;
};

// DAE with explicit corruption choices: `dropped` and `masked` index the
// original positions, `order` permutes the surviving positions.
inline TrainingExample dae_from_choices(std::span<const TokenId> tokens, const std::vector<bool>& dropped,
                                        const std::vector<bool>& masked, std::span<const std::size_t> order,
                                        TokenId lang, const SpecialTokens& sp) {
    detail::require_plain_text(tokens, sp, "dae");
    if (dropped.size() != tokens.size() || masked.size() != tokens.size()) throw Error("dae: choice length mismatch");
    TokenIds survivors;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!dropped[i]) survivors.push_back(masked[i] ? sp.shared_mask_id : tokens[i]);
    }
    if (survivors.empty()) throw Error("dae: every token dropped");
    if (order.size() != survivors.size()) throw Error("dae: permutation length mismatch");
    TokenIds src(survivors.size());
    std::vector<bool> used(survivors.size(), false);
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (order[i] >= survivors.size() || used[order[i]]) throw Error("dae: order is not a permutation");
        used[order[i]] = true;
        src[i] = survivors[order[i]];
    }
    return {std::move(src), TokenIds(tokens.begin(), tokens.end()), Task::dae, lang};
}

// Each element moves at most k positions: sort by index plus noise in [0, k+1).
inline std::vector<std::size_t> bounded_shuffle_order(std::size_t n, int k, Rng& rng) {
    if (k < 0) throw Error("shuffle distance must be nonnegative");
    std::vector<double> key(n);
    for (std::size_t i = 0; i < n; ++i) key[i] = static_cast<double>(i) + uniform01(rng) * (k + 1.0);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
    return order;
}

// Drop, then mask with <M>, then bounded shuffle. The target is always the
// untouched input. If everything is dropped one uniformly chosen token is kept.
inline TrainingExample corrupt_dae(std::span<const TokenId> tokens, TokenId lang, const DaeNoise& noise, Rng& rng,
                                   const SpecialTokens& sp) {
    detail::require_plain_text(tokens, sp, "dae");
    detail::require_probability(noise.drop_prob, "dae drop");
    detail::require_probability(noise.mask_prob, "dae mask");
    const std::size_t n = tokens.size();
    auto dropped = detail::select_tokens(n, noise.drop_prob, rng);
    if (std::all_of(dropped.begin(), dropped.end(), [](bool b) { return b; })) {
        dropped[uniform_index(rng, n)] = false;
    }
    std::vector<bool> masked(n, false);
    std::size_t survivors = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (dropped[i]) continue;
        masked[i] = bernoulli(rng, noise.mask_prob);
        ++survivors;
    }
    const auto order = bounded_shuffle_order(survivors, noise.shuffle_k, rng);
    return dae_from_choices(tokens, dropped, masked, order, lang, sp);
}

inline TrainingExample cmlm_from_selection(const ParallelPair& pair, bool mask_side_b,
                                           const std::vector<bool>& selected, const SpecialTokens& sp) {
    pair.validate();
    detail::require_plain_text(pair.sent_a, sp, "cmlm");
    detail::require_plain_text(pair.sent_b, sp, "cmlm");
    const TokenIds& masked_side = mask_side_b ? pair.sent_b : pair.sent_a;
    auto [corrupted, tgt] = detail::sentinel_mask(masked_side, selected, sp);
    TrainingExample ex;
    const TokenIds& a = mask_side_b ? pair.sent_a : corrupted;
    const TokenIds& b = mask_side_b ? corrupted : pair.sent_b;
    ex.src_ids.reserve(a.size() + b.size() + 1);
    ex.src_ids.insert(ex.src_ids.end(), a.begin(), a.end());
    ex.src_ids.push_back(sp.separator_id);
    ex.src_ids.insert(ex.src_ids.end(), b.begin(), b.end());
    ex.tgt_ids = std::move(tgt);
    ex.task = Task::cmlm;
    ex.tgt_lang = mask_side_b ? pair.lang_b : pair.lang_a;
    return ex;
}

// One side chosen uniformly and masked with the MLM rule; the other side stays
// intact. An empty draw is replaced by a single uniformly chosen token so the
// masked side always carries at least one sentinel.
inline TrainingExample make_cmlm(const ParallelPair& pair, double mask_prob, Rng& rng, const SpecialTokens& sp) {
    pair.validate();
    if (!(mask_prob > 0.0 && mask_prob <= 1.0)) throw Error("cmlm: mask probability must be in (0, 1]");
    const bool side_b = uniform_index(rng, 2) == 1;
    const std::size_t n = side_b ? pair.sent_b.size() : pair.sent_a.size();
    auto selected = detail::select_tokens(n, mask_prob, rng);
    if (std::none_of(selected.begin(), selected.end(), [](bool b) { return b; })) {
        selected[uniform_index(rng, n)] = true;
    }
    return cmlm_from_selection(pair, side_b, selected, sp);
}

enum class Direction { a_to_b, b_to_a };

inline TrainingExample make_mt(const ParallelPair& pair, Direction dir) {
    pair.validate();
    if (dir == Direction::a_to_b) return {pair.sent_a, pair.sent_b, Task::mt, pair.lang_b};
    return {pair.sent_b, pair.sent_a, Task::mt, pair.lang_a};
}

inline TrainingExample make_summ(const SummPair& pair) {
    pair.validate();
    return {pair.doc_ids, pair.summ_ids, pair.doc_lang == pair.summ_lang ? Task::ms : Task::cls, pair.summ_lang};
}

inline constexpr std::size_t kControlPrefixLen = 2;

inline std::array<TokenId, kControlPrefixLen> control_prefix(TokenId task_id, TokenId lang_id,
                                                            const SpecialTokens& sp) {
    if (!sp.is_task(task_id)) throw Error("control prefix: id " + std::to_string(task_id) + " is not a task symbol");
    if (!sp.is_lang(lang_id)) {
        throw Error("control prefix: id " + std::to_string(lang_id) + " is not a language symbol");
    }
    return {task_id, lang_id};
}

inline std::array<TokenId, kControlPrefixLen> control_prefix(Task task, TokenId lang_id, const SpecialTokens& sp) {
    return control_prefix(sp.task_id(task), lang_id, sp);
}

// Teacher-forcing view of an example: the decoder reads
// [task, lang, bos, t1 .. tn] and position kControlPrefixLen + i predicts
// labels[i] from [t1 .. tn, eos]. Prefix positions carry no loss.
struct DecoderSequence {
    TokenIds input;
    TokenIds labels;
};

inline DecoderSequence decoder_sequence(const TrainingExample& ex, const SpecialTokens& sp) {
    const auto prefix = control_prefix(ex.task, ex.tgt_lang, sp);
    DecoderSequence d;
    d.input.reserve(ex.tgt_ids.size() + 3);
    d.input.assign(prefix.begin(), prefix.end());
    d.input.push_back(sp.bos_id);
    d.input.insert(d.input.end(), ex.tgt_ids.begin(), ex.tgt_ids.end());
    d.labels = ex.tgt_ids;
    d.labels.push_back(sp.eos_id);
    return d;
}

// A finite pool of base items turned into examples on demand.
struct TaskSource {
    Task task = Task::mlm;
    std::size_t size = 0;
    std::function<TrainingExample(std::size_t index, Rng& rng)> build;
};

// Draws the task of every example i.i.d. in proportion to the weights, then
// takes the next item of that task's pool. Pools are walked in a shuffled
// order that is reshuffled with a fresh derived seed at every epoch wrap.
class TaskMixer {
   public:
    TaskMixer(std::vector<TaskSource> sources, const MixWeights& weights, std::uint64_t seed)
        : sources_(std::move(sources)), seed_(seed), rng_(derive_seed(seed, "mix")) {
        weights.validate();
        cumulative_.fill(0.0);
        double total = 0.0;
        for (int t = 0; t < kNumPretrainTasks; ++t) {
            const double w = weights.weight[static_cast<std::size_t>(t)];
            if (w > 0.0) {
                auto it = std::find_if(sources_.begin(), sources_.end(),
                                       [&](const TaskSource& s) { return static_cast<int>(s.task) == t; });
                if (it == sources_.end() || it->size == 0 || !it->build) {
                    throw Error("mix: task '" + std::string(task_name(static_cast<Task>(t))) +
                                "' has positive weight but no examples");
                }
                source_of_[static_cast<std::size_t>(t)] = static_cast<int>(it - sources_.begin());
            }
            total += w;
            cumulative_[static_cast<std::size_t>(t)] = total;
        }
        for (auto& c : cumulative_) c /= total;
        cursors_.resize(sources_.size());
    }

    TrainingExample next() {
        const double u = uniform01(rng_);
        int task = kNumPretrainTasks - 1;
        for (int t = 0; t < kNumPretrainTasks; ++t) {
            if (u < cumulative_[static_cast<std::size_t>(t)]) {
                task = t;
                break;
            }
        }
        while (source_of_[static_cast<std::size_t>(task)] < 0) --task;  // guards u at the top edge
        const auto s = static_cast<std::size_t>(source_of_[static_cast<std::size_t>(task)]);
        return take(s);
    }

   private:
    struct Cursor {
        std::vector<std::size_t> order;
        std::size_t pos = 0;
        std::uint64_t epoch = 0;
    };

    TrainingExample take(std::size_t s) {
        auto& src = sources_[s];
        auto& cur = cursors_[s];
        if (cur.pos >= cur.order.size()) {
            cur.order.resize(src.size);
            std::iota(cur.order.begin(), cur.order.end(), std::size_t{0});
            Rng shuffle_rng(derive_seed(derive_seed(seed_, static_cast<std::uint64_t>(src.task)), cur.epoch++));
            shuffle_in_place(cur.order, shuffle_rng);
            cur.pos = 0;
        }
        return src.build(cur.order[cur.pos++], rng_);
    }

    std::vector<TaskSource> sources_;
    std::uint64_t seed_;
    Rng rng_;
    std::array<double, kNumPretrainTasks> cumulative_{};
    std::array<int, kNumPretrainTasks> source_of_{-1, -1, -1, -1, -1};
    std::vector<Cursor> cursors_;
};

}  // namespace mixling
