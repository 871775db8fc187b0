#pragma once

#include "mixling/model.hpp"
#include "mixling/objectives.hpp"
#include "mixling/vocab.hpp"

#include <functional>
#include <limits>
#include <memory>

namespace mixling {

struct Hypothesis {
    TokenIds ids;  // forced prefix followed by generated tokens
    double logprob = 0.0;
    bool finished = false;
    std::size_t generated = 0;
    double score = 0.0;  // logprob / generated^alpha
};

struct BeamOptions {
    std::size_t beam_size = 6;
    std::size_t max_len = 200;  // generated tokens, prefix excluded
    double length_alpha = 1.0;
};

// Log-probabilities of the next token given the full sequence so far.
// Disallowed tokens carry -inf.
using NextTokenScorer = std::function<std::vector<double>(const TokenIds&)>;

namespace detail {

inline double normalized_score(double logprob, std::size_t generated, double alpha) {
    if (generated == 0 || alpha == 0.0) return logprob;
    return logprob / std::pow(static_cast<double>(generated), alpha);
}

// Higher score first; ties go to the lexicographically smaller id sequence,
// i.e. the lower token id at the first difference.
inline bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.ids < b.ids;
}

}  // namespace detail

// Length-normalized beam search. Finished hypotheses stay in the pool and
// compete with active ones on normalized score; expansion ends once every kept
// hypothesis is finished or max_len tokens have been generated.
inline std::vector<Hypothesis> beam_search(const NextTokenScorer& next, const TokenIds& prefix, TokenId eos_id,
                                           const BeamOptions& opts) {
    if (opts.beam_size < 1) throw Error("beam search: beam size must be at least 1");
    if (opts.max_len < 1) throw Error("beam search: max_len must be at least 1");
    std::vector<Hypothesis> kept{Hypothesis{prefix, 0.0, false, 0, 0.0}};
    for (std::size_t step = 1; step <= opts.max_len; ++step) {
        std::vector<Hypothesis> pool;
        bool any_active = false;
        for (const auto& h : kept) {
            if (h.finished) {
                pool.push_back(h);
                continue;
            }
            any_active = true;
            const auto lp = next(h.ids);
            for (std::size_t tok = 0; tok < lp.size(); ++tok) {
                if (!std::isfinite(lp[tok])) continue;
                Hypothesis c;
                c.ids.reserve(h.ids.size() + 1);
                c.ids = h.ids;
                c.ids.push_back(static_cast<TokenId>(tok));
                c.logprob = h.logprob + lp[tok];
                c.generated = step;
                c.finished = static_cast<TokenId>(tok) == eos_id;
                c.score = detail::normalized_score(c.logprob, c.generated, opts.length_alpha);
                pool.push_back(std::move(c));
            }
        }
        if (!any_active) break;
        if (pool.empty()) throw Error("beam search: scorer allowed no tokens");
        const std::size_t keep = std::min(opts.beam_size, pool.size());
        std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(),
                          detail::ranks_before);
        pool.resize(keep);
        kept = std::move(pool);
    }
    std::sort(kept.begin(), kept.end(), detail::ranks_before);
    return kept;
}

// Plain argmax decoding, lowest id on ties.
inline Hypothesis greedy_decode(const NextTokenScorer& next, const TokenIds& prefix, TokenId eos_id,
                                std::size_t max_len) {
    Hypothesis h{prefix, 0.0, false, 0, 0.0};
    while (h.generated < max_len && !h.finished) {
        const auto lp = next(h.ids);
        std::size_t best = lp.size();
        for (std::size_t tok = 0; tok < lp.size(); ++tok) {
            if (std::isfinite(lp[tok]) && (best == lp.size() || lp[tok] > lp[best])) best = tok;
        }
        if (best == lp.size()) throw Error("greedy decode: scorer allowed no tokens");
        h.ids.push_back(static_cast<TokenId>(best));
        h.logprob += lp[best];
        ++h.generated;
        h.finished = static_cast<TokenId>(best) == eos_id;
    }
    h.score = h.logprob;
    return h;
}

// Tokens the model may emit after the control prefix for a given task.
inline std::vector<char> allowed_output_tokens(const SpecialTokens& sp, std::size_t vocab_size, Task task) {
    std::vector<char> ok(vocab_size, 1);
    for (TokenId id = 0; id < sp.control_count() && static_cast<std::size_t>(id) < vocab_size; ++id) {
        ok[static_cast<std::size_t>(id)] = 0;
    }
    if (static_cast<std::size_t>(sp.eos_id) < vocab_size) ok[static_cast<std::size_t>(sp.eos_id)] = 1;
    if (task == Task::mlm || task == Task::cmlm) {
        for (TokenId s : sp.sentinel_ids) {
            if (static_cast<std::size_t>(s) < vocab_size) ok[static_cast<std::size_t>(s)] = 1;
        }
    }
    return ok;
}

// Next-token scorer over a trained model for one encoded source.
template <typename T>
NextTokenScorer model_scorer(const ModelParams<T>& params, const SpecialTokens& sp, std::span<const TokenId> src,
                             Task task) {
    auto enc = std::make_shared<EncoderState<T>>(encode(params, src, sp.pad_id));
    auto allowed = allowed_output_tokens(sp, static_cast<std::size_t>(params.config.vocab_size), task);
    return [&params, &sp, enc, allowed = std::move(allowed)](const TokenIds& ids) {
        const Mat<T> logits =
            decode_logits(params, *enc, ids, sp.pad_id, static_cast<Eigen::Index>(ids.size()) - 1);
        const double mx = static_cast<double>(logits.maxCoeff());
        double sum = 0.0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            if (allowed[static_cast<std::size_t>(j)]) sum += std::exp(static_cast<double>(logits(0, j)) - mx);
        }
        const double lse = mx + std::log(sum);
        std::vector<double> lp(static_cast<std::size_t>(logits.cols()), -std::numeric_limits<double>::infinity());
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            if (allowed[static_cast<std::size_t>(j)]) lp[static_cast<std::size_t>(j)] = static_cast<double>(logits(0, j)) - lse;
        }
        return lp;
    };
}

inline TokenIds decoding_prefix(const SpecialTokens& sp, Task task, TokenId tgt_lang) {
    const auto p = control_prefix(sp.task_id(task), tgt_lang, sp);
    return {p[0], p[1], sp.bos_id};
}

template <typename T>
std::vector<Hypothesis> beam_search(const ModelParams<T>& params, const SpecialTokens& sp,
                                    std::span<const TokenId> src, Task task, TokenId tgt_lang,
                                    const BeamOptions& opts = {}) {
    const auto prefix = decoding_prefix(sp, task, tgt_lang);
    return beam_search(model_scorer(params, sp, src, task), prefix, sp.eos_id, opts);
}

// Generated tokens of a hypothesis without prefix and trailing eos.
inline TokenIds generated_tokens(const Hypothesis& h, const SpecialTokens& sp) {
    TokenIds out(h.ids.begin() + static_cast<std::ptrdiff_t>(h.ids.size() - h.generated), h.ids.end());
    if (!out.empty() && out.back() == sp.eos_id) out.pop_back();
    return out;
}

}  // namespace mixling
