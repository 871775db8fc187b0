#include "mixling/decoding.hpp"

#include <gtest/gtest.h>

using namespace mixling;

namespace {

const SpecialTokens sp = SpecialTokens::make();

// Toy model over 5 tokens where token 4 is eos; next-token distributions are
// a seeded function of the full history.
struct ToyModel {
    std::uint64_t seed;
    static constexpr int kVocab = 5;
    static constexpr TokenId kEos = 4;

    std::vector<double> operator()(const TokenIds& ids) const {
        std::uint64_t h = seed;
        for (TokenId t : ids) h = splitmix64(h ^ static_cast<std::uint64_t>(t + 17));
        Rng rng(h);
        std::vector<double> logits(kVocab);
        double z = 0;
        for (auto& l : logits) {
            l = 2.0 * standard_normal(rng);
            z += std::exp(l);
        }
        for (auto& l : logits) l -= std::log(z);
        return logits;
    }
};

// Best complete sequence of at most max_len tokens: ends in eos or stops at max_len.
std::pair<TokenIds, double> exhaustive_best(const ToyModel& m, const TokenIds& prefix, std::size_t max_len) {
    TokenIds best;
    double best_lp = -std::numeric_limits<double>::infinity();
    std::function<void(TokenIds&, double)> walk = [&](TokenIds& seq, double lp) {
        const std::size_t generated = seq.size() - prefix.size();
        if (generated > 0 && (seq.back() == ToyModel::kEos || generated == max_len)) {
            if (lp > best_lp) {
                best_lp = lp;
                best = seq;
            }
            return;
        }
        const auto next = m(seq);
        for (TokenId t = 0; t < ToyModel::kVocab; ++t) {
            seq.push_back(t);
            walk(seq, lp + next[static_cast<std::size_t>(t)]);
            seq.pop_back();
        }
    };
    TokenIds seq = prefix;
    walk(seq, 0.0);
    return {best, best_lp};
}

ModelConfig tiny_config() {
    return ModelConfig{1, 2, 16, 32, 0.0, sp.reserved_count() + 20, 256, true};
}

}  // namespace

TEST(BeamSearch, FullFrontierFindsExhaustiveOptimum) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const ToyModel m{seed};
        const auto [best, best_lp] = exhaustive_best(m, {9}, 3);
        const auto hyps = beam_search(m, {9}, ToyModel::kEos, {25, 3, 0.0});
        ASSERT_EQ(hyps.front().ids, best) << "seed " << seed;
        ASSERT_NEAR(hyps.front().logprob, best_lp, 1e-12);
    }
}

TEST(BeamSearch, BeamSixNeverBeatsTheOptimum) {
    int exact = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const ToyModel m{seed};
        const auto [best, best_lp] = exhaustive_best(m, {9}, 3);
        const auto top = beam_search(m, {9}, ToyModel::kEos, {6, 3, 0.0}).front();
        ASSERT_LE(top.logprob, best_lp + 1e-12);
        exact += top.ids == best;
    }
    EXPECT_GE(exact, 90);
}

TEST(BeamSearch, BeamOneIsGreedy) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const ToyModel m{seed};
        const auto g = greedy_decode(m, {1}, ToyModel::kEos, 12);
        const auto b = beam_search(m, {1}, ToyModel::kEos, {1, 12, 1.0});
        ASSERT_EQ(b.size(), 1u);
        ASSERT_EQ(b[0].ids, g.ids);
    }
}

TEST(BeamSearch, NeverEosRunsToMaxLength) {
    const NextTokenScorer no_eos = [](const TokenIds&) {
        return std::vector<double>{std::log(0.5), std::log(0.5), -std::numeric_limits<double>::infinity()};
    };
    const auto hyps = beam_search(no_eos, {0}, 2, {6, 200, 1.0});
    for (const auto& h : hyps) {
        EXPECT_EQ(h.generated, 200u);
        EXPECT_EQ(h.ids.size(), 201u);
        EXPECT_FALSE(h.finished);
    }
}

TEST(BeamSearch, RankedAndWellFormed) {
    const ToyModel m{77};
    const auto hyps = beam_search(m, {3, 3}, ToyModel::kEos, {6, 8, 1.0});
    ASSERT_EQ(hyps.size(), 6u);
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        const auto& h = hyps[i];
        EXPECT_LE(h.logprob, 0.0);
        EXPECT_EQ(h.finished, h.ids.back() == ToyModel::kEos);
        EXPECT_EQ(h.ids[0], 3);
        EXPECT_NEAR(h.score, h.logprob / static_cast<double>(h.generated), 1e-12);
        if (i > 0) {
            EXPECT_GE(hyps[i - 1].score, h.score);
        }
    }
}

TEST(BeamSearch, TiesGoToLowerTokenIds) {
    const NextTokenScorer flat = [](const TokenIds& ids) {
        if (ids.size() >= 2) return std::vector<double>{-1e9, -1e9, 0.0};
        return std::vector<double>{std::log(0.5), std::log(0.5), -std::numeric_limits<double>::infinity()};
    };
    const auto hyps = beam_search(flat, {7}, 2, {1, 5, 1.0});
    EXPECT_EQ(hyps[0].ids, (TokenIds{7, 0, 2}));
    EXPECT_EQ(greedy_decode(flat, {7}, 2, 5).ids, (TokenIds{7, 0, 2}));
}

TEST(BeamSearch, RejectsBadOptions) {
    const ToyModel m{1};
    EXPECT_THROW(beam_search(m, {0}, 4, {0, 3, 1.0}), Error);
    EXPECT_THROW(beam_search(m, {0}, 4, {2, 0, 1.0}), Error);
    EXPECT_THROW(decoding_prefix(sp, Task::cls, sp.task_id(Task::mt)), Error);
}

TEST(ModelBeamSearch, BeamOneMatchesGreedyOnSeededModels) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const auto p = init_params<float>(tiny_config(), rng);
        TokenIds src(3 + uniform_index(rng, 4));
        for (auto& t : src) t = sp.reserved_count() + static_cast<TokenId>(uniform_index(rng, 20));
        const auto prefix = decoding_prefix(sp, Task::cls, sp.lang_id("zh"));
        const auto scorer = model_scorer(p, sp, src, Task::cls);
        const auto g = greedy_decode(scorer, prefix, sp.eos_id, 10);
        const auto b = beam_search(p, sp, src, Task::cls, sp.lang_id("zh"), {1, 10, 1.0});
        ASSERT_EQ(b[0].ids, g.ids) << "seed " << seed;
    }
}

TEST(ModelBeamSearch, OutputsRespectPrefixDiscipline) {
    Rng rng(5);
    auto p = init_params<float>(tiny_config(), rng);
    // Bias the output toward control ids so violations would surface.
    for (TokenId t = 0; t < sp.control_count(); ++t) p.embedding.row(t) *= 4.0f;
    const TokenIds src{sp.reserved_count() + 1, sp.reserved_count() + 2};
    for (Task task : {Task::mlm, Task::dae, Task::ms, Task::cmlm, Task::mt, Task::cls}) {
        const auto hyps = beam_search(p, sp, src, task, sp.lang_id("en"), {3, 8, 1.0});
        for (const auto& h : hyps) {
            ASSERT_EQ(h.ids[0], sp.task_id(task));
            ASSERT_EQ(h.ids[1], sp.lang_id("en"));
            ASSERT_EQ(h.ids[2], sp.bos_id);
            for (std::size_t i = 3; i < h.ids.size(); ++i) {
                const TokenId t = h.ids[i];
                if (t == sp.eos_id) continue;
                const bool sentinel_ok = (task == Task::mlm || task == Task::cmlm) && sp.is_sentinel(t);
                ASSERT_TRUE(!sp.is_control(t) || sentinel_ok) << "task " << task_name(task) << " emitted " << t;
            }
        }
    }
}

TEST(ModelBeamSearch, Deterministic) {
    Rng rng(6);
    const auto p = init_params<float>(tiny_config(), rng);
    const TokenIds src{sp.reserved_count() + 3, sp.reserved_count() + 9, sp.reserved_count() + 4};
    const auto a = beam_search(p, sp, src, Task::cls, sp.lang_id("xb"), {6, 12, 1.0});
    const auto b = beam_search(p, sp, src, Task::cls, sp.lang_id("xb"), {6, 12, 1.0});
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].ids, b[i].ids);
        EXPECT_EQ(a[i].score, b[i].score);
    }
    const auto text = generated_tokens(a[0], sp);
    EXPECT_EQ(text.size(), a[0].generated - (a[0].finished ? 1 : 0));
}
