#include "mixling/rouge.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace mixling;

namespace {

Units u(std::initializer_list<const char*> words) { return Units(words.begin(), words.end()); }

}  // namespace

TEST(Normalize, EnglishLowercasesAndSplitsOnPunctuation) {
    EXPECT_EQ(normalize("France beats Morocco.", "en"), u({"france", "beats", "morocco"}));
    EXPECT_EQ(normalize("  1-0, in a  scrappy\tmatch!! ", "en"), u({"1", "0", "in", "a", "scrappy", "match"}));
    EXPECT_TRUE(normalize("", "en").empty());
}

TEST(Normalize, ChineseSplitsPerCharacter) {
    EXPECT_EQ(normalize("法国队", "zh"), u({"法", "国", "队"}));
    EXPECT_EQ(normalize("ROUGE是指标", "zh"), u({"rouge", "是", "指", "标"}));
    EXPECT_EQ(normalize("法国队。击败", "zh"), u({"法", "国", "队", "击", "败"}));
}

TEST(Normalize, UnknownLanguageIsAnError) { EXPECT_THROW(normalize("x", "fr"), Error); }

TEST(RougeN, HandCountedFixtures) {
    const auto same = rouge_n(u({"a", "b", "c"}), u({"a", "b", "c"}), 1);
    EXPECT_DOUBLE_EQ(same.f1, 1.0);
    const auto s = rouge_n(u({"the", "cat", "sat"}), u({"the", "cat"}), 1);
    EXPECT_NEAR(s.precision, 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(s.recall, 1.0, 1e-12);
    EXPECT_NEAR(s.f1, 0.8, 1e-12);
    const auto b = rouge_n(u({"the", "cat", "sat"}), u({"the", "cat"}), 2);
    EXPECT_NEAR(b.precision, 0.5, 1e-12);
    EXPECT_NEAR(b.recall, 1.0, 1e-12);
    EXPECT_EQ(rouge_n(u({"x", "y"}), u({"a", "b"}), 1).f1, 0.0);
    EXPECT_EQ(rouge_n(u({"x"}), u({"x"}), 2).f1, 0.0);
    EXPECT_THROW(rouge_n(u({"x"}), u({"x"}), 0), Error);
}

TEST(RougeN, ClippingCapsRepeatedTokens) {
    const Units ref = u({"a", "b", "a"});
    Units cand = u({"a"});
    for (int i = 0; i < 6; ++i) {
        const double overlap = rouge_n(cand, ref, 1).precision * static_cast<double>(cand.size());
        EXPECT_LE(overlap, 2.0 + 1e-12);
        cand.push_back("a");
    }
}

TEST(RougeN, AppendingUnusedReferenceUnitNeverLowersRecall) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        Units cand, ref;
        for (std::size_t i = 0; i < 1 + uniform_index(rng, 8); ++i) cand.push_back(std::string(1, static_cast<char>('a' + uniform_index(rng, 5))));
        for (std::size_t i = 0; i < 1 + uniform_index(rng, 8); ++i) ref.push_back(std::string(1, static_cast<char>('a' + uniform_index(rng, 5))));
        const double before = rouge_n(cand, ref, 1).recall;
        cand.push_back(ref[uniform_index(rng, ref.size())]);
        EXPECT_GE(rouge_n(cand, ref, 1).recall, before - 1e-15);
    }
}

TEST(RougeL, HandComputedLcs) {
    const auto s = rouge_l(u({"a", "b", "c", "d"}), u({"a", "c", "d"}));
    EXPECT_EQ(lcs_length(u({"a", "b", "c", "d"}), u({"a", "c", "d"})), 3u);
    EXPECT_NEAR(s.precision, 0.75, 1e-12);
    EXPECT_NEAR(s.recall, 1.0, 1e-12);
    EXPECT_NEAR(s.f1, 6.0 / 7.0, 1e-12);
    EXPECT_DOUBLE_EQ(rouge_l(u({"q", "r"}), u({"q", "r"})).f1, 1.0);
    EXPECT_EQ(rouge_l({}, u({"a"})).f1, 0.0);
}

TEST(RougeL, F1IsSymmetric) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        Units a, b;
        for (std::size_t i = 0; i < uniform_index(rng, 10); ++i) a.push_back(std::to_string(uniform_index(rng, 4)));
        for (std::size_t i = 0; i < uniform_index(rng, 10); ++i) b.push_back(std::to_string(uniform_index(rng, 4)));
        const auto ab = rouge_l(a, b), ba = rouge_l(b, a);
        EXPECT_NEAR(ab.f1, ba.f1, 1e-15);
        EXPECT_NEAR(ab.precision, ba.recall, 1e-15);
    }
}

TEST(CorpusRouge, AveragesPerPairScores) {
    const auto one = corpus_rouge({{"the cat sat", "the cat"}}, "en");
    EXPECT_NEAR(one.rouge1.f1, 0.8, 1e-12);
    const auto two = corpus_rouge({{"a b", "a b"}, {"c d", "e f"}}, "en");
    EXPECT_NEAR(two.rouge1.f1, 0.5, 1e-12);
    EXPECT_NEAR(two.rougeL.f1, 0.5, 1e-12);
    EXPECT_EQ(two.pairs, 2u);
    EXPECT_THROW(corpus_rouge({}, "en"), Error);
}

TEST(CorpusRouge, MatchesIndependentMeanOnRandomPairs) {
    Rng rng(3);
    std::vector<CandidateReference> pairs;
    double r1 = 0, r2 = 0, rl = 0;
    auto text = [&] {
        std::string s;
        for (std::size_t i = 0; i < 1 + uniform_index(rng, 12); ++i) s += "w" + std::to_string(uniform_index(rng, 6)) + " ";
        return s;
    };
    // Independent per-pair F1: count words by hand.
    auto f1_1 = [](const Units& c, const Units& r) {
        std::map<std::string, int> rc;
        for (const auto& w : r) ++rc[w];
        int overlap = 0;
        for (const auto& w : c) {
            if (rc[w] > 0) {
                --rc[w];
                ++overlap;
            }
        }
        if (overlap == 0) return 0.0;
        const double p = static_cast<double>(overlap) / c.size(), rr = static_cast<double>(overlap) / r.size();
        return 2 * p * rr / (p + rr);
    };
    for (int i = 0; i < 50; ++i) {
        pairs.push_back({text(), text()});
        const auto c = normalize(pairs.back().candidate, "en"), r = normalize(pairs.back().reference, "en");
        r1 += f1_1(c, r) / 50;
        r2 += rouge_n(c, r, 2).f1 / 50;
        rl += rouge_l(c, r).f1 / 50;
    }
    const auto got = corpus_rouge(pairs, "en");
    EXPECT_NEAR(got.rouge1.f1, r1, 1e-12);
    EXPECT_NEAR(got.rouge2.f1, r2, 1e-12);
    EXPECT_NEAR(got.rougeL.f1, rl, 1e-12);
}

TEST(RougeReport, FourDecimalPlaces) {
    std::ostringstream os;
    write_rouge_report(os, corpus_rouge({{"the cat sat", "the cat"}}, "en"));
    EXPECT_EQ(os.str(),
              "pairs 1\n"
              "ROUGE-1  P=0.6667 R=1.0000 F1=0.8000\n"
              "ROUGE-2  P=0.5000 R=1.0000 F1=0.6667\n"
              "ROUGE-L  P=0.6667 R=1.0000 F1=0.8000\n");
}
