// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any selected criterion fails.
//
//   acceptance [--out DIR] [--only 1,2,...]

#include "mixling/experiments.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>

using namespace mixling;

namespace {

// Tolerances and budgets, pinned.
constexpr double kParamTarget = 61e6;
constexpr double kParamRelTol = 0.02;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradFloor = 1e-4;  // relative error is measured against max(|a|, |n|, floor)
constexpr double kGradStep = 1e-5;
constexpr double kRAdamTol = 1e-10;
constexpr double kLrTol = 1e-12;
constexpr double kRougeTol = 1e-12;
constexpr int kCorruptionExamples = 10000;
constexpr double kCopyLossTarget = 0.1;
constexpr int kCopySteps = 500;

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> run;
};

const SpecialTokens sp = SpecialTokens::make();

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// 1. Parameter count of the full-size configuration.
Outcome param_count() {
    const auto n = static_cast<double>(count_params(ModelConfig::base(33000)));
    const double rel = std::abs(n - kParamTarget) / kParamTarget;
    return {rel <= kParamRelTol, fmt("%.0f params", n) + fmt(", %.3f%% from 61M", 100 * rel)};
}

// 2. The six worked rows of the objective table, word-level ids.
Outcome table_rows() {
    std::map<std::string, TokenId> ids;
    auto lex = [&](std::initializer_list<const char*> words) {
        TokenIds out;
        for (std::string w : words) {
            if (w == "<X>") out.push_back(sp.sentinel(0));
            else if (w == "<Y>") out.push_back(sp.sentinel(1));
            else if (w == "<M>") out.push_back(sp.shared_mask_id);
            else if (w == "[SEP]") out.push_back(sp.separator_id);
            else out.push_back(ids.emplace(w, sp.reserved_count() + static_cast<TokenId>(ids.size())).first->second);
        }
        return out;
    };
    auto flags = [](std::size_t n, std::initializer_list<std::size_t> on) {
        std::vector<bool> f(n, false);
        for (auto i : on) f[i] = true;
        return f;
    };
    const TokenId en = sp.lang_id("en"), zh = sp.lang_id("zh");
    const auto english = lex({"France", "beats", "Morocco", "in", "an", "exhibition", "match", "."});
    const auto chinese = lex({"法国", "队", "在", "一场", "表演赛", "中", "击败", "摩洛哥", "队", "。"});
    const auto doc = lex({"World", "champion", "France", "overcame", "a", "stuttering", "start", "to", "beat", "Morocco",
                          "1-0", "in", "a", "scrappy", "exhibition", "match", "on", "Wednesday", "night", "."});
    const ParallelPair pair{en, zh, english, chinese};

    auto same = [](const TrainingExample& ex, const TokenIds& src, const TokenIds& tgt, Task task, TokenId lang) {
        return ex.src_ids == src && ex.tgt_ids == tgt && ex.task == task && ex.tgt_lang == lang;
    };
    int ok = 0;
    ok += same(mlm_from_selection(english, flags(8, {1, 4}), en, sp),
               lex({"France", "<X>", "Morocco", "in", "<Y>", "exhibition", "match", "."}), lex({"<X>", "beats", "<Y>", "an"}),
               Task::mlm, en);
    const std::vector<std::size_t> identity{0, 1, 2, 3, 4, 5, 6};
    ok += same(dae_from_choices(english, flags(8, {6}), flags(8, {2, 4}), identity, en, sp),
               lex({"France", "beats", "<M>", "in", "<M>", "exhibition", "."}), english, Task::dae, en);
    ok += same(make_summ({en, en, doc, english}), doc, english, Task::ms, en);
    ok += same(cmlm_from_selection(pair, false, flags(8, {1, 4}), sp),
               lex({"France", "<X>", "Morocco", "in", "<Y>", "exhibition", "match", ".", "[SEP]", "法国", "队", "在",
                    "一场", "表演赛", "中", "击败", "摩洛哥", "队", "。"}),
               lex({"<X>", "beats", "<Y>", "an"}), Task::cmlm, en);
    ok += same(cmlm_from_selection(pair, true, flags(10, {0, 6}), sp),
               lex({"France", "beats", "Morocco", "in", "an", "exhibition", "match", ".", "[SEP]", "<X>", "队", "在",
                    "一场", "表演赛", "中", "<Y>", "摩洛哥", "队", "。"}),
               lex({"<X>", "法国", "<Y>", "击败"}), Task::cmlm, zh);
    ok += same(make_mt(pair, Direction::a_to_b), english, chinese, Task::mt, zh);
    return {ok == 6, std::to_string(ok) + "/6 rows exact"};
}

// 3. Analytic gradients against central differences on every coordinate.
Outcome gradient_oracle() {
    const ModelConfig config{1, 2, 8, 16, 0.0, 50, 32, true};
    Rng rng(2024);
    auto p = init_params<double>(config, rng);
    auto plain = [&](std::size_t n) {
        TokenIds t(n);
        for (auto& x : t) x = 20 + static_cast<TokenId>(uniform_index(rng, 30));
        return t;
    };
    const std::vector<TrainingExample> batch{
        {plain(6), plain(4), Task::cls, sp.lang_id("zh")},
        {plain(3), plain(5), Task::dae, sp.lang_id("en")},
    };
    ModelParams<double> g, scratch;
    compute_gradients<double>(p, batch, sp, g);
    auto loss_at = [&] { return compute_gradients<double>(p, batch, sp, scratch).loss; };
    const auto pt = p.tensors();
    const auto gt = g.tensors();
    std::size_t checked = 0, bad = 0;
    double worst = 0.0;
    for (std::size_t t = 0; t < pt.size(); ++t) {
        for (Eigen::Index i = 0; i < pt[t]->size(); ++i) {
            double& w = pt[t]->data()[i];
            const double orig = w;
            w = orig + kGradStep;
            const double up = loss_at();
            w = orig - kGradStep;
            const double down = loss_at();
            w = orig;
            const double numeric = (up - down) / (2 * kGradStep);
            const double analytic = gt[t]->data()[i];
            const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), kGradFloor});
            worst = std::max(worst, rel);
            bad += rel > kGradRelTol;
            ++checked;
        }
    }
    const bool all = checked == static_cast<std::size_t>(count_params(config));
    return {all && bad == 0, std::to_string(checked) + " coordinates, " + std::to_string(bad) + " outside tolerance" +
                                 fmt(", worst relative error %.2e", worst)};
}

// 4. RAdam against a clean-room restatement of the update rule.
Outcome radam_oracle() {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double rho_inf = 2 / (1 - b2) - 1;
    int first_rectified = 0;
    for (int t = 1; first_rectified == 0; ++t) {
        const double b2t = std::pow(b2, t);
        if (rho_inf - 2 * t * b2t / (1 - b2t) > 4) first_rectified = t;
    }
    // Quadratic bowl with seeded gradient noise, three coordinates.
    std::vector<double> ref{1.5, -2.0, 0.25}, m(3, 0.0), v(3, 0.0);
    const std::vector<double> curv{3.0, 0.2, 1.0};
    Mat<double> x(1, 3);
    x << 1.5, -2.0, 0.25;
    auto st = OptimizerState<double>::for_shapes({&x});
    Rng noise(99);
    double worst = 0.0;
    int observed_first = 0;
    for (int t = 1; t <= 100; ++t) {
        Mat<double> g(1, 3);
        std::vector<double> rg(3);
        for (int i = 0; i < 3; ++i) {
            const double n = 0.1 * standard_normal(noise);
            g(0, i) = curv[static_cast<std::size_t>(i)] * x(0, i) + n;
            rg[static_cast<std::size_t>(i)] = curv[static_cast<std::size_t>(i)] * ref[static_cast<std::size_t>(i)] + n;
        }
        const double lr = 0.05 * t / 100.0;
        const double b2t = std::pow(b2, t);
        const double rho = rho_inf - 2 * t * b2t / (1 - b2t);
        for (std::size_t i = 0; i < 3; ++i) {
            m[i] = b1 * m[i] + (1 - b1) * rg[i];
            v[i] = b2 * v[i] + (1 - b2) * rg[i] * rg[i];
            const double mhat = m[i] / (1 - std::pow(b1, t));
            if (rho > 4) {
                const double r = std::sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho));
                ref[i] -= lr * r * mhat / (std::sqrt(v[i] / (1 - b2t)) + eps);
            } else {
                ref[i] -= lr * mhat;
            }
        }
        radam_step<double>({&x}, {&g}, st, lr);
        for (int i = 0; i < 3; ++i) worst = std::max(worst, std::abs(x(0, i) - ref[static_cast<std::size_t>(i)]));
        if (observed_first == 0 && radam_rho(b2, t) > 4) observed_first = t;
    }
    // Branch probe: with a unit gradient the momentum-only step moves exactly lr.
    Mat<double> y = Mat<double>::Zero(1, 1), one = Mat<double>::Ones(1, 1);
    auto probe = OptimizerState<double>::for_shapes({&y});
    int probe_first = 0;
    for (int t = 1; t <= first_rectified + 1; ++t) {
        const double before = y(0, 0);
        radam_step<double>({&y}, {&one}, probe, 1.0);
        if (probe_first == 0 && std::abs((before - y(0, 0)) - 1.0) > 1e-9) probe_first = t;
    }
    const bool pass = worst <= kRAdamTol && observed_first == first_rectified && probe_first == first_rectified;
    return {pass, fmt("max deviation %.1e over 100 steps", worst) + ", rectified branch first at t=" +
                      std::to_string(probe_first) + " (expected " + std::to_string(first_rectified) + ")"};
}

// 5. Schedule anchors and continuity at the warmup boundary.
Outcome schedule_anchors() {
    const auto s = ScheduleConfig::pretrain();
    const double at0 = lr_at(s, 0), at_w = lr_at(s, 16000);
    const double ramp = s.init_lr + (s.peak_lr - s.init_lr) * 16000.0 / static_cast<double>(s.warmup_steps);
    const double decay = s.peak_lr * std::pow(s.decay_rate, 0.0);
    const bool pass = std::abs(at0 - 1e-9) <= kLrTol && std::abs(at_w - 1e-3) <= kLrTol &&
                      std::abs(ramp - decay) <= kLrTol && std::abs(lr_at(s, 16001) - 1e-3 * s.decay_rate) <= kLrTol &&
                      lr_at(s, 15999) < at_w;
    return {pass, fmt("lr(0)=%.3e", at0) + fmt(" lr(16000)=%.3e", at_w) + fmt(" |ramp-decay| at warmup=%.1e", std::abs(ramp - decay))};
}

// 6. Beam search against exhaustive enumeration on a seeded 5-token model.
Outcome beam_oracle() {
    constexpr int kVocab = 5;
    constexpr TokenId kEos = 4;
    constexpr std::size_t kMaxLen = 3;
    auto toy = [](std::uint64_t seed) {
        return NextTokenScorer([seed](const TokenIds& ids) {
            std::uint64_t h = seed;
            for (TokenId t : ids) h = splitmix64(h ^ static_cast<std::uint64_t>(t + 101));
            Rng rng(h);
            std::vector<double> l(kVocab);
            double z = 0;
            for (auto& x : l) {
                x = 1.5 * standard_normal(rng);
                z += std::exp(x);
            }
            for (auto& x : l) x -= std::log(z);
            return l;
        });
    };
    int exact = 0, greedy_ok = 0, beam6_exact = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto m = toy(seed);
        TokenIds best, seq{0};
        double best_lp = -std::numeric_limits<double>::infinity();
        std::function<void(double)> walk = [&](double lp) {
            const std::size_t gen = seq.size() - 1;
            if (gen > 0 && (seq.back() == kEos || gen == kMaxLen)) {
                if (lp > best_lp) best_lp = lp, best = seq;
                return;
            }
            const auto next = m(seq);
            for (TokenId t = 0; t < kVocab; ++t) {
                seq.push_back(t);
                walk(lp + next[static_cast<std::size_t>(t)]);
                seq.pop_back();
            }
        };
        walk(0.0);
        // A beam as wide as the frontier (5^2) keeps every live prefix.
        const auto wide = beam_search(m, {0}, kEos, {25, kMaxLen, 0.0}).front();
        exact += wide.ids == best && std::abs(wide.logprob - best_lp) <= 1e-12;
        beam6_exact += beam_search(m, {0}, kEos, {6, kMaxLen, 0.0}).front().ids == best;
        greedy_ok += beam_search(m, {0}, kEos, {1, 12, 1.0}).front().ids == greedy_decode(m, {0}, kEos, 12).ids;
    }
    return {exact == 100 && greedy_ok == 100,
            "full-width beam exact " + std::to_string(exact) + "/100, beam 1 == greedy " + std::to_string(greedy_ok) +
                "/100 (beam 6 exact " + std::to_string(beam6_exact) + "/100)"};
}

// 7. ROUGE hand-computed cases.
Outcome rouge_fixtures() {
    const auto u = rouge_n(normalize("the cat sat", "en"), normalize("the cat", "en"), 1);
    const auto l = rouge_l(normalize("a b c d", "en"), normalize("a c d", "en"));
    const auto same = rouge_n(normalize("a b c", "en"), normalize("a b c", "en"), 1);
    const auto disjoint = rouge_n(normalize("x y", "en"), normalize("a b", "en"), 1);
    const double err = std::max({std::abs(u.precision - 2.0 / 3.0), std::abs(u.recall - 1.0), std::abs(u.f1 - 0.8),
                                 std::abs(l.f1 - 6.0 / 7.0), std::abs(same.f1 - 1.0), std::abs(disjoint.f1)});
    return {err <= kRougeTol, fmt("max error %.1e", err) + fmt(", LCS F1=%.6f", l.f1)};
}

// Independent reconstruction: each sentinel in the source is replaced by the
// tokens that follow the same sentinel in the target.
TokenIds splice(const TokenIds& src, const TokenIds& tgt) {
    TokenIds out;
    for (TokenId t : src) {
        if (!sp.is_sentinel(t)) {
            out.push_back(t);
            continue;
        }
        auto it = std::find(tgt.begin(), tgt.end(), t);
        if (it == tgt.end()) return {};
        for (++it; it != tgt.end() && !sp.is_sentinel(*it); ++it) out.push_back(*it);
    }
    return out;
}

// 8. Corruption reconstruction over seeded MLM and CMLM examples.
Outcome corruption_property() {
    Rng gen(8);
    auto plain = [&](std::size_t n) {
        TokenIds t(n);
        for (auto& x : t) x = sp.reserved_count() + static_cast<TokenId>(uniform_index(gen, 800));
        return t;
    };
    int mlm_ok = 0, cmlm_ok = 0, side_ok = 0;
    const int half = kCorruptionExamples / 2;
    for (int i = 0; i < half; ++i) {
        const auto tokens = plain(1 + uniform_index(gen, 40));
        Rng rng(static_cast<std::uint64_t>(i));
        const auto ex = corrupt_mlm(tokens, sp.lang_id("en"), kMlmMaskProb, rng, sp);
        mlm_ok += splice(ex.src_ids, ex.tgt_ids) == tokens;
    }
    for (int i = 0; i < half; ++i) {
        const ParallelPair pair{sp.lang_id("en"), sp.lang_id("zh"), plain(1 + uniform_index(gen, 30)),
                                plain(1 + uniform_index(gen, 30))};
        Rng rng(static_cast<std::uint64_t>(half + i));
        const auto ex = make_cmlm(pair, kMlmMaskProb, rng, sp);
        const auto sep = std::find(ex.src_ids.begin(), ex.src_ids.end(), sp.separator_id);
        if (sep == ex.src_ids.end()) continue;
        const TokenIds a(ex.src_ids.begin(), sep), b(sep + 1, ex.src_ids.end());
        auto masked = [](const TokenIds& s) { return std::any_of(s.begin(), s.end(), [](TokenId t) { return sp.is_sentinel(t); }); };
        const bool one_side = masked(a) != masked(b) && (masked(a) ? b == pair.sent_b : a == pair.sent_a);
        side_ok += one_side;
        cmlm_ok += one_side && (masked(a) ? splice(a, ex.tgt_ids) == pair.sent_a : splice(b, ex.tgt_ids) == pair.sent_b);
    }
    return {mlm_ok == half && cmlm_ok == half && side_ok == half,
            "MLM " + std::to_string(mlm_ok) + "/" + std::to_string(half) + ", CMLM " + std::to_string(cmlm_ok) + "/" +
                std::to_string(half) + ", single side " + std::to_string(side_ok) + "/" + std::to_string(half)};
}

// 9. The desk model memorizes a 32-example copy task.
Outcome overfit_check() {
    const int vocab = 140;
    Rng data(9);
    std::vector<TrainingExample> pool;
    for (int i = 0; i < 32; ++i) {
        TokenIds s(4 + uniform_index(data, 5));
        for (auto& x : s) x = sp.control_count() + static_cast<TokenId>(uniform_index(data, vocab - sp.control_count()));
        pool.push_back({s, s, Task::mt, sp.lang_id("en")});
    }
    Rng init(9);
    auto p = init_params<double>(ModelConfig::desk(vocab), init);
    ShuffledStream stream(pool, 9);
    TrainOptions opts;
    opts.seed = 9;
    const auto r = run_training<double>(p, [&] { return stream.next(); }, sp, {1e-4, 3e-3, 50, 0.999}, kCopySteps,
                                        {1u << 20, 32}, opts);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 50; ++i) {
        first += r.log[i].loss / 50;
        last += r.log[r.log.size() - 1 - i].loss / 50;
    }
    return {r.log.back().loss < kCopyLossTarget && last < first,
            fmt("final loss %.4f", r.log.back().loss) + fmt(", first-50 mean %.3f", first) + fmt(", last-50 mean %.4f", last)};
}

fs::path g_out;

// 10. Full pretraining beats no pretraining on the synthetic corpus.
Outcome ablation_ordering() {
    ExperimentPlan plan;
    plan.name = "acceptance-ablation";
    plan.output_dir = (g_out / "ablation").string();
    plan.log_wall_time = false;
    const auto rows = run_ablation(plan, {"full", "-all"}, StageLog{true});
    for (const auto& r : rows) {
        if (!r.result) return {false, r.name + " failed: " + r.error};
    }
    const double full = rows[0].result->mean.rouge1.f1, none = rows[1].result->mean.rouge1.f1;
    return {full > none, fmt("ROUGE-1 full %.4f", full) + fmt(" vs none %.4f", none) + " (3 seeds)"};
}

// 11. The pretraining gain is at least as large at the smallest finetune size.
Outcome low_resource_ordering() {
    ExperimentPlan plan;
    plan.name = "acceptance-curve";
    plan.output_dir = (g_out / "curve").string();
    plan.log_wall_time = false;
    const auto points = run_low_resource(plan, StageLog{true});
    std::string detail;
    for (const auto& p : points) detail += (detail.empty() ? "" : ", ") + std::to_string(p.size) + fmt(": gap %.4f", p.gap());
    const auto& small = *std::min_element(points.begin(), points.end(), [](auto& a, auto& b) { return a.size < b.size; });
    const auto& large = *std::max_element(points.begin(), points.end(), [](auto& a, auto& b) { return a.size < b.size; });
    return {small.gap() >= large.gap(), detail + " (3 seeds)"};
}

// 12. Rerunning a pipeline with the same plan reproduces every file byte for byte.
Outcome determinism() {
    ExperimentPlan plan;
    plan.name = "acceptance-determinism";
    plan.seeds = {1};
    plan.log_wall_time = false;
    plan.output_dir = (g_out / "determinism").string();
    auto snapshot = [&] {
        std::map<std::string, std::string> files;
        for (const auto& e : fs::recursive_directory_iterator(plan.output_dir)) {
            if (e.is_regular_file()) files[fs::relative(e.path(), plan.output_dir).string()] = detail::read_bytes(e.path());
        }
        return files;
    };
    fs::remove_all(plan.output_dir);
    run_pipeline(plan, StageLog{true});
    const auto first = snapshot();
    run_pipeline(plan, StageLog{true});
    const auto second = snapshot();
    std::size_t same = 0;
    std::string differing;
    for (const auto& [name, bytes] : first) {
        const auto it = second.find(name);
        if (it != second.end() && it->second == bytes) {
            ++same;
        } else {
            differing += " " + name;
        }
    }
    const bool has_scores = first.count("scores.json") && first.count("seed-1/scores.json");
    const bool manifest_ok = verify_manifest(fs::path(plan.output_dir) / "seed-1").empty();
    const bool pass = has_scores && manifest_ok && same == first.size() && first.size() == second.size();
    return {pass, std::to_string(same) + "/" + std::to_string(first.size()) + " files identical" +
                      (differing.empty() ? "" : " (differ:" + differing + ")") + ", manifest " + (manifest_ok ? "ok" : "bad")};
}

}  // namespace

int main(int argc, char** argv) {
    g_out = fs::temp_directory_path() / "mixling_acceptance";
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--out" && i + 1 < argc) {
            g_out = argv[++i];
        } else if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            for (std::string t; std::getline(ss, t, ',');) only.insert(std::stoi(t));
        } else {
            std::cerr << "usage: acceptance [--out DIR] [--only 1,2,...]\n";
            return 2;
        }
    }
    const std::vector<Criterion> criteria{
        {1, "parameter count", 1, param_count},
        {2, "objective table rows", 1, table_rows},
        {3, "gradient oracle", 60, gradient_oracle},
        {4, "RAdam oracle", 1, radam_oracle},
        {5, "schedule anchors", 1, schedule_anchors},
        {6, "beam oracle", 10, beam_oracle},
        {7, "ROUGE fixtures", 1, rouge_fixtures},
        {8, "corruption reconstruction", 30, corruption_property},
        {9, "copy-task overfit", 120, overfit_check},
        {10, "ablation ordering", 1800, ablation_ordering},
        {11, "low-resource ordering", 2700, low_resource_ordering},
        {12, "end-to-end determinism", 600, determinism},
    };
    fs::create_directories(g_out);
    int failed = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_budget = secs < c.budget_seconds;
        const bool pass = o.pass && in_budget;
        failed += !pass;
        std::printf("%s %2d %-26s %s [%.1fs, budget %.0fs%s]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                    secs, c.budget_seconds, in_budget ? "" : ", over budget");
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
