#pragma once

// Desk-scale experiment protocols: pretrain -> finetune -> decode -> score
// pipelines, the objective ablation and the low-resource curve.

#include "mixling/checkpoint.hpp"
#include "mixling/corpus.hpp"
#include "mixling/decoding.hpp"
#include "mixling/rouge.hpp"
#include "mixling/training.hpp"
#include "mixling/vocab.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

namespace mixling {

namespace fs = std::filesystem;

struct PretrainPlan {
    std::vector<Task> tasks{Task::mlm, Task::dae, Task::ms, Task::cmlm, Task::mt};
    std::int64_t steps = 2000;
    ScheduleConfig schedule{1e-9, 1e-3, 200, 0.999};
    BatchSpec batch{600, 24};
    std::string mix = "uniform";  // or "size": proportional to pool sizes
};

struct FinetunePlan {
    std::int64_t steps = 1000;
    ScheduleConfig schedule{1e-4, 1e-3, 100, 0.999};
    BatchSpec batch{600, 24};
    std::size_t size = 0;  // 0 = the whole training set
    std::uint64_t subsample_seed = 0;
};

struct DecodePlan {
    BeamOptions beam{6, 16, 1.0};
    std::size_t test_limit = 0;  // 0 = every test document
};

struct ExperimentPlan {
    std::string name = "run";
    std::string output_dir = "runs/run";
    std::string corpus_dir;  // empty: generate the synthetic corpus
    SyntheticSpec synthetic{};
    std::size_t vocab_size = 600;
    std::uint64_t vocab_seed = 0;
    ModelConfig model = ModelConfig::desk(0);  // vocab_size follows the vocabulary
    std::string precision = "double";
    std::vector<std::uint64_t> seeds{1, 2, 3};
    PretrainPlan pretrain{};
    FinetunePlan finetune{};
    DecodePlan decode{};
    double clip_norm = 0.0;
    bool log_wall_time = true;
    std::vector<std::size_t> curve_sizes{50, 200, 0};  // 0 = full training set

    void validate() const {
        if (seeds.empty()) throw Error("plan: seed list is empty");
        if (precision != "float" && precision != "double") throw Error("plan: precision must be float or double");
        if (pretrain.steps < 0 || finetune.steps < 0) throw Error("plan: negative step count");
        if (pretrain.mix != "uniform" && pretrain.mix != "size") throw Error("plan: mix must be uniform or size");
        if (corpus_dir.empty()) synthetic.validate();
        pretrain.schedule.validate();
        finetune.schedule.validate();
        ModelConfig m = model;
        m.vocab_size = std::max(m.vocab_size, 1);
        m.validate();
        std::set<Task> seen;
        for (Task t : pretrain.tasks) {
            if (t == Task::cls) throw Error("plan: cls is not a pre-training task");
            if (!seen.insert(t).second) throw Error("plan: task listed twice");
        }
    }
};

namespace detail {

inline nlohmann::json schedule_to_json(const ScheduleConfig& s) {
    return {{"init_lr", s.init_lr}, {"peak_lr", s.peak_lr}, {"warmup_steps", s.warmup_steps}, {"decay_rate", s.decay_rate}};
}

inline nlohmann::json batch_to_json(const BatchSpec& b) {
    return {{"max_tokens", b.max_tokens}, {"max_examples", b.max_examples}};
}

// Applies every key of `j` through `set`, rejecting keys it does not know.
template <typename F>
void apply_keys(const nlohmann::json& j, const char* section, F&& set) {
    if (!j.is_object()) throw Error(std::string("plan: '") + section + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (!set(key, value)) throw Error(std::string("plan: unknown key '") + section + "." + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw Error(std::string("plan: bad value for '") + section + "." + key + "': " + e.what());
        }
    }
}

inline ScheduleConfig schedule_from_json(const nlohmann::json& j, ScheduleConfig s) {
    apply_keys(j, "schedule", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "init_lr") s.init_lr = v.get<double>();
        else if (k == "peak_lr") s.peak_lr = v.get<double>();
        else if (k == "warmup_steps") s.warmup_steps = v.get<std::int64_t>();
        else if (k == "decay_rate") s.decay_rate = v.get<double>();
        else return false;
        return true;
    });
    return s;
}

inline BatchSpec batch_from_json(const nlohmann::json& j, BatchSpec b) {
    apply_keys(j, "batch", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "max_tokens") b.max_tokens = v.get<std::size_t>();
        else if (k == "max_examples") b.max_examples = v.get<std::size_t>();
        else return false;
        return true;
    });
    return b;
}

}  // namespace detail

inline nlohmann::json plan_to_json(const ExperimentPlan& p) {
    nlohmann::json tasks = nlohmann::json::array();
    for (Task t : p.pretrain.tasks) tasks.push_back(task_name(t));
    auto model = config_to_json(p.model);
    model.erase("vocab_size");
    return {
        {"name", p.name},
        {"output_dir", p.output_dir},
        {"corpus_dir", p.corpus_dir},
        {"synthetic", synthetic_to_json(p.synthetic)},
        {"vocab", {{"size", p.vocab_size}, {"seed", p.vocab_seed}}},
        {"model", model},
        {"precision", p.precision},
        {"seeds", p.seeds},
        {"pretrain",
         {{"tasks", tasks},
          {"steps", p.pretrain.steps},
          {"schedule", detail::schedule_to_json(p.pretrain.schedule)},
          {"batch", detail::batch_to_json(p.pretrain.batch)},
          {"mix", p.pretrain.mix}}},
        {"finetune",
         {{"steps", p.finetune.steps},
          {"schedule", detail::schedule_to_json(p.finetune.schedule)},
          {"batch", detail::batch_to_json(p.finetune.batch)},
          {"size", p.finetune.size},
          {"subsample_seed", p.finetune.subsample_seed}}},
        {"decode",
         {{"beam_size", p.decode.beam.beam_size},
          {"max_len", p.decode.beam.max_len},
          {"length_alpha", p.decode.beam.length_alpha},
          {"test_limit", p.decode.test_limit}}},
        {"train", {{"clip_norm", p.clip_norm}, {"log_wall_time", p.log_wall_time}}},
        {"curve", {{"sizes", p.curve_sizes}}},
    };
}

// Keys missing from `j` keep the values already in `base`.
inline ExperimentPlan plan_from_json(const nlohmann::json& j, ExperimentPlan p = {}) {
    using nlohmann::json;
    detail::apply_keys(j, "plan", [&](const std::string& k, const json& v) {
        if (k == "name") p.name = v.get<std::string>();
        else if (k == "output_dir") p.output_dir = v.get<std::string>();
        else if (k == "corpus_dir") p.corpus_dir = v.get<std::string>();
        else if (k == "synthetic") p.synthetic = synthetic_from_json(v, p.synthetic);
        else if (k == "precision") p.precision = v.get<std::string>();
        else if (k == "seeds") p.seeds = v.get<std::vector<std::uint64_t>>();
        else if (k == "vocab") {
            detail::apply_keys(v, "vocab", [&](const std::string& kk, const json& vv) {
                if (kk == "size") p.vocab_size = vv.get<std::size_t>();
                else if (kk == "seed") p.vocab_seed = vv.get<std::uint64_t>();
                else return false;
                return true;
            });
        } else if (k == "model") {
            detail::apply_keys(v, "model", [&](const std::string& kk, const json&) {
                return kk == "num_layers" || kk == "num_heads" || kk == "d_model" || kk == "d_ff" || kk == "dropout" ||
                       kk == "max_positions" || kk == "tie_embeddings";
            });
            p.model = config_from_json(v, p.model);
        } else if (k == "pretrain") {
            detail::apply_keys(v, "pretrain", [&](const std::string& kk, const json& vv) {
                if (kk == "tasks") {
                    p.pretrain.tasks.clear();
                    for (const auto& t : vv) p.pretrain.tasks.push_back(task_from_name(t.get<std::string>()));
                } else if (kk == "steps") p.pretrain.steps = vv.get<std::int64_t>();
                else if (kk == "schedule") p.pretrain.schedule = detail::schedule_from_json(vv, p.pretrain.schedule);
                else if (kk == "batch") p.pretrain.batch = detail::batch_from_json(vv, p.pretrain.batch);
                else if (kk == "mix") p.pretrain.mix = vv.get<std::string>();
                else return false;
                return true;
            });
        } else if (k == "finetune") {
            detail::apply_keys(v, "finetune", [&](const std::string& kk, const json& vv) {
                if (kk == "steps") p.finetune.steps = vv.get<std::int64_t>();
                else if (kk == "schedule") p.finetune.schedule = detail::schedule_from_json(vv, p.finetune.schedule);
                else if (kk == "batch") p.finetune.batch = detail::batch_from_json(vv, p.finetune.batch);
                else if (kk == "size") p.finetune.size = vv.get<std::size_t>();
                else if (kk == "subsample_seed") p.finetune.subsample_seed = vv.get<std::uint64_t>();
                else return false;
                return true;
            });
        } else if (k == "decode") {
            detail::apply_keys(v, "decode", [&](const std::string& kk, const json& vv) {
                if (kk == "beam_size") p.decode.beam.beam_size = vv.get<std::size_t>();
                else if (kk == "max_len") p.decode.beam.max_len = vv.get<std::size_t>();
                else if (kk == "length_alpha") p.decode.beam.length_alpha = vv.get<double>();
                else if (kk == "test_limit") p.decode.test_limit = vv.get<std::size_t>();
                else return false;
                return true;
            });
        } else if (k == "train") {
            detail::apply_keys(v, "train", [&](const std::string& kk, const json& vv) {
                if (kk == "clip_norm") p.clip_norm = vv.get<double>();
                else if (kk == "log_wall_time") p.log_wall_time = vv.get<bool>();
                else return false;
                return true;
            });
        } else if (k == "curve") {
            detail::apply_keys(v, "curve", [&](const std::string& kk, const json& vv) {
                if (kk == "sizes") p.curve_sizes = vv.get<std::vector<std::size_t>>();
                else return false;
                return true;
            });
        } else {
            return false;
        }
        return true;
    });
    p.validate();
    return p;
}

inline ExperimentPlan load_plan(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open plan " + path);
    try {
        return plan_from_json(nlohmann::json::parse(f));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error("plan " + path + ": " + e.what());
    }
}

// Corpus, shared vocabulary and the encoded example pools.
struct Workspace {
    SyntheticCorpus corpus;
    std::shared_ptr<const Vocabulary> vocab;
    TokenId lang_a = 0, lang_b = 0;
    std::string lang_b_code;

    struct Sentence {
        TokenIds ids;
        TokenId lang = 0;
    };
    std::vector<Sentence> mono;
    std::vector<ParallelPair> parallel;
    std::vector<SummPair> mono_summ;
    std::vector<SummPair> cls_train;

    const SpecialTokens& sp() const { return vocab->specials(); }
};

inline std::vector<LangText> vocabulary_corpus(const SyntheticCorpus& c) {
    std::vector<LangText> out;
    for (const auto* set : {&c.mono_a, &c.mono_b, &c.parallel, &c.mono_summ, &c.cls_train}) {
        for (const auto& r : *set) {
            out.push_back({r.lang_a, r.text_a});
            if (r.kind != RecordKind::mono) out.push_back({r.lang_b, r.text_b});
        }
    }
    return out;
}

inline SyntheticCorpus plan_corpus(const ExperimentPlan& plan) {
    return plan.corpus_dir.empty() ? generate_synthetic(plan.synthetic) : read_corpus_dir(plan.corpus_dir);
}

inline Workspace prepare_workspace(const ExperimentPlan& plan, SyntheticCorpus corpus,
                                   std::shared_ptr<const Vocabulary> vocab = nullptr) {
    Workspace w;
    w.corpus = std::move(corpus);
    if (!vocab) {
        vocab = std::make_shared<const Vocabulary>(
            Vocabulary::train(vocabulary_corpus(w.corpus), VocabTrainOptions{plan.vocab_size, plan.vocab_seed, true}));
    }
    w.vocab = std::move(vocab);
    const auto& sp = w.sp();
    const auto& first = w.corpus.cls_train.at(0);
    w.lang_a = sp.lang_id(first.lang_a);
    w.lang_b = sp.lang_id(first.lang_b);
    w.lang_b_code = first.lang_b;
    auto enc = [&](const std::string& text) { return w.vocab->encode(text); };
    for (const auto* set : {&w.corpus.mono_a, &w.corpus.mono_b}) {
        for (const auto& r : *set) w.mono.push_back({enc(r.text_a), sp.lang_id(r.lang_a)});
    }
    for (const auto& r : w.corpus.parallel) {
        w.parallel.push_back({sp.lang_id(r.lang_a), sp.lang_id(r.lang_b), enc(r.text_a), enc(r.text_b)});
    }
    auto summ = [&](const CorpusRecord& r) {
        return SummPair{sp.lang_id(r.lang_a), sp.lang_id(r.lang_b), enc(r.text_a), enc(r.text_b)};
    };
    for (const auto& r : w.corpus.mono_summ) w.mono_summ.push_back(summ(r));
    for (const auto& r : w.corpus.cls_train) {
        if (r.lang_a != first.lang_a || r.lang_b != first.lang_b) {
            throw Error("cls record '" + r.id + "' has a different language direction than the first record");
        }
        w.cls_train.push_back(summ(r));
    }
    return w;
}

inline ModelConfig model_config(const ExperimentPlan& plan, const Vocabulary& vocab) {
    ModelConfig c = plan.model;
    c.vocab_size = static_cast<int>(vocab.size());
    c.validate();
    return c;
}

// The example pools for the enabled pre-training tasks.
inline std::vector<TaskSource> pretrain_sources(const Workspace& w, const std::vector<Task>& tasks) {
    std::vector<TaskSource> out;
    const SpecialTokens* sp = &w.sp();
    const Workspace* ws = &w;
    for (Task t : tasks) {
        switch (t) {
            case Task::mlm:
                out.push_back({t, w.mono.size(), [ws, sp](std::size_t i, Rng& r) {
                                   return corrupt_mlm(ws->mono[i].ids, ws->mono[i].lang, kMlmMaskProb, r, *sp);
                               }});
                break;
            case Task::dae:
                out.push_back({t, w.mono.size(), [ws, sp](std::size_t i, Rng& r) {
                                   return corrupt_dae(ws->mono[i].ids, ws->mono[i].lang, DaeNoise{}, r, *sp);
                               }});
                break;
            case Task::ms:
                out.push_back({t, w.mono_summ.size(), [ws](std::size_t i, Rng&) { return make_summ(ws->mono_summ[i]); }});
                break;
            case Task::cmlm:
                out.push_back({t, w.parallel.size(), [ws, sp](std::size_t i, Rng& r) {
                                   return make_cmlm(ws->parallel[i], kMlmMaskProb, r, *sp);
                               }});
                break;
            case Task::mt:
                // Both directions of every pair.
                out.push_back({t, 2 * w.parallel.size(), [ws](std::size_t i, Rng&) {
                                   return make_mt(ws->parallel[i / 2], i % 2 ? Direction::b_to_a : Direction::a_to_b);
                               }});
                break;
            case Task::cls: throw Error("cls is not a pre-training task");
        }
    }
    return out;
}

inline MixWeights mix_weights(const std::vector<TaskSource>& sources, const std::string& mix) {
    MixWeights w = MixWeights::only({});
    for (const auto& s : sources) w[s.task] = mix == "size" ? static_cast<double>(s.size) : 1.0;
    return w;
}

template <typename T>
ModelParams<T> initial_params(const ExperimentPlan& plan, const Workspace& w, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "init"));
    return init_params<T>(model_config(plan, *w.vocab), rng);
}

template <typename T>
TrainResult<T> pretrain_stage(ModelParams<T>& params, const Workspace& w, const ExperimentPlan& plan,
                              std::uint64_t seed, std::ostream* metrics) {
    if (plan.pretrain.tasks.empty() || plan.pretrain.steps == 0) return {};
    auto sources = pretrain_sources(w, plan.pretrain.tasks);
    const auto weights = mix_weights(sources, plan.pretrain.mix);
    auto mixer = std::make_shared<TaskMixer>(std::move(sources), weights, derive_seed(seed, "pretrain-mix"));
    TrainOptions opts;
    opts.seed = derive_seed(seed, "pretrain");
    opts.clip_norm = plan.clip_norm;
    opts.metrics_log = metrics;
    opts.log_wall_time = plan.log_wall_time;
    return run_training<T>(params, [mixer] { return mixer->next(); }, w.sp(), plan.pretrain.schedule,
                           plan.pretrain.steps, plan.pretrain.batch, opts);
}

// Finetuning subset: a seeded subsample of the training pairs.
inline std::vector<SummPair> finetune_subset(const Workspace& w, std::size_t size, std::uint64_t subsample_seed,
                                             std::uint64_t seed) {
    const std::size_t n = size == 0 ? w.cls_train.size() : size;
    return subsample(w.cls_train, n, derive_seed(subsample_seed, seed));
}

template <typename T>
TrainResult<T> finetune_stage(ModelParams<T>& params, const Workspace& w, const ExperimentPlan& plan,
                              std::uint64_t seed, std::ostream* metrics) {
    const auto subset = finetune_subset(w, plan.finetune.size, plan.finetune.subsample_seed, seed);
    if (plan.finetune.steps == 0) return {};
    std::vector<TrainingExample> pool;
    pool.reserve(subset.size());
    for (const auto& s : subset) pool.push_back(make_summ(s));
    auto stream = std::make_shared<ShuffledStream>(std::move(pool), derive_seed(seed, "finetune-order"));
    TrainOptions opts;
    opts.seed = derive_seed(seed, "finetune");
    opts.clip_norm = plan.clip_norm;
    opts.metrics_log = metrics;
    opts.log_wall_time = plan.log_wall_time;
    return run_training<T>(params, [stream] { return stream->next(); }, w.sp(), plan.finetune.schedule,
                           plan.finetune.steps, plan.finetune.batch, opts);
}

// Byte-level outputs can end mid-codepoint; invalid sequences become U+FFFD.
inline std::string sanitize_utf8(const std::string& text) {
    return nlohmann::json::parse(nlohmann::json(text).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace))
        .get<std::string>();
}

struct Generation {
    std::string id;
    std::string text;
    std::string reference;
    double score = 0.0;
    bool finished = false;
};

template <typename T>
std::vector<Generation> generate_stage(const ModelParams<T>& params, const Vocabulary& vocab,
                                       const std::vector<CorpusRecord>& docs, const BeamOptions& beam,
                                       std::size_t limit = 0) {
    const auto& sp = vocab.specials();
    const std::size_t n = limit == 0 ? docs.size() : std::min(limit, docs.size());
    std::vector<Generation> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = docs[i];
        const Task task = r.kind == RecordKind::summ && r.lang_a == r.lang_b ? Task::ms
                          : r.kind == RecordKind::summ                       ? Task::cls
                                                                             : Task::mt;
        const std::string& tgt = r.kind == RecordKind::mono ? r.lang_a : r.lang_b;
        const auto src = vocab.encode(r.text_a);
        if (src.empty()) throw Error("generate: record '" + r.id + "' encodes to nothing");
        const auto hyps = beam_search(params, sp, src, task, sp.lang_id(tgt), beam);
        const auto& best = hyps.front();
        out.push_back({r.id, sanitize_utf8(vocab.decode(generated_tokens(best, sp))), r.text_b, best.score, best.finished});
    }
    return out;
}

inline void write_generations(std::ostream& os, const std::vector<Generation>& gens) {
    for (const auto& g : gens) {
        nlohmann::json j{{"id", g.id}, {"text", g.text}, {"reference", g.reference}, {"score", g.score},
                         {"finished", g.finished}};
        os << j.dump() << '\n';
    }
}

inline std::vector<Generation> read_generations(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open generations " + path);
    std::vector<Generation> out;
    std::string line;
    std::size_t no = 0;
    while (std::getline(f, line)) {
        ++no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("id").get<std::string>(), j.at("text").get<std::string>(),
                           j.value("reference", std::string()), j.value("score", 0.0), j.value("finished", false)});
        } catch (const std::exception& e) {
            throw Error(path + ":" + std::to_string(no) + ": " + e.what());
        }
    }
    return out;
}

inline CorpusRouge score_generations(const std::vector<Generation>& gens, std::string_view lang) {
    std::vector<CandidateReference> pairs;
    pairs.reserve(gens.size());
    for (const auto& g : gens) pairs.push_back({g.text, g.reference});
    return corpus_rouge(pairs, lang);
}

inline nlohmann::json rouge_to_json(const CorpusRouge& r) {
    auto one = [](const RougeScore& s) { return nlohmann::json{{"p", s.precision}, {"r", s.recall}, {"f1", s.f1}}; };
    return {{"pairs", r.pairs}, {"rouge1", one(r.rouge1)}, {"rouge2", one(r.rouge2)}, {"rougeL", one(r.rougeL)}};
}

struct SeedResult {
    std::uint64_t seed = 0;
    CorpusRouge scores;
};

struct PipelineResult {
    std::string name;
    std::vector<SeedResult> seeds;
    CorpusRouge mean;  // per-variant means over seeds; pairs is the per-seed count
};

inline CorpusRouge mean_over_seeds(const std::vector<SeedResult>& seeds) {
    CorpusRouge m;
    if (seeds.empty()) return m;
    for (const auto& s : seeds) {
        for (auto [dst, src] : {std::pair{&m.rouge1, &s.scores.rouge1}, std::pair{&m.rouge2, &s.scores.rouge2},
                                std::pair{&m.rougeL, &s.scores.rougeL}}) {
            dst->precision += src->precision;
            dst->recall += src->recall;
            dst->f1 += src->f1;
        }
    }
    const double n = static_cast<double>(seeds.size());
    for (auto* s : {&m.rouge1, &m.rouge2, &m.rougeL}) {
        s->precision /= n;
        s->recall /= n;
        s->f1 /= n;
    }
    m.pairs = seeds.front().scores.pairs;
    return m;
}

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
}

inline std::string read_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace detail

inline const std::vector<std::string>& required_run_files() {
    static const std::vector<std::string> files{"config.json", "finetune_metrics.jsonl", "model.ckpt",
                                                "generations.jsonl", "scores.json"};
    return files;
}

// Records size and checksum of every file in a run directory.
inline void write_manifest(const fs::path& dir) {
    nlohmann::json files = nlohmann::json::object();
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename() != "manifest.json") entries.push_back(e.path());
    }
    std::sort(entries.begin(), entries.end());
    for (const auto& p : entries) {
        const auto bytes = detail::read_bytes(p);
        files[p.filename().string()] = {{"bytes", bytes.size()}, {"fnv1a", detail::hex64(fnv1a(bytes.data(), bytes.size()))}};
    }
    detail::write_text(dir / "manifest.json", nlohmann::json{{"files", files}}.dump(2) + "\n");
}

// Problems found in a run directory; empty when complete and unmodified.
inline std::vector<std::string> verify_manifest(const fs::path& dir) {
    std::vector<std::string> problems;
    const auto path = dir / "manifest.json";
    if (!fs::exists(path)) return {"manifest.json missing"};
    const auto m = nlohmann::json::parse(detail::read_bytes(path));
    const auto& files = m.at("files");
    for (const auto& name : required_run_files()) {
        if (!files.contains(name)) problems.push_back(name + " not listed");
    }
    for (const auto& [name, info] : files.items()) {
        if (!fs::exists(dir / name)) {
            problems.push_back(name + " missing");
            continue;
        }
        const auto bytes = detail::read_bytes(dir / name);
        if (bytes.size() != info.at("bytes").get<std::size_t>() ||
            detail::hex64(fnv1a(bytes.data(), bytes.size())) != info.at("fnv1a").get<std::string>()) {
            problems.push_back(name + " changed since the manifest was written");
        }
    }
    return problems;
}

struct StageLog {
    bool enabled = true;
    void operator()(const std::string& msg) const {
        if (enabled) std::cerr << msg << std::endl;
    }
};

// One seed: optional pretraining (or a supplied pretrained model), then
// finetuning, decoding and scoring, with all artifacts under `dir`.
template <typename T>
SeedResult run_seed(const ExperimentPlan& plan, const Workspace& w, std::uint64_t seed, const fs::path& dir,
                    const ModelParams<T>* pretrained, const StageLog& log) {
    fs::create_directories(dir);
    auto stage = [&](const char* name, auto&& fn) {
        try {
            return fn();
        } catch (const std::exception& e) {
            throw Error(std::string(name) + " stage (seed " + std::to_string(seed) + "): " + e.what());
        }
    };
    nlohmann::json config = plan_to_json(plan);
    config["seed"] = seed;
    config["model"]["vocab_size"] = w.vocab->size();
    detail::write_text(dir / "config.json", config.dump(2) + "\n");

    ModelParams<T> params = pretrained ? *pretrained : initial_params<T>(plan, w, seed);
    if (!pretrained && !plan.pretrain.tasks.empty() && plan.pretrain.steps > 0) {
        stage("pretrain", [&] {
            log("[" + plan.name + "] seed " + std::to_string(seed) + ": pretraining " +
                std::to_string(plan.pretrain.steps) + " steps");
            std::ofstream metrics(dir / "pretrain_metrics.jsonl");
            auto r = pretrain_stage<T>(params, w, plan, seed, &metrics);
            save_checkpoint((dir / "pretrain.ckpt").string(), params);
            return r.log.size();
        });
    }
    stage("finetune", [&] {
        log("[" + plan.name + "] seed " + std::to_string(seed) + ": finetuning " + std::to_string(plan.finetune.steps) +
            " steps");
        std::ofstream metrics(dir / "finetune_metrics.jsonl");
        const auto r = finetune_stage<T>(params, w, plan, seed, &metrics);
        save_checkpoint((dir / "model.ckpt").string(), params);
        return r.log.size();
    });
    const auto gens = stage("decode", [&] {
        log("[" + plan.name + "] seed " + std::to_string(seed) + ": decoding");
        return generate_stage<T>(params, *w.vocab, w.corpus.cls_test, plan.decode.beam, plan.decode.test_limit);
    });
    std::ofstream(dir / "generations.jsonl", std::ios::binary) << [&] {
        std::ostringstream ss;
        write_generations(ss, gens);
        return ss.str();
    }();
    const auto scores = stage("score", [&] { return score_generations(gens, w.lang_b_code); });
    nlohmann::json sj = rouge_to_json(scores);
    sj["seed"] = seed;
    detail::write_text(dir / "scores.json", sj.dump(2) + "\n");
    write_manifest(dir);
    return {seed, scores};
}

inline void write_pipeline_scores(const fs::path& path, const PipelineResult& r) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& s : r.seeds) {
        auto j = rouge_to_json(s.scores);
        j["seed"] = s.seed;
        per.push_back(j);
    }
    detail::write_text(path, nlohmann::json{{"name", r.name}, {"per_seed", per}, {"mean", rouge_to_json(r.mean)}}.dump(2) + "\n");
}

template <typename T>
PipelineResult run_pipeline_with(const ExperimentPlan& plan, const Workspace& w, const StageLog& log) {
    const fs::path out(plan.output_dir);
    fs::create_directories(out);
    detail::write_text(out / "plan.json", plan_to_json(plan).dump(2) + "\n");
    w.vocab->save((out / "vocab.txt").string());
    PipelineResult r;
    r.name = plan.name;
    for (std::uint64_t seed : plan.seeds) {
        r.seeds.push_back(run_seed<T>(plan, w, seed, out / ("seed-" + std::to_string(seed)), nullptr, log));
    }
    r.mean = mean_over_seeds(r.seeds);
    write_pipeline_scores(out / "scores.json", r);
    return r;
}

inline PipelineResult run_pipeline(const ExperimentPlan& plan, const Workspace& w, const StageLog& log = {}) {
    plan.validate();
    return plan.precision == "double" ? run_pipeline_with<double>(plan, w, log) : run_pipeline_with<float>(plan, w, log);
}

inline PipelineResult run_pipeline(const ExperimentPlan& plan, const StageLog& log = {}) {
    plan.validate();
    return run_pipeline(plan, prepare_workspace(plan, plan_corpus(plan)), log);
}

struct AblationRow {
    std::string name;
    std::vector<Task> tasks;
    std::optional<PipelineResult> result;
    std::string error;
};

// The five objective subsets compared in the ablation.
inline std::vector<AblationRow> ablation_rows() {
    using enum Task;
    return {
        {"full", {mlm, dae, ms, cmlm, mt}, {}, {}},
        {"-MS", {mlm, dae, cmlm, mt}, {}, {}},
        {"-MT", {mlm, dae, ms, cmlm}, {}, {}},
        {"-MLM,DAE", {ms, cmlm, mt}, {}, {}},
        {"-all", {}, {}, {}},
    };
}

inline std::string tasks_label(const std::vector<Task>& tasks) {
    if (tasks.empty()) return "none";
    std::string s;
    for (Task t : tasks) s += (s.empty() ? "" : ",") + std::string(task_name(t));
    return s;
}

// Row selector: case-insensitive, leading '-' optional ("all" selects "-all").
inline std::string row_key(const std::string& name) {
    std::string s = name.substr(name.rfind('-', 0) == 0 ? 1 : 0);
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline std::string row_dir_name(const std::string& row) {
    std::string s;
    for (char c : row) s += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : '_';
    return s;
}

inline std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

// Runs every row (or the named subset) on the same corpus, vocabulary and
// seeds. A failing row is reported and the others still run.
inline std::vector<AblationRow> run_ablation(const ExperimentPlan& base, const std::vector<std::string>& only = {},
                                             const StageLog& log = {}) {
    base.validate();
    const Workspace w = prepare_workspace(base, plan_corpus(base));
    const fs::path out(base.output_dir);
    fs::create_directories(out);
    for (const auto& q : only) {
        const auto all = ablation_rows();
        if (std::none_of(all.begin(), all.end(), [&](const AblationRow& r) { return row_key(r.name) == row_key(q); })) {
            throw Error("ablation: unknown row '" + q + "'");
        }
    }
    std::vector<AblationRow> rows;
    for (auto row : ablation_rows()) {
        if (!only.empty() && std::none_of(only.begin(), only.end(), [&](const std::string& q) {
                return row_key(q) == row_key(row.name);
            })) {
            continue;
        }
        ExperimentPlan plan = base;
        plan.name = base.name + "/" + row.name;
        plan.pretrain.tasks = row.tasks;
        plan.output_dir = (out / row_dir_name(row.name)).string();
        try {
            row.result = run_pipeline(plan, w, log);
        } catch (const std::exception& e) {
            row.error = e.what();
            log("[" + plan.name + "] failed: " + row.error);
        }
        rows.push_back(std::move(row));
    }
    std::ostringstream table, raw;
    table << "row\ttasks\trouge1_f1\trouge2_f1\trougeL_f1\tstatus\n";
    raw << "row\tseed\trouge1_f1\trouge2_f1\trougeL_f1\n";
    for (const auto& row : rows) {
        table << row.name << '\t' << tasks_label(row.tasks) << '\t';
        if (row.result) {
            const auto& m = row.result->mean;
            table << fmt4(m.rouge1.f1) << '\t' << fmt4(m.rouge2.f1) << '\t' << fmt4(m.rougeL.f1) << "\tok\n";
            for (const auto& s : row.result->seeds) {
                raw << row.name << '\t' << s.seed << '\t' << fmt4(s.scores.rouge1.f1) << '\t' << fmt4(s.scores.rouge2.f1)
                    << '\t' << fmt4(s.scores.rougeL.f1) << '\n';
            }
        } else {
            table << "-\t-\t-\terror\n";
        }
    }
    detail::write_text(out / "ablation.tsv", table.str());
    detail::write_text(out / "ablation_seeds.tsv", raw.str());
    return rows;
}

struct CurvePoint {
    std::size_t size = 0;  // resolved subset size
    std::vector<SeedResult> pretrained, scratch;
    double pretrained_rouge1 = 0.0, scratch_rouge1 = 0.0;
    double gap() const { return pretrained_rouge1 - scratch_rouge1; }
};

template <typename T>
std::vector<CurvePoint> run_low_resource_with(const ExperimentPlan& base, const Workspace& w, const StageLog& log) {
    const fs::path out(base.output_dir);
    std::vector<CurvePoint> points;
    std::vector<std::size_t> sizes;
    for (std::size_t s : base.curve_sizes) {
        const std::size_t n = s == 0 ? w.cls_train.size() : s;
        if (n > w.cls_train.size()) {
            throw Error("curve: size " + std::to_string(n) + " exceeds the " + std::to_string(w.cls_train.size()) +
                        " training pairs");
        }
        sizes.push_back(n);
        points.push_back({n, {}, {}, 0.0, 0.0});
    }
    for (std::uint64_t seed : base.seeds) {
        // One pretraining run per seed, shared by every size.
        ExperimentPlan pre = base;
        pre.name = base.name + "/pretrain";
        const fs::path pre_dir = out / "pretrain" / ("seed-" + std::to_string(seed));
        fs::create_directories(pre_dir);
        ModelParams<T> pretrained = initial_params<T>(pre, w, seed);
        try {
            log("[" + pre.name + "] seed " + std::to_string(seed) + ": pretraining " + std::to_string(pre.pretrain.steps) +
                " steps");
            std::ofstream metrics(pre_dir / "pretrain_metrics.jsonl");
            pretrain_stage<T>(pretrained, w, pre, seed, &metrics);
            save_checkpoint((pre_dir / "pretrain.ckpt").string(), pretrained);
        } catch (const std::exception& e) {
            throw Error(std::string("pretrain stage (seed ") + std::to_string(seed) + "): " + e.what());
        }
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            ExperimentPlan cell = base;
            cell.finetune.size = sizes[i];
            const fs::path cell_dir = out / ("size-" + std::to_string(sizes[i]));
            cell.name = base.name + "/size-" + std::to_string(sizes[i]) + "/pretrained";
            points[i].pretrained.push_back(
                run_seed<T>(cell, w, seed, cell_dir / "pretrained" / ("seed-" + std::to_string(seed)), &pretrained, log));
            cell.name = base.name + "/size-" + std::to_string(sizes[i]) + "/scratch";
            cell.pretrain.tasks.clear();
            points[i].scratch.push_back(
                run_seed<T>(cell, w, seed, cell_dir / "scratch" / ("seed-" + std::to_string(seed)), nullptr, log));
        }
    }
    std::ostringstream curve, raw;
    curve << "size\tpretrained_rouge1\tscratch_rouge1\tgap\n";
    raw << "size\tvariant\tseed\trouge1_f1\trouge2_f1\trougeL_f1\n";
    for (auto& p : points) {
        p.pretrained_rouge1 = mean_over_seeds(p.pretrained).rouge1.f1;
        p.scratch_rouge1 = mean_over_seeds(p.scratch).rouge1.f1;
        curve << p.size << '\t' << fmt4(p.pretrained_rouge1) << '\t' << fmt4(p.scratch_rouge1) << '\t' << fmt4(p.gap())
              << '\n';
        for (auto [name, set] : {std::pair{"pretrained", &p.pretrained}, std::pair{"scratch", &p.scratch}}) {
            for (const auto& s : *set) {
                raw << p.size << '\t' << name << '\t' << s.seed << '\t' << fmt4(s.scores.rouge1.f1) << '\t'
                    << fmt4(s.scores.rouge2.f1) << '\t' << fmt4(s.scores.rougeL.f1) << '\n';
            }
        }
    }
    detail::write_text(out / "curve.tsv", curve.str());
    detail::write_text(out / "curve_seeds.tsv", raw.str());
    return points;
}

// For each subset size, finetunes the shared pretrained model and a scratch
// model on the same subsample.
inline std::vector<CurvePoint> run_low_resource(const ExperimentPlan& base, const StageLog& log = {}) {
    base.validate();
    if (base.pretrain.tasks.empty()) throw Error("curve: the base plan enables no pre-training tasks");
    if (base.curve_sizes.empty()) throw Error("curve: no sizes given");
    const Workspace w = prepare_workspace(base, plan_corpus(base));
    fs::create_directories(base.output_dir);
    detail::write_text(fs::path(base.output_dir) / "plan.json", plan_to_json(base).dump(2) + "\n");
    return base.precision == "double" ? run_low_resource_with<double>(base, w, log)
                                      : run_low_resource_with<float>(base, w, log);
}

}  // namespace mixling
