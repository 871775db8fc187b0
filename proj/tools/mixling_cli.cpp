#include "mixling/experiments.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace mixling;

namespace {

// Flags shared by every plan-driven subcommand. Each one, when given,
// overrides the matching key of the --config plan.
struct PlanFlags {
    std::string config;
    std::optional<std::string> name, output_dir, corpus_dir, precision, tasks, mix;
    std::optional<std::vector<std::uint64_t>> seeds;
    std::optional<std::vector<std::size_t>> curve_sizes;
    std::optional<std::int64_t> pretrain_steps, finetune_steps;
    std::optional<std::size_t> finetune_size, vocab_size, beam_size, max_len, test_limit;
    std::optional<double> clip_norm, dropout;
    std::optional<std::uint64_t> subsample_seed;
    bool no_wall_time = false;

    void add(CLI::App* app) {
        app->add_option("-c,--config", config, "Plan file (JSON)")->check(CLI::ExistingFile);
        app->add_option("--name", name, "name");
        app->add_option("-o,--output-dir", output_dir, "output_dir");
        app->add_option("--corpus-dir", corpus_dir, "corpus_dir (omit to generate the synthetic corpus)");
        app->add_option("--precision", precision, "precision: float or double");
        app->add_option("--seeds", seeds, "seeds");
        app->add_option("--tasks", tasks, "pretrain.tasks as a comma list, or 'none'");
        app->add_option("--mix", mix, "pretrain.mix: uniform or size");
        app->add_option("--pretrain-steps", pretrain_steps, "pretrain.steps");
        app->add_option("--finetune-steps", finetune_steps, "finetune.steps");
        app->add_option("--finetune-size", finetune_size, "finetune.size (0 = all)");
        app->add_option("--subsample-seed", subsample_seed, "finetune.subsample_seed");
        app->add_option("--vocab-size", vocab_size, "vocab.size");
        app->add_option("--beam-size", beam_size, "decode.beam_size");
        app->add_option("--max-len", max_len, "decode.max_len");
        app->add_option("--test-limit", test_limit, "decode.test_limit (0 = all)");
        app->add_option("--clip-norm", clip_norm, "train.clip_norm (0 = off)");
        app->add_option("--dropout", dropout, "model.dropout");
        app->add_option("--curve-sizes", curve_sizes, "curve.sizes (0 = full training set)");
        app->add_flag("--no-wall-time", no_wall_time, "train.log_wall_time = false");
    }

    ExperimentPlan resolve() const {
        nlohmann::json j = nlohmann::json::object();
        if (!config.empty()) {
            std::ifstream f(config);
            j = nlohmann::json::parse(f);
        }
        auto set = [&](std::initializer_list<const char*> path, const nlohmann::json& v) {
            nlohmann::json* node = &j;
            const auto* last = path.end() - 1;
            for (const auto* k = path.begin(); k != last; ++k) node = &(*node)[*k];
            (*node)[*last] = v;
        };
        if (name) set({"name"}, *name);
        if (output_dir) set({"output_dir"}, *output_dir);
        if (corpus_dir) set({"corpus_dir"}, *corpus_dir);
        if (precision) set({"precision"}, *precision);
        if (seeds) set({"seeds"}, *seeds);
        if (tasks) {
            nlohmann::json list = nlohmann::json::array();
            if (*tasks != "none") {
                std::stringstream ss(*tasks);
                for (std::string t; std::getline(ss, t, ',');) list.push_back(t);
            }
            set({"pretrain", "tasks"}, list);
        }
        if (mix) set({"pretrain", "mix"}, *mix);
        if (pretrain_steps) set({"pretrain", "steps"}, *pretrain_steps);
        if (finetune_steps) set({"finetune", "steps"}, *finetune_steps);
        if (finetune_size) set({"finetune", "size"}, *finetune_size);
        if (subsample_seed) set({"finetune", "subsample_seed"}, *subsample_seed);
        if (vocab_size) set({"vocab", "size"}, *vocab_size);
        if (beam_size) set({"decode", "beam_size"}, *beam_size);
        if (max_len) set({"decode", "max_len"}, *max_len);
        if (test_limit) set({"decode", "test_limit"}, *test_limit);
        if (clip_norm) set({"train", "clip_norm"}, *clip_norm);
        if (dropout) set({"model", "dropout"}, *dropout);
        if (curve_sizes) set({"curve", "sizes"}, *curve_sizes);
        if (no_wall_time) set({"train", "log_wall_time"}, false);
        return plan_from_json(j);
    }
};

std::shared_ptr<const Vocabulary> vocab_or_null(const std::string& path) {
    return path.empty() ? nullptr : std::make_shared<const Vocabulary>(Vocabulary::load(path));
}

std::unique_ptr<std::ofstream> open_out(const std::string& path) {
    if (path.empty()) return nullptr;
    auto f = std::make_unique<std::ofstream>(path, std::ios::binary);
    if (!*f) throw Error("cannot write " + path);
    return f;
}

template <typename T>
void pretrain_cmd(const ExperimentPlan& plan, const std::string& vocab, std::uint64_t seed, const std::string& out,
                  const std::string& metrics) {
    const auto w = prepare_workspace(plan, plan_corpus(plan), vocab_or_null(vocab));
    auto params = initial_params<T>(plan, w, seed);
    auto log = open_out(metrics);
    pretrain_stage<T>(params, w, plan, seed, log.get());
    save_checkpoint(out, params);
}

template <typename T>
void finetune_cmd(const ExperimentPlan& plan, const std::string& vocab, const std::string& init, std::uint64_t seed,
                  const std::string& out, const std::string& metrics) {
    const auto w = prepare_workspace(plan, plan_corpus(plan), vocab_or_null(vocab));
    auto params = init.empty() ? initial_params<T>(plan, w, seed) : load_checkpoint<T>(init);
    if (params.config.vocab_size != static_cast<int>(w.vocab->size())) {
        throw Error("checkpoint vocabulary size does not match the vocabulary");
    }
    auto log = open_out(metrics);
    finetune_stage<T>(params, w, plan, seed, log.get());
    save_checkpoint(out, params);
}

template <typename T>
void generate_cmd(const ExperimentPlan& plan, const std::string& vocab_path, const std::string& model,
                  const std::string& split, const std::string& out) {
    const auto corpus = plan_corpus(plan);
    const auto& docs = split == "valid" ? corpus.cls_valid : corpus.cls_test;
    const auto vocab = Vocabulary::load(vocab_path);
    const auto params = load_checkpoint<T>(model);
    const auto gens = generate_stage<T>(params, vocab, docs, plan.decode.beam, plan.decode.test_limit);
    auto f = open_out(out);
    write_generations(f ? *f : std::cout, gens);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixed-lingual pre-training for cross-lingual summarization"};
    app.require_subcommand(1);
    PlanFlags flags;
    const StageLog log{true};

    auto* synth = app.add_subcommand("synth", "Write the synthetic corpus described by the plan");
    std::string synth_out;
    synth->add_option("--out", synth_out, "Corpus directory")->required();
    flags.add(synth);

    auto* build_vocab = app.add_subcommand("build-vocab", "Train the shared vocabulary on the plan's corpus");
    std::string vocab_out;
    build_vocab->add_option("--out", vocab_out, "Vocabulary file")->required();
    flags.add(build_vocab);

    std::string vocab_in, init, model, out, metrics, split = "test";
    std::uint64_t seed = 1;

    auto* pretrain = app.add_subcommand("pretrain", "Pre-train on the plan's mixed-lingual task mix");
    flags.add(pretrain);
    pretrain->add_option("--vocab", vocab_in, "Vocabulary file (trained afresh if omitted)")->check(CLI::ExistingFile);
    pretrain->add_option("--seed", seed, "Run seed");
    pretrain->add_option("--out", out, "Output checkpoint")->required();
    pretrain->add_option("--metrics", metrics, "Metrics log (JSON lines)");

    auto* finetune = app.add_subcommand("finetune", "Finetune on cross-lingual summarization pairs");
    flags.add(finetune);
    finetune->add_option("--vocab", vocab_in, "Vocabulary file (trained afresh if omitted)")->check(CLI::ExistingFile);
    finetune->add_option("--init", init, "Pre-trained checkpoint (random init if omitted)")->check(CLI::ExistingFile);
    finetune->add_option("--seed", seed, "Run seed");
    finetune->add_option("--out", out, "Output checkpoint")->required();
    finetune->add_option("--metrics", metrics, "Metrics log (JSON lines)");

    auto* generate = app.add_subcommand("generate", "Beam-search summaries for the test documents");
    flags.add(generate);
    generate->add_option("--vocab", vocab_in, "Vocabulary file")->required()->check(CLI::ExistingFile);
    generate->add_option("--model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    generate->add_option("--split", split, "test or valid")->check(CLI::IsMember({"test", "valid"}));
    generate->add_option("--out", out, "Generations file (stdout if omitted)");

    auto* score = app.add_subcommand("score", "ROUGE-1/2/L of a generations file");
    std::string gens_path, lang;
    score->add_option("generations", gens_path, "Generations file")->required()->check(CLI::ExistingFile);
    score->add_option("--lang", lang, "Summary language code")->required();
    score->add_option("--out", out, "Also write the scores as JSON");

    auto* ablate = app.add_subcommand("ablate", "Objective ablation over the plan's seeds");
    flags.add(ablate);
    std::vector<std::string> rows;
    ablate->add_option("--rows", rows, "Subset of rows, leading dash optional: full MS MT MLM,DAE all")->delimiter(' ');

    auto* curve = app.add_subcommand("curve", "Low-resource curve: pretrained vs scratch per finetune size");
    flags.add(curve);

    auto* run = app.add_subcommand("run", "Full pipeline for every seed in the plan");
    flags.add(run);

    auto* show = app.add_subcommand("plan", "Print the resolved plan");
    flags.add(show);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            write_synthetic(synth_out, generate_synthetic(flags.resolve().synthetic));
        } else if (build_vocab->parsed()) {
            const auto plan = flags.resolve();
            Vocabulary::train(vocabulary_corpus(plan_corpus(plan)), {plan.vocab_size, plan.vocab_seed, true})
                .save(vocab_out);
        } else if (pretrain->parsed()) {
            const auto plan = flags.resolve();
            plan.precision == "double" ? pretrain_cmd<double>(plan, vocab_in, seed, out, metrics)
                                       : pretrain_cmd<float>(plan, vocab_in, seed, out, metrics);
        } else if (finetune->parsed()) {
            const auto plan = flags.resolve();
            plan.precision == "double" ? finetune_cmd<double>(plan, vocab_in, init, seed, out, metrics)
                                       : finetune_cmd<float>(plan, vocab_in, init, seed, out, metrics);
        } else if (generate->parsed()) {
            const auto plan = flags.resolve();
            plan.precision == "double" ? generate_cmd<double>(plan, vocab_in, model, split, out)
                                       : generate_cmd<float>(plan, vocab_in, model, split, out);
        } else if (score->parsed()) {
            const auto r = score_generations(read_generations(gens_path), lang);
            write_rouge_report(std::cout, r);
            if (auto f = open_out(out)) *f << rouge_to_json(r).dump(2) << '\n';
        } else if (ablate->parsed()) {
            const auto result = run_ablation(flags.resolve(), rows, log);
            std::cout << detail::read_bytes(fs::path(flags.resolve().output_dir) / "ablation.tsv");
            for (const auto& r : result) {
                if (!r.error.empty()) return 1;
            }
        } else if (curve->parsed()) {
            const auto plan = flags.resolve();
            run_low_resource(plan, log);
            std::cout << detail::read_bytes(fs::path(plan.output_dir) / "curve.tsv");
        } else if (run->parsed()) {
            const auto r = run_pipeline(flags.resolve(), log);
            write_rouge_report(std::cout, r.mean);
        } else if (show->parsed()) {
            std::cout << plan_to_json(flags.resolve()).dump(2) << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "mixling: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
