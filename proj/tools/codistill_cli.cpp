// codistill: datagen, train, eval and caption commands.
//
// Exit codes: 0 success, 2 bad flags or invalid configuration (nothing is
// written), 1 I/O or runtime failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "codistill/config.hpp"
#include "codistill/datagen.hpp"
#include "codistill/error.hpp"
#include "codistill/eval.hpp"
#include "codistill/hash.hpp"
#include "codistill/trainer.hpp"

namespace fs = std::filesystem;
using namespace codistill;

namespace {

// Thrown for anything detected before side effects.
struct UsageError : Error {
    using Error::Error;
};

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void write_file(const fs::path& path, const std::string& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << data;
    if (!f) throw Error("cannot write " + path.string());
}

std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

void require_file(const std::string& path, const std::string& what) {
    if (!fs::is_regular_file(path)) throw Error(what + " not found: " + path);
}

// Flags shared by the commands that resolve a RunConfig.
struct ConfigFlags {
    std::string config_path;
    std::uint64_t seed = 0;
};

// Applies config file, then CODIST_SEED, to defaults. Flags are applied by the caller.
RunConfig base_config(const ConfigFlags& f) {
    RunConfig c;
    if (!f.config_path.empty()) {
        require_file(f.config_path, "config file");
        std::ifstream in(f.config_path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception&) {
            throw UsageError("malformed config: " + f.config_path);
        }
        try {
            apply_json(c, j);
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
    }
    if (const char* env = std::getenv("CODIST_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0') throw UsageError("CODIST_SEED must be an unsigned integer");
        c.train.seed = v;
    }
    return c;
}

template <class T>
void override_if(const CLI::Option* opt, T& dst, const T& value) {
    if (opt->count() > 0) dst = value;
}

void validate_or_usage(const RunConfig& c) {
    try {
        c.validate();
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
}

// ---------------------------------------------------------------- datagen

struct DatagenFlags {
    ConfigFlags cfg;
    std::size_t n = 1000;
    std::size_t test_n = 0;
    std::string out;
    NoiseConfig noise = NoiseConfig::noisy_default();
    CLI::Option *seed_opt, *pm, *pd, *ps, *pi, *sigma;
};

void add_datagen(CLI::App& app, DatagenFlags& f) {
    auto* cmd = app.add_subcommand("datagen", "Write clean/noisy/test JSONL corpora and split.json");
    cmd->add_option("--config", f.cfg.config_path, "JSON run config (noise and train.seed are used)");
    cmd->add_option("--n", f.n, "Records per training corpus (clean and noisy)")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    cmd->add_option("--test-n", f.test_n, "Clean test records (0: n/5, at least 1)")->capture_default_str();
    f.seed_opt = cmd->add_option("--seed", f.cfg.seed, "Generation seed")->capture_default_str();
    cmd->add_option("--out", f.out, "Output directory")->required();
    const auto prob = CLI::Range(0.0, 1.0);
    f.pm = cmd->add_option("--p-mismatch", f.noise.p_mismatch, "Caption swap probability")
               ->capture_default_str()
               ->check(prob);
    f.pd = cmd->add_option("--p-delete", f.noise.p_delete, "Per-word deletion probability")
               ->capture_default_str()
               ->check(prob);
    f.ps = cmd->add_option("--p-shuffle", f.noise.p_shuffle, "Word shuffle probability")
               ->capture_default_str()
               ->check(prob);
    f.pi = cmd->add_option("--p-insert", f.noise.p_insert, "Random word insertion probability")
               ->capture_default_str()
               ->check(prob);
    f.sigma = cmd->add_option("--sigma", f.noise.sigma_feature, "Feature jitter standard deviation")
                  ->capture_default_str()
                  ->check(CLI::NonNegativeNumber);
}

int run_datagen(const DatagenFlags& f) {
    RunConfig c = base_config(f.cfg);
    override_if(f.seed_opt, c.train.seed, f.cfg.seed);
    override_if(f.pm, c.noise.p_mismatch, f.noise.p_mismatch);
    override_if(f.pd, c.noise.p_delete, f.noise.p_delete);
    override_if(f.ps, c.noise.p_shuffle, f.noise.p_shuffle);
    override_if(f.pi, c.noise.p_insert, f.noise.p_insert);
    override_if(f.sigma, c.noise.sigma_feature, f.noise.sigma_feature);
    try {
        c.noise.validate();
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    const std::size_t test_n = f.test_n > 0 ? f.test_n : std::max<std::size_t>(1, f.n / 5);
    const std::uint64_t seed = c.train.seed;

    NoiseConfig clean_noise = NoiseConfig::clean();
    clean_noise.sigma_feature = c.noise.sigma_feature;
    const auto clean = generate_corpus(f.n, clean_noise, seed, 0);
    const auto noisy = generate_corpus(f.n, c.noise, seed + 1, static_cast<std::int64_t>(f.n));
    const auto test = generate_corpus(test_n, clean_noise, seed + 2, static_cast<std::int64_t>(2 * f.n));

    const fs::path out(f.out);
    fs::create_directories(out);
    write_corpus(clean, (out / "clean.jsonl").string());
    write_corpus(noisy, (out / "noisy.jsonl").string());
    write_corpus(test, (out / "test.jsonl").string());

    std::size_t n_noisy = 0;
    for (const auto& r : noisy) n_noisy += r.noisy;
    nlohmann::json split;
    split["seed"] = seed;
    split["noise"] = to_json(c)["noise"];
    auto entry = [&](const char* name, std::size_t count, std::size_t first) {
        return nlohmann::json{{"file", name},
                              {"records", count},
                              {"first_id", first},
                              {"fnv1a", hex64(fnv1a_file((out / name).string()))}};
    };
    split["train"] = {{"clean", entry("clean.jsonl", f.n, 0)}, {"noisy", entry("noisy.jsonl", f.n, f.n)}};
    split["train"]["noisy"]["corrupted"] = n_noisy;
    split["test"] = entry("test.jsonl", test_n, 2 * f.n);
    write_file(out / "split.json", json_text(split));
    std::printf("wrote %zu clean, %zu noisy (%zu corrupted), %zu test records to %s\n", f.n, f.n, n_noisy, test_n,
                f.out.c_str());
    return 0;
}

// ---------------------------------------------------------------- train

struct TrainFlags {
    ConfigFlags cfg;
    std::string clean, noisy, test, out;
    bool force = false;
    RunConfig d;  // flag storage, seeded with defaults for --help
    std::string alternation = "per_batch";
    std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> overrides;
};

void add_train(CLI::App& app, TrainFlags& f) {
    auto* cmd = app.add_subcommand("train", "Warm-start both models, then co-distill; writes a run directory");
    cmd->add_option("--config", f.cfg.config_path, "JSON run config");
    cmd->add_option("--clean", f.clean, "Clean (teacher) corpus JSONL")->required();
    cmd->add_option("--noisy", f.noisy, "Noisy (student) corpus JSONL")->required();
    cmd->add_option("--test", f.test, "Optional test corpus; final models are evaluated into eval/");
    cmd->add_option("--out", f.out, "Run directory")->required();
    cmd->add_flag("--force", f.force, "Replace an existing non-empty run directory");

    auto bind = [&](const std::string& name, auto& field, const std::string& help, auto setter) {
        auto* o = cmd->add_option(name, field, help)->capture_default_str();
        f.overrides.emplace_back(o, setter);
        return o;
    };
    RunConfig& d = f.d;
    bind("--seed", d.train.seed, "Seed for init, batching and warm starts",
         [&](RunConfig& c) { c.train.seed = d.train.seed; });
    bind("--steps", d.train.steps, "Co-distillation steps", [&](RunConfig& c) { c.train.steps = d.train.steps; });
    bind("--batch-size", d.train.batch_size, "Samples per stream update",
         [&](RunConfig& c) { c.train.batch_size = d.train.batch_size; });
    bind("--teacher-pretrain-steps", d.train.teacher_pretrain_steps, "Teacher warm-start steps on the clean corpus",
         [&](RunConfig& c) { c.train.teacher_pretrain_steps = d.train.teacher_pretrain_steps; });
    bind("--student-pretrain-steps", d.train.student_pretrain_steps, "Student warm-start steps on the noisy corpus",
         [&](RunConfig& c) { c.train.student_pretrain_steps = d.train.student_pretrain_steps; });
    bind("--alternation", f.alternation, "per_batch or per_epoch", [&](RunConfig& c) {
        c.train.alternation = f.alternation == "per_epoch" ? Alternation::PerEpoch : Alternation::PerBatch;
    })->check(CLI::IsMember({"per_batch", "per_epoch"}));
    bind("--lr", d.train.adam.lr, "Adam learning rate", [&](RunConfig& c) { c.train.adam.lr = d.train.adam.lr; });
    bind("--beta1", d.train.adam.beta1, "Adam beta1", [&](RunConfig& c) { c.train.adam.beta1 = d.train.adam.beta1; });
    bind("--beta2", d.train.adam.beta2, "Adam beta2", [&](RunConfig& c) { c.train.adam.beta2 = d.train.adam.beta2; });
    bind("--eps", d.train.adam.eps, "Adam epsilon", [&](RunConfig& c) { c.train.adam.eps = d.train.adam.eps; });
    bind("--warmup-steps", d.train.adam.warmup_steps, "Linear learning-rate warmup",
         [&](RunConfig& c) { c.train.adam.warmup_steps = d.train.adam.warmup_steps; });
    bind("--checkpoint-every", d.train.checkpoint_every, "Checkpoint period in steps (0: start and end only)",
         [&](RunConfig& c) { c.train.checkpoint_every = d.train.checkpoint_every; });
    bind("--max-decode-len", d.train.max_decode_len, "Greedy decode length cap",
         [&](RunConfig& c) { c.train.max_decode_len = d.train.max_decode_len; });
    bind("--temperature", d.train.temperature, "Distillation temperature",
         [&](RunConfig& c) { c.train.temperature = d.train.temperature; });
    bind("--wall-clock", d.train.record_wall_time, "Record wall_ms in metrics.csv (breaks byte reproducibility)",
         [&](RunConfig& c) { c.train.record_wall_time = d.train.record_wall_time; });
    bind("--layers", d.model.layers, "Encoder and decoder layers",
         [&](RunConfig& c) { c.model.layers = d.model.layers; });
    bind("--embed-dim", d.model.embed_dim, "Model width", [&](RunConfig& c) { c.model.embed_dim = d.model.embed_dim; });
    bind("--heads", d.model.heads, "Attention heads", [&](RunConfig& c) { c.model.heads = d.model.heads; });
    bind("--ffn-dim", d.model.ffn_dim, "Feed-forward width", [&](RunConfig& c) { c.model.ffn_dim = d.model.ffn_dim; });
    bind("--max-positions", d.model.max_positions, "Decoder positions",
         [&](RunConfig& c) { c.model.max_positions = d.model.max_positions; });
    bind("--vocab-size", d.vocab_target, "Tokenizer target size", [&](RunConfig& c) { c.vocab_target = d.vocab_target; });
    bind("--bridge", d.bridge.kind, "hashed or remote", [&](RunConfig& c) { c.bridge.kind = d.bridge.kind; })
        ->check(CLI::IsMember({"hashed", "remote"}));
    bind("--bridge-dim", d.bridge.dim, "Caption embedding dimension",
         [&](RunConfig& c) { c.bridge.dim = d.bridge.dim; });
    bind("--bridge-endpoint", d.bridge.endpoint, "Remote embedding service base URL",
         [&](RunConfig& c) { c.bridge.endpoint = d.bridge.endpoint; });
    bind("--bridge-timeout-ms", d.bridge.timeout_ms, "Remote request timeout",
         [&](RunConfig& c) { c.bridge.timeout_ms = d.bridge.timeout_ms; });
}

std::vector<StreamSample> to_samples(const std::vector<CorpusRecord>& recs, const Vocab& vocab, Origin origin) {
    std::vector<StreamSample> out;
    out.reserve(recs.size());
    for (const auto& r : recs)
        out.push_back(make_sample(std::to_string(r.id), r.features, r.caption, vocab, origin, r.noisy));
    return out;
}

std::size_t feature_width(const std::vector<CorpusRecord>& recs, const std::string& path, std::size_t expect) {
    for (const auto& r : recs) {
        const std::size_t w = r.features.regions.cols();
        if (expect == 0) expect = w;
        if (w != expect) throw Error(path + ": record " + std::to_string(r.id) + " has feature width " +
                                     std::to_string(w) + ", expected " + std::to_string(expect));
    }
    return expect;
}

int run_train(TrainFlags& f) {
    RunConfig c = base_config(f.cfg);
    for (auto& [opt, apply] : f.overrides)
        if (opt->count() > 0) apply(c);
    validate_or_usage(c);

    const fs::path out(f.out);
    if (fs::exists(out) && !fs::is_directory(out)) throw UsageError("run directory is a file: " + f.out);
    if (fs::is_directory(out) && !fs::is_empty(out) && !f.force)
        throw UsageError("run directory not empty (use --force): " + f.out);
    require_file(f.clean, "clean corpus");
    require_file(f.noisy, "noisy corpus");
    if (!f.test.empty()) require_file(f.test, "test corpus");

    const auto clean_recs = read_corpus(f.clean);
    const auto noisy_recs = read_corpus(f.noisy);
    if (clean_recs.empty()) throw Error("clean corpus is empty: " + f.clean);
    if (noisy_recs.empty()) throw Error("noisy corpus is empty: " + f.noisy);
    std::vector<CorpusRecord> test_recs;
    if (!f.test.empty()) test_recs = read_corpus(f.test);
    const std::size_t width = feature_width(noisy_recs, f.noisy, feature_width(clean_recs, f.clean, 0));
    if (!test_recs.empty()) feature_width(test_recs, f.test, width);

    std::vector<std::vector<std::string>> corpora(2);
    for (const auto& r : clean_recs) corpora[0].push_back(r.caption);
    for (const auto& r : noisy_recs) corpora[1].push_back(r.caption);
    auto vocab = std::make_shared<const Vocab>(train_vocab(corpora, c.vocab_target));
    c.model.vocab_size = vocab->size();
    c.model.feature_dim = width;
    validate_or_usage(c);
    const auto bridge = make_bridge(c.bridge, vocab);
    const auto clean = to_samples(clean_recs, *vocab, Origin::Clean);
    const auto noisy = to_samples(noisy_recs, *vocab, Origin::Noisy);

    // side effects start here
    if (f.force && fs::exists(out)) fs::remove_all(out);
    fs::create_directories(out / "checkpoints");
    fs::create_directories(out / "eval");
    const nlohmann::json config_json = to_json(c);
    write_file(out / "config.json", json_text(config_json));
    vocab->save((out / "vocab.txt").string());

    std::ofstream metrics(out / "metrics.csv", std::ios::binary);
    std::ofstream samples(out / "samples.csv", std::ios::binary);
    if (!metrics || !samples) throw Error("cannot write metrics in " + f.out);
    write_metrics_header(metrics);
    write_samples_header(samples);

    nlohmann::json ckpts = nlohmann::json::array();
    TrainHooks hooks;
    hooks.on_checkpoint = [&](std::size_t step, const TrainState& st) {
        for (const auto& [role, params] : {std::pair<const char*, const ModelParams*>{"student", &st.student},
                                           std::pair<const char*, const ModelParams*>{"teacher", &st.teacher}}) {
            const std::string name = std::string(role) + "_" + std::to_string(step) + ".ckpt";
            const std::string bytes = checkpoint_bytes(*params);
            write_file(out / "checkpoints" / name, bytes);
            ckpts.push_back({{"file", "checkpoints/" + name}, {"step", step}, {"fnv1a", hex64(fnv1a(bytes))}});
        }
        std::fprintf(stderr, "checkpoint at step %zu\n", step);
    };
    hooks.on_metrics = [&](const StreamMetrics& m) {
        write_metrics_row(metrics, m);
        write_samples_rows(samples, m);
        if (m.stream == Stream::Diversity && (m.step % 100 == 0 || m.step == c.train.steps))
            std::fprintf(stderr, "step %zu %s loss %.4f w_mean %.3f\n", m.step, stream_name(m.stream), m.loss,
                         m.w_mean);
    };
    hooks.on_pretrain = [](std::size_t step, double loss) {
        if (step % 100 == 0) std::fprintf(stderr, "warm start step %zu loss %.4f\n", step, loss);
    };

    const auto result = train_codistill(c.model, c.train, noisy, clean, *bridge, *vocab, hooks);
    metrics.close();
    samples.close();
    if (!metrics || !samples) throw Error("cannot write metrics in " + f.out);

    if (!test_recs.empty()) {
        for (const auto& [role, params] : {std::pair<const char*, const ModelParams*>{"student", &result.state.student},
                                           std::pair<const char*, const ModelParams*>{"teacher", &result.state.teacher}}) {
            const auto report = evaluate_model(*params, test_recs, *bridge, *vocab, c.train.max_decode_len);
            write_file(out / "eval" / (std::string(role) + "_final.json"), json_text(report.to_json()));
            std::printf("%s %s\n", role, report.summary().c_str());
        }
    }

    nlohmann::json manifest;
    manifest["config"] = config_json;
    manifest["seed"] = c.train.seed;
    manifest["vocab_fnv1a"] = hex64(fnv1a(vocab->serialize()));
    manifest["datasets"] = {{"clean", {{"path", f.clean}, {"fnv1a", hex64(fnv1a_file(f.clean))}}},
                            {"noisy", {{"path", f.noisy}, {"fnv1a", hex64(fnv1a_file(f.noisy))}}}};
    if (!f.test.empty()) manifest["datasets"]["test"] = {{"path", f.test}, {"fnv1a", hex64(fnv1a_file(f.test))}};
    manifest["checkpoints"] = ckpts;
    manifest["metrics_fnv1a"] = hex64(fnv1a_file((out / "metrics.csv").string()));
    write_file(out / "manifest.json", json_text(manifest));
    std::printf("run written to %s\n", f.out.c_str());
    return 0;
}

// ---------------------------------------------------------------- eval / caption

struct LoadedRun {
    RunConfig config;
    std::shared_ptr<const Vocab> vocab;
    ModelParams params;
};

fs::path default_run_dir(const std::string& checkpoint) {
    return fs::absolute(checkpoint).parent_path().parent_path();
}

LoadedRun load_run(const std::string& run_dir, const std::string& checkpoint) {
    const fs::path dir(run_dir);
    require_file((dir / "config.json").string(), "run config");
    require_file((dir / "vocab.txt").string(), "run vocabulary");
    require_file(checkpoint, "checkpoint");
    LoadedRun r;
    r.config = load_run_config((dir / "config.json").string());
    r.vocab = std::make_shared<const Vocab>(Vocab::load((dir / "vocab.txt").string()));
    r.params = load_checkpoint(checkpoint, r.config.model);
    return r;
}

struct EvalFlags {
    std::string checkpoint, corpus, run_dir, out;
    std::size_t max_len = 0;
};

void add_eval(CLI::App& app, EvalFlags& f) {
    auto* cmd = app.add_subcommand("eval", "BLEU-4 and coherence AUC of a checkpoint on a corpus");
    cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint file")->required();
    cmd->add_option("--corpus", f.corpus, "Evaluation corpus JSONL")->required();
    cmd->add_option("--run-dir", f.run_dir, "Run directory (default: two levels above the checkpoint)");
    cmd->add_option("--out", f.out, "Report path (default: <run-dir>/eval/<checkpoint>.<corpus>.json)");
    cmd->add_option("--max-decode-len", f.max_len, "Decode length cap (0: from run config)")->capture_default_str();
}

int run_eval(const EvalFlags& f) {
    const std::string run_dir = f.run_dir.empty() ? default_run_dir(f.checkpoint).string() : f.run_dir;
    require_file(f.corpus, "corpus");
    const LoadedRun run = load_run(run_dir, f.checkpoint);
    const auto corpus = read_corpus(f.corpus);
    const auto bridge = make_bridge(run.config.bridge, run.vocab);
    const std::size_t max_len = f.max_len > 0 ? f.max_len : run.config.train.max_decode_len;
    if (max_len + 1 > run.config.model.max_positions) throw UsageError("--max-decode-len exceeds model positions");
    const auto report = evaluate_model(run.params, corpus, *bridge, *run.vocab, max_len);
    const fs::path out = f.out.empty() ? fs::path(run_dir) / "eval" /
                                             (fs::path(f.checkpoint).stem().string() + "." +
                                              fs::path(f.corpus).stem().string() + ".json")
                                       : fs::path(f.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_file(out, json_text(report.to_json()));
    std::printf("%s\n", report.summary().c_str());
    return 0;
}

struct CaptionFlags {
    std::string checkpoint, corpus, run_dir;
    std::size_t count = 10;
};

void add_caption(CLI::App& app, CaptionFlags& f) {
    auto* cmd = app.add_subcommand("caption", "Print ground truth and greedy captions for corpus records");
    cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint file")->required();
    cmd->add_option("--corpus", f.corpus, "Corpus JSONL providing features")->required();
    cmd->add_option("--run-dir", f.run_dir, "Run directory (default: two levels above the checkpoint)");
    cmd->add_option("--count", f.count, "Records to caption")->capture_default_str();
}

int run_caption(const CaptionFlags& f) {
    const std::string run_dir = f.run_dir.empty() ? default_run_dir(f.checkpoint).string() : f.run_dir;
    require_file(f.corpus, "corpus");
    const LoadedRun run = load_run(run_dir, f.checkpoint);
    const auto corpus = read_corpus(f.corpus);
    std::printf("id\tground_truth\tcaption\n");
    for (std::size_t i = 0; i < std::min(f.count, corpus.size()); ++i) {
        const auto& r = corpus[i];
        const auto tokens = greedy_decode(run.params, r.features, run.config.train.max_decode_len);
        std::printf("%lld\t%s\t%s\n", static_cast<long long>(r.id), r.caption.c_str(),
                    run.vocab->decode(tokens).c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cooperative distillation for captioning with noisy labels"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.set_help_all_flag("--help-all", "Help for every command");
    DatagenFlags datagen;
    TrainFlags train;
    EvalFlags eval;
    CaptionFlags caption;
    add_datagen(app, datagen);
    add_train(app, train);
    add_eval(app, eval);
    add_caption(app, caption);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (app.got_subcommand("datagen")) return run_datagen(datagen);
        if (app.got_subcommand("train")) return run_train(train);
        if (app.got_subcommand("eval")) return run_eval(eval);
        if (app.got_subcommand("caption")) return run_caption(caption);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
    return kExitUsage;
}
