#include "codistill/config.hpp"

#include <fstream>

#include "codistill/error.hpp"

namespace codistill {

namespace {

const char* alternation_name(Alternation a) { return a == Alternation::PerBatch ? "per_batch" : "per_epoch"; }

Alternation parse_alternation(const std::string& s) {
    if (s == "per_batch") return Alternation::PerBatch;
    if (s == "per_epoch") return Alternation::PerEpoch;
    throw Error("alternation must be per_batch or per_epoch");
}

template <class T>
void take(const nlohmann::json& obj, const char* key, T& dst) {
    if (!obj.contains(key)) return;
    try {
        dst = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw Error(std::string("config: wrong type for '") + key + "'");
    }
}

void reject_unknown(const nlohmann::json& obj, std::initializer_list<const char*> known, const std::string& where) {
    if (!obj.is_object()) throw Error("config: '" + where + "' must be an object");
    for (const auto& [k, v] : obj.items()) {
        bool ok = false;
        for (const char* name : known) ok = ok || k == name;
        if (!ok) throw Error("config: unknown key '" + where + (where.empty() ? "" : ".") + k + "'");
    }
}

}  // namespace

void BridgeSettings::validate() const {
    if (kind != "hashed" && kind != "remote") throw Error("bridge.kind must be hashed or remote");
    if (dim == 0) throw Error("bridge.dim must be positive");
    if (timeout_ms <= 0) throw Error("bridge.timeout_ms must be positive");
    if (kind == "remote" && endpoint.empty()) throw Error("bridge.endpoint is required for a remote bridge");
    if (max_in_flight == 0) throw Error("bridge.max_in_flight must be positive");
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    noise.validate();
    bridge.validate();
    if (train.max_decode_len + 1 > model.max_positions) throw Error("max_decode_len must be below max_positions");
    if (vocab_target <= kNumSpecials) throw Error("vocab_target too small");
}

nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["model"] = {{"layers", c.model.layers},         {"embed_dim", c.model.embed_dim},
                  {"heads", c.model.heads},           {"ffn_dim", c.model.ffn_dim},
                  {"vocab_size", c.model.vocab_size}, {"max_positions", c.model.max_positions},
                  {"feature_dim", c.model.feature_dim}};
    j["train"] = {{"batch_size", c.train.batch_size},
                  {"steps", c.train.steps},
                  {"teacher_pretrain_steps", c.train.teacher_pretrain_steps},
                  {"student_pretrain_steps", c.train.student_pretrain_steps},
                  {"alternation", alternation_name(c.train.alternation)},
                  {"adam",
                   {{"lr", c.train.adam.lr},
                    {"beta1", c.train.adam.beta1},
                    {"beta2", c.train.adam.beta2},
                    {"eps", c.train.adam.eps},
                    {"warmup_steps", c.train.adam.warmup_steps}}},
                  {"seed", c.train.seed},
                  {"checkpoint_every", c.train.checkpoint_every},
                  {"max_decode_len", c.train.max_decode_len},
                  {"temperature", c.train.temperature},
                  {"record_wall_time", c.train.record_wall_time}};
    j["noise"] = {{"p_mismatch", c.noise.p_mismatch},
                  {"p_delete", c.noise.p_delete},
                  {"p_shuffle", c.noise.p_shuffle},
                  {"p_insert", c.noise.p_insert},
                  {"sigma_feature", c.noise.sigma_feature}};
    j["bridge"] = {{"kind", c.bridge.kind},
                   {"dim", c.bridge.dim},
                   {"endpoint", c.bridge.endpoint},
                   {"timeout_ms", c.bridge.timeout_ms},
                   {"max_in_flight", c.bridge.max_in_flight}};
    j["tokenizer"] = {{"target_size", c.vocab_target}};
    return j;
}

void apply_json(RunConfig& c, const nlohmann::json& j) {
    reject_unknown(j, {"model", "train", "noise", "bridge", "tokenizer"}, "");
    if (j.contains("model")) {
        const auto& m = j["model"];
        reject_unknown(m, {"layers", "embed_dim", "heads", "ffn_dim", "vocab_size", "max_positions", "feature_dim"},
                       "model");
        take(m, "layers", c.model.layers);
        take(m, "embed_dim", c.model.embed_dim);
        take(m, "heads", c.model.heads);
        take(m, "ffn_dim", c.model.ffn_dim);
        take(m, "vocab_size", c.model.vocab_size);
        take(m, "max_positions", c.model.max_positions);
        take(m, "feature_dim", c.model.feature_dim);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        reject_unknown(t,
                       {"batch_size", "steps", "teacher_pretrain_steps", "student_pretrain_steps", "alternation",
                        "adam", "seed", "checkpoint_every", "max_decode_len", "temperature", "record_wall_time"},
                       "train");
        take(t, "batch_size", c.train.batch_size);
        take(t, "steps", c.train.steps);
        take(t, "teacher_pretrain_steps", c.train.teacher_pretrain_steps);
        take(t, "student_pretrain_steps", c.train.student_pretrain_steps);
        if (t.contains("alternation")) {
            std::string a;
            take(t, "alternation", a);
            c.train.alternation = parse_alternation(a);
        }
        if (t.contains("adam")) {
            const auto& a = t["adam"];
            reject_unknown(a, {"lr", "beta1", "beta2", "eps", "warmup_steps"}, "train.adam");
            take(a, "lr", c.train.adam.lr);
            take(a, "beta1", c.train.adam.beta1);
            take(a, "beta2", c.train.adam.beta2);
            take(a, "eps", c.train.adam.eps);
            take(a, "warmup_steps", c.train.adam.warmup_steps);
        }
        take(t, "seed", c.train.seed);
        take(t, "checkpoint_every", c.train.checkpoint_every);
        take(t, "max_decode_len", c.train.max_decode_len);
        take(t, "temperature", c.train.temperature);
        take(t, "record_wall_time", c.train.record_wall_time);
    }
    if (j.contains("noise")) {
        const auto& n = j["noise"];
        reject_unknown(n, {"p_mismatch", "p_delete", "p_shuffle", "p_insert", "sigma_feature"}, "noise");
        take(n, "p_mismatch", c.noise.p_mismatch);
        take(n, "p_delete", c.noise.p_delete);
        take(n, "p_shuffle", c.noise.p_shuffle);
        take(n, "p_insert", c.noise.p_insert);
        take(n, "sigma_feature", c.noise.sigma_feature);
    }
    if (j.contains("bridge")) {
        const auto& b = j["bridge"];
        reject_unknown(b, {"kind", "dim", "endpoint", "timeout_ms", "max_in_flight"}, "bridge");
        take(b, "kind", c.bridge.kind);
        take(b, "dim", c.bridge.dim);
        take(b, "endpoint", c.bridge.endpoint);
        take(b, "timeout_ms", c.bridge.timeout_ms);
        take(b, "max_in_flight", c.bridge.max_in_flight);
    }
    if (j.contains("tokenizer")) {
        reject_unknown(j["tokenizer"], {"target_size"}, "tokenizer");
        take(j["tokenizer"], "target_size", c.vocab_target);
    }
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read config: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception&) {
        throw Error("malformed config: " + path);
    }
    RunConfig c;
    apply_json(c, j);
    return c;
}

std::unique_ptr<Embedder> make_bridge(const BridgeSettings& s, std::shared_ptr<const Vocab> vocab) {
    s.validate();
    if (s.kind == "hashed") return std::make_unique<HashedEmbedder>(s.dim, std::move(vocab));
    RemoteBridgeConfig rc;
    rc.endpoint = s.endpoint;
    rc.dim = s.dim;
    rc.timeout = std::chrono::milliseconds(s.timeout_ms);
    rc.max_in_flight = s.max_in_flight;
    return std::make_unique<RemoteEmbedder>(rc);
}

}  // namespace codistill
