#include "codistill/semantic_bridge.hpp"

#include <algorithm>
#include <cmath>
#include <regex>
#include <semaphore>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "codistill/error.hpp"
#include "codistill/hash.hpp"

namespace codistill {

namespace {

CaptionEmbedding normalized(std::vector<double> v) {
    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    CaptionEmbedding e;
    if (norm2 == 0.0) {
        e.vector = std::move(v);
        return e;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v) x *= inv;
    e.vector = std::move(v);
    e.is_zero = false;
    return e;
}

bool blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

}  // namespace

double coherence_weight(const CaptionEmbedding& a, const CaptionEmbedding& b) {
    if (a.is_zero || b.is_zero || a.vector.size() != b.vector.size()) return 0.5;
    double dot = 0.0;
    for (std::size_t i = 0; i < a.vector.size(); ++i) dot += a.vector[i] * b.vector[i];
    return std::clamp((dot + 1.0) / 2.0, 0.0, 1.0);
}

CaptionEmbedding Embedder::embed(std::string_view text) const {
    const std::string s(text);
    return embed_batch(std::span(&s, 1)).front();
}

double Embedder::coherence(std::string_view a, std::string_view b) const {
    const std::string pair[] = {std::string(a), std::string(b)};
    const auto e = embed_batch(pair);
    return coherence_weight(e[0], e[1]);
}

HashedEmbedder::HashedEmbedder(std::size_t dim, std::shared_ptr<const Vocab> vocab)
    : dim_(dim), vocab_(std::move(vocab)) {
    if (dim_ == 0) throw Error("bridge dimension must be positive");
}

std::vector<std::string> HashedEmbedder::units(std::string_view text) const {
    std::vector<std::string> toks;
    if (vocab_) {
        for (TokenId id : vocab_->encode(text)) toks.push_back(vocab_->token(id));
    } else {
        const std::string norm = normalize_text(text);
        std::size_t i = 0;
        while (i < norm.size()) {
            const std::size_t j = std::min(norm.find(' ', i), norm.size());
            toks.emplace_back(norm.substr(i, j - i));
            i = j + 1;
        }
    }
    std::vector<std::string> out = toks;
    for (std::size_t i = 0; i + 1 < toks.size(); ++i) out.push_back(toks[i] + '\x1f' + toks[i + 1]);
    return out;
}

CaptionEmbedding HashedEmbedder::embed_one(std::string_view text) const {
    std::vector<double> v(dim_, 0.0);
    for (const auto& u : units(text)) {
        const std::uint64_t idx = fnv1a(u, kFnvOffset ^ kIndexSeed) % dim_;
        const double sign = (fnv1a(u, kFnvOffset ^ kSignSeed) & 1u) ? 1.0 : -1.0;
        v[idx] += sign;
    }
    return normalized(std::move(v));
}

std::vector<CaptionEmbedding> HashedEmbedder::embed_batch(std::span<const std::string> texts) const {
    std::vector<CaptionEmbedding> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
}

namespace {

struct Endpoint {
    std::string host;  // scheme://host:port
    std::string path;
};

Endpoint parse_endpoint(const std::string& endpoint) {
    const auto scheme = endpoint.find("://");
    const std::size_t host_start = scheme == std::string::npos ? 0 : scheme + 3;
    const auto slash = endpoint.find('/', host_start);
    Endpoint e;
    e.host = endpoint.substr(0, slash);
    std::string base = slash == std::string::npos ? "" : endpoint.substr(slash);
    while (!base.empty() && base.back() == '/') base.pop_back();
    e.path = base + "/embed";
    return e;
}

// Non-standard JSON number literals some services emit; mapped to null so the
// offending vector is reported rather than the whole body.
std::string null_non_finite(const std::string& body) {
    static const std::regex token(R"((-?Infinity|NaN)(?=\s*[,\]]))");
    return std::regex_replace(body, token, "null");
}

}  // namespace

std::vector<CaptionEmbedding> remote_embed_batch(const RemoteBridgeConfig& config,
                                                 std::span<const std::string> texts) {
    std::vector<CaptionEmbedding> out(texts.size());
    std::vector<std::size_t> sent;
    nlohmann::json body;
    body["texts"] = nlohmann::json::array();
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (blank(texts[i])) {
            out[i].vector.assign(config.dim, 0.0);
            continue;
        }
        sent.push_back(i);
        body["texts"].push_back(texts[i]);
    }
    if (sent.empty()) return out;

    const Endpoint ep = parse_endpoint(config.endpoint);
    const std::string payload = body.dump();
    httplib::Result res{nullptr, httplib::Error::Unknown};
    for (int attempt = 0; attempt < std::max(1, config.attempts); ++attempt) {
        if (attempt > 0) std::this_thread::sleep_for(config.backoff_base * (1 << (attempt - 1)));
        httplib::Client client(ep.host);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config.timeout);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config.timeout - secs);
        client.set_connection_timeout(secs.count(), usecs.count());
        client.set_read_timeout(secs.count(), usecs.count());
        client.set_write_timeout(secs.count(), usecs.count());
        res = client.Post(ep.path, payload, "application/json");
        if (res && res->status == 200) break;
    }
    if (!res || res->status != 200) throw Error("bridge unavailable");

    nlohmann::json reply;
    try {
        reply = nlohmann::json::parse(null_non_finite(res->body));
    } catch (const nlohmann::json::exception&) {
        throw Error("bridge returned malformed response");
    }
    if (!reply.is_object() || !reply.contains("vectors") || !reply["vectors"].is_array() ||
        reply["vectors"].size() != sent.size())
        throw Error("bridge returned malformed response");

    for (std::size_t k = 0; k < sent.size(); ++k) {
        const auto& jv = reply["vectors"][k];
        if (!jv.is_array()) throw Error("bridge returned invalid vector");
        if (jv.size() != config.dim) throw Error("bridge dimension mismatch");
        std::vector<double> v;
        v.reserve(jv.size());
        for (const auto& x : jv) {
            if (!x.is_number()) throw Error("bridge returned invalid vector");  // includes NaN / Infinity
            const double d = x.get<double>();
            if (!std::isfinite(d)) throw Error("bridge returned invalid vector");
            v.push_back(d);
        }
        out[sent[k]] = normalized(std::move(v));
    }
    return out;
}

struct RemoteEmbedder::Limiter {
    explicit Limiter(std::size_t n) : slots(static_cast<std::ptrdiff_t>(n)) {}
    std::counting_semaphore<1024> slots;
};

RemoteEmbedder::RemoteEmbedder(RemoteBridgeConfig config)
    : config_(std::move(config)),
      limiter_(std::make_unique<Limiter>(std::clamp<std::size_t>(config_.max_in_flight, 1, 1024))) {
    if (config_.endpoint.empty()) throw Error("bridge endpoint not configured");
}

RemoteEmbedder::~RemoteEmbedder() = default;

std::vector<CaptionEmbedding> RemoteEmbedder::embed_batch(std::span<const std::string> texts) const {
    limiter_->slots.acquire();
    try {
        auto out = remote_embed_batch(config_, texts);
        limiter_->slots.release();
        return out;
    } catch (...) {
        limiter_->slots.release();
        throw;
    }
}

}  // namespace codistill
