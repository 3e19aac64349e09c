#include "codistill/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "codistill/error.hpp"
#include "codistill/hash.hpp"

namespace codistill {

namespace {

// Tensor order: feature projection, encoder layers, encoder final norm,
// token/position embeddings, decoder layers, decoder final norm, output head.
namespace layout {
enum Enc : std::size_t { kEncLn1G, kEncLn1B, kEncWq, kEncWk, kEncWv, kEncWo, kEncLn2G, kEncLn2B, kEncW1, kEncB1, kEncW2, kEncB2, kEncCount };
enum Dec : std::size_t {
    kDecLn1G, kDecLn1B, kSelfWq, kSelfWk, kSelfWv, kSelfWo,
    kDecLn2G, kDecLn2B, kCrossWq, kCrossWk, kCrossWv, kCrossWo,
    kDecLn3G, kDecLn3B, kDecW1, kDecB1, kDecW2, kDecB2, kDecCount
};

constexpr std::size_t kFeatW = 0, kFeatB = 1;
constexpr std::size_t enc(std::size_t l) { return 2 + kEncCount * l; }
constexpr std::size_t enc_ln_g(std::size_t L) { return 2 + kEncCount * L; }
constexpr std::size_t tok_emb(std::size_t L) { return enc_ln_g(L) + 2; }
constexpr std::size_t pos_emb(std::size_t L) { return tok_emb(L) + 1; }
constexpr std::size_t dec(std::size_t L, std::size_t l) { return pos_emb(L) + 1 + kDecCount * l; }
constexpr std::size_t dec_ln_g(std::size_t L) { return dec(L, L); }
constexpr std::size_t out_w(std::size_t L) { return dec_ln_g(L) + 2; }
constexpr std::size_t out_b(std::size_t L) { return out_w(L) + 1; }
}  // namespace layout

enum class Kind { Weight, Bias, Gain };

struct Spec {
    std::string name;
    std::size_t rows, cols;
    Kind kind;
};

std::vector<Spec> param_specs(const ModelConfig& c) {
    const std::size_t D = c.embed_dim, F = c.ffn_dim;
    std::vector<Spec> s;
    s.push_back({"feat_proj.w", c.feature_dim, D, Kind::Weight});
    s.push_back({"feat_proj.b", 1, D, Kind::Bias});
    auto ln = [&](const std::string& p) {
        s.push_back({p + ".g", 1, D, Kind::Gain});
        s.push_back({p + ".b", 1, D, Kind::Bias});
    };
    auto attn = [&](const std::string& p) {
        for (const char* m : {"wq", "wk", "wv", "wo"}) s.push_back({p + "." + m, D, D, Kind::Weight});
    };
    auto ffn = [&](const std::string& p) {
        s.push_back({p + ".w1", D, F, Kind::Weight});
        s.push_back({p + ".b1", 1, F, Kind::Bias});
        s.push_back({p + ".w2", F, D, Kind::Weight});
        s.push_back({p + ".b2", 1, D, Kind::Bias});
    };
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = "enc." + std::to_string(l);
        ln(p + ".ln1");
        attn(p + ".self_attn");
        ln(p + ".ln2");
        ffn(p + ".ffn");
    }
    ln("enc.ln_f");
    s.push_back({"dec.tok_emb", c.vocab_size, D, Kind::Weight});
    s.push_back({"dec.pos_emb", c.max_positions, D, Kind::Weight});
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = "dec." + std::to_string(l);
        ln(p + ".ln1");
        attn(p + ".self_attn");
        ln(p + ".ln2");
        attn(p + ".cross_attn");
        ln(p + ".ln3");
        ffn(p + ".ffn");
    }
    ln("dec.ln_f");
    s.push_back({"out.w", D, c.vocab_size, Kind::Weight});
    s.push_back({"out.b", 1, c.vocab_size, Kind::Bias});
    return s;
}

void check_prefix(const ModelConfig& c, std::span<const TokenId> prefix) {
    if (prefix.empty()) throw Error("empty decoder prefix");
    if (prefix.size() > c.max_positions) throw Error("sequence exceeds max positions");
    for (TokenId t : prefix)
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) throw Error("unknown token id");
}

Var mha(Graph& g, const ParamRefs& p, std::size_t base, Var xq, Var xkv, bool causal) {
    const std::size_t heads = p.params().config().heads;
    Var q = g.matmul(xq, p[base + 0]);
    Var k = g.matmul(xkv, p[base + 1]);
    Var v = g.matmul(xkv, p[base + 2]);
    return g.matmul(g.attention(q, k, v, heads, causal), p[base + 3]);
}

Var ffn(Graph& g, const ParamRefs& p, std::size_t base, Var x) {
    Var h = g.gelu(g.add_bias(g.matmul(x, p[base + 0]), p[base + 1]));
    return g.add_bias(g.matmul(h, p[base + 2]), p[base + 3]);
}

// Plain-matrix mirrors of the graph blocks for the cached decoder.
Matrix ffn_plain(const ModelParams& m, std::size_t base, const Matrix& x) {
    Matrix h = kernels::matmul(x, m.tensor(base + 0));
    kernels::add_row_bias(h, m.tensor(base + 1));
    for (auto& v : h.values()) v = kernels::gelu(v);
    Matrix o = kernels::matmul(h, m.tensor(base + 2));
    kernels::add_row_bias(o, m.tensor(base + 3));
    return o;
}

TokenId argmax_row(const Matrix& logits, std::size_t row) {
    auto r = logits.row(row);
    std::size_t best = 0;
    for (std::size_t i = 1; i < r.size(); ++i)
        if (r[i] > r[best]) best = i;
    return static_cast<TokenId>(best);
}

void check_decode_len(const ModelConfig& c, std::size_t max_len) {
    if (max_len + 1 > c.max_positions) throw Error("sequence exceeds max positions");
}

}  // namespace

void ModelConfig::validate() const {
    if (layers == 0 || embed_dim == 0 || heads == 0 || ffn_dim == 0 || vocab_size == 0 || max_positions == 0 ||
        feature_dim == 0)
        throw Error("model config fields must be positive");
    if (embed_dim % heads != 0) throw Error("embed_dim must be divisible by heads");
    if (vocab_size <= kNumSpecials) throw Error("vocab_size must exceed the special tokens");
}

ModelParams::ModelParams(const ModelConfig& config) : config_(config) {
    config.validate();
    for (auto& s : param_specs(config)) {
        names_.push_back(s.name);
        tensors_.emplace_back(s.rows, s.cols);
    }
}

const Matrix& ModelParams::at(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return tensors_[i];
    throw Error("unknown parameter: " + name);
}

Matrix& ModelParams::at(const std::string& name) {
    return const_cast<Matrix&>(static_cast<const ModelParams&>(*this).at(name));
}

std::size_t ModelParams::num_scalars() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
}

bool ModelParams::all_finite() const {
    for (const auto& t : tensors_)
        if (!kernels::all_finite(t)) return false;
    return true;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    ModelParams p(config);
    std::mt19937_64 rng(seed);
    const auto specs = param_specs(config);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        Matrix& t = p.tensor(i);
        switch (specs[i].kind) {
            case Kind::Weight: {
                const double limit = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
                std::uniform_real_distribution<double> dist(-limit, limit);
                for (auto& v : t.values()) v = dist(rng);
                break;
            }
            case Kind::Bias: t.fill(0.0); break;
            case Kind::Gain: t.fill(1.0); break;
        }
    }
    return p;
}

void check_features(const ModelConfig& config, const ImageFeatures& features) {
    const Matrix& r = features.regions;
    if (r.rows() == 0 || r.rows() > config.max_positions || r.cols() != config.feature_dim || !kernels::all_finite(r))
        throw Error("invalid features");
}

ParamRefs ParamRefs::trainable(Graph& g, const ModelParams& params) {
    ParamRefs r;
    r.params_ = &params;
    for (std::size_t i = 0; i < params.count(); ++i) r.vars_.push_back(g.parameter(params.tensor(i)));
    return r;
}

ParamRefs ParamRefs::frozen(Graph& g, const ModelParams& params) {
    ParamRefs r;
    r.params_ = &params;
    for (std::size_t i = 0; i < params.count(); ++i) r.vars_.push_back(g.constant_ref(params.tensor(i)));
    return r;
}

Var encode_graph(Graph& g, const ParamRefs& p, const ImageFeatures& features) {
    using namespace layout;
    const std::size_t L = p.params().config().layers;
    Var x = g.add_bias(g.matmul(g.constant_ref(features.regions), p[kFeatW]), p[kFeatB]);
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t b = enc(l);
        Var h = g.layer_norm(x, p[b + kEncLn1G], p[b + kEncLn1B]);
        x = g.add(x, mha(g, p, b + kEncWq, h, h, false));
        h = g.layer_norm(x, p[b + kEncLn2G], p[b + kEncLn2B]);
        x = g.add(x, ffn(g, p, b + kEncW1, h));
    }
    return g.layer_norm(x, p[enc_ln_g(L)], p[enc_ln_g(L) + 1]);
}

Var decode_logits_graph(Graph& g, const ParamRefs& p, Var memory, std::span<const TokenId> prefix) {
    using namespace layout;
    const std::size_t L = p.params().config().layers;
    Var y = g.add(g.gather_rows(p[tok_emb(L)], prefix), g.slice_rows(p[pos_emb(L)], 0, prefix.size()));
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t b = dec(L, l);
        Var h = g.layer_norm(y, p[b + kDecLn1G], p[b + kDecLn1B]);
        y = g.add(y, mha(g, p, b + kSelfWq, h, h, true));
        h = g.layer_norm(y, p[b + kDecLn2G], p[b + kDecLn2B]);
        y = g.add(y, mha(g, p, b + kCrossWq, h, memory, false));
        h = g.layer_norm(y, p[b + kDecLn3G], p[b + kDecLn3B]);
        y = g.add(y, ffn(g, p, b + kDecW1, h));
    }
    y = g.layer_norm(y, p[dec_ln_g(L)], p[dec_ln_g(L) + 1]);
    return g.add_bias(g.matmul(y, p[out_w(L)]), p[out_b(L)]);
}

Var logits_graph(Graph& g, const ParamRefs& p, const ImageFeatures& features, std::span<const TokenId> prefix) {
    const ModelConfig& c = p.params().config();
    check_features(c, features);
    check_prefix(c, prefix);
    return decode_logits_graph(g, p, encode_graph(g, p, features), prefix);
}

Matrix forward_logits(const ModelParams& params, const ImageFeatures& features, std::span<const TokenId> prefix) {
    Graph g;
    const auto p = ParamRefs::frozen(g, params);
    return g.value(logits_graph(g, p, features, prefix));
}

SoftmaxSequence forward(const ModelParams& params, const ImageFeatures& features, std::span<const TokenId> prefix) {
    return kernels::softmax_rows(forward_logits(params, features, prefix));
}

IncrementalDecoder::IncrementalDecoder(const ModelParams& params, const ImageFeatures& features) : params_(params) {
    using namespace layout;
    const ModelConfig& c = params.config();
    check_features(c, features);
    Matrix memory;
    {
        Graph g;
        const auto p = ParamRefs::frozen(g, params);
        memory = g.value(encode_graph(g, p, features));
    }
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::size_t b = dec(c.layers, l);
        cross_k_.push_back(kernels::matmul(memory, params.tensor(b + kCrossWk)));
        cross_v_.push_back(kernels::matmul(memory, params.tensor(b + kCrossWv)));
        self_k_.emplace_back();
        self_v_.emplace_back();
    }
}

Matrix IncrementalDecoder::step(TokenId token) {
    using namespace layout;
    const ModelConfig& c = params_.config();
    const std::size_t L = c.layers;
    if (position_ >= c.max_positions) throw Error("sequence exceeds max positions");
    if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) throw Error("unknown token id");
    const auto& m = params_;

    Matrix y(1, c.embed_dim);
    {
        auto e = m.tensor(tok_emb(L)).row(static_cast<std::size_t>(token));
        auto pe = m.tensor(pos_emb(L)).row(position_);
        for (std::size_t i = 0; i < c.embed_dim; ++i) y[i] = e[i] + pe[i];
    }
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t b = dec(L, l);
        Matrix h = kernels::layer_norm(y, m.tensor(b + kDecLn1G), m.tensor(b + kDecLn1B));
        Matrix q = kernels::matmul(h, m.tensor(b + kSelfWq));
        self_k_[l].append_row(kernels::matmul(h, m.tensor(b + kSelfWk)).row(0));
        self_v_[l].append_row(kernels::matmul(h, m.tensor(b + kSelfWv)).row(0));
        Matrix o = kernels::attention(q, self_k_[l], self_v_[l], c.heads, true);
        kernels::add_inplace(y, kernels::matmul(o, m.tensor(b + kSelfWo)));

        h = kernels::layer_norm(y, m.tensor(b + kDecLn2G), m.tensor(b + kDecLn2B));
        q = kernels::matmul(h, m.tensor(b + kCrossWq));
        o = kernels::attention(q, cross_k_[l], cross_v_[l], c.heads, false);
        kernels::add_inplace(y, kernels::matmul(o, m.tensor(b + kCrossWo)));

        h = kernels::layer_norm(y, m.tensor(b + kDecLn3G), m.tensor(b + kDecLn3B));
        kernels::add_inplace(y, ffn_plain(m, b + kDecW1, h));
    }
    y = kernels::layer_norm(y, m.tensor(dec_ln_g(L)), m.tensor(dec_ln_g(L) + 1));
    Matrix logits = kernels::matmul(y, m.tensor(out_w(L)));
    kernels::add_row_bias(logits, m.tensor(out_b(L)));
    ++position_;
    return logits;
}

TokenSeq greedy_decode(const ModelParams& params, const ImageFeatures& features, std::size_t max_len) {
    check_decode_len(params.config(), max_len);
    TokenSeq out;
    if (max_len == 0) {
        check_features(params.config(), features);
        return out;
    }
    IncrementalDecoder dec(params, features);
    TokenId next = kBos;
    while (out.size() < max_len) {
        next = argmax_row(dec.step(next), 0);
        if (next == kEos) break;
        out.push_back(next);
    }
    return out;
}

TokenSeq greedy_decode_uncached(const ModelParams& params, const ImageFeatures& features, std::size_t max_len) {
    check_decode_len(params.config(), max_len);
    check_features(params.config(), features);
    TokenSeq prefix{kBos};
    while (prefix.size() <= max_len) {
        const Matrix logits = forward_logits(params, features, prefix);
        const TokenId next = argmax_row(logits, logits.rows() - 1);
        if (next == kEos) break;
        prefix.push_back(next);
    }
    return TokenSeq(prefix.begin() + 1, prefix.end());
}

LossGrad loss_grad(const ModelParams& params, const LossSpec& spec) {
    Graph g;
    const auto refs = ParamRefs::trainable(g, params);
    const Var loss = spec(g, refs);
    LossGrad out;
    out.loss = g.value(loss)[0];
    if (!std::isfinite(out.loss)) throw Error("diverged");
    g.backward(loss);
    out.grad = ModelParams(params.config());
    for (std::size_t i = 0; i < params.count(); ++i) {
        const Matrix& gi = g.grad(refs[i]);
        if (!gi.empty()) out.grad.tensor(i) = gi;
    }
    if (!out.grad.all_finite()) throw Error("diverged");
    return out;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

constexpr std::string_view kMagic = "CODIST01";

class Reader {
public:
    explicit Reader(std::string_view b) : b_(b) {}
    std::size_t remaining() const { return b_.size() - pos_; }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string_view bytes(std::size_t n) {
        need(n);
        auto s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }

private:
    void need(std::size_t n) const {
        if (remaining() < n) throw Error("truncated checkpoint");
    }
    std::string_view b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string checkpoint_bytes(const ModelParams& params) {
    std::string out(kMagic);
    for (std::size_t i = 0; i < params.count(); ++i) {
        const auto& name = params.name(i);
        const Matrix& t = params.tensor(i);
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_u32(out, 2);
        put_u32(out, static_cast<std::uint32_t>(t.rows()));
        put_u32(out, static_cast<std::uint32_t>(t.cols()));
        for (double v : t.values()) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(out, bits);
        }
    }
    put_u64(out, fnv1a(out));
    return out;
}

ModelParams checkpoint_from_bytes(std::string_view bytes, const ModelConfig& config) {
    if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic)
        throw Error("invalid checkpoint magic");
    const std::string_view body = bytes.substr(0, bytes.size() - 8);
    std::uint64_t stored = 0;
    for (int i = 0; i < 8; ++i)
        stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[body.size() + i])) << (8 * i);
    if (fnv1a(body) != stored) throw Error("checkpoint checksum mismatch");

    ModelParams p(config);
    Reader r(body.substr(kMagic.size()));
    std::size_t i = 0;
    while (r.remaining() > 0) {
        const std::string name(r.bytes(r.u32()));
        const std::uint32_t rank = r.u32();
        std::vector<std::uint32_t> dims(rank);
        for (auto& d : dims) d = r.u32();
        if (i >= p.count() || name != p.name(i) || rank != 2 || dims[0] != p.tensor(i).rows() ||
            dims[1] != p.tensor(i).cols())
            throw Error("checkpoint does not match model config at tensor '" + name + "'");
        for (auto& v : p.tensor(i).values()) v = static_cast<double>(r.f32());
        ++i;
    }
    if (i != p.count()) throw Error("checkpoint does not match model config: missing tensors");
    return p;
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
    const std::string bytes = checkpoint_bytes(params);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write checkpoint: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("cannot write checkpoint: " + path);
}

ModelParams load_checkpoint(const std::string& path, const ModelConfig& config) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read checkpoint: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return checkpoint_from_bytes(ss.str(), config);
}

}  // namespace codistill
