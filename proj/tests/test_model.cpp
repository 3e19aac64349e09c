#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "codistill/error.hpp"
#include "codistill/losses.hpp"
#include "codistill/model.hpp"
#include "test_support.hpp"

using namespace codistill;
using codistill::testing::finite_difference_check;
using codistill::testing::perturb_all;
using codistill::testing::random_features;
using codistill::testing::tiny_config;

TEST_CASE("init_params is deterministic per seed", "[model]") {
    const auto cfg = tiny_config();
    const auto a = init_params(cfg, 7);
    const auto b = init_params(cfg, 7);
    const auto c = init_params(cfg, 8);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    for (std::size_t i = 0; i < a.count(); ++i) {
        const auto& n = a.name(i);
        if (n.ends_with(".g")) {
            for (double v : a.tensor(i).values()) CHECK(v == 1.0);
        }
        if (n.ends_with(".b") || n.ends_with(".b1") || n.ends_with(".b2")) {
            for (double v : a.tensor(i).values()) CHECK(v == 0.0);
        }
    }
}

TEST_CASE("config rejects embed_dim not divisible by heads", "[model]") {
    auto cfg = tiny_config();
    cfg.heads = 3;
    CHECK_THROWS_AS(init_params(cfg, 1), Error);
}

TEST_CASE("forward rows are normalized distributions", "[model]") {
    const auto cfg = tiny_config();
    const auto p = init_params(cfg, 3);
    const auto f = random_features(3, cfg.feature_dim, 11);
    const TokenSeq prefix{kBos, 5, 9, 4, 17};
    const auto soft = forward(p, f, prefix);
    REQUIRE(soft.rows() == prefix.size());
    REQUIRE(soft.cols() == cfg.vocab_size);
    for (std::size_t r = 0; r < soft.rows(); ++r) {
        double s = 0.0;
        for (double v : soft.row(r)) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("forward validates its inputs", "[model]") {
    const auto cfg = tiny_config();
    const auto p = init_params(cfg, 3);
    const auto f = random_features(2, cfg.feature_dim, 1);
    TokenSeq too_long(cfg.max_positions + 1, 5);
    too_long[0] = kBos;
    CHECK_THROWS_WITH(forward(p, f, too_long), "sequence exceeds max positions");
    auto bad = f;
    bad.regions(0, 0) = std::nan("");
    CHECK_THROWS_WITH(forward(p, bad, TokenSeq{kBos}), "invalid features");
}

TEST_CASE("decoder is causal at every position", "[model]") {
    const auto cfg = tiny_config();
    auto p = init_params(cfg, 5);
    perturb_all(p, 99);
    const auto f = random_features(3, cfg.feature_dim, 12);
    const TokenSeq prefix{kBos, 4, 8, 12, 16, 5, 6, 7};
    const auto base = forward(p, f, prefix);
    for (std::size_t t = 1; t < prefix.size(); ++t) {
        auto changed = prefix;
        changed[t] = changed[t] == 19 ? 18 : 19;
        const auto out = forward(p, f, changed);
        for (std::size_t r = 0; r < t; ++r)
            for (std::size_t c = 0; c < cfg.vocab_size; ++c) CHECK(std::abs(out(r, c) - base(r, c)) < 1e-9);
        bool row_t_moved = false;
        for (std::size_t c = 0; c < cfg.vocab_size; ++c) row_t_moved |= out(t, c) != base(t, c);
        CHECK(row_t_moved);
    }
}

TEST_CASE("region order does not matter", "[model]") {
    const auto cfg = tiny_config();
    auto p = init_params(cfg, 5);
    perturb_all(p, 4);
    auto f = random_features(3, cfg.feature_dim, 13);
    // two identical regions swapped: bitwise-identical input
    for (std::size_t c = 0; c < cfg.feature_dim; ++c) f.regions(2, c) = f.regions(0, c);
    ImageFeatures swapped = f;
    for (std::size_t c = 0; c < cfg.feature_dim; ++c) std::swap(swapped.regions(0, c), swapped.regions(2, c));
    const TokenSeq prefix{kBos, 6, 7};
    CHECK(forward(p, f, prefix) == forward(p, swapped, prefix));

    // a genuine permutation changes only the summation order
    ImageFeatures perm = f;
    for (std::size_t c = 0; c < cfg.feature_dim; ++c) std::swap(perm.regions(0, c), perm.regions(1, c));
    const auto a = forward(p, f, prefix);
    const auto b = forward(p, perm, prefix);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
}

namespace {

// All blocks contribute nothing; position t's embedding is a spike on
// dimension t and the output head routes dimension t to the forced token.
ModelParams rigged(const ModelConfig& cfg, const std::vector<TokenId>& forced) {
    auto p = init_params(cfg, 1);
    for (std::size_t i = 0; i < p.count(); ++i) {
        const auto& n = p.name(i);
        if (n.find(".wo") != std::string::npos || n.find(".w2") != std::string::npos || n == "dec.tok_emb" ||
            n == "dec.pos_emb" || n == "out.w")
            p.tensor(i).fill(0.0);
    }
    for (std::size_t t = 0; t < forced.size(); ++t) {
        p.at("dec.pos_emb")(t, t) = 5.0;
        p.at("out.w")(t, static_cast<std::size_t>(forced[t])) = 10.0;
    }
    return p;
}

}  // namespace

TEST_CASE("greedy decode follows a rigged output head", "[model]") {
    const auto cfg = tiny_config();
    const auto p = rigged(cfg, {5, 7, kEos});
    const auto f = random_features(2, cfg.feature_dim, 3);

    // enumeration oracle: argmax of each teacher-forced row
    const auto soft = forward(p, f, TokenSeq{kBos, 5, 7});
    const TokenId expected[] = {5, 7, kEos};
    for (std::size_t r = 0; r < 3; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 0; c < cfg.vocab_size; ++c)
            if (soft(r, c) > soft(r, best)) best = c;
        CHECK(static_cast<TokenId>(best) == expected[r]);
    }
    CHECK(greedy_decode(p, f, 6) == TokenSeq{5, 7});
    CHECK(greedy_decode_uncached(p, f, 6) == TokenSeq{5, 7});
    CHECK(greedy_decode(p, f, 1) == TokenSeq{5});
    CHECK(greedy_decode(p, f, 0).empty());
}

TEST_CASE("greedy decode breaks logit ties toward the smaller id", "[model]") {
    const auto cfg = tiny_config();
    auto p = rigged(cfg, {});
    p.at("out.b")[9] = 4.0;
    p.at("out.b")[6] = 4.0;
    const auto f = random_features(1, cfg.feature_dim, 3);
    CHECK(greedy_decode(p, f, 3) == TokenSeq{6, 6, 6});
    p.at("out.b")[kEos] = 4.0;
    CHECK(greedy_decode(p, f, 3).empty());
}

TEST_CASE("cached decoding reproduces full recomputation", "[model]") {
    auto cfg = tiny_config();
    cfg.max_positions = 12;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        auto p = init_params(cfg, seed);
        perturb_all(p, seed + 100, 0.5);
        const auto f = random_features(1 + seed % 3, cfg.feature_dim, seed);
        CHECK(greedy_decode(p, f, 11) == greedy_decode_uncached(p, f, 11));

        IncrementalDecoder dec(p, f);
        const TokenSeq prefix{kBos, 4, 9, 13, 2, 7};
        const auto full = forward_logits(p, f, prefix);
        for (std::size_t t = 0; t < prefix.size(); ++t) {
            const auto row = dec.step(prefix[t]);
            for (std::size_t c = 0; c < cfg.vocab_size; ++c) CHECK(row[c] == full(t, c));
        }
    }
}

TEST_CASE("loss_grad matches central differences on a CE loss", "[model][grad]") {
    const auto cfg = tiny_config();
    auto p = init_params(cfg, 21);
    perturb_all(p, 22);
    const auto f = random_features(3, cfg.feature_dim, 23);
    const TokenSeq prefix{kBos, 4, 5, 6};
    const TokenSeq targets{4, 5, 6, kEos};
    auto spec = [&](Graph& g, const ParamRefs& r) {
        return cross_entropy_graph(g, logits_graph(g, r, f, prefix), targets);
    };
    const auto lg = loss_grad(p, spec);
    auto value = [&](const ModelParams& q) {
        return cross_entropy_seq(forward(q, f, prefix), targets);
    };
    CHECK(std::abs(value(p) - lg.loss) < 1e-12);
    const auto check = finite_difference_check(p, lg.grad, value);
    INFO("worst tensor " << check.worst_tensor);
    CHECK(check.worst_error < 1e-4);
}

TEST_CASE("mean over a duplicated sample equals the single-sample gradient", "[model][grad]") {
    const auto cfg = tiny_config();
    const auto p = init_params(cfg, 2);
    const auto f = random_features(2, cfg.feature_dim, 2);
    const TokenSeq prefix{kBos, 8, 9};
    const TokenSeq targets{8, 9, kEos};
    auto one = [&](Graph& g, const ParamRefs& r) {
        return cross_entropy_graph(g, logits_graph(g, r, f, prefix), targets);
    };
    auto two = [&](Graph& g, const ParamRefs& r) {
        const Var a = one(g, r);
        const Var b = one(g, r);
        return g.weighted_sum(a, 0.5, b, 0.5);
    };
    const auto g1 = loss_grad(p, one);
    const auto g2 = loss_grad(p, two);
    CHECK(g1.loss == g2.loss);
    for (std::size_t i = 0; i < p.count(); ++i)
        for (std::size_t k = 0; k < p.tensor(i).size(); ++k)
            CHECK(std::abs(g1.grad.tensor(i)[k] - g2.grad.tensor(i)[k]) < 1e-14);
}

TEST_CASE("loss_grad reports divergence", "[model]") {
    const auto cfg = tiny_config();
    const auto p = init_params(cfg, 2);
    auto spec = [&](Graph& g, const ParamRefs&) {
        Matrix m(1, 1);
        m[0] = std::numeric_limits<double>::infinity();
        return g.constant(m);
    };
    CHECK_THROWS_WITH(loss_grad(p, spec), "diverged");
}

TEST_CASE("checkpoint bytes round-trip and detect corruption", "[model][checkpoint]") {
    const auto cfg = tiny_config();
    auto p = init_params(cfg, 9);
    perturb_all(p, 10);
    const std::string bytes = checkpoint_bytes(p);
    CHECK(bytes.substr(0, 8) == "CODIST01");
    const auto loaded = checkpoint_from_bytes(bytes, cfg);
    CHECK(checkpoint_bytes(loaded) == bytes);
    for (std::size_t i = 0; i < p.count(); ++i)
        for (std::size_t k = 0; k < p.tensor(i).size(); ++k)
            CHECK(loaded.tensor(i)[k] == static_cast<double>(static_cast<float>(p.tensor(i)[k])));

    std::string corrupt = bytes;
    corrupt[corrupt.size() - 1] ^= 0x01;
    CHECK_THROWS_WITH(checkpoint_from_bytes(corrupt, cfg), "checkpoint checksum mismatch");
    corrupt = bytes;
    corrupt[20] ^= 0x40;
    CHECK_THROWS_WITH(checkpoint_from_bytes(corrupt, cfg), "checkpoint checksum mismatch");

    auto other = cfg;
    other.vocab_size = 21;
    CHECK_THROWS_AS(checkpoint_from_bytes(bytes, other), Error);
}
