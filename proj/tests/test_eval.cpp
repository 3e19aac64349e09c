#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "codistill/datagen.hpp"
#include "codistill/error.hpp"
#include "codistill/eval.hpp"
#include "test_support.hpp"

using namespace codistill;

namespace {

Words w(const std::string& s) { return split_words(s); }

}  // namespace

TEST_CASE("bleu4 of identical corpora is one", "[eval][bleu]") {
    const std::vector<Words> cands{w("a small red circle"), w("a large blue star and a small red circle")};
    const std::vector<std::vector<Words>> refs{{cands[0]}, {cands[1]}};
    CHECK(std::abs(bleu4(cands, refs) - 1.0) < 1e-9);
}

TEST_CASE("bleu4 with zero overlap uses add-one smoothing", "[eval][bleu]") {
    // totals 4,3,2,1 with no matches: p_n = 1/5, 1/4, 1/3, 1/2, so the
    // geometric mean is 120^(-1/4)
    const double expected = 0.3021375397356768;
    CHECK(std::abs(std::pow(1.0 / 120.0, 0.25) - expected) < 1e-15);
    const double got = bleu4({w("w x y z")}, {{w("a b c d")}});
    CHECK(std::abs(got - expected) < 1e-9);
}

TEST_CASE("bleu4 brevity penalty on a half-length prefix", "[eval][bleu]") {
    // 4-word prefix of an 8-word reference: every n-gram matches, BP = exp(1 - 8/4)
    const double got = bleu4({w("a b c d")}, {{w("a b c d e f g h")}});
    CHECK(std::abs(got - std::exp(-1.0)) < 1e-9);
}

TEST_CASE("bleu4 edge cases", "[eval][bleu]") {
    CHECK(bleu4({Words{}}, {{w("a b")}}) == 0.0);
    CHECK_THROWS_AS(bleu4({w("a")}, {}), Error);
    CHECK_THROWS_AS(bleu4({w("a")}, {{}}), Error);
    // closest reference length, shorter on ties
    const double two_refs = bleu4({w("a b c")}, {{w("a b c d"), w("a b")}});
    CHECK(std::abs(two_refs - 1.0) < 1e-12);
}

TEST_CASE("bleu4 is permutation- and duplication-invariant", "[eval][bleu][property]") {
    const auto recs = generate_corpus(60, NoiseConfig::noisy_default(), 8);
    std::vector<Words> cands;
    std::vector<std::vector<Words>> refs;
    for (const auto& r : recs) {
        cands.push_back(w(r.caption));
        refs.push_back({w(reference_caption(r))});
    }
    const double base = bleu4(cands, refs);
    CHECK(base > 0.0);
    CHECK(base < 1.0);

    auto pc = cands;
    auto pr = refs;
    std::mt19937_64 rng(3);
    for (std::size_t i = pc.size() - 1; i > 0; --i) {
        const std::size_t j = rng() % (i + 1);
        std::swap(pc[i], pc[j]);
        std::swap(pr[i], pr[j]);
    }
    CHECK(std::abs(bleu4(pc, pr) - base) < 1e-12);

    auto dc = cands;
    auto dr = refs;
    dc.insert(dc.end(), cands.begin(), cands.end());
    dr.insert(dr.end(), refs.begin(), refs.end());
    CHECK(std::abs(bleu4(dc, dr) - base) < 1e-12);
}

TEST_CASE("coherence auc examples", "[eval][auc]") {
    CHECK(coherence_auc(std::vector<double>{0.1, 0.9}, {true, false}) == 1.0);
    CHECK(coherence_auc(std::vector<double>{0.4, 0.4, 0.4}, {true, false, true}) == 0.5);
    CHECK(coherence_auc(std::vector<double>{0.2, 0.4, 0.3, 0.9}, {true, false, true, false}) == 1.0);
    CHECK(coherence_auc(std::vector<double>{0.9, 0.1}, {true, false}) == 0.0);
    CHECK_THROWS_WITH(coherence_auc(std::vector<double>{0.1, 0.2}, {true, true}), "degenerate labels");
    CHECK_THROWS_WITH(coherence_auc(std::vector<double>{}, {}), "degenerate labels");
}

TEST_CASE("auc of complementary labels sums to one", "[eval][auc][property]") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> ws;
        std::vector<bool> flags, inv;
        for (int i = 0; i < 40; ++i) {
            // coarse grid so that ties occur
            ws.push_back(std::round(u(rng) * 8) / 8);
            flags.push_back(i % 3 == 0);
            inv.push_back(!flags.back());
        }
        CHECK(std::abs(coherence_auc(ws, flags) + coherence_auc(ws, inv) - 1.0) < 1e-12);
    }
}

namespace {

// Output head that writes out a fixed token sequence regardless of features.
ModelParams echo_model(const ModelConfig& cfg, const TokenSeq& tokens) {
    auto p = init_params(cfg, 1);
    for (std::size_t i = 0; i < p.count(); ++i) {
        const auto& n = p.name(i);
        if (n.find(".wo") != std::string::npos || n.find(".w2") != std::string::npos || n == "dec.tok_emb" ||
            n == "dec.pos_emb" || n == "out.w")
            p.tensor(i).fill(0.0);
    }
    TokenSeq seq = tokens;
    seq.push_back(kEos);
    for (std::size_t t = 0; t < seq.size(); ++t) {
        p.at("dec.pos_emb")(t, t) = 5.0;
        p.at("out.w")(t, static_cast<std::size_t>(seq[t])) = 10.0;
    }
    return p;
}

}  // namespace

TEST_CASE("evaluate_model on an echoing model", "[eval]") {
    // one fixed scene so a feature-blind model can echo its reference
    auto recs = generate_corpus(1, NoiseConfig::clean(), 4);
    recs.push_back(recs[0]);
    recs[1].id = 1;
    recs[1].caption = "a tiny purple blob";
    recs[1].noisy = true;
    const std::vector<std::vector<std::string>> corpora{{recs[0].caption, recs[1].caption}};
    const Vocab vocab = train_vocab(corpora, 200);
    const TokenSeq ref_tokens = vocab.encode(recs[0].caption);

    ModelConfig cfg = codistill::testing::tiny_config(vocab.size(), kSceneFeatureDim);
    cfg.embed_dim = 32;
    cfg.heads = 2;
    cfg.max_positions = static_cast<std::size_t>(ref_tokens.size()) + 2;
    REQUIRE(cfg.embed_dim >= cfg.max_positions);
    const auto params = echo_model(cfg, ref_tokens);
    const HashedEmbedder bridge(64);

    const auto report = evaluate_model(params, recs, bridge, vocab, cfg.max_positions - 1);
    CHECK(report.n_samples == 2);
    CHECK(report.per_sample.size() == 2);
    CHECK(std::abs(report.bleu4 - 1.0) < 1e-12);
    CHECK(report.per_sample[0].candidate == recs[0].caption);
    CHECK(std::abs(report.per_sample[0].w - 1.0) < 1e-9);
    CHECK(report.per_sample[1].w < 1.0);
    REQUIRE(report.auc.has_value());
    CHECK(*report.auc == 1.0);
    CHECK(report.summary().rfind("bleu4=1.000000 auc=1.000000 n=2", 0) == 0);
    const auto j = report.to_json();
    CHECK(j["n_samples"] == 2);
    CHECK(j["per_sample"].size() == 2);
}

TEST_CASE("evaluate_model with empty decodes", "[eval]") {
    const auto recs = generate_corpus(5, NoiseConfig::clean(), 4);
    std::vector<std::vector<std::string>> corpora(1);
    for (const auto& r : recs) corpora[0].push_back(r.caption);
    const Vocab vocab = train_vocab(corpora, 100);
    ModelConfig cfg = codistill::testing::tiny_config(vocab.size(), kSceneFeatureDim);
    auto params = echo_model(cfg, {});
    const HashedEmbedder bridge(64);
    const auto report = evaluate_model(params, recs, bridge, vocab, 4);
    CHECK(report.bleu4 == 0.0);
    CHECK_FALSE(report.auc.has_value());
    CHECK(report.summary().find("auc=na") != std::string::npos);
    for (const auto& s : report.per_sample) {
        CHECK(s.candidate.empty());
        CHECK(s.w == 0.5);
    }
    CHECK_THROWS_AS(evaluate_model(params, {}, bridge, vocab, 4), Error);
}

TEST_CASE("evaluate_model names the failing record", "[eval]") {
    auto recs = generate_corpus(2, NoiseConfig::clean(), 4, 17);
    std::vector<std::vector<std::string>> corpora{{recs[0].caption}};
    const Vocab vocab = train_vocab(corpora, 100);
    const auto params = init_params(codistill::testing::tiny_config(vocab.size(), 3), 1);
    CHECK_THROWS_WITH(evaluate_model(params, recs, HashedEmbedder(8), vocab, 4),
                      Catch::Matchers::StartsWith("record 17: "));
}
