#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "codistill/datagen.hpp"
#include "codistill/error.hpp"
#include "codistill/semantic_bridge.hpp"

using namespace codistill;

namespace {

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

void write_text(const std::filesystem::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

}  // namespace

TEST_CASE("template captions are a pure function of the scene", "[datagen]") {
    const Scene one{{{0, 0, 0}}};
    CHECK(template_caption(one) == "a small red circle");
    const Scene two{{{1, 0, 2}, {7, 5, 1}}};
    CHECK(template_caption(two) == "a large green circle and a medium black diamond");
    CHECK(template_caption(two) == template_caption(two));
}

TEST_CASE("scene features encode each object and round-trip", "[datagen]") {
    const Scene s{{{2, 1, 0}, {5, 3, 2}, {5, 3, 2}}};
    const auto f = scene_features(s, 0.05, 9);
    REQUIRE(f.regions.rows() == 3);
    REQUIRE(f.regions.cols() == kSceneFeatureDim);
    CHECK(std::abs(f.regions(0, 2) - 1.0) < 0.3);
    CHECK(std::abs(f.regions(0, 8 + 1) - 1.0) < 0.3);
    CHECK(std::abs(f.regions(0, 14 + 0) - 1.0) < 0.3);
    CHECK(scene_from_features(f) == s);
    CHECK(scene_features(s, 0.0, 1).regions(1, 5) == 1.0);
}

TEST_CASE("clean corpora carry no noise", "[datagen]") {
    const auto recs = generate_corpus(500, NoiseConfig::clean(), 1);
    REQUIRE(recs.size() == 500);
    for (const auto& r : recs) {
        CHECK_FALSE(r.noisy);
        CHECK(r.noise_ops.empty());
        CHECK(r.caption == reference_caption(r));
        CHECK(r.features.regions.rows() >= 1);
        CHECK(r.features.regions.rows() <= kMaxObjects);
    }
}

TEST_CASE("forced mismatch changes every caption", "[datagen]") {
    NoiseConfig n;
    n.p_mismatch = 1.0;
    const auto recs = generate_corpus(200, n, 2);
    for (const auto& r : recs) {
        CHECK(r.noisy);
        CHECK(r.caption != reference_caption(r));
        CHECK(r.noise_ops == std::vector<std::string>{"mismatch"});
    }
    CHECK(generate_corpus(2, n, 5)[0].caption != reference_caption(generate_corpus(2, n, 5)[0]));
}

TEST_CASE("noisy flag matches the recorded operators", "[datagen][property]") {
    const auto recs = generate_corpus(2000, NoiseConfig::noisy_default(), 3);
    std::set<std::string> seen;
    for (const auto& r : recs) {
        CHECK(r.noisy == !r.noise_ops.empty());
        CHECK(r.noisy == (r.caption != reference_caption(r)));
        for (const auto& op : r.noise_ops) seen.insert(op);
    }
    CHECK(seen == std::set<std::string>{"delete", "insert", "mismatch", "shuffle"});
}

TEST_CASE("generation is deterministic by seed and ids", "[datagen]") {
    const auto a = generate_corpus(300, NoiseConfig::noisy_default(), 11);
    const auto b = generate_corpus(300, NoiseConfig::noisy_default(), 11);
    const auto c = generate_corpus(300, NoiseConfig::noisy_default(), 12);
    REQUIRE(a.size() == b.size());
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(corpus_record_json(a[i]) == corpus_record_json(b[i]));
        differs |= corpus_record_json(a[i]) != corpus_record_json(c[i]);
    }
    CHECK(differs);
    CHECK(generate_corpus(3, NoiseConfig::clean(), 1, 40)[0].id == 40);
    CHECK_THROWS_AS(generate_corpus(0, NoiseConfig::clean(), 1), Error);
}

TEST_CASE("mismatch rate is within three standard errors", "[datagen][property]") {
    for (double rho : {0.1, 0.3, 0.5}) {
        NoiseConfig n;
        n.p_mismatch = rho;
        const std::size_t count = 10000;
        const auto recs = generate_corpus(count, n, 77);
        std::size_t noisy = 0;
        for (const auto& r : recs) noisy += r.noisy;
        const double frac = static_cast<double>(noisy) / count;
        CHECK(std::abs(frac - rho) <= 3.0 * std::sqrt(rho * (1 - rho) / count));
    }
}

TEST_CASE("matched records have coherence one with their template", "[datagen]") {
    const HashedEmbedder e(256);
    NoiseConfig n;
    n.p_mismatch = 0.5;
    for (const auto& r : generate_corpus(200, n, 4))
        if (!r.noisy) CHECK(std::abs(e.coherence(r.caption, reference_caption(r)) - 1.0) < 1e-12);
}

TEST_CASE("noise config validation names the field", "[datagen]") {
    NoiseConfig n;
    n.p_delete = 1.5;
    CHECK_THROWS_WITH(n.validate(), Catch::Matchers::ContainsSubstring("p_delete"));
    n = {};
    n.sigma_feature = -1;
    CHECK_THROWS_WITH(n.validate(), Catch::Matchers::ContainsSubstring("sigma_feature"));
    CHECK_NOTHROW(NoiseConfig::noisy_default().validate());
}

TEST_CASE("corpus files round-trip within float tolerance", "[datagen][io]") {
    const auto recs = generate_corpus(100, NoiseConfig::noisy_default(), 5);
    const auto path = temp_file("codistill_corpus_rt.jsonl");
    write_corpus(recs, path.string());
    const auto back = read_corpus(path.string());
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        CHECK(back[i].id == recs[i].id);
        CHECK(back[i].caption == recs[i].caption);
        CHECK(back[i].noisy == recs[i].noisy);
        CHECK(back[i].noise_ops == recs[i].noise_ops);
        REQUIRE(back[i].features.regions.size() == recs[i].features.regions.size());
        for (std::size_t k = 0; k < recs[i].features.regions.size(); ++k)
            CHECK(std::abs(back[i].features.regions[k] - recs[i].features.regions[k]) <= 1e-7);
    }
    std::filesystem::remove(path);
}

TEST_CASE("corpus reader errors", "[datagen][io]") {
    const auto recs = generate_corpus(3, NoiseConfig::clean(), 5);
    std::string text;
    for (const auto& r : recs) text += corpus_record_json(r) + "\n";
    SECTION("truncated final line") {
        const std::string cut = text.substr(0, text.size() - 15);
        CHECK_THROWS_WITH(parse_corpus(cut), "malformed record at line 3");
    }
    SECTION("missing field") {
        CHECK_THROWS_WITH(parse_corpus(R"({"id":1,"features":[[0.5]],"noisy":false,"noise_ops":[]})"),
                          "schema error at line 1: missing field 'caption'");
    }
    SECTION("empty file") {
        const auto path = temp_file("codistill_empty.jsonl");
        write_text(path, "");
        CHECK(read_corpus(path.string()).empty());
        std::filesystem::remove(path);
    }
    SECTION("missing file") {
        CHECK_THROWS_WITH(read_corpus("/nonexistent/corpus.jsonl"),
                          Catch::Matchers::ContainsSubstring("/nonexistent/corpus.jsonl"));
    }
}
