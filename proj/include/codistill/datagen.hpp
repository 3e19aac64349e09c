#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "codistill/model.hpp"

namespace codistill {

inline constexpr std::array<std::string_view, 8> kColors = {"red",    "green",  "blue",  "yellow",
                                                            "purple", "orange", "white", "black"};
inline constexpr std::array<std::string_view, 6> kShapes = {"circle", "square",  "triangle",
                                                            "star",   "hexagon", "diamond"};
inline constexpr std::array<std::string_view, 3> kSizes = {"small", "medium", "large"};
inline constexpr std::size_t kSceneFeatureDim = kColors.size() + kShapes.size() + kSizes.size();
inline constexpr std::size_t kMaxObjects = 4;

struct SceneObject {
    int color = 0;
    int shape = 0;
    int size = 0;
    friend auto operator<=>(const SceneObject&, const SceneObject&) = default;
};

/// 1..4 objects, stored in canonical (shape, color, size) order so the caption
/// order is recoverable from the unordered region set.
struct Scene {
    std::vector<SceneObject> objects;
    friend bool operator==(const Scene&, const Scene&) = default;
};

/// "a {size} {color} {shape}" per object, joined by " and ".
std::string template_caption(const Scene& scene);

/// One-hot color | shape | size per object plus N(0, sigma) jitter.
ImageFeatures scene_features(const Scene& scene, double sigma, std::uint64_t seed);

/// Recovers the scene by per-block argmax over feature rows.
Scene scene_from_features(const ImageFeatures& features);

struct NoiseConfig {
    double p_mismatch = 0.0;  // replace caption with another scene's
    double p_delete = 0.0;    // drop each word independently
    double p_shuffle = 0.0;   // permute the words
    double p_insert = 0.0;    // insert one random scene word
    double sigma_feature = 0.05;

    /// Throws Error naming the offending field.
    void validate() const;
    static NoiseConfig clean() { return {}; }
    static NoiseConfig noisy_default() { return {0.3, 0.1, 0.1, 0.1, 0.05}; }
};

struct CorpusRecord {
    std::int64_t id = 0;
    ImageFeatures features;
    std::string caption;
    bool noisy = false;
    std::vector<std::string> noise_ops;  // subset of mismatch, delete, shuffle, insert (in application order)
};

/// Ids run from `first_id`. A noise operator is listed only when it changed
/// the caption, so `noisy` holds exactly when the caption differs from the
/// template of the record's own scene.
std::vector<CorpusRecord> generate_corpus(std::size_t n, const NoiseConfig& noise, std::uint64_t seed,
                                          std::int64_t first_id = 0);

/// Template caption of the scene encoded in a record's features.
std::string reference_caption(const CorpusRecord& record);

std::string corpus_record_json(const CorpusRecord& record);
void write_corpus(const std::vector<CorpusRecord>& records, const std::string& path);
/// Errors: "malformed record at line N", "schema error at line N: ...".
std::vector<CorpusRecord> read_corpus(const std::string& path);
std::vector<CorpusRecord> parse_corpus(std::string_view text);

}  // namespace codistill
