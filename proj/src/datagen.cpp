#include "codistill/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "codistill/error.hpp"
#include "codistill/random.hpp"

namespace codistill {

namespace {

constexpr std::uint64_t kSceneSalt = 0x5CE4E;
constexpr std::uint64_t kNoiseSalt = 0x4015E;
constexpr std::uint64_t kJitterSalt = 0x717E4;

Scene random_scene(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> count(1, static_cast<int>(kMaxObjects));
    std::uniform_int_distribution<int> color(0, static_cast<int>(kColors.size()) - 1);
    std::uniform_int_distribution<int> shape(0, static_cast<int>(kShapes.size()) - 1);
    std::uniform_int_distribution<int> size(0, static_cast<int>(kSizes.size()) - 1);
    Scene s;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
        SceneObject o;
        o.color = color(rng);
        o.shape = shape(rng);
        o.size = size(rng);
        s.objects.push_back(o);
    }
    std::sort(s.objects.begin(), s.objects.end(), [](const SceneObject& a, const SceneObject& b) {
        return std::tie(a.shape, a.color, a.size) < std::tie(b.shape, b.color, b.size);
    });
    return s;
}

std::vector<std::string> words_of(const std::string& s) {
    std::vector<std::string> w;
    std::istringstream in(s);
    for (std::string t; in >> t;) w.push_back(t);
    return w;
}

std::string join(const std::vector<std::string>& w) {
    std::string out;
    for (const auto& t : w) {
        if (!out.empty()) out.push_back(' ');
        out += t;
    }
    return out;
}

const std::vector<std::string>& insert_pool() {
    static const std::vector<std::string> pool = [] {
        std::vector<std::string> p{"a", "and"};
        for (auto c : kColors) p.emplace_back(c);
        for (auto s : kShapes) p.emplace_back(s);
        for (auto s : kSizes) p.emplace_back(s);
        return p;
    }();
    return pool;
}

std::string format_g9(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace

std::string template_caption(const Scene& scene) {
    std::string out;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        if (i > 0) out += " and ";
        out += "a ";
        out += kSizes[static_cast<std::size_t>(o.size)];
        out += ' ';
        out += kColors[static_cast<std::size_t>(o.color)];
        out += ' ';
        out += kShapes[static_cast<std::size_t>(o.shape)];
    }
    return out;
}

ImageFeatures scene_features(const Scene& scene, double sigma, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> jitter(0.0, 1.0);
    ImageFeatures f;
    f.regions = Matrix(scene.objects.size(), kSceneFeatureDim);
    for (std::size_t r = 0; r < scene.objects.size(); ++r) {
        const auto& o = scene.objects[r];
        auto row = f.regions.row(r);
        row[static_cast<std::size_t>(o.color)] = 1.0;
        row[kColors.size() + static_cast<std::size_t>(o.shape)] = 1.0;
        row[kColors.size() + kShapes.size() + static_cast<std::size_t>(o.size)] = 1.0;
        for (double& v : row) v += sigma * jitter(rng);
    }
    return f;
}

Scene scene_from_features(const ImageFeatures& features) {
    if (features.regions.cols() != kSceneFeatureDim) throw Error("invalid features");
    auto argmax = [](std::span<const double> row, std::size_t begin, std::size_t count) {
        std::size_t best = begin;
        for (std::size_t i = begin + 1; i < begin + count; ++i)
            if (row[i] > row[best]) best = i;
        return static_cast<int>(best - begin);
    };
    Scene s;
    for (std::size_t r = 0; r < features.regions.rows(); ++r) {
        auto row = features.regions.row(r);
        SceneObject o;
        o.color = argmax(row, 0, kColors.size());
        o.shape = argmax(row, kColors.size(), kShapes.size());
        o.size = argmax(row, kColors.size() + kShapes.size(), kSizes.size());
        s.objects.push_back(o);
    }
    return s;
}

void NoiseConfig::validate() const {
    auto check = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0)) throw Error(std::string(name) + " must be in [0,1]");
    };
    check(p_mismatch, "p_mismatch");
    check(p_delete, "p_delete");
    check(p_shuffle, "p_shuffle");
    check(p_insert, "p_insert");
    if (!(sigma_feature >= 0.0) || !std::isfinite(sigma_feature)) throw Error("sigma_feature must be >= 0");
}

std::vector<CorpusRecord> generate_corpus(std::size_t n, const NoiseConfig& noise, std::uint64_t seed,
                                          std::int64_t first_id) {
    if (n == 0) throw Error("corpus size must be at least 1");
    noise.validate();
    std::vector<Scene> scenes(n);
    std::vector<std::string> templates(n);
    std::vector<CorpusRecord> records(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto id = first_id + static_cast<std::int64_t>(i);
        std::mt19937_64 rng(derive_seed(seed ^ static_cast<std::uint64_t>(id), kSceneSalt));
        scenes[i] = random_scene(rng);
        templates[i] = template_caption(scenes[i]);
        records[i].id = id;
        records[i].features =
            scene_features(scenes[i], noise.sigma_feature, derive_seed(seed ^ static_cast<std::uint64_t>(id), kJitterSalt));
    }

    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        auto& rec = records[i];
        std::mt19937_64 rng(derive_seed(seed ^ static_cast<std::uint64_t>(rec.id), kNoiseSalt));
        std::string caption = templates[i];

        if (coin(rng) < noise.p_mismatch) {
            std::string other;
            std::uniform_int_distribution<std::size_t> pick(0, n - 1);
            for (int attempt = 0; attempt < 64 && other.empty(); ++attempt) {
                const std::size_t j = pick(rng);
                if (j != i && templates[j] != caption) other = templates[j];
            }
            for (std::size_t k = 0; k < n && other.empty(); ++k)
                if (templates[k] != caption) other = templates[k];
            while (other.empty()) {
                const std::string fresh = template_caption(random_scene(rng));
                if (fresh != caption) other = fresh;
            }
            caption = other;
            rec.noise_ops.emplace_back("mismatch");
        }

        auto words = words_of(caption);
        if (noise.p_delete > 0.0) {
            std::vector<std::string> kept;
            for (auto& w : words)
                if (!(coin(rng) < noise.p_delete)) kept.push_back(w);
            if (kept.size() != words.size()) {
                words = std::move(kept);
                rec.noise_ops.emplace_back("delete");
            }
        }
        if (coin(rng) < noise.p_shuffle) {
            auto shuffled = words;
            std::shuffle(shuffled.begin(), shuffled.end(), rng);
            if (shuffled != words) {
                words = std::move(shuffled);
                rec.noise_ops.emplace_back("shuffle");
            }
        }
        if (coin(rng) < noise.p_insert) {
            const auto& pool = insert_pool();
            std::uniform_int_distribution<std::size_t> which(0, pool.size() - 1);
            std::uniform_int_distribution<std::size_t> where(0, words.size());
            const std::string w = pool[which(rng)];
            words.insert(words.begin() + static_cast<std::ptrdiff_t>(where(rng)), w);
            rec.noise_ops.emplace_back("insert");
        }
        rec.caption = join(words);
        // A later operator can undo an earlier one (rare); the flag tracks the outcome.
        if (rec.caption == templates[i]) rec.noise_ops.clear();
        rec.noisy = !rec.noise_ops.empty();
    }
    return records;
}

std::string reference_caption(const CorpusRecord& record) {
    return template_caption(scene_from_features(record.features));
}

std::string corpus_record_json(const CorpusRecord& r) {
    std::string out = "{\"id\":" + std::to_string(r.id) + ",\"features\":[";
    for (std::size_t i = 0; i < r.features.regions.rows(); ++i) {
        if (i) out += ',';
        out += '[';
        auto row = r.features.regions.row(i);
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out += ',';
            out += format_g9(row[c]);
        }
        out += ']';
    }
    out += "],\"caption\":" + nlohmann::json(r.caption).dump();
    out += ",\"noisy\":";
    out += r.noisy ? "true" : "false";
    out += ",\"noise_ops\":" + nlohmann::json(r.noise_ops).dump() + "}";
    return out;
}

void write_corpus(const std::vector<CorpusRecord>& records, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write corpus: " + path);
    for (const auto& r : records) f << corpus_record_json(r) << '\n';
    if (!f) throw Error("cannot write corpus: " + path);
}

std::vector<CorpusRecord> parse_corpus(std::string_view text) {
    std::vector<CorpusRecord> out;
    std::size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
        const std::size_t end = std::min(text.find('\n', pos), text.size());
        const std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        const std::string where = " at line " + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            throw Error("malformed record" + where);
        }
        if (!j.is_object()) throw Error("malformed record" + where);
        for (const char* field : {"id", "features", "caption", "noisy", "noise_ops"})
            if (!j.contains(field)) throw Error("schema error" + where + ": missing field '" + field + "'");
        CorpusRecord r;
        try {
            r.id = j.at("id").get<std::int64_t>();
            const auto& feats = j.at("features");
            if (!feats.is_array() || feats.empty()) throw Error("schema error" + where + ": features must be a non-empty array");
            const std::size_t cols = feats[0].size();
            r.features.regions = Matrix(feats.size(), cols);
            for (std::size_t i = 0; i < feats.size(); ++i) {
                if (!feats[i].is_array() || feats[i].size() != cols)
                    throw Error("schema error" + where + ": ragged features");
                for (std::size_t c = 0; c < cols; ++c) r.features.regions(i, c) = feats[i][c].get<double>();
            }
            r.caption = j.at("caption").get<std::string>();
            r.noisy = j.at("noisy").get<bool>();
            r.noise_ops = j.at("noise_ops").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw Error("schema error" + where + ": " + e.what());
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<CorpusRecord> read_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read corpus: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_corpus(ss.str());
}

}  // namespace codistill
