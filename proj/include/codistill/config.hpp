#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>

#include <json.hpp>

#include "codistill/datagen.hpp"
#include "codistill/model.hpp"
#include "codistill/semantic_bridge.hpp"
#include "codistill/trainer.hpp"

namespace codistill {

struct BridgeSettings {
    std::string kind = "hashed";  // hashed | remote
    std::size_t dim = 256;
    std::string endpoint;
    std::int64_t timeout_ms = 10000;
    std::size_t max_in_flight = 4;

    void validate() const;
};

// Everything a run needs; serialized as the run directory's config.json.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    NoiseConfig noise = NoiseConfig::noisy_default();
    BridgeSettings bridge;
    std::size_t vocab_target = 512;

    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Overrides fields present in `j`; unknown keys or wrong types throw Error.
void apply_json(RunConfig& c, const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

/// Hashed embedder over `vocab` subwords, or a remote client.
std::unique_ptr<Embedder> make_bridge(const BridgeSettings& s, std::shared_ptr<const Vocab> vocab);

}  // namespace codistill
