#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "codistill/tokenizer.hpp"

namespace codistill {

/// Unit-norm caption vector; `is_zero` marks empty or degenerate captions.
struct CaptionEmbedding {
    std::vector<double> vector;
    bool is_zero = true;
};

/// (cos + 1) / 2 clamped to [0, 1]; 0.5 when either side is a zero embedding.
/// Symmetric bit for bit.
double coherence_weight(const CaptionEmbedding& a, const CaptionEmbedding& b);

/// Frozen caption encoder. Implementations must be safe to call concurrently.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::size_t dim() const = 0;
    virtual std::vector<CaptionEmbedding> embed_batch(std::span<const std::string> texts) const = 0;

    CaptionEmbedding embed(std::string_view text) const;
    double coherence(std::string_view a, std::string_view b) const;
};

/// Signed feature hashing of subword unigrams and adjacent bigrams.
///
/// Each unit is hashed twice with 64-bit FNV-1a from two seeded bases: once
/// for the bucket in [0, dim) and once for a +/-1 sign. Term counts are
/// accumulated and the result L2-normalized. Without a vocabulary the units
/// are whitespace words.
class HashedEmbedder final : public Embedder {
public:
    static constexpr std::uint64_t kIndexSeed = 0x9E3779B97F4A7C15ull;
    static constexpr std::uint64_t kSignSeed = 0xC2B2AE3D27D4EB4Full;

    explicit HashedEmbedder(std::size_t dim = 256, std::shared_ptr<const Vocab> vocab = nullptr);

    std::size_t dim() const override { return dim_; }
    std::vector<CaptionEmbedding> embed_batch(std::span<const std::string> texts) const override;
    CaptionEmbedding embed_one(std::string_view text) const;

private:
    std::vector<std::string> units(std::string_view text) const;

    std::size_t dim_;
    std::shared_ptr<const Vocab> vocab_;
};

struct RemoteBridgeConfig {
    std::string endpoint;  // e.g. "http://127.0.0.1:8080"; "/embed" is appended
    std::size_t dim = 256;
    std::chrono::milliseconds timeout{10000};
    int attempts = 3;
    std::chrono::milliseconds backoff_base{200};
    std::size_t max_in_flight = 4;
};

/// One POST {"texts":[...]} -> {"vectors":[[...],...]} exchange with retries.
/// Errors: "bridge unavailable", "bridge dimension mismatch",
/// "bridge returned invalid vector", "bridge returned malformed response".
std::vector<CaptionEmbedding> remote_embed_batch(const RemoteBridgeConfig& config,
                                                 std::span<const std::string> texts);

/// Embedder backed by a remote embedding service; concurrent callers share a
/// bound of `max_in_flight` outstanding requests.
class RemoteEmbedder final : public Embedder {
public:
    explicit RemoteEmbedder(RemoteBridgeConfig config);
    ~RemoteEmbedder() override;

    std::size_t dim() const override { return config_.dim; }
    std::vector<CaptionEmbedding> embed_batch(std::span<const std::string> texts) const override;

private:
    struct Limiter;
    RemoteBridgeConfig config_;
    std::unique_ptr<Limiter> limiter_;
};

}  // namespace codistill
