#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "codistill/autodiff.hpp"
#include "codistill/tensor.hpp"
#include "codistill/tokenizer.hpp"

namespace codistill {

// Encoder-decoder captioner shape. `layers` applies to both stacks.
struct ModelConfig {
    std::size_t layers = 2;
    std::size_t embed_dim = 64;
    std::size_t heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t vocab_size = 512;
    std::size_t max_positions = 32;
    std::size_t feature_dim = 17;

    /// Throws Error on a non-positive field or embed_dim not divisible by heads.
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Region feature vectors conditioning one caption (an unordered set).
struct ImageFeatures {
    Matrix regions;  // [num_regions x feature_dim]
};

/// Row t is the next-token distribution after prefix position t.
using SoftmaxSequence = Matrix;

// Named tensors of one captioner in a fixed layout order. Gradients use the
// same type so they line up index for index.
class ModelParams {
public:
    ModelParams() = default;
    explicit ModelParams(const ModelConfig& config);  // zero-filled

    const ModelConfig& config() const { return config_; }
    std::size_t count() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    Matrix& tensor(std::size_t i) { return tensors_[i]; }
    const Matrix& tensor(std::size_t i) const { return tensors_[i]; }
    /// Throws Error for an unknown name.
    const Matrix& at(const std::string& name) const;
    Matrix& at(const std::string& name);

    std::size_t num_scalars() const;
    bool all_finite() const;

    friend bool operator==(const ModelParams&, const ModelParams&) = default;

private:
    ModelConfig config_;
    std::vector<std::string> names_;
    std::vector<Matrix> tensors_;
};

/// Xavier-uniform weights, zero biases, unit layer-norm gains.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Validates regions against the config; Error("invalid features") otherwise.
void check_features(const ModelConfig& config, const ImageFeatures& features);

/// Parameter leaves of one model bound into a graph.
class ParamRefs {
public:
    static ParamRefs trainable(Graph& g, const ModelParams& params);
    static ParamRefs frozen(Graph& g, const ModelParams& params);

    Var operator[](std::size_t i) const { return vars_[i]; }
    const ModelParams& params() const { return *params_; }
    std::size_t count() const { return vars_.size(); }

private:
    const ModelParams* params_ = nullptr;
    std::vector<Var> vars_;
};

/// Encoder output [regions x embed_dim].
Var encode_graph(Graph& g, const ParamRefs& p, const ImageFeatures& features);
/// Decoder logits [prefix.size() x vocab_size] with causal self-attention.
/// `prefix` starts with BOS.
Var decode_logits_graph(Graph& g, const ParamRefs& p, Var memory, std::span<const TokenId> prefix);
/// encode_graph + decode_logits_graph with input validation.
Var logits_graph(Graph& g, const ParamRefs& p, const ImageFeatures& features, std::span<const TokenId> prefix);

/// Plain logits / probabilities for a BOS-prefixed token sequence.
Matrix forward_logits(const ModelParams& params, const ImageFeatures& features, std::span<const TokenId> prefix);
SoftmaxSequence forward(const ModelParams& params, const ImageFeatures& features, std::span<const TokenId> prefix);

// One-token-at-a-time decoder with self-attention key/value caches.
class IncrementalDecoder {
public:
    IncrementalDecoder(const ModelParams& params, const ImageFeatures& features);

    /// Feeds the next token and returns its 1 x vocab logits row.
    Matrix step(TokenId token);
    std::size_t position() const { return position_; }

private:
    const ModelParams& params_;
    std::vector<Matrix> cross_k_, cross_v_;
    std::vector<Matrix> self_k_, self_v_;
    std::size_t position_ = 0;
};

/// Greedy argmax decoding from BOS; ties go to the smallest id. Stops at EOS
/// or after `max_len` tokens; the result excludes BOS and EOS.
TokenSeq greedy_decode(const ModelParams& params, const ImageFeatures& features, std::size_t max_len);
/// Same decoding by full recomputation each step (reference for the cache).
TokenSeq greedy_decode_uncached(const ModelParams& params, const ImageFeatures& features, std::size_t max_len);

struct LossGrad {
    double loss = 0.0;
    ModelParams grad;
};

/// Builds a scalar on a fresh graph in which `params` are the only trainable
/// leaves and returns its value and exact gradient. Error("diverged") if the
/// loss or any gradient entry is non-finite.
using LossSpec = std::function<Var(Graph&, const ParamRefs&)>;
LossGrad loss_grad(const ModelParams& params, const LossSpec& spec);

// Checkpoint: "CODIST01", then per tensor (u32 name length, name, u32 rank,
// u32 dims..., f32 payload), then a u64 FNV-1a of all preceding bytes. All
// integers little-endian.
std::string checkpoint_bytes(const ModelParams& params);
ModelParams checkpoint_from_bytes(std::string_view bytes, const ModelConfig& config);
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path, const ModelConfig& config);

}  // namespace codistill
