#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "codistill/autodiff.hpp"
#include "codistill/model.hpp"
#include "codistill/semantic_bridge.hpp"
#include "codistill/tokenizer.hpp"

namespace codistill {

/// Floor applied to probabilities inside logarithms.
inline constexpr double kProbFloor = 1e-12;

enum class Origin { Noisy, Clean };
enum class Stream { Denoise, Diversity };

const char* stream_name(Stream s);

struct StreamSample {
    std::string id;
    ImageFeatures features;
    std::string gt_caption;
    TokenSeq gt_tokens;  // == vocab.encode(gt_caption)
    Origin origin = Origin::Noisy;
    bool corrupted = false;  // corpus noise flag; metrics only, never used by the losses
};

StreamSample make_sample(std::string id, ImageFeatures features, std::string caption, const Vocab& vocab,
                         Origin origin, bool corrupted = false);

struct StreamLossReport {
    double total = 0.0;
    double ce_term = 0.0;
    double kl_term = 0.0;
    double w = 0.5;
    std::string partner_caption;
    TokenSeq partner_tokens;
};

/// Denoise: w*ce + (1-w)*kl.  Diversity: (1-w)*ce + w*kl.
double combine(Stream stream, double w, double ce, double kl);

/// Mean over non-PAD positions of -log p[t][target_t]. Throws on length mismatch.
double cross_entropy_seq(const SoftmaxSequence& softmaxes, std::span<const TokenId> targets);
/// Mean over positions of KL(p_t || q_t); p is the frozen reference.
double kl_seq(const SoftmaxSequence& p, const SoftmaxSequence& q);

/// cross_entropy_seq(softmax(logits), targets) as a graph node.
Var cross_entropy_graph(Graph& g, Var logits, std::span<const TokenId> targets);
/// kl_seq(p, softmax(q_logits / temperature)) as a graph node; p is a constant.
Var kl_graph(Graph& g, const SoftmaxSequence& p, Var q_logits, double temperature = 1.0);

struct LossOptions {
    std::size_t max_decode_len = 24;
    double temperature = 1.0;  // distillation temperature for both KL sides
};

/// Greedy decode of the frozen partner model for one sample.
struct PartnerPass {
    TokenSeq tokens;
    std::string caption;
};
PartnerPass partner_decode(const ModelParams& frozen, const ImageFeatures& features, const Vocab& vocab,
                           std::size_t max_len);

struct StreamResult {
    StreamLossReport report;
    ModelParams grad;  // shaped like the trainable model; empty when not requested
};

/// Stream loss for a precomputed partner decode and weight. Only `trainable`
/// receives gradients; the frozen model's outputs and w are constants.
StreamResult stream_loss(Stream stream, const ModelParams& trainable, const ModelParams& frozen,
                         const StreamSample& sample, const PartnerPass& partner, double w, const LossOptions& opts,
                         bool want_grad);

/// Student trainable, teacher frozen, sample from the noisy corpus.
StreamResult denoising_loss(const ModelParams& student, const ModelParams& teacher, const StreamSample& sample,
                            const Embedder& bridge, const Vocab& vocab, const LossOptions& opts = {},
                            bool want_grad = false);
/// Teacher trainable, student frozen, sample from the clean corpus.
StreamResult diversity_loss(const ModelParams& teacher, const ModelParams& student, const StreamSample& sample,
                            const Embedder& bridge, const Vocab& vocab, const LossOptions& opts = {},
                            bool want_grad = false);

/// BOS + tokens, truncated so the prefix fits in max_positions.
TokenSeq teacher_forcing_prefix(const TokenSeq& tokens, std::size_t max_positions);
/// tokens + EOS with the same truncation as teacher_forcing_prefix.
TokenSeq teacher_forcing_targets(const TokenSeq& tokens, std::size_t max_positions);

}  // namespace codistill
