#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "codistill/datagen.hpp"
#include "codistill/model.hpp"
#include "codistill/semantic_bridge.hpp"
#include "codistill/tokenizer.hpp"

namespace codistill {

using Words = std::vector<std::string>;

Words split_words(const std::string& caption);

/// Corpus BLEU-4: uniform weights over 1..4-gram clipped precisions, add-one
/// smoothing on any order with zero matches, brevity penalty exp(1 - r/c)
/// when c < r (closest reference length, shorter on ties). An empty
/// candidate corpus scores 0.
double bleu4(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references);

/// Mann-Whitney AUC of (1 - w) as a detector of noisy == true; ties count 0.5.
/// Throws Error("degenerate labels") unless both classes are present.
double coherence_auc(std::span<const double> weights, const std::vector<bool>& noisy);

struct EvalSample {
    std::int64_t id = 0;
    std::string candidate;
    double w = 0.5;
    bool noisy = false;
};

struct EvalReport {
    double bleu4 = 0.0;
    std::optional<double> auc;  // present only when both classes occur
    std::size_t n_samples = 0;
    std::vector<EvalSample> per_sample;

    nlohmann::json to_json() const;
    /// "bleu4=<x> auc=<y> n=<k>" (auc=na when absent)
    std::string summary() const;
};

/// Greedy-decodes each record, scores BLEU-4 against the template caption of
/// the record's scene, and w between the decode and the record's caption.
EvalReport evaluate_model(const ModelParams& params, const std::vector<CorpusRecord>& corpus, const Embedder& bridge,
                          const Vocab& vocab, std::size_t max_len);

}  // namespace codistill
