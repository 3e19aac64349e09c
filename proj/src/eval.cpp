#include "codistill/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <sstream>

#include "codistill/error.hpp"

namespace codistill {

Words split_words(const std::string& caption) {
    Words w;
    std::istringstream in(normalize_text(caption));
    for (std::string t; in >> t;) w.push_back(t);
    return w;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Words& w, std::size_t n) {
    NgramCounts out;
    for (std::size_t i = 0; i + n <= w.size(); ++i) ++out[Words(w.begin() + i, w.begin() + i + n)];
    return out;
}

}  // namespace

double bleu4(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references) {
    if (candidates.size() != references.size()) throw Error("bleu4 length mismatch");
    std::size_t matches[4] = {0, 0, 0, 0};
    std::size_t totals[4] = {0, 0, 0, 0};
    std::size_t cand_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const Words& cand = candidates[i];
        const auto& refs = references[i];
        if (refs.empty()) throw Error("bleu4 requires at least one reference per candidate");
        cand_len += cand.size();
        std::size_t best = refs[0].size();
        for (const auto& r : refs) {
            const auto diff = [&](std::size_t len) {
                return len > cand.size() ? len - cand.size() : cand.size() - len;
            };
            if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best)) best = r.size();
        }
        ref_len += best;
        for (std::size_t n = 1; n <= 4; ++n) {
            const NgramCounts c = ngrams(cand, n);
            NgramCounts max_ref;
            for (const auto& r : refs)
                for (const auto& [g, k] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], k);
            for (const auto& [g, k] : c) {
                totals[n - 1] += k;
                auto it = max_ref.find(g);
                if (it != max_ref.end()) matches[n - 1] += std::min(k, it->second);
            }
        }
    }
    if (cand_len == 0) return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 0; n < 4; ++n) {
        const double p = matches[n] == 0 ? 1.0 / static_cast<double>(totals[n] + 1)
                                         : static_cast<double>(matches[n]) / static_cast<double>(totals[n]);
        log_sum += std::log(p);
    }
    const double bp = cand_len < ref_len
                          ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len))
                          : 1.0;
    return bp * std::exp(log_sum / 4.0);
}

double coherence_auc(std::span<const double> weights, const std::vector<bool>& noisy) {
    if (weights.size() != noisy.size()) throw Error("auc length mismatch");
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < weights.size(); ++i) (noisy[i] ? pos : neg).push_back(1.0 - weights[i]);
    if (pos.empty() || neg.empty()) throw Error("degenerate labels");
    std::sort(neg.begin(), neg.end());
    double wins = 0.0;
    for (double s : pos) {
        const auto lo = std::lower_bound(neg.begin(), neg.end(), s);
        const auto hi = std::upper_bound(neg.begin(), neg.end(), s);
        wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
    }
    return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["bleu4"] = bleu4;
    j["auc"] = auc ? nlohmann::json(*auc) : nlohmann::json(nullptr);
    j["n_samples"] = n_samples;
    j["per_sample"] = nlohmann::json::array();
    for (const auto& s : per_sample)
        j["per_sample"].push_back({{"id", s.id}, {"candidate", s.candidate}, {"w", s.w}, {"noisy", s.noisy}});
    return j;
}

std::string EvalReport::summary() const {
    char buf[128];
    if (auc)
        std::snprintf(buf, sizeof buf, "bleu4=%.6f auc=%.6f n=%zu", bleu4, *auc, n_samples);
    else
        std::snprintf(buf, sizeof buf, "bleu4=%.6f auc=na n=%zu", bleu4, n_samples);
    return buf;
}

EvalReport evaluate_model(const ModelParams& params, const std::vector<CorpusRecord>& corpus, const Embedder& bridge,
                          const Vocab& vocab, std::size_t max_len) {
    if (corpus.empty()) throw Error("evaluation corpus is empty");
    EvalReport report;
    std::vector<Words> cands;
    std::vector<std::vector<Words>> refs;
    std::vector<std::string> texts;
    for (const auto& rec : corpus) {
        try {
            const std::string caption = vocab.decode(greedy_decode(params, rec.features, max_len));
            cands.push_back(split_words(caption));
            refs.push_back({split_words(reference_caption(rec))});
            report.per_sample.push_back({rec.id, caption, 0.5, rec.noisy});
            texts.push_back(caption);
        } catch (const Error& e) {
            throw Error("record " + std::to_string(rec.id) + ": " + e.what());
        }
    }
    for (const auto& rec : corpus) texts.push_back(rec.caption);
    const auto emb = bridge.embed_batch(texts);
    const std::size_t n = corpus.size();
    std::vector<double> ws;
    std::vector<bool> flags;
    for (std::size_t i = 0; i < n; ++i) {
        report.per_sample[i].w = coherence_weight(emb[n + i], emb[i]);
        ws.push_back(report.per_sample[i].w);
        flags.push_back(corpus[i].noisy);
    }
    report.bleu4 = bleu4(cands, refs);
    report.n_samples = n;
    const bool both = std::any_of(flags.begin(), flags.end(), [](bool b) { return b; }) &&
                      std::any_of(flags.begin(), flags.end(), [](bool b) { return !b; });
    if (both) report.auc = coherence_auc(ws, flags);
    return report;
}

}  // namespace codistill
