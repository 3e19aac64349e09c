#include "codistill/losses.hpp"

#include <algorithm>
#include <cmath>

#include "codistill/error.hpp"

namespace codistill {

const char* stream_name(Stream s) { return s == Stream::Denoise ? "denoise" : "diversity"; }

StreamSample make_sample(std::string id, ImageFeatures features, std::string caption, const Vocab& vocab,
                         Origin origin, bool corrupted) {
    StreamSample s;
    s.id = std::move(id);
    s.features = std::move(features);
    s.gt_tokens = vocab.encode(caption);
    s.gt_caption = std::move(caption);
    s.origin = origin;
    s.corrupted = corrupted;
    return s;
}

double combine(Stream stream, double w, double ce, double kl) {
    return stream == Stream::Denoise ? w * ce + (1.0 - w) * kl : (1.0 - w) * ce + w * kl;
}

double cross_entropy_seq(const SoftmaxSequence& softmaxes, std::span<const TokenId> targets) {
    if (softmaxes.rows() != targets.size()) throw Error("cross entropy length mismatch");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (targets[t] == kPad) continue;
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= softmaxes.cols())
            throw Error("unknown token id");
        sum -= std::log(std::max(softmaxes(t, static_cast<std::size_t>(targets[t])), kProbFloor));
        ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

double kl_seq(const SoftmaxSequence& p, const SoftmaxSequence& q) {
    if (!p.same_shape(q)) throw Error("kl length mismatch");
    if (p.rows() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t t = 0; t < p.rows(); ++t) {
        double row = 0.0;
        for (std::size_t v = 0; v < p.cols(); ++v) {
            const double pv = p(t, v);
            if (pv == 0.0) continue;
            row += pv * (std::log(std::max(pv, kProbFloor)) - std::log(std::max(q(t, v), kProbFloor)));
        }
        total += row;
    }
    return total / static_cast<double>(p.rows());
}

Var cross_entropy_graph(Graph& g, Var logits, std::span<const TokenId> targets) {
    Matrix probs = kernels::softmax_rows(g.value(logits));
    Matrix out(1, 1);
    out[0] = cross_entropy_seq(probs, targets);
    std::vector<TokenId> tgt(targets.begin(), targets.end());
    const Var in[] = {logits};
    return g.custom(std::move(out), in,
                    [logits, probs = std::move(probs), tgt = std::move(tgt)](Graph& g, const Matrix& go) {
                        const auto n = static_cast<double>(
                            std::count_if(tgt.begin(), tgt.end(), [](TokenId t) { return t != kPad; }));
                        if (n == 0) return;
                        Matrix& gz = g.grad_slot(logits);
                        const double scale = go[0] / n;
                        for (std::size_t t = 0; t < tgt.size(); ++t) {
                            if (tgt[t] == kPad) continue;
                            const auto target = static_cast<std::size_t>(tgt[t]);
                            if (probs(t, target) <= kProbFloor) continue;  // clamped: locally constant
                            for (std::size_t c = 0; c < probs.cols(); ++c) gz(t, c) += scale * probs(t, c);
                            gz(t, target) -= scale;
                        }
                    });
}

Var kl_graph(Graph& g, const SoftmaxSequence& p, Var q_logits, double temperature) {
    Matrix q = kernels::softmax_rows(g.value(q_logits), temperature);
    Matrix out(1, 1);
    out[0] = kl_seq(p, q);
    const Var in[] = {q_logits};
    return g.custom(std::move(out), in,
                    [q_logits, p, q = std::move(q), temperature](Graph& g, const Matrix& go) {
                        if (p.rows() == 0) return;
                        Matrix& gz = g.grad_slot(q_logits);
                        const double scale = go[0] / static_cast<double>(p.rows()) / temperature;
                        for (std::size_t t = 0; t < p.rows(); ++t) {
                            double live_mass = 0.0;
                            for (std::size_t v = 0; v < p.cols(); ++v)
                                if (q(t, v) > kProbFloor) live_mass += p(t, v);
                            for (std::size_t v = 0; v < p.cols(); ++v) {
                                double d = q(t, v) * live_mass;
                                if (q(t, v) > kProbFloor) d -= p(t, v);
                                gz(t, v) += scale * d;
                            }
                        }
                    });
}

TokenSeq teacher_forcing_prefix(const TokenSeq& tokens, std::size_t max_positions) {
    const std::size_t keep = std::min(tokens.size(), max_positions - 1);
    TokenSeq out{kBos};
    out.insert(out.end(), tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(keep));
    return out;
}

TokenSeq teacher_forcing_targets(const TokenSeq& tokens, std::size_t max_positions) {
    const std::size_t keep = std::min(tokens.size(), max_positions - 1);
    TokenSeq out(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(keep));
    out.push_back(kEos);
    return out;
}

PartnerPass partner_decode(const ModelParams& frozen, const ImageFeatures& features, const Vocab& vocab,
                           std::size_t max_len) {
    PartnerPass p;
    p.tokens = greedy_decode(frozen, features, max_len);
    p.caption = vocab.decode(p.tokens);
    return p;
}

StreamResult stream_loss(Stream stream, const ModelParams& trainable, const ModelParams& frozen,
                         const StreamSample& sample, const PartnerPass& partner, double w, const LossOptions& opts,
                         bool want_grad) {
    const Origin expected = stream == Stream::Denoise ? Origin::Noisy : Origin::Clean;
    if (sample.origin != expected)
        throw Error(std::string(stream_name(stream)) + " stream received a sample of the wrong origin");
    if (!(w >= 0.0 && w <= 1.0)) throw Error("coherence weight outside [0,1]");

    const std::size_t max_pos = trainable.config().max_positions;
    const TokenSeq gt_prefix = teacher_forcing_prefix(sample.gt_tokens, max_pos);
    const TokenSeq gt_targets = teacher_forcing_targets(sample.gt_tokens, max_pos);
    const TokenSeq partner_prefix = teacher_forcing_prefix(partner.tokens, max_pos);

    const SoftmaxSequence frozen_soft =
        kernels::softmax_rows(forward_logits(frozen, sample.features, partner_prefix), opts.temperature);
    const double w_ce = stream == Stream::Denoise ? w : 1.0 - w;
    const double w_kl = stream == Stream::Denoise ? 1.0 - w : w;

    StreamResult result;
    auto& r = result.report;
    auto build = [&](Graph& g, const ParamRefs& p) {
        check_features(p.params().config(), sample.features);
        const Var memory = encode_graph(g, p, sample.features);
        const Var ce = cross_entropy_graph(g, decode_logits_graph(g, p, memory, gt_prefix), gt_targets);
        const Var kl = kl_graph(g, frozen_soft, decode_logits_graph(g, p, memory, partner_prefix), opts.temperature);
        r.ce_term = g.value(ce)[0];
        r.kl_term = g.value(kl)[0];
        return g.weighted_sum(ce, w_ce, kl, w_kl);
    };
    if (want_grad) {
        auto lg = loss_grad(trainable, build);
        r.total = lg.loss;
        result.grad = std::move(lg.grad);
    } else {
        Graph g;
        r.total = g.value(build(g, ParamRefs::frozen(g, trainable)))[0];
    }
    r.w = w;
    r.partner_caption = partner.caption;
    r.partner_tokens = partner.tokens;
    return result;
}

namespace {

StreamResult run_stream(Stream stream, const ModelParams& trainable, const ModelParams& frozen,
                        const StreamSample& sample, const Embedder& bridge, const Vocab& vocab,
                        const LossOptions& opts, bool want_grad) {
    const PartnerPass partner = partner_decode(frozen, sample.features, vocab, opts.max_decode_len);
    const double w = bridge.coherence(sample.gt_caption, partner.caption);
    return stream_loss(stream, trainable, frozen, sample, partner, w, opts, want_grad);
}

}  // namespace

StreamResult denoising_loss(const ModelParams& student, const ModelParams& teacher, const StreamSample& sample,
                            const Embedder& bridge, const Vocab& vocab, const LossOptions& opts, bool want_grad) {
    return run_stream(Stream::Denoise, student, teacher, sample, bridge, vocab, opts, want_grad);
}

StreamResult diversity_loss(const ModelParams& teacher, const ModelParams& student, const StreamSample& sample,
                            const Embedder& bridge, const Vocab& vocab, const LossOptions& opts, bool want_grad) {
    return run_stream(Stream::Diversity, teacher, student, sample, bridge, vocab, opts, want_grad);
}

}  // namespace codistill
