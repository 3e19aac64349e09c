#include "codistill/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "codistill/error.hpp"
#include "codistill/random.hpp"

namespace codistill {

namespace {

constexpr std::uint64_t kTeacherInitSalt = 1;
constexpr std::uint64_t kStudentInitSalt = 2;
constexpr std::uint64_t kNoisySamplerSalt = 3;
constexpr std::uint64_t kCleanSamplerSalt = 4;
constexpr std::uint64_t kTeacherPretrainSalt = 5;
constexpr std::uint64_t kStudentPretrainSalt = 6;

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

void scale(ModelParams& p, double s) {
    for (std::size_t i = 0; i < p.count(); ++i) kernels::scale_inplace(p.tensor(i), s);
}

void add(ModelParams& acc, const ModelParams& g) {
    for (std::size_t i = 0; i < acc.count(); ++i) kernels::add_inplace(acc.tensor(i), g.tensor(i));
}

Var ce_spec(Graph& g, const ParamRefs& p, const StreamSample& s) {
    const std::size_t max_pos = p.params().config().max_positions;
    const TokenSeq prefix = teacher_forcing_prefix(s.gt_tokens, max_pos);
    const TokenSeq targets = teacher_forcing_targets(s.gt_tokens, max_pos);
    return cross_entropy_graph(g, logits_graph(g, p, s.features, prefix), targets);
}

StreamMetrics run_substep(Stream stream, TrainState& state, std::span<const StreamSample* const> batch,
                          const Embedder& bridge, const Vocab& vocab, const TrainConfig& config) {
    if (batch.empty()) throw Error("empty batch");
    const auto t0 = std::chrono::steady_clock::now();
    const bool denoise = stream == Stream::Denoise;
    ModelParams& trainable = denoise ? state.student : state.teacher;
    const ModelParams& frozen = denoise ? state.teacher : state.student;
    Adam& opt = denoise ? state.student_opt : state.teacher_opt;
    const LossOptions opts = config.loss_options();

    std::vector<PartnerPass> partners;
    std::vector<std::string> texts;
    partners.reserve(batch.size());
    for (const StreamSample* s : batch) {
        partners.push_back(partner_decode(frozen, s->features, vocab, opts.max_decode_len));
        texts.push_back(s->gt_caption);
    }
    for (const auto& p : partners) texts.push_back(p.caption);
    const auto emb = bridge.embed_batch(texts);

    StreamMetrics m;
    m.step = state.step + 1;
    m.stream = stream;
    m.w_min = 1.0;
    m.w_max = 0.0;
    ModelParams grad_sum(trainable.config());
    const std::size_t k = batch.size();
    for (std::size_t i = 0; i < k; ++i) {
        const double w = coherence_weight(emb[i], emb[k + i]);
        StreamResult r;
        try {
            r = stream_loss(stream, trainable, frozen, *batch[i], partners[i], w, opts, true);
        } catch (const Error& e) {
            if (std::string_view(e.what()) == "diverged")
                throw Error("diverged at step " + std::to_string(m.step));
            throw;
        }
        add(grad_sum, r.grad);
        m.loss += r.report.total;
        m.ce += r.report.ce_term;
        m.kl += r.report.kl_term;
        m.w_mean += w;
        m.w_min = std::min(m.w_min, w);
        m.w_max = std::max(m.w_max, w);
        m.samples.push_back({m.step, stream, batch[i]->id, batch[i]->corrupted, w, r.report.ce_term,
                             r.report.kl_term, r.report.total, r.report.partner_caption});
    }
    const double inv = 1.0 / static_cast<double>(k);
    m.loss *= inv;
    m.ce *= inv;
    m.kl *= inv;
    m.w_mean *= inv;
    scale(grad_sum, inv);
    opt.step(trainable, grad_sum, config.adam);
    if (!trainable.all_finite()) throw Error("diverged at step " + std::to_string(m.step));
    if (config.record_wall_time)
        m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

std::vector<const StreamSample*> gather(std::span<const StreamSample> data, const std::vector<std::size_t>& idx) {
    std::vector<const StreamSample*> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(&data[i]);
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_size == 0) throw Error("batch_size must be >= 1");
    adam.validate();
    if (!(temperature > 0.0)) throw Error("temperature must be > 0");
}

BatchSampler::BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch_size) {
    if (order_.empty()) throw Error("empty dataset");
    std::vector<std::size_t> out;
    out.reserve(batch_size);
    while (out.size() < batch_size) {
        if (cursor_ == order_.size()) {
            std::shuffle(order_.begin(), order_.end(), rng_);
            cursor_ = 0;
        }
        out.push_back(order_[cursor_++]);
    }
    return out;
}

ModelParams pretrain(ModelParams model, std::span<const StreamSample> dataset, std::size_t steps,
                     std::size_t batch_size, const AdamConfig& adam, std::uint64_t seed, const PretrainLog& log) {
    if (dataset.empty()) throw Error("empty dataset");
    if (batch_size == 0) throw Error("batch_size must be >= 1");
    BatchSampler sampler(dataset.size(), seed);
    Adam opt(model);
    for (std::size_t step = 1; step <= steps; ++step) {
        ModelParams grad_sum(model.config());
        double loss = 0.0;
        for (std::size_t i : sampler.next(batch_size)) {
            try {
                auto lg = loss_grad(model, [&](Graph& g, const ParamRefs& p) { return ce_spec(g, p, dataset[i]); });
                loss += lg.loss;
                add(grad_sum, lg.grad);
            } catch (const Error& e) {
                if (std::string_view(e.what()) == "diverged") throw Error("diverged at step " + std::to_string(step));
                throw;
            }
        }
        const double inv = 1.0 / static_cast<double>(batch_size);
        scale(grad_sum, inv);
        opt.step(model, grad_sum, adam);
        if (!model.all_finite()) throw Error("diverged at step " + std::to_string(step));
        if (log) log(step, loss * inv);
    }
    return model;
}

double mean_cross_entropy(const ModelParams& model, std::span<const StreamSample> samples) {
    if (samples.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& s : samples) {
        Graph g;
        sum += g.value(ce_spec(g, ParamRefs::frozen(g, model), s))[0];
    }
    return sum / static_cast<double>(samples.size());
}

StreamMetrics denoise_substep(TrainState& state, std::span<const StreamSample* const> batch, const Embedder& bridge,
                              const Vocab& vocab, const TrainConfig& config) {
    return run_substep(Stream::Denoise, state, batch, bridge, vocab, config);
}

StreamMetrics diversity_substep(TrainState& state, std::span<const StreamSample* const> batch,
                                const Embedder& bridge, const Vocab& vocab, const TrainConfig& config) {
    return run_substep(Stream::Diversity, state, batch, bridge, vocab, config);
}

std::vector<StreamMetrics> codistill_step(TrainState& state, std::span<const StreamSample* const> noisy_batch,
                                          std::span<const StreamSample* const> clean_batch, const Embedder& bridge,
                                          const Vocab& vocab, const TrainConfig& config) {
    std::vector<StreamMetrics> out;
    out.push_back(denoise_substep(state, noisy_batch, bridge, vocab, config));
    out.push_back(diversity_substep(state, clean_batch, bridge, vocab, config));
    ++state.step;
    return out;
}

TrainState initial_state(const ModelConfig& model, const TrainConfig& config, std::size_t n_noisy,
                         std::size_t n_clean) {
    TrainState s;
    s.teacher = init_params(model, derive_seed(config.seed, kTeacherInitSalt));
    s.student = init_params(model, derive_seed(config.seed, kStudentInitSalt));
    s.teacher_opt = Adam(s.teacher);
    s.student_opt = Adam(s.student);
    s.noisy_sampler = BatchSampler(n_noisy, derive_seed(config.seed, kNoisySamplerSalt));
    s.clean_sampler = BatchSampler(n_clean, derive_seed(config.seed, kCleanSamplerSalt));
    return s;
}

TrainResult train_codistill(const ModelConfig& model, const TrainConfig& config,
                            std::span<const StreamSample> noisy, std::span<const StreamSample> clean,
                            const Embedder& bridge, const Vocab& vocab, const TrainHooks& hooks) {
    config.validate();
    model.validate();
    if (noisy.empty() || clean.empty()) throw Error("both datasets must be non-empty");
    for (const auto& s : noisy)
        if (s.origin != Origin::Noisy) throw Error("noisy dataset contains a clean-origin sample: " + s.id);
    for (const auto& s : clean)
        if (s.origin != Origin::Clean) throw Error("clean dataset contains a noisy-origin sample: " + s.id);

    TrainResult result;
    TrainState& st = result.state;
    st = initial_state(model, config, noisy.size(), clean.size());
    st.teacher = pretrain(std::move(st.teacher), clean, config.teacher_pretrain_steps, config.batch_size, config.adam,
                          derive_seed(config.seed, kTeacherPretrainSalt), hooks.on_pretrain);
    st.student = pretrain(std::move(st.student), noisy, config.student_pretrain_steps, config.batch_size, config.adam,
                          derive_seed(config.seed, kStudentPretrainSalt), hooks.on_pretrain);
    if (hooks.on_checkpoint) hooks.on_checkpoint(0, st);

    auto emit = [&](StreamMetrics m) {
        if (hooks.on_metrics) hooks.on_metrics(m);
        result.metrics.push_back(std::move(m));
    };
    auto maybe_checkpoint = [&] {
        if (!hooks.on_checkpoint) return;
        const bool periodic = config.checkpoint_every > 0 && st.step % config.checkpoint_every == 0;
        if (periodic || st.step == config.steps) hooks.on_checkpoint(st.step, st);
    };

    if (config.alternation == Alternation::PerBatch) {
        while (st.step < config.steps) {
            const auto nb = gather(noisy, st.noisy_sampler.next(config.batch_size));
            const auto cb = gather(clean, st.clean_sampler.next(config.batch_size));
            for (auto& m : codistill_step(st, nb, cb, bridge, vocab, config)) emit(std::move(m));
            maybe_checkpoint();
        }
    } else {
        const std::size_t epoch = (noisy.size() + config.batch_size - 1) / config.batch_size;
        while (st.step < config.steps) {
            const std::size_t phase = std::min(epoch, config.steps - st.step);
            const std::size_t start = st.step;
            for (std::size_t i = 0; i < phase; ++i) {
                const auto nb = gather(noisy, st.noisy_sampler.next(config.batch_size));
                emit(denoise_substep(st, nb, bridge, vocab, config));
                ++st.step;
            }
            st.step = start;
            for (std::size_t i = 0; i < phase; ++i) {
                const auto cb = gather(clean, st.clean_sampler.next(config.batch_size));
                emit(diversity_substep(st, cb, bridge, vocab, config));
                ++st.step;
                maybe_checkpoint();
            }
        }
    }
    return result;
}

void write_metrics_header(std::ostream& out) { out << "step,stream,loss,ce,kl,w_mean,w_min,w_max,wall_ms\n"; }

void write_metrics_row(std::ostream& out, const StreamMetrics& m) {
    out << m.step << ',' << stream_name(m.stream) << ',' << fmt(m.loss) << ',' << fmt(m.ce) << ',' << fmt(m.kl)
        << ',' << fmt(m.w_mean) << ',' << fmt(m.w_min) << ',' << fmt(m.w_max) << ',' << fmt(m.wall_ms) << '\n';
}

void write_samples_header(std::ostream& out) { out << "step,stream,id,corrupted,w,ce,kl,total,partner_caption\n"; }

void write_samples_rows(std::ostream& out, const StreamMetrics& m) {
    for (const auto& s : m.samples)
        out << s.step << ',' << stream_name(s.stream) << ',' << csv_quote(s.sample_id) << ','
            << (s.corrupted ? 1 : 0) << ',' << fmt(s.w) << ',' << fmt(s.ce) << ',' << fmt(s.kl) << ','
            << fmt(s.total) << ',' << csv_quote(s.partner_caption) << '\n';
}

}  // namespace codistill
