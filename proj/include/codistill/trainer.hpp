#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "codistill/losses.hpp"
#include "codistill/model.hpp"
#include "codistill/optim.hpp"
#include "codistill/semantic_bridge.hpp"

namespace codistill {

enum class Alternation { PerBatch, PerEpoch };

struct TrainConfig {
    std::size_t batch_size = 16;
    std::size_t steps = 1000;                   // co-distillation steps (one denoise + one diversity update each)
    std::size_t teacher_pretrain_steps = 1000;  // warm start of the teacher on the clean corpus
    std::size_t student_pretrain_steps = 1000;  // warm start of the student on the noisy corpus
    Alternation alternation = Alternation::PerBatch;
    AdamConfig adam;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  // 0: only warm-start and final checkpoints
    std::size_t max_decode_len = 24;
    double temperature = 1.0;
    bool record_wall_time = false;  // wall_ms stays 0 unless set, keeping metrics byte-reproducible

    void validate() const;
    LossOptions loss_options() const { return {max_decode_len, temperature}; }
};

/// Epoch-wise reshuffled index stream over a dataset.
class BatchSampler {
public:
    BatchSampler() = default;
    BatchSampler(std::size_t n, std::uint64_t seed);
    std::vector<std::size_t> next(std::size_t batch_size);

private:
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::mt19937_64 rng_;
};

struct TrainState {
    ModelParams student;
    ModelParams teacher;
    Adam student_opt;
    Adam teacher_opt;
    std::size_t step = 0;
    BatchSampler noisy_sampler;
    BatchSampler clean_sampler;
};

struct SampleMetrics {
    std::size_t step = 0;
    Stream stream = Stream::Denoise;
    std::string sample_id;
    bool corrupted = false;
    double w = 0.0;
    double ce = 0.0;
    double kl = 0.0;
    double total = 0.0;
    std::string partner_caption;
};

struct StreamMetrics {
    std::size_t step = 0;
    Stream stream = Stream::Denoise;
    double loss = 0.0;
    double ce = 0.0;
    double kl = 0.0;
    double w_mean = 0.0;
    double w_min = 0.0;
    double w_max = 0.0;
    double wall_ms = 0.0;
    std::vector<SampleMetrics> samples;
};

/// Progress callback for long CE runs: (step, mean batch loss).
using PretrainLog = std::function<void(std::size_t, double)>;

/// Plain CE training of one model on its own data for `steps` updates.
/// Throws Error("diverged at step k") on a non-finite loss or update.
ModelParams pretrain(ModelParams model, std::span<const StreamSample> dataset, std::size_t steps,
                     std::size_t batch_size, const AdamConfig& adam, std::uint64_t seed,
                     const PretrainLog& log = {});

/// Mean teacher-forced CE of a model over a set of samples.
double mean_cross_entropy(const ModelParams& model, std::span<const StreamSample> samples);

/// One stream update: partner greedy decodes, one batched bridge call for w,
/// per-sample losses, mean gradient, Adam step on the trainable model only.
StreamMetrics denoise_substep(TrainState& state, std::span<const StreamSample* const> batch, const Embedder& bridge,
                              const Vocab& vocab, const TrainConfig& config);
StreamMetrics diversity_substep(TrainState& state, std::span<const StreamSample* const> batch,
                                const Embedder& bridge, const Vocab& vocab, const TrainConfig& config);

/// Denoise update on the student then diversity update on the teacher;
/// increments state.step and returns one record per sub-step.
std::vector<StreamMetrics> codistill_step(TrainState& state, std::span<const StreamSample* const> noisy_batch,
                                          std::span<const StreamSample* const> clean_batch, const Embedder& bridge,
                                          const Vocab& vocab, const TrainConfig& config);

struct TrainHooks {
    std::function<void(std::size_t step, const TrainState&)> on_checkpoint;
    std::function<void(const StreamMetrics&)> on_metrics;
    PretrainLog on_pretrain;  // called with step counts of both warm starts
};

struct TrainResult {
    TrainState state;
    std::vector<StreamMetrics> metrics;
};

/// Fresh state: both models initialized from seeds derived from config.seed.
TrainState initial_state(const ModelConfig& model, const TrainConfig& config, std::size_t n_noisy,
                         std::size_t n_clean);

/// Warm start (teacher on clean, student on noisy) followed by config.steps
/// co-distillation steps. Checkpoint hook fires at step 0, every
/// checkpoint_every steps, and at the end.
TrainResult train_codistill(const ModelConfig& model, const TrainConfig& config,
                            std::span<const StreamSample> noisy, std::span<const StreamSample> clean,
                            const Embedder& bridge, const Vocab& vocab, const TrainHooks& hooks = {});

/// CSV with columns step,stream,loss,ce,kl,w_mean,w_min,w_max,wall_ms.
void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const StreamMetrics& m);
/// Per-sample rows: step,stream,id,corrupted,w,ce,kl,total,partner_caption.
void write_samples_header(std::ostream& out);
void write_samples_rows(std::ostream& out, const StreamMetrics& m);

}  // namespace codistill
