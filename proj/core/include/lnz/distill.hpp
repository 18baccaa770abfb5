#pragma once

#include <functional>
#include <ostream>

#include "lnz/data.hpp"
#include "lnz/metrics.hpp"
#include "lnz/model.hpp"
#include "lnz/optim.hpp"

namespace lnz::distill {

// Three-stage alignment schedule. Stage 1 aligns token-mixer outputs
// (mixer-path parameters only), stage 2 aligns residual-stream states,
// stage 3 distills logits with CE + lambda_KL * KL(teacher || student).
struct PipelineConfig {
    int64_t stage1_tokens = 250'000;
    int64_t stage2_tokens = 500'000;
    int64_t stage3_tokens = 4'000'000;
    std::vector<int> l1_layers;  // empty = all layers
    std::vector<int> l2_layers;  // empty = all layers
    float lambda_kl = 1.0f;
    float lr_stage1 = 3e-4f;
    float lr_stage2 = 3e-4f;
    float lr_stage3 = 1e-4f;
    float warmup_frac = 0.05f;
    optim::AdamWConfig adam;
    int64_t batch_seqs = 8;
    int64_t seq_len = 512;
    uint64_t seed = 0x5eed;
    int metrics_every = 10;
    int64_t checkpoint_every_tokens = 500'000;
    // The hidden-state distance is a mean of per-position L2 norms; this
    // switches to squared norms.
    bool h2h_squared = false;

    void validate(const model::ModelConfig& mc) const;
    int64_t stage_tokens(int stage) const;
    float stage_lr(int stage) const;
    std::vector<int> layers_for(int stage, const model::ModelConfig& mc) const;
};

// ---- losses -----------------------------------------------------------------

// Mean over aligned layers of the element-mean squared error between the
// captured mixer-block outputs.
Tensor loss_attention_output(const model::Activations& student, const model::Activations& teacher,
                             const std::vector<int>& l1);

// Mean over aligned layers of the per-position L2 distance between
// residual streams (optionally squared).
Tensor loss_hidden(const model::Activations& student, const model::Activations& teacher,
                   const std::vector<int>& l2, bool squared = false);

// CE + lambda * mean_t KL(teacher_t || student_t); direction is teacher
// first. Out-params receive the unweighted terms.
Tensor loss_kd(const Tensor& student_logits, const Tensor& teacher_logits,
               std::span<const int32_t> targets, float lambda_kl,
               std::span<const uint8_t> target_mask = {}, Tensor* ce_out = nullptr,
               Tensor* kl_out = nullptr);

// ---- stage runner -------------------------------------------------------------

struct StageReport {
    int stage = 0;
    int64_t tokens_consumed = 0;
    std::vector<metrics::MetricRecord> records;
};

struct StageHooks {
    // Called when the cursor crosses a checkpoint-cadence boundary and at
    // stage end.
    std::function<void(const model::Model&, int64_t)> on_checkpoint;
    std::ostream* metrics_csv = nullptr;
};

// Runs one stage to its token budget. Stages must be invoked in order
// 1 -> 2 -> 3 (tracked via the student cursor); the teacher is never
// updated. Throws AssetError if the stream exhausts before the budget.
StageReport run_stage(int stage, const model::Model& teacher, model::Model& student,
                      data::BatchStream& stream, const PipelineConfig& cfg,
                      const StageHooks& hooks = {});

// Plain next-token training (teacher pretraining or teacher instruction
// tuning). Respects the stream's loss mask. `should_stop` is polled with
// the tokens-seen count after every step; returning true ends training
// before the budget (early stop against the entropy floor).
StageReport train_lm(model::Model& m, data::BatchStream& stream, int64_t budget_tokens,
                     float lr_peak, const PipelineConfig& cfg, const StageHooks& hooks = {},
                     const std::function<bool(int64_t)>& should_stop = {});

// ---- adaptation regimes -------------------------------------------------------

enum class Regime { A, B };

// Regime A: masked CE fine-tuning of a distilled student on instruction
// pairs, no teacher (lambda_kl must be 0). Regime B: stages 1-2 against an
// instruction-tuned teacher on raw data, then a stage-3 distillation loss
// on instruction data.
struct RegimeAssets {
    const model::Model* teacher = nullptr;
    data::BatchStream* raw = nullptr;
    data::BatchStream* instruct = nullptr;
};

std::vector<StageReport> run_regime(Regime regime, model::Model& student,
                                    const RegimeAssets& assets, const PipelineConfig& cfg,
                                    const StageHooks& hooks = {});

}  // namespace lnz::distill
