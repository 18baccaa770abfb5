#include "lnz/distill.hpp"

#include <chrono>
#include <cmath>

#include "lnz/ops.hpp"
#include "lnz/tape.hpp"

namespace lnz::distill {

void PipelineConfig::validate(const model::ModelConfig& mc) const {
    if (stage1_tokens < 0 || stage2_tokens < 0 || stage3_tokens < 0) {
        throw ConfigError("stage token budgets must be >= 0");
    }
    if (lambda_kl < 0) throw ConfigError("lambda_kl must be >= 0");
    if (batch_seqs < 1 || seq_len < 1) throw ConfigError("batch shape must be positive");
    if (seq_len > mc.seq_len) throw ConfigError("pipeline seq_len exceeds model seq_len");
    for (const auto* ls : {&l1_layers, &l2_layers}) {
        for (int l : *ls) {
            if (l < 0 || l >= mc.n_layers) {
                throw ConfigError("aligned layer " + std::to_string(l) + " out of range");
            }
        }
    }
}

int64_t PipelineConfig::stage_tokens(int stage) const {
    switch (stage) {
        case 1: return stage1_tokens;
        case 2: return stage2_tokens;
        case 3: return stage3_tokens;
        default: throw ConfigError("stage must be 1, 2 or 3");
    }
}

float PipelineConfig::stage_lr(int stage) const {
    switch (stage) {
        case 1: return lr_stage1;
        case 2: return lr_stage2;
        default: return lr_stage3;
    }
}

std::vector<int> PipelineConfig::layers_for(int stage, const model::ModelConfig& mc) const {
    const std::vector<int>& given = stage == 1 ? l1_layers : l2_layers;
    if (!given.empty()) return given;
    std::vector<int> all(static_cast<size_t>(mc.n_layers));
    for (int i = 0; i < mc.n_layers; ++i) all[static_cast<size_t>(i)] = i;
    return all;
}

// ---- losses -----------------------------------------------------------------

namespace {

const Tensor& capture_at(const std::map<int, Tensor>& m, int layer, const char* what) {
    auto it = m.find(layer);
    if (it == m.end()) {
        throw IndexError(std::string("missing ") + what + " capture for layer " +
                         std::to_string(layer));
    }
    return it->second;
}

}  // namespace

Tensor loss_attention_output(const model::Activations& student, const model::Activations& teacher,
                             const std::vector<int>& l1) {
    if (l1.empty()) throw ConfigError("empty aligned-layer set");
    Tensor total;
    for (int l : l1) {
        const Tensor& as = capture_at(student.attn_out, l, "student attn-out");
        const Tensor& at = capture_at(teacher.attn_out, l, "teacher attn-out");
        Tensor mse = ops::mean(ops::square(ops::sub(as, at)));
        total = total.defined() ? ops::add(total, mse) : mse;
    }
    return ops::scale(total, 1.f / static_cast<float>(l1.size()));
}

Tensor loss_hidden(const model::Activations& student, const model::Activations& teacher,
                   const std::vector<int>& l2, bool squared) {
    if (l2.empty()) throw ConfigError("empty aligned-layer set");
    Tensor total;
    for (int l : l2) {
        const Tensor& hs = capture_at(student.hidden, l, "student hidden");
        const Tensor& ht = capture_at(teacher.hidden, l, "teacher hidden");
        Tensor sq = ops::sum_axis(ops::square(ops::sub(hs, ht)), 1);  // [T] squared norms
        Tensor per_pos = squared ? sq : ops::sqrt(sq);
        Tensor m = ops::mean(per_pos);
        total = total.defined() ? ops::add(total, m) : m;
    }
    return ops::scale(total, 1.f / static_cast<float>(l2.size()));
}

Tensor loss_kd(const Tensor& student_logits, const Tensor& teacher_logits,
               std::span<const int32_t> targets, float lambda_kl,
               std::span<const uint8_t> target_mask, Tensor* ce_out, Tensor* kl_out) {
    Tensor ce = ops::masked_softmax_cross_entropy(student_logits, targets, target_mask);
    Tensor kl = ops::kl_teacher_student(teacher_logits, student_logits, target_mask);
    if (ce_out) *ce_out = ce;
    if (kl_out) *kl_out = kl;
    return ops::add(ce, ops::scale(kl, lambda_kl));
}

// ---- stage runner -------------------------------------------------------------

namespace {

enum class LossKind { AttnOut, Hidden, Kd, CeOnly };

struct LoopSpec {
    int stage_id;
    LossKind loss;
    const model::Model* teacher;  // null for CeOnly
    float lr_peak;
    int64_t budget;
    const std::function<bool(int64_t)>* should_stop = nullptr;
};

StageReport train_loop(const LoopSpec& spec, model::Model& student, data::BatchStream& stream,
                       const PipelineConfig& cfg, const StageHooks& hooks) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    StageReport report;
    report.stage = spec.stage_id;
    if (spec.budget == 0) return report;

    const model::ModelConfig& mc = student.config;
    const int64_t B = cfg.batch_seqs, T = cfg.seq_len;
    const int64_t tokens_per_step = B * T;
    const int64_t total_steps = (spec.budget + tokens_per_step - 1) / tokens_per_step;

    // Trainable set: stage 1 touches the token-mixing pathway only.
    const bool mixer_only = spec.loss == LossKind::AttnOut;
    std::vector<optim::AdamW::Slot> slots;
    for (auto& [name, t] : student.params) {
        const bool trainable = !mixer_only || model::Model::is_mixer_path_param(name);
        t.set_requires_grad(trainable);
        if (trainable) {
            slots.push_back({name, t, !model::Model::is_no_decay_param(name)});
        }
    }
    optim::AdamW opt(std::move(slots), cfg.adam);

    const std::vector<int> layers = cfg.layers_for(spec.stage_id, mc);
    std::set<int> capture(layers.begin(), layers.end());

    std::vector<int32_t> tokens;
    std::vector<uint8_t> mask;
    std::vector<int32_t> targets(static_cast<size_t>(tokens_per_step));
    std::vector<uint8_t> tmask(static_cast<size_t>(tokens_per_step));
    int64_t next_ckpt =
        (student.cursor.tokens_seen / cfg.checkpoint_every_tokens + 1) * cfg.checkpoint_every_tokens;

    for (int64_t step = 0; step < total_steps; ++step) {
        if (!stream.next(B, T, tokens, &mask)) {
            throw AssetError("data stream exhausted after " +
                             std::to_string(report.tokens_consumed) + " of " +
                             std::to_string(spec.budget) + " budgeted tokens");
        }
        // Next-token targets within each sequence; the final position of a
        // sequence predicts nothing.
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t t = 0; t < T; ++t) {
                const size_t i = static_cast<size_t>(b * T + t);
                if (t + 1 < T) {
                    targets[i] = tokens[i + 1];
                    tmask[i] = mask.empty() ? 1 : mask[i + 1];
                } else {
                    targets[i] = 0;
                    tmask[i] = 0;
                }
            }
        }

        metrics::MetricRecord rec;
        rec.stage = spec.stage_id;
        Tape tape;
        Tensor loss;
        switch (spec.loss) {
            case LossKind::AttnOut: {
                model::Activations ta, sa;
                {
                    NoGradGuard ng;
                    model::teacher_forward(*spec.teacher, tokens, B, capture, &ta);
                }
                model::student_forward(student, tokens, B, capture, &sa);
                loss = loss_attention_output(sa, ta, layers);
                rec.loss_ao = loss.item();
                break;
            }
            case LossKind::Hidden: {
                model::Activations ta, sa;
                {
                    NoGradGuard ng;
                    model::teacher_forward(*spec.teacher, tokens, B, capture, &ta);
                }
                model::student_forward(student, tokens, B, capture, &sa);
                loss = loss_hidden(sa, ta, layers, cfg.h2h_squared);
                rec.loss_h2h = loss.item();
                break;
            }
            case LossKind::Kd: {
                Tensor tl;
                {
                    NoGradGuard ng;
                    tl = model::teacher_forward(*spec.teacher, tokens, B);
                }
                Tensor sl = model::forward(student, tokens, B);
                Tensor ce, kl;
                loss = loss_kd(sl, tl, targets, cfg.lambda_kl, tmask, &ce, &kl);
                rec.loss_ce = ce.item();
                rec.loss_kl = kl.item();
                rec.ppl = std::exp(ce.item());
                break;
            }
            case LossKind::CeOnly: {
                Tensor sl = model::forward(student, tokens, B);
                loss = ops::masked_softmax_cross_entropy(sl, targets, tmask);
                rec.loss_ce = loss.item();
                rec.ppl = std::exp(loss.item());
                break;
            }
        }
        tape.backward(loss);
        opt.step(optim::lr_at(step, total_steps, spec.lr_peak, cfg.warmup_frac));

        report.tokens_consumed += tokens_per_step;
        student.cursor.tokens_seen += tokens_per_step;
        const bool last = step + 1 == total_steps;
        if (step % cfg.metrics_every == 0 || last) {
            rec.wall_ms =
                std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            rec.tokens_seen = student.cursor.tokens_seen;
            report.records.push_back(rec);
            if (hooks.metrics_csv) metrics::write_csv_row(*hooks.metrics_csv, rec);
        }
        if (hooks.on_checkpoint && (student.cursor.tokens_seen >= next_ckpt || last)) {
            while (next_ckpt <= student.cursor.tokens_seen) next_ckpt += cfg.checkpoint_every_tokens;
            hooks.on_checkpoint(student, student.cursor.tokens_seen);
        }
        if (spec.should_stop && *spec.should_stop && (*spec.should_stop)(student.cursor.tokens_seen)) {
            break;
        }
    }
    return report;
}

}  // namespace

StageReport run_stage(int stage, const model::Model& teacher, model::Model& student,
                      data::BatchStream& stream, const PipelineConfig& cfg,
                      const StageHooks& hooks) {
    if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
    cfg.validate(student.config);
    if (!student.is_student()) throw CapabilityError("run_stage needs a student model");
    if (teacher.is_student()) throw CapabilityError("run_stage teacher must be a teacher model");
    if (student.cursor.stage != stage - 1) {
        throw StateError("stage " + std::to_string(stage) + " requires a student at stage " +
                         std::to_string(stage - 1) + ", checkpoint is at stage " +
                         std::to_string(student.cursor.stage));
    }
    LoopSpec spec;
    spec.stage_id = stage;
    spec.loss = stage == 1 ? LossKind::AttnOut : (stage == 2 ? LossKind::Hidden : LossKind::Kd);
    spec.teacher = &teacher;
    spec.lr_peak = cfg.stage_lr(stage);
    spec.budget = cfg.stage_tokens(stage);
    StageReport rep = train_loop(spec, student, stream, cfg, hooks);
    student.cursor.stage = stage;
    return rep;
}

StageReport train_lm(model::Model& m, data::BatchStream& stream, int64_t budget_tokens,
                     float lr_peak, const PipelineConfig& cfg, const StageHooks& hooks,
                     const std::function<bool(int64_t)>& should_stop) {
    LoopSpec spec{0, LossKind::CeOnly, nullptr, lr_peak, budget_tokens, &should_stop};
    return train_loop(spec, m, stream, cfg, hooks);
}

std::vector<StageReport> run_regime(Regime regime, model::Model& student,
                                    const RegimeAssets& assets, const PipelineConfig& cfg,
                                    const StageHooks& hooks) {
    cfg.validate(student.config);
    std::vector<StageReport> reports;
    if (regime == Regime::A) {
        if (cfg.lambda_kl != 0.f) {
            throw ConfigError("regime A uses no teacher; lambda_kl must be 0");
        }
        if (assets.teacher) throw ConfigError("regime A takes no teacher model");
        if (!assets.instruct) throw AssetError("regime A requires instruction data");
        if (student.cursor.stage != 3) {
            throw AssetError("regime A requires a fully distilled student (stage 3)");
        }
        LoopSpec spec{3, LossKind::CeOnly, nullptr, cfg.stage_lr(3), cfg.stage_tokens(3)};
        reports.push_back(train_loop(spec, student, *assets.instruct, cfg, hooks));
        return reports;
    }
    // Regime B: alignment stages against the instruction-tuned teacher on
    // raw data, then the distillation loss on instruction data.
    if (!assets.teacher) throw AssetError("regime B requires an instruction-tuned teacher");
    if (!assets.raw || !assets.instruct) throw AssetError("regime B requires raw and instruction data");
    reports.push_back(run_stage(1, *assets.teacher, student, *assets.raw, cfg, hooks));
    reports.push_back(run_stage(2, *assets.teacher, student, *assets.raw, cfg, hooks));
    reports.push_back(run_stage(3, *assets.teacher, student, *assets.instruct, cfg, hooks));
    return reports;
}

}  // namespace lnz::distill
