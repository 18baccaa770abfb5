#include "lnz/optim.hpp"

#include <cmath>
#include <numbers>

namespace lnz::optim {

float lr_at(int64_t step, int64_t total_steps, float peak, float warmup_frac) {
    if (total_steps <= 0) return 0.f;
    const auto warmup = static_cast<int64_t>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
    if (warmup > 0 && step < warmup) {
        return peak * static_cast<float>(step) / static_cast<float>(warmup);
    }
    const double span = std::max<int64_t>(total_steps - warmup, 1);
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return peak * 0.5f * (1.f + static_cast<float>(std::cos(std::numbers::pi * progress)));
}

AdamW::AdamW(std::vector<Slot> slots, AdamWConfig cfg) : slots_(std::move(slots)), cfg_(cfg) {
    m_.reserve(slots_.size());
    v_.reserve(slots_.size());
    for (const Slot& s : slots_) {
        m_.emplace_back(static_cast<size_t>(s.param.numel()), 0.f);
        v_.emplace_back(static_cast<size_t>(s.param.numel()), 0.f);
    }
}

void AdamW::step(float lr) {
    ++t_;
    // Global gradient norm for clipping; missing grads count as zero.
    float clip_scale = 1.f;
    if (cfg_.grad_clip > 0.f) {
        double sq = 0;
        for (Slot& s : slots_) {
            if (!s.param.has_grad()) continue;
            for (float g : s.param.grad()) sq += double(g) * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg_.grad_clip) clip_scale = static_cast<float>(cfg_.grad_clip / norm);
    }
    const float bc1 = 1.f - std::pow(cfg_.beta1, static_cast<float>(t_));
    const float bc2 = 1.f - std::pow(cfg_.beta2, static_cast<float>(t_));
    for (size_t i = 0; i < slots_.size(); ++i) {
        Slot& s = slots_[i];
        if (!s.param.has_grad()) continue;
        auto g = s.param.grad();
        float* p = s.param.data();
        float* m = m_[i].data();
        float* v = v_[i].data();
        const int64_t n = s.param.numel();
        for (int64_t j = 0; j < n; ++j) {
            float gj = g[static_cast<size_t>(j)];
            if (!std::isfinite(gj)) {
                throw NumericsError("non-finite gradient in parameter " + s.name);
            }
            gj *= clip_scale;
            m[j] = cfg_.beta1 * m[j] + (1.f - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.f - cfg_.beta2) * gj * gj;
            const float mhat = m[j] / bc1;
            const float vhat = v[j] / bc2;
            float upd = mhat / (std::sqrt(vhat) + cfg_.eps);
            if (s.decay) upd += cfg_.weight_decay * p[j];
            p[j] -= lr * upd;
        }
        s.param.zero_grad();
    }
}

}  // namespace lnz::optim
