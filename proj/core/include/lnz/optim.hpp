#pragma once

#include <string>
#include <vector>

#include "lnz/tensor.hpp"

namespace lnz::optim {

// Linear warmup to `peak`, then cosine decay to zero over the remainder.
float lr_at(int64_t step, int64_t total_steps, float peak, float warmup_frac);

struct AdamWConfig {
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
    float grad_clip = 1.0f;  // global norm; <= 0 disables
};

// Decoupled weight decay Adam over a fixed parameter list. Parameters whose
// `decay` flag is false skip the weight-decay term.
class AdamW {
  public:
    struct Slot {
        std::string name;
        Tensor param;
        bool decay = true;
    };

    AdamW(std::vector<Slot> slots, AdamWConfig cfg);

    // Applies one update from the accumulated gradients, then clears them.
    // Throws NumericsError naming the parameter on a non-finite gradient.
    void step(float lr);

    int64_t steps_taken() const { return t_; }
    const std::vector<Slot>& slots() const { return slots_; }

  private:
    std::vector<Slot> slots_;
    AdamWConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace lnz::optim
