#pragma once

#include <memory>
#include <span>
#include <vector>

#include "lnz/mixer.hpp"
#include "lnz/model.hpp"

namespace lnz::decode {

// Incremental inference: ingest a prompt, then generate greedily one token
// at a time. Teacher engines keep a KV cache (prompt cost grows
// quadratically); student engines keep one MixerState per layer (constant
// per-token cost and memory).
class Engine {
  public:
    virtual ~Engine() = default;
    virtual void reset() = 0;
    virtual void prefill(std::span<const int32_t> tokens) = 0;
    // Greedy argmax over the current logits; feeds the token back.
    virtual int32_t decode_next() = 0;
    virtual const std::vector<float>& logits() const = 0;
    virtual size_t state_bytes() const = 0;
};

class TeacherEngine : public Engine {
  public:
    explicit TeacherEngine(const model::Model& m, bool uncapped = false);
    void reset() override;
    void prefill(std::span<const int32_t> tokens) override;
    int32_t decode_next() override;
    const std::vector<float>& logits() const override { return logits_; }
    size_t state_bytes() const override;

  private:
    void feed(int32_t token);
    const model::Model& m_;
    bool uncapped_;
    int64_t pos_ = 0;
    // Per layer, post-rope keys and values appended per position, [t][H*dh].
    std::vector<std::vector<float>> kcache_, vcache_;
    std::vector<float> logits_;
};

class StudentEngine : public Engine {
  public:
    explicit StudentEngine(const model::Model& m);
    void reset() override;
    void prefill(std::span<const int32_t> tokens) override;
    int32_t decode_next() override;
    const std::vector<float>& logits() const override { return logits_; }
    size_t state_bytes() const override;
    const mixer::MixerState& layer_state(int l) const { return states_[static_cast<size_t>(l)]; }

  private:
    void feed(int32_t token);
    const model::Model& m_;
    std::vector<mixer::MixerState> states_;  // one per layer
    std::vector<float> logits_;
};

std::unique_ptr<Engine> make_engine(const model::Model& m, bool uncapped = false);

// Greedy continuation: prefill `prompt`, generate `n` tokens.
std::vector<int32_t> generate(Engine& eng, std::span<const int32_t> prompt, int n);

}  // namespace lnz::decode
