#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lnz/mixer.hpp"
#include "lnz/tensor.hpp"

namespace lnz::model {

struct ModelConfig {
    int64_t vocab = 512;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int64_t seq_len = 512;
    int mlp_mult = 4;

    int head_dim() const { return d_model / n_heads; }
    int mlp_dim() const { return d_model * mlp_mult; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Training position recorded in checkpoints: which pipeline stage the
// parameters have completed and how many tokens they consumed.
struct TrainingCursor {
    int64_t tokens_seen = 0;
    int stage = 0;  // 0 = fresh / pretrain only; 1..3 = completed stage
    bool operator==(const TrainingCursor&) const = default;
};

// Parameter container. Teacher models have no mixer config; students carry
// the mixer kind and its gate parameters.
class Model {
  public:
    ModelConfig config;
    std::optional<mixer::MixerConfig> mixer_cfg;
    TrainingCursor cursor;

    // Fixed construction order; iteration order defines checkpoint layout
    // and optimizer order.
    std::vector<std::pair<std::string, Tensor>> params;

    bool is_student() const { return mixer_cfg.has_value(); }
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    bool has_param(const std::string& name) const;
    int64_t param_count() const;

    // Gate parameters of one layer collected into the mixer view.
    mixer::GateWeights gate_weights(int layer) const;

    // True for q/k/v/o projections and gate parameters: the set trained in
    // the first alignment stage.
    static bool is_mixer_path_param(const std::string& name);
    static bool is_no_decay_param(const std::string& name);

    void set_all_requires_grad(bool b);
    uint64_t param_hash() const;

    static Model init_teacher(const ModelConfig& cfg, uint64_t seed);
    static Model init_student(const ModelConfig& cfg, const mixer::MixerConfig& mcfg,
                              uint64_t seed);
};

// Captured per-layer activations: the token-mixing block output after its
// output projection (pre-residual) and the residual stream after the block.
struct Activations {
    std::map<int, Tensor> attn_out;  // [B*T, d_model]
    std::map<int, Tensor> hidden;    // [B*T, d_model]
};

// Forward over B sequences of length T (tokens row-major [B*T]); returns
// logits [B*T, vocab]. Captured layers must lie in [0, n_layers).
// Enforces T <= seq_len; `uncapped` lifts the check for recurrent students
// evaluated beyond the training length.
Tensor teacher_forward(const Model& m, std::span<const int32_t> tokens, int64_t batch,
                       const std::set<int>& capture = {}, Activations* acts = nullptr);
Tensor student_forward(const Model& m, std::span<const int32_t> tokens, int64_t batch,
                       const std::set<int>& capture = {}, Activations* acts = nullptr,
                       bool uncapped = false);
Tensor forward(const Model& m, std::span<const int32_t> tokens, int64_t batch,
               const std::set<int>& capture = {}, Activations* acts = nullptr);

// Copy-initializes a student from a teacher: embeddings, norms, projections
// and feed-forward weights are copied bit-for-bit; gate weights are drawn
// from N(0, 0.02^2) under `seed` and gate biases take the per-kind defaults.
Model surgery(const Model& teacher, const mixer::MixerConfig& mcfg, uint64_t seed);

}  // namespace lnz::model
