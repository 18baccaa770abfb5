#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lnz/tensor.hpp"

namespace lnz::mixer {

// The seven recurrent token mixers. The first four accumulate outer
// products (optionally decayed); the last three apply the error-correcting
// delta rule S(I - beta k k^T) + beta v k^T.
enum class Kind {
    LinearAttn,
    RetNet,
    Gla,
    MLstm,
    DeltaNet,
    GatedDeltaNet,
    Kda,
};

inline constexpr Kind kAllKinds[] = {Kind::LinearAttn, Kind::RetNet,       Kind::Gla,
                                     Kind::MLstm,      Kind::DeltaNet,     Kind::GatedDeltaNet,
                                     Kind::Kda};

const char* kind_name(Kind k);
Kind kind_from_name(const std::string& name);

bool is_additive_family(Kind k);  // LinearAttn, RetNet, GLA, mLSTM
bool is_delta_family(Kind k);     // DeltaNet, GatedDeltaNet, KDA
// Kinds whose keys are L2-normalized in the projection path.
inline bool normalizes_keys(Kind k) {
    return is_delta_family(k);
}

// Gate granularity per kind.
bool has_channel_alpha(Kind k);  // GLA, KDA: alpha is a d_k vector per head
bool has_scalar_alpha(Kind k);   // GatedDeltaNet
bool has_beta(Kind k);           // delta family
bool has_fi_gates(Kind k);       // mLSTM

struct MixerConfig {
    Kind kind = Kind::DeltaNet;
    int n_heads = 4;
    int d_k = 32;
    int d_v = 32;
    // Temperature for channel-wise gates: alpha = sigmoid(Wx + b)^(1/tau).
    float gate_temperature = 16.f;
    // Per-head retention for RetNet; empty selects 1 - 2^-(5+h).
    std::vector<float> retnet_decays;

    void validate() const;
    float retnet_gamma(int head) const;
};

// Fixed-size recurrent memory. S is laid out [n_heads, d_v, d_k] so the
// readout is the plain product o = S q. The normalizer n and stabilizer m
// are only used by mLSTM; m starts at the -inf sentinel and is replaced on
// the first step.
struct MixerState {
    int n_heads = 0, d_k = 0, d_v = 0;
    std::vector<float> S;  // [H, d_v, d_k]
    std::vector<float> n;  // [H, d_k]
    std::vector<float> m;  // [H]

    static MixerState zeros(const MixerConfig& cfg);
    size_t byte_size() const;
    float* S_head(int h) { return S.data() + static_cast<size_t>(h) * d_v * d_k; }
    const float* S_head(int h) const { return S.data() + static_cast<size_t>(h) * d_v * d_k; }
};

// One token after the q/k/v projections, all heads concatenated.
struct ProjectedToken {
    std::vector<float> q;  // [H * d_k]
    std::vector<float> k;  // [H * d_k]
    std::vector<float> v;  // [H * d_v]
};

// Per-token gate values. Only the fields a kind reads are populated.
struct GateSignals {
    std::vector<float> alpha;  // [H] (scalar gates) or [H * d_k] (channel-wise)
    std::vector<float> beta;   // [H]
    std::vector<float> f_pre;  // [H] mLSTM forget pre-activation
    std::vector<float> i_pre;  // [H] mLSTM input pre-activation
};

// Gate parameters, owned by the student model. Unused entries are
// undefined tensors.
struct GateWeights {
    Tensor alpha_w, alpha_b;  // [d_model, H] / [H], or [d_model, H*d_k] / [H*d_k]
    Tensor beta_w, beta_b;    // [d_model, H] / [H]
    Tensor f_w, f_b;          // [d_model, H] / [H]
    Tensor i_w, i_b;
};

// Default gate bias per kind; applied at surgery time so fresh students
// start from slow forgetting.
float default_alpha_bias(Kind k);

// Gate values from one model-dim input vector (inference path).
GateSignals compute_gates(const MixerConfig& cfg, std::span<const float> x,
                          const GateWeights& w);

// Batched gate tensors from the normalized stream [N, d_model]
// (training path; differentiable).
struct GateTensors {
    Tensor alpha;  // [N,H] or [N,H*dk]
    Tensor beta;   // [N,H]
    Tensor f_pre;  // [N,H]
    Tensor i_pre;  // [N,H]
};
GateTensors compute_gates_batched(const MixerConfig& cfg, const Tensor& x, const GateWeights& w);

// One recurrence step: updates the state in place and writes o = S q
// (mLSTM: o = S q / max(|n.q|, 1)) into `out` ([H * d_v]).
// `step_index` is reported on numerical failure.
void step(const MixerConfig& cfg, MixerState& state, const ProjectedToken& tok,
          const GateSignals& gates, std::span<float> out, int64_t step_index = 0);

// Sequential scan: folds step over t = 1..T starting from `state`.
// Outputs are [T, H, d_v] row-major. Inference path; for the
// differentiable scan see ops-level scan() below.
void scan_inplace(const MixerConfig& cfg, std::span<const ProjectedToken> tokens,
                  std::span<const GateSignals> gates, MixerState& state,
                  std::vector<float>& outputs);

// Chunkwise-parallel evaluation for the additive family
// (LinearAttn/RetNet/GLA). Semantics match scan_inplace within 1e-4.
// Throws CapabilityError for other kinds.
void scan_chunked(const MixerConfig& cfg, std::span<const ProjectedToken> tokens,
                  std::span<const GateSignals> gates, MixerState& state,
                  std::vector<float>& outputs, int chunk);

// Differentiable scan over a batch of independent sequences, starting from
// zero state. q,k: [B,T,H,d_k], v: [B,T,H,d_v], gate tensors as produced by
// compute_gates_batched reshaped to [B,T,...]. Returns outputs [B,T,H,d_v];
// `final_state`, when given, receives the post-scan state of sequence 0.
Tensor scan(const MixerConfig& cfg, const Tensor& q, const Tensor& k, const Tensor& v,
            const GateTensors& gates, MixerState* final_state = nullptr);

}  // namespace lnz::mixer
