#include "lnz/mixer.hpp"

#include <cmath>
#include <cstring>

#include "lnz/ops.hpp"
#include "lnz/tape.hpp"
#include "mixer_lane.hpp"

namespace lnz::mixer {

const char* kind_name(Kind k) {
    switch (k) {
        case Kind::LinearAttn: return "LinearAttn";
        case Kind::RetNet: return "RetNet";
        case Kind::Gla: return "GLA";
        case Kind::MLstm: return "mLSTM";
        case Kind::DeltaNet: return "DeltaNet";
        case Kind::GatedDeltaNet: return "GatedDeltaNet";
        case Kind::Kda: return "KDA";
    }
    return "?";
}

Kind kind_from_name(const std::string& name) {
    for (Kind k : kAllKinds) {
        if (name == kind_name(k)) return k;
    }
    throw ConfigError("unknown mixer kind '" + name + "'");
}

bool is_additive_family(Kind k) {
    return k == Kind::LinearAttn || k == Kind::RetNet || k == Kind::Gla || k == Kind::MLstm;
}

bool is_delta_family(Kind k) {
    return k == Kind::DeltaNet || k == Kind::GatedDeltaNet || k == Kind::Kda;
}

bool has_channel_alpha(Kind k) {
    return k == Kind::Gla || k == Kind::Kda;
}

bool has_scalar_alpha(Kind k) {
    return k == Kind::GatedDeltaNet;
}

bool has_beta(Kind k) {
    return is_delta_family(k);
}

bool has_fi_gates(Kind k) {
    return k == Kind::MLstm;
}

float default_alpha_bias(Kind k) {
    // Fresh gates start near alpha = 1 (slow forgetting) so a new student
    // does not erase context before training shapes the gates.
    if (has_channel_alpha(k)) return 4.f;   // sigmoid(4)^(1/16) ~ 0.9989 per step
    if (has_scalar_alpha(k)) return 6.f;    // sigmoid(6) ~ 0.9975 per step
    return 0.f;
}

void MixerConfig::validate() const {
    if (n_heads < 1 || d_k < 1 || d_v < 1) {
        throw ConfigError("mixer dims must be >= 1");
    }
    if (gate_temperature <= 0.f) throw ConfigError("gate_temperature must be > 0");
    if (!retnet_decays.empty()) {
        if (static_cast<int>(retnet_decays.size()) != n_heads) {
            throw ConfigError("retnet_decays must have one entry per head");
        }
        for (float g : retnet_decays) {
            if (!(g > 0.f && g < 1.f)) throw ConfigError("retnet decay must lie in (0,1)");
        }
    }
}

float MixerConfig::retnet_gamma(int head) const {
    if (!retnet_decays.empty()) return retnet_decays[static_cast<size_t>(head)];
    return 1.f - std::pow(2.f, -5.f - static_cast<float>(head));
}

MixerState MixerState::zeros(const MixerConfig& cfg) {
    MixerState s;
    s.n_heads = cfg.n_heads;
    s.d_k = cfg.d_k;
    s.d_v = cfg.d_v;
    s.S.assign(static_cast<size_t>(cfg.n_heads) * cfg.d_v * cfg.d_k, 0.f);
    s.n.assign(static_cast<size_t>(cfg.n_heads) * cfg.d_k, 0.f);
    s.m.assign(static_cast<size_t>(cfg.n_heads), detail::kNegInf);
    return s;
}

size_t MixerState::byte_size() const {
    return (S.size() + n.size() + m.size()) * sizeof(float);
}

namespace {

void check_state(const MixerConfig& cfg, const MixerState& s) {
    if (s.n_heads != cfg.n_heads || s.d_k != cfg.d_k || s.d_v != cfg.d_v) {
        throw ShapeError("mixer state shape does not match config");
    }
}

// Resolves the per-head gate view and validates presence/size for `kind`.
detail::StepGates head_gates(const MixerConfig& cfg, const GateSignals& g, int h) {
    detail::StepGates out;
    const Kind kind = cfg.kind;
    const size_t H = static_cast<size_t>(cfg.n_heads);
    if (has_channel_alpha(kind)) {
        if (g.alpha.size() != H * static_cast<size_t>(cfg.d_k)) {
            throw ShapeError(std::string(kind_name(kind)) + " needs channel-wise alpha [H*d_k]");
        }
        out.alpha_ch = g.alpha.data() + static_cast<size_t>(h) * cfg.d_k;
    } else if (has_scalar_alpha(kind)) {
        if (g.alpha.size() != H) {
            throw ShapeError(std::string(kind_name(kind)) + " needs scalar alpha [H]");
        }
        out.alpha_sc = g.alpha[static_cast<size_t>(h)];
    }
    if (has_beta(kind)) {
        if (g.beta.size() != H) {
            throw ShapeError(std::string(kind_name(kind)) + " needs beta [H]");
        }
        out.beta = g.beta[static_cast<size_t>(h)];
    }
    if (has_fi_gates(kind)) {
        if (g.f_pre.size() != H || g.i_pre.size() != H) {
            throw ShapeError("mLSTM needs f_pre and i_pre [H]");
        }
        out.f_pre = g.f_pre[static_cast<size_t>(h)];
        out.i_pre = g.i_pre[static_cast<size_t>(h)];
    }
    if (kind == Kind::RetNet) out.gamma = cfg.retnet_gamma(h);
    return out;
}

}  // namespace

GateSignals compute_gates(const MixerConfig& cfg, std::span<const float> x,
                          const GateWeights& w) {
    GateSignals g;
    const int H = cfg.n_heads;
    const int64_t d = static_cast<int64_t>(x.size());
    auto affine = [&](const Tensor& wt, const Tensor& bt, std::vector<float>& out) {
        if (!wt.defined()) throw ShapeError("missing gate weights for " + std::string(kind_name(cfg.kind)));
        if (wt.dim(0) != d) throw ShapeError("gate weight rows do not match model dim");
        const int64_t n = wt.dim(1);
        out.resize(static_cast<size_t>(n));
        ops::raw::vecmat(x.data(), wt.data(), out.data(), d, n);
        for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] += bt.data()[i];
    };
    auto sig = [](std::vector<float>& v) {
        for (float& e : v) e = 1.f / (1.f + std::exp(-e));
    };
    if (cfg.kind == Kind::RetNet) {
        g.alpha.resize(static_cast<size_t>(H));
        for (int h = 0; h < H; ++h) g.alpha[static_cast<size_t>(h)] = cfg.retnet_gamma(h);
        return g;
    }
    if (cfg.kind == Kind::LinearAttn) return g;
    if (has_channel_alpha(cfg.kind)) {
        affine(w.alpha_w, w.alpha_b, g.alpha);
        sig(g.alpha);
        const float p = 1.f / cfg.gate_temperature;
        for (float& e : g.alpha) e = std::pow(e, p);
    } else if (has_scalar_alpha(cfg.kind)) {
        affine(w.alpha_w, w.alpha_b, g.alpha);
        sig(g.alpha);
    }
    if (has_beta(cfg.kind)) {
        affine(w.beta_w, w.beta_b, g.beta);
        sig(g.beta);
    }
    if (has_fi_gates(cfg.kind)) {
        affine(w.f_w, w.f_b, g.f_pre);
        affine(w.i_w, w.i_b, g.i_pre);
    }
    return g;
}

GateTensors compute_gates_batched(const MixerConfig& cfg, const Tensor& x, const GateWeights& w) {
    GateTensors g;
    auto affine = [&](const Tensor& wt, const Tensor& bt) {
        return ops::add_rowbias(ops::matmul(x, wt), bt);
    };
    if (has_channel_alpha(cfg.kind)) {
        g.alpha = ops::pow_const(ops::sigmoid(affine(w.alpha_w, w.alpha_b)),
                                 1.f / cfg.gate_temperature);
    } else if (has_scalar_alpha(cfg.kind)) {
        g.alpha = ops::sigmoid(affine(w.alpha_w, w.alpha_b));
    }
    if (has_beta(cfg.kind)) {
        g.beta = ops::sigmoid(affine(w.beta_w, w.beta_b));
    }
    if (has_fi_gates(cfg.kind)) {
        g.f_pre = affine(w.f_w, w.f_b);
        g.i_pre = affine(w.i_w, w.i_b);
    }
    return g;
}

void step(const MixerConfig& cfg, MixerState& state, const ProjectedToken& tok,
          const GateSignals& gates, std::span<float> out, int64_t step_index) {
    check_state(cfg, state);
    const int H = cfg.n_heads, dk = cfg.d_k, dv = cfg.d_v;
    if (tok.q.size() != static_cast<size_t>(H * dk) || tok.k.size() != static_cast<size_t>(H * dk) ||
        tok.v.size() != static_cast<size_t>(H * dv)) {
        throw ShapeError("projected token does not match mixer config");
    }
    if (out.size() != static_cast<size_t>(H * dv)) {
        throw ShapeError("output span must be [H*d_v]");
    }
    std::vector<float> scratch(static_cast<size_t>(dv));
    for (int h = 0; h < H; ++h) {
        detail::StepGates g = head_gates(cfg, gates, h);
        detail::lane_step(cfg.kind, dk, dv, state.S_head(h),
                          state.n.data() + static_cast<size_t>(h) * dk, &state.m[static_cast<size_t>(h)],
                          tok.q.data() + static_cast<size_t>(h) * dk,
                          tok.k.data() + static_cast<size_t>(h) * dk,
                          tok.v.data() + static_cast<size_t>(h) * dv, g,
                          out.data() + static_cast<size_t>(h) * dv, scratch.data());
        double acc = 0;
        for (int i = 0; i < dv; ++i) acc += out[static_cast<size_t>(h * dv + i)];
        if (!std::isfinite(acc)) {
            throw NumericsError(std::string("numerical instability in ") + kind_name(cfg.kind) +
                                " at step " + std::to_string(step_index));
        }
    }
    op_counters().mixer_state_updates += static_cast<uint64_t>(H);
}

void scan_inplace(const MixerConfig& cfg, std::span<const ProjectedToken> tokens,
                  std::span<const GateSignals> gates, MixerState& state,
                  std::vector<float>& outputs) {
    check_state(cfg, state);
    const size_t T = tokens.size();
    if (gates.size() != T) throw ShapeError("gate count does not match token count");
    outputs.assign(T * static_cast<size_t>(cfg.n_heads) * cfg.d_v, 0.f);
    for (size_t t = 0; t < T; ++t) {
        step(cfg, state, tokens[t], gates[t],
             std::span<float>(outputs.data() + t * static_cast<size_t>(cfg.n_heads) * cfg.d_v,
                              static_cast<size_t>(cfg.n_heads) * cfg.d_v),
             static_cast<int64_t>(t));
    }
}

// Chunkwise-parallel form for the decayed outer-product family. Within a
// chunk the outputs decompose into a cross-chunk read of the carried state
// plus an intra-chunk masked kernel; the carried state is advanced once per
// chunk in closed form.
void scan_chunked(const MixerConfig& cfg, std::span<const ProjectedToken> tokens,
                  std::span<const GateSignals> gates, MixerState& state,
                  std::vector<float>& outputs, int chunk) {
    if (cfg.kind != Kind::LinearAttn && cfg.kind != Kind::RetNet && cfg.kind != Kind::Gla) {
        throw CapabilityError(std::string("scan_chunked supports the additive family only, got ") +
                              kind_name(cfg.kind));
    }
    check_state(cfg, state);
    if (chunk < 1) throw ConfigError("chunk must be >= 1");
    const size_t T = tokens.size();
    if (gates.size() != T) throw ShapeError("gate count does not match token count");
    const int H = cfg.n_heads, dk = cfg.d_k, dv = cfg.d_v;
    outputs.assign(T * static_cast<size_t>(H) * dv, 0.f);

    const size_t C = static_cast<size_t>(chunk);
    std::vector<float> logdec;  // per-channel cumulative log decay within the chunk
    std::vector<float> att;     // intra-chunk masked kernel [c,c]
    for (size_t t0 = 0; t0 < T; t0 += C) {
        const size_t c = std::min(C, T - t0);
        for (int h = 0; h < H; ++h) {
            float* S = state.S_head(h);
            const float gamma = cfg.kind == Kind::RetNet ? cfg.retnet_gamma(h) : 1.f;
            // Cumulative log decays L_i (inclusive of step i's own decay).
            logdec.assign(c * static_cast<size_t>(dk), 0.f);
            for (size_t i = 0; i < c; ++i) {
                float* L = logdec.data() + i * dk;
                const float* prev = i ? logdec.data() + (i - 1) * dk : nullptr;
                for (int j = 0; j < dk; ++j) {
                    float a;
                    if (cfg.kind == Kind::LinearAttn) {
                        a = 1.f;
                    } else if (cfg.kind == Kind::RetNet) {
                        a = gamma;
                    } else {
                        a = gates[t0 + i].alpha[static_cast<size_t>(h * dk + j)];
                    }
                    L[j] = (prev ? prev[j] : 0.f) + std::log(std::max(a, 1e-30f));
                }
            }
            // Intra-chunk kernel A[i][j] = sum_ch q_i k_j exp(L_i - L_j) for j <= i.
            // Token j's write lands after step j's own decay, so its carry to
            // step i is the product of decays over s = j+1..i, i.e. L_i - L_j.
            att.assign(c * c, 0.f);
            for (size_t i = 0; i < c; ++i) {
                const float* qi = tokens[t0 + i].q.data() + static_cast<size_t>(h) * dk;
                const float* Li = logdec.data() + i * dk;
                for (size_t j = 0; j <= i; ++j) {
                    const float* kj = tokens[t0 + j].k.data() + static_cast<size_t>(h) * dk;
                    const float* Lj = logdec.data() + j * dk;
                    float acc = 0.f;
                    for (int ch = 0; ch < dk; ++ch) {
                        acc += qi[ch] * kj[ch] * std::exp(Li[ch] - Lj[ch]);
                    }
                    att[i * c + j] = acc;
                }
            }
            for (size_t i = 0; i < c; ++i) {
                float* out = outputs.data() + (t0 + i) * static_cast<size_t>(H) * dv +
                             static_cast<size_t>(h) * dv;
                // Cross-chunk read: o_i += S0 (Lambda_i .* q_i)
                const float* qi = tokens[t0 + i].q.data() + static_cast<size_t>(h) * dk;
                const float* Li = logdec.data() + i * dk;
                for (int r = 0; r < dv; ++r) {
                    const float* row = S + static_cast<size_t>(r) * dk;
                    float acc = 0.f;
                    for (int ch = 0; ch < dk; ++ch) acc += row[ch] * qi[ch] * std::exp(Li[ch]);
                    out[r] = acc;
                }
                // Intra-chunk contribution
                for (size_t j = 0; j <= i; ++j) {
                    const float a = att[i * c + j];
                    const float* vj = tokens[t0 + j].v.data() + static_cast<size_t>(h) * dv;
                    for (int r = 0; r < dv; ++r) out[r] += a * vj[r];
                }
            }
            // Carried state: S_end = S0 Diag(Lambda_last) + sum_j v_j (k_j .* Lambda_last/Lambda_j)^T
            const float* Llast = logdec.data() + (c - 1) * dk;
            for (int r = 0; r < dv; ++r) {
                float* row = S + static_cast<size_t>(r) * dk;
                for (int ch = 0; ch < dk; ++ch) row[ch] *= std::exp(Llast[ch]);
            }
            for (size_t j = 0; j < c; ++j) {
                const float* kj = tokens[t0 + j].k.data() + static_cast<size_t>(h) * dk;
                const float* vj = tokens[t0 + j].v.data() + static_cast<size_t>(h) * dv;
                const float* Lj = logdec.data() + j * dk;
                for (int r = 0; r < dv; ++r) {
                    float* row = S + static_cast<size_t>(r) * dk;
                    const float vr = vj[r];
                    for (int ch = 0; ch < dk; ++ch) {
                        row[ch] += vr * kj[ch] * std::exp(Llast[ch] - Lj[ch]);
                    }
                }
            }
        }
        op_counters().mixer_state_updates += static_cast<uint64_t>(H) * c;
    }
    for (float v : state.S) {
        if (!std::isfinite(v)) {
            throw NumericsError(std::string("numerical instability in chunked ") +
                                kind_name(cfg.kind));
        }
    }
}

}  // namespace lnz::mixer
