#include <atomic>
#include <cmath>
#include <cstring>
#include <vector>

#include "lnz/mixer.hpp"
#include "lnz/ops.hpp"
#include "lnz/tape.hpp"
#include "mixer_lane.hpp"

// Differentiable scan over a batch of sequences. Forward stores the lane
// state every kSeg steps; backward recomputes the in-segment trajectory
// from the nearest checkpoint and walks the recurrence in reverse. Lanes
// (sequence, head) are independent, so both passes parallelize over lanes
// with no synchronization inside a sequence.

namespace lnz::mixer {

namespace {

constexpr int kSeg = 64;

using detail::StepGates;

struct GateLayout {
    // Per-(b,t,h) strides into the gate tensors; null when unused.
    const float* alpha = nullptr;
    const float* beta = nullptr;
    const float* f_pre = nullptr;
    const float* i_pre = nullptr;
    bool channel_alpha = false;
};

StepGates gates_at(const MixerConfig& cfg, const GateLayout& gl, int64_t b, int64_t t, int64_t h,
                   int64_t T) {
    StepGates g;
    const int64_t H = cfg.n_heads;
    const int64_t idx = (b * T + t) * H + h;
    if (gl.alpha) {
        if (gl.channel_alpha) {
            g.alpha_ch = gl.alpha + idx * cfg.d_k;
        } else {
            g.alpha_sc = gl.alpha[idx];
        }
    }
    if (gl.beta) g.beta = gl.beta[idx];
    if (gl.f_pre) g.f_pre = gl.f_pre[idx];
    if (gl.i_pre) g.i_pre = gl.i_pre[idx];
    if (cfg.kind == Kind::RetNet) g.gamma = cfg.retnet_gamma(static_cast<int>(h));
    return g;
}

void check_gate_tensor(const Tensor& t, int64_t want, const char* what) {
    if (!t.defined()) {
        throw ShapeError(std::string("mixer scan: missing gate tensor ") + what);
    }
    if (t.numel() != want) {
        throw ShapeError(std::string("mixer scan: gate tensor ") + what + " has " +
                         std::to_string(t.numel()) + " elements, want " + std::to_string(want));
    }
}

// Backward of one lane step. Carries dS (and dn, dm for mLSTM) from state_t
// to state_{t-1}; accumulates into the per-step input grads (null = skip).
void lane_bwd_step(Kind kind, int dk, int dv, const float* __restrict q,
                   const float* __restrict k, const float* __restrict v, const StepGates& g,
                   const float* __restrict S_prev, const float* __restrict S_cur,
                   const float* __restrict n_prev, const float* __restrict n_cur, float m_prev,
                   const float* __restrict dout, float* __restrict dS, float* __restrict dn,
                   float* __restrict dm, float* dq, float* dk_, float* dv_, float* dalpha,
                   float* dbeta, float* df, float* di, float* __restrict u_scr,
                   float* __restrict w_scr) {
    if (kind != Kind::MLstm) {
        // o = S_t q
        for (int i = 0; i < dv; ++i) {
            float* row = dS + static_cast<size_t>(i) * dk;
            const float* crow = S_cur + static_cast<size_t>(i) * dk;
            const float doi = dout[i];
            for (int j = 0; j < dk; ++j) {
                row[j] += doi * q[j];
                if (dq) dq[j] += crow[j] * doi;
            }
        }
    }
    switch (kind) {
        case Kind::LinearAttn:
        case Kind::RetNet: {
            for (int i = 0; i < dv; ++i) {
                const float* row = dS + static_cast<size_t>(i) * dk;
                const float vi = v[i];
                float w = 0.f;
                for (int j = 0; j < dk; ++j) {
                    w += row[j] * k[j];
                    if (dk_) dk_[j] += row[j] * vi;
                }
                if (dv_) dv_[i] += w;
            }
            if (kind == Kind::RetNet) {
                const float gamma = g.gamma;
                for (int i = 0; i < dv * dk; ++i) dS[i] *= gamma;
            }
            break;
        }
        case Kind::Gla: {
            for (int i = 0; i < dv; ++i) {
                float* row = dS + static_cast<size_t>(i) * dk;
                const float* prow = S_prev + static_cast<size_t>(i) * dk;
                const float vi = v[i];
                float w = 0.f;
                for (int j = 0; j < dk; ++j) {
                    w += row[j] * k[j];
                    if (dk_) dk_[j] += row[j] * vi;
                    if (dalpha) dalpha[j] += row[j] * prow[j];
                    row[j] *= g.alpha_ch[j];
                }
                if (dv_) dv_[i] += w;
            }
            break;
        }
        case Kind::DeltaNet:
        case Kind::GatedDeltaNet:
        case Kind::Kda: {
            const float beta = g.beta;
            const bool scalar_gate = kind == Kind::GatedDeltaNet;
            const bool channel_gate = kind == Kind::Kda;
            const float asc = scalar_gate ? g.alpha_sc : 1.f;
            // Recompute u = v - (decayed S_prev) k and w = dS_t k.
            for (int i = 0; i < dv; ++i) {
                const float* prow = S_prev + static_cast<size_t>(i) * dk;
                const float* drow = dS + static_cast<size_t>(i) * dk;
                float c = 0.f, w = 0.f;
                if (channel_gate) {
                    for (int j = 0; j < dk; ++j) {
                        c += prow[j] * g.alpha_ch[j] * k[j];
                        w += drow[j] * k[j];
                    }
                } else {
                    for (int j = 0; j < dk; ++j) {
                        c += prow[j] * k[j];
                        w += drow[j] * k[j];
                    }
                    c *= asc;
                }
                u_scr[i] = v[i] - c;
                w_scr[i] = w;
            }
            float dbeta_acc = 0.f;
            for (int i = 0; i < dv; ++i) {
                dbeta_acc += w_scr[i] * u_scr[i];
                if (dv_) dv_[i] += beta * w_scr[i];
            }
            if (dbeta) *dbeta += dbeta_acc;
            float dalpha_acc = 0.f;
            for (int i = 0; i < dv; ++i) {
                float* drow = dS + static_cast<size_t>(i) * dk;
                const float* prow = S_prev + static_cast<size_t>(i) * dk;
                const float bu = beta * u_scr[i];
                const float dci = -beta * w_scr[i];
                for (int j = 0; j < dk; ++j) {
                    // dk from the S_t term and from c = (decayed S_prev) k
                    if (dk_) {
                        float arow = channel_gate ? prow[j] * g.alpha_ch[j]
                                                  : (scalar_gate ? asc * prow[j] : prow[j]);
                        dk_[j] += drow[j] * bu + arow * dci;
                    }
                    // dA = dS_t + dc k^T, then decay toward S_{t-1}
                    const float dA = drow[j] + dci * k[j];
                    if (channel_gate) {
                        if (dalpha) dalpha[j] += dA * prow[j];
                        drow[j] = dA * g.alpha_ch[j];
                    } else if (scalar_gate) {
                        dalpha_acc += dA * prow[j];
                        drow[j] = asc * dA;
                    } else {
                        drow[j] = dA;
                    }
                }
            }
            if (scalar_gate && dalpha) *dalpha += dalpha_acc;
            break;
        }
        case Kind::MLstm: {
            const float a = g.f_pre + m_prev;
            const float m_cur = std::max(a, g.i_pre);
            const float fe = std::exp(a - m_cur);
            const float ie = std::exp(g.i_pre - m_cur);
            float d = 0.f;
            for (int j = 0; j < dk; ++j) d += n_cur[j] * q[j];
            const float e = std::max(std::fabs(d), 1.f);
            const float inv_e = 1.f / e;
            // o = (C_t q) / e
            float dot_do_cq = 0.f;
            for (int i = 0; i < dv; ++i) {
                const float* crow = S_cur + static_cast<size_t>(i) * dk;
                float cq = 0.f;
                for (int j = 0; j < dk; ++j) cq += crow[j] * q[j];
                dot_do_cq += dout[i] * cq;
                float* drow = dS + static_cast<size_t>(i) * dk;
                const float t1 = dout[i] * inv_e;
                for (int j = 0; j < dk; ++j) {
                    drow[j] += t1 * q[j];
                    if (dq) dq[j] += crow[j] * t1;
                }
            }
            const float de = -dot_do_cq * inv_e * inv_e;
            const float dd = (std::fabs(d) > 1.f) ? (d > 0.f ? de : -de) : 0.f;
            if (dd != 0.f) {
                for (int j = 0; j < dk; ++j) {
                    dn[j] += dd * q[j];
                    if (dq) dq[j] += dd * n_cur[j];
                }
            }
            // C_t = fe C_{t-1} + ie v k^T ; n_t = fe n_{t-1} + ie k
            float dfe = 0.f, die = 0.f;
            for (int i = 0; i < dv; ++i) {
                const float* drow = dS + static_cast<size_t>(i) * dk;
                const float* prow = S_prev + static_cast<size_t>(i) * dk;
                const float vi = v[i];
                float w = 0.f;
                for (int j = 0; j < dk; ++j) {
                    w += drow[j] * k[j];
                    dfe += drow[j] * prow[j];
                    if (dk_) dk_[j] += drow[j] * ie * vi;
                }
                w_scr[i] = w;
                die += w * vi;
                if (dv_) dv_[i] += ie * w;
            }
            for (int j = 0; j < dk; ++j) {
                dfe += dn[j] * n_prev[j];
                die += dn[j] * k[j];
                if (dk_) dk_[j] += ie * dn[j];
            }
            for (int i = 0; i < dv * dk; ++i) dS[i] *= fe;
            for (int j = 0; j < dk; ++j) dn[j] *= fe;
            // fe = exp(a - m), ie = exp(i_pre - m), m = max(a, i_pre)
            float da = fe * dfe;
            float di_local = ie * die;
            const float dm_cur = *dm - fe * dfe - ie * die;
            if (a >= g.i_pre) {
                da += dm_cur;
            } else {
                di_local += dm_cur;
            }
            if (df) *df += da;
            if (di) *di += di_local;
            *dm = da;  // gradient w.r.t. m_{t-1}
            break;
        }
    }
}

}  // namespace

Tensor scan(const MixerConfig& cfg, const Tensor& q, const Tensor& k, const Tensor& v,
            const GateTensors& gates, MixerState* final_state) {
    cfg.validate();
    if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4) {
        throw ShapeError("mixer scan expects q,k,v of shape [B,T,H,d]");
    }
    const int64_t B = q.dim(0), T = q.dim(1), H = q.dim(2);
    const int dk = cfg.d_k, dv = cfg.d_v;
    if (H != cfg.n_heads || q.dim(3) != dk) throw ShapeError("q shape does not match mixer config");
    if (k.shape() != q.shape()) throw ShapeError("k shape must equal q shape");
    if (v.dim(0) != B || v.dim(1) != T || v.dim(2) != H || v.dim(3) != dv) {
        throw ShapeError("v shape does not match mixer config");
    }

    GateLayout gl;
    const int64_t nbth = B * T * H;
    if (has_channel_alpha(cfg.kind)) {
        check_gate_tensor(gates.alpha, nbth * dk, "alpha");
        gl.alpha = gates.alpha.data();
        gl.channel_alpha = true;
    } else if (has_scalar_alpha(cfg.kind)) {
        check_gate_tensor(gates.alpha, nbth, "alpha");
        gl.alpha = gates.alpha.data();
    }
    if (has_beta(cfg.kind)) {
        check_gate_tensor(gates.beta, nbth, "beta");
        gl.beta = gates.beta.data();
    }
    if (has_fi_gates(cfg.kind)) {
        check_gate_tensor(gates.f_pre, nbth, "f_pre");
        check_gate_tensor(gates.i_pre, nbth, "i_pre");
        gl.f_pre = gates.f_pre.data();
        gl.i_pre = gates.i_pre.data();
    }

    std::vector<Tensor> inputs = {q, k, v};
    for (const Tensor* t : {&gates.alpha, &gates.beta, &gates.f_pre, &gates.i_pre}) {
        if (t->defined()) inputs.push_back(*t);
    }
    Tensor out = make_op_output({B, T, H, dv}, inputs);
    if (T == 0) {
        if (final_state) *final_state = MixerState::zeros(cfg);
        return out;
    }
    const bool training = out.unsafe_data()->on_path;
    const bool mlstm = cfg.kind == Kind::MLstm;

    const int64_t lanes = B * H;
    const int64_t nseg = (T + kSeg - 1) / kSeg;
    const size_t ssz = static_cast<size_t>(dv) * dk;
    // Segment-boundary checkpoints: state *before* step seg*kSeg.
    auto ck_S = std::make_shared<std::vector<float>>();
    auto ck_n = std::make_shared<std::vector<float>>();
    auto ck_m = std::make_shared<std::vector<float>>();
    if (training) {
        ck_S->resize(static_cast<size_t>(nseg * lanes) * ssz);
        if (mlstm) {
            ck_n->resize(static_cast<size_t>(nseg * lanes) * dk);
            ck_m->resize(static_cast<size_t>(nseg * lanes));
        }
    }
    if (final_state) *final_state = MixerState::zeros(cfg);

    std::atomic<int64_t> first_bad{-1};

    const float* qp = q.data();
    const float* kp = k.data();
    const float* vp = v.data();
    float* op = out.data();
    const int64_t tok_stride_k = H * dk;
    const int64_t tok_stride_v = H * dv;

#pragma omp parallel for schedule(static)
    for (int64_t lane = 0; lane < lanes; ++lane) {
        const int64_t b = lane / H, h = lane % H;
        std::vector<float> S(ssz, 0.f), n(static_cast<size_t>(dk), 0.f), scr(static_cast<size_t>(dv));
        float m = detail::kNegInf;
        for (int64_t t = 0; t < T; ++t) {
            if (training && t % kSeg == 0) {
                const int64_t seg = t / kSeg;
                std::memcpy(ck_S->data() + (seg * lanes + lane) * static_cast<int64_t>(ssz),
                            S.data(), ssz * sizeof(float));
                if (mlstm) {
                    std::memcpy(ck_n->data() + (seg * lanes + lane) * dk, n.data(),
                                static_cast<size_t>(dk) * sizeof(float));
                    (*ck_m)[static_cast<size_t>(seg * lanes + lane)] = m;
                }
            }
            const int64_t base_k = (b * T + t) * tok_stride_k + h * dk;
            const int64_t base_v = (b * T + t) * tok_stride_v + h * dv;
            StepGates g = gates_at(cfg, gl, b, t, h, T);
            float* o = op + base_v;
            detail::lane_step(cfg.kind, dk, dv, S.data(), n.data(), &m, qp + base_k, kp + base_k,
                              vp + base_v, g, o, scr.data());
            float acc = 0.f;
            for (int i = 0; i < dv; ++i) acc += o[i];
            if (!std::isfinite(acc)) {
                int64_t expect = -1;
                first_bad.compare_exchange_strong(expect, t);
                break;
            }
        }
        if (final_state && b == 0) {
            std::memcpy(final_state->S_head(static_cast<int>(h)), S.data(), ssz * sizeof(float));
            std::memcpy(final_state->n.data() + h * dk, n.data(),
                        static_cast<size_t>(dk) * sizeof(float));
            final_state->m[static_cast<size_t>(h)] = m;
        }
    }
    if (first_bad.load() >= 0) {
        throw NumericsError(std::string("numerical instability in ") + kind_name(cfg.kind) +
                            " at step " + std::to_string(first_bad.load()));
    }
    op_counters().mixer_state_updates += static_cast<uint64_t>(lanes) * static_cast<uint64_t>(T);

    if (!training) return out;

    Tape::active()->record([cfg, q, k, v, gates, out, gl, ck_S, ck_n, ck_m, B, T, H, dk, dv, nseg,
                            lanes, ssz, tok_stride_k, tok_stride_v, mlstm] {
        if (!out.unsafe_data()->grad) return;
        const std::vector<float>& dy = *out.unsafe_data()->grad;
        // Pre-allocate every receiving grad buffer before the parallel region.
        auto grad_of = [](const Tensor& t) -> float* {
            return t.defined() && t.on_grad_path() ? t.ensure_grad().data() : nullptr;
        };
        float* gq = grad_of(q);
        float* gk = grad_of(k);
        float* gv = grad_of(v);
        float* galpha = grad_of(gates.alpha);
        float* gbeta = grad_of(gates.beta);
        float* gf = grad_of(gates.f_pre);
        float* gi = grad_of(gates.i_pre);

        const float* qp = q.data();
        const float* kp = k.data();
        const float* vp = v.data();

#pragma omp parallel for schedule(static)
        for (int64_t lane = 0; lane < lanes; ++lane) {
            const int64_t b = lane / H, h = lane % H;
            // In-segment trajectories; slot i holds the state before step t0+i.
            std::vector<float> S_traj((kSeg + 1) * ssz);
            std::vector<float> n_traj(mlstm ? (kSeg + 1) * static_cast<size_t>(dk) : 0);
            std::vector<float> m_traj(mlstm ? (kSeg + 1) : 0);
            std::vector<float> dS(ssz, 0.f), dn(static_cast<size_t>(dk), 0.f);
            std::vector<float> scr(static_cast<size_t>(dv)), u_scr(static_cast<size_t>(dv)),
                w_scr(static_cast<size_t>(dv)), otmp(static_cast<size_t>(dv));
            float dm = 0.f;
            for (int64_t seg = nseg - 1; seg >= 0; --seg) {
                const int64_t t0 = seg * kSeg;
                const int64_t len = std::min<int64_t>(kSeg, T - t0);
                // Recompute the forward trajectory inside this segment.
                std::memcpy(S_traj.data(), ck_S->data() + (seg * lanes + lane) * static_cast<int64_t>(ssz),
                            ssz * sizeof(float));
                if (mlstm) {
                    std::memcpy(n_traj.data(), ck_n->data() + (seg * lanes + lane) * dk,
                                static_cast<size_t>(dk) * sizeof(float));
                    m_traj[0] = (*ck_m)[static_cast<size_t>(seg * lanes + lane)];
                }
                for (int64_t i = 0; i < len; ++i) {
                    float* Sc = S_traj.data() + (i + 1) * ssz;
                    std::memcpy(Sc, S_traj.data() + i * ssz, ssz * sizeof(float));
                    float* nc = nullptr;
                    float* mc = nullptr;
                    float m_local = 0.f;
                    if (mlstm) {
                        nc = n_traj.data() + (i + 1) * dk;
                        std::memcpy(nc, n_traj.data() + i * dk, static_cast<size_t>(dk) * sizeof(float));
                        m_traj[static_cast<size_t>(i + 1)] = m_traj[static_cast<size_t>(i)];
                        mc = &m_traj[static_cast<size_t>(i + 1)];
                    } else {
                        mc = &m_local;
                    }
                    const int64_t t = t0 + i;
                    const int64_t base_k = (b * T + t) * tok_stride_k + h * dk;
                    const int64_t base_v = (b * T + t) * tok_stride_v + h * dv;
                    StepGates g = gates_at(cfg, gl, b, t, h, T);
                    detail::lane_step(cfg.kind, dk, dv, Sc, nc ? nc : dn.data(), mc, qp + base_k,
                                      kp + base_k, vp + base_v, g, otmp.data(), scr.data());
                }
                // Reverse walk.
                for (int64_t i = len - 1; i >= 0; --i) {
                    const int64_t t = t0 + i;
                    const int64_t base_k = (b * T + t) * tok_stride_k + h * dk;
                    const int64_t base_v = (b * T + t) * tok_stride_v + h * dv;
                    const int64_t gidx = (b * T + t) * H + h;
                    StepGates g = gates_at(cfg, gl, b, t, h, T);
                    lane_bwd_step(cfg.kind, dk, dv, qp + base_k, kp + base_k, vp + base_v, g,
                                  S_traj.data() + i * ssz, S_traj.data() + (i + 1) * ssz,
                                  mlstm ? n_traj.data() + i * dk : nullptr,
                                  mlstm ? n_traj.data() + (i + 1) * dk : nullptr,
                                  mlstm ? m_traj[static_cast<size_t>(i)] : 0.f, dy.data() + base_v,
                                  dS.data(), dn.data(), &dm, gq ? gq + base_k : nullptr,
                                  gk ? gk + base_k : nullptr, gv ? gv + base_v : nullptr,
                                  galpha ? (gl.channel_alpha ? galpha + gidx * dk : galpha + gidx)
                                         : nullptr,
                                  gbeta ? gbeta + gidx : nullptr, gf ? gf + gidx : nullptr,
                                  gi ? gi + gidx : nullptr, u_scr.data(), w_scr.data());
                }
            }
        }
    });
    return out;
}

}  // namespace lnz::mixer
