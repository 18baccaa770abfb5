#pragma once

// Shared test oracles: finite-difference gradient checking and independent
// double-precision reimplementations of the mixer update rules. Everything
// here deliberately avoids the production kernels.

#include <cmath>
#include <functional>
#include <vector>

#include <doctest.h>

#include "lnz/mixer.hpp"
#include "lnz/ops.hpp"
#include "lnz/tape.hpp"
#include "lnz/tensor.hpp"

namespace lnz::test {

struct GradCheckOpts {
    float h = 1e-3f;
    float atol = 1e-4f;
    float rtol = 1e-3f;
};

// Central-difference gradient check. Uses two step sizes: elements where
// the two estimates disagree sit on a kink (max branches, |.|=1 floors) or
// in f32 noise and are skipped rather than mis-tested.
inline void check_grads(const std::function<Tensor()>& make_loss, std::vector<Tensor> inputs,
                        GradCheckOpts opt = {}) {
    for (Tensor& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    double analytic_loss = 0;
    {
        Tape tape;
        Tensor loss = make_loss();
        analytic_loss = loss.item();
        tape.backward(loss);
    }
    CHECK(std::isfinite(analytic_loss));
    NoGradGuard ng;
    int checked = 0, skipped = 0;
    for (Tensor& t : inputs) {
        std::vector<float> analytic(t.numel(), 0.f);
        if (t.has_grad()) {
            auto g = t.grad();
            analytic.assign(g.begin(), g.end());
        }
        for (int64_t i = 0; i < t.numel(); ++i) {
            float* x = t.data() + i;
            const float x0 = *x;
            double lmag = 0;
            auto fd = [&](float h) {
                *x = x0 + h;
                const double lp = make_loss().item();
                *x = x0 - h;
                const double lm = make_loss().item();
                *x = x0;
                lmag = std::max({lmag, std::fabs(lp), std::fabs(lm)});
                return (lp - lm) / (2.0 * h);
            };
            const double fd1 = fd(opt.h);
            const double fd2 = fd(opt.h / 2);
            const double spread = std::fabs(fd1 - fd2);
            if (spread > 0.05 * std::max({std::fabs(fd1), std::fabs(fd2), 1e-3})) {
                ++skipped;  // non-smooth point
                continue;
            }
            const double a = analytic[static_cast<size_t>(i)];
            // Loss values are f32: quantization of the forward pass puts a
            // floor of about eps32 * scale / h on what central differences
            // can resolve, where scale covers intermediate magnitudes even
            // when the final loss cancels toward zero.
            const double fp_noise = 3.0 * 1.2e-7 * std::max(lmag, 1.0) / opt.h;
            const double tol = std::max({double(opt.atol),
                                         double(opt.rtol) * std::max(std::fabs(a), std::fabs(fd1)),
                                         fp_noise});
            INFO("element ", i, " analytic ", a, " numeric ", fd1);
            CHECK(std::fabs(a - fd1) <= tol);
            ++checked;
        }
    }
    // The check must not degenerate into skipping everything.
    CHECK(checked > 0);
    (void)skipped;
}

// ---- independent mixer oracles (double precision, matrix form) ---------------

struct OracleLane {
    int dk, dv;
    std::vector<double> S;  // [dv][dk]
    std::vector<double> n;  // [dk]
    double m = -std::numeric_limits<double>::infinity();
};

struct OracleGates {
    std::vector<double> alpha;  // [dk] or [1]
    double beta = 0, f_pre = 0, i_pre = 0, gamma = 1;
};

// One literal-formula step: builds (I - beta k k^T) explicitly and uses
// matrix products, unlike the fused production kernel.
inline std::vector<double> oracle_step(mixer::Kind kind, OracleLane& L, const std::vector<double>& q,
                                       const std::vector<double>& k, const std::vector<double>& v,
                                       const OracleGates& g) {
    const int dk = L.dk, dv = L.dv;
    auto S_at = [&](int i, int j) -> double& { return L.S[static_cast<size_t>(i * dk + j)]; };
    std::vector<double> S_new(L.S.size(), 0.0);
    auto N_at = [&](int i, int j) -> double& { return S_new[static_cast<size_t>(i * dk + j)]; };
    using mixer::Kind;
    double denom = 1.0;
    switch (kind) {
        case Kind::LinearAttn:
            for (int i = 0; i < dv; ++i) {
                for (int j = 0; j < dk; ++j) N_at(i, j) = S_at(i, j) + v[size_t(i)] * k[size_t(j)];
            }
            break;
        case Kind::RetNet:
            for (int i = 0; i < dv; ++i) {
                for (int j = 0; j < dk; ++j) {
                    N_at(i, j) = g.gamma * S_at(i, j) + v[size_t(i)] * k[size_t(j)];
                }
            }
            break;
        case Kind::Gla:
            for (int i = 0; i < dv; ++i) {
                for (int j = 0; j < dk; ++j) {
                    N_at(i, j) = S_at(i, j) * g.alpha[size_t(j)] + v[size_t(i)] * k[size_t(j)];
                }
            }
            break;
        case Kind::MLstm: {
            const double a = g.f_pre + L.m;
            const double m_new = std::max(a, g.i_pre);
            const double fe = std::exp(a - m_new);
            const double ie = std::exp(g.i_pre - m_new);
            for (int i = 0; i < dv; ++i) {
                for (int j = 0; j < dk; ++j) {
                    N_at(i, j) = fe * S_at(i, j) + ie * v[size_t(i)] * k[size_t(j)];
                }
            }
            for (int j = 0; j < dk; ++j) L.n[size_t(j)] = fe * L.n[size_t(j)] + ie * k[size_t(j)];
            L.m = m_new;
            double nd = 0;
            for (int j = 0; j < dk; ++j) nd += L.n[size_t(j)] * q[size_t(j)];
            denom = std::max(std::fabs(nd), 1.0);
            break;
        }
        case Kind::DeltaNet:
        case Kind::GatedDeltaNet:
        case Kind::Kda: {
            // Decayed state A, then S_new = A (I - beta k k^T) + beta v k^T.
            std::vector<double> A(L.S.size());
            for (int i = 0; i < dv; ++i) {
                for (int j = 0; j < dk; ++j) {
                    double decay = 1.0;
                    if (kind == Kind::GatedDeltaNet) decay = g.alpha[0];
                    if (kind == Kind::Kda) decay = g.alpha[size_t(j)];
                    A[static_cast<size_t>(i * dk + j)] = S_at(i, j) * decay;
                }
            }
            std::vector<double> proj(static_cast<size_t>(dk) * dk, 0.0);  // I - beta k k^T
            for (int a = 0; a < dk; ++a) {
                for (int b = 0; b < dk; ++b) {
                    proj[static_cast<size_t>(a * dk + b)] =
                        (a == b ? 1.0 : 0.0) - g.beta * k[size_t(a)] * k[size_t(b)];
                }
            }
            for (int i = 0; i < dv; ++i) {
                for (int j = 0; j < dk; ++j) {
                    double acc = 0;
                    for (int a = 0; a < dk; ++a) {
                        acc += A[static_cast<size_t>(i * dk + a)] *
                               proj[static_cast<size_t>(a * dk + j)];
                    }
                    N_at(i, j) = acc + g.beta * v[size_t(i)] * k[size_t(j)];
                }
            }
            break;
        }
    }
    L.S = std::move(S_new);
    std::vector<double> o(static_cast<size_t>(dv), 0.0);
    for (int i = 0; i < dv; ++i) {
        double acc = 0;
        for (int j = 0; j < dk; ++j) acc += L.S[static_cast<size_t>(i * dk + j)] * q[size_t(j)];
        o[size_t(i)] = acc / denom;
    }
    return o;
}

// Closed-form decayed outer-product sum for the additive kinds:
// o_t = sum_{s<=t} (k_s .* prod_{r=s+1..t} decay_r)^T q_t * v_s.
inline std::vector<double> oracle_decayed_sum(mixer::Kind kind, int dk, int dv,
                                              const std::vector<std::vector<double>>& qs,
                                              const std::vector<std::vector<double>>& ks,
                                              const std::vector<std::vector<double>>& vs,
                                              const std::vector<OracleGates>& gates, int t) {
    std::vector<double> o(static_cast<size_t>(dv), 0.0);
    for (int s = 0; s <= t; ++s) {
        std::vector<double> decay(static_cast<size_t>(dk), 1.0);
        for (int r = s + 1; r <= t; ++r) {
            for (int j = 0; j < dk; ++j) {
                double d = 1.0;
                if (kind == mixer::Kind::RetNet) d = gates[size_t(r)].gamma;
                if (kind == mixer::Kind::Gla) d = gates[size_t(r)].alpha[size_t(j)];
                decay[size_t(j)] *= d;
            }
        }
        double w = 0;
        for (int j = 0; j < dk; ++j) w += ks[size_t(s)][size_t(j)] * decay[size_t(j)] * qs[size_t(t)][size_t(j)];
        for (int i = 0; i < dv; ++i) o[size_t(i)] += w * vs[size_t(s)][size_t(i)];
    }
    return o;
}

// ---- random input builders -----------------------------------------------------

struct RandomStream {
    std::vector<mixer::ProjectedToken> tokens;
    std::vector<mixer::GateSignals> gates;
};

inline RandomStream random_stream(const mixer::MixerConfig& cfg, int64_t T, Rng& rng,
                                  float scale = 0.7f) {
    RandomStream s;
    const int H = cfg.n_heads, dk = cfg.d_k, dv = cfg.d_v;
    for (int64_t t = 0; t < T; ++t) {
        mixer::ProjectedToken tok;
        tok.q.resize(static_cast<size_t>(H * dk));
        tok.k.resize(static_cast<size_t>(H * dk));
        tok.v.resize(static_cast<size_t>(H * dv));
        for (float& x : tok.q) x = rng.normal(0, scale);
        for (float& x : tok.k) x = rng.normal(0, scale);
        for (float& x : tok.v) x = rng.normal(0, scale);
        if (mixer::normalizes_keys(cfg.kind)) {
            for (int h = 0; h < H; ++h) {
                double nrm = 0;
                for (int j = 0; j < dk; ++j) nrm += double(tok.k[size_t(h * dk + j)]) * tok.k[size_t(h * dk + j)];
                const float inv = 1.f / std::max(1e-6f, static_cast<float>(std::sqrt(nrm)));
                for (int j = 0; j < dk; ++j) tok.k[size_t(h * dk + j)] *= inv;
            }
        }
        mixer::GateSignals g;
        if (mixer::has_channel_alpha(cfg.kind)) {
            g.alpha.resize(static_cast<size_t>(H * dk));
            for (float& a : g.alpha) a = 0.75f + 0.24f * rng.uniform();
        } else if (mixer::has_scalar_alpha(cfg.kind)) {
            g.alpha.resize(static_cast<size_t>(H));
            for (float& a : g.alpha) a = 0.8f + 0.19f * rng.uniform();
        }
        if (mixer::has_beta(cfg.kind)) {
            g.beta.resize(static_cast<size_t>(H));
            for (float& b : g.beta) b = rng.uniform(0.05f, 0.95f);
        }
        if (mixer::has_fi_gates(cfg.kind)) {
            g.f_pre.resize(static_cast<size_t>(H));
            g.i_pre.resize(static_cast<size_t>(H));
            for (float& f : g.f_pre) f = rng.normal(0, 0.5f);
            for (float& i : g.i_pre) i = rng.normal(0, 0.5f);
        }
        s.tokens.push_back(std::move(tok));
        s.gates.push_back(std::move(g));
    }
    return s;
}

// Per-head oracle view of one stream.
inline OracleGates oracle_gates_at(const mixer::MixerConfig& cfg, const RandomStream& s, int64_t t,
                                   int h) {
    OracleGates g;
    if (mixer::has_channel_alpha(cfg.kind)) {
        g.alpha.assign(s.gates[size_t(t)].alpha.begin() + h * cfg.d_k,
                       s.gates[size_t(t)].alpha.begin() + (h + 1) * cfg.d_k);
    } else if (mixer::has_scalar_alpha(cfg.kind)) {
        g.alpha = {double(s.gates[size_t(t)].alpha[size_t(h)])};
    }
    if (mixer::has_beta(cfg.kind)) g.beta = s.gates[size_t(t)].beta[size_t(h)];
    if (mixer::has_fi_gates(cfg.kind)) {
        g.f_pre = s.gates[size_t(t)].f_pre[size_t(h)];
        g.i_pre = s.gates[size_t(t)].i_pre[size_t(h)];
    }
    if (cfg.kind == mixer::Kind::RetNet) g.gamma = cfg.retnet_gamma(h);
    return g;
}

// Batched [1,T,H,*] tensors from a stream (for the differentiable scan).
struct StreamTensors {
    Tensor q, k, v;
    mixer::GateTensors gates;
};

inline StreamTensors stream_tensors(const mixer::MixerConfig& cfg, const RandomStream& s) {
    const int64_t T = static_cast<int64_t>(s.tokens.size());
    const int64_t H = cfg.n_heads, dk = cfg.d_k, dv = cfg.d_v;
    std::vector<float> q, k, v, alpha, beta, f, i;
    for (const auto& tok : s.tokens) {
        q.insert(q.end(), tok.q.begin(), tok.q.end());
        k.insert(k.end(), tok.k.begin(), tok.k.end());
        v.insert(v.end(), tok.v.begin(), tok.v.end());
    }
    for (const auto& g : s.gates) {
        alpha.insert(alpha.end(), g.alpha.begin(), g.alpha.end());
        beta.insert(beta.end(), g.beta.begin(), g.beta.end());
        f.insert(f.end(), g.f_pre.begin(), g.f_pre.end());
        i.insert(i.end(), g.i_pre.begin(), g.i_pre.end());
    }
    StreamTensors out;
    out.q = Tensor::from({1, T, H, dk}, std::move(q));
    out.k = Tensor::from({1, T, H, dk}, std::move(k));
    out.v = Tensor::from({1, T, H, dv}, std::move(v));
    if (!alpha.empty()) {
        out.gates.alpha = mixer::has_channel_alpha(cfg.kind)
                              ? Tensor::from({1, T, H, dk}, std::move(alpha))
                              : Tensor::from({1, T, H}, std::move(alpha));
    }
    if (!beta.empty()) out.gates.beta = Tensor::from({1, T, H}, std::move(beta));
    if (!f.empty()) out.gates.f_pre = Tensor::from({1, T, H}, std::move(f));
    if (!i.empty()) out.gates.i_pre = Tensor::from({1, T, H}, std::move(i));
    return out;
}

}  // namespace lnz::test
