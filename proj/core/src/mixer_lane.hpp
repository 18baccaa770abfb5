#pragma once

// Single-head recurrence kernels shared by the inference step/scan and the
// differentiable batched scan. One "lane" is one (sequence, head) pair;
// lanes never interact, which is what makes the batched scan parallel.

#include <algorithm>
#include <cmath>
#include <limits>

#include "lnz/mixer.hpp"

namespace lnz::mixer::detail {

inline constexpr float kNegInf = -std::numeric_limits<float>::infinity();

// Gate values for one head at one step.
struct StepGates {
    const float* alpha_ch = nullptr;  // [d_k] (GLA/KDA)
    float alpha_sc = 1.f;             // GatedDeltaNet
    float beta = 0.f;                 // delta family
    float f_pre = 0.f, i_pre = 0.f;   // mLSTM
    float gamma = 1.f;                // RetNet
};

// Forward one step on a lane. S: [d_v, d_k], n: [d_k], m: scalar (mLSTM
// only). Writes o[d_v] = S_t q (mLSTM: with the |n.q| floor). `c_scratch`
// must hold d_v floats for the delta kinds.
inline void lane_step(Kind kind, int dk, int dv, float* __restrict S, float* __restrict n,
                      float* __restrict m, const float* __restrict q, const float* __restrict k,
                      const float* __restrict v, const StepGates& g, float* __restrict o,
                      float* __restrict c_scratch) {
    switch (kind) {
        case Kind::LinearAttn: {
            for (int i = 0; i < dv; ++i) {
                float* row = S + static_cast<size_t>(i) * dk;
                const float vi = v[i];
                float acc = 0.f;
                for (int j = 0; j < dk; ++j) {
                    row[j] += vi * k[j];
                    acc += row[j] * q[j];
                }
                o[i] = acc;
            }
            break;
        }
        case Kind::RetNet: {
            const float gamma = g.gamma;
            for (int i = 0; i < dv; ++i) {
                float* row = S + static_cast<size_t>(i) * dk;
                const float vi = v[i];
                float acc = 0.f;
                for (int j = 0; j < dk; ++j) {
                    row[j] = gamma * row[j] + vi * k[j];
                    acc += row[j] * q[j];
                }
                o[i] = acc;
            }
            break;
        }
        case Kind::Gla: {
            const float* a = g.alpha_ch;
            for (int i = 0; i < dv; ++i) {
                float* row = S + static_cast<size_t>(i) * dk;
                const float vi = v[i];
                float acc = 0.f;
                for (int j = 0; j < dk; ++j) {
                    row[j] = row[j] * a[j] + vi * k[j];
                    acc += row[j] * q[j];
                }
                o[i] = acc;
            }
            break;
        }
        case Kind::MLstm: {
            const float a = g.f_pre + *m;
            const float m_new = std::max(a, g.i_pre);
            const float fe = std::exp(a - m_new);
            const float ie = std::exp(g.i_pre - m_new);
            float nd = 0.f;
            for (int j = 0; j < dk; ++j) {
                n[j] = fe * n[j] + ie * k[j];
                nd += n[j] * q[j];
            }
            const float denom = std::max(std::fabs(nd), 1.f);
            for (int i = 0; i < dv; ++i) {
                float* row = S + static_cast<size_t>(i) * dk;
                const float w = ie * v[i];
                float acc = 0.f;
                for (int j = 0; j < dk; ++j) {
                    row[j] = fe * row[j] + w * k[j];
                    acc += row[j] * q[j];
                }
                o[i] = acc / denom;
            }
            *m = m_new;
            break;
        }
        case Kind::DeltaNet: {
            const float beta = g.beta;
            for (int i = 0; i < dv; ++i) {
                const float* row = S + static_cast<size_t>(i) * dk;
                float acc = 0.f;
                for (int j = 0; j < dk; ++j) acc += row[j] * k[j];
                c_scratch[i] = v[i] - acc;  // write error u = v - S k
            }
            for (int i = 0; i < dv; ++i) {
                float* row = S + static_cast<size_t>(i) * dk;
                const float bu = beta * c_scratch[i];
                float acc = 0.f;
                for (int j = 0; j < dk; ++j) {
                    row[j] += bu * k[j];
                    acc += row[j] * q[j];
                }
                o[i] = acc;
            }
            break;
        }
        case Kind::GatedDeltaNet: {
            const float beta = g.beta;
            const float alpha = g.alpha_sc;
            for (int i = 0; i < dv; ++i) {
                const float* row = S + static_cast<size_t>(i) * dk;
                float acc = 0.f;
                for (int j = 0; j < dk; ++j) acc += row[j] * k[j];
                c_scratch[i] = v[i] - alpha * acc;
            }
            for (int i = 0; i < dv; ++i) {
                float* row = S + static_cast<size_t>(i) * dk;
                const float bu = beta * c_scratch[i];
                float acc = 0.f;
                for (int j = 0; j < dk; ++j) {
                    row[j] = alpha * row[j] + bu * k[j];
                    acc += row[j] * q[j];
                }
                o[i] = acc;
            }
            break;
        }
        case Kind::Kda: {
            const float beta = g.beta;
            const float* a = g.alpha_ch;
            for (int i = 0; i < dv; ++i) {
                const float* row = S + static_cast<size_t>(i) * dk;
                float acc = 0.f;
                for (int j = 0; j < dk; ++j) acc += row[j] * a[j] * k[j];
                c_scratch[i] = v[i] - acc;
            }
            for (int i = 0; i < dv; ++i) {
                float* row = S + static_cast<size_t>(i) * dk;
                const float bu = beta * c_scratch[i];
                float acc = 0.f;
                for (int j = 0; j < dk; ++j) {
                    row[j] = row[j] * a[j] + bu * k[j];
                    acc += row[j] * q[j];
                }
                o[i] = acc;
            }
            break;
        }
    }
}

}  // namespace lnz::mixer::detail
