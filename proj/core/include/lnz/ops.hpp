#pragma once

#include <span>

#include "lnz/tape.hpp"
#include "lnz/tensor.hpp"

namespace lnz::ops {

// Division guard used throughout backward rules.
inline constexpr float kEps = 1e-8f;

// ---- matrix product -------------------------------------------------------

// [m,k] x [k,n] -> [m,n]. Backward: dA = dC.B^T, dB = A^T.dC.
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- elementwise ----------------------------------------------------------
// add/mul accept equal shapes or a single-element tensor on either side.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor scale(const Tensor& x, float c);
// y = x^p for x >= 0 (gate temperature shaping).
Tensor pow_const(const Tensor& x, float p);
// x: [n,m] plus a per-column bias b: [m].
Tensor add_rowbias(const Tensor& x, const Tensor& b);

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean_axis(const Tensor& x, int axis);
// Max reduction; gradient routes to the argmax (first index on ties).
Tensor max_over_axis(const Tensor& x, int axis);

// ---- losses ---------------------------------------------------------------

// Mean over positions of -log softmax(logits)[target]. logits: [T,V].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> targets);

// As above but averaged over positions with mask != 0. mask: length T.
Tensor masked_softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                                    std::span<const uint8_t> mask);

// (1/T) sum_t KL(p_teacher_t || p_student_t), both given as [T,V] logits.
// Gradient flows to student logits only. Optional mask selects positions.
Tensor kl_teacher_student(const Tensor& teacher_logits, const Tensor& student_logits,
                          std::span<const uint8_t> mask = {});

// ---- model building blocks ------------------------------------------------

// Row gather: table [V,d], ids of length n -> [n,d]. Backward scatter-adds.
Tensor embedding(const Tensor& table, std::span<const int32_t> ids);

// y = weight * x / rms(x), rms over the last axis. x: [n,d], weight: [d].
Tensor rmsnorm(const Tensor& x, const Tensor& weight, float eps = 1e-5f);

// Rotary position encoding over the last axis. x: [B,T,H,dh], positions
// start at pos0. dh must be even.
Tensor rope(const Tensor& x, int64_t pos0, float theta = 10000.f);

// Causal softmax attention. q,k,v: [B,T,H,dh] -> [B,T,H,dh]. Scores are
// scaled by 1/sqrt(dh). Materializes probabilities for the backward pass.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// L2-normalizes the last axis: x / max(||x||, eps).
Tensor l2_normalize_last(const Tensor& x, float eps = 1e-6f);

// ---- raw kernels (no autodiff; inference paths) ----------------------------
namespace raw {
// C[m,n] += A[m,k].B[k,n] when accumulate, else overwrite.
void gemm(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n,
          bool accumulate = false);
// C[m,n] = A[m,k].B[n,k]^T
void gemm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n);
// C[k,n] += A[m,k]^T.B[m,n]
void gemm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n,
             bool accumulate = false);
// y[n] = W[d,n]^T x[d]   (row-major W, i.e. x.W as a vector-matrix product)
void vecmat(const float* x, const float* w, float* y, int64_t d, int64_t n);
void rmsnorm_row(const float* x, const float* w, float* y, int64_t d, float eps = 1e-5f);
void rope_row(float* x, int64_t dh, int64_t pos, float theta = 10000.f);
void softmax_row(float* x, int64_t n);
}  // namespace raw

}  // namespace lnz::ops
