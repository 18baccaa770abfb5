#include "lnz/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <utility>

namespace lnz::ops {

namespace {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;
using StrideT = Eigen::OuterStride<>;
using MapMS = Eigen::Map<EMat, 0, StrideT>;
using MapCS = Eigen::Map<const EMat, 0, StrideT>;

// Registers a backward rule that runs only when a gradient actually
// reached the op output.
void record(const Tensor& out, std::function<void(const std::vector<float>&)> rule) {
    if (!out.unsafe_data()->on_path) return;
    Tape::active()->record([h = out.handle(), rule = std::move(rule)] {
        if (!h->grad) return;
        rule(*h->grad);
    });
}

bool wants_grad(const Tensor& t) {
    return t.on_grad_path();
}

float stable_sigmoid(float x) {
    if (x >= 0.f) {
        return 1.f / (1.f + std::exp(-x));
    }
    float e = std::exp(x);
    return e / (1.f + e);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
}

// Splits a shape at `axis` into (outer, len, inner) extents.
struct AxisSplit {
    int64_t outer, len, inner;
};
AxisSplit split_axis(const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    AxisSplit r{1, s[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

Shape drop_axis(const Shape& s, int axis) {
    Shape out;
    for (int i = 0; i < static_cast<int>(s.size()); ++i) {
        if (i != axis) out.push_back(s[static_cast<size_t>(i)]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

}  // namespace

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_op_output({m, n}, {a, b});
    MapC A(a.data(), m, k), B(b.data(), k, n);
    MapM C(out.data(), m, n);
    C.noalias() = A * B;

    record(out, [a, b, m, k, n](const std::vector<float>& dc) {
        MapC dC(dc.data(), m, n);
        if (wants_grad(a)) {
            MapM dA(a.ensure_grad().data(), m, k);
            MapC B(b.data(), k, n);
            dA.noalias() += dC * B.transpose();
        }
        if (wants_grad(b)) {
            MapM dB(b.ensure_grad().data(), k, n);
            MapC A(a.data(), m, k);
            dB.noalias() += A.transpose() * dC;
        }
    });
    return out;
}

// ---- elementwise -----------------------------------------------------------

namespace {

enum class Bcast { None, LeftScalar, RightScalar };

Bcast bcast_mode(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::None;
    if (a.numel() == 1) return Bcast::LeftScalar;
    if (b.numel() == 1) return Bcast::RightScalar;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    Bcast mode = bcast_mode(a, b, "add");
    const Tensor& big = (mode == Bcast::LeftScalar) ? b : a;
    Tensor out = make_op_output(big.shape(), {a, b});
    const int64_t n = out.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    if (mode == Bcast::None) {
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    } else if (mode == Bcast::LeftScalar) {
        for (int64_t i = 0; i < n; ++i) po[i] = pa[0] + pb[i];
    } else {
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[0];
    }
    record(out, [a, b, mode, n](const std::vector<float>& dy) {
        auto accum = [&](const Tensor& t, bool scalar_side) {
            if (!wants_grad(t)) return;
            auto& g = t.ensure_grad();
            if (scalar_side) {
                double s = 0;
                for (int64_t i = 0; i < n; ++i) s += dy[static_cast<size_t>(i)];
                g[0] += static_cast<float>(s);
            } else {
                for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] += dy[static_cast<size_t>(i)];
            }
        };
        accum(a, mode == Bcast::LeftScalar);
        accum(b, mode == Bcast::RightScalar);
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return add(a, scale(b, -1.f));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Bcast mode = bcast_mode(a, b, "mul");
    const Tensor& big = (mode == Bcast::LeftScalar) ? b : a;
    Tensor out = make_op_output(big.shape(), {a, b});
    const int64_t n = out.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    if (mode == Bcast::None) {
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    } else if (mode == Bcast::LeftScalar) {
        for (int64_t i = 0; i < n; ++i) po[i] = pa[0] * pb[i];
    } else {
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[0];
    }
    record(out, [a, b, mode, n](const std::vector<float>& dy) {
        const float* pa = a.data();
        const float* pb = b.data();
        if (wants_grad(a)) {
            auto& g = a.ensure_grad();
            if (mode == Bcast::LeftScalar) {
                double s = 0;
                for (int64_t i = 0; i < n; ++i) s += double(dy[size_t(i)]) * pb[i];
                g[0] += static_cast<float>(s);
            } else if (mode == Bcast::RightScalar) {
                for (int64_t i = 0; i < n; ++i) g[size_t(i)] += dy[size_t(i)] * pb[0];
            } else {
                for (int64_t i = 0; i < n; ++i) g[size_t(i)] += dy[size_t(i)] * pb[i];
            }
        }
        if (wants_grad(b)) {
            auto& g = b.ensure_grad();
            if (mode == Bcast::RightScalar) {
                double s = 0;
                for (int64_t i = 0; i < n; ++i) s += double(dy[size_t(i)]) * pa[i];
                g[0] += static_cast<float>(s);
            } else if (mode == Bcast::LeftScalar) {
                for (int64_t i = 0; i < n; ++i) g[size_t(i)] += dy[size_t(i)] * pa[0];
            } else {
                for (int64_t i = 0; i < n; ++i) g[size_t(i)] += dy[size_t(i)] * pa[i];
            }
        }
    });
    return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd bwd_factor) {
    Tensor out = make_op_output(x.shape(), {x});
    const int64_t n = x.numel();
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    record(out, [x, out, bwd_factor, n](const std::vector<float>& dy) {
        if (!wants_grad(x)) return;
        auto& g = x.ensure_grad();
        const float* px = x.data();
        const float* po = out.data();
        for (int64_t i = 0; i < n; ++i) {
            g[size_t(i)] += dy[size_t(i)] * bwd_factor(px[i], po[i]);
        }
    });
    return out;
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x, [](float v) { return stable_sigmoid(v); },
        [](float, float y) { return y * (1.f - y); });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor silu(const Tensor& x) {
    return unary_op(
        x, [](float v) { return v * stable_sigmoid(v); },
        [](float v, float) {
            float s = stable_sigmoid(v);
            return s * (1.f + v * (1.f - s));
        });
}

Tensor square(const Tensor& x) {
    return unary_op(
        x, [](float v) { return v * v; }, [](float v, float) { return 2.f * v; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(
        x, [](float v) { return std::sqrt(v); },
        [](float, float y) { return 0.5f / std::max(y, kEps); });
}

Tensor pow_const(const Tensor& x, float p) {
    return unary_op(
        x, [p](float v) { return std::pow(v, p); },
        [p](float v, float y) { return p * y / std::max(v, kEps); });
}

Tensor add_rowbias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0)) {
        throw ShapeError("add_rowbias: x " + shape_str(x.shape()) + " vs b " +
                         shape_str(b.shape()));
    }
    const int64_t n = x.dim(0), m = x.dim(1);
    Tensor out = make_op_output(x.shape(), {x, b});
    const float* px = x.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t r = 0; r < n; ++r) {
        for (int64_t j = 0; j < m; ++j) po[r * m + j] = px[r * m + j] + pb[j];
    }
    record(out, [x, b, n, m](const std::vector<float>& dy) {
        if (wants_grad(x)) {
            auto& g = x.ensure_grad();
            for (size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
        }
        if (wants_grad(b)) {
            auto& g = b.ensure_grad();
            for (int64_t r = 0; r < n; ++r) {
                for (int64_t j = 0; j < m; ++j) g[size_t(j)] += dy[size_t(r * m + j)];
            }
        }
    });
    return out;
}

Tensor scale(const Tensor& x, float c) {
    Tensor out = make_op_output(x.shape(), {x});
    const int64_t n = x.numel();
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * c;
    record(out, [x, c, n](const std::vector<float>& dy) {
        if (!wants_grad(x)) return;
        auto& g = x.ensure_grad();
        for (int64_t i = 0; i < n; ++i) g[size_t(i)] += dy[size_t(i)] * c;
    });
    return out;
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
    Tensor out = make_op_output({1}, {x});
    const int64_t n = x.numel();
    const float* px = x.data();
    double s = 0;
    for (int64_t i = 0; i < n; ++i) s += px[i];
    out.data()[0] = static_cast<float>(s);
    record(out, [x, n](const std::vector<float>& dy) {
        if (!wants_grad(x)) return;
        auto& g = x.ensure_grad();
        for (int64_t i = 0; i < n; ++i) g[size_t(i)] += dy[0];
    });
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(x), 1.f / static_cast<float>(x.numel()));
}

Tensor sum_axis(const Tensor& x, int axis) {
    AxisSplit ax = split_axis(x.shape(), axis);
    Tensor out = make_op_output(drop_axis(x.shape(), axis), {x});
    const float* px = x.data();
    float* po = out.data();
    std::memset(po, 0, sizeof(float) * static_cast<size_t>(out.numel()));
    for (int64_t o = 0; o < ax.outer; ++o) {
        for (int64_t l = 0; l < ax.len; ++l) {
            const float* src = px + (o * ax.len + l) * ax.inner;
            float* dst = po + o * ax.inner;
            for (int64_t i = 0; i < ax.inner; ++i) dst[i] += src[i];
        }
    }
    record(out, [x, ax](const std::vector<float>& dy) {
        if (!wants_grad(x)) return;
        auto& g = x.ensure_grad();
        for (int64_t o = 0; o < ax.outer; ++o) {
            for (int64_t l = 0; l < ax.len; ++l) {
                float* dst = g.data() + (o * ax.len + l) * ax.inner;
                const float* src = dy.data() + o * ax.inner;
                for (int64_t i = 0; i < ax.inner; ++i) dst[i] += src[i];
            }
        }
    });
    return out;
}

Tensor mean_axis(const Tensor& x, int axis) {
    AxisSplit ax = split_axis(x.shape(), axis);
    return scale(sum_axis(x, axis), 1.f / static_cast<float>(ax.len));
}

Tensor max_over_axis(const Tensor& x, int axis) {
    AxisSplit ax = split_axis(x.shape(), axis);
    Tensor out = make_op_output(drop_axis(x.shape(), axis), {x});
    const float* px = x.data();
    float* po = out.data();
    // Argmax (first index on ties) is kept for the backward routing.
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
    for (int64_t o = 0; o < ax.outer; ++o) {
        for (int64_t i = 0; i < ax.inner; ++i) {
            int64_t best = 0;
            float bv = px[(o * ax.len) * ax.inner + i];
            for (int64_t l = 1; l < ax.len; ++l) {
                float v = px[(o * ax.len + l) * ax.inner + i];
                if (v > bv) {
                    bv = v;
                    best = l;
                }
            }
            po[o * ax.inner + i] = bv;
            (*argmax)[static_cast<size_t>(o * ax.inner + i)] = best;
        }
    }
    record(out, [x, ax, argmax](const std::vector<float>& dy) {
        if (!wants_grad(x)) return;
        auto& g = x.ensure_grad();
        for (int64_t o = 0; o < ax.outer; ++o) {
            for (int64_t i = 0; i < ax.inner; ++i) {
                int64_t l = (*argmax)[static_cast<size_t>(o * ax.inner + i)];
                g[size_t((o * ax.len + l) * ax.inner + i)] += dy[size_t(o * ax.inner + i)];
            }
        }
    });
    return out;
}

// ---- losses ----------------------------------------------------------------

namespace {

// Writes log-softmax of each row of [t,v] into out (may alias nothing),
// max-subtraction stabilized.
void log_softmax_rows(const float* logits, float* out, int64_t t, int64_t v) {
    for (int64_t r = 0; r < t; ++r) {
        const float* row = logits + r * v;
        float* orow = out + r * v;
        float mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double se = 0;
        for (int64_t j = 0; j < v; ++j) se += std::exp(double(row[j]) - mx);
        float lse = mx + static_cast<float>(std::log(se));
        for (int64_t j = 0; j < v; ++j) orow[j] = row[j] - lse;
    }
}

}  // namespace

Tensor masked_softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                                    std::span<const uint8_t> mask) {
    if (logits.rank() != 2) throw ShapeError("cross entropy expects [T,V] logits");
    const int64_t t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != t) {
        throw ShapeError("target count does not match logit rows");
    }
    if (!mask.empty() && static_cast<int64_t>(mask.size()) != t) {
        throw ShapeError("mask length does not match logit rows");
    }
    for (int64_t r = 0; r < t; ++r) {
        if (targets[size_t(r)] < 0 || targets[size_t(r)] >= v) {
            throw IndexError("target id " + std::to_string(targets[size_t(r)]) +
                             " out of range for vocab " + std::to_string(v));
        }
    }
    int64_t active = 0;
    if (mask.empty()) {
        active = t;
    } else {
        for (uint8_t m : mask) active += (m != 0);
    }
    Tensor out = make_op_output({1}, {logits});
    if (active == 0) {
        out.data()[0] = 0.f;
        return out;
    }
    auto logp = std::make_shared<std::vector<float>>(static_cast<size_t>(t * v));
    log_softmax_rows(logits.data(), logp->data(), t, v);
    double loss = 0;
    for (int64_t r = 0; r < t; ++r) {
        if (!mask.empty() && !mask[size_t(r)]) continue;
        loss -= (*logp)[size_t(r * v + targets[size_t(r)])];
    }
    out.data()[0] = static_cast<float>(loss / double(active));

    std::vector<int32_t> tgt(targets.begin(), targets.end());
    std::vector<uint8_t> msk(mask.begin(), mask.end());
    record(out, [logits, logp, tgt = std::move(tgt), msk = std::move(msk), t, v,
                 active](const std::vector<float>& dy) {
        if (!wants_grad(logits)) return;
        auto& g = logits.ensure_grad();
        const float w = dy[0] / static_cast<float>(active);
        for (int64_t r = 0; r < t; ++r) {
            if (!msk.empty() && !msk[size_t(r)]) continue;
            const float* lp = logp->data() + r * v;
            float* gr = g.data() + r * v;
            for (int64_t j = 0; j < v; ++j) gr[j] += w * std::exp(lp[j]);
            gr[tgt[size_t(r)]] -= w;
        }
    });
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> targets) {
    return masked_softmax_cross_entropy(logits, targets, {});
}

Tensor kl_teacher_student(const Tensor& teacher_logits, const Tensor& student_logits,
                          std::span<const uint8_t> mask) {
    check_same_shape(teacher_logits, student_logits, "kl_teacher_student");
    if (teacher_logits.rank() != 2) throw ShapeError("kl expects [T,V] logits");
    const int64_t t = teacher_logits.dim(0), v = teacher_logits.dim(1);
    if (!mask.empty() && static_cast<int64_t>(mask.size()) != t) {
        throw ShapeError("mask length does not match logit rows");
    }
    if (!teacher_logits.all_finite() || !student_logits.all_finite()) {
        throw NumericsError("non-finite logits in KL divergence");
    }
    int64_t active = 0;
    if (mask.empty()) {
        active = t;
    } else {
        for (uint8_t m : mask) active += (m != 0);
    }
    Tensor out = make_op_output({1}, {student_logits});
    if (active == 0) {
        out.data()[0] = 0.f;
        return out;
    }
    auto lp_t = std::make_shared<std::vector<float>>(static_cast<size_t>(t * v));
    auto lp_s = std::make_shared<std::vector<float>>(static_cast<size_t>(t * v));
    log_softmax_rows(teacher_logits.data(), lp_t->data(), t, v);
    log_softmax_rows(student_logits.data(), lp_s->data(), t, v);
    double total = 0;
    for (int64_t r = 0; r < t; ++r) {
        if (!mask.empty() && !mask[size_t(r)]) continue;
        const float* pt = lp_t->data() + r * v;
        const float* ps = lp_s->data() + r * v;
        double row = 0;
        for (int64_t j = 0; j < v; ++j) {
            double p = std::exp(double(pt[j]));
            row += p * (double(pt[j]) - ps[j]);
        }
        total += row;
    }
    out.data()[0] = static_cast<float>(total / double(active));

    std::vector<uint8_t> msk(mask.begin(), mask.end());
    record(out, [student_logits, lp_t, lp_s, msk = std::move(msk), t, v,
                 active](const std::vector<float>& dy) {
        if (!wants_grad(student_logits)) return;
        auto& g = student_logits.ensure_grad();
        const float w = dy[0] / static_cast<float>(active);
        for (int64_t r = 0; r < t; ++r) {
            if (!msk.empty() && !msk[size_t(r)]) continue;
            const float* pt = lp_t->data() + r * v;
            const float* ps = lp_s->data() + r * v;
            float* gr = g.data() + r * v;
            for (int64_t j = 0; j < v; ++j) {
                gr[j] += w * (std::exp(ps[j]) - std::exp(pt[j]));
            }
        }
    });
    return out;
}

// ---- model building blocks -------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const int32_t> ids) {
    if (table.rank() != 2) throw ShapeError("embedding table must be [V,d]");
    const int64_t V = table.dim(0), d = table.dim(1);
    const int64_t n = static_cast<int64_t>(ids.size());
    for (int32_t id : ids) {
        if (id < 0 || id >= V) {
            throw IndexError("token id " + std::to_string(id) + " out of range for vocab " +
                             std::to_string(V));
        }
    }
    Tensor out = make_op_output({n, d}, {table});
    for (int64_t i = 0; i < n; ++i) {
        std::memcpy(out.data() + i * d, table.data() + int64_t(ids[size_t(i)]) * d,
                    sizeof(float) * static_cast<size_t>(d));
    }
    std::vector<int32_t> idv(ids.begin(), ids.end());
    record(out, [table, idv = std::move(idv), n, d](const std::vector<float>& dy) {
        if (!wants_grad(table)) return;
        auto& g = table.ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            float* dst = g.data() + int64_t(idv[size_t(i)]) * d;
            const float* src = dy.data() + i * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, float eps) {
    if (x.rank() != 2 || weight.rank() != 1 || x.dim(1) != weight.dim(0)) {
        throw ShapeError("rmsnorm: x " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
    }
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor out = make_op_output({n, d}, {x, weight});
    auto inv_rms = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
    const float* px = x.data();
    const float* pw = weight.data();
    float* po = out.data();
    for (int64_t r = 0; r < n; ++r) {
        const float* row = px + r * d;
        double s = 0;
        for (int64_t j = 0; j < d; ++j) s += double(row[j]) * row[j];
        float ir = 1.f / std::sqrt(static_cast<float>(s / double(d)) + eps);
        (*inv_rms)[size_t(r)] = ir;
        float* orow = po + r * d;
        for (int64_t j = 0; j < d; ++j) orow[j] = pw[j] * row[j] * ir;
    }
    record(out, [x, weight, inv_rms, n, d](const std::vector<float>& dy) {
        const float* px = x.data();
        const float* pw = weight.data();
        const bool gx = wants_grad(x);
        const bool gw = wants_grad(weight);
        float* gxp = gx ? x.ensure_grad().data() : nullptr;
        float* gwp = gw ? weight.ensure_grad().data() : nullptr;
        for (int64_t r = 0; r < n; ++r) {
            const float ir = (*inv_rms)[size_t(r)];
            const float* row = px + r * d;
            const float* dyr = dy.data() + r * d;
            if (gw) {
                for (int64_t j = 0; j < d; ++j) gwp[j] += dyr[j] * row[j] * ir;
            }
            if (gx) {
                double dot = 0;  // sum_i dy_i w_i x_i
                for (int64_t j = 0; j < d; ++j) dot += double(dyr[j]) * pw[j] * row[j];
                const float c = static_cast<float>(dot) * ir * ir * ir / static_cast<float>(d);
                float* gr = gxp + r * d;
                for (int64_t j = 0; j < d; ++j) {
                    gr[j] += dyr[j] * pw[j] * ir - c * row[j];
                }
            }
        }
    });
    return out;
}

Tensor rope(const Tensor& x, int64_t pos0, float theta) {
    if (x.rank() != 4) throw ShapeError("rope expects [B,T,H,dh]");
    const int64_t B = x.dim(0), T = x.dim(1), H = x.dim(2), dh = x.dim(3);
    if (dh % 2 != 0) throw ShapeError("rope head dim must be even");
    Tensor out = make_op_output(x.shape(), {x});
    // Per-(t, pair) angles; reused by the backward rotation.
    const int64_t np = dh / 2;
    auto cs = std::make_shared<std::vector<float>>(static_cast<size_t>(T * np * 2));
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t p = 0; p < np; ++p) {
            float freq = std::pow(theta, -2.f * static_cast<float>(p) / static_cast<float>(dh));
            float ang = static_cast<float>(pos0 + t) * freq;
            (*cs)[size_t((t * np + p) * 2)] = std::cos(ang);
            (*cs)[size_t((t * np + p) * 2 + 1)] = std::sin(ang);
        }
    }
    const float* px = x.data();
    float* po = out.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t t = 0; t < T; ++t) {
            for (int64_t h = 0; h < H; ++h) {
                const float* src = px + ((b * T + t) * H + h) * dh;
                float* dst = po + ((b * T + t) * H + h) * dh;
                for (int64_t p = 0; p < np; ++p) {
                    float c = (*cs)[size_t((t * np + p) * 2)];
                    float s = (*cs)[size_t((t * np + p) * 2 + 1)];
                    float x0 = src[2 * p], x1 = src[2 * p + 1];
                    dst[2 * p] = x0 * c - x1 * s;
                    dst[2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
    record(out, [x, cs, B, T, H, dh, np](const std::vector<float>& dy) {
        if (!wants_grad(x)) return;
        auto& g = x.ensure_grad();
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t t = 0; t < T; ++t) {
                for (int64_t h = 0; h < H; ++h) {
                    const float* src = dy.data() + ((b * T + t) * H + h) * dh;
                    float* dst = g.data() + ((b * T + t) * H + h) * dh;
                    for (int64_t p = 0; p < np; ++p) {
                        float c = (*cs)[size_t((t * np + p) * 2)];
                        float s = (*cs)[size_t((t * np + p) * 2 + 1)];
                        float d0 = src[2 * p], d1 = src[2 * p + 1];
                        dst[2 * p] += d0 * c + d1 * s;
                        dst[2 * p + 1] += -d0 * s + d1 * c;
                    }
                }
            }
        }
    });
    return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 4) throw ShapeError("attention expects [B,T,H,dh]");
    check_same_shape(q, k, "attention q/k");
    check_same_shape(q, v, "attention q/v");
    const int64_t B = q.dim(0), T = q.dim(1), H = q.dim(2), dh = q.dim(3);
    const float scl = 1.f / std::sqrt(static_cast<float>(dh));
    Tensor out = make_op_output(q.shape(), {q, k, v});
    const bool training = out.unsafe_data()->on_path;
    // Probabilities are only materialized for the backward pass.
    std::shared_ptr<std::vector<float>> probs;
    if (training) probs = std::make_shared<std::vector<float>>(size_t(B * H * T * T), 0.f);

    op_counters().attn_score_entries += static_cast<uint64_t>(B * H) *
                                        static_cast<uint64_t>(T) * static_cast<uint64_t>(T + 1) / 2;

    const int64_t row_stride = H * dh;
    std::vector<float> scores(static_cast<size_t>(T) * static_cast<size_t>(T));
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < H; ++h) {
            const float* qp = q.data() + (b * T * H + h) * dh;
            const float* kp = k.data() + (b * T * H + h) * dh;
            const float* vp = v.data() + (b * T * H + h) * dh;
            float* op = out.data() + (b * T * H + h) * dh;
            MapCS Q(qp, T, dh, StrideT(row_stride));
            MapCS K(kp, T, dh, StrideT(row_stride));
            MapCS V(vp, T, dh, StrideT(row_stride));
            MapM S(scores.data(), T, T);
            S.noalias() = Q * K.transpose() * scl;
            // Causal mask + row softmax over the prefix.
            for (int64_t i = 0; i < T; ++i) {
                float* srow = scores.data() + i * T;
                float mx = srow[0];
                for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, srow[j]);
                double se = 0;
                for (int64_t j = 0; j <= i; ++j) {
                    srow[j] = std::exp(srow[j] - mx);
                    se += srow[j];
                }
                const float inv = static_cast<float>(1.0 / se);
                for (int64_t j = 0; j <= i; ++j) srow[j] *= inv;
                for (int64_t j = i + 1; j < T; ++j) srow[j] = 0.f;
            }
            MapMS O(op, T, dh, StrideT(row_stride));
            O.noalias() = S * V;
            if (training) {
                std::memcpy(probs->data() + (b * H + h) * T * T, scores.data(),
                            sizeof(float) * size_t(T * T));
            }
        }
    }

    record(out, [q, k, v, probs, B, T, H, dh, scl, row_stride](const std::vector<float>& dy) {
        const bool gq = wants_grad(q), gk = wants_grad(k), gv = wants_grad(v);
        if (!gq && !gk && !gv) return;
        std::vector<float> dS(static_cast<size_t>(T) * static_cast<size_t>(T));
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < H; ++h) {
                MapC P(probs->data() + (b * H + h) * T * T, T, T);
                MapCS dO(dy.data() + (b * T * H + h) * dh, T, dh, StrideT(row_stride));
                MapCS Q(q.data() + (b * T * H + h) * dh, T, dh, StrideT(row_stride));
                MapCS K(k.data() + (b * T * H + h) * dh, T, dh, StrideT(row_stride));
                MapCS V(v.data() + (b * T * H + h) * dh, T, dh, StrideT(row_stride));
                if (gv) {
                    MapMS dV(v.ensure_grad().data() + (b * T * H + h) * dh, T, dh,
                             StrideT(row_stride));
                    dV.noalias() += P.transpose() * dO;
                }
                if (gq || gk) {
                    MapM dSm(dS.data(), T, T);
                    dSm.noalias() = dO * V.transpose();  // dP
                    // dS = P .* (dP - rowsum(dP .* P))
                    for (int64_t i = 0; i < T; ++i) {
                        float* dsr = dS.data() + i * T;
                        const float* pr = probs->data() + ((b * H + h) * T + i) * T;
                        double acc = 0;
                        for (int64_t j = 0; j <= i; ++j) acc += double(dsr[j]) * pr[j];
                        for (int64_t j = 0; j <= i; ++j) {
                            dsr[j] = pr[j] * (dsr[j] - static_cast<float>(acc));
                        }
                        for (int64_t j = i + 1; j < T; ++j) dsr[j] = 0.f;
                    }
                    if (gq) {
                        MapMS dQ(q.ensure_grad().data() + (b * T * H + h) * dh, T, dh,
                                 StrideT(row_stride));
                        dQ.noalias() += dSm * K * scl;
                    }
                    if (gk) {
                        MapMS dK(k.ensure_grad().data() + (b * T * H + h) * dh, T, dh,
                                 StrideT(row_stride));
                        dK.noalias() += dSm.transpose() * Q * scl;
                    }
                }
            }
        }
    });
    return out;
}

Tensor l2_normalize_last(const Tensor& x, float eps) {
    if (x.rank() < 1) throw ShapeError("l2_normalize_last needs rank >= 1");
    const int64_t d = x.dim(x.rank() - 1);
    const int64_t n = x.numel() / d;
    Tensor out = make_op_output(x.shape(), {x});
    auto inv_norm = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t r = 0; r < n; ++r) {
        const float* row = px + r * d;
        double s = 0;
        for (int64_t j = 0; j < d; ++j) s += double(row[j]) * row[j];
        float in = 1.f / std::max(static_cast<float>(std::sqrt(s)), eps);
        (*inv_norm)[size_t(r)] = in;
        for (int64_t j = 0; j < d; ++j) po[r * d + j] = row[j] * in;
    }
    record(out, [x, out, inv_norm, n, d](const std::vector<float>& dy) {
        if (!wants_grad(x)) return;
        auto& g = x.ensure_grad();
        const float* py = out.data();
        for (int64_t r = 0; r < n; ++r) {
            const float in = (*inv_norm)[size_t(r)];
            const float* yr = py + r * d;
            const float* dyr = dy.data() + r * d;
            double dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += double(yr[j]) * dyr[j];
            float* gr = g.data() + r * d;
            for (int64_t j = 0; j < d; ++j) {
                gr[j] += (dyr[j] - yr[j] * static_cast<float>(dot)) * in;
            }
        }
    });
    return out;
}

// ---- raw kernels -----------------------------------------------------------

namespace raw {

void gemm(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n,
          bool accumulate) {
    MapC A(a, m, k), B(b, k, n);
    MapM C(c, m, n);
    if (accumulate) {
        C.noalias() += A * B;
    } else {
        C.noalias() = A * B;
    }
}

void gemm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    MapC A(a, m, k), B(b, n, k);
    MapM C(c, m, n);
    C.noalias() = A * B.transpose();
}

void gemm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n,
             bool accumulate) {
    MapC A(a, m, k), B(b, m, n);
    MapM C(c, k, n);
    if (accumulate) {
        C.noalias() += A.transpose() * B;
    } else {
        C.noalias() = A.transpose() * B;
    }
}

void vecmat(const float* x, const float* w, float* y, int64_t d, int64_t n) {
    MapC W(w, d, n);
    Eigen::Map<const Eigen::VectorXf> X(x, d);
    Eigen::Map<Eigen::VectorXf> Y(y, n);
    Y.noalias() = W.transpose() * X;
}

void rmsnorm_row(const float* x, const float* w, float* y, int64_t d, float eps) {
    double s = 0;
    for (int64_t j = 0; j < d; ++j) s += double(x[j]) * x[j];
    float ir = 1.f / std::sqrt(static_cast<float>(s / double(d)) + eps);
    for (int64_t j = 0; j < d; ++j) y[j] = w[j] * x[j] * ir;
}

void rope_row(float* x, int64_t dh, int64_t pos, float theta) {
    for (int64_t p = 0; p < dh / 2; ++p) {
        float freq = std::pow(theta, -2.f * static_cast<float>(p) / static_cast<float>(dh));
        float ang = static_cast<float>(pos) * freq;
        float c = std::cos(ang), s = std::sin(ang);
        float x0 = x[2 * p], x1 = x[2 * p + 1];
        x[2 * p] = x0 * c - x1 * s;
        x[2 * p + 1] = x0 * s + x1 * c;
    }
}

void softmax_row(float* x, int64_t n) {
    float mx = x[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double se = 0;
    for (int64_t j = 0; j < n; ++j) {
        x[j] = std::exp(x[j] - mx);
        se += x[j];
    }
    const float inv = static_cast<float>(1.0 / se);
    for (int64_t j = 0; j < n; ++j) x[j] *= inv;
}

}  // namespace raw

}  // namespace lnz::ops
