#include "lnz/decode.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "lnz/ops.hpp"
#include "lnz/tape.hpp"

namespace lnz::decode {

namespace {

int32_t argmax(std::span<const float> v) {
    return static_cast<int32_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// One-token MLP + residual bookkeeping shared by both engines. `x` is the
// residual stream row [d]; `a` the mixing-block output before residual.
void finish_block(const model::Model& m, int l, std::vector<float>& x, const std::vector<float>& a,
                  std::vector<float>& scratch, std::vector<float>& scratch2) {
    const auto& cfg = m.config;
    const int64_t d = cfg.d_model;
    const int64_t dm = cfg.mlp_dim();
    const std::string p = "layer" + std::to_string(l) + ".";
    for (int64_t i = 0; i < d; ++i) x[size_t(i)] += a[size_t(i)];
    std::vector<float> hn(static_cast<size_t>(d));
    ops::raw::rmsnorm_row(x.data(), m.param(p + "mlp_norm.weight").data(), hn.data(), d);
    scratch.resize(static_cast<size_t>(dm));
    scratch2.resize(static_cast<size_t>(dm));
    ops::raw::vecmat(hn.data(), m.param(p + "w_gate").data(), scratch.data(), d, dm);
    ops::raw::vecmat(hn.data(), m.param(p + "w_up").data(), scratch2.data(), d, dm);
    for (int64_t i = 0; i < dm; ++i) {
        const float g = scratch[size_t(i)];
        const float s = 1.f / (1.f + std::exp(-g));
        scratch[size_t(i)] = g * s * scratch2[size_t(i)];
    }
    std::vector<float> down(static_cast<size_t>(d));
    ops::raw::vecmat(scratch.data(), m.param(p + "w_down").data(), down.data(), dm, d);
    for (int64_t i = 0; i < d; ++i) x[size_t(i)] += down[size_t(i)];
}

void head_logits(const model::Model& m, const std::vector<float>& x, std::vector<float>& logits) {
    const int64_t d = m.config.d_model;
    std::vector<float> xn(static_cast<size_t>(d));
    ops::raw::rmsnorm_row(x.data(), m.param("final_norm.weight").data(), xn.data(), d);
    logits.resize(static_cast<size_t>(m.config.vocab));
    ops::raw::vecmat(xn.data(), m.param("head").data(), logits.data(), d, m.config.vocab);
}

}  // namespace

// ---- teacher ----------------------------------------------------------------

TeacherEngine::TeacherEngine(const model::Model& m, bool uncapped) : m_(m), uncapped_(uncapped) {
    if (m.is_student()) throw CapabilityError("TeacherEngine needs a teacher model");
    kcache_.resize(static_cast<size_t>(m.config.n_layers));
    vcache_.resize(static_cast<size_t>(m.config.n_layers));
}

void TeacherEngine::reset() {
    pos_ = 0;
    for (auto& c : kcache_) c.clear();
    for (auto& c : vcache_) c.clear();
    logits_.clear();
}

size_t TeacherEngine::state_bytes() const {
    size_t b = 0;
    for (const auto& c : kcache_) b += c.size() * sizeof(float);
    for (const auto& c : vcache_) b += c.size() * sizeof(float);
    return b;
}

void TeacherEngine::prefill(std::span<const int32_t> tokens) {
    if (tokens.empty()) return;
    const auto& cfg = m_.config;
    const int64_t T = static_cast<int64_t>(tokens.size());
    if (!uncapped_ && pos_ + T > cfg.seq_len) {
        throw IndexError("context length " + std::to_string(pos_ + T) +
                         " exceeds teacher seq_len " + std::to_string(cfg.seq_len));
    }
    if (pos_ != 0) {
        // Continuation prefill stays on the incremental path.
        for (int32_t t : tokens) feed(t);
        return;
    }
    // Fresh prompt: one parallel forward pass, caching per-layer K/V.
    NoGradGuard ng;
    const int64_t d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    Tensor x = ops::embedding(m_.param("emb.weight"), tokens);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Tensor xn = ops::rmsnorm(x, m_.param(p + "attn_norm.weight"));
        Tensor q4 = ops::rope(ops::matmul(xn, m_.param(p + "wq")).reshape({1, T, H, dh}), 0);
        Tensor k4 = ops::rope(ops::matmul(xn, m_.param(p + "wk")).reshape({1, T, H, dh}), 0);
        Tensor v4 = ops::matmul(xn, m_.param(p + "wv")).reshape({1, T, H, dh});
        kcache_[size_t(l)].assign(k4.data(), k4.data() + k4.numel());
        vcache_[size_t(l)].assign(v4.data(), v4.data() + v4.numel());
        Tensor attn = ops::causal_attention(q4, k4, v4);
        Tensor a = ops::matmul(attn.reshape({T, d}), m_.param(p + "wo"));
        x = ops::add(x, a);
        Tensor hn = ops::rmsnorm(x, m_.param(p + "mlp_norm.weight"));
        Tensor mlp = ops::matmul(
            ops::mul(ops::silu(ops::matmul(hn, m_.param(p + "w_gate"))),
                     ops::matmul(hn, m_.param(p + "w_up"))),
            m_.param(p + "w_down"));
        x = ops::add(x, mlp);
    }
    pos_ = T;
    // Logits for the last position only.
    std::vector<float> last(x.data() + (T - 1) * d, x.data() + T * d);
    head_logits(m_, last, logits_);
}

void TeacherEngine::feed(int32_t token) {
    const auto& cfg = m_.config;
    if (!uncapped_ && pos_ + 1 > cfg.seq_len) {
        throw IndexError("context length " + std::to_string(pos_ + 1) +
                         " exceeds teacher seq_len " + std::to_string(cfg.seq_len));
    }
    if (token < 0 || token >= cfg.vocab) throw IndexError("token id out of range");
    const int64_t d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    const float scl = 1.f / std::sqrt(static_cast<float>(dh));
    std::vector<float> x(m_.param("emb.weight").data() + int64_t(token) * d,
                         m_.param("emb.weight").data() + (int64_t(token) + 1) * d);
    std::vector<float> xn(static_cast<size_t>(d)), q(static_cast<size_t>(d)), k(static_cast<size_t>(d)), v(static_cast<size_t>(d)), a(static_cast<size_t>(d));
    std::vector<float> attn(static_cast<size_t>(d)), s1, s2;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        ops::raw::rmsnorm_row(x.data(), m_.param(p + "attn_norm.weight").data(), xn.data(), d);
        ops::raw::vecmat(xn.data(), m_.param(p + "wq").data(), q.data(), d, d);
        ops::raw::vecmat(xn.data(), m_.param(p + "wk").data(), k.data(), d, d);
        ops::raw::vecmat(xn.data(), m_.param(p + "wv").data(), v.data(), d, d);
        for (int h = 0; h < H; ++h) {
            ops::raw::rope_row(q.data() + h * dh, dh, pos_);
            ops::raw::rope_row(k.data() + h * dh, dh, pos_);
        }
        auto& kc = kcache_[size_t(l)];
        auto& vc = vcache_[size_t(l)];
        kc.insert(kc.end(), k.begin(), k.end());
        vc.insert(vc.end(), v.begin(), v.end());
        const int64_t n_pos = pos_ + 1;
        std::vector<float> scores(static_cast<size_t>(n_pos));
        for (int h = 0; h < H; ++h) {
            const float* qh = q.data() + h * dh;
            for (int64_t t = 0; t < n_pos; ++t) {
                const float* kh = kc.data() + t * d + h * dh;
                float acc = 0.f;
                for (int j = 0; j < dh; ++j) acc += qh[j] * kh[j];
                scores[size_t(t)] = acc * scl;
            }
            ops::raw::softmax_row(scores.data(), n_pos);
            float* oh = attn.data() + h * dh;
            std::memset(oh, 0, sizeof(float) * size_t(dh));
            for (int64_t t = 0; t < n_pos; ++t) {
                const float* vh = vc.data() + t * d + h * dh;
                const float w = scores[size_t(t)];
                for (int j = 0; j < dh; ++j) oh[j] += w * vh[j];
            }
            op_counters().attn_score_entries += static_cast<uint64_t>(n_pos);
        }
        ops::raw::vecmat(attn.data(), m_.param(p + "wo").data(), a.data(), d, d);
        finish_block(m_, l, x, a, s1, s2);
    }
    ++pos_;
    head_logits(m_, x, logits_);
}

int32_t TeacherEngine::decode_next() {
    if (logits_.empty()) throw StateError("decode_next before prefill");
    const int32_t tok = argmax(logits_);
    feed(tok);
    return tok;
}

// ---- student ----------------------------------------------------------------

StudentEngine::StudentEngine(const model::Model& m) : m_(m) {
    if (!m.is_student()) throw CapabilityError("StudentEngine needs a student model");
    reset();
}

void StudentEngine::reset() {
    states_.assign(static_cast<size_t>(m_.config.n_layers),
                   mixer::MixerState::zeros(*m_.mixer_cfg));
    logits_.clear();
}

size_t StudentEngine::state_bytes() const {
    size_t b = 0;
    for (const auto& s : states_) b += s.byte_size();
    return b;
}

void StudentEngine::prefill(std::span<const int32_t> tokens) {
    if (tokens.empty()) return;
    // Parallel prefill: projections and gates via batched ops, the
    // recurrence via the lane scan; per-layer final states seed decoding.
    NoGradGuard ng;
    const auto& cfg = m_.config;
    const mixer::MixerConfig& mc = *m_.mixer_cfg;
    const int64_t T = static_cast<int64_t>(tokens.size());
    const int64_t d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    Tensor x = ops::embedding(m_.param("emb.weight"), tokens);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Tensor xn = ops::rmsnorm(x, m_.param(p + "attn_norm.weight"));
        Tensor q = ops::matmul(xn, m_.param(p + "wq"));
        Tensor k = ops::matmul(xn, m_.param(p + "wk"));
        Tensor v = ops::matmul(xn, m_.param(p + "wv"));
        if (mixer::normalizes_keys(mc.kind)) k = ops::l2_normalize_last(k);
        mixer::GateTensors gt = mixer::compute_gates_batched(mc, xn, m_.gate_weights(l));
        if (gt.alpha.defined()) {
            gt.alpha = gt.alpha.reshape(mixer::has_channel_alpha(mc.kind)
                                            ? Shape{1, T, int64_t(H), int64_t(mc.d_k)}
                                            : Shape{1, T, int64_t(H)});
        }
        if (gt.beta.defined()) gt.beta = gt.beta.reshape({1, T, H});
        if (gt.f_pre.defined()) gt.f_pre = gt.f_pre.reshape({1, T, H});
        if (gt.i_pre.defined()) gt.i_pre = gt.i_pre.reshape({1, T, H});
        Tensor mixed = mixer::scan(mc, q.reshape({1, T, H, dh}), k.reshape({1, T, H, dh}),
                                   v.reshape({1, T, H, dh}), gt, &states_[size_t(l)]);
        Tensor a = ops::matmul(mixed.reshape({T, d}), m_.param(p + "wo"));
        x = ops::add(x, a);
        Tensor hn = ops::rmsnorm(x, m_.param(p + "mlp_norm.weight"));
        Tensor mlp = ops::matmul(
            ops::mul(ops::silu(ops::matmul(hn, m_.param(p + "w_gate"))),
                     ops::matmul(hn, m_.param(p + "w_up"))),
            m_.param(p + "w_down"));
        x = ops::add(x, mlp);
    }
    std::vector<float> last(x.data() + (T - 1) * d, x.data() + T * d);
    head_logits(m_, last, logits_);
}

void StudentEngine::feed(int32_t token) {
    const auto& cfg = m_.config;
    const mixer::MixerConfig& mc = *m_.mixer_cfg;
    if (token < 0 || token >= cfg.vocab) throw IndexError("token id out of range");
    const int64_t d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    std::vector<float> x(m_.param("emb.weight").data() + int64_t(token) * d,
                         m_.param("emb.weight").data() + (int64_t(token) + 1) * d);
    std::vector<float> xn(static_cast<size_t>(d)), a(static_cast<size_t>(d)), s1, s2;
    mixer::ProjectedToken tok;
    tok.q.resize(static_cast<size_t>(d));
    tok.k.resize(static_cast<size_t>(d));
    tok.v.resize(static_cast<size_t>(d));
    std::vector<float> mixed(static_cast<size_t>(d));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        ops::raw::rmsnorm_row(x.data(), m_.param(p + "attn_norm.weight").data(), xn.data(), d);
        ops::raw::vecmat(xn.data(), m_.param(p + "wq").data(), tok.q.data(), d, d);
        ops::raw::vecmat(xn.data(), m_.param(p + "wk").data(), tok.k.data(), d, d);
        ops::raw::vecmat(xn.data(), m_.param(p + "wv").data(), tok.v.data(), d, d);
        if (mixer::normalizes_keys(mc.kind)) {
            for (int h = 0; h < H; ++h) {
                float* kh = tok.k.data() + h * dh;
                double s = 0;
                for (int j = 0; j < dh; ++j) s += double(kh[j]) * kh[j];
                const float inv = 1.f / std::max(static_cast<float>(std::sqrt(s)), 1e-6f);
                for (int j = 0; j < dh; ++j) kh[j] *= inv;
            }
        }
        mixer::GateSignals g = mixer::compute_gates(mc, xn, m_.gate_weights(l));
        mixer::step(mc, states_[size_t(l)], tok, g, mixed);
        ops::raw::vecmat(mixed.data(), m_.param(p + "wo").data(), a.data(), d, d);
        finish_block(m_, l, x, a, s1, s2);
    }
    head_logits(m_, x, logits_);
}

int32_t StudentEngine::decode_next() {
    if (logits_.empty()) throw StateError("decode_next before prefill");
    const int32_t tok = argmax(logits_);
    feed(tok);
    return tok;
}

std::unique_ptr<Engine> make_engine(const model::Model& m, bool uncapped) {
    if (m.is_student()) return std::make_unique<StudentEngine>(m);
    return std::make_unique<TeacherEngine>(m, uncapped);
}

std::vector<int32_t> generate(Engine& eng, std::span<const int32_t> prompt, int n) {
    eng.reset();
    eng.prefill(prompt);
    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(eng.decode_next());
    return out;
}

}  // namespace lnz::decode
