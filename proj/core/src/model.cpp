#include "lnz/model.hpp"

#include <cstring>

#include "lnz/ops.hpp"
#include "lnz/tape.hpp"

namespace lnz::model {

void ModelConfig::validate() const {
    if (vocab < 2) throw ConfigError("vocab must be >= 2");
    if (n_heads < 1 || n_layers < 1) throw ConfigError("layers/heads must be >= 1");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw ConfigError("head dim must be even (rotary pairs)");
    if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
    if (mlp_mult < 1) throw ConfigError("mlp_mult must be >= 1");
}

Tensor& Model::param(const std::string& name) {
    for (auto& [n, t] : params) {
        if (n == name) return t;
    }
    throw IndexError("no parameter named " + name);
}

const Tensor& Model::param(const std::string& name) const {
    for (const auto& [n, t] : params) {
        if (n == name) return t;
    }
    throw IndexError("no parameter named " + name);
}

bool Model::has_param(const std::string& name) const {
    for (const auto& [n, t] : params) {
        if (n == name) return true;
    }
    return false;
}

int64_t Model::param_count() const {
    int64_t c = 0;
    for (const auto& [n, t] : params) c += t.numel();
    return c;
}

bool Model::is_mixer_path_param(const std::string& name) {
    return name.find(".wq") != std::string::npos || name.find(".wk") != std::string::npos ||
           name.find(".wv") != std::string::npos || name.find(".wo") != std::string::npos ||
           name.find(".gate.") != std::string::npos;
}

bool Model::is_no_decay_param(const std::string& name) {
    return name.find("norm") != std::string::npos || name.find(".gate.") != std::string::npos;
}

void Model::set_all_requires_grad(bool b) {
    for (auto& [n, t] : params) t.set_requires_grad(b);
}

uint64_t Model::param_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [n, t] : params) {
        h = fnv1a(n.data(), n.size(), h);
        h = fnv1a(t.data(), sizeof(float) * static_cast<size_t>(t.numel()), h);
    }
    return h;
}

mixer::GateWeights Model::gate_weights(int layer) const {
    mixer::GateWeights w;
    const std::string p = "layer" + std::to_string(layer) + ".gate.";
    auto get = [&](const char* n) -> Tensor {
        return has_param(p + n) ? param(p + n) : Tensor{};
    };
    w.alpha_w = get("alpha_w");
    w.alpha_b = get("alpha_b");
    w.beta_w = get("beta_w");
    w.beta_b = get("beta_b");
    w.f_w = get("f_w");
    w.f_b = get("f_b");
    w.i_w = get("i_w");
    w.i_b = get("i_b");
    return w;
}

namespace {

constexpr float kInitStd = 0.02f;

void push_randn(Model& m, const std::string& name, Shape shape, Rng& rng, float std_ = kInitStd) {
    m.params.emplace_back(name, Tensor::randn(std::move(shape), rng, std_));
}

void push_const(Model& m, const std::string& name, Shape shape, float v) {
    m.params.emplace_back(name, Tensor::full(std::move(shape), v));
}

void push_shared_layer(Model& m, int l, const ModelConfig& cfg, Rng& rng) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const int64_t d = cfg.d_model;
    push_const(m, p + "attn_norm.weight", {d}, 1.f);
    push_randn(m, p + "wq", {d, d}, rng);
    push_randn(m, p + "wk", {d, d}, rng);
    push_randn(m, p + "wv", {d, d}, rng);
    push_randn(m, p + "wo", {d, d}, rng);
    push_const(m, p + "mlp_norm.weight", {d}, 1.f);
    push_randn(m, p + "w_gate", {d, cfg.mlp_dim()}, rng);
    push_randn(m, p + "w_up", {d, cfg.mlp_dim()}, rng);
    push_randn(m, p + "w_down", {cfg.mlp_dim(), d}, rng);
}

void push_gate_params(Model& m, int l, const ModelConfig& cfg, const mixer::MixerConfig& mcfg,
                      Rng& rng) {
    using namespace mixer;
    const std::string p = "layer" + std::to_string(l) + ".gate.";
    const int64_t d = cfg.d_model;
    const int64_t H = mcfg.n_heads;
    if (has_channel_alpha(mcfg.kind)) {
        push_randn(m, p + "alpha_w", {d, H * mcfg.d_k}, rng);
        push_const(m, p + "alpha_b", {H * mcfg.d_k}, default_alpha_bias(mcfg.kind));
    } else if (has_scalar_alpha(mcfg.kind)) {
        push_randn(m, p + "alpha_w", {d, H}, rng);
        push_const(m, p + "alpha_b", {H}, default_alpha_bias(mcfg.kind));
    }
    if (has_beta(mcfg.kind)) {
        push_randn(m, p + "beta_w", {d, H}, rng);
        push_const(m, p + "beta_b", {H}, 0.f);
    }
    if (has_fi_gates(mcfg.kind)) {
        push_randn(m, p + "f_w", {d, H}, rng);
        push_const(m, p + "f_b", {H}, 0.f);
        push_randn(m, p + "i_w", {d, H}, rng);
        push_const(m, p + "i_b", {H}, 0.f);
    }
}

Model init_common(const ModelConfig& cfg, const mixer::MixerConfig* mcfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    Rng rng(seed);
    push_randn(m, "emb.weight", {cfg.vocab, cfg.d_model}, rng);
    for (int l = 0; l < cfg.n_layers; ++l) {
        push_shared_layer(m, l, cfg, rng);
        if (mcfg) push_gate_params(m, l, cfg, *mcfg, rng);
    }
    push_const(m, "final_norm.weight", {cfg.d_model}, 1.f);
    push_randn(m, "head", {cfg.d_model, cfg.vocab}, rng);
    return m;
}

}  // namespace

Model Model::init_teacher(const ModelConfig& cfg, uint64_t seed) {
    return init_common(cfg, nullptr, seed);
}

Model Model::init_student(const ModelConfig& cfg, const mixer::MixerConfig& mcfg, uint64_t seed) {
    mcfg.validate();
    if (mcfg.d_k != cfg.head_dim() || mcfg.d_v != cfg.head_dim() || mcfg.n_heads != cfg.n_heads) {
        throw ConfigError("mixer head layout must match the model head layout");
    }
    Model m = init_common(cfg, &mcfg, seed);
    m.mixer_cfg = mcfg;
    return m;
}

namespace {

struct ForwardCtx {
    const Model& m;
    int64_t B, T;
    const std::set<int>& capture;
    Activations* acts;
};

Tensor forward_impl(const ForwardCtx& ctx, std::span<const int32_t> tokens) {
    const Model& m = ctx.m;
    const ModelConfig& cfg = m.config;
    const int64_t B = ctx.B, T = ctx.T;
    const int64_t d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    for (int l : ctx.capture) {
        if (l < 0 || l >= cfg.n_layers) {
            throw IndexError("capture layer " + std::to_string(l) + " out of range");
        }
    }

    Tensor x = ops::embedding(m.param("emb.weight"), tokens);  // [B*T, d]
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Tensor xn = ops::rmsnorm(x, m.param(p + "attn_norm.weight"));
        Tensor q = ops::matmul(xn, m.param(p + "wq"));
        Tensor k = ops::matmul(xn, m.param(p + "wk"));
        Tensor v = ops::matmul(xn, m.param(p + "wv"));
        Tensor mixed;
        if (!m.is_student()) {
            Tensor q4 = ops::rope(q.reshape({B, T, H, dh}), 0);
            Tensor k4 = ops::rope(k.reshape({B, T, H, dh}), 0);
            mixed = ops::causal_attention(q4, k4, v.reshape({B, T, H, dh}));
        } else {
            const mixer::MixerConfig& mc = *m.mixer_cfg;
            Tensor k2 = mixer::normalizes_keys(mc.kind) ? ops::l2_normalize_last(k) : k;
            mixer::GateTensors gt = mixer::compute_gates_batched(mc, xn, m.gate_weights(l));
            if (gt.alpha.defined()) {
                gt.alpha = gt.alpha.reshape(
                    mixer::has_channel_alpha(mc.kind)
                        ? Shape{B, T, static_cast<int64_t>(H), static_cast<int64_t>(mc.d_k)}
                        : Shape{B, T, static_cast<int64_t>(H)});
            }
            if (gt.beta.defined()) gt.beta = gt.beta.reshape({B, T, H});
            if (gt.f_pre.defined()) gt.f_pre = gt.f_pre.reshape({B, T, H});
            if (gt.i_pre.defined()) gt.i_pre = gt.i_pre.reshape({B, T, H});
            mixed = mixer::scan(mc, q.reshape({B, T, H, dh}), k2.reshape({B, T, H, dh}),
                                v.reshape({B, T, H, dh}), gt);
        }
        Tensor a = ops::matmul(mixed.reshape({B * T, d}), m.param(p + "wo"));
        if (ctx.acts && ctx.capture.count(l)) ctx.acts->attn_out[l] = a;
        x = ops::add(x, a);
        Tensor hn = ops::rmsnorm(x, m.param(p + "mlp_norm.weight"));
        Tensor gate = ops::silu(ops::matmul(hn, m.param(p + "w_gate")));
        Tensor up = ops::matmul(hn, m.param(p + "w_up"));
        Tensor mlp = ops::matmul(ops::mul(gate, up), m.param(p + "w_down"));
        x = ops::add(x, mlp);
        if (ctx.acts && ctx.capture.count(l)) ctx.acts->hidden[l] = x;
    }
    return ops::matmul(ops::rmsnorm(x, m.param("final_norm.weight")), m.param("head"));
}

void check_token_span(const Model& m, std::span<const int32_t> tokens, int64_t batch,
                      bool uncapped) {
    if (batch < 1 || tokens.size() % static_cast<size_t>(batch) != 0) {
        throw ShapeError("token count not divisible by batch");
    }
    const int64_t T = static_cast<int64_t>(tokens.size()) / batch;
    if (T < 1) throw ShapeError("empty sequence");
    if (!uncapped && T > m.config.seq_len) {
        throw IndexError("sequence length " + std::to_string(T) + " exceeds seq_len " +
                         std::to_string(m.config.seq_len));
    }
}

}  // namespace

Tensor teacher_forward(const Model& m, std::span<const int32_t> tokens, int64_t batch,
                       const std::set<int>& capture, Activations* acts) {
    if (m.is_student()) throw CapabilityError("teacher_forward called on a student model");
    check_token_span(m, tokens, batch, false);
    ForwardCtx ctx{m, batch, static_cast<int64_t>(tokens.size()) / batch, capture, acts};
    return forward_impl(ctx, tokens);
}

Tensor student_forward(const Model& m, std::span<const int32_t> tokens, int64_t batch,
                       const std::set<int>& capture, Activations* acts, bool uncapped) {
    if (!m.is_student()) throw CapabilityError("student_forward called on a teacher model");
    check_token_span(m, tokens, batch, uncapped);
    ForwardCtx ctx{m, batch, static_cast<int64_t>(tokens.size()) / batch, capture, acts};
    return forward_impl(ctx, tokens);
}

Tensor forward(const Model& m, std::span<const int32_t> tokens, int64_t batch,
               const std::set<int>& capture, Activations* acts) {
    return m.is_student() ? student_forward(m, tokens, batch, capture, acts)
                          : teacher_forward(m, tokens, batch, capture, acts);
}

Model surgery(const Model& teacher, const mixer::MixerConfig& mcfg, uint64_t seed) {
    if (teacher.is_student()) throw CapabilityError("surgery source must be a teacher model");
    Model student = Model::init_student(teacher.config, mcfg, seed);
    for (auto& [name, t] : student.params) {
        if (teacher.has_param(name)) {
            // Copied verbatim; new (gate) parameters keep their seeded init.
            t = teacher.param(name).clone();
        }
    }
    student.cursor = TrainingCursor{};
    return student;
}

}  // namespace lnz::model
