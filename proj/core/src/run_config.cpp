#include "lnz/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace lnz::config {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& at) {
    if (!j.is_object()) throw ConfigError("config node '" + at + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        if (!allowed.count(k)) {
            throw ConfigError("unknown config key '" + (at.empty() ? k : at + "." + k) + "'");
        }
    }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

json full_json(const RunConfig& c);

RunConfig from_json(const json& j) {
    RunConfig c = default_config();
    reject_unknown(j, {"seed", "out_dir", "model", "mixer", "data", "teacher", "pipeline", "eval"},
                   "");
    get_to(j, "seed", c.seed);
    get_to(j, "out_dir", c.out_dir);
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m, {"vocab", "d_model", "n_layers", "n_heads", "seq_len", "mlp_mult"},
                       "model");
        get_to(m, "vocab", c.model.vocab);
        get_to(m, "d_model", c.model.d_model);
        get_to(m, "n_layers", c.model.n_layers);
        get_to(m, "n_heads", c.model.n_heads);
        get_to(m, "seq_len", c.model.seq_len);
        get_to(m, "mlp_mult", c.model.mlp_mult);
    }
    if (j.contains("mixer") && !j.at("mixer").is_null()) {
        const json& m = j.at("mixer");
        reject_unknown(m, {"kind", "gate_temperature", "retnet_decays"}, "mixer");
        mixer::MixerConfig mc;
        mc.kind = mixer::kind_from_name(m.at("kind").get<std::string>());
        get_to(m, "gate_temperature", mc.gate_temperature);
        get_to(m, "retnet_decays", mc.retnet_decays);
        mc.n_heads = c.model.n_heads;
        mc.d_k = mc.d_v = c.model.head_dim();
        c.mixer = mc;
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown(d, {"markov", "mix", "instr_mix"}, "data");
        if (d.contains("markov")) {
            const json& mk = d.at("markov");
            reject_unknown(mk, {"vocab", "order", "branching", "word_lo", "uniform", "seed"},
                           "data.markov");
            get_to(mk, "vocab", c.data.markov.vocab);
            get_to(mk, "order", c.data.markov.order);
            get_to(mk, "branching", c.data.markov.branching);
            get_to(mk, "word_lo", c.data.markov.word_lo);
            get_to(mk, "uniform", c.data.markov.uniform);
            get_to(mk, "seed", c.data.markov.seed);
        }
        if (d.contains("mix")) {
            const json& mx = d.at("mix");
            reject_unknown(mx, {"markov", "niah", "instruct"}, "data.mix");
            get_to(mx, "markov", c.data.mix.markov);
            get_to(mx, "niah", c.data.mix.niah);
            get_to(mx, "instruct", c.data.mix.instruct);
        }
        if (d.contains("instr_mix")) {
            const json& im = d.at("instr_mix");
            reject_unknown(im, {"copy", "reverse", "add_mod", "retrieve"}, "data.instr_mix");
            get_to(im, "copy", c.data.instr_mix.copy);
            get_to(im, "reverse", c.data.instr_mix.reverse);
            get_to(im, "add_mod", c.data.instr_mix.add_mod);
            get_to(im, "retrieve", c.data.instr_mix.retrieve);
        }
    }
    if (j.contains("teacher")) {
        const json& t = j.at("teacher");
        reject_unknown(t, {"budget_tokens", "lr", "floor_margin", "eval_every_tokens",
                           "eval_tokens"},
                       "teacher");
        get_to(t, "budget_tokens", c.teacher.budget_tokens);
        get_to(t, "lr", c.teacher.lr);
        get_to(t, "floor_margin", c.teacher.floor_margin);
        get_to(t, "eval_every_tokens", c.teacher.eval_every_tokens);
        get_to(t, "eval_tokens", c.teacher.eval_tokens);
    }
    if (j.contains("pipeline")) {
        const json& p = j.at("pipeline");
        reject_unknown(p,
                       {"stage1_tokens", "stage2_tokens", "stage3_tokens", "l1_layers",
                        "l2_layers", "lambda_kl", "lr_stage1", "lr_stage2", "lr_stage3",
                        "warmup_frac", "beta1", "beta2", "weight_decay", "grad_clip",
                        "batch_seqs", "seq_len", "metrics_every", "checkpoint_every_tokens",
                        "h2h_squared"},
                       "pipeline");
        auto& pc = c.pipeline;
        get_to(p, "stage1_tokens", pc.stage1_tokens);
        get_to(p, "stage2_tokens", pc.stage2_tokens);
        get_to(p, "stage3_tokens", pc.stage3_tokens);
        get_to(p, "l1_layers", pc.l1_layers);
        get_to(p, "l2_layers", pc.l2_layers);
        get_to(p, "lambda_kl", pc.lambda_kl);
        get_to(p, "lr_stage1", pc.lr_stage1);
        get_to(p, "lr_stage2", pc.lr_stage2);
        get_to(p, "lr_stage3", pc.lr_stage3);
        get_to(p, "warmup_frac", pc.warmup_frac);
        get_to(p, "beta1", pc.adam.beta1);
        get_to(p, "beta2", pc.adam.beta2);
        get_to(p, "weight_decay", pc.adam.weight_decay);
        get_to(p, "grad_clip", pc.adam.grad_clip);
        get_to(p, "batch_seqs", pc.batch_seqs);
        get_to(p, "seq_len", pc.seq_len);
        get_to(p, "metrics_every", pc.metrics_every);
        get_to(p, "checkpoint_every_tokens", pc.checkpoint_every_tokens);
        get_to(p, "h2h_squared", pc.h2h_squared);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        reject_unknown(e,
                       {"ppl_tokens", "batch", "seq_len", "instr_instances", "niah_instances",
                        "niah_len", "niah_eval_lens", "niah_eval_instances", "bench_contexts",
                        "bench_decode_len", "bench_repeats"},
                       "eval");
        get_to(e, "ppl_tokens", c.eval_suite.ppl_tokens);
        get_to(e, "batch", c.eval_suite.batch);
        get_to(e, "seq_len", c.eval_suite.seq_len);
        get_to(e, "instr_instances", c.eval_suite.instr_instances);
        get_to(e, "niah_instances", c.eval_suite.niah_instances);
        get_to(e, "niah_len", c.eval_suite.niah_len);
        get_to(e, "niah_eval_lens", c.niah_eval_lens);
        get_to(e, "niah_eval_instances", c.niah_eval_instances);
        get_to(e, "bench_contexts", c.bench_contexts);
        get_to(e, "bench_decode_len", c.bench_decode_len);
        get_to(e, "bench_repeats", c.bench_repeats);
    }
    return c;
}

json full_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["model"] = {{"vocab", c.model.vocab},     {"d_model", c.model.d_model},
                  {"n_layers", c.model.n_layers}, {"n_heads", c.model.n_heads},
                  {"seq_len", c.model.seq_len}, {"mlp_mult", c.model.mlp_mult}};
    if (c.mixer) {
        j["mixer"] = {{"kind", mixer::kind_name(c.mixer->kind)},
                      {"gate_temperature", c.mixer->gate_temperature},
                      {"retnet_decays", c.mixer->retnet_decays}};
    } else {
        j["mixer"] = nullptr;
    }
    j["data"] = {
        {"markov",
         {{"vocab", c.data.markov.vocab},
          {"order", c.data.markov.order},
          {"branching", c.data.markov.branching},
          {"word_lo", c.data.markov.word_lo},
          {"uniform", c.data.markov.uniform},
          {"seed", c.data.markov.seed}}},
        {"mix",
         {{"markov", c.data.mix.markov}, {"niah", c.data.mix.niah},
          {"instruct", c.data.mix.instruct}}},
        {"instr_mix",
         {{"copy", c.data.instr_mix.copy},
          {"reverse", c.data.instr_mix.reverse},
          {"add_mod", c.data.instr_mix.add_mod},
          {"retrieve", c.data.instr_mix.retrieve}}}};
    j["teacher"] = {{"budget_tokens", c.teacher.budget_tokens},
                    {"lr", c.teacher.lr},
                    {"floor_margin", c.teacher.floor_margin},
                    {"eval_every_tokens", c.teacher.eval_every_tokens},
                    {"eval_tokens", c.teacher.eval_tokens}};
    j["pipeline"] = {{"stage1_tokens", c.pipeline.stage1_tokens},
                     {"stage2_tokens", c.pipeline.stage2_tokens},
                     {"stage3_tokens", c.pipeline.stage3_tokens},
                     {"l1_layers", c.pipeline.l1_layers},
                     {"l2_layers", c.pipeline.l2_layers},
                     {"lambda_kl", c.pipeline.lambda_kl},
                     {"lr_stage1", c.pipeline.lr_stage1},
                     {"lr_stage2", c.pipeline.lr_stage2},
                     {"lr_stage3", c.pipeline.lr_stage3},
                     {"warmup_frac", c.pipeline.warmup_frac},
                     {"beta1", c.pipeline.adam.beta1},
                     {"beta2", c.pipeline.adam.beta2},
                     {"weight_decay", c.pipeline.adam.weight_decay},
                     {"grad_clip", c.pipeline.adam.grad_clip},
                     {"batch_seqs", c.pipeline.batch_seqs},
                     {"seq_len", c.pipeline.seq_len},
                     {"metrics_every", c.pipeline.metrics_every},
                     {"checkpoint_every_tokens", c.pipeline.checkpoint_every_tokens},
                     {"h2h_squared", c.pipeline.h2h_squared}};
    j["eval"] = {{"ppl_tokens", c.eval_suite.ppl_tokens},
                 {"batch", c.eval_suite.batch},
                 {"seq_len", c.eval_suite.seq_len},
                 {"instr_instances", c.eval_suite.instr_instances},
                 {"niah_instances", c.eval_suite.niah_instances},
                 {"niah_len", c.eval_suite.niah_len},
                 {"niah_eval_lens", c.niah_eval_lens},
                 {"niah_eval_instances", c.niah_eval_instances},
                 {"bench_contexts", c.bench_contexts},
                 {"bench_decode_len", c.bench_decode_len},
                 {"bench_repeats", c.bench_repeats}};
    return j;
}

json parse_override_value(const std::string& raw) {
    try {
        return json::parse(raw);
    } catch (const json::exception&) {
        return json(raw);  // plain string
    }
}

void apply_override(json& root, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override '" + assignment + "' must look like key.path=value");
    }
    const std::string path = assignment.substr(0, eq);
    json* node = &root;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    if (parts.empty()) throw ConfigError("empty override path");
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        node = &(*node)[parts[i]];
    }
    (*node)[parts.back()] = parse_override_value(assignment.substr(eq + 1));
}

}  // namespace

mixer::MixerConfig RunConfig::mixer_or_default(const std::string& kind_name) const {
    if (mixer) return *mixer;
    mixer::MixerConfig mc;
    mc.kind = mixer::kind_from_name(kind_name);
    mc.n_heads = model.n_heads;
    mc.d_k = mc.d_v = model.head_dim();
    return mc;
}

void RunConfig::validate() const {
    model.validate();
    if (mixer) mixer->validate();
    data.markov.validate();
    data.mix.validate();
    data.instr_mix.validate();
    pipeline.validate(model);
    if (data.markov.vocab != model.vocab) {
        throw ConfigError("data.markov.vocab must equal model.vocab");
    }
    if (teacher.budget_tokens < 0) throw ConfigError("teacher budget must be >= 0");
    if (teacher.floor_margin < 0) throw ConfigError("teacher floor_margin must be >= 0");
    for (size_t i = 1; i < bench_contexts.size(); ++i) {
        if (bench_contexts[i] <= bench_contexts[i - 1]) {
            throw ConfigError("bench contexts must be strictly increasing");
        }
    }
    if (niah_eval_instances < 1) throw ConfigError("niah_eval_instances must be >= 1");
}

std::string RunConfig::to_json_text() const {
    return full_json(*this).dump(2) + "\n";
}

RunConfig default_config() {
    RunConfig c;
    c.data.markov.vocab = c.model.vocab;
    return c;
}

RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    for (const std::string& o : overrides) apply_override(j, o);
    RunConfig c;
    try {
        c = from_json(j);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream is(path);
    if (!is) throw AssetError("cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str(), overrides);
}

}  // namespace lnz::config
