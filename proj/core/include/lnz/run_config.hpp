#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lnz/data.hpp"
#include "lnz/distill.hpp"
#include "lnz/eval.hpp"
#include "lnz/model.hpp"

namespace lnz::config {

struct TeacherConfig {
    int64_t budget_tokens = 12'000'000;
    float lr = 3e-4f;
    // Early stop once held-out markov ppl <= (1 + floor_margin) * exp(H).
    double floor_margin = 0.05;
    int64_t eval_every_tokens = 262'144;
    int64_t eval_tokens = 65'536;
};

// The whole experiment in one validated document. Unknown keys are
// rejected so typos cannot silently fall back to defaults.
struct RunConfig {
    uint64_t seed = 1;
    std::string out_dir;
    model::ModelConfig model;
    std::optional<mixer::MixerConfig> mixer;
    data::DataConfig data;
    TeacherConfig teacher;
    distill::PipelineConfig pipeline;
    eval::SuiteConfig eval_suite;
    std::vector<int64_t> niah_eval_lens = {512};
    int niah_eval_instances = 200;
    std::vector<int64_t> bench_contexts = {512, 1024, 2048, 4096};
    int bench_decode_len = 32;
    int bench_repeats = 5;

    // Filled with the kind requested on the command line when absent here.
    mixer::MixerConfig mixer_or_default(const std::string& kind_name) const;

    void validate() const;
    std::string to_json_text() const;
};

RunConfig default_config();

// Parses + validates. `overrides` are dotted key=value assignments applied
// on top of the document before validation.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});
RunConfig parse_config_text(const std::string& text,
                            const std::vector<std::string>& overrides = {});

}  // namespace lnz::config
