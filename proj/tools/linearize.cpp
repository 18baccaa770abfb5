// Command-line front end: teacher pretraining, linearization pipelines,
// adaptation regimes, evaluation, NIAH suites, latency benchmarks and
// checkpoint curves, all driven by one JSON config.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lnz/checkpoint.hpp"
#include "lnz/common.hpp"
#include "lnz/data.hpp"
#include "lnz/decode.hpp"
#include "lnz/distill.hpp"
#include "lnz/eval.hpp"
#include "lnz/metrics.hpp"
#include "lnz/model.hpp"
#include "lnz/ops.hpp"
#include "lnz/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lnz;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitAsset = 3;
constexpr int kExitNumerics = 4;

// Single-writer guard on an output directory.
class DirLock {
  public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (fs::exists(path_)) {
            throw AssetError("output directory " + dir.string() +
                             " is locked by another run (stale? remove " + path_.string() + ")");
        }
        std::ofstream(path_) << "locked\n";
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

  private:
    fs::path path_;
};

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    uint64_t seed = 0;
    bool seed_set = false;
};

config::RunConfig resolve_config(const CommonArgs& a) {
    config::RunConfig c =
        a.config_path.empty()
            ? config::parse_config_text("{}", a.overrides)
            : config::load_config(a.config_path, a.overrides);
    if (a.seed_set) c.seed = a.seed;
    if (!a.out_dir.empty()) c.out_dir = a.out_dir;
    return c;
}

fs::path prepare_out_dir(const config::RunConfig& c) {
    if (c.out_dir.empty()) throw ConfigError("an output directory is required (--out or out_dir)");
    fs::create_directories(fs::path(c.out_dir) / "checkpoints");
    fs::create_directories(fs::path(c.out_dir) / "reports");
    std::ofstream(fs::path(c.out_dir) / "config.json") << c.to_json_text();
    return c.out_dir;
}

double markov_floor_ppl(const config::RunConfig& c) {
    data::MarkovSource src(c.data.markov);
    return std::exp(src.entropy_rate());
}

eval::SuiteConfig suite_config(const config::RunConfig& c, double floor_ppl) {
    eval::SuiteConfig sc = c.eval_suite;
    sc.floor_ppl = floor_ppl;
    sc.seed = hash_mix(c.seed, hash_str("suite"));
    return sc;
}

void write_json_report(const fs::path& path, const json& j) {
    std::ofstream os(path);
    os << j.dump(2) << "\n";
}

// ---- train-teacher ------------------------------------------------------------

int cmd_train_teacher(const CommonArgs& args, const std::string& finetune_from,
                      bool instruct_mode) {
    config::RunConfig c = resolve_config(args);
    fs::path out = prepare_out_dir(c);
    DirLock lock(out);

    model::Model teacher =
        finetune_from.empty()
            ? model::Model::init_teacher(c.model, hash_mix(c.seed, hash_str("teacher-init")))
            : checkpoint::load(finetune_from, c.model);

    const double floor = markov_floor_ppl(c);
    const double target = (1.0 + c.teacher.floor_margin) * floor;
    std::cout << "entropy floor ppl " << floor << ", early-stop target " << target << "\n";

    std::ofstream csv(out / "metrics.csv");
    metrics::write_csv_header(csv);
    distill::StageHooks hooks;
    hooks.metrics_csv = &csv;
    hooks.on_checkpoint = [&](const model::Model& m, int64_t tokens) {
        checkpoint::save(
            (out / "checkpoints" / ("step_" + std::to_string(tokens) + ".lnz")).string(), m);
    };

    std::unique_ptr<data::BatchStream> stream;
    if (instruct_mode) {
        stream = std::make_unique<data::InstructionStream>(c.data,
                                                           hash_mix(c.seed, hash_str("instruct")));
    } else {
        stream =
            std::make_unique<data::MixtureStream>(c.data, hash_mix(c.seed, hash_str("pretrain")));
    }

    int64_t last_eval = 0;
    auto should_stop = [&](int64_t tokens) {
        if (instruct_mode) return false;
        if (tokens - last_eval < c.teacher.eval_every_tokens) return false;
        last_eval = tokens;
        data::MarkovStream holdout(c.data.markov, hash_mix(c.seed, hash_str("floor-holdout")));
        const double ppl = eval::perplexity(teacher, holdout, c.teacher.eval_tokens,
                                            c.pipeline.batch_seqs, c.pipeline.seq_len);
        std::cout << "tokens " << tokens << "  markov holdout ppl " << ppl << std::endl;
        return ppl <= target;
    };

    if (c.teacher.budget_tokens == 0) {
        std::cout << "warning: zero token budget, writing the initialized model\n";
    } else {
        distill::train_lm(teacher, *stream, c.teacher.budget_tokens, c.teacher.lr, c.pipeline,
                          hooks, should_stop);
    }
    const std::string final_path = (out / "teacher.lnz").string();
    checkpoint::save(final_path, teacher);
    std::cout << "teacher checkpoint: " << final_path << " (hash "
              << checkpoint::file_hash(final_path) << ")\n";
    return 0;
}

// ---- distill -------------------------------------------------------------------

int cmd_distill(const CommonArgs& args, const std::string& teacher_path, const std::string& kind,
                const std::string& resume_path, std::vector<int> stages) {
    config::RunConfig c = resolve_config(args);
    fs::path out = prepare_out_dir(c);
    DirLock lock(out);
    if (!fs::exists(teacher_path)) throw AssetError("missing teacher checkpoint " + teacher_path);
    model::Model teacher = checkpoint::load(teacher_path, c.model);
    if (teacher.is_student()) throw AssetError("teacher checkpoint holds a student model");

    mixer::MixerConfig mc = c.mixer_or_default(kind);
    model::Model student =
        resume_path.empty() ? model::surgery(teacher, mc, hash_mix(c.seed, hash_str("surgery")))
                            : checkpoint::load(resume_path, c.model);
    if (!student.is_student()) throw AssetError("resume checkpoint holds a teacher model");

    if (stages.empty()) stages = {1, 2, 3};
    std::sort(stages.begin(), stages.end());

    std::ofstream csv(out / "metrics.csv");
    metrics::write_csv_header(csv);
    distill::StageHooks hooks;
    hooks.metrics_csv = &csv;
    hooks.on_checkpoint = [&](const model::Model& m, int64_t tokens) {
        checkpoint::save(
            (out / "checkpoints" / ("step_" + std::to_string(tokens) + ".lnz")).string(), m);
    };

    data::MixtureStream stream(c.data, hash_mix(c.seed, hash_str("distill")));
    json stage_reports = json::array();
    for (int s : stages) {
        distill::StageReport rep =
            distill::run_stage(s, teacher, student, stream, c.pipeline, hooks);
        std::cout << "stage " << s << " done, " << rep.tokens_consumed << " tokens" << std::endl;
        stage_reports.push_back({{"stage", s}, {"tokens", rep.tokens_consumed}});
    }
    const std::string final_path =
        (out / ("student_" + std::string(mixer::kind_name(mc.kind)) + ".lnz")).string();
    checkpoint::save(final_path, student);
    write_json_report(out / "reports" / "stages.json",
                      json{{"kind", mixer::kind_name(mc.kind)}, {"stages", stage_reports}});
    std::cout << "student checkpoint: " << final_path << "\n";
    return 0;
}

// ---- adapt ---------------------------------------------------------------------

int cmd_adapt(const CommonArgs& args, const std::string& regime_name,
              const std::string& student_path, const std::string& teacher_path,
              const std::string& kind) {
    config::RunConfig c = resolve_config(args);
    fs::path out = prepare_out_dir(c);
    DirLock lock(out);

    std::ofstream csv(out / "metrics.csv");
    metrics::write_csv_header(csv);
    distill::StageHooks hooks;
    hooks.metrics_csv = &csv;
    hooks.on_checkpoint = [&](const model::Model& m, int64_t tokens) {
        checkpoint::save(
            (out / "checkpoints" / ("step_" + std::to_string(tokens) + ".lnz")).string(), m);
    };

    data::InstructionStream instruct(c.data, hash_mix(c.seed, hash_str("adapt-instr")));
    data::MixtureStream raw(c.data, hash_mix(c.seed, hash_str("adapt-raw")));

    std::vector<distill::StageReport> reports;
    model::Model student = [&] {
        if (regime_name == "A") {
            if (student_path.empty()) throw AssetError("regime A requires --student");
            return checkpoint::load(student_path, c.model);
        }
        if (regime_name != "B") throw ConfigError("regime must be A or B");
        if (teacher_path.empty()) {
            throw AssetError("regime B requires --teacher (instruction-tuned)");
        }
        model::Model t = checkpoint::load(teacher_path, c.model);
        return model::surgery(t, c.mixer_or_default(kind), hash_mix(c.seed, hash_str("surgery")));
    }();

    if (regime_name == "A") {
        distill::RegimeAssets assets;
        assets.instruct = &instruct;
        reports = distill::run_regime(distill::Regime::A, student, assets, c.pipeline, hooks);
    } else {
        model::Model teacher = checkpoint::load(teacher_path, c.model);
        distill::RegimeAssets assets;
        assets.teacher = &teacher;
        assets.raw = &raw;
        assets.instruct = &instruct;
        reports = distill::run_regime(distill::Regime::B, student, assets, c.pipeline, hooks);
    }

    json jr = json::array();
    for (const auto& r : reports) {
        jr.push_back({{"stage", r.stage}, {"tokens", r.tokens_consumed}});
    }
    write_json_report(out / "reports" / "regime.json",
                      json{{"regime", regime_name}, {"stages", jr}});
    const std::string final_path = (out / "adapted.lnz").string();
    checkpoint::save(final_path, student);
    std::cout << "adapted checkpoint: " << final_path << "\n";
    return 0;
}

// ---- eval ----------------------------------------------------------------------

int cmd_eval(const CommonArgs& args, const std::string& teacher_path,
             const std::vector<std::string>& model_paths) {
    config::RunConfig c = resolve_config(args);
    fs::path out = prepare_out_dir(c);
    const double floor = markov_floor_ppl(c);
    eval::SuiteConfig sc = suite_config(c, floor);

    model::Model teacher = checkpoint::load(teacher_path, c.model);
    eval::SuiteScores tscores = eval::desk_suite(teacher, c.data, sc);

    std::vector<double> tvals;
    for (const auto& [n, v] : tscores.scores) tvals.push_back(v);

    json out_models = json::array();
    std::vector<eval::RecoveryReport> reports;
    std::vector<json> model_jsons;
    for (const std::string& path : model_paths) {
        model::Model m = checkpoint::load(path, c.model);
        eval::SuiteScores s = eval::desk_suite(m, c.data, sc);
        std::vector<double> vals;
        json scores_json;
        for (const auto& [n, v] : s.scores) {
            vals.push_back(v);
            scores_json[n] = v;
        }
        scores_json["ppl"] = s.ppl;
        scores_json["ppl_recovery"] = eval::ppl_recovery(s.ppl, tscores.ppl);
        eval::RecoveryReport r = eval::average_and_recover(vals, tvals);
        r.name = m.is_student() ? mixer::kind_name(m.mixer_cfg->kind) : "teacher";
        reports.push_back(r);
        model_jsons.push_back(json{{"model", path}, {"kind", r.name}, {"scores", scores_json},
                                   {"recovery", r.recovery_pct}});
    }
    eval::assign_ranks(reports);
    for (size_t i = 0; i < reports.size(); ++i) {
        model_jsons[i]["rank"] = reports[i].rank;
        out_models.push_back(model_jsons[i]);
        std::cout << reports[i].name << "  avg " << reports[i].avg << "  recovery "
                  << reports[i].recovery_pct << "%  rank " << reports[i].rank << "\n";
    }
    json teacher_json;
    for (const auto& [n, v] : tscores.scores) teacher_json[n] = v;
    teacher_json["ppl"] = tscores.ppl;
    write_json_report(out / "reports" / "eval.json",
                      json{{"teacher", teacher_json}, {"models", out_models}});
    return 0;
}

// ---- niah ----------------------------------------------------------------------

int cmd_niah(const CommonArgs& args, const std::vector<std::string>& model_paths,
             bool export_suite) {
    config::RunConfig c = resolve_config(args);
    fs::path out = prepare_out_dir(c);
    json report = json::array();
    for (const std::string& path : model_paths) {
        model::Model m = checkpoint::load(path, c.model);
        eval::Generator gen = eval::model_generator(m);
        json per_model;
        per_model["model"] = path;
        per_model["kind"] = m.is_student() ? mixer::kind_name(m.mixer_cfg->kind) : "teacher";
        json cells = json::array();
        for (data::NiahVariant v : {data::NiahVariant::S1PassKey, data::NiahVariant::S2Number,
                                    data::NiahVariant::S3Uuid}) {
            for (int64_t L : c.niah_eval_lens) {
                std::vector<data::NiahInstance> suite;
                for (int i = 0; i < c.niah_eval_instances; ++i) {
                    suite.push_back(data::gen_niah(
                        v, L,
                        hash_mix(c.seed, hash_mix(hash_str("niah-eval"), uint64_t(i) * 31 +
                                                                             uint64_t(v) * 7 +
                                                                             uint64_t(L))),
                        c.data.markov));
                }
                if (export_suite) {
                    data::export_niah_suite(
                        (out / ("niah_" + std::string(data::niah_variant_name(v)) + "_" +
                                std::to_string(L) + ".jsonl"))
                            .string(),
                        suite);
                }
                auto res = eval::niah_eval(gen, suite, 16);
                for (const auto& r : res) {
                    cells.push_back({{"variant", data::niah_variant_name(r.variant)},
                                     {"len", r.len},
                                     {"accuracy", r.accuracy_pct},
                                     {"instances", r.instances}});
                    std::cout << per_model["kind"].get<std::string>() << "  "
                              << data::niah_variant_name(r.variant) << " @" << r.len << " -> "
                              << r.accuracy_pct << "%" << std::endl;
                }
            }
        }
        per_model["cells"] = cells;
        report.push_back(per_model);
    }
    write_json_report(out / "reports" / "niah.json", report);
    return 0;
}

// ---- bench ---------------------------------------------------------------------

int cmd_bench(const CommonArgs& args, const std::vector<std::string>& model_paths) {
    config::RunConfig c = resolve_config(args);
    fs::path out = prepare_out_dir(c);
    json report = json::array();
    std::vector<metrics::PlotPoint> plot;
    for (const std::string& path : model_paths) {
        model::Model m = checkpoint::load(path, c.model);
        // The window cap is lifted for benchmarking: rotary positions extend
        // and parameters are position-independent.
        auto eng = decode::make_engine(m, /*uncapped=*/true);
        eval::LatencyProfile prof =
            eval::latency_profile(*eng, c.bench_contexts, c.bench_decode_len, c.bench_repeats);
        const std::string kind = m.is_student() ? mixer::kind_name(m.mixer_cfg->kind) : "teacher";
        json row{{"model", path},
                 {"kind", kind},
                 {"contexts", prof.context_lens},
                 {"prefill_ms", prof.prefill_ms},
                 {"tpot_ms", prof.tpot_ms},
                 {"prefill_slope", prof.prefill_slope},
                 {"tpot_ratio", prof.tpot_ratio_last_first}};
        report.push_back(row);
        for (size_t i = 0; i < prof.context_lens.size(); ++i) {
            plot.push_back(
                {double(prof.context_lens[i]), prof.prefill_ms[i], kind + "_prefill"});
            plot.push_back({double(prof.context_lens[i]), prof.tpot_ms[i], kind + "_tpot"});
        }
        std::cout << kind << "  prefill slope " << prof.prefill_slope << "  tpot ratio "
                  << prof.tpot_ratio_last_first << std::endl;
    }
    write_json_report(out / "reports" / "bench.json", report);
    metrics::write_plot_csv((out / "reports" / "bench_plot.csv").string(), plot);
    return 0;
}

// ---- curve ---------------------------------------------------------------------

int cmd_curve(const CommonArgs& args, const std::string& run_dir) {
    config::RunConfig c = resolve_config(args);
    fs::path out = prepare_out_dir(c);
    const double floor = markov_floor_ppl(c);
    eval::SuiteConfig sc = suite_config(c, floor);
    auto curve = eval::checkpoint_curve(run_dir, c.data, sc);
    std::vector<metrics::PlotPoint> plot;
    json rows = json::array();
    for (const auto& p : curve) {
        rows.push_back({{"tokens", p.tokens_seen}, {"avg_score", p.avg_score}, {"path", p.path}});
        plot.push_back({double(p.tokens_seen), p.avg_score, "avg_score"});
        std::cout << p.tokens_seen << " tokens -> avg " << p.avg_score << std::endl;
    }
    write_json_report(out / "reports" / "curve.json", rows);
    metrics::write_plot_csv((out / "reports" / "curve_plot.csv").string(), plot);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    threads::init_from_env();
    CLI::App app{"desk-scale linearization lab: distill a softmax-attention teacher into "
                 "subquadratic token mixers and measure what survives"};
    app.require_subcommand(1);

    CommonArgs common;
    app.add_option("--config", common.config_path, "JSON run config");
    app.add_option("--seed", common.seed, "override config seed")
        ->each([&](const std::string&) { common.seed_set = true; });
    app.add_option("--out", common.out_dir, "output directory");
    app.add_option("--set", common.overrides, "dotted-path config overrides key=value");

    auto* tt = app.add_subcommand("train-teacher", "pretrain (or instruction-tune) the teacher");
    std::string finetune_from;
    bool instruct_mode = false;
    tt->add_option("--finetune-from", finetune_from, "start from an existing checkpoint");
    tt->add_flag("--instruct", instruct_mode, "masked instruction tuning instead of pretraining");

    auto* dist = app.add_subcommand("distill", "run the 3-stage pipeline for one mixer kind");
    std::string teacher_path, kind = "GatedDeltaNet", resume_path;
    std::vector<int> stages;
    dist->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    dist->add_option("--kind", kind, "mixer kind");
    dist->add_option("--resume", resume_path, "resume from a student checkpoint");
    dist->add_option("--stage", stages, "subset of stages to run (repeatable)");

    auto* adapt = app.add_subcommand("adapt", "instruction adaptation (regime A or B)");
    std::string regime, student_path, adapt_teacher, adapt_kind = "GatedDeltaNet";
    adapt->add_option("--regime", regime, "A or B")->required();
    adapt->add_option("--student", student_path, "distilled student (regime A)");
    adapt->add_option("--teacher", adapt_teacher, "instruction-tuned teacher (regime B)");
    adapt->add_option("--kind", adapt_kind, "mixer kind (regime B)");

    auto* ev = app.add_subcommand("eval", "desk suite scores + recovery vs the teacher");
    std::string eval_teacher;
    std::vector<std::string> eval_models;
    ev->add_option("--teacher", eval_teacher, "teacher checkpoint")->required();
    ev->add_option("--model", eval_models, "model checkpoints to score (repeatable)")->required();

    auto* nh = app.add_subcommand("niah", "needle-in-a-haystack accuracy grid");
    std::vector<std::string> niah_models;
    bool export_suite = false;
    nh->add_option("--model", niah_models, "model checkpoints (repeatable)")->required();
    nh->add_flag("--export", export_suite, "also write the suites as JSON lines");

    auto* bench = app.add_subcommand("bench", "prefill/decode latency profile");
    std::vector<std::string> bench_models;
    bench->add_option("--model", bench_models, "model checkpoints (repeatable)")->required();

    auto* curve = app.add_subcommand("curve", "evaluate every checkpoint of a run directory");
    std::string curve_dir;
    curve->add_option("--run", curve_dir, "run directory with checkpoints/")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (tt->parsed()) return cmd_train_teacher(common, finetune_from, instruct_mode);
        if (dist->parsed()) return cmd_distill(common, teacher_path, kind, resume_path, stages);
        if (adapt->parsed()) {
            return cmd_adapt(common, regime, student_path, adapt_teacher, adapt_kind);
        }
        if (ev->parsed()) return cmd_eval(common, eval_teacher, eval_models);
        if (nh->parsed()) return cmd_niah(common, niah_models, export_suite);
        if (bench->parsed()) return cmd_bench(common, bench_models);
        if (curve->parsed()) return cmd_curve(common, curve_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const AssetError& e) {
        std::cerr << "asset error: " << e.what() << "\n";
        return kExitAsset;
    } catch (const FormatError& e) {
        std::cerr << "asset error: " << e.what() << "\n";
        return kExitAsset;
    } catch (const NumericsError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumerics;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
