#include "lnz/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "lnz/checkpoint.hpp"
#include "lnz/ops.hpp"
#include "lnz/tape.hpp"

namespace lnz::eval {

double perplexity(const model::Model& m, data::BatchStream& stream, int64_t n_tokens,
                  int64_t batch, int64_t T) {
    if (T < 2) throw ConfigError("perplexity needs sequences of at least 2 tokens");
    const int64_t batches = n_tokens / (batch * T);
    if (batches < 1) throw ConfigError("empty evaluation stream: n_tokens < one batch");
    NoGradGuard ng;
    double nll = 0;
    int64_t count = 0;
    std::vector<int32_t> tokens;
    std::vector<int32_t> targets;
    std::vector<uint8_t> tmask;
    for (int64_t i = 0; i < batches; ++i) {
        if (!stream.next(batch, T, tokens, nullptr)) {
            throw ConfigError("evaluation stream exhausted early");
        }
        Tensor logits = model::forward(m, tokens, batch);
        targets.assign(tokens.size(), 0);
        tmask.assign(tokens.size(), 0);
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t t = 0; t + 1 < T; ++t) {
                targets[static_cast<size_t>(b * T + t)] = tokens[static_cast<size_t>(b * T + t + 1)];
                tmask[static_cast<size_t>(b * T + t)] = 1;
            }
        }
        Tensor ce = ops::masked_softmax_cross_entropy(logits, targets, tmask);
        const int64_t rows = batch * (T - 1);
        nll += double(ce.item()) * static_cast<double>(rows);
        count += rows;
    }
    return std::exp(nll / static_cast<double>(count));
}

double ppl_recovery(double student_ppl, double teacher_ppl) {
    return 100.0 * teacher_ppl / student_ppl;
}

RecoveryReport average_and_recover(std::span<const double> scores,
                                   std::span<const double> teacher_scores) {
    if (scores.size() != teacher_scores.size()) {
        throw ShapeError("task-score lists differ in length");
    }
    if (scores.empty()) throw ShapeError("empty task-score list");
    RecoveryReport r;
    double s = 0, t = 0;
    for (double v : scores) s += v;
    for (double v : teacher_scores) t += v;
    r.avg = s / static_cast<double>(scores.size());
    r.teacher_avg = t / static_cast<double>(scores.size());
    r.recovery_pct = 100.0 * r.avg / r.teacher_avg;
    r.rank = 1;
    return r;
}

void assign_ranks(std::vector<RecoveryReport>& reports) {
    std::vector<size_t> order(reports.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return reports[a].avg > reports[b].avg; });
    for (size_t pos = 0; pos < order.size(); ++pos) {
        reports[order[pos]].rank = static_cast<int>(pos) + 1;
    }
}

Generator model_generator(const model::Model& m) {
    auto eng = std::shared_ptr<decode::Engine>(decode::make_engine(m));
    return [eng](std::span<const int32_t> prompt, int n) {
        return decode::generate(*eng, prompt, n);
    };
}

std::vector<NiahResult> niah_eval(const Generator& gen,
                                  std::span<const data::NiahInstance> suite, int max_new_tokens) {
    if (suite.empty()) throw ConfigError("NIAH suite is empty");
    struct Bucket {
        int hits = 0, total = 0;
    };
    std::map<std::pair<int, int64_t>, Bucket> buckets;
    for (const data::NiahInstance& inst : suite) {
        std::vector<int32_t> prompt = inst.context;
        prompt.insert(prompt.end(), inst.query.begin(), inst.query.end());
        const int n = std::min<int>(max_new_tokens, static_cast<int>(inst.answer.size()));
        std::vector<int32_t> out = gen(prompt, n);
        const bool hit = out.size() == inst.answer.size() &&
                         std::equal(out.begin(), out.end(), inst.answer.begin());
        Bucket& b = buckets[{static_cast<int>(inst.variant),
                             static_cast<int64_t>(inst.context.size())}];
        b.total += 1;
        b.hits += hit ? 1 : 0;
    }
    std::vector<NiahResult> out;
    for (const auto& [key, b] : buckets) {
        NiahResult r;
        r.variant = static_cast<data::NiahVariant>(key.first);
        r.len = key.second;
        r.instances = b.total;
        r.accuracy_pct = 100.0 * b.hits / std::max(b.total, 1);
        out.push_back(r);
    }
    return out;
}

double instruction_accuracy(const Generator& gen, data::InstrKind kind,
                            const data::MarkovConfig& mk, int n, uint64_t seed) {
    data::InstructionMix mix{0, 0, 0, 0};
    switch (kind) {
        case data::InstrKind::Copy: mix.copy = 1; break;
        case data::InstrKind::Reverse: mix.reverse = 1; break;
        case data::InstrKind::AddMod: mix.add_mod = 1; break;
        case data::InstrKind::Retrieve: mix.retrieve = 1; break;
    }
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        data::InstructionPair p = data::gen_instruction(seed, i, mix, mk);
        std::vector<int32_t> out = gen(p.prompt, static_cast<int>(p.response.size()));
        hits += (out.size() == p.response.size() &&
                 std::equal(out.begin(), out.end(), p.response.begin()))
                    ? 1
                    : 0;
    }
    return 100.0 * hits / std::max(n, 1);
}

double SuiteScores::average() const {
    double s = 0;
    for (const auto& [name, v] : scores) s += v;
    return scores.empty() ? 0 : s / static_cast<double>(scores.size());
}

SuiteScores desk_suite(const model::Model& m, const data::DataConfig& dc, const SuiteConfig& sc) {
    if (sc.floor_ppl <= 0) throw ConfigError("suite floor_ppl must be set to exp(entropy rate)");
    SuiteScores out;
    data::MixtureStream holdout(dc, hash_mix(sc.seed, hash_str("holdout")));
    out.ppl = perplexity(m, holdout, sc.ppl_tokens, sc.batch, sc.seq_len);
    out.scores.emplace_back("ppl_score", std::min(100.0, 100.0 * sc.floor_ppl / out.ppl));

    Generator gen = model_generator(m);
    const std::pair<const char*, data::InstrKind> tasks[] = {
        {"instr_copy", data::InstrKind::Copy},
        {"instr_reverse", data::InstrKind::Reverse},
        {"instr_add", data::InstrKind::AddMod},
        {"instr_retrieve", data::InstrKind::Retrieve},
    };
    for (const auto& [name, kind] : tasks) {
        out.scores.emplace_back(
            name, instruction_accuracy(gen, kind, dc.markov, sc.instr_instances,
                                       hash_mix(sc.seed, hash_str(name))));
    }
    for (data::NiahVariant v : {data::NiahVariant::S1PassKey, data::NiahVariant::S2Number,
                                data::NiahVariant::S3Uuid}) {
        std::vector<data::NiahInstance> suite;
        suite.reserve(static_cast<size_t>(sc.niah_instances));
        for (int i = 0; i < sc.niah_instances; ++i) {
            suite.push_back(data::gen_niah(
                v, sc.niah_len, hash_mix(sc.seed, hash_mix(hash_str("niah"), uint64_t(i) * 3 + uint64_t(v))),
                dc.markov));
        }
        auto res = niah_eval(gen, suite, 16);
        double acc = 0;
        for (const auto& r : res) acc += r.accuracy_pct * r.instances;
        acc /= static_cast<double>(sc.niah_instances);
        out.scores.emplace_back(std::string("niah_") + std::to_string(static_cast<int>(v) + 1),
                                acc);
    }
    return out;
}

std::vector<CurvePoint> checkpoint_curve(const std::string& run_dir, const data::DataConfig& dc,
                                         const SuiteConfig& sc) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(run_dir) / "checkpoints";
    if (!fs::exists(dir)) throw AssetError("no checkpoints directory under " + run_dir);
    std::vector<std::pair<int64_t, std::string>> found;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("step_", 0) == 0 && name.size() > 9 &&
            name.substr(name.size() - 4) == ".lnz") {
            found.emplace_back(std::stoll(name.substr(5, name.size() - 9)), e.path().string());
        }
    }
    if (found.size() < 2) {
        throw AssetError("checkpoint curve needs at least 2 checkpoints, found " +
                         std::to_string(found.size()));
    }
    std::sort(found.begin(), found.end());
    std::vector<CurvePoint> out;
    for (const auto& [tokens, path] : found) {
        model::Model m = checkpoint::load(path);
        SuiteScores s = desk_suite(m, dc, sc);
        out.push_back({tokens, s.average(), path});
    }
    return out;
}

double loglog_slope(std::span<const int64_t> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw ShapeError("need >= 2 points for a slope fit");
    const auto n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double lx = std::log(static_cast<double>(x[i]));
        const double ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace lnz::eval
