#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lnz/data.hpp"
#include "lnz/decode.hpp"
#include "lnz/model.hpp"

namespace lnz::eval {

// exp(mean next-token CE) over held-out chunks. Consumes
// floor(n_tokens / (batch*T)) batches; throws on an empty evaluation set.
double perplexity(const model::Model& m, data::BatchStream& stream, int64_t n_tokens,
                  int64_t batch, int64_t T);

// Teacher-relative perplexity retention in percent (lower student ppl is
// better, so the ratio inverts).
double ppl_recovery(double student_ppl, double teacher_ppl);

// ---- recovery ----------------------------------------------------------------

struct RecoveryReport {
    std::string name;
    double avg = 0;
    double teacher_avg = 0;
    double recovery_pct = 0;
    int rank = 1;
};

// Unweighted mean of task scores and the percentage of the teacher average
// retained. Throws on length mismatch.
RecoveryReport average_and_recover(std::span<const double> scores,
                                   std::span<const double> teacher_scores);

// Ranks reports 1..n by average, descending (ties keep insertion order).
void assign_ranks(std::vector<RecoveryReport>& reports);

// ---- generation-based scoring -------------------------------------------------

// Greedy continuation hook: (prompt, n_new) -> generated ids. Lets tests
// plug oracle generators; models wrap a decode::Engine.
using Generator =
    std::function<std::vector<int32_t>(std::span<const int32_t>, int)>;

Generator model_generator(const model::Model& m);

struct NiahResult {
    data::NiahVariant variant;
    int64_t len = 0;
    double accuracy_pct = 0;
    int instances = 0;
};

// Greedy decode from context+query, exact match on the answer span.
// Throws on an empty suite. Results are grouped per (variant, length).
std::vector<NiahResult> niah_eval(const Generator& gen,
                                  std::span<const data::NiahInstance> suite, int max_new_tokens);

// Exact-match accuracy (percent) over n seeded instances of one task.
double instruction_accuracy(const Generator& gen, data::InstrKind kind,
                            const data::MarkovConfig& mk, int n, uint64_t seed);

// ---- the fixed desk evaluation suite -------------------------------------------

struct SuiteConfig {
    int64_t ppl_tokens = 131072;
    int64_t batch = 8;
    int64_t seq_len = 512;
    int instr_instances = 100;
    int niah_instances = 50;
    int64_t niah_len = 256;  // fits the teacher window with query + answer
    double floor_ppl = 0;    // exp(entropy rate); must be provided
    uint64_t seed = 0xe7a1;
};

struct SuiteScores {
    std::vector<std::pair<std::string, double>> scores;  // all in [0,100]
    double ppl = 0;  // raw held-out perplexity on the mixture stream
    double average() const;
};

SuiteScores desk_suite(const model::Model& m, const data::DataConfig& dc, const SuiteConfig& sc);

// ---- checkpoint curves ----------------------------------------------------------

struct CurvePoint {
    int64_t tokens_seen;
    double avg_score;
    std::string path;
};

// Evaluates every checkpoints/step_*.lnz under run_dir on the desk suite.
// Requires at least two checkpoints.
std::vector<CurvePoint> checkpoint_curve(const std::string& run_dir, const data::DataConfig& dc,
                                         const SuiteConfig& sc);

// ---- latency -------------------------------------------------------------------

struct LatencyProfile {
    std::vector<int64_t> context_lens;
    std::vector<double> prefill_ms;  // median over repeats
    std::vector<double> tpot_ms;     // time per generated token, median
    double prefill_slope = 0;        // log-log least squares
    double tpot_ratio_last_first = 0;
};

// Median-of-`repeats` timings with `warmup` untimed runs, pinned to one
// worker thread. Context lengths must be strictly increasing.
LatencyProfile latency_profile(decode::Engine& eng, std::span<const int64_t> context_lens,
                               int decode_len, int repeats = 5, int warmup = 2,
                               uint64_t prompt_seed = 0xbe7c);

// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const int64_t> x, std::span<const double> y);

}  // namespace lnz::eval
