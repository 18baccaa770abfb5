#include <algorithm>
#include <chrono>
#include <cmath>

#include "lnz/eval.hpp"

namespace lnz::eval {

namespace {

using clock_t_ = std::chrono::steady_clock;

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Smallest duration the clock can express, in ms.
double tick_ms() {
    return 1e3 * static_cast<double>(clock_t_::period::num) /
           static_cast<double>(clock_t_::period::den);
}

std::vector<int32_t> random_prompt(int64_t n, uint64_t seed) {
    std::vector<int32_t> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        out[static_cast<size_t>(i)] =
            data::vocab::kWordLo +
            static_cast<int32_t>(hash_mix(seed, static_cast<uint64_t>(i)) % 64);
    }
    return out;
}

}  // namespace

LatencyProfile latency_profile(decode::Engine& eng, std::span<const int64_t> context_lens,
                               int decode_len, int repeats, int warmup, uint64_t prompt_seed) {
    for (size_t i = 1; i < context_lens.size(); ++i) {
        if (context_lens[i] <= context_lens[i - 1]) {
            throw ConfigError("context lengths must be strictly increasing");
        }
    }
    if (context_lens.empty() || decode_len < 1 || repeats < 1) {
        throw ConfigError("latency profile needs contexts, decode_len >= 1 and repeats >= 1");
    }
    // Timing runs are pinned to one worker thread.
    const int saved_threads = threads::count();
    threads::set(1);
    LatencyProfile prof;
    prof.context_lens.assign(context_lens.begin(), context_lens.end());
    const double min_measure = 10.0 * tick_ms();
    for (int64_t L : context_lens) {
        std::vector<int32_t> prompt = random_prompt(L, hash_mix(prompt_seed, uint64_t(L)));
        std::vector<double> pre, tpot;
        for (int r = 0; r < warmup + repeats; ++r) {
            eng.reset();
            const auto t0 = clock_t_::now();
            eng.prefill(prompt);
            const auto t1 = clock_t_::now();
            for (int i = 0; i < decode_len; ++i) eng.decode_next();
            const auto t2 = clock_t_::now();
            if (r < warmup) continue;
            const double pms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            const double dms = std::chrono::duration<double, std::milli>(t2 - t1).count();
            if (pms < min_measure || dms < min_measure) {
                threads::set(saved_threads);
                throw NumericsError("timer resolution insufficient for this measurement");
            }
            pre.push_back(pms);
            tpot.push_back(dms / decode_len);
        }
        prof.prefill_ms.push_back(median(pre));
        prof.tpot_ms.push_back(median(tpot));
    }
    threads::set(saved_threads);
    prof.prefill_slope = loglog_slope(prof.context_lens, prof.prefill_ms);
    prof.tpot_ratio_last_first = prof.tpot_ms.back() / prof.tpot_ms.front();
    return prof;
}

}  // namespace lnz::eval
