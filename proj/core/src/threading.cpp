#include "lnz/common.hpp"

#include <cstdlib>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif
#include <Eigen/Core>

namespace lnz {

uint64_t hash_mix(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the combined words
    uint64_t x = a + 0x9e3779b97f4a7c15ull + (b << 1 | b >> 63);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

uint64_t hash_str(const std::string& s) {
    return fnv1a(s.data(), s.size());
}

uint64_t fnv1a(const void* data, size_t n, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

Rng Rng::fork(const std::string& purpose) const {
    std::mt19937_64 probe = gen_;  // do not disturb our own stream
    return Rng(hash_mix(probe(), hash_str(purpose)));
}

namespace threads {
namespace {
int g_threads = 0;
}

void set(int n) {
    if (n < 1) n = 1;
    g_threads = n;
#ifdef _OPENMP
    omp_set_num_threads(n);
#endif
    Eigen::setNbThreads(n);
}

void init_from_env() {
    if (g_threads > 0) return;
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("LINEARIZE_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) n = static_cast<int>(v);
    }
    set(n);
}

int count() {
    if (g_threads == 0) init_from_env();
    return g_threads;
}
}  // namespace threads

OpCounters& op_counters() {
    thread_local OpCounters counters;
    return counters;
}

}  // namespace lnz
