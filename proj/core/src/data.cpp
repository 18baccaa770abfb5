#include "lnz/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace lnz::data {

namespace {

double hash01(uint64_t h) {
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

uint64_t mix3(uint64_t seed, const char* tag, uint64_t i) {
    return hash_mix(hash_mix(seed, hash_str(tag)), i);
}

}  // namespace

void MarkovConfig::validate() const {
    if (vocab < 2) throw ConfigError("markov vocab must be >= 2");
    if (word_lo < 0 || word_lo >= vocab - 1) throw ConfigError("word_lo out of range");
    if (order < 0 || order > 2) throw ConfigError("markov order must be 0, 1 or 2");
    if (branching < 1 || branching > region()) {
        throw ConfigError("branching must lie in [1, region]");
    }
}

MarkovSource::MarkovSource(const MarkovConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
}

int64_t MarkovSource::context_count() const {
    const int64_t W = cfg_.region();
    int64_t n = 1;
    for (int i = 0; i < cfg_.order; ++i) n *= W;
    return n;
}

int64_t MarkovSource::context_id(std::span<const int32_t> context) const {
    if (static_cast<int>(context.size()) < cfg_.order) {
        throw IndexError("context shorter than markov order");
    }
    const int64_t W = cfg_.region();
    int64_t id = 0;
    for (int i = 0; i < cfg_.order; ++i) {
        const int32_t tok = context[context.size() - static_cast<size_t>(cfg_.order) + i];
        if (tok < cfg_.word_lo || tok >= cfg_.vocab) {
            throw IndexError("context token outside the word region");
        }
        id = id * W + (tok - cfg_.word_lo);
    }
    return id;
}

namespace {

// Successors and weights of one context, derived from the seed alone.
void derive_conditional(const MarkovConfig& cfg, int64_t ctx_id, std::vector<int32_t>& ids,
                        std::vector<double>& probs) {
    const int64_t W = cfg.region();
    const int B = cfg.branching;
    ids.clear();
    probs.clear();
    ids.reserve(static_cast<size_t>(B));
    probs.reserve(static_cast<size_t>(B));
    const uint64_t base = hash_mix(cfg.seed, static_cast<uint64_t>(ctx_id) + 0x517cc1b7ull);
    double total = 0;
    for (int j = 0; j < B; ++j) {
        uint64_t h = hash_mix(base, static_cast<uint64_t>(j));
        int32_t word = cfg.word_lo + static_cast<int32_t>(h % static_cast<uint64_t>(W));
        // Probe on collisions so successors stay distinct.
        int salt = 0;
        while (std::find(ids.begin(), ids.end(), word) != ids.end()) {
            h = hash_mix(h, static_cast<uint64_t>(++salt) + 0x9e37ull);
            word = cfg.word_lo + static_cast<int32_t>(h % static_cast<uint64_t>(W));
        }
        ids.push_back(word);
        const double w = cfg.uniform ? 1.0 : 0.5 + hash01(hash_mix(h, 0xabcdull));
        probs.push_back(w);
        total += w;
    }
    for (double& p : probs) p /= total;
}

}  // namespace

void MarkovSource::conditional(std::span<const int32_t> context, std::vector<int32_t>& ids,
                               std::vector<double>& probs) const {
    derive_conditional(cfg_, cfg_.order ? context_id(context) : 0, ids, probs);
}

double MarkovSource::log_prob(std::span<const int32_t> context, int32_t next) const {
    std::vector<int32_t> ids;
    std::vector<double> probs;
    conditional(context, ids, probs);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == next) return std::log(probs[i]);
    }
    return -std::numeric_limits<double>::infinity();
}

std::vector<int32_t> MarkovSource::sample(uint64_t stream_seed, int64_t n) const {
    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(n));
    Rng rng(hash_mix(cfg_.seed, stream_seed));
    std::vector<int32_t> ctx;
    for (int i = 0; i < cfg_.order; ++i) {
        ctx.push_back(cfg_.word_lo + static_cast<int32_t>(rng.uniform_int(0, cfg_.region() - 1)));
    }
    std::vector<int32_t> ids;
    std::vector<double> probs;
    const int64_t burn = cfg_.order > 0 ? 64 : 0;
    for (int64_t t = 0; t < burn + n; ++t) {
        derive_conditional(cfg_, cfg_.order ? context_id(ctx) : 0, ids, probs);
        double u = rng.uniform();
        int32_t pick = ids.back();
        for (size_t i = 0; i < ids.size(); ++i) {
            u -= probs[i];
            if (u <= 0) {
                pick = ids[i];
                break;
            }
        }
        if (cfg_.order > 0) {
            ctx.erase(ctx.begin());
            ctx.push_back(pick);
        }
        if (t >= burn) out.push_back(pick);
    }
    return out;
}

double MarkovSource::self_cross_entropy(uint64_t stream_seed, int64_t n) const {
    std::vector<int32_t> s = sample(stream_seed, n);
    double nll = 0;
    int64_t count = 0;
    for (size_t t = static_cast<size_t>(cfg_.order); t < s.size(); ++t) {
        nll -= log_prob(std::span<const int32_t>(s.data(), t), s[t]);
        ++count;
    }
    return count ? nll / static_cast<double>(count) : 0.0;
}

const std::vector<double>& MarkovSource::stationary() const {
    if (!stationary_.empty()) return stationary_;
    const int64_t N = context_count();
    const int64_t W = cfg_.region();
    std::vector<double> pi(static_cast<size_t>(N), 1.0 / static_cast<double>(N));
    std::vector<double> nxt(static_cast<size_t>(N));
    std::vector<int32_t> ids;
    std::vector<double> probs;
    for (int iter = 0; iter < 300; ++iter) {
        std::fill(nxt.begin(), nxt.end(), 0.0);
        for (int64_t c = 0; c < N; ++c) {
            if (pi[static_cast<size_t>(c)] == 0.0) continue;
            derive_conditional(cfg_, c, ids, probs);
            // Next context drops the oldest token and appends the successor.
            const int64_t tail = cfg_.order ? (c % (N / W)) * W : 0;
            for (size_t j = 0; j < ids.size(); ++j) {
                const int64_t nc = cfg_.order ? tail + (ids[j] - cfg_.word_lo) : 0;
                nxt[static_cast<size_t>(nc)] += pi[static_cast<size_t>(c)] * probs[j];
            }
        }
        double delta = 0;
        for (int64_t c = 0; c < N; ++c) {
            delta += std::fabs(nxt[static_cast<size_t>(c)] - pi[static_cast<size_t>(c)]);
        }
        pi.swap(nxt);
        if (delta < 1e-13) break;
    }
    stationary_ = std::move(pi);
    return stationary_;
}

double MarkovSource::entropy_rate() const {
    if (entropy_rate_ >= 0) return entropy_rate_;
    const std::vector<double>& pi = stationary();
    std::vector<int32_t> ids;
    std::vector<double> probs;
    double H = 0;
    for (int64_t c = 0; c < context_count(); ++c) {
        if (pi[static_cast<size_t>(c)] == 0.0) continue;
        derive_conditional(cfg_, c, ids, probs);
        double h = 0;
        for (double p : probs) h -= p * std::log(p);
        H += pi[static_cast<size_t>(c)] * h;
    }
    entropy_rate_ = H;
    return H;
}

std::vector<std::vector<int32_t>> chunk(std::span<const int32_t> stream, int64_t T) {
    if (T < 1) throw ConfigError("chunk length must be >= 1");
    std::vector<std::vector<int32_t>> out;
    const int64_t n = static_cast<int64_t>(stream.size()) / T;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        out.emplace_back(stream.begin() + i * T, stream.begin() + (i + 1) * T);
    }
    return out;
}

// ---- NIAH -------------------------------------------------------------------

const char* niah_variant_name(NiahVariant v) {
    switch (v) {
        case NiahVariant::S1PassKey: return "S-NIAH-1";
        case NiahVariant::S2Number: return "S-NIAH-2";
        case NiahVariant::S3Uuid: return "S-NIAH-3";
    }
    return "?";
}

NiahVariant niah_variant_from_name(const std::string& s) {
    for (NiahVariant v : {NiahVariant::S1PassKey, NiahVariant::S2Number, NiahVariant::S3Uuid}) {
        if (s == niah_variant_name(v)) return v;
    }
    throw ConfigError("unknown NIAH variant '" + s + "'");
}

namespace {

using namespace vocab;

std::vector<int32_t> digits(uint64_t seed, int n) {
    std::vector<int32_t> d(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        d[static_cast<size_t>(i)] = kDigit0 + static_cast<int32_t>(hash_mix(seed, 101 + i) % 10);
    }
    return d;
}

std::vector<int32_t> hex_tokens(uint64_t seed, int n) {
    std::vector<int32_t> d(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        d[static_cast<size_t>(i)] = kHex0 + static_cast<int32_t>(hash_mix(seed, 211 + i) % 16);
    }
    return d;
}

int32_t noun(uint64_t seed) {
    return kNoun0 + static_cast<int32_t>(hash_mix(seed, 307) % kNounCount);
}

struct NeedleParts {
    std::vector<int32_t> needle, query, answer;
};

NeedleParts make_needle(NiahVariant variant, uint64_t seed) {
    NeedleParts p;
    switch (variant) {
        case NiahVariant::S1PassKey: {
            p.answer = digits(seed, 5);
            p.needle = {kThe, kPass, kKey, kIs};
            p.needle.insert(p.needle.end(), p.answer.begin(), p.answer.end());
            p.query = {kWhat, kIs, kThe, kPass, kKey, kQuery, kThe, kPass, kKey, kIs};
            break;
        }
        case NiahVariant::S2Number: {
            const int32_t nn = noun(seed);
            p.answer = digits(seed, 7);
            p.needle = {kThe, kMagic, kNumber, kFor, nn, kIs};
            p.needle.insert(p.needle.end(), p.answer.begin(), p.answer.end());
            p.query = {kWhat,  kIs,  kThe,    kMagic, kNumber, kFor, nn,
                       kQuery, kThe, kMagic, kNumber, kFor,    nn,   kIs};
            break;
        }
        case NiahVariant::S3Uuid: {
            const int32_t nn = noun(seed);
            p.answer = hex_tokens(seed, 8);
            p.needle = {kThe, kId, kFor, nn, kIs};
            p.needle.insert(p.needle.end(), p.answer.begin(), p.answer.end());
            p.query = {kWhat, kIs, kThe, kId, kFor, nn, kQuery, kThe, kId, kFor, nn, kIs};
            break;
        }
    }
    return p;
}

// Repetitive filler: a small bank of seeded sentences cycled to length n.
std::vector<int32_t> filler(uint64_t seed, int64_t n, const MarkovConfig& mk) {
    constexpr int kSentences = 4, kWords = 7;
    std::vector<int32_t> bank;
    for (int s = 0; s < kSentences; ++s) {
        for (int w = 0; w < kWords; ++w) {
            const uint64_t h = hash_mix(hash_mix(seed, 0xf111 + s), static_cast<uint64_t>(w));
            bank.push_back(mk.word_lo +
                           static_cast<int32_t>(h % static_cast<uint64_t>(mk.region())));
        }
        bank.push_back(kDot);
    }
    std::vector<int32_t> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        out[static_cast<size_t>(i)] = bank[static_cast<size_t>(i) % bank.size()];
    }
    return out;
}

}  // namespace

NiahInstance gen_niah(NiahVariant variant, int64_t context_len, uint64_t seed,
                      const MarkovConfig& mk) {
    NeedleParts parts = make_needle(variant, seed);
    const int64_t nlen = static_cast<int64_t>(parts.needle.size());
    if (context_len < nlen + static_cast<int64_t>(parts.query.size())) {
        throw ConfigError("NIAH context length " + std::to_string(context_len) +
                          " too small for needle and query");
    }
    NiahInstance inst;
    inst.variant = variant;
    inst.seed = seed;
    inst.needle = parts.needle;
    inst.query = parts.query;
    inst.answer = parts.answer;
    inst.context = filler(hash_mix(seed, 0xf177), context_len, mk);
    // Uniform over depth deciles, jittered inside the decile bucket.
    const int64_t span = context_len - nlen;
    const int decile = static_cast<int>(hash_mix(seed, 0xdec) % 10);
    const int64_t bucket = std::max<int64_t>(span / 10, 1);
    int64_t pos = (span * decile) / 10 +
                  static_cast<int64_t>(hash_mix(seed, 0x0ff5e7) % static_cast<uint64_t>(bucket));
    pos = std::min(pos, span);
    std::copy(parts.needle.begin(), parts.needle.end(),
              inst.context.begin() + static_cast<std::ptrdiff_t>(pos));
    inst.needle_pos = static_cast<int>(pos);
    return inst;
}

std::vector<int32_t> niah_training_episode(NiahVariant variant, int64_t total_len, uint64_t seed,
                                           const MarkovConfig& mk) {
    NeedleParts probe = make_needle(variant, seed);
    const int64_t overhead = static_cast<int64_t>(probe.query.size() + probe.answer.size());
    if (total_len <= overhead + static_cast<int64_t>(probe.needle.size())) {
        throw ConfigError("episode length too small for variant");
    }
    NiahInstance inst = gen_niah(variant, total_len - overhead, seed, mk);
    std::vector<int32_t> out = std::move(inst.context);
    out.insert(out.end(), inst.query.begin(), inst.query.end());
    out.insert(out.end(), inst.answer.begin(), inst.answer.end());
    return out;
}

// ---- instructions -----------------------------------------------------------

void InstructionMix::validate() const {
    const double s = copy + reverse + add_mod + retrieve;
    if (copy < 0 || reverse < 0 || add_mod < 0 || retrieve < 0 || std::fabs(s - 1.0) > 1e-6) {
        throw ConfigError("instruction mix must be nonnegative and sum to 1");
    }
}

namespace {

int32_t word_at(uint64_t h, const MarkovConfig& mk) {
    return mk.word_lo + static_cast<int32_t>(h % static_cast<uint64_t>(mk.region()));
}

}  // namespace

InstructionPair gen_instruction(uint64_t seed, int64_t index, const InstructionMix& mix,
                                const MarkovConfig& mk) {
    const uint64_t h = hash_mix(seed, static_cast<uint64_t>(index) + 0x1057ull);
    const double u = hash01(hash_mix(h, 1));
    InstructionPair p;
    if (u < mix.copy) {
        p.kind = InstrKind::Copy;
        const int m = 3 + static_cast<int>(hash_mix(h, 2) % 6);
        p.prompt = {kCopy, kSep};
        for (int i = 0; i < m; ++i) p.prompt.push_back(word_at(hash_mix(h, 10 + i), mk));
        p.response.assign(p.prompt.begin() + 2, p.prompt.end());
        p.prompt.push_back(kSep);
    } else if (u < mix.copy + mix.reverse) {
        p.kind = InstrKind::Reverse;
        const int m = 3 + static_cast<int>(hash_mix(h, 2) % 4);
        p.prompt = {kReverse, kSep};
        for (int i = 0; i < m; ++i) p.prompt.push_back(word_at(hash_mix(h, 10 + i), mk));
        p.response.assign(p.prompt.rbegin(), p.prompt.rend() - 2);
        p.prompt.push_back(kSep);
    } else if (u < mix.copy + mix.reverse + mix.add_mod) {
        p.kind = InstrKind::AddMod;
        const int a = static_cast<int>(hash_mix(h, 3) % 1000);
        const int b = static_cast<int>(hash_mix(h, 4) % 1000);
        const int c = (a + b) % 1000;
        auto put3 = [](std::vector<int32_t>& v, int x) {
            v.push_back(kDigit0 + x / 100);
            v.push_back(kDigit0 + (x / 10) % 10);
            v.push_back(kDigit0 + x % 10);
        };
        p.prompt = {kAdd};
        put3(p.prompt, a);
        p.prompt.push_back(kPlus);
        put3(p.prompt, b);
        p.prompt.push_back(kSep);
        put3(p.response, c);
    } else {
        p.kind = InstrKind::Retrieve;
        constexpr int kPairs = 4;
        int32_t keys[kPairs], vals[kPairs];
        for (int i = 0; i < kPairs; ++i) {
            // Distinct keys so the probe is unambiguous.
            int salt = 0;
            int32_t k = word_at(hash_mix(h, 20 + i), mk);
            auto dup = [&](int32_t cand) {
                for (int j = 0; j < i; ++j) {
                    if (keys[j] == cand) return true;
                }
                return false;
            };
            while (dup(k)) k = word_at(hash_mix(h, 20 + i + 100 * (++salt)), mk);
            keys[i] = k;
            vals[i] = word_at(hash_mix(h, 40 + i), mk);
        }
        const int target = static_cast<int>(hash_mix(h, 5) % kPairs);
        p.prompt = {kContext};
        for (int i = 0; i < kPairs; ++i) {
            p.prompt.push_back(kKeyMark);
            p.prompt.push_back(keys[i]);
            p.prompt.push_back(kValMark);
            p.prompt.push_back(vals[i]);
        }
        p.prompt.push_back(kAsk);
        p.prompt.push_back(keys[target]);
        p.prompt.push_back(kSep);
        p.response = {vals[target]};
    }
    return p;
}

// ---- streams ----------------------------------------------------------------

void MixtureConfig::validate() const {
    if (markov < 0 || niah < 0 || instruct < 0 ||
        std::fabs(markov + niah + instruct - 1.0) > 1e-6) {
        throw ConfigError("mixture proportions must be nonnegative and sum to 1");
    }
}

MixtureStream::MixtureStream(const DataConfig& cfg, uint64_t seed)
    : cfg_(cfg), source_(cfg.markov), seed_(seed) {
    cfg_.mix.validate();
    cfg_.instr_mix.validate();
}

std::vector<int32_t> MixtureStream::chunk_at(int64_t index, int64_t T) const {
    const double u = hash01(mix3(seed_, "type", static_cast<uint64_t>(index)));
    if (u < cfg_.mix.markov) {
        return source_.sample(mix3(seed_, "mkv", static_cast<uint64_t>(index)), T);
    }
    if (u < cfg_.mix.markov + cfg_.mix.niah) {
        const uint64_t h = mix3(seed_, "niah", static_cast<uint64_t>(index));
        const auto variant = static_cast<NiahVariant>(h % 3);
        return niah_training_episode(variant, T, hash_mix(h, 77), cfg_.markov);
    }
    // Packed instruction pairs with a markov tail.
    const uint64_t h = mix3(seed_, "ins", static_cast<uint64_t>(index));
    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(T));
    for (int64_t j = 0; static_cast<int64_t>(out.size()) < T; ++j) {
        InstructionPair p = gen_instruction(h, j, cfg_.instr_mix, cfg_.markov);
        if (static_cast<int64_t>(out.size() + p.prompt.size() + p.response.size()) > T) break;
        out.insert(out.end(), p.prompt.begin(), p.prompt.end());
        out.insert(out.end(), p.response.begin(), p.response.end());
    }
    const int64_t remain = T - static_cast<int64_t>(out.size());
    if (remain > 0) {
        std::vector<int32_t> tail = source_.sample(hash_mix(h, 0x7a11), remain);
        out.insert(out.end(), tail.begin(), tail.end());
    }
    return out;
}

bool MixtureStream::next(int64_t batch, int64_t T, std::vector<int32_t>& tokens,
                         std::vector<uint8_t>* mask) {
    tokens.clear();
    tokens.reserve(static_cast<size_t>(batch * T));
    for (int64_t b = 0; b < batch; ++b) {
        std::vector<int32_t> c = chunk_at(index_++, T);
        tokens.insert(tokens.end(), c.begin(), c.end());
    }
    if (mask) mask->assign(static_cast<size_t>(batch * T), 1);
    return true;
}

InstructionStream::InstructionStream(const DataConfig& cfg, uint64_t seed)
    : cfg_(cfg), source_(cfg.markov), seed_(seed) {
    cfg_.instr_mix.validate();
}

bool InstructionStream::next(int64_t batch, int64_t T, std::vector<int32_t>& tokens,
                             std::vector<uint8_t>* mask) {
    tokens.clear();
    if (mask) mask->clear();
    for (int64_t b = 0; b < batch; ++b) {
        const uint64_t h = mix3(seed_, "ichunk", static_cast<uint64_t>(index_++));
        std::vector<int32_t> chunk_toks;
        std::vector<uint8_t> chunk_mask;
        for (int64_t j = 0; static_cast<int64_t>(chunk_toks.size()) < T; ++j) {
            InstructionPair p = gen_instruction(h, j, cfg_.instr_mix, cfg_.markov);
            if (static_cast<int64_t>(chunk_toks.size() + p.prompt.size() + p.response.size()) >
                T) {
                break;
            }
            chunk_toks.insert(chunk_toks.end(), p.prompt.begin(), p.prompt.end());
            chunk_mask.insert(chunk_mask.end(), p.prompt.size(), 0);
            chunk_toks.insert(chunk_toks.end(), p.response.begin(), p.response.end());
            chunk_mask.insert(chunk_mask.end(), p.response.size(), 1);
        }
        const int64_t remain = T - static_cast<int64_t>(chunk_toks.size());
        if (remain > 0) {
            std::vector<int32_t> tail = source_.sample(hash_mix(h, 0x7a11), remain);
            chunk_toks.insert(chunk_toks.end(), tail.begin(), tail.end());
            chunk_mask.insert(chunk_mask.end(), tail.size(), 0);
        }
        tokens.insert(tokens.end(), chunk_toks.begin(), chunk_toks.end());
        if (mask) mask->insert(mask->end(), chunk_mask.begin(), chunk_mask.end());
    }
    return true;
}

MarkovStream::MarkovStream(const MarkovConfig& cfg, uint64_t seed) : source_(cfg), seed_(seed) {}

bool MarkovStream::next(int64_t batch, int64_t T, std::vector<int32_t>& tokens,
                        std::vector<uint8_t>* mask) {
    tokens.clear();
    for (int64_t b = 0; b < batch; ++b) {
        std::vector<int32_t> c =
            source_.sample(mix3(seed_, "mkv", static_cast<uint64_t>(index_++)), T);
        tokens.insert(tokens.end(), c.begin(), c.end());
    }
    if (mask) mask->assign(static_cast<size_t>(batch * T), 1);
    return true;
}

FiniteStream::FiniteStream(std::unique_ptr<BatchStream> inner, int64_t max_batches)
    : inner_(std::move(inner)), max_batches_(max_batches) {}

bool FiniteStream::next(int64_t batch, int64_t T, std::vector<int32_t>& tokens,
                        std::vector<uint8_t>* mask) {
    if (served_ >= max_batches_) return false;
    ++served_;
    return inner_->next(batch, T, tokens, mask);
}

void FiniteStream::reset() {
    served_ = 0;
    inner_->reset();
}

// ---- exports ----------------------------------------------------------------

void export_corpus(const std::string& path, std::span<const int32_t> tokens) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw AssetError("cannot open " + path + " for writing");
    for (int32_t t : tokens) os << t << "\n";
    if (!os) throw AssetError("write failure on " + path);
}

void export_niah_suite(const std::string& path, std::span<const NiahInstance> suite) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw AssetError("cannot open " + path + " for writing");
    for (const NiahInstance& inst : suite) {
        nlohmann::json j{{"variant", niah_variant_name(inst.variant)},
                         {"len", inst.context.size()},
                         {"context_ids", inst.context},
                         {"answer_ids", inst.answer},
                         {"seed", inst.seed}};
        os << j.dump() << "\n";
    }
    if (!os) throw AssetError("write failure on " + path);
}

}  // namespace lnz::data
