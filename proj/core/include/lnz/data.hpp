#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lnz/common.hpp"

namespace lnz::data {

// Fixed ids inside the synthetic vocabulary. Digits, hex symbols, template
// words and nouns occupy the low range; everything from kWordLo up is the
// "prose" region driven by the Markov source.
namespace vocab {
inline constexpr int32_t kDigit0 = 0;  // 0..9
inline constexpr int32_t kHex0 = 10;   // 10..25
inline constexpr int32_t kThe = 26, kPass = 27, kKey = 28, kIs = 29, kMagic = 30, kNumber = 31,
                         kFor = 32, kId = 33, kWhat = 34, kQuery = 35, kCopy = 36, kReverse = 37,
                         kAdd = 38, kPlus = 39, kAnswer = 40, kSep = 41, kContext = 42,
                         kKeyMark = 43, kValMark = 44, kAsk = 45, kDot = 46;
inline constexpr int32_t kNoun0 = 48;  // 48..79
inline constexpr int32_t kNounCount = 32;
inline constexpr int32_t kWordLo = 80;
}  // namespace vocab

// Seeded k-th order Markov source over [word_lo, vocab). Each context maps
// to `branching` successors with weights derived on the fly from the seed,
// so the full transition table never materializes. The entropy rate is
// computed from the stationary distribution (power iteration, cached).
struct MarkovConfig {
    int64_t vocab = 512;
    int order = 2;
    int branching = 12;
    int32_t word_lo = vocab::kWordLo;
    bool uniform = false;  // equal successor weights (test sources)
    uint64_t seed = 0x6d6b76;

    int64_t region() const { return vocab - word_lo; }
    void validate() const;
};

class MarkovSource {
  public:
    explicit MarkovSource(const MarkovConfig& cfg);

    const MarkovConfig& config() const { return cfg_; }

    // Successor ids and probabilities of one context (order tokens).
    void conditional(std::span<const int32_t> context, std::vector<int32_t>& ids,
                     std::vector<double>& probs) const;
    double log_prob(std::span<const int32_t> context, int32_t next) const;

    // Seeded sample of n tokens (includes a short burn-in toward
    // stationarity). Pure function of (config, stream_seed, n).
    std::vector<int32_t> sample(uint64_t stream_seed, int64_t n) const;

    // Average per-token cross entropy of the source scoring its own stream.
    double self_cross_entropy(uint64_t stream_seed, int64_t n) const;

    const std::vector<double>& stationary() const;
    double entropy_rate() const;

  private:
    int64_t context_count() const;
    int64_t context_id(std::span<const int32_t> context) const;
    MarkovConfig cfg_;
    mutable std::vector<double> stationary_;
    mutable double entropy_rate_ = -1.0;
};

// Non-overlapping fixed-length windows; the final partial window is dropped.
std::vector<std::vector<int32_t>> chunk(std::span<const int32_t> stream, int64_t T);

// ---- needle-in-a-haystack ---------------------------------------------------

enum class NiahVariant { S1PassKey, S2Number, S3Uuid };
const char* niah_variant_name(NiahVariant v);
NiahVariant niah_variant_from_name(const std::string& s);

struct NiahInstance {
    NiahVariant variant;
    std::vector<int32_t> context;  // length L, needle embedded exactly once
    std::vector<int32_t> needle;
    std::vector<int32_t> query;   // suffix eliciting the value
    std::vector<int32_t> answer;  // the value span
    int needle_pos = 0;
    uint64_t seed = 0;
};

NiahInstance gen_niah(NiahVariant variant, int64_t context_len, uint64_t seed,
                      const MarkovConfig& mk);

// Training form: [context | query | answer] sized to exactly total_len.
std::vector<int32_t> niah_training_episode(NiahVariant variant, int64_t total_len, uint64_t seed,
                                           const MarkovConfig& mk);

// ---- instruction pairs ------------------------------------------------------

enum class InstrKind { Copy, Reverse, AddMod, Retrieve };

struct InstructionPair {
    InstrKind kind;
    std::vector<int32_t> prompt;
    std::vector<int32_t> response;  // loss-active span
};

struct InstructionMix {
    double copy = 0.25, reverse = 0.25, add_mod = 0.25, retrieve = 0.25;
    void validate() const;
};

InstructionPair gen_instruction(uint64_t seed, int64_t index, const InstructionMix& mix,
                                const MarkovConfig& mk);

// ---- batch streams ----------------------------------------------------------

// Proportions of chunk types in the training mixture. Retrieval and
// instruction episodes ride inside the corpus so the desk teacher acquires
// the capabilities the long-context evaluations probe.
struct MixtureConfig {
    double markov = 0.70;
    double niah = 0.15;
    double instruct = 0.15;
    void validate() const;
};

struct DataConfig {
    MarkovConfig markov;
    MixtureConfig mix;
    InstructionMix instr_mix;
};

// Sequential batch source consumed by training loops. Implementations are
// pure functions of (config, seed, batch index).
class BatchStream {
  public:
    virtual ~BatchStream() = default;
    // Fills batch*T token ids row-major; the mask (when requested) marks
    // loss-active positions. Returns false when the stream is exhausted.
    virtual bool next(int64_t batch, int64_t T, std::vector<int32_t>& tokens,
                      std::vector<uint8_t>* mask) = 0;
    virtual void reset() = 0;
};

// Infinite mixture of markov / retrieval-episode / instruction chunks.
class MixtureStream : public BatchStream {
  public:
    MixtureStream(const DataConfig& cfg, uint64_t seed);
    bool next(int64_t batch, int64_t T, std::vector<int32_t>& tokens,
              std::vector<uint8_t>* mask) override;
    void reset() override { index_ = 0; }
    // One whole chunk; exposed for inspection and tests.
    std::vector<int32_t> chunk_at(int64_t index, int64_t T) const;

  private:
    DataConfig cfg_;
    MarkovSource source_;
    uint64_t seed_;
    int64_t index_ = 0;
};

// Packed instruction pairs with response masks (adaptation regimes).
class InstructionStream : public BatchStream {
  public:
    InstructionStream(const DataConfig& cfg, uint64_t seed);
    bool next(int64_t batch, int64_t T, std::vector<int32_t>& tokens,
              std::vector<uint8_t>* mask) override;
    void reset() override { index_ = 0; }

  private:
    DataConfig cfg_;
    MarkovSource source_;
    uint64_t seed_;
    int64_t index_ = 0;
};

// Pure markov chunks (entropy-floor evaluations).
class MarkovStream : public BatchStream {
  public:
    MarkovStream(const MarkovConfig& cfg, uint64_t seed);
    bool next(int64_t batch, int64_t T, std::vector<int32_t>& tokens,
              std::vector<uint8_t>* mask) override;
    void reset() override { index_ = 0; }

  private:
    MarkovSource source_;
    uint64_t seed_;
    int64_t index_ = 0;
};

// Finite wrapper used to model stream exhaustion.
class FiniteStream : public BatchStream {
  public:
    FiniteStream(std::unique_ptr<BatchStream> inner, int64_t max_batches);
    bool next(int64_t batch, int64_t T, std::vector<int32_t>& tokens,
              std::vector<uint8_t>* mask) override;
    void reset() override;

  private:
    std::unique_ptr<BatchStream> inner_;
    int64_t max_batches_, served_ = 0;
};

// ---- exports ----------------------------------------------------------------

// One decimal token id per line.
void export_corpus(const std::string& path, std::span<const int32_t> tokens);
// JSON lines: {variant, len, context_ids, answer_ids, seed}.
void export_niah_suite(const std::string& path, std::span<const NiahInstance> suite);

}  // namespace lnz::data
