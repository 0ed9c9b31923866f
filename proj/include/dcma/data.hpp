#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcma/rng.hpp"

namespace dcma {

// Token id layout: specials first, then source surface tokens, then target
// surface tokens. Blank is CTC-only, mask is MLM-only; both live in the one
// shared vocabulary.
struct Vocab {
    size_t surface = 40;  // per-language surface vocabulary size

    static constexpr size_t PAD = 0;
    static constexpr size_t BOS = 1;
    static constexpr size_t EOS = 2;
    static constexpr size_t BLANK = 3;
    static constexpr size_t MASK = 4;
    static constexpr size_t FIRST_TOKEN = 5;

    size_t size() const { return FIRST_TOKEN + 2 * surface; }
    size_t src(size_t t) const { return FIRST_TOKEN + t; }
    size_t tgt(size_t t) const { return FIRST_TOKEN + surface + t; }
    bool is_src(size_t id) const { return id >= FIRST_TOKEN && id < FIRST_TOKEN + surface; }
    bool is_tgt(size_t id) const {
        return id >= FIRST_TOKEN + surface && id < FIRST_TOKEN + 2 * surface;
    }
    size_t src_index(size_t id) const { return id - FIRST_TOKEN; }
    size_t tgt_index(size_t id) const { return id - FIRST_TOKEN - surface; }
};

// Deterministic toy paired-modality language: each source token has a fixed
// acoustic signature; the translation rule is y = reverse(pi(x)) tokenwise.
struct ToyLanguage {
    uint64_t seed = 0;
    size_t surface = 40;   // S
    size_t feat_dim = 16;  // F
    size_t sent_min = 3, sent_max = 12;
    size_t fpt_min = 6, fpt_max = 10;  // frames per token
    double noise_sigma = 0.1;
    std::vector<float> signatures;  // [S, F]
    std::vector<size_t> bijection;  // pi: source index -> target index

    static ToyLanguage make(uint64_t seed, size_t surface, size_t feat_dim);

    std::vector<size_t> translate(const std::vector<size_t>& src) const;
    std::vector<size_t> invert(const std::vector<size_t>& tgt) const;
    // frames [T, F] for a surface-token sentence; T = sum of per-token repeats
    std::vector<float> synthesize(const std::vector<size_t>& src, Rng& rng, size_t* t_out) const;

    void save(const std::string& path) const;
    static ToyLanguage load(const std::string& path);
};

struct AsrRecord {
    size_t id = 0;
    std::vector<size_t> transcript;  // surface token indices
    std::vector<float> frames;       // [T, F] row-major
    size_t t = 0, f = 0;
};

struct MtRecord {
    size_t id = 0;
    std::vector<size_t> src, tgt;  // surface indices
};

struct StRecord {  // evaluation only; never enters a training split
    size_t id = 0;
    std::vector<float> frames;
    size_t t = 0, f = 0;
    std::vector<size_t> tgt;
    std::vector<size_t> transcript;  // analysis only
};

struct Corpus {
    std::string split;
    std::vector<AsrRecord> asr;
    std::vector<MtRecord> mt;
    std::vector<StRecord> st;
};

struct GenSizes {
    size_t asr_n = 5000;
    size_t mt_n = 5000;
    size_t st_n = 200;
    size_t dev_n = 200;
    size_t mt_len_min = 8, mt_len_max = 16;  // out-of-domain MT length range
    bool add_in_domain_mt = false;
    size_t in_domain_mt_n = 5000;
};

// Writes asr-train, mt-train, st-dev, st-test plus language.json under dir.
// Deterministic given seed; byte-identical across invocations.
void generate_corpora(uint64_t seed, const ToyLanguage& lang, const GenSizes& sizes,
                      const std::string& dir);

Corpus load_split(const std::string& dir, const std::string& split);

// true iff ASR-train and MT-train sentence sets are disjoint and no ST
// sentence appears in either training split
bool disjointness_audit(const Corpus& asr_train, const Corpus& mt_train, const Corpus& st_dev,
                        const Corpus& st_test);

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

enum class BatchType { Asr, Mt };

struct Batch {
    BatchType type = BatchType::Mt;
    // ASR payload
    std::vector<float> frames;  // [B, Tmax, F] zero-padded
    size_t t_max = 0, feat_dim = 0;
    std::vector<size_t> frame_lens;
    std::vector<std::vector<size_t>> transcripts;
    // MT payload
    std::vector<std::vector<size_t>> src, tgt;

    size_t size() const {
        return type == BatchType::Asr ? frame_lens.size() : src.size();
    }
};

// Length-bucketed epoch batching, a pure function of (seed, epoch) so a
// resumed run sees the exact batch sequence of an uninterrupted one.
class BatchStream {
public:
    BatchStream() = default;
    // ASR: cap = max total (unpadded) frames per batch
    BatchStream(const Corpus* corpus, BatchType type, size_t cap, uint64_t seed);

    Batch next();
    uint64_t epoch() const { return epoch_; }
    uint64_t pos() const { return pos_; }
    void seek(uint64_t epoch, uint64_t pos);
    size_t batches_per_epoch();  // for the current epoch
    size_t skipped_records() const { return skipped_; }

private:
    void ensure_plan();

    const Corpus* corpus_ = nullptr;
    BatchType type_ = BatchType::Mt;
    size_t cap_ = 0;
    uint64_t seed_ = 0;
    uint64_t epoch_ = 0, pos_ = 0;
    bool plan_valid_ = false;
    size_t skipped_ = 0;
    std::vector<std::vector<size_t>> plan_;
};

}  // namespace dcma
