#include "dcma/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_set>

#include "dcma/tensor.hpp"  // DCMA_CHECK

namespace dcma {

using json = nlohmann::json;
namespace fs = std::filesystem;

ToyLanguage ToyLanguage::make(uint64_t seed, size_t surface, size_t feat_dim) {
    ToyLanguage lang;
    lang.seed = seed;
    lang.surface = surface;
    lang.feat_dim = feat_dim;
    Rng root(seed);
    Rng sig_rng = root.fork("signatures");
    lang.signatures.resize(surface * feat_dim);
    for (auto& x : lang.signatures) x = float(sig_rng.gaussian());
    lang.bijection.resize(surface);
    std::iota(lang.bijection.begin(), lang.bijection.end(), size_t(0));
    Rng perm_rng = root.fork("bijection");
    for (size_t i = surface; i-- > 1;)
        std::swap(lang.bijection[i], lang.bijection[perm_rng.uniform_int(i + 1)]);
    return lang;
}

std::vector<size_t> ToyLanguage::translate(const std::vector<size_t>& src) const {
    std::vector<size_t> out(src.size());
    for (size_t i = 0; i < src.size(); ++i) out[src.size() - 1 - i] = bijection[src[i]];
    return out;
}

std::vector<size_t> ToyLanguage::invert(const std::vector<size_t>& tgt) const {
    std::vector<size_t> inv(surface);
    for (size_t i = 0; i < surface; ++i) inv[bijection[i]] = i;
    std::vector<size_t> out(tgt.size());
    for (size_t i = 0; i < tgt.size(); ++i) out[tgt.size() - 1 - i] = inv[tgt[i]];
    return out;
}

std::vector<float> ToyLanguage::synthesize(const std::vector<size_t>& src, Rng& rng,
                                           size_t* t_out) const {
    std::vector<float> frames;
    size_t t = 0;
    for (size_t tok : src) {
        size_t reps = fpt_min + rng.uniform_int(fpt_max - fpt_min + 1);
        for (size_t r = 0; r < reps; ++r) {
            for (size_t j = 0; j < feat_dim; ++j)
                frames.push_back(signatures[tok * feat_dim + j] +
                                 float(rng.gaussian() * noise_sigma));
            ++t;
        }
    }
    *t_out = t;
    return frames;
}

void ToyLanguage::save(const std::string& path) const {
    json j;
    j["seed"] = seed;
    j["surface"] = surface;
    j["feat_dim"] = feat_dim;
    j["sent_min"] = sent_min;
    j["sent_max"] = sent_max;
    j["fpt_min"] = fpt_min;
    j["fpt_max"] = fpt_max;
    j["noise_sigma"] = noise_sigma;
    j["signatures"] = signatures;
    j["bijection"] = bijection;
    std::ofstream out(path);
    DCMA_CHECK(out.good(), "cannot write " + path);
    out << j.dump(2) << "\n";
}

ToyLanguage ToyLanguage::load(const std::string& path) {
    std::ifstream in(path);
    DCMA_CHECK(in.good(), "cannot read " + path);
    json j = json::parse(in);
    ToyLanguage lang;
    lang.seed = j.at("seed");
    lang.surface = j.at("surface");
    lang.feat_dim = j.at("feat_dim");
    lang.sent_min = j.at("sent_min");
    lang.sent_max = j.at("sent_max");
    lang.fpt_min = j.at("fpt_min");
    lang.fpt_max = j.at("fpt_max");
    lang.noise_sigma = j.at("noise_sigma");
    lang.signatures = j.at("signatures").get<std::vector<float>>();
    lang.bijection = j.at("bijection").get<std::vector<size_t>>();
    return lang;
}

namespace {

// adjacent duplicates are resampled so every ASR record trivially satisfies
// the CTC feasibility bound ceil(T/4) >= U
std::vector<size_t> sample_sentence(size_t surface, size_t len_min, size_t len_max, Rng& rng) {
    size_t len = len_min + rng.uniform_int(len_max - len_min + 1);
    std::vector<size_t> s(len);
    for (size_t i = 0; i < len; ++i) {
        do {
            s[i] = rng.uniform_int(surface);
        } while (i > 0 && s[i] == s[i - 1]);
    }
    return s;
}

struct SentenceSet {
    std::set<std::vector<size_t>> seen;
    bool insert(const std::vector<size_t>& s) { return seen.insert(s).second; }
};

std::vector<std::vector<size_t>> sample_unique(size_t n, size_t surface, size_t len_min,
                                               size_t len_max, Rng& rng, SentenceSet& global) {
    std::vector<std::vector<size_t>> out;
    size_t attempts = 0;
    while (out.size() < n) {
        DCMA_CHECK(++attempts < 200 * n + 10000,
                   "generate: vocabulary too small for requested unique sentence count");
        auto s = sample_sentence(surface, len_min, len_max, rng);
        if (global.insert(s)) out.push_back(std::move(s));
    }
    return out;
}

void write_frames(std::ofstream& bin, const std::vector<float>& frames) {
    bin.write(reinterpret_cast<const char*>(frames.data()),
              std::streamsize(frames.size() * sizeof(float)));
}

json meta_base(size_t id, const char* type) {
    json j;
    j["id"] = id;
    j["type"] = type;
    return j;
}

}  // namespace

void generate_corpora(uint64_t seed, const ToyLanguage& lang, const GenSizes& sizes,
                      const std::string& dir) {
    DCMA_CHECK(sizes.asr_n >= 1 && sizes.mt_n >= 1 && sizes.st_n >= 1 && sizes.dev_n >= 1,
               "generate: sizes must be >= 1");
    fs::create_directories(dir);
    lang.save(dir + "/language.json");

    Rng root(seed);
    Rng sent_rng = root.fork("sentences");
    Rng frame_rng = root.fork("frames");

    SentenceSet global;
    auto asr_sents = sample_unique(sizes.asr_n, lang.surface, lang.sent_min, lang.sent_max,
                                   sent_rng, global);
    auto mt_sents = sample_unique(sizes.mt_n, lang.surface, sizes.mt_len_min, sizes.mt_len_max,
                                  sent_rng, global);
    std::vector<std::vector<size_t>> mt_indomain;
    if (sizes.add_in_domain_mt)
        mt_indomain = sample_unique(sizes.in_domain_mt_n, lang.surface, lang.sent_min,
                                    lang.sent_max, sent_rng, global);
    auto dev_sents = sample_unique(sizes.dev_n, lang.surface, lang.sent_min, lang.sent_max,
                                   sent_rng, global);
    auto test_sents = sample_unique(sizes.st_n, lang.surface, lang.sent_min, lang.sent_max,
                                    sent_rng, global);

    size_t next_id = 0;

    {  // asr-train
        std::ofstream meta(dir + "/asr-train.meta.jsonl");
        std::ofstream bin(dir + "/asr-train.frames.bin", std::ios::binary);
        size_t offset = 0;
        for (auto& s : asr_sents) {
            size_t t = 0;
            auto frames = lang.synthesize(s, frame_rng, &t);
            json j = meta_base(next_id++, "asr");
            j["tokens"] = s;
            j["frames_offset"] = offset;
            j["frames_len"] = t;
            j["frame_dim"] = lang.feat_dim;
            meta << j.dump() << "\n";
            write_frames(bin, frames);
            offset += frames.size();
        }
    }
    {  // mt-train
        std::ofstream meta(dir + "/mt-train.meta.jsonl");
        auto emit = [&](const std::vector<size_t>& s) {
            json j = meta_base(next_id++, "mt");
            j["tokens"] = s;
            j["tgt"] = lang.translate(s);
            meta << j.dump() << "\n";
        };
        for (auto& s : mt_sents) emit(s);
        for (auto& s : mt_indomain) emit(s);
    }
    auto write_st = [&](const std::string& split, const std::vector<std::vector<size_t>>& sents) {
        std::ofstream meta(dir + "/" + split + ".meta.jsonl");
        std::ofstream bin(dir + "/" + split + ".frames.bin", std::ios::binary);
        size_t offset = 0;
        for (auto& s : sents) {
            size_t t = 0;
            auto frames = lang.synthesize(s, frame_rng, &t);
            json j = meta_base(next_id++, "st");
            j["tokens"] = lang.translate(s);
            j["transcript"] = s;
            j["frames_offset"] = offset;
            j["frames_len"] = t;
            j["frame_dim"] = lang.feat_dim;
            meta << j.dump() << "\n";
            write_frames(bin, frames);
            offset += frames.size();
        }
    };
    write_st("st-dev", dev_sents);
    write_st("st-test", test_sents);
}

Corpus load_split(const std::string& dir, const std::string& split) {
    Corpus c;
    c.split = split;
    std::string meta_path = dir + "/" + split + ".meta.jsonl";
    std::ifstream meta(meta_path);
    DCMA_CHECK(meta.good(), "cannot read " + meta_path);
    std::vector<float> blob;
    {
        std::string bin_path = dir + "/" + split + ".frames.bin";
        std::ifstream bin(bin_path, std::ios::binary | std::ios::ate);
        if (bin.good()) {
            size_t bytes = size_t(bin.tellg());
            DCMA_CHECK(bytes % sizeof(float) == 0, "truncated frames file " + bin_path);
            blob.resize(bytes / sizeof(float));
            bin.seekg(0);
            bin.read(reinterpret_cast<char*>(blob.data()), std::streamsize(bytes));
            DCMA_CHECK(bin.good(), "failed reading " + bin_path);
        }
    }
    auto take_frames = [&](const json& j, std::vector<float>& out, size_t& t, size_t& f) {
        size_t offset = j.at("frames_offset");
        t = j.at("frames_len");
        f = j.at("frame_dim");
        DCMA_CHECK(offset + t * f <= blob.size(), "frames index out of range in " + meta_path);
        out.assign(blob.begin() + long(offset), blob.begin() + long(offset + t * f));
    };
    std::string line;
    while (std::getline(meta, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        std::string type = j.at("type");
        if (type == "asr") {
            AsrRecord r;
            r.id = j.at("id");
            r.transcript = j.at("tokens").get<std::vector<size_t>>();
            take_frames(j, r.frames, r.t, r.f);
            c.asr.push_back(std::move(r));
        } else if (type == "mt") {
            MtRecord r;
            r.id = j.at("id");
            r.src = j.at("tokens").get<std::vector<size_t>>();
            r.tgt = j.at("tgt").get<std::vector<size_t>>();
            c.mt.push_back(std::move(r));
        } else if (type == "st") {
            StRecord r;
            r.id = j.at("id");
            r.tgt = j.at("tokens").get<std::vector<size_t>>();
            r.transcript = j.at("transcript").get<std::vector<size_t>>();
            take_frames(j, r.frames, r.t, r.f);
            c.st.push_back(std::move(r));
        } else {
            fail("unknown record type '" + type + "' in " + meta_path);
        }
    }
    return c;
}

bool disjointness_audit(const Corpus& asr_train, const Corpus& mt_train, const Corpus& st_dev,
                        const Corpus& st_test) {
    std::set<std::vector<size_t>> asr_set, mt_set;
    for (const auto& r : asr_train.asr) asr_set.insert(r.transcript);
    for (const auto& r : mt_train.mt) mt_set.insert(r.src);
    for (const auto& s : asr_set)
        if (mt_set.count(s)) return false;
    for (const Corpus* c : {&st_dev, &st_test})
        for (const auto& r : c->st)
            if (asr_set.count(r.transcript) || mt_set.count(r.transcript)) return false;
    return true;
}

// ---------------------------------------------------------------------------

BatchStream::BatchStream(const Corpus* corpus, BatchType type, size_t cap, uint64_t seed)
    : corpus_(corpus), type_(type), cap_(cap), seed_(seed) {
    DCMA_CHECK(cap >= 1, "batching: cap must be positive");
}

void BatchStream::ensure_plan() {
    if (plan_valid_) return;
    size_t n = type_ == BatchType::Asr ? corpus_->asr.size() : corpus_->mt.size();
    DCMA_CHECK(n > 0, "batching: empty corpus");
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t(0));
    Rng rng(seed_ ^ (0x9e3779b97f4a7c15ULL * (epoch_ + 1)));
    for (size_t i = n; i-- > 1;) std::swap(order[i], order[rng.uniform_int(i + 1)]);
    plan_.clear();
    skipped_ = 0;
    if (type_ == BatchType::Asr) {
        // bucket by length (random tiebreak from the shuffle), then pack by
        // total frame budget and shuffle batch order
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return corpus_->asr[a].t < corpus_->asr[b].t;
        });
        std::vector<size_t> cur;
        size_t cur_frames = 0;
        for (size_t idx : order) {
            size_t t = corpus_->asr[idx].t;
            if (t > cap_) {
                std::fprintf(stderr, "warning: asr record %zu exceeds frame cap, skipped\n",
                             corpus_->asr[idx].id);
                skipped_++;
                continue;
            }
            if (cur_frames + t > cap_ && !cur.empty()) {
                plan_.push_back(cur);
                cur.clear();
                cur_frames = 0;
            }
            cur.push_back(idx);
            cur_frames += t;
        }
        if (!cur.empty()) plan_.push_back(cur);
    } else {
        for (size_t i = 0; i < n; i += cap_) {
            plan_.emplace_back(order.begin() + long(i),
                               order.begin() + long(std::min(i + cap_, n)));
        }
    }
    for (size_t i = plan_.size(); i-- > 1;) std::swap(plan_[i], plan_[rng.uniform_int(i + 1)]);
    plan_valid_ = true;
}

size_t BatchStream::batches_per_epoch() {
    ensure_plan();
    return plan_.size();
}

void BatchStream::seek(uint64_t epoch, uint64_t pos) {
    epoch_ = epoch;
    pos_ = pos;
    plan_valid_ = false;
}

Batch BatchStream::next() {
    ensure_plan();
    if (pos_ >= plan_.size()) {
        epoch_++;
        pos_ = 0;
        plan_valid_ = false;
        ensure_plan();
    }
    const std::vector<size_t>& ids = plan_[pos_++];
    Batch b;
    b.type = type_;
    if (type_ == BatchType::Asr) {
        size_t t_max = 0, f = 0;
        for (size_t idx : ids) {
            t_max = std::max(t_max, corpus_->asr[idx].t);
            f = corpus_->asr[idx].f;
        }
        b.t_max = t_max;
        b.feat_dim = f;
        b.frames.assign(ids.size() * t_max * f, 0.0f);
        for (size_t i = 0; i < ids.size(); ++i) {
            const AsrRecord& r = corpus_->asr[ids[i]];
            std::copy(r.frames.begin(), r.frames.end(), b.frames.begin() + long(i * t_max * f));
            b.frame_lens.push_back(r.t);
            b.transcripts.push_back(r.transcript);
        }
    } else {
        for (size_t idx : ids) {
            b.src.push_back(corpus_->mt[idx].src);
            b.tgt.push_back(corpus_->mt[idx].tgt);
        }
    }
    return b;
}

}  // namespace dcma
