#include "dcma/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>

#include "dcma/tensor.hpp"

namespace dcma {

using json = nlohmann::json;

namespace {

// single listing drives (de)serialization, validation echo and the digest
template <typename Fn>
void for_each_field(RunConfig& c, Fn&& fn) {
    fn("d", c.d);
    fn("heads", c.heads);
    fn("ffn", c.ffn);
    fn("enc_layers", c.enc_layers);
    fn("dec_layers", c.dec_layers);
    fn("memories", c.memories);
    fn("groups", c.groups);
    fn("entries", c.entries);
    fn("logit_hidden", c.logit_hidden);
    fn("conv_width", c.conv_width);
    fn("tau_start", c.tau_start);
    fn("tau_floor", c.tau_floor);
    fn("tau_decay", c.tau_decay);
    fn("pretrain_tau", c.pretrain_tau);
    fn("pretrain_lr", c.pretrain_lr);
    fn("pretrain_warmup", c.pretrain_warmup);
    fn("finetune_lr", c.finetune_lr);
    fn("finetune_warmup", c.finetune_warmup);
    fn("pretrain_updates", c.pretrain_updates);
    fn("finetune_updates", c.finetune_updates);
    fn("alpha", c.alpha);
    fn("beta", c.beta);
    fn("label_smoothing", c.label_smoothing);
    fn("dropout", c.dropout);
    fn("clip_norm", c.clip_norm);
    fn("checkpoint_every", c.checkpoint_every);
    fn("checkpoint_keep", c.checkpoint_keep);
    fn("seed", c.seed);
    fn("vocab_surface", c.vocab_surface);
    fn("feat_dim", c.feat_dim);
    fn("sent_min", c.sent_min);
    fn("sent_max", c.sent_max);
    fn("fpt_min", c.fpt_min);
    fn("fpt_max", c.fpt_max);
    fn("frame_sigma", c.frame_sigma);
    fn("asr_n", c.asr_n);
    fn("mt_n", c.mt_n);
    fn("st_n", c.st_n);
    fn("dev_n", c.dev_n);
    fn("mt_len_min", c.mt_len_min);
    fn("mt_len_max", c.mt_len_max);
    fn("in_domain_mt", c.in_domain_mt);
    fn("in_domain_mt_n", c.in_domain_mt_n);
    fn("asr_fraction", c.asr_fraction);
    fn("asr_max_frames", c.asr_max_frames);
    fn("mt_max_sentences", c.mt_max_sentences);
    fn("beam", c.beam);
    fn("avg_last", c.avg_last);
    fn("no_shared_softmax", c.no_shared_softmax);
    fn("no_align_loss", c.no_align_loss);
    fn("continuous_align", c.continuous_align);
}

json digest_json(const RunConfig& c) {
    json j;
    auto& cc = const_cast<RunConfig&>(c);
    for_each_field(cc, [&](const char* name, auto& v) { j[name] = v; });
    return j;
}

}  // namespace

void RunConfig::validate() const {
    DCMA_CHECK(d % heads == 0, "config: d must be divisible by heads");
    DCMA_CHECK(d % groups == 0, "config: d must be divisible by groups");
    DCMA_CHECK(entries >= 2, "config: codebook needs at least 2 entries");
    DCMA_CHECK(memories >= 1 && groups >= 1, "config: memories and groups must be >= 1");
    DCMA_CHECK(tau_floor > 0 && tau_start >= tau_floor, "config: bad temperature schedule");
    DCMA_CHECK(tau_decay > 0 && tau_decay <= 1.0, "config: bad temperature decay");
    DCMA_CHECK(pretrain_warmup >= 1 && finetune_warmup >= 1, "config: warmup must be >= 1");
    DCMA_CHECK(sent_min >= 1 && sent_min <= sent_max, "config: bad sentence length range");
    DCMA_CHECK(fpt_min >= 1 && fpt_min <= fpt_max, "config: bad frames-per-token range");
    DCMA_CHECK(fpt_min >= 4, "config: frames-per-token below 4 breaks CTC feasibility");
    DCMA_CHECK(mt_len_min >= 1 && mt_len_min <= mt_len_max, "config: bad MT length range");
    DCMA_CHECK(vocab_surface >= 2, "config: vocabulary too small");
    DCMA_CHECK(asr_n >= 1 && mt_n >= 1 && st_n >= 1 && dev_n >= 1, "config: corpus sizes must be >= 1");
    DCMA_CHECK(asr_fraction > 0.0 && asr_fraction <= 1.0, "config: asr_fraction must be in (0,1]");
    DCMA_CHECK(asr_max_frames >= fpt_max * std::max(sent_max, mt_len_max),
               "config: asr frame cap below the longest record");
    DCMA_CHECK(mt_max_sentences >= 1, "config: mt batch cap must be >= 1");
    DCMA_CHECK(label_smoothing >= 0.0 && label_smoothing < 1.0, "config: bad label smoothing");
    DCMA_CHECK(dropout >= 0.0 && dropout < 1.0, "config: bad dropout rate");
    DCMA_CHECK(beam >= 1, "config: beam must be >= 1");
    DCMA_CHECK(avg_last >= 1, "config: avg_last must be >= 1");
    DCMA_CHECK(checkpoint_every >= 1 && checkpoint_keep >= 1, "config: bad checkpoint policy");
}

uint64_t RunConfig::digest() const {
    return fnv1a64(digest_json(*this).dump());
}

std::string RunConfig::to_json() const {
    json j = digest_json(*this);
    j["data_dir"] = data_dir;
    j["out_dir"] = out_dir;
    return j.dump(2);
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j = json::parse(text);
    RunConfig c;
    std::set<std::string> known = {"data_dir", "out_dir"};
    for_each_field(c, [&](const char* name, auto& v) {
        known.insert(name);
        if (j.contains(name)) v = j.at(name).get<std::remove_reference_t<decltype(v)>>();
    });
    for (auto it = j.begin(); it != j.end(); ++it)
        DCMA_CHECK(known.count(it.key()), "config: unknown key '" + it.key() + "'");
    if (j.contains("data_dir")) c.data_dir = j.at("data_dir");
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir");
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    DCMA_CHECK(in.good(), "cannot read config " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

void RunConfig::save(const std::string& path) const {
    std::ofstream out(path);
    DCMA_CHECK(out.good(), "cannot write config " + path);
    out << to_json() << "\n";
}

GenSizes RunConfig::gen_sizes() const {
    GenSizes s;
    s.asr_n = asr_n;
    s.mt_n = mt_n;
    s.st_n = st_n;
    s.dev_n = dev_n;
    s.mt_len_min = mt_len_min;
    s.mt_len_max = mt_len_max;
    s.add_in_domain_mt = in_domain_mt;
    s.in_domain_mt_n = in_domain_mt_n;
    return s;
}

ToyLanguage RunConfig::make_language() const {
    ToyLanguage lang = ToyLanguage::make(seed, vocab_surface, feat_dim);
    lang.sent_min = sent_min;
    lang.sent_max = sent_max;
    lang.fpt_min = fpt_min;
    lang.fpt_max = fpt_max;
    lang.noise_sigma = frame_sigma;
    return lang;
}

}  // namespace dcma
