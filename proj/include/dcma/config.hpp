#pragma once

#include <cstdint>
#include <string>

#include "dcma/data.hpp"

namespace dcma {

// Fully resolved run configuration. Defaults are the toy scale; the
// paper-scale values are noted inline and remain expressible.
struct RunConfig {
    // model dims (paper scale: d=512, heads=8, ffn=2048, 6+6 layers, M=64,
    // G=128, V=50, logit_hidden=1024, conv_width=1024)
    size_t d = 64;
    size_t heads = 4;
    size_t ffn = 256;
    size_t enc_layers = 2;
    size_t dec_layers = 2;
    size_t memories = 8;       // M
    size_t groups = 8;         // G
    size_t entries = 16;       // V
    size_t logit_hidden = 128;
    size_t conv_width = 64;

    // schedules (paper: 7e-4/4k pretrain, 1e-4/10k finetune, 150k updates each)
    double tau_start = 2.0;
    double tau_floor = 0.5;
    double tau_decay = 0.999995;
    double pretrain_tau = 2.0;  // fixed during pretraining
    double pretrain_lr = 7e-4;
    size_t pretrain_warmup = 400;
    double finetune_lr = 1e-4;
    size_t finetune_warmup = 1000;
    size_t pretrain_updates = 3000;
    size_t finetune_updates = 5000;
    double alpha = 1.0;  // CTC weight
    double beta = 1.0;   // MLM weight
    double label_smoothing = 0.1;
    double dropout = 0.1;
    double clip_norm = 5.0;
    size_t checkpoint_every = 500;
    size_t checkpoint_keep = 5;

    // data
    uint64_t seed = 1234;
    size_t vocab_surface = 40;
    size_t feat_dim = 16;
    size_t sent_min = 3, sent_max = 12;
    size_t fpt_min = 6, fpt_max = 10;
    double frame_sigma = 0.1;
    size_t asr_n = 5000;
    size_t mt_n = 5000;
    size_t st_n = 200;
    size_t dev_n = 200;
    size_t mt_len_min = 8, mt_len_max = 16;
    bool in_domain_mt = false;
    size_t in_domain_mt_n = 5000;
    double asr_fraction = 1.0;

    // batching (paper: 1152 sentence pairs / 16M audio frames per batch)
    size_t asr_max_frames = 6000;
    size_t mt_max_sentences = 64;

    // evaluation
    size_t beam = 5;
    size_t avg_last = 5;

    // ablation switches
    bool no_shared_softmax = false;
    bool no_align_loss = false;
    bool continuous_align = false;

    // paths (not part of the digest)
    std::string data_dir = "data";
    std::string out_dir = "run";

    size_t vocab_size() const { return Vocab{vocab_surface}.size(); }
    size_t max_decode_len() const { return 2 * memories + 8; }

    void validate() const;
    uint64_t digest() const;  // over everything except paths

    std::string to_json() const;
    static RunConfig from_json_text(const std::string& text);
    static RunConfig load(const std::string& path);
    void save(const std::string& path) const;

    GenSizes gen_sizes() const;
    ToyLanguage make_language() const;
};

}  // namespace dcma
