#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "dcma/metrics.hpp"
#include "dcma/trainer.hpp"

// Whole-run orchestration shared by the command-line tool and the
// acceptance suite: stage runs, checkpoint discovery/averaging, and
// corpus-level evaluation. Training always runs at 32-bit.
namespace dcma::pipeline {

using Model = DcmaModel<float>;

inline Model build_model(const RunConfig& cfg) {
    RngSet rngs = RngSet::from_seed(cfg.seed);
    return Model(cfg, rngs.init);
}

// deterministic prefix subset of the ASR training corpus
inline Corpus asr_subset(const Corpus& asr, double fraction) {
    DCMA_CHECK(fraction > 0.0 && fraction <= 1.0, "asr fraction must be in (0,1]");
    Corpus out;
    out.split = asr.split;
    size_t n = std::max(size_t(1), size_t(std::llround(fraction * double(asr.asr.size()))));
    n = std::min(n, asr.asr.size());
    out.asr.assign(asr.asr.begin(), asr.asr.begin() + long(n));
    return out;
}

inline std::vector<std::string> list_checkpoints(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::pair<uint64_t, std::string>> found;
    DCMA_CHECK(fs::is_directory(dir), "no such checkpoint directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir)) {
        std::string name = e.path().filename().string();
        if (name.rfind("ckpt-", 0) == 0 && name.size() > 9 &&
            name.compare(name.size() - 4, 4, ".bin") == 0) {
            uint64_t step = std::stoull(name.substr(5, name.size() - 9));
            found.push_back({step, e.path().string()});
        }
    }
    DCMA_CHECK(!found.empty(), "no checkpoints found in " + dir);
    std::sort(found.begin(), found.end());
    std::vector<std::string> out;
    for (auto& [s, p] : found) out.push_back(std::move(p));
    return out;
}

inline NamedBlobs averaged_from_dir(const std::string& dir, size_t avg_last) {
    std::vector<std::string> all = list_checkpoints(dir);
    size_t n = std::min(avg_last, all.size());
    return average_checkpoints({all.end() - long(n), all.end()});
}

// pretrain from scratch into cfg.out_dir; returns the checkpoint directory
inline std::string run_pretrain(const RunConfig& cfg, const Corpus& mt_train) {
    Model model = build_model(cfg);
    Trainer<float> tr(cfg, model, Stage::Pretrain, nullptr, &mt_train);
    tr.run();
    return cfg.out_dir;
}

// finetune into cfg.out_dir, optionally starting from pretrained parameters
inline std::string run_finetune(const RunConfig& cfg, const Corpus& asr_train,
                                const Corpus& mt_train, const NamedBlobs* init_params) {
    Model model = build_model(cfg);
    Corpus asr = asr_subset(asr_train, cfg.asr_fraction);
    Trainer<float> tr(cfg, model, Stage::Finetune, &asr, &mt_train);
    if (init_params) tr.init_params(*init_params);
    tr.run();
    return cfg.out_dir;
}

struct EvalResult {
    double token_accuracy = 0.0;
    double bleu = 0.0;
    size_t records = 0;
};

// zero-shot speech translation quality on an ST split
inline EvalResult evaluate_st(const Model& model, const Corpus& st, size_t beam) {
    DCMA_CHECK(!st.st.empty(), "evaluate: split has no ST records");
    std::vector<std::vector<size_t>> hyps, refs;
    for (const StRecord& r : st.st) {
        hyps.push_back(model.translate(r.frames, r.t, r.f, beam));
        refs.push_back(r.tgt);
    }
    return {token_accuracy(hyps, refs), corpus_bleu(hyps, refs), st.st.size()};
}

// MT reconstruction quality: transcript -> memory -> quantize -> decode
inline EvalResult evaluate_mt(const Model& model, const Corpus& st, size_t beam) {
    DCMA_CHECK(!st.st.empty(), "evaluate: split has no ST records");
    std::vector<std::vector<size_t>> hyps, refs;
    for (const StRecord& r : st.st) {
        hyps.push_back(model.translate_text(r.transcript, beam));
        refs.push_back(r.tgt);
    }
    return {token_accuracy(hyps, refs), corpus_bleu(hyps, refs), st.st.size()};
}

// Figure 5 / Appendix B analysis: per-record sent_acc, 5-way binning with
// per-bin ST and MT token accuracy, similarity diagnostics, code usage
inline AlignmentReport analyze_model(const Model& model, const Corpus& st, size_t beam,
                                     CodeUsage* usage = nullptr) {
    DCMA_CHECK(!st.st.empty(), "analyze: split has no ST records");
    AlignmentReport rep;
    SimilarityAccum sim;
    struct BinAccum {
        std::vector<std::vector<size_t>> st_hyps, mt_hyps, refs;
    } bins[5];
    for (const StRecord& r : st.st) {
        auto [codes, zs] = model.encode_for_inference(r.frames, r.t, r.f);
        CodeSelection zx = model.text_code_selection(r.transcript);
        double acc = sent_acc(zs, zx);
        rep.per_record_sent_acc.push_back(acc);
        if (usage) usage->add(zs);
        sim.add(model.speech_memory_output(r.frames, r.t, r.f),
                model.text_memory_output(r.transcript), model.cfg.memories, model.cfg.d);
        BinAccum& b = bins[sent_acc_bin(acc)];
        b.st_hyps.push_back(model.decode_from_memory(codes, beam));
        b.mt_hyps.push_back(model.translate_text(r.transcript, beam));
        b.refs.push_back(r.tgt);
    }
    for (size_t i = 0; i < 5; ++i) {
        rep.bins[i].count = bins[i].refs.size();
        if (!bins[i].refs.empty()) {
            rep.bins[i].st_metric = token_accuracy(bins[i].st_hyps, bins[i].refs);
            rep.bins[i].mt_metric = token_accuracy(bins[i].mt_hyps, bins[i].refs);
        }
    }
    rep.sim_memory = sim.sim_memory();
    rep.sim_sentence = sim.sim_sentence();
    rep.sim_skipped = sim.skipped;
    return rep;
}

// Spearman rank correlation of per-bin ST accuracy against bin index,
// over non-empty bins
inline double bin_spearman(const AlignmentReport& rep) {
    std::vector<double> idx, acc;
    for (size_t i = 0; i < 5; ++i)
        if (rep.bins[i].count > 0) {
            idx.push_back(double(i));
            acc.push_back(rep.bins[i].st_metric);
        }
    DCMA_CHECK(idx.size() >= 2, "subset report: fewer than two non-empty bins");
    return spearman(idx, acc);
}

}  // namespace dcma::pipeline
