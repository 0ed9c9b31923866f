#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "dcma/config.hpp"
#include "dcma/data.hpp"
#include "dcma/memory_pool.hpp"
#include "dcma/nn.hpp"
#include "dcma/objectives.hpp"
#include "dcma/quantizer.hpp"

namespace dcma {

// Three data flows share one set of modules:
//   MT:  text -> semantic encoder -> memory -> quantize -> decoder
//   ASR: speech & transcript -> memory logits -> alignment loss, plus CTC
//   ST (inference only): speech -> memory -> quantize -> decoder
// There is no ST training path; the batch type system only knows ASR and MT.
template <typename T>
struct DcmaModel {
    RunConfig cfg;
    Vocab vocab;

    Tensor<T> embedding;  // [W, d], shared: encoder text input, decoder input, output softmax
    ShrinkStack<T> acoustic;
    TransformerEncoder<T> semantic;
    MemoryPool<T> memory;
    Codebook<T> codebook;
    Linear<T> head;      // CTC head; also the MLM head when sharing is on
    Linear<T> mlm_head;  // separate instance only under --no-shared-softmax
    TransformerDecoder<T> decoder;
    Tensor<T> positions;  // constant sinusoidal table

    static constexpr size_t kMaxPositions = 512;

    DcmaModel() = default;

    DcmaModel(const RunConfig& cfg_, Rng init_rng) : cfg(cfg_), vocab{cfg_.vocab_surface} {
        cfg.validate();
        size_t w = vocab.size();
        embedding = Tensor<T>::param({w, cfg.d}, init::gaussian<T>(w * cfg.d, 0.02, init_rng));
        acoustic = ShrinkStack<T>(cfg.feat_dim, cfg.conv_width, cfg.d, init_rng);
        semantic = TransformerEncoder<T>(cfg.enc_layers, cfg.d, cfg.heads, cfg.ffn, init_rng);
        memory = MemoryPool<T>(cfg.memories, cfg.d, cfg.heads, init_rng);
        codebook = Codebook<T>(cfg.groups, cfg.entries, cfg.d, cfg.logit_hidden, init_rng);
        head = Linear<T>(cfg.d, w, init_rng);
        if (cfg.no_shared_softmax) mlm_head = Linear<T>(cfg.d, w, init_rng);
        decoder = TransformerDecoder<T>(cfg.dec_layers, cfg.d, cfg.heads, cfg.ffn, init_rng);
        positions = sinusoidal_positions<T>(kMaxPositions, cfg.d);
    }

    const Linear<T>& mlm_scorer() const { return cfg.no_shared_softmax ? mlm_head : head; }

    // ---- embedding helpers -------------------------------------------------

    Tensor<T> pos_slice(size_t len) const {
        DCMA_CHECK(len <= kMaxPositions, "sequence exceeds positional table");
        return slice(positions, 0, 0, len);
    }

    // Encoder positions are indexed from the sequence end (index 0 = last
    // element). The translation rule reverses the source, so target position
    // i always corresponds to source end-offset i regardless of sentence
    // length; end-anchored indexing makes that correspondence explicit and
    // lets the decoder generalize across the MT/ST length domain shift. The
    // decoder keeps start-anchored positions (it generates left to right).
    Tensor<T> pos_from_end(const std::vector<size_t>& lens, size_t bsz, size_t len) const {
        std::vector<T> v(bsz * len * cfg.d, T(0));
        const std::vector<T>& tab = positions.value();
        for (size_t b = 0; b < bsz; ++b) {
            DCMA_CHECK(lens[b] <= kMaxPositions, "sequence exceeds positional table");
            for (size_t t = 0; t < lens[b] && t < len; ++t)
                std::copy(tab.begin() + long((lens[b] - 1 - t) * cfg.d),
                          tab.begin() + long((lens[b] - t) * cfg.d),
                          v.begin() + long((b * len + t) * cfg.d));
        }
        return Tensor<T>::constant({bsz, len, cfg.d}, std::move(v));
    }

    // ids: [B*L] flattened; returns scaled embeddings + positions, [B, L, d]
    Tensor<T> embed_ids(const std::vector<size_t>& ids, size_t bsz, size_t len) const {
        Tensor<T> e = embedding_lookup(ids, {bsz, len});
        return add(scale(e, T(std::sqrt(double(cfg.d)))), pos_slice(len));
    }

    Tensor<T> embedding_lookup(const std::vector<size_t>& ids, Shape leading) const {
        return dcma::embedding(embedding, ids, std::move(leading));
    }

    struct Padded {
        std::vector<size_t> ids;  // [B * Lmax]
        std::vector<size_t> lens;
        size_t len = 0;
    };

    static Padded pad_ids(const std::vector<std::vector<size_t>>& seqs) {
        Padded p;
        for (const auto& s : seqs) {
            DCMA_CHECK(!s.empty(), "empty sequence in batch");
            p.len = std::max(p.len, s.size());
        }
        p.ids.assign(seqs.size() * p.len, Vocab::PAD);
        for (size_t b = 0; b < seqs.size(); ++b) {
            p.lens.push_back(seqs[b].size());
            std::copy(seqs[b].begin(), seqs[b].end(), p.ids.begin() + long(b * p.len));
        }
        return p;
    }

    std::vector<size_t> to_src_ids(const std::vector<size_t>& surface) const {
        std::vector<size_t> out(surface.size());
        for (size_t i = 0; i < surface.size(); ++i) out[i] = vocab.src(surface[i]);
        return out;
    }
    std::vector<size_t> to_tgt_ids(const std::vector<size_t>& surface) const {
        std::vector<size_t> out(surface.size());
        for (size_t i = 0; i < surface.size(); ++i) out[i] = vocab.tgt(surface[i]);
        return out;
    }

    // ---- encoder paths -----------------------------------------------------

    struct Encoded {
        Tensor<T> h;  // [B, L, d]
        KeyMask mask;
    };

    Encoded encode_token_ids(const std::vector<size_t>& flat_ids, size_t bsz, size_t len,
                             const std::vector<size_t>& lens, const FwdCtx<T>& ctx) const {
        Encoded out;
        out.mask = KeyMask::from_lengths(lens, len);
        Tensor<T> e = embedding_lookup(flat_ids, {bsz, len});
        Tensor<T> x = add(scale(e, T(std::sqrt(double(cfg.d)))), pos_from_end(lens, bsz, len));
        x = masked_fill_rows(x, out.mask.pad, T(0));
        out.h = semantic.forward(x, &out.mask, ctx);
        return out;
    }

    Encoded encode_text(const std::vector<std::vector<size_t>>& surface, const FwdCtx<T>& ctx) const {
        std::vector<std::vector<size_t>> ids;
        ids.reserve(surface.size());
        for (const auto& s : surface) ids.push_back(to_src_ids(s));
        Padded p = pad_ids(ids);
        return encode_token_ids(p.ids, surface.size(), p.len, p.lens, ctx);
    }

    Encoded encode_speech(const std::vector<float>& frames, size_t bsz, size_t t_max, size_t f,
                          const std::vector<size_t>& frame_lens, const FwdCtx<T>& ctx) const {
        std::vector<T> fr(frames.begin(), frames.end());
        Tensor<T> x = Tensor<T>::constant({bsz, t_max, f}, std::move(fr));
        std::vector<size_t> out_lens;
        Tensor<T> feats = acoustic.forward(x, frame_lens, out_lens);
        Encoded out;
        out.mask = KeyMask::from_lengths(out_lens, feats.shape()[1]);
        feats = add(feats, pos_from_end(out_lens, bsz, feats.shape()[1]));
        feats = masked_fill_rows(feats, out.mask.pad, T(0));
        out.h = semantic.forward(feats, &out.mask, ctx);
        return out;
    }

    // ---- training forwards -------------------------------------------------

    struct MtLosses {
        Tensor<T> mt;
        Tensor<T> mlm;
    };

    MtLosses forward_mt(const Batch& batch, double tau, RngSet& rngs, const FwdCtx<T>& ctx) const {
        DCMA_CHECK(batch.type == BatchType::Mt, "forward_mt: wrong batch type");
        size_t bsz = batch.src.size();
        MtLosses out;
        {
            Encoded enc = encode_text(batch.src, ctx);
            Tensor<T> pooled = memory.pool(enc.h, &enc.mask, ctx);
            Tensor<T> l = codebook.logits(pooled);
            auto [o_hat, zs] = codebook.select(l, tau, SelectMode::Train,
                                               ctx.training ? &rngs.gumbel : nullptr);
            out.mt = decode_loss(o_hat, batch.tgt, ctx);
        }
        {
            // corrupt, re-encode, score selected positions with the MLM head
            std::vector<std::vector<size_t>> corrupted;
            std::vector<size_t> rows, targets;
            size_t lmax = 0;
            for (const auto& s : batch.src) lmax = std::max(lmax, s.size());
            for (size_t b = 0; b < bsz; ++b) {
                auto src_ids = to_src_ids(batch.src[b]);
                MaskedSentence ms = apply_mask_policy(src_ids, MaskPolicy{}, Vocab::MASK,
                                                      Vocab::FIRST_TOKEN,
                                                      Vocab::FIRST_TOKEN + vocab.surface,
                                                      rngs.mask);
                for (size_t pos : ms.selected) {
                    rows.push_back(b * lmax + pos);
                    targets.push_back(src_ids[pos]);
                }
                corrupted.push_back(std::move(ms.corrupted));
            }
            Padded p = pad_ids(corrupted);
            Encoded enc = encode_token_ids(p.ids, bsz, p.len, p.lens, ctx);
            Tensor<T> scores = mlm_scorer().forward(enc.h);
            out.mlm = ce_at_positions(scores, rows, targets);
        }
        return out;
    }

    struct AsrLosses {
        Tensor<T> align;
        Tensor<T> ctc;
    };

    AsrLosses forward_asr(const Batch& batch, RngSet& rngs, const FwdCtx<T>& ctx,
                          bool want_align = true) const {
        (void)rngs;
        DCMA_CHECK(batch.type == BatchType::Asr, "forward_asr: wrong batch type");
        size_t bsz = batch.frame_lens.size();
        Encoded speech = encode_speech(batch.frames, bsz, batch.t_max, batch.feat_dim,
                                       batch.frame_lens, ctx);
        AsrLosses out;
        {
            // CTC on the semantic features of the speech branch
            std::vector<size_t> shrunk;
            for (size_t t : batch.frame_lens) shrunk.push_back(shrink_len(t));
            Tensor<T> logp = log_softmax(head.forward(speech.h));
            std::vector<std::vector<size_t>> targets;
            for (const auto& tr : batch.transcripts) targets.push_back(to_src_ids(tr));
            out.ctc = ctc_loss(logp, shrunk, targets, Vocab::BLANK);
        }
        if (want_align) {
            Tensor<T> o_speech = memory.pool(speech.h, &speech.mask, ctx);
            Tensor<T> l_speech;
            if (!cfg.continuous_align) l_speech = codebook.logits(o_speech);
            // text branch is the alignment target; no gradient flows into it
            Tensor<T> o_text, l_text;
            {
                NoGradGuard ng;
                FwdCtx<T> infer_ctx;  // clean forward for the target distribution
                Encoded text = encode_text(batch.transcripts, infer_ctx);
                o_text = memory.pool(text.h, &text.mask, infer_ctx);
                if (!cfg.continuous_align) l_text = codebook.logits(o_text);
            }
            out.align = cfg.continuous_align
                            ? cosine_alignment_loss(o_speech, stop_gradient(o_text))
                            : alignment_loss(l_speech, stop_gradient(l_text), cfg.groups);
        } else {
            out.align = Tensor<T>::scalar(T(0));
        }
        return out;
    }

    // ---- decoding ----------------------------------------------------------

    Tensor<T> decode_loss(Tensor<T> memory_codes, const std::vector<std::vector<size_t>>& tgt,
                          const FwdCtx<T>& ctx) const {
        size_t bsz = tgt.size();
        DCMA_CHECK(bsz >= 1, "decode: empty target batch");
        size_t lmax = 0;
        for (const auto& s : tgt) {
            DCMA_CHECK(!s.empty(), "decode: empty target");
            lmax = std::max(lmax, s.size());
        }
        size_t dec_len = lmax + 1;  // BOS + targets
        std::vector<size_t> in_ids(bsz * dec_len, Vocab::PAD);
        std::vector<size_t> out_ids(bsz * dec_len, Vocab::PAD);
        std::vector<uint8_t> pad(bsz * dec_len, 1);
        std::vector<size_t> lens;
        for (size_t b = 0; b < bsz; ++b) {
            auto ids = to_tgt_ids(tgt[b]);
            in_ids[b * dec_len] = Vocab::BOS;
            for (size_t i = 0; i < ids.size(); ++i) in_ids[b * dec_len + 1 + i] = ids[i];
            for (size_t i = 0; i < ids.size(); ++i) out_ids[b * dec_len + i] = ids[i];
            out_ids[b * dec_len + ids.size()] = Vocab::EOS;
            for (size_t i = 0; i <= ids.size(); ++i) pad[b * dec_len + i] = 0;
            lens.push_back(ids.size() + 1);
        }
        KeyMask mask = KeyMask::from_lengths(lens, dec_len);
        Tensor<T> x = embed_ids(in_ids, bsz, dec_len);
        x = masked_fill_rows(x, mask.pad, T(0));
        Tensor<T> hidden = decoder.forward(x, memory_codes, &mask, ctx);
        Tensor<T> logits = output_logits(hidden);
        return label_smoothed_ce(logits, out_ids, pad, cfg.label_smoothing);
    }

    Tensor<T> output_logits(Tensor<T> hidden) const {
        return matmul(hidden, swap_axes(embedding, 0, 1));  // weight-tied softmax
    }

    // speech -> quantized memory codes [1, M, d] plus selected indices
    std::pair<Tensor<T>, CodeSelection> encode_for_inference(const std::vector<float>& frames,
                                                             size_t t, size_t f) const {
        NoGradGuard ng;
        FwdCtx<T> ctx;
        Encoded enc = encode_speech(frames, 1, t, f, {t}, ctx);
        Tensor<T> pooled = memory.pool(enc.h, &enc.mask, ctx);
        Tensor<T> l = codebook.logits(pooled);
        auto [o_hat, zs] = codebook.select(l, 1.0, SelectMode::Infer, nullptr);
        return {o_hat, zs[0]};
    }

    // infer-mode code indices for a transcript (analysis only)
    CodeSelection text_code_selection(const std::vector<size_t>& transcript) const {
        NoGradGuard ng;
        FwdCtx<T> ctx;
        Encoded enc = encode_text({transcript}, ctx);
        Tensor<T> pooled = memory.pool(enc.h, &enc.mask, ctx);
        auto [o_hat, zs] = codebook.select(codebook.logits(pooled), 1.0, SelectMode::Infer, nullptr);
        return zs[0];
    }

    // pre-quantization memory output for similarity diagnostics, [M*d]
    std::vector<double> speech_memory_output(const std::vector<float>& frames, size_t t,
                                             size_t f) const {
        NoGradGuard ng;
        FwdCtx<T> ctx;
        Encoded enc = encode_speech(frames, 1, t, f, {t}, ctx);
        Tensor<T> pooled = memory.pool(enc.h, &enc.mask, ctx);
        return std::vector<double>(pooled.value().begin(), pooled.value().end());
    }

    std::vector<double> text_memory_output(const std::vector<size_t>& transcript) const {
        NoGradGuard ng;
        FwdCtx<T> ctx;
        Encoded enc = encode_text({transcript}, ctx);
        Tensor<T> pooled = memory.pool(enc.h, &enc.mask, ctx);
        return std::vector<double>(pooled.value().begin(), pooled.value().end());
    }

    // length-normalized beam search over quantized memory codes; beam=1 is
    // greedy decoding. Returns surface target tokens; ids outside the target
    // range map to out-of-range sentinels so scoring counts them as misses.
    std::vector<size_t> decode_from_memory(Tensor<T> memory_codes, size_t beam) const {
        NoGradGuard ng;
        DCMA_CHECK(beam >= 1, "decode: beam must be >= 1");
        FwdCtx<T> ctx;
        size_t max_len = cfg.max_decode_len();
        struct Hyp {
            std::vector<size_t> ids;  // includes BOS
            double logp = 0.0;
            bool done = false;
        };
        std::vector<Hyp> live{Hyp{{Vocab::BOS}, 0.0, false}};
        std::vector<Hyp> done;
        Tensor<T> mem1 = reshape(memory_codes, {cfg.memories, cfg.d});
        for (size_t step = 0; step < max_len && !live.empty(); ++step) {
            size_t n = live.size();
            size_t len = live[0].ids.size();
            std::vector<size_t> ids(n * len);
            for (size_t i = 0; i < n; ++i)
                std::copy(live[i].ids.begin(), live[i].ids.end(), ids.begin() + long(i * len));
            Tensor<T> x = embed_ids(ids, n, len);
            Tensor<T> hidden = decoder.forward(x, expand_leading(mem1, n), nullptr, ctx);
            Tensor<T> logits = output_logits(hidden);
            Tensor<T> last = slice(logits, 1, len - 1, len);
            Tensor<T> logp = log_softmax(reshape(last, {n, vocab.size()}));
            struct Cand {
                size_t hyp, tok;
                double score;
            };
            std::vector<Cand> cands;
            const T* lp = logp.value().data();
            for (size_t i = 0; i < n; ++i)
                for (size_t v = 0; v < vocab.size(); ++v)
                    cands.push_back({i, v, live[i].logp + double(lp[i * vocab.size() + v])});
            std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
                if (a.score != b.score) return a.score > b.score;
                return a.tok < b.tok;
            });
            std::vector<Hyp> next;
            for (const Cand& c : cands) {
                if (next.size() + 0 >= beam) break;
                Hyp h = live[c.hyp];
                h.ids.push_back(c.tok);
                h.logp = c.score;
                if (c.tok == Vocab::EOS) {
                    h.done = true;
                    done.push_back(h);
                } else {
                    next.push_back(h);
                }
            }
            live = std::move(next);
        }
        for (Hyp& h : live) done.push_back(h);  // ran out of length
        DCMA_CHECK(!done.empty(), "decode: no hypotheses");
        auto norm = [](const Hyp& h) {
            size_t emitted = h.ids.size() - 1;  // excl BOS
            return emitted == 0 ? h.logp : h.logp / double(emitted);
        };
        const Hyp* best = &done[0];
        for (const Hyp& h : done)
            if (norm(h) > norm(*best)) best = &h;
        std::vector<size_t> out;
        for (size_t i = 1; i < best->ids.size(); ++i) {
            size_t id = best->ids[i];
            if (id == Vocab::EOS) break;
            out.push_back(vocab.is_tgt(id) ? vocab.tgt_index(id)
                                           : std::numeric_limits<size_t>::max() - id);
        }
        return out;
    }

    std::vector<size_t> translate(const std::vector<float>& frames, size_t t, size_t f,
                                  size_t beam) const {
        auto [codes, zs] = encode_for_inference(frames, t, f);
        return decode_from_memory(codes, beam);
    }

    // MT path reconstruction: transcript -> memory -> quantize -> decode
    std::vector<size_t> translate_text(const std::vector<size_t>& transcript, size_t beam) const {
        NoGradGuard ng;
        FwdCtx<T> ctx;
        Encoded enc = encode_text({transcript}, ctx);
        Tensor<T> pooled = memory.pool(enc.h, &enc.mask, ctx);
        auto [o_hat, zs] = codebook.select(codebook.logits(pooled), 1.0, SelectMode::Infer, nullptr);
        return decode_from_memory(o_hat, beam);
    }

    // ---- parameters ----------------------------------------------------------

    ParamList<T> parameters() const {
        ParamList<T> out;
        out.push_back({"embedding", embedding});
        acoustic.collect("acoustic", out);
        semantic.collect("semantic", out);
        memory.collect("memory", out);
        codebook.collect("codebook", out);
        head.collect("head", out);
        if (cfg.no_shared_softmax) mlm_head.collect("mlm_head", out);
        decoder.collect("decoder", out);
        return out;
    }

    // component -> forward paths that consume it (zero-shot audit material)
    std::map<std::string, std::vector<std::string>> parameter_roles() const {
        std::map<std::string, std::vector<std::string>> roles;
        for (const auto& [name, t] : parameters()) {
            std::vector<std::string> paths;
            auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
            if (starts("acoustic")) paths = {"asr", "st"};
            else if (starts("semantic") || starts("memory") || starts("codebook"))
                paths = {"mt", "asr", "st"};
            else if (starts("decoder")) paths = {"mt", "st"};
            else if (starts("embedding")) paths = {"mt", "asr", "st"};
            else if (starts("mlm_head")) paths = {"mt"};
            else if (starts("head"))
                paths = cfg.no_shared_softmax ? std::vector<std::string>{"asr"}
                                              : std::vector<std::string>{"asr", "mt"};
            roles[name] = paths;
        }
        return roles;
    }

    // pretraining leaves the acoustic encoder (and an unshared CTC head) untouched
    ParamList<T> trainable_parameters(bool pretrain) const {
        ParamList<T> out;
        for (auto& [name, t] : parameters()) {
            if (pretrain) {
                if (name.rfind("acoustic", 0) == 0) continue;
                if (cfg.no_shared_softmax && name.rfind("head", 0) == 0) continue;
            }
            out.push_back({name, t});
        }
        return out;
    }
};

}  // namespace dcma
