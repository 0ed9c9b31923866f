#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dcma/rng.hpp"
#include "dcma/tensor.hpp"

namespace dcma {

template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

// forward-pass context threaded through every layer
template <typename T>
struct FwdCtx {
    bool training = false;
    T dropout_rate = T(0);
    Rng* dropout_rng = nullptr;

    Tensor<T> drop(Tensor<T> x) const {
        if (!training || dropout_rate == T(0)) return x;
        return dropout(x, double(dropout_rate), *dropout_rng, true);
    }
};

namespace init {

template <typename T>
std::vector<T> xavier(size_t fan_in, size_t fan_out, Rng& rng) {
    double a = std::sqrt(6.0 / double(fan_in + fan_out));
    std::vector<T> v(fan_in * fan_out);
    for (auto& x : v) x = T((rng.uniform() * 2.0 - 1.0) * a);
    return v;
}

template <typename T>
std::vector<T> gaussian(size_t n, double sigma, Rng& rng) {
    std::vector<T> v(n);
    for (auto& x : v) x = T(rng.gaussian() * sigma);
    return v;
}

}  // namespace init

template <typename T>
struct Linear {
    Tensor<T> w;  // [in, out]
    Tensor<T> b;  // [out]

    Linear() = default;
    Linear(size_t in, size_t out, Rng& rng)
        : w(Tensor<T>::param({in, out}, init::xavier<T>(in, out, rng))),
          b(Tensor<T>::param({out}, std::vector<T>(out, T(0)))) {}

    Tensor<T> forward(Tensor<T> x) const { return add(matmul(x, w), b); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gain;
    Tensor<T> bias;

    LayerNorm() = default;
    explicit LayerNorm(size_t d)
        : gain(Tensor<T>::param({d}, std::vector<T>(d, T(1)))),
          bias(Tensor<T>::param({d}, std::vector<T>(d, T(0)))) {}

    Tensor<T> forward(Tensor<T> x) const { return layer_norm(x, gain, bias); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".gain", gain});
        out.push_back({prefix + ".bias", bias});
    }
};

// sinusoidal positional table, [len, d]
template <typename T>
Tensor<T> sinusoidal_positions(size_t len, size_t d) {
    std::vector<T> pe(len * d);
    for (size_t pos = 0; pos < len; ++pos)
        for (size_t i = 0; i < d; ++i) {
            double angle = double(pos) / std::pow(10000.0, double(2 * (i / 2)) / double(d));
            pe[pos * d + i] = T(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    return Tensor<T>::constant({len, d}, std::move(pe));
}

// key padding mask: bytes [B*L], 1 = padding
struct KeyMask {
    size_t batch = 0;
    size_t len = 0;
    std::vector<uint8_t> pad;

    static KeyMask from_lengths(const std::vector<size_t>& lens, size_t max_len) {
        KeyMask m;
        m.batch = lens.size();
        m.len = max_len;
        m.pad.assign(m.batch * max_len, 0);
        for (size_t b = 0; b < lens.size(); ++b) {
            DCMA_CHECK(lens[b] >= 1, "mask: empty sequence");
            DCMA_CHECK(lens[b] <= max_len, "mask: length exceeds padded extent");
            for (size_t j = lens[b]; j < max_len; ++j) m.pad[b * max_len + j] = 1;
        }
        return m;
    }
};

template <typename T>
struct MultiHeadAttention {
    size_t d = 0, heads = 0;
    Linear<T> wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(size_t d_, size_t heads_, Rng& rng)
        : d(d_), heads(heads_), wq(d_, d_, rng), wk(d_, d_, rng), wv(d_, d_, rng), wo(d_, d_, rng) {
        DCMA_CHECK(d_ % heads_ == 0, "attention: model width not divisible by head count");
    }

    // q_in: [B, Lq, d]; kv_in: [B, Lk, d]; kmask: optional key padding; causal
    // restricts position i to keys <= i (requires Lq == Lk)
    Tensor<T> forward(Tensor<T> q_in, Tensor<T> kv_in, const KeyMask* kmask, bool causal) const {
        const Shape& qs = q_in.shape();
        const Shape& ks = kv_in.shape();
        DCMA_CHECK(qs.size() == 3 && ks.size() == 3 && qs[2] == d && ks[2] == d,
                   "attention: inputs must be [B,L,d]");
        size_t bsz = qs[0], lq = qs[1], lk = ks[1];
        DCMA_CHECK(ks[0] == bsz, "attention: batch mismatch");
        size_t dh = d / heads;
        if (kmask) {
            DCMA_CHECK(kmask->batch == bsz && kmask->len == lk, "attention: mask extent mismatch");
            for (size_t b = 0; b < bsz; ++b) {
                bool any = false;
                for (size_t j = 0; j < lk; ++j) any = any || !kmask->pad[b * lk + j];
                DCMA_CHECK(any, "attention: all key positions masked");
            }
        }
        auto split = [&](Tensor<T> x, size_t l) {
            return swap_axes(reshape(x, {bsz, l, heads, dh}), 1, 2);  // [B,h,L,dh]
        };
        Tensor<T> q = split(wq.forward(q_in), lq);
        Tensor<T> k = split(wk.forward(kv_in), lk);
        Tensor<T> v = split(wv.forward(kv_in), lk);
        Tensor<T> scores = scale(matmul(q, swap_axes(k, 2, 3)), T(1.0 / std::sqrt(double(dh))));
        const T neg_inf = -std::numeric_limits<T>::infinity();
        if (causal) {
            DCMA_CHECK(lq == lk, "attention: causal mask needs square scores");
            std::vector<uint8_t> cm(lq * lk, 0);
            for (size_t i = 0; i < lq; ++i)
                for (size_t j = i + 1; j < lk; ++j) cm[i * lk + j] = 1;
            scores = masked_fill(scores, cm, neg_inf);
        }
        if (kmask) scores = masked_fill_keys(scores, kmask->pad, neg_inf);
        Tensor<T> attn = softmax(scores);
        Tensor<T> ctx = matmul(attn, v);                          // [B,h,Lq,dh]
        Tensor<T> merged = reshape(swap_axes(ctx, 1, 2), {bsz, lq, d});
        return wo.forward(merged);
    }

    void collect(const std::string& p, ParamList<T>& out) const {
        wq.collect(p + ".wq", out);
        wk.collect(p + ".wk", out);
        wv.collect(p + ".wv", out);
        wo.collect(p + ".wo", out);
    }
};

template <typename T>
struct FeedForward {
    Linear<T> fc1, fc2;

    FeedForward() = default;
    FeedForward(size_t d, size_t hidden, Rng& rng) : fc1(d, hidden, rng), fc2(hidden, d, rng) {}

    Tensor<T> forward(Tensor<T> x) const { return fc2.forward(gelu(fc1.forward(x))); }

    void collect(const std::string& p, ParamList<T>& out) const {
        fc1.collect(p + ".fc1", out);
        fc2.collect(p + ".fc2", out);
    }
};

// post-norm transformer encoder layer
template <typename T>
struct EncoderLayer {
    MultiHeadAttention<T> attn;
    FeedForward<T> ffn;
    LayerNorm<T> ln1, ln2;

    EncoderLayer() = default;
    EncoderLayer(size_t d, size_t heads, size_t ffn_hidden, Rng& rng)
        : attn(d, heads, rng), ffn(d, ffn_hidden, rng), ln1(d), ln2(d) {}

    Tensor<T> forward(Tensor<T> x, const KeyMask* kmask, const FwdCtx<T>& ctx) const {
        Tensor<T> a = ln1.forward(add(x, ctx.drop(attn.forward(x, x, kmask, false))));
        return ln2.forward(add(a, ctx.drop(ffn.forward(a))));
    }

    void collect(const std::string& p, ParamList<T>& out) const {
        attn.collect(p + ".attn", out);
        ffn.collect(p + ".ffn", out);
        ln1.collect(p + ".ln1", out);
        ln2.collect(p + ".ln2", out);
    }
};

template <typename T>
struct DecoderLayer {
    MultiHeadAttention<T> self_attn, cross_attn;
    FeedForward<T> ffn;
    LayerNorm<T> ln1, ln2, ln3;

    DecoderLayer() = default;
    DecoderLayer(size_t d, size_t heads, size_t ffn_hidden, Rng& rng)
        : self_attn(d, heads, rng), cross_attn(d, heads, rng), ffn(d, ffn_hidden, rng),
          ln1(d), ln2(d), ln3(d) {}

    Tensor<T> forward(Tensor<T> x, Tensor<T> memory, const KeyMask* tgt_mask,
                      const FwdCtx<T>& ctx) const {
        Tensor<T> a = ln1.forward(add(x, ctx.drop(self_attn.forward(x, x, tgt_mask, true))));
        Tensor<T> c = ln2.forward(add(a, ctx.drop(cross_attn.forward(a, memory, nullptr, false))));
        return ln3.forward(add(c, ctx.drop(ffn.forward(c))));
    }

    void collect(const std::string& p, ParamList<T>& out) const {
        self_attn.collect(p + ".self_attn", out);
        cross_attn.collect(p + ".cross_attn", out);
        ffn.collect(p + ".ffn", out);
        ln1.collect(p + ".ln1", out);
        ln2.collect(p + ".ln2", out);
        ln3.collect(p + ".ln3", out);
    }
};

template <typename T>
struct TransformerEncoder {
    std::vector<EncoderLayer<T>> layers;

    TransformerEncoder() = default;
    TransformerEncoder(size_t n_layers, size_t d, size_t heads, size_t ffn_hidden, Rng& rng) {
        for (size_t i = 0; i < n_layers; ++i) layers.emplace_back(d, heads, ffn_hidden, rng);
    }

    // x already embedded to width d
    Tensor<T> forward(Tensor<T> x, const KeyMask* kmask, const FwdCtx<T>& ctx) const {
        DCMA_CHECK(x.ndim() == 3 && x.shape()[1] >= 1, "encoder: empty sequence");
        for (const auto& l : layers) x = l.forward(x, kmask, ctx);
        return x;
    }

    void collect(const std::string& p, ParamList<T>& out) const {
        for (size_t i = 0; i < layers.size(); ++i)
            layers[i].collect(p + ".layer" + std::to_string(i), out);
    }
};

template <typename T>
struct TransformerDecoder {
    size_t d = 0;
    std::vector<DecoderLayer<T>> layers;

    TransformerDecoder() = default;
    TransformerDecoder(size_t n_layers, size_t d_, size_t heads, size_t ffn_hidden, Rng& rng)
        : d(d_) {
        for (size_t i = 0; i < n_layers; ++i) layers.emplace_back(d_, heads, ffn_hidden, rng);
    }

    Tensor<T> forward(Tensor<T> x, Tensor<T> memory, const KeyMask* tgt_mask,
                      const FwdCtx<T>& ctx) const {
        DCMA_CHECK(memory.ndim() == 3 && memory.shape()[2] == d,
                   "decoder: memory width mismatch");
        for (const auto& l : layers) x = l.forward(x, memory, tgt_mask, ctx);
        return x;
    }

    void collect(const std::string& p, ParamList<T>& out) const {
        for (size_t i = 0; i < layers.size(); ++i)
            layers[i].collect(p + ".layer" + std::to_string(i), out);
    }
};

inline size_t shrink_len(size_t t) {
    auto half = [](size_t x) { return (x + 1) / 2; };  // conv k5 s2 p2 gives ceil(T/2)
    return half(half(t));
}

// acoustic front end: linear lift to conv width, two stride-2 convolutions
// (kernel 5, padding 2, total shrink factor 4), linear projection to d
template <typename T>
struct ShrinkStack {
    size_t conv_width = 0;
    Linear<T> lift;   // F -> c
    Tensor<T> w1, b1; // conv c -> c
    Tensor<T> w2, b2;
    Linear<T> proj;   // c -> d

    ShrinkStack() = default;
    ShrinkStack(size_t feat_dim, size_t c, size_t d, Rng& rng)
        : conv_width(c), lift(feat_dim, c, rng),
          w1(Tensor<T>::param({5, c, c}, init::xavier<T>(5 * c, c, rng))),
          b1(Tensor<T>::param({c}, std::vector<T>(c, T(0)))),
          w2(Tensor<T>::param({5, c, c}, init::xavier<T>(5 * c, c, rng))),
          b2(Tensor<T>::param({c}, std::vector<T>(c, T(0)))),
          proj(c, d, rng) {}

    // frames: [B, T, F]; frame_lens gives true lengths. Padded frames are
    // zeroed before the convolutions so padding cannot leak into valid
    // outputs; returns features [B, T', d] with T' = shrink_len(Tmax) and a
    // list of valid shrunk lengths.
    Tensor<T> forward(Tensor<T> frames, const std::vector<size_t>& frame_lens,
                      std::vector<size_t>& out_lens) const {
        size_t bsz = frames.shape()[0], tmax = frames.shape()[1];
        KeyMask in_mask = KeyMask::from_lengths(frame_lens, tmax);
        Tensor<T> x = masked_fill_rows(frames, in_mask.pad, T(0));
        x = gelu(lift.forward(x));
        x = gelu(conv1d(x, w1, b1, 2, 2));
        x = gelu(conv1d(x, w2, b2, 2, 2));
        x = proj.forward(x);
        out_lens.resize(bsz);
        for (size_t b = 0; b < bsz; ++b) out_lens[b] = shrink_len(frame_lens[b]);
        size_t t_out = x.shape()[1];
        KeyMask out_mask = KeyMask::from_lengths(out_lens, t_out);
        return masked_fill_rows(x, out_mask.pad, T(0));
    }

    void collect(const std::string& p, ParamList<T>& out) const {
        lift.collect(p + ".lift", out);
        out.push_back({p + ".conv1.w", w1});
        out.push_back({p + ".conv1.b", b1});
        out.push_back({p + ".conv2.w", w2});
        out.push_back({p + ".conv2.b", b2});
        proj.collect(p + ".proj", out);
    }
};

}  // namespace dcma
