#pragma once

#include "dcma/nn.hpp"

namespace dcma {

// Pools variable-length contextual features of either modality into exactly
// M memory vectors: learnable queries attend over the features. One
// instance is shared by the speech and text paths.
template <typename T>
struct MemoryPool {
    size_t m = 0, d = 0;
    Tensor<T> queries;  // [M, d]
    MultiHeadAttention<T> attn;

    MemoryPool() = default;
    MemoryPool(size_t m_, size_t d_, size_t heads, Rng& rng)
        : m(m_), d(d_), queries(position_seeded_queries(m_, d_, rng)), attn(d_, heads, rng) {}

    // Queries start as sinusoidal position vectors at spread positions (plus
    // small noise). A near-zero init makes every query attend uniformly, so
    // all M memories begin as the same pooled average and the codes carry no
    // positional structure; seeding each query with a distinct position
    // biases it toward a local segment of the input from the first step.
    static Tensor<T> position_seeded_queries(size_t m_, size_t d_, Rng& rng) {
        Tensor<T> table = sinusoidal_positions<T>(2 * m_, d_);
        std::vector<T> q(m_ * d_);
        for (size_t i = 0; i < m_; ++i)
            for (size_t j = 0; j < d_; ++j)
                q[i * d_ + j] = table.value()[(2 * i) * d_ + j] + T(0.02 * rng.gaussian());
        return Tensor<T>::param({m_, d_}, std::move(q));
    }

    // H: [B, l, d] semantic-encoder output; mask marks padding. Output has
    // exactly M rows per item regardless of l.
    Tensor<T> pool(Tensor<T> h, const KeyMask* kmask, const FwdCtx<T>& ctx) const {
        DCMA_CHECK(h.ndim() == 3 && h.shape()[2] == d, "pool: input must be [B,l,d]");
        DCMA_CHECK(h.shape()[1] >= 1, "pool: empty input");
        size_t bsz = h.shape()[0];
        (void)ctx;
        Tensor<T> q = expand_leading(queries, bsz);  // [B, M, d]
        return attn.forward(q, h, kmask, false);
    }

    void collect(const std::string& p, ParamList<T>& out) const {
        out.push_back({p + ".queries", queries});
        attn.collect(p + ".attn", out);
    }
};

}  // namespace dcma
