#pragma once

#include <cmath>
#include <cstdint>

#include "dcma/nn.hpp"

namespace dcma {

// tau(step) = max(floor, start * factor^step)
struct TemperatureSchedule {
    double start = 2.0;
    double floor = 0.5;
    double factor = 0.999995;

    double tau(uint64_t step) const {
        return std::max(floor, start * std::pow(factor, double(step)));
    }
};

enum class SelectMode { Train, Infer };

// per-utterance selected entry indices, [M, G]
struct CodeSelection {
    size_t m = 0, g = 0;
    std::vector<size_t> z;  // m*g entries

    size_t at(size_t mi, size_t gi) const { return z[mi * g + gi]; }
};

// Grouped codebooks with Gumbel-softmax straight-through selection. One
// instance is shared across all memory positions and both modalities.
template <typename T>
struct Codebook {
    size_t groups = 0, entries = 0, dprime = 0, d = 0;
    Tensor<T> codes;  // [G, V, d']
    Linear<T> proj1;  // d -> hidden
    Linear<T> proj2;  // hidden -> G*V

    Codebook() = default;
    Codebook(size_t g, size_t v, size_t d_, size_t logit_hidden, Rng& rng)
        : groups(g), entries(v), dprime(d_ / g), d(d_),
          codes(Tensor<T>::param({g, v, d_ / g}, init::gaussian<T>(g * v * (d_ / g), 1.0, rng))),
          proj1(d_, logit_hidden, rng), proj2(logit_hidden, g * v, rng) {
        DCMA_CHECK(d_ % g == 0, "codebook: width not divisible by group count");
        // unit-variance init on the logit projection (standard practice for
        // Gumbel quantizers): logits must dominate the Gumbel noise from the
        // first step or selections are pure noise, the decoder learns to
        // ignore the bottleneck, and training collapses to a target-side
        // language model
        proj2.w = Tensor<T>::param({logit_hidden, g * v},
                                   init::gaussian<T>(logit_hidden * g * v, 1.0, rng));
    }

    // O: [B, M, d] -> logits [B, M, G, V]
    Tensor<T> logits(Tensor<T> o) const {
        DCMA_CHECK(o.ndim() == 3 && o.shape()[2] == d, "codebook: input must be [B,M,d]");
        size_t bsz = o.shape()[0], m = o.shape()[1];
        Tensor<T> l = proj2.forward(gelu(proj1.forward(o)));
        return reshape(l, {bsz, m, groups, entries});
    }

    // Train mode: forward is the hard one-hot at argmax(logits + gumbel
    // noise); backward is the soft Gumbel-softmax gradient at temperature
    // tau (straight-through). Infer mode: noise-free hard argmax.
    // Returns code vectors [B, M, d] (exact concatenations of codebook
    // rows) and the selected indices per item.
    std::pair<Tensor<T>, std::vector<CodeSelection>> select(Tensor<T> l, double tau,
                                                            SelectMode mode,
                                                            Rng* rng = nullptr) const {
        const Shape& ls = l.shape();
        DCMA_CHECK(ls.size() == 4 && ls[2] == groups && ls[3] == entries,
                   "codebook: logits must be [B,M,G,V]");
        size_t bsz = ls[0], m = ls[1];
        size_t rows = bsz * m * groups;
        Tensor<T> basis;  // [B,M,G,V] one-hot rows
        std::vector<size_t> arg;
        if (mode == SelectMode::Train) {
            DCMA_CHECK(tau > 0, "codebook: temperature must be positive");
            DCMA_CHECK(rng != nullptr, "codebook: train-mode selection needs an rng");
            std::vector<T> noise(l.size());
            for (auto& n : noise) {
                double u = rng->uniform_open();
                n = T(-std::log(-std::log(u)));
            }
            Tensor<T> noisy = add(l, Tensor<T>::constant(ls, std::move(noise)));
            Tensor<T> soft = softmax(scale(noisy, T(1.0 / tau)));
            arg = argmax_last(soft);
            std::vector<T> hard(l.size(), T(0));
            for (size_t r = 0; r < rows; ++r) hard[r * entries + arg[r]] = T(1);
            basis = straight_through(soft, std::move(hard));
        } else {
            arg = argmax_last(l);
            std::vector<T> hard(l.size(), T(0));
            for (size_t r = 0; r < rows; ++r) hard[r * entries + arg[r]] = T(1);
            basis = Tensor<T>::constant(ls, std::move(hard));
        }
        // combine: per group, one-hot [B,M,V] x codes[g] [V,d'] -> [B,M,d'];
        // gradient reaches the selected entries through this matmul
        std::vector<Tensor<T>> parts;
        parts.reserve(groups);
        for (size_t g = 0; g < groups; ++g) {
            Tensor<T> sel = reshape(slice(basis, 2, g, g + 1), {bsz, m, entries});
            Tensor<T> eg = reshape(slice(codes, 0, g, g + 1), {entries, dprime});
            parts.push_back(matmul(sel, eg));
        }
        Tensor<T> o_hat = groups == 1 ? parts[0] : concat(parts, 2);
        std::vector<CodeSelection> zs(bsz);
        for (size_t b = 0; b < bsz; ++b) {
            zs[b].m = m;
            zs[b].g = groups;
            zs[b].z.assign(arg.begin() + b * m * groups, arg.begin() + (b + 1) * m * groups);
        }
        return {o_hat, std::move(zs)};
    }

    void collect(const std::string& p, ParamList<T>& out) const {
        out.push_back({p + ".codes", codes});
        proj1.collect(p + ".proj1", out);
        proj2.collect(p + ".proj2", out);
    }
};

// Cross-modal alignment loss: the text-side softmax distribution (noise- and
// temperature-free) is the fixed target for the speech-side distribution;
// per sample sum over memories, groups and entries, divided by G, averaged
// over the batch. Gradient flows only through the speech branch.
template <typename T>
Tensor<T> alignment_loss(Tensor<T> l_speech, Tensor<T> l_text, size_t groups) {
    DCMA_CHECK(l_speech.shape() == l_text.shape(),
               shape_mismatch("alignment_loss", l_speech.shape(), l_text.shape()));
    size_t bsz = l_speech.shape()[0];
    Tensor<T> p_text = softmax(stop_gradient(l_text));
    Tensor<T> logp_speech = log_softmax(l_speech);
    Tensor<T> ce = sum_all(mul(p_text, logp_speech));
    return scale(ce, T(-1.0 / (double(groups) * double(bsz))));
}

// continuous-alignment variant: mean over (item, memory) of
// 1 - cos(o_speech, o_text), text side treated as the fixed target
template <typename T>
Tensor<T> cosine_alignment_loss(Tensor<T> o_speech, Tensor<T> o_text, T eps = T(1e-8)) {
    DCMA_CHECK(o_speech.shape() == o_text.shape(),
               shape_mismatch("cosine_alignment_loss", o_speech.shape(), o_text.shape()));
    Tensor<T> ox = stop_gradient(o_text);
    Tensor<T> dot = sum_axis(mul(o_speech, ox), o_speech.ndim() - 1);
    Tensor<T> ns = add_scalar(sum_axis(mul(o_speech, o_speech), o_speech.ndim() - 1), eps);
    Tensor<T> nx = add_scalar(sum_axis(mul(ox, ox), ox.ndim() - 1), eps);
    // cos = dot / sqrt(ns*nx); sqrt via exp(0.5 log)
    Tensor<T> denom = exp_(scale(log_(mul(ns, nx)), T(0.5)));
    Tensor<T> cos = div(dot, denom);
    return add_scalar(neg(mean_all(cos)), T(1));
}

}  // namespace dcma
