#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "dcma/rng.hpp"
#include "dcma/tensor.hpp"

namespace dcma {

// T' too short to emit the target at all; distinct from a merely unlikely
// alignment, which still has a finite loss
struct CtcInfeasible : std::runtime_error {
    explicit CtcInfeasible(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail_ctc {

inline double logsumexp2(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline size_t ctc_min_frames(const std::vector<size_t>& target) {
    size_t need = target.size();
    for (size_t i = 1; i < target.size(); ++i)
        if (target[i] == target[i - 1]) need++;
    return need;
}

// forward/backward DP for one utterance; fills grad (dense [T x W] add) if
// grad != nullptr; returns -log P(target)
template <typename T>
double ctc_single(const T* logp, size_t t_len, size_t vocab, const std::vector<size_t>& target,
                  size_t blank, T* grad) {
    const double ninf = -std::numeric_limits<double>::infinity();
    size_t u = target.size();
    if (t_len < ctc_min_frames(target))
        throw CtcInfeasible("ctc: " + std::to_string(t_len) + " frames cannot emit target of length " +
                            std::to_string(u));
    size_t s_len = 2 * u + 1;
    auto ext = [&](size_t s) { return s % 2 == 0 ? blank : target[s / 2]; };
    auto lp = [&](size_t t, size_t s) { return double(logp[t * vocab + ext(s)]); };
    auto can_skip = [&](size_t s) {  // entering odd state s from s-2
        return s % 2 == 1 && s >= 2 && ext(s) != ext(s - 2);
    };
    std::vector<double> alpha(t_len * s_len, ninf), beta(t_len * s_len, ninf);
    alpha[0] = lp(0, 0);
    if (s_len > 1) alpha[1] = lp(0, 1);
    for (size_t t = 1; t < t_len; ++t)
        for (size_t s = 0; s < s_len; ++s) {
            double acc = alpha[(t - 1) * s_len + s];
            if (s >= 1) acc = logsumexp2(acc, alpha[(t - 1) * s_len + s - 1]);
            if (can_skip(s)) acc = logsumexp2(acc, alpha[(t - 1) * s_len + s - 2]);
            alpha[t * s_len + s] = acc == ninf ? ninf : acc + lp(t, s);
        }
    double log_p = alpha[(t_len - 1) * s_len + s_len - 1];
    if (s_len > 1) log_p = logsumexp2(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
    if (grad) {
        beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
        if (s_len > 1) beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
        for (size_t t = t_len - 1; t-- > 0;)
            for (size_t s = 0; s < s_len; ++s) {
                double acc = beta[(t + 1) * s_len + s] + lp(t + 1, s);
                if (s + 1 < s_len)
                    acc = logsumexp2(acc, beta[(t + 1) * s_len + s + 1] + lp(t + 1, s + 1));
                if (s + 2 < s_len && can_skip(s + 2))
                    acc = logsumexp2(acc, beta[(t + 1) * s_len + s + 2] + lp(t + 1, s + 2));
                beta[t * s_len + s] = acc;
            }
        for (size_t t = 0; t < t_len; ++t) {
            // d(-logP)/d logp[t][c] = -sum_{s: ext(s)=c} exp(alpha+beta-logP)
            for (size_t s = 0; s < s_len; ++s) {
                double gamma = alpha[t * s_len + s] + beta[t * s_len + s];
                if (gamma == ninf) continue;
                grad[t * vocab + ext(s)] -= T(std::exp(gamma - log_p));
            }
        }
    }
    return -log_p;
}

}  // namespace detail_ctc

// CTC loss over per-frame log-probabilities. log_probs: [B, Tmax, W]
// (log-softmax rows); per-item frame lengths and token targets. Per
// utterance the loss is the plain path-sum -log P (not length-normalized);
// the batch is averaged. Throws CtcInfeasible when a target cannot fit.
template <typename T>
Tensor<T> ctc_loss(Tensor<T> log_probs, const std::vector<size_t>& frame_lens,
                   const std::vector<std::vector<size_t>>& targets, size_t blank) {
    const Shape& s = log_probs.shape();
    DCMA_CHECK(s.size() == 3, "ctc: log_probs must be [B,T,W]");
    size_t bsz = s[0], tmax = s[1], vocab = s[2];
    DCMA_CHECK(frame_lens.size() == bsz && targets.size() == bsz, "ctc: batch size mismatch");
    const T* lpv = log_probs.value().data();
    double total = 0.0;
    for (size_t b = 0; b < bsz; ++b) {
        DCMA_CHECK(frame_lens[b] >= 1 && frame_lens[b] <= tmax, "ctc: bad frame length");
        for (size_t tok : targets[b])
            DCMA_CHECK(tok < vocab && tok != blank, "ctc: bad target token");
        total += detail_ctc::ctc_single<T>(lpv + b * tmax * vocab, frame_lens[b], vocab,
                                           targets[b], blank, nullptr);
    }
    T loss_val = T(total / double(bsz));
    auto lpn = log_probs.node();
    return detail::make_op<T>(
        Shape{1}, {loss_val}, {log_probs},
        [lpn, frame_lens, targets, blank, bsz, tmax, vocab](Node<T>& self) {
            if (!lpn->requires_grad) return;
            lpn->ensure_grad();
            std::vector<T> g(bsz * tmax * vocab, T(0));
            for (size_t b = 0; b < bsz; ++b)
                detail_ctc::ctc_single<T>(lpn->value.data() + b * tmax * vocab, frame_lens[b],
                                          vocab, targets[b], blank, g.data() + b * tmax * vocab);
            T scale = self.grad[0] / T(bsz);
            for (size_t i = 0; i < g.size(); ++i) lpn->grad[i] += g[i] * scale;
        });
}

// test-only oracle: enumerate every frame labeling, collapse it, and sum
// probabilities of those matching the target; exponential in T
template <typename T>
double ctc_brute_force(const std::vector<T>& log_probs, size_t t_len, size_t vocab,
                       const std::vector<size_t>& target, size_t blank) {
    const double ninf = -std::numeric_limits<double>::infinity();
    double acc = ninf;
    std::vector<size_t> path(t_len, 0);
    size_t total = 1;
    for (size_t t = 0; t < t_len; ++t) total *= vocab;
    for (size_t code = 0; code < total; ++code) {
        size_t c = code;
        for (size_t t = 0; t < t_len; ++t) {
            path[t] = c % vocab;
            c /= vocab;
        }
        std::vector<size_t> collapsed;
        for (size_t t = 0; t < t_len; ++t) {
            if (t > 0 && path[t] == path[t - 1]) continue;
            if (path[t] != blank) collapsed.push_back(path[t]);
        }
        if (collapsed != target) continue;
        double lp = 0.0;
        for (size_t t = 0; t < t_len; ++t) lp += double(log_probs[t * vocab + path[t]]);
        acc = detail_ctc::logsumexp2(acc, lp);
    }
    return -acc;
}

// BERT-style corruption: select_rate of positions are selected; of those,
// mask_frac become the mask symbol, random_frac a random maskable token,
// and the rest stay unchanged. Only selected positions are scored.
struct MaskPolicy {
    double select_rate = 0.15;
    double mask_frac = 0.8;
    double random_frac = 0.1;
};

struct MaskedSentence {
    std::vector<size_t> corrupted;
    std::vector<size_t> selected;  // positions contributing to the loss
};

inline MaskedSentence apply_mask_policy(const std::vector<size_t>& tokens, const MaskPolicy& policy,
                                        size_t mask_id, size_t random_lo, size_t random_hi,
                                        Rng& rng) {
    DCMA_CHECK(!tokens.empty(), "mask policy: empty sequence");
    MaskedSentence out;
    out.corrupted = tokens;
    for (size_t i = 0; i < tokens.size(); ++i)
        if (rng.uniform() < policy.select_rate) out.selected.push_back(i);
    if (out.selected.empty())  // always score at least one position
        out.selected.push_back(rng.uniform_int(tokens.size()));
    for (size_t pos : out.selected) {
        double r = rng.uniform();
        if (r < policy.mask_frac)
            out.corrupted[pos] = mask_id;
        else if (r < policy.mask_frac + policy.random_frac)
            out.corrupted[pos] = random_lo + rng.uniform_int(random_hi - random_lo);
        // else keep the original token
    }
    return out;
}

// label-smoothed cross entropy. logits: [B, L, W]; targets/pad flattened to
// B*L (pad != 0 marks excluded positions). Mean over non-pad positions.
template <typename T>
Tensor<T> label_smoothed_ce(Tensor<T> logits, const std::vector<size_t>& targets,
                            const std::vector<uint8_t>& pad, double smoothing) {
    const Shape& s = logits.shape();
    DCMA_CHECK(s.size() >= 2, "ce: logits must be [..., W]");
    size_t w = s.back();
    size_t rows = logits.size() / w;
    DCMA_CHECK(targets.size() == rows && pad.size() == rows, "ce: target extent mismatch");
    size_t n_valid = 0;
    for (uint8_t p : pad) n_valid += p ? 0 : 1;
    DCMA_CHECK(n_valid > 0, "ce: no unpadded target positions");
    Tensor<T> logp = log_softmax(logits);
    Tensor<T> nll = neg(pick_last(logp, targets));                      // [rows...]
    Tensor<T> uniform = scale(neg(sum_axis(logp, s.size() - 1)), T(1.0 / double(w)));
    Tensor<T> per_pos = add(scale(nll, T(1.0 - smoothing)), scale(uniform, T(smoothing)));
    per_pos = reshape(per_pos, {rows});
    per_pos = masked_fill(per_pos, pad, T(0));
    return scale(sum_all(per_pos), T(1.0 / double(n_valid)));
}

// cross entropy over an explicit list of scored positions (MLM)
template <typename T>
Tensor<T> ce_at_positions(Tensor<T> logits, const std::vector<size_t>& rows,
                          const std::vector<size_t>& targets) {
    const Shape& s = logits.shape();
    size_t w = s.back();
    size_t total_rows = logits.size() / w;
    DCMA_CHECK(!rows.empty() && rows.size() == targets.size(), "ce_at_positions: bad index lists");
    Tensor<T> flat = reshape(logits, {total_rows, w});
    // gather scored rows via one-hot selection against picked log-probs
    Tensor<T> logp = log_softmax(flat);
    std::vector<size_t> ids(total_rows, 0);
    std::vector<uint8_t> pad(total_rows, 1);
    for (size_t i = 0; i < rows.size(); ++i) {
        DCMA_CHECK(rows[i] < total_rows, "ce_at_positions: row out of range");
        ids[rows[i]] = targets[i];
        pad[rows[i]] = 0;
    }
    Tensor<T> nll = neg(pick_last(logp, ids));
    nll = masked_fill(nll, pad, T(0));
    return scale(sum_all(nll), T(1.0 / double(rows.size())));
}

}  // namespace dcma
