#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "dcma/quantizer.hpp"

namespace dcma {

// fraction of (memory, group) positions selecting the same codebook entry
inline double sent_acc(const CodeSelection& a, const CodeSelection& b) {
    DCMA_CHECK(a.m == b.m && a.g == b.g && a.z.size() == b.z.size(),
               "sent_acc: selection shape mismatch");
    DCMA_CHECK(!a.z.empty(), "sent_acc: empty selection");
    size_t match = 0;
    for (size_t i = 0; i < a.z.size(); ++i) match += a.z[i] == b.z[i];
    return double(match) / double(a.z.size());
}

// streaming cosine-similarity aggregation over a record set: memory-level
// averages cos over (record, memory) pairs; sentence-level averages cos of
// mean-pooled memory outputs per record. Zero-norm pairs are skipped and
// counted rather than poisoning the average.
struct SimilarityAccum {
    double mem_sum = 0.0, sent_sum = 0.0;
    size_t mem_n = 0, sent_n = 0, skipped = 0;

    static double cosine(const double* a, const double* b, size_t d, bool* ok) {
        double dot = 0, na = 0, nb = 0;
        // separate accumulation loops; gcc 11's vectorizer miscompiles the
        // fused three-accumulator form at -O3 with AVX enabled
        for (size_t i = 0; i < d; ++i) dot += a[i] * b[i];
        for (size_t i = 0; i < d; ++i) na += a[i] * a[i];
        for (size_t i = 0; i < d; ++i) nb += b[i] * b[i];
        if (na == 0.0 || nb == 0.0) {
            *ok = false;
            return 0.0;
        }
        *ok = true;
        return dot / std::sqrt(na * nb);
    }

    // os, ox: [m * d] memory-module outputs of one record
    void add(const std::vector<double>& os, const std::vector<double>& ox, size_t m, size_t d) {
        DCMA_CHECK(os.size() == m * d && ox.size() == m * d, "similarity: bad record size");
        for (size_t i = 0; i < m; ++i) {
            bool ok;
            double c = cosine(os.data() + i * d, ox.data() + i * d, d, &ok);
            if (ok) {
                mem_sum += c;
                ++mem_n;
            } else {
                ++skipped;
            }
        }
        std::vector<double> ps(d, 0.0), px(d, 0.0);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < d; ++j) {
                ps[j] += os[i * d + j] / double(m);
                px[j] += ox[i * d + j] / double(m);
            }
        bool ok;
        double c = cosine(ps.data(), px.data(), d, &ok);
        if (ok) {
            sent_sum += c;
            ++sent_n;
        } else {
            ++skipped;
        }
    }

    double sim_memory() const { return mem_n == 0 ? 0.0 : mem_sum / double(mem_n); }
    double sim_sentence() const { return sent_n == 0 ? 0.0 : sent_sum / double(sent_n); }
};

// exact positional matches / total reference length
inline double token_accuracy(const std::vector<std::vector<size_t>>& hyps,
                             const std::vector<std::vector<size_t>>& refs) {
    DCMA_CHECK(hyps.size() == refs.size(), "token_accuracy: list length mismatch");
    size_t match = 0, total = 0;
    for (size_t r = 0; r < refs.size(); ++r) {
        total += refs[r].size();
        size_t n = std::min(hyps[r].size(), refs[r].size());
        for (size_t i = 0; i < n; ++i) match += hyps[r][i] == refs[r][i];
    }
    DCMA_CHECK(total > 0, "token_accuracy: empty reference corpus");
    return double(match) / double(total);
}

// corpus BLEU: clipped up-to-4-gram precision, geometric mean, brevity
// penalty; any zero precision gives 0, a self-match gives 100
inline double corpus_bleu(const std::vector<std::vector<size_t>>& hyps,
                          const std::vector<std::vector<size_t>>& refs) {
    DCMA_CHECK(hyps.size() == refs.size(), "bleu: list length mismatch");
    constexpr size_t kMaxN = 4;
    double match[kMaxN] = {0, 0, 0, 0};
    double total[kMaxN] = {0, 0, 0, 0};
    size_t hyp_len = 0, ref_len = 0;
    for (size_t r = 0; r < refs.size(); ++r) {
        const auto& h = hyps[r];
        const auto& f = refs[r];
        hyp_len += h.size();
        ref_len += f.size();
        for (size_t n = 1; n <= kMaxN; ++n) {
            if (h.size() < n) continue;
            std::map<std::vector<size_t>, size_t> rc;
            if (f.size() >= n)
                for (size_t i = 0; i + n <= f.size(); ++i)
                    ++rc[std::vector<size_t>(f.begin() + i, f.begin() + i + n)];
            std::map<std::vector<size_t>, size_t> hc;
            for (size_t i = 0; i + n <= h.size(); ++i)
                ++hc[std::vector<size_t>(h.begin() + i, h.begin() + i + n)];
            for (const auto& [gram, c] : hc) {
                auto it = rc.find(gram);
                match[n - 1] += double(std::min(c, it == rc.end() ? size_t(0) : it->second));
            }
            total[n - 1] += double(h.size() - n + 1);
        }
    }
    if (hyp_len == 0) return 0.0;
    double logsum = 0.0;
    for (size_t n = 0; n < kMaxN; ++n) {
        if (total[n] == 0.0 || match[n] == 0.0) return 0.0;
        logsum += std::log(match[n] / total[n]) / double(kMaxN);
    }
    double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - double(ref_len) / double(hyp_len));
    return 100.0 * bp * std::exp(logsum);
}

// Spearman rank correlation with average ranks for ties
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    DCMA_CHECK(x.size() == y.size() && x.size() >= 2, "spearman: need >= 2 paired values");
    auto ranks = [](const std::vector<double>& v) {
        size_t n = v.size();
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t(0));
        std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            double avg = (double(i) + double(j)) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> rx = ranks(x), ry = ranks(y);
    double mx = 0, my = 0;
    for (size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= double(rx.size());
    my /= double(ry.size());
    double num = 0, dx = 0, dy = 0;
    for (size_t i = 0; i < rx.size(); ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    if (dx == 0.0 || dy == 0.0) return 0.0;
    return num / std::sqrt(dx * dy);
}

// subset boundaries [0,.2,.4,.6,.8,1.0]; 1.0 lands in the top bin
inline size_t sent_acc_bin(double s) {
    DCMA_CHECK(s >= 0.0 && s <= 1.0, "sent_acc out of range");
    return std::min(size_t(4), size_t(s * 5.0));
}

struct SubsetBin {
    size_t count = 0;
    double st_metric = 0.0;
    double mt_metric = 0.0;
};

struct AlignmentReport {
    std::vector<double> per_record_sent_acc;
    SubsetBin bins[5];
    double sim_memory = 0.0, sim_sentence = 0.0;
    size_t sim_skipped = 0;
};

// per-(group, entry) selection counts over a record set
struct CodeUsage {
    size_t groups = 0, entries = 0;
    std::vector<size_t> counts;  // [G * V]

    CodeUsage() = default;
    CodeUsage(size_t g, size_t v) : groups(g), entries(v), counts(g * v, 0) {}

    void add(const CodeSelection& z) {
        DCMA_CHECK(z.g == groups, "code usage: group count mismatch");
        for (size_t mi = 0; mi < z.m; ++mi)
            for (size_t gi = 0; gi < z.g; ++gi) {
                size_t v = z.at(mi, gi);
                DCMA_CHECK(v < entries, "code usage: entry index out of range");
                ++counts[gi * entries + v];
            }
    }

    size_t used_entries() const {
        size_t u = 0;
        for (size_t c : counts) u += c > 0;
        return u;
    }
};

}  // namespace dcma
