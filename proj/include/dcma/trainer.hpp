#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcma/config.hpp"
#include "dcma/model.hpp"

namespace dcma {

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// lr(t) = base * min(t/warmup, sqrt(warmup/t)); peaks at exactly base when
// t == warmup
struct LrSchedule {
    double base = 1e-4;
    size_t warmup = 1;

    double lr(size_t t) const {
        DCMA_CHECK(t >= 1, "lr schedule: step counter starts at 1");
        double td = double(t), wd = double(warmup);
        return base * std::min(td / wd, std::sqrt(wd / td));
    }
};

template <typename T>
struct Adam {
    double beta1 = 0.9, beta2 = 0.98, eps = 1e-8;
    uint64_t t = 0;
    std::vector<std::vector<T>> m, v;

    Adam() = default;
    explicit Adam(const ParamList<T>& params) {
        for (const auto& [name, p] : params) {
            m.emplace_back(p.size(), T(0));
            v.emplace_back(p.size(), T(0));
        }
    }

    // applies one bias-corrected update from the gradients currently stored
    // on the parameters; arithmetic in double, state stored at width T
    void step(ParamList<T>& params, double lr) {
        DCMA_CHECK(params.size() == m.size(), "adam: parameter list changed size");
        ++t;
        double bc1 = 1.0 - std::pow(beta1, double(t));
        double bc2 = 1.0 - std::pow(beta2, double(t));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& p = params[i].second;
            DCMA_CHECK(p.size() == m[i].size(), "adam: moment/parameter shape mismatch");
            const std::vector<T>& g = p.grad();
            std::vector<T>& val = p.value();
            for (size_t j = 0; j < val.size(); ++j) {
                double gj = double(g[j]);
                double mj = beta1 * double(m[i][j]) + (1.0 - beta1) * gj;
                double vj = beta2 * double(v[i][j]) + (1.0 - beta2) * gj * gj;
                m[i][j] = T(mj);
                v[i][j] = T(vj);
                val[j] -= T(lr * (double(m[i][j]) / bc1) /
                            (std::sqrt(double(v[i][j]) / bc2) + eps));
            }
        }
    }
};

template <typename T>
void zero_grads(ParamList<T>& params) {
    for (auto& [name, p] : params) std::fill(p.grad().begin(), p.grad().end(), T(0));
}

// scales gradients in place so the global L2 norm is at most max_norm;
// returns the pre-clip norm (accumulated in double)
template <typename T>
double clip_global_norm(ParamList<T>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params)
        for (T g : p.grad()) sq += double(g) * double(g);
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        T s = T(max_norm / norm);
        for (auto& [name, p] : params)
            for (T& g : p.grad()) g *= s;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

using NamedBlobs = std::vector<std::pair<std::string, std::vector<float>>>;

struct CheckpointData {
    uint64_t config_digest = 0;
    uint8_t stage = 0;  // 0 pretrain, 1 finetune
    uint64_t step = 0;
    uint64_t adam_t = 0;
    std::vector<uint64_t> rng_states;  // fixed order: data, mask, gumbel, dropout, init
    uint64_t asr_epoch = 0, asr_pos = 0;
    uint64_t mt_epoch = 0, mt_pos = 0;
    NamedBlobs params;
    NamedBlobs adam_m, adam_v;
};

namespace ckpt_io {

inline void put_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_str(std::string& s, const std::string& v) {
    put_u32(s, uint32_t(v.size()));
    s += v;
}
inline void put_f32s(std::string& s, const std::vector<float>& v) {
    put_u64(s, v.size());
    for (float f : v) {
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(s, bits);
    }
}
inline void put_blobs(std::string& s, const NamedBlobs& blobs) {
    put_u32(s, uint32_t(blobs.size()));
    for (const auto& [name, data] : blobs) {
        put_str(s, name);
        put_f32s(s, data);
    }
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        DCMA_CHECK(pos + n <= buf.size(), "checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string v = buf.substr(pos, n);
        pos += n;
        return v;
    }
    std::vector<float> f32s() {
        uint64_t n = u64();
        std::vector<float> v(n);
        for (uint64_t i = 0; i < n; ++i) {
            uint32_t bits = u32();
            std::memcpy(&v[i], &bits, 4);
        }
        return v;
    }
    NamedBlobs blobs() {
        uint32_t n = u32();
        NamedBlobs out;
        out.reserve(n);
        for (uint32_t i = 0; i < n; ++i) {
            std::string name = str();
            out.push_back({std::move(name), f32s()});
        }
        return out;
    }
};

}  // namespace ckpt_io

inline constexpr uint32_t kCheckpointVersion = 1;

// atomic: serialize fully, write to <path>.tmp, rename
inline void save_checkpoint(const CheckpointData& c, const std::string& path) {
    using namespace ckpt_io;
    std::string s;
    s += "DCMA";
    put_u32(s, kCheckpointVersion);
    put_u64(s, c.config_digest);
    s.push_back(char(c.stage));
    put_u64(s, c.step);
    put_u64(s, c.adam_t);
    put_u32(s, uint32_t(c.rng_states.size()));
    for (uint64_t st : c.rng_states) put_u64(s, st);
    put_u64(s, c.asr_epoch);
    put_u64(s, c.asr_pos);
    put_u64(s, c.mt_epoch);
    put_u64(s, c.mt_pos);
    put_blobs(s, c.params);
    put_blobs(s, c.adam_m);
    put_blobs(s, c.adam_v);
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        DCMA_CHECK(out.good(), "checkpoint: cannot write " + tmp);
        out.write(s.data(), std::streamsize(s.size()));
        DCMA_CHECK(out.good(), "checkpoint: short write to " + tmp);
    }
    DCMA_CHECK(std::rename(tmp.c_str(), path.c_str()) == 0,
               "checkpoint: cannot rename into place: " + path);
}

// expected_digest == 0 skips the digest guard (checkpoint inspection/averaging
// still validates internally when digests of a set disagree)
inline CheckpointData load_checkpoint(const std::string& path, uint64_t expected_digest = 0) {
    std::ifstream in(path, std::ios::binary);
    DCMA_CHECK(in.good(), "checkpoint: cannot read " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ckpt_io::Reader r{buf};
    r.need(4);
    DCMA_CHECK(buf.compare(0, 4, "DCMA") == 0, "checkpoint: bad magic bytes in " + path);
    r.pos = 4;
    uint32_t version = r.u32();
    DCMA_CHECK(version == kCheckpointVersion,
               "checkpoint: unsupported format version " + std::to_string(version));
    CheckpointData c;
    c.config_digest = r.u64();
    DCMA_CHECK(expected_digest == 0 || c.config_digest == expected_digest,
               "checkpoint: config digest mismatch for " + path);
    r.need(1);
    c.stage = uint8_t(buf[r.pos++]);
    c.step = r.u64();
    c.adam_t = r.u64();
    uint32_t nrng = r.u32();
    for (uint32_t i = 0; i < nrng; ++i) c.rng_states.push_back(r.u64());
    c.asr_epoch = r.u64();
    c.asr_pos = r.u64();
    c.mt_epoch = r.u64();
    c.mt_pos = r.u64();
    c.params = r.blobs();
    c.adam_m = r.blobs();
    c.adam_v = r.blobs();
    DCMA_CHECK(r.pos == buf.size(), "checkpoint: trailing bytes in " + path);
    return c;
}

// elementwise mean of the parameter blobs of several checkpoints
inline NamedBlobs average_checkpoints(const std::vector<std::string>& paths) {
    DCMA_CHECK(!paths.empty(), "average: no checkpoints given");
    NamedBlobs avg;
    std::vector<std::vector<double>> acc;
    uint64_t digest = 0;
    for (size_t k = 0; k < paths.size(); ++k) {
        CheckpointData c = load_checkpoint(paths[k]);
        if (k == 0) {
            digest = c.config_digest;
            for (auto& [name, data] : c.params) {
                acc.emplace_back(data.begin(), data.end());
                avg.push_back({name, {}});
            }
        } else {
            DCMA_CHECK(c.config_digest == digest, "average: mixed config digests");
            DCMA_CHECK(c.params.size() == avg.size(), "average: parameter sets differ");
            for (size_t i = 0; i < c.params.size(); ++i) {
                DCMA_CHECK(c.params[i].first == avg[i].first &&
                               c.params[i].second.size() == acc[i].size(),
                           "average: parameter sets differ");
                for (size_t j = 0; j < acc[i].size(); ++j)
                    acc[i][j] += double(c.params[i].second[j]);
            }
        }
    }
    for (size_t i = 0; i < avg.size(); ++i) {
        avg[i].second.resize(acc[i].size());
        for (size_t j = 0; j < acc[i].size(); ++j)
            avg[i].second[j] = float(acc[i][j] / double(paths.size()));
    }
    return avg;
}

template <typename T>
void apply_params(DcmaModel<T>& model, const NamedBlobs& blobs) {
    ParamList<T> params = model.parameters();
    std::map<std::string, Tensor<T>*> by_name;
    for (auto& [name, p] : params) by_name[name] = &p;
    DCMA_CHECK(blobs.size() == params.size(), "checkpoint: parameter count mismatch");
    for (const auto& [name, data] : blobs) {
        auto it = by_name.find(name);
        DCMA_CHECK(it != by_name.end(), "checkpoint: unknown parameter " + name);
        DCMA_CHECK(it->second->size() == data.size(),
                   "checkpoint: shape mismatch for parameter " + name);
        std::vector<T>& v = it->second->value();
        for (size_t j = 0; j < data.size(); ++j) v[j] = T(data[j]);
    }
}

template <typename T>
NamedBlobs extract_params(const ParamList<T>& params) {
    NamedBlobs out;
    for (const auto& [name, p] : params) {
        std::vector<float> data(p.size());
        const std::vector<T>& v = p.value();
        for (size_t j = 0; j < v.size(); ++j) data[j] = float(v[j]);
        out.push_back({name, std::move(data)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

enum class Stage { Pretrain, Finetune };

template <typename T>
class Trainer {
public:
    Trainer(const RunConfig& cfg, DcmaModel<T>& model, Stage stage, const Corpus* asr_train,
            const Corpus* mt_train)
        : cfg_(cfg),
          model_(model),
          stage_(stage),
          rngs_(RngSet::from_seed(cfg.seed)),
          trainable_(model.trainable_parameters(stage == Stage::Pretrain)),
          adam_(trainable_),
          sched_{stage == Stage::Pretrain ? cfg.pretrain_lr : cfg.finetune_lr,
                 stage == Stage::Pretrain ? cfg.pretrain_warmup : cfg.finetune_warmup},
          tau_sched_{cfg.tau_start, cfg.tau_floor, cfg.tau_decay},
          total_(stage == Stage::Pretrain ? cfg.pretrain_updates : cfg.finetune_updates) {
        DCMA_CHECK(mt_train != nullptr, "trainer: MT corpus required");
        Rng batch_seed(cfg.seed);
        mt_stream_ =
            BatchStream(mt_train, BatchType::Mt, cfg.mt_max_sentences,
                        batch_seed.fork(stage == Stage::Pretrain ? "mt.pre" : "mt.ft").state());
        if (stage == Stage::Finetune) {
            DCMA_CHECK(asr_train != nullptr, "trainer: ASR corpus required for finetuning");
            asr_stream_ = BatchStream(asr_train, BatchType::Asr, cfg.asr_max_frames,
                                      batch_seed.fork("asr.ft").state());
        }
    }

    // start finetuning from pretrained weights (parameters only)
    void init_params(const NamedBlobs& blobs) { apply_params(model_, blobs); }

    void resume(const CheckpointData& c) {
        DCMA_CHECK(c.stage == uint8_t(stage_ == Stage::Finetune), "checkpoint: stage mismatch");
        apply_params(model_, c.params);
        step_ = c.step;
        adam_.t = c.adam_t;
        restore_moments(c.adam_m, adam_.m);
        restore_moments(c.adam_v, adam_.v);
        DCMA_CHECK(c.rng_states.size() == 5, "checkpoint: unexpected rng state count");
        rngs_.data.set_state(c.rng_states[0]);
        rngs_.mask.set_state(c.rng_states[1]);
        rngs_.gumbel.set_state(c.rng_states[2]);
        rngs_.dropout.set_state(c.rng_states[3]);
        rngs_.init.set_state(c.rng_states[4]);
        mt_stream_.seek(c.mt_epoch, c.mt_pos);
        if (stage_ == Stage::Finetune) asr_stream_.seek(c.asr_epoch, c.asr_pos);
    }

    // runs (up to) max_steps further updates; 0 means run to the stage budget.
    // Writes rolling checkpoints and appends one metrics line per step.
    void run(size_t max_steps = 0) {
        namespace fs = std::filesystem;
        fs::create_directories(cfg_.out_dir);
        cfg_.save(cfg_.out_dir + "/config.json");
        std::ofstream log(cfg_.out_dir + "/metrics.jsonl", std::ios::app);
        DCMA_CHECK(log.good(), "trainer: cannot open metrics log");
        size_t until = max_steps == 0 ? total_ : std::min(total_, step_ + max_steps);
        while (step_ < until) {
            ++step_;
            train_step(log);
            if (step_ % cfg_.checkpoint_every == 0 || step_ == total_) save_rolling();
        }
    }

    uint64_t step() const { return step_; }
    const DcmaModel<T>& model() const { return model_; }

    CheckpointData snapshot() const {
        CheckpointData c;
        c.config_digest = cfg_.digest();
        c.stage = uint8_t(stage_ == Stage::Finetune);
        c.step = step_;
        c.adam_t = adam_.t;
        c.rng_states = {rngs_.data.state(), rngs_.mask.state(), rngs_.gumbel.state(),
                        rngs_.dropout.state(), rngs_.init.state()};
        c.mt_epoch = mt_stream_.epoch();
        c.mt_pos = mt_stream_.pos();
        if (stage_ == Stage::Finetune) {
            c.asr_epoch = asr_stream_.epoch();
            c.asr_pos = asr_stream_.pos();
        }
        c.params = extract_params(model_.parameters());
        c.adam_m = moments_blobs(adam_.m);
        c.adam_v = moments_blobs(adam_.v);
        return c;
    }

    std::vector<std::string> checkpoint_paths() const { return kept_; }

private:
    void train_step(std::ofstream& log) {
        // finetune alternates strictly: odd steps ASR, even steps MT
        bool asr = stage_ == Stage::Finetune && step_ % 2 == 1;
        double tau = stage_ == Stage::Pretrain ? cfg_.pretrain_tau : tau_sched_.tau(step_ - 1);
        FwdCtx<T> ctx{true, T(cfg_.dropout), &rngs_.dropout};
        nlohmann::json losses;
        Tensor<T> loss;
        if (asr) {
            Batch b = asr_stream_.next();
            auto al = model_.forward_asr(b, rngs_, ctx, !cfg_.no_align_loss);
            loss = cfg_.no_align_loss ? scale(al.ctc, T(cfg_.alpha))
                                      : add(al.align, scale(al.ctc, T(cfg_.alpha)));
            losses["ctc"] = double(al.ctc.item());
            losses["align"] = double(al.align.item());
        } else {
            Batch b = mt_stream_.next();
            auto ml = model_.forward_mt(b, tau, rngs_, ctx);
            loss = add(ml.mt, scale(ml.mlm, T(cfg_.beta)));
            losses["mt"] = double(ml.mt.item());
            losses["mlm"] = double(ml.mlm.item());
        }
        double total = double(loss.item());
        bool skipped = false;
        double gnorm = 0.0;
        if (!std::isfinite(total)) {
            skipped = true;
            std::cerr << "step " << step_ << ": non-finite loss, update skipped\n";
        } else {
            backward(loss);
            gnorm = clip_global_norm(trainable_, cfg_.clip_norm);
            if (!std::isfinite(gnorm)) {
                skipped = true;
                std::cerr << "step " << step_ << ": non-finite gradient, update skipped\n";
            } else {
                adam_.step(trainable_, sched_.lr(step_));
            }
        }
        zero_grads(trainable_);
        nlohmann::json line = {
            {"step", step_},
            {"stage", stage_ == Stage::Pretrain ? "pretrain" : "finetune"},
            {"batch_type", asr ? "asr" : "mt"},
            {"losses", losses},
            {"loss", total},
            {"lr", sched_.lr(step_)},
            {"tau", tau},
            {"grad_norm", gnorm},
        };
        if (skipped) line["skipped"] = true;
        log << line.dump() << "\n";
        log.flush();
    }

    void save_rolling() {
        std::string path = cfg_.out_dir + "/ckpt-" + std::to_string(step_) + ".bin";
        save_checkpoint(snapshot(), path);
        kept_.push_back(path);
        while (kept_.size() > cfg_.checkpoint_keep) {
            std::error_code ec;
            std::filesystem::remove(kept_.front(), ec);
            kept_.erase(kept_.begin());
        }
    }

    NamedBlobs moments_blobs(const std::vector<std::vector<T>>& mom) const {
        NamedBlobs out;
        for (size_t i = 0; i < trainable_.size(); ++i) {
            std::vector<float> data(mom[i].begin(), mom[i].end());
            out.push_back({trainable_[i].first, std::move(data)});
        }
        return out;
    }

    void restore_moments(const NamedBlobs& blobs, std::vector<std::vector<T>>& mom) {
        DCMA_CHECK(blobs.size() == trainable_.size(), "checkpoint: optimizer state mismatch");
        for (size_t i = 0; i < blobs.size(); ++i) {
            DCMA_CHECK(blobs[i].first == trainable_[i].first &&
                           blobs[i].second.size() == mom[i].size(),
                       "checkpoint: optimizer state mismatch for " + blobs[i].first);
            for (size_t j = 0; j < mom[i].size(); ++j) mom[i][j] = T(blobs[i].second[j]);
        }
    }

    RunConfig cfg_;
    DcmaModel<T>& model_;
    Stage stage_;
    RngSet rngs_;
    ParamList<T> trainable_;
    Adam<T> adam_;
    LrSchedule sched_;
    TemperatureSchedule tau_sched_;
    size_t total_ = 0;
    uint64_t step_ = 0;
    BatchStream mt_stream_, asr_stream_;
    std::vector<std::string> kept_;
};

}  // namespace dcma
