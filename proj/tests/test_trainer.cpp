#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "dcma/trainer.hpp"

using namespace dcma;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& name) {
    std::string d = (fs::temp_directory_path() / ("dcma_trainer_" + name)).string();
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RunConfig tiny_cfg() {
    RunConfig c;
    c.d = 8;
    c.heads = 2;
    c.ffn = 16;
    c.enc_layers = 1;
    c.dec_layers = 1;
    c.memories = 2;
    c.groups = 2;
    c.entries = 4;
    c.logit_hidden = 8;
    c.conv_width = 8;
    c.vocab_surface = 6;
    c.feat_dim = 4;
    c.sent_min = 3;
    c.sent_max = 5;
    c.fpt_min = 4;
    c.fpt_max = 6;
    c.asr_n = 24;
    c.mt_n = 24;
    c.st_n = 2;
    c.dev_n = 2;
    c.mt_len_min = 3;
    c.mt_len_max = 6;
    c.asr_max_frames = 120;
    c.mt_max_sentences = 4;
    c.pretrain_updates = 1000;
    c.finetune_updates = 1000;
    c.checkpoint_every = 1000000;
    c.seed = 21;
    return c;
}

// generated once, shared by the trainer tests
const std::string& tiny_data() {
    static std::string dir = [] {
        std::string d = tmp_dir("data");
        RunConfig c = tiny_cfg();
        generate_corpora(c.seed, c.make_language(), c.gen_sizes(), d);
        return d;
    }();
    return dir;
}

std::vector<std::vector<double>> grads_of(ParamList<double>& ps) {
    std::vector<std::vector<double>> out;
    for (auto& [name, p] : ps) out.push_back(p.grad());
    return out;
}

CheckpointData small_ckpt(uint64_t digest, const std::vector<float>& theta) {
    CheckpointData c;
    c.config_digest = digest;
    c.stage = 1;
    c.step = 42;
    c.adam_t = 42;
    c.rng_states = {1, 2, 3, 4, 5};
    c.asr_epoch = 1;
    c.asr_pos = 2;
    c.mt_epoch = 3;
    c.mt_pos = 4;
    c.params = {{"w", theta}, {"b", {0.25f, -0.5f}}};
    c.adam_m = {{"w", std::vector<float>(theta.size(), 0.1f)}, {"b", {0.0f, 0.0f}}};
    c.adam_v = {{"w", std::vector<float>(theta.size(), 0.2f)}, {"b", {0.0f, 0.0f}}};
    return c;
}

}  // namespace

TEST_CASE("adam matches a 10-step scalar oracle") {
    using D = Tensor<double>;
    ParamList<double> params;
    params.push_back({"theta", D::param({1}, {0.5})});
    Adam<double> adam(params);
    double lr = 0.1;

    // independent oracle: the standard bias-corrected update on f = theta^2/2
    double theta = 0.5, m = 0, v = 0;
    for (int t = 1; t <= 10; ++t) {
        double g = theta;
        m = 0.9 * m + 0.1 * g;
        v = 0.98 * v + 0.02 * g * g;
        double mh = m / (1.0 - std::pow(0.9, t));
        double vh = v / (1.0 - std::pow(0.98, t));
        theta -= lr * mh / (std::sqrt(vh) + 1e-8);

        params[0].second.grad()[0] = params[0].second.value()[0];
        adam.step(params, lr);
        zero_grads(params);
        CHECK(params[0].second.value()[0] == doctest::Approx(theta).epsilon(1e-10));
    }
    CHECK(adam.t == 10);
}

TEST_CASE("lr schedule peaks exactly at warmup and decays as 1/sqrt(t)") {
    LrSchedule s{7e-4, 400};
    CHECK(s.lr(400) == 7e-4);  // exact
    CHECK(s.lr(200) == doctest::Approx(3.5e-4).epsilon(1e-12));
    CHECK(s.lr(1600) == doctest::Approx(3.5e-4).epsilon(1e-12));
    CHECK(s.lr(399) < s.lr(400));
    CHECK(s.lr(401) < s.lr(400));
    CHECK_THROWS_AS((void)s.lr(0), std::runtime_error);
}

TEST_CASE("global norm clip scales to the bound and reports the pre-clip norm") {
    using D = Tensor<double>;
    ParamList<double> params;
    params.push_back({"a", D::param({2}, {0.0, 0.0})});
    params.push_back({"b", D::param({1}, {0.0})});
    params[0].second.grad() = {3.0, 4.0};
    params[1].second.grad() = {12.0};  // norm = 13
    double pre = clip_global_norm(params, 5.0);
    CHECK(pre == doctest::Approx(13.0).epsilon(1e-12));
    double sq = 0;
    for (auto& [n, p] : params)
        for (double g : p.grad()) sq += g * g;
    CHECK(std::sqrt(sq) == doctest::Approx(5.0).epsilon(1e-9));
    CHECK(params[0].second.grad()[0] == doctest::Approx(3.0 * 5.0 / 13.0).epsilon(1e-12));

    params[0].second.grad() = {0.1, 0.1};
    params[1].second.grad() = {0.1};
    double small = clip_global_norm(params, 5.0);
    CHECK(small == doctest::Approx(std::sqrt(0.03)).epsilon(1e-12));
    CHECK(params[0].second.grad()[0] == 0.1);  // untouched below the bound
}

TEST_CASE("finetune ASR gradient is additive: grad(align) + alpha grad(ctc)") {
    RunConfig cfg = tiny_cfg();
    DcmaModel<double> model(cfg, RngSet::from_seed(3).init);
    RngSet rngs = RngSet::from_seed(4);
    FwdCtx<double> ctx;  // inference context: deterministic forward

    Batch b;
    b.type = BatchType::Asr;
    b.t_max = 16;
    b.feat_dim = 4;
    b.frame_lens = {16, 12};
    b.transcripts = {{1, 2, 3}, {0, 4}};
    Rng rng(5);
    b.frames.resize(2 * 16 * 4);
    for (auto& x : b.frames) x = float(rng.gaussian());
    for (size_t j = 12 * 4; j < 16 * 4; ++j) b.frames[16 * 4 * 1 + j] = 0.0f;  // pad row zeroing

    ParamList<double> params = model.parameters();
    double alpha = 0.7;

    auto al = model.forward_asr(b, rngs, ctx, true);
    backward(add(al.align, scale(al.ctc, alpha)));
    auto g_all = grads_of(params);
    zero_grads(params);

    auto al2 = model.forward_asr(b, rngs, ctx, true);
    backward(al2.align);
    auto g_align = grads_of(params);
    zero_grads(params);

    auto al3 = model.forward_asr(b, rngs, ctx, true);
    backward(al3.ctc);
    auto g_ctc = grads_of(params);
    zero_grads(params);

    CHECK(al.align.item() == al2.align.item());  // deterministic replay
    CHECK(al.ctc.item() == al3.ctc.item());
    for (size_t i = 0; i < params.size(); ++i)
        for (size_t j = 0; j < g_all[i].size(); ++j) {
            double want = g_align[i][j] + alpha * g_ctc[i][j];
            CHECK(std::abs(g_all[i][j] - want) <=
                  1e-10 * std::max(1.0, std::abs(want)));
        }
}

TEST_CASE("checkpoint round trip preserves every field and re-saves byte-identically") {
    std::string dir = tmp_dir("ckpt");
    CheckpointData c = small_ckpt(0xabcdef, {1.0f, 2.0f, 3.0f});
    save_checkpoint(c, dir + "/a.bin");
    CHECK(!fs::exists(dir + "/a.bin.tmp"));
    CheckpointData d = load_checkpoint(dir + "/a.bin", 0xabcdef);
    CHECK(d.config_digest == c.config_digest);
    CHECK(d.stage == c.stage);
    CHECK(d.step == c.step);
    CHECK(d.adam_t == c.adam_t);
    CHECK(d.rng_states == c.rng_states);
    CHECK(d.asr_epoch == c.asr_epoch);
    CHECK(d.asr_pos == c.asr_pos);
    CHECK(d.mt_epoch == c.mt_epoch);
    CHECK(d.mt_pos == c.mt_pos);
    CHECK(d.params == c.params);
    CHECK(d.adam_m == c.adam_m);
    CHECK(d.adam_v == c.adam_v);
    save_checkpoint(d, dir + "/b.bin");
    CHECK(slurp(dir + "/a.bin") == slurp(dir + "/b.bin"));
}

TEST_CASE("corrupt checkpoints fail with distinct errors") {
    std::string dir = tmp_dir("ckpt_bad");
    CheckpointData c = small_ckpt(7, {1.0f});
    save_checkpoint(c, dir + "/good.bin");
    std::string bytes = slurp(dir + "/good.bin");

    auto write = [&](const std::string& name, const std::string& data) {
        std::ofstream out(dir + "/" + name, std::ios::binary);
        out.write(data.data(), std::streamsize(data.size()));
        return dir + "/" + name;
    };

    std::string magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_WITH_AS((void)load_checkpoint(write("magic.bin", magic)),
                         doctest::Contains("bad magic"), std::runtime_error);

    std::string version = bytes;
    version[4] = 9;
    CHECK_THROWS_WITH_AS((void)load_checkpoint(write("version.bin", version)),
                         doctest::Contains("unsupported format version"), std::runtime_error);

    CHECK_THROWS_WITH_AS(
        (void)load_checkpoint(write("trunc.bin", bytes.substr(0, bytes.size() - 3))),
        doctest::Contains("truncated"), std::runtime_error);

    CHECK_THROWS_WITH_AS((void)load_checkpoint(write("trail.bin", bytes + "zz")),
                         doctest::Contains("trailing bytes"), std::runtime_error);

    CHECK_THROWS_WITH_AS((void)load_checkpoint(dir + "/good.bin", 8),
                         doctest::Contains("digest mismatch"), std::runtime_error);
    CHECK_NOTHROW((void)load_checkpoint(dir + "/good.bin", 7));
    CHECK_NOTHROW((void)load_checkpoint(dir + "/good.bin"));  // 0 skips the guard
}

TEST_CASE("checkpoint averaging identities") {
    std::string dir = tmp_dir("avg");
    std::vector<float> theta = {1.5f, -2.0f, 0.25f};
    CheckpointData pos = small_ckpt(7, theta);
    CheckpointData neg = small_ckpt(7, {-1.5f, 2.0f, -0.25f});
    save_checkpoint(pos, dir + "/p1.bin");
    save_checkpoint(pos, dir + "/p2.bin");
    save_checkpoint(pos, dir + "/p3.bin");
    save_checkpoint(neg, dir + "/n.bin");

    NamedBlobs one = average_checkpoints({dir + "/p1.bin"});
    CHECK(one == pos.params);
    NamedBlobs same = average_checkpoints({dir + "/p1.bin", dir + "/p2.bin", dir + "/p3.bin"});
    CHECK(same == pos.params);
    NamedBlobs zero = average_checkpoints({dir + "/p1.bin", dir + "/n.bin"});
    for (float x : zero[0].second) CHECK(x == 0.0f);

    CheckpointData other = small_ckpt(8, theta);
    save_checkpoint(other, dir + "/other.bin");
    CHECK_THROWS_WITH_AS((void)average_checkpoints({dir + "/p1.bin", dir + "/other.bin"}),
                         doctest::Contains("mixed config digests"), std::runtime_error);
}

TEST_CASE("interrupted finetuning resumes bit-exactly") {
    RunConfig cfg = tiny_cfg();
    cfg.data_dir = tiny_data();
    Corpus asr = load_split(cfg.data_dir, "asr-train");
    Corpus mt = load_split(cfg.data_dir, "mt-train");

    // uninterrupted reference: 6 steps
    RunConfig cfg_a = cfg;
    cfg_a.out_dir = tmp_dir("resume_a");
    DcmaModel<float> model_a(cfg_a, RngSet::from_seed(cfg.seed).init);
    Trainer<float> a(cfg_a, model_a, Stage::Finetune, &asr, &mt);
    a.run(6);

    // interrupted: 3 steps, snapshot, fresh trainer resumes for 3 more
    RunConfig cfg_b = cfg;
    cfg_b.out_dir = tmp_dir("resume_b");
    DcmaModel<float> model_b(cfg_b, RngSet::from_seed(cfg.seed).init);
    Trainer<float> b(cfg_b, model_b, Stage::Finetune, &asr, &mt);
    b.run(3);
    std::string mid = cfg_b.out_dir + "/mid.bin";
    save_checkpoint(b.snapshot(), mid);

    RunConfig cfg_c = cfg;
    cfg_c.out_dir = tmp_dir("resume_c");
    DcmaModel<float> model_c(cfg_c, RngSet::from_seed(cfg.seed + 99).init);  // junk init
    Trainer<float> c(cfg_c, model_c, Stage::Finetune, &asr, &mt);
    c.resume(load_checkpoint(mid, cfg.digest()));
    CHECK(c.step() == 3);
    c.run(3);

    CheckpointData sa = a.snapshot(), sc = c.snapshot();
    CHECK(sa.step == 6);
    CHECK(sa.params == sc.params);  // bit-exact
    CHECK(sa.adam_m == sc.adam_m);
    CHECK(sa.adam_v == sc.adam_v);
    CHECK(sa.adam_t == sc.adam_t);
    CHECK(sa.rng_states == sc.rng_states);
    CHECK(sa.asr_epoch == sc.asr_epoch);
    CHECK(sa.asr_pos == sc.asr_pos);
    CHECK(sa.mt_epoch == sc.mt_epoch);
    CHECK(sa.mt_pos == sc.mt_pos);

    // pretrain snapshots cannot seed a finetune resume
    CheckpointData wrong = sa;
    wrong.stage = 0;
    CHECK_THROWS_WITH_AS(c.resume(wrong), doctest::Contains("stage mismatch"),
                         std::runtime_error);
}

TEST_CASE("finetuning alternates ASR and MT batches strictly") {
    RunConfig cfg = tiny_cfg();
    cfg.data_dir = tiny_data();
    cfg.out_dir = tmp_dir("alt");
    Corpus asr = load_split(cfg.data_dir, "asr-train");
    Corpus mt = load_split(cfg.data_dir, "mt-train");
    DcmaModel<float> model(cfg, RngSet::from_seed(cfg.seed).init);
    Trainer<float> t(cfg, model, Stage::Finetune, &asr, &mt);
    t.run(4);

    std::ifstream log(cfg.out_dir + "/metrics.jsonl");
    std::string line;
    std::vector<std::string> types;
    std::vector<double> taus;
    while (std::getline(log, line)) {
        auto j = nlohmann::json::parse(line);
        types.push_back(j.at("batch_type"));
        taus.push_back(j.at("tau"));
        CHECK(j.at("stage") == "finetune");
        CHECK(j.contains("losses"));
        CHECK(j.contains("lr"));
        CHECK(j.contains("grad_norm"));
    }
    CHECK(types == std::vector<std::string>{"asr", "mt", "asr", "mt"});
    // finetuning anneals the temperature from tau_start
    CHECK(taus[0] == cfg.tau_start);
    CHECK(taus[3] < taus[0]);
    CHECK(taus[3] >= cfg.tau_floor);
}

TEST_CASE("pretraining freezes the acoustic stack and never consumes ASR data") {
    RunConfig cfg = tiny_cfg();
    cfg.data_dir = tiny_data();
    cfg.out_dir = tmp_dir("pre");
    Corpus mt = load_split(cfg.data_dir, "mt-train");
    DcmaModel<float> model(cfg, RngSet::from_seed(cfg.seed).init);
    NamedBlobs before = extract_params(model.parameters());
    Trainer<float> t(cfg, model, Stage::Pretrain, nullptr, &mt);  // no ASR corpus at all
    t.run(3);
    NamedBlobs after = extract_params(model.parameters());
    bool non_acoustic_changed = false;
    for (size_t i = 0; i < before.size(); ++i) {
        CHECK(before[i].first == after[i].first);
        bool acoustic = before[i].first.rfind("acoustic.", 0) == 0;
        if (acoustic) {
            CHECK(before[i].second == after[i].second);  // bit-identical
        } else if (before[i].second != after[i].second) {
            non_acoustic_changed = true;
        }
    }
    CHECK(non_acoustic_changed);

    std::ifstream log(cfg.out_dir + "/metrics.jsonl");
    std::string line;
    size_t lines = 0;
    while (std::getline(log, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.at("batch_type") == "mt");
        CHECK(j.at("tau") == cfg.pretrain_tau);
        ++lines;
    }
    CHECK(lines == 3);
}

TEST_CASE("rolling checkpoints keep only the newest files") {
    RunConfig cfg = tiny_cfg();
    cfg.data_dir = tiny_data();
    cfg.out_dir = tmp_dir("roll");
    cfg.checkpoint_every = 2;
    cfg.checkpoint_keep = 3;
    Corpus mt = load_split(cfg.data_dir, "mt-train");
    DcmaModel<float> model(cfg, RngSet::from_seed(cfg.seed).init);
    Trainer<float> t(cfg, model, Stage::Pretrain, nullptr, &mt);
    t.run(10);
    for (int s : {2, 4}) CHECK(!fs::exists(cfg.out_dir + "/ckpt-" + std::to_string(s) + ".bin"));
    for (int s : {6, 8, 10}) CHECK(fs::exists(cfg.out_dir + "/ckpt-" + std::to_string(s) + ".bin"));
}

TEST_CASE("a non-finite loss skips the update but still counts the step") {
    RunConfig cfg = tiny_cfg();
    cfg.data_dir = tiny_data();
    cfg.out_dir = tmp_dir("skip");
    Corpus mt = load_split(cfg.data_dir, "mt-train");
    DcmaModel<float> model(cfg, RngSet::from_seed(cfg.seed).init);
    ParamList<float> params = model.parameters();
    params[0].second.value()[0] = std::numeric_limits<float>::quiet_NaN();
    NamedBlobs poisoned = extract_params(model.parameters());
    Trainer<float> t(cfg, model, Stage::Pretrain, nullptr, &mt);
    t.run(1);
    CHECK(t.step() == 1);
    std::ifstream log(cfg.out_dir + "/metrics.jsonl");
    std::string line;
    std::getline(log, line);
    auto j = nlohmann::json::parse(line);
    CHECK(j.value("skipped", false));
    // the optimizer never ran: parameters are exactly as poisoned
    NamedBlobs after = extract_params(model.parameters());
    for (size_t i = 0; i < poisoned.size(); ++i)
        for (size_t k = 0; k < poisoned[i].second.size(); ++k) {
            float a = poisoned[i].second[k], b = after[i].second[k];
            CHECK((a == b || (std::isnan(a) && std::isnan(b))));
        }
}
