// dcma: dataset generation, two-stage training, evaluation, analysis and
// sweeps for the discrete cross-modal alignment model. One config file
// drives everything; flags override config values.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "dcma/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dcma;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;  // key=value config overrides
    std::string data_dir, out_dir;
    int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "config file (JSON); defaults apply if omitted");
    cmd->add_option("--set", o.sets, "config override key=value (repeatable; flags win)")
        ->expected(-1);
    cmd->add_option("--data-dir", o.data_dir, "dataset directory");
    cmd->add_option("--out-dir", o.out_dir, "output directory");
    cmd->add_option("--seed", o.seed, "master seed");
}

RunConfig resolve_config(const CommonOpts& o) {
    json j = json::object();
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        DCMA_CHECK(in.good(), "cannot read config " + o.config_path);
        j = json::parse(in);
    }
    for (const std::string& kv : o.sets) {
        size_t eq = kv.find('=');
        DCMA_CHECK(eq != std::string::npos, "--set expects key=value, got '" + kv + "'");
        std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        // parse value as JSON when possible so numbers/bools type correctly
        try {
            j[key] = json::parse(val);
        } catch (const json::exception&) {
            j[key] = val;
        }
    }
    if (!o.data_dir.empty()) j["data_dir"] = o.data_dir;
    if (!o.out_dir.empty()) j["out_dir"] = o.out_dir;
    if (o.seed >= 0) j["seed"] = uint64_t(o.seed);
    return RunConfig::from_json_text(j.dump());
}

void echo_config(const RunConfig& cfg, const std::string& dir, const char* name) {
    fs::create_directories(dir);
    cfg.save(dir + "/" + name);
}

int cmd_gen_data(const CommonOpts& o) {
    RunConfig cfg = resolve_config(o);
    ToyLanguage lang = cfg.make_language();
    generate_corpora(cfg.seed, lang, cfg.gen_sizes(), cfg.data_dir);
    echo_config(cfg, cfg.data_dir, "gen-config.json");
    Corpus asr = load_split(cfg.data_dir, "asr-train");
    Corpus mt = load_split(cfg.data_dir, "mt-train");
    Corpus dev = load_split(cfg.data_dir, "st-dev");
    Corpus test = load_split(cfg.data_dir, "st-test");
    bool disjoint = disjointness_audit(asr, mt, dev, test);
    std::cout << "generated " << asr.asr.size() << " asr, " << mt.mt.size() << " mt, "
              << dev.st.size() << " st-dev, " << test.st.size() << " st-test records in "
              << cfg.data_dir << "\n"
              << "disjointness audit: " << (disjoint ? "pass" : "FAIL") << "\n";
    DCMA_CHECK(disjoint, "generated corpora violate the disjointness contract");
    return 0;
}

int cmd_pretrain(const CommonOpts& o, const std::string& resume) {
    RunConfig cfg = resolve_config(o);
    Corpus mt = load_split(cfg.data_dir, "mt-train");
    pipeline::Model model = pipeline::build_model(cfg);
    Trainer<float> tr(cfg, model, Stage::Pretrain, nullptr, &mt);
    if (!resume.empty()) tr.resume(load_checkpoint(resume, cfg.digest()));
    tr.run();
    std::cout << "pretrain finished at step " << tr.step() << "; checkpoints in " << cfg.out_dir
              << "\n";
    return 0;
}

int cmd_finetune(const CommonOpts& o, const std::string& init, const std::string& resume) {
    RunConfig cfg = resolve_config(o);
    Corpus asr_full = load_split(cfg.data_dir, "asr-train");
    Corpus mt = load_split(cfg.data_dir, "mt-train");
    Corpus asr = pipeline::asr_subset(asr_full, cfg.asr_fraction);
    pipeline::Model model = pipeline::build_model(cfg);
    Trainer<float> tr(cfg, model, Stage::Finetune, &asr, &mt);
    if (!init.empty()) tr.init_params(load_checkpoint(init).params);
    if (!resume.empty()) tr.resume(load_checkpoint(resume, cfg.digest()));
    tr.run();
    std::cout << "finetune finished at step " << tr.step() << "; checkpoints in " << cfg.out_dir
              << "\n";
    return 0;
}

pipeline::Model model_from_dir(const RunConfig& cfg, const std::string& ckpt_dir,
                               size_t avg_last) {
    pipeline::Model model = pipeline::build_model(cfg);
    apply_params(model, pipeline::averaged_from_dir(ckpt_dir, avg_last));
    return model;
}

int cmd_evaluate(const CommonOpts& o, const std::string& ckpt_dir, size_t avg_last,
                 const std::string& split, size_t beam_override, const std::string& mode) {
    RunConfig cfg = resolve_config(o);
    size_t beam = beam_override > 0 ? beam_override : cfg.beam;
    size_t avg = avg_last > 0 ? avg_last : cfg.avg_last;
    pipeline::Model model = model_from_dir(cfg, ckpt_dir, avg);
    Corpus corpus = load_split(cfg.data_dir, split);
    pipeline::EvalResult r = mode == "mt" ? pipeline::evaluate_mt(model, corpus, beam)
                                          : pipeline::evaluate_st(model, corpus, beam);
    json out = {{"split", split},   {"mode", mode},
                {"beam", beam},     {"avg_last", avg},
                {"records", r.records}, {"token_accuracy", r.token_accuracy},
                {"bleu", r.bleu}};
    echo_config(cfg, cfg.out_dir, "eval-config.json");
    std::ofstream(cfg.out_dir + "/eval-" + mode + "-" + split + ".json") << out.dump(2) << "\n";
    std::cout << "split " << split << " (" << mode << ", beam " << beam << ", " << r.records
              << " records)\n"
              << "token_accuracy " << r.token_accuracy << "\nbleu " << r.bleu << "\n";
    return 0;
}

int cmd_analyze(const CommonOpts& o, const std::string& ckpt_dir, size_t avg_last,
                const std::string& split, size_t beam_override) {
    RunConfig cfg = resolve_config(o);
    size_t beam = beam_override > 0 ? beam_override : cfg.beam;
    size_t avg = avg_last > 0 ? avg_last : cfg.avg_last;
    pipeline::Model model = model_from_dir(cfg, ckpt_dir, avg);
    Corpus corpus = load_split(cfg.data_dir, split);
    CodeUsage usage(cfg.groups, cfg.entries);
    AlignmentReport rep = pipeline::analyze_model(model, corpus, beam, &usage);
    json bins = json::array();
    std::cout << "bin      count  st_acc  mt_acc\n";
    static const char* kRanges[5] = {"[0,.2)", "[.2,.4)", "[.4,.6)", "[.6,.8)", "[.8,1]"};
    for (size_t i = 0; i < 5; ++i) {
        bins.push_back({{"range", kRanges[i]},
                        {"count", rep.bins[i].count},
                        {"st_token_accuracy", rep.bins[i].st_metric},
                        {"mt_token_accuracy", rep.bins[i].mt_metric}});
        std::printf("%-8s %5zu  %.4f  %.4f\n", kRanges[i], rep.bins[i].count,
                    rep.bins[i].st_metric, rep.bins[i].mt_metric);
    }
    double mean_sent_acc = 0.0;
    for (double a : rep.per_record_sent_acc) mean_sent_acc += a;
    mean_sent_acc /= double(rep.per_record_sent_acc.size());
    json out = {{"split", split},
                {"bins", bins},
                {"mean_sent_acc", mean_sent_acc},
                {"sim_memory", rep.sim_memory},
                {"sim_sentence", rep.sim_sentence},
                {"sim_skipped_pairs", rep.sim_skipped},
                {"codebook_used_entries", usage.used_entries()},
                {"codebook_total_entries", usage.counts.size()},
                {"codebook_usage", usage.counts}};
    echo_config(cfg, cfg.out_dir, "analyze-config.json");
    std::ofstream(cfg.out_dir + "/analysis-" + split + ".json") << out.dump(2) << "\n";
    std::cout << "mean sent_acc " << mean_sent_acc << "\nsim_memory " << rep.sim_memory
              << "\nsim_sentence " << rep.sim_sentence << " (skipped " << rep.sim_skipped
              << " zero-norm pairs)\ncodebook usage " << usage.used_entries() << "/"
              << usage.counts.size() << " entries\n";
    return 0;
}

int cmd_sweep(const CommonOpts& o, const std::string& param, std::vector<double> values,
              const std::string& mode) {
    RunConfig base = resolve_config(o);
    DCMA_CHECK(param == "G" || param == "asr_fraction",
               "sweep: supported params are G and asr_fraction");
    DCMA_CHECK(!values.empty(), "sweep: no values given");
    fs::create_directories(base.out_dir);
    std::string report_path = base.out_dir + "/sweep-" + param + ".jsonl";
    std::ofstream report(report_path, std::ios::app);
    Corpus asr = load_split(base.data_dir, "asr-train");
    Corpus mt = load_split(base.data_dir, "mt-train");
    Corpus test = load_split(base.data_dir, "st-test");
    std::cout << param << "  token_accuracy  bleu\n";
    for (double v : values) {
        RunConfig cfg = base;
        if (param == "G") cfg.groups = size_t(v);
        else cfg.asr_fraction = v;
        cfg.validate();
        std::string tag = param + "-" + (param == "G" ? std::to_string(size_t(v))
                                                      : std::to_string(v));
        std::string pre_dir = base.out_dir + "/" + tag + "/pretrain";
        std::string ft_dir = base.out_dir + "/" + tag + "/finetune";
        RunConfig pre = cfg;
        pre.out_dir = pre_dir;
        pipeline::run_pretrain(pre, mt);
        NamedBlobs init = pipeline::averaged_from_dir(pre_dir, cfg.avg_last);
        RunConfig ft = cfg;
        ft.out_dir = ft_dir;
        pipeline::run_finetune(ft, asr, mt, &init);
        pipeline::Model model = pipeline::build_model(cfg);
        apply_params(model, pipeline::averaged_from_dir(ft_dir, cfg.avg_last));
        pipeline::EvalResult r = mode == "mt" ? pipeline::evaluate_mt(model, test, cfg.beam)
                                              : pipeline::evaluate_st(model, test, cfg.beam);
        json line = {{"param", param},
                     {"value", v},
                     {"mode", mode},
                     {"token_accuracy", r.token_accuracy},
                     {"bleu", r.bleu}};
        report << line.dump() << "\n";
        report.flush();  // partial results survive later failures
        std::cout << v << "  " << r.token_accuracy << "  " << r.bleu << "\n";
    }
    std::cout << "report: " << report_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"discrete cross-modal alignment for zero-shot speech translation"};
    app.require_subcommand(1);

    CommonOpts gen_o, pre_o, ft_o, ev_o, an_o, sw_o;
    std::string pre_resume, ft_init, ft_resume;
    bool ft_no_align = false, ft_no_shared = false, ft_continuous = false;
    std::string ev_ckpt, ev_split = "st-test", ev_mode = "st";
    size_t ev_avg = 0, ev_beam = 0;
    std::string an_ckpt, an_split = "st-test";
    size_t an_avg = 0, an_beam = 0;
    std::string sw_param, sw_mode = "st";
    std::vector<double> sw_values;

    add_common(app.add_subcommand("gen-data", "generate the synthetic corpora"), gen_o);

    CLI::App* pre = app.add_subcommand("pretrain", "MT+MLM pretraining stage");
    add_common(pre, pre_o);
    pre->add_option("--resume", pre_resume, "resume training from a checkpoint");

    CLI::App* ft = app.add_subcommand("finetune", "alternating ASR/MT finetuning stage");
    add_common(ft, ft_o);
    ft->add_option("--init", ft_init, "initialize parameters from a pretrain checkpoint");
    ft->add_option("--resume", ft_resume, "resume training from a checkpoint");
    ft->add_flag("--no-align-loss", ft_no_align, "ablation: drop the alignment loss");
    ft->add_flag("--no-shared-softmax", ft_no_shared, "ablation: separate CTC/MLM softmax");
    ft->add_flag("--continuous-align", ft_continuous, "ablation: cosine alignment loss");

    CLI::App* ev = app.add_subcommand("evaluate", "translate a split and score it");
    add_common(ev, ev_o);
    ev->add_option("--ckpt-dir", ev_ckpt, "directory of training checkpoints")->required();
    ev->add_option("--avg-last", ev_avg, "number of trailing checkpoints to average");
    ev->add_option("--split", ev_split, "st-test or st-dev");
    ev->add_option("--beam", ev_beam, "beam size (1 = greedy)");
    ev->add_option("--mode", ev_mode, "st (speech->target) or mt (transcript->target)")
        ->check(CLI::IsMember({"st", "mt"}));

    CLI::App* an = app.add_subcommand("analyze", "sentence alignment and similarity report");
    add_common(an, an_o);
    an->add_option("--ckpt-dir", an_ckpt, "directory of training checkpoints")->required();
    an->add_option("--avg-last", an_avg, "number of trailing checkpoints to average");
    an->add_option("--split", an_split, "st-test or st-dev");
    an->add_option("--beam", an_beam, "beam size (1 = greedy)");

    CLI::App* sw = app.add_subcommand("sweep", "train/evaluate over a parameter grid");
    add_common(sw, sw_o);
    sw->add_option("--param", sw_param, "G or asr_fraction")->required();
    sw->add_option("--values", sw_values, "comma-separated values")
        ->required()
        ->delimiter(',');
    sw->add_option("--mode", sw_mode, "evaluation mode: st or mt")
        ->check(CLI::IsMember({"st", "mt"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand("gen-data")) return cmd_gen_data(gen_o);
        if (app.got_subcommand("pretrain")) return cmd_pretrain(pre_o, pre_resume);
        if (app.got_subcommand("finetune")) {
            if (ft_no_align) ft_o.sets.push_back("no_align_loss=true");
            if (ft_no_shared) ft_o.sets.push_back("no_shared_softmax=true");
            if (ft_continuous) ft_o.sets.push_back("continuous_align=true");
            return cmd_finetune(ft_o, ft_init, ft_resume);
        }
        if (app.got_subcommand("evaluate"))
            return cmd_evaluate(ev_o, ev_ckpt, ev_avg, ev_split, ev_beam, ev_mode);
        if (app.got_subcommand("analyze"))
            return cmd_analyze(an_o, an_ckpt, an_avg, an_split, an_beam);
        if (app.got_subcommand("sweep")) return cmd_sweep(sw_o, sw_param, sw_values, sw_mode);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
