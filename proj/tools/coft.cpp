// Command-line front end: data generation, pretraining, SFT with every
// method, coarse search, importance inspection, evaluation and report
// aggregation. Config values come from a JSON file; flags override it.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "coft/checkpoint.hpp"
#include "coft/evaluate.hpp"
#include "coft/reports.hpp"

using namespace coft;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    TrainConfig pretrain;
    TrainConfig search_train; // budgeted per-candidate training
    EvalOptions eval;
    SuiteSizes sizes;
    std::string data_dir = "runs/data";
    std::string out_dir = "runs";
    uint64_t seed = 1;
    std::string hash; // canonical config hash

    RunConfig() {
        model.vocab_size = Vocabulary().size();
        model.embed_dim = 80;
        model.num_heads = 4;
        model.ffn_dim = 160;
        model.num_layers = 8;
        model.max_seq_len = 256;
        pretrain.epochs = 10;
        pretrain.peak_lr = 2e-3;
        search_train.epochs = 1;
    }
};

void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw BadConfig("unknown key '" + it.key() + "' in " + where);
}

void load_model_section(const json& j, ModelConfig& m) {
    reject_unknown(j, {"embed_dim", "num_heads", "ffn_dim", "num_layers", "max_seq_len", "rms_eps", "dropout_p"},
                   "model");
    m.embed_dim = j.value("embed_dim", m.embed_dim);
    m.num_heads = j.value("num_heads", m.num_heads);
    m.ffn_dim = j.value("ffn_dim", m.ffn_dim);
    m.num_layers = j.value("num_layers", m.num_layers);
    m.max_seq_len = j.value("max_seq_len", m.max_seq_len);
    m.rms_eps = j.value("rms_eps", m.rms_eps);
    m.dropout_p = j.value("dropout_p", m.dropout_p);
}

void load_train_section(const json& j, TrainConfig& t, const std::string& where) {
    reject_unknown(j,
                   {"peak_lr", "epochs", "batch_size", "warmup_frac", "l1_strength", "l2_strength", "lora_rank",
                    "wiseft_alpha", "importance_dropout", "importance_samples"},
                   where);
    t.peak_lr = j.value("peak_lr", t.peak_lr);
    t.epochs = j.value("epochs", t.epochs);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.warmup_frac = j.value("warmup_frac", t.warmup_frac);
    t.l1_strength = j.value("l1_strength", t.l1_strength);
    t.l2_strength = j.value("l2_strength", t.l2_strength);
    t.lora_rank = j.value("lora_rank", t.lora_rank);
    t.wiseft_alpha = j.value("wiseft_alpha", t.wiseft_alpha);
    t.importance_dropout = j.value("importance_dropout", t.importance_dropout);
    t.importance_samples = j.value("importance_samples", t.importance_samples);
}

RunConfig load_config(const std::string& path) {
    RunConfig cfg;
    if (path.empty()) {
        cfg.hash = config_hash_hex("{}");
        return cfg;
    }
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    json j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    reject_unknown(j, {"model", "train", "pretrain", "search_train", "eval", "sizes", "data_dir", "out_dir", "seed"},
                   "config root");
    if (j.contains("model")) load_model_section(j["model"], cfg.model);
    cfg.pretrain.peak_lr = cfg.train.peak_lr;
    if (j.contains("train")) load_train_section(j["train"], cfg.train, "train");
    cfg.pretrain.batch_size = cfg.train.batch_size;
    if (j.contains("pretrain")) load_train_section(j["pretrain"], cfg.pretrain, "pretrain");
    cfg.search_train = cfg.train;
    cfg.search_train.epochs = 1;
    if (j.contains("search_train")) load_train_section(j["search_train"], cfg.search_train, "search_train");
    if (j.contains("eval")) {
        const json& e = j["eval"];
        reject_unknown(e, {"instruct_divisor", "bleu_max_n", "max_new_tokens", "spec_kind", "length_normalized_choice"},
                       "eval");
        cfg.eval.instruct_divisor = e.value("instruct_divisor", cfg.eval.instruct_divisor);
        cfg.eval.bleu_max_n = e.value("bleu_max_n", cfg.eval.bleu_max_n);
        cfg.eval.max_new_tokens = e.value("max_new_tokens", cfg.eval.max_new_tokens);
        if (e.contains("spec_kind"))
            cfg.eval.spec_kind =
                e["spec_kind"].get<std::string>() == "exact" ? SpecTaskKind::ExactAnswer : SpecTaskKind::Generative;
        cfg.eval.length_normalized_choice = e.value("length_normalized_choice", cfg.eval.length_normalized_choice);
    }
    if (j.contains("sizes")) {
        const json& s = j["sizes"];
        reject_unknown(
            s, {"spec_train", "spec_test", "gen_kn", "gen_rs_per_task", "instruct_train", "instruct_heldout"},
            "sizes");
        cfg.sizes.spec_train = s.value("spec_train", cfg.sizes.spec_train);
        cfg.sizes.spec_test = s.value("spec_test", cfg.sizes.spec_test);
        cfg.sizes.gen_kn = s.value("gen_kn", cfg.sizes.gen_kn);
        cfg.sizes.gen_rs_per_task = s.value("gen_rs_per_task", cfg.sizes.gen_rs_per_task);
        cfg.sizes.instruct_train = s.value("instruct_train", cfg.sizes.instruct_train);
        cfg.sizes.instruct_heldout = s.value("instruct_heldout", cfg.sizes.instruct_heldout);
    }
    cfg.data_dir = j.value("data_dir", cfg.data_dir);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.model.validate();
    cfg.hash = config_hash_hex(j.dump());
    return cfg;
}

SuiteSizes parse_sizes(const std::string& text, SuiteSizes base) {
    if (text.empty()) return base;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t comma = text.find(',', pos);
        std::string kv = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        size_t eq = kv.find('=');
        if (eq == std::string::npos) throw BadConfig("bad --sizes entry '" + kv + "'");
        std::string k = kv.substr(0, eq);
        int v = std::stoi(kv.substr(eq + 1));
        if (k == "spec_train") base.spec_train = v;
        else if (k == "spec_test") base.spec_test = v;
        else if (k == "gen_kn") base.gen_kn = v;
        else if (k == "gen_rs_per_task") base.gen_rs_per_task = v;
        else if (k == "instruct_train") base.instruct_train = v;
        else if (k == "instruct_heldout") base.instruct_heldout = v;
        else throw BadConfig("unknown --sizes key '" + k + "'");
        pos = comma == std::string::npos ? text.size() : comma + 1;
    }
    return base;
}

void write_text(const std::string& path, const std::string& text) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << text;
}

void write_train_log(const std::string& path, const std::vector<TrainLogEntry>& log) {
    std::string text;
    for (const auto& e : log)
        text += json{{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}}.dump() + "\n";
    write_text(path, text);
}

RunReport make_report(const RunConfig& cfg, const std::string& method, const std::string& scope, uint64_t seed,
                      const EvalDetail& detail) {
    RunReport r;
    r.method = method;
    r.scope = scope;
    r.seed = seed;
    r.config_hash = cfg.hash;
    r.scores = detail.breakdown;
    r.spec_embed_f1 = detail.spec_embed_f1;
    r.spec_bleu = detail.spec_bleu;
    r.spec_rouge1 = detail.spec_rouge1;
    r.spec_rouge2 = detail.spec_rouge2;
    r.spec_rougeL = detail.spec_rougeL;
    r.kn_correct = detail.kn_correct;
    r.rs_correct = detail.rs_correct;
    r.instruct_nll = detail.instruct_nll;
    return r;
}

void emit_report_files(const RunConfig& cfg, const RunReport& report, const std::string& stem) {
    write_text((fs::path(cfg.out_dir) / (stem + "_report.json")).string(), report_to_json(report));
    write_text((fs::path(cfg.out_dir) / (stem + "_report.csv")).string(),
               breakdown_csv_header() + "\n" + breakdown_csv_row(report.scores) + "\n");
}

int cmd_gen_data(uint64_t seed, const std::string& out, const std::string& sizes_text) {
    SuiteSizes sizes = parse_sizes(sizes_text, SuiteSizes{});
    TaskSuite suite = generate_suite(seed, sizes);
    save_suite(out, suite);
    std::cout << "wrote suite to " << out << " (spec_train=" << suite.spec_train.size()
              << ", spec_test=" << suite.spec_test.size() << ", gen_kn=" << suite.gen_kn.size()
              << ", gen_rs=" << suite.gen_rs.size() << ", instruct_train=" << suite.instruct_train.size()
              << ", instruct_heldout=" << suite.instruct_heldout.size() << ")\n";
    return 0;
}

int cmd_pretrain(const RunConfig& cfg, bool resume) {
    if (resume) throw BadConfig("pretraining is single-shot; --resume is not supported");
    TaskSuite suite = load_suite(cfg.data_dir);
    Vocabulary vocab;
    auto params = init_params<float>(cfg.model, SeededRng(cfg.seed, fnv1a64("init")));
    TrainConfig tcfg = cfg.pretrain;
    tcfg.seed = cfg.seed;
    tcfg.method = Method::Full;
    TuningScope all{0, cfg.model.num_layers, {ModuleScope::ALL}};
    auto res = train(cfg.model, params, suite.pretrain_mixture, vocab, tcfg, all);
    fs::create_directories(cfg.out_dir);
    save_checkpoint((fs::path(cfg.out_dir) / "base.coft").string(), res.params);
    write_train_log((fs::path(cfg.out_dir) / "pretrain_log.jsonl").string(), res.log);
    std::cout << "pretrained " << param_count(res.params) << " parameters over " << res.log.size()
              << " steps; wrote " << (fs::path(cfg.out_dir) / "base.coft").string() << "\n";
    return 0;
}

int cmd_sft(const RunConfig& cfg, const std::string& method_text, std::string scope_text,
            const std::string& scope_file, double alpha_override, int rank_override, bool no_finemask,
            const std::string& checkpoint_in, const std::string& tag) {
    Method method = parse_method(method_text);
    TaskSuite suite = load_suite(cfg.data_dir);
    Vocabulary vocab;
    const std::string base_path =
        checkpoint_in.empty() ? (fs::path(cfg.out_dir) / "base.coft").string() : checkpoint_in;
    auto base = load_checkpoint<float>(base_path);

    if (!scope_file.empty()) {
        std::ifstream in(scope_file);
        if (!in) throw IoError("cannot open scope file " + scope_file);
        json j = json::parse(in);
        scope_text = j.at("scope").get<std::string>();
    }

    TrainConfig tcfg = cfg.train;
    tcfg.seed = cfg.seed;
    tcfg.method = method;
    if (rank_override > 0) tcfg.lora_rank = rank_override;
    if (alpha_override >= 0) tcfg.wiseft_alpha = alpha_override;
    tcfg.cofitune_softmask = !no_finemask;

    ParamsT<float> tuned;
    std::vector<TrainLogEntry> log;
    std::string scope_str;
    TuningScope all{0, cfg.model.num_layers, {ModuleScope::ALL}};

    switch (method) {
        case Method::Full:
        case Method::L1:
        case Method::L2: {
            TuningScope scope = scope_text.empty() ? all : TuningScope::parse(scope_text);
            auto res = train(cfg.model, base, suite.spec_train, vocab, tcfg, scope);
            tuned = std::move(res.params);
            log = std::move(res.log);
            scope_str = scope.str();
            break;
        }
        case Method::Lora: {
            auto adapter = lora_attach(cfg.model, base, tcfg.lora_rank, SeededRng(cfg.seed, fnv1a64("lora")));
            auto res = train_lora(cfg.model, base, suite.spec_train, vocab, tcfg, adapter);
            tuned = std::move(res.params);
            log = std::move(res.log);
            scope_str = "lora:rank" + std::to_string(tcfg.lora_rank);
            break;
        }
        case Method::WiseFt: {
            auto res = train(cfg.model, base, suite.spec_train, vocab, tcfg, all);
            tuned = wise_ft_interpolate(base, res.params, tcfg.wiseft_alpha);
            log = std::move(res.log);
            scope_str = "wiseft:alpha" + std::to_string(tcfg.wiseft_alpha);
            break;
        }
        case Method::VSoftMask: {
            auto res = vsoftmask_train(cfg.model, base, suite.spec_train, vocab, tcfg);
            tuned = std::move(res.params);
            log = std::move(res.log);
            scope_str = res.scope.str();
            write_text((fs::path(cfg.out_dir) / (method_text + "_importance.json")).string(),
                       importance_to_json(res.importance));
            break;
        }
        case Method::CoFiTune: {
            TuningScope scope = scope_text.empty() ? default_scope(cfg.model.num_layers)
                                                   : TuningScope::parse(scope_text);
            auto res = cofitune_train(cfg.model, base, suite.spec_train, vocab, tcfg, &scope);
            tuned = std::move(res.params);
            log = std::move(res.log);
            scope_str = scope.str();
            if (tcfg.cofitune_softmask)
                write_text((fs::path(cfg.out_dir) / (method_text + "_importance.json")).string(),
                           importance_to_json(res.importance));
            break;
        }
    }

    const std::string stem = tag.empty() ? method_text : tag;
    save_checkpoint((fs::path(cfg.out_dir) / (stem + ".coft")).string(), tuned);
    write_train_log((fs::path(cfg.out_dir) / (stem + "_log.jsonl")).string(), log);
    EvalDetail detail = evaluate_model(cfg.model, tuned, suite, vocab, cfg.eval);
    RunReport report = make_report(cfg, method_text, scope_str, cfg.seed, detail);
    emit_report_files(cfg, report, stem);
    std::cout << stem << ": spec=" << detail.breakdown.spec << " vers=" << detail.breakdown.vers
              << " uni=" << detail.breakdown.uni << "\n";
    return 0;
}

int cmd_search(const RunConfig& cfg) {
    TaskSuite suite = load_suite(cfg.data_dir);
    Vocabulary vocab;
    auto base = load_checkpoint<float>((fs::path(cfg.out_dir) / "base.coft").string());
    TrainConfig tcfg = cfg.search_train;
    tcfg.method = Method::Full;
    auto evaluator = make_training_evaluator(cfg.model, base, suite, vocab, tcfg, cfg.eval, cfg.seed);
    SearchResult res = coarse_search(cfg.model.num_layers, evaluator);

    write_text((fs::path(cfg.out_dir) / "search_report.json").string(),
               search_report_json(res, cfg.seed, cfg.hash));
    write_text((fs::path(cfg.out_dir) / "search_trace.csv").string(), search_trace_csv(res));
    json best{{"scope", std::to_string(res.best.start) + ":" + std::to_string(res.best.start + res.best.span) + ":" +
                            search_modules_scope_token(res.best.modules)},
              {"candidate", res.best.str()},
              {"uni", res.best_record.uni}};
    write_text((fs::path(cfg.out_dir) / "best_scope.json").string(), best.dump(2));
    std::cout << "winner " << res.best.str() << " uni=" << res.best_record.uni << " after "
              << res.distinct_evaluations << " evaluations\n";
    return 0;
}

int cmd_importance(const RunConfig& cfg, const std::string& scope_text) {
    TaskSuite suite = load_suite(cfg.data_dir);
    Vocabulary vocab;
    auto base = load_checkpoint<float>((fs::path(cfg.out_dir) / "base.coft").string());
    TuningScope scope = scope_text.empty() ? default_scope(cfg.model.num_layers) : TuningScope::parse(scope_text);
    auto samples = importance_samples<float>(vocab, suite.spec_train, cfg.train.importance_samples);
    auto raw = compute_importance(cfg.model, base, samples, cfg.train.importance_dropout,
                                  scope_module_instances(cfg.model, scope), cfg.seed);
    auto norm = normalize_importance(raw);
    write_text((fs::path(cfg.out_dir) / "importance.json").string(), importance_to_json(norm));
    std::cout << "wrote importance for " << norm.items.size() << " module instances\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& suite_dir,
             const std::string& tag) {
    TaskSuite suite = load_suite(suite_dir.empty() ? cfg.data_dir : suite_dir);
    Vocabulary vocab;
    auto params = load_checkpoint<float>(checkpoint);
    EvalDetail detail = evaluate_model(cfg.model, params, suite, vocab, cfg.eval);
    RunReport report = make_report(cfg, "eval", "", cfg.seed, detail);
    emit_report_files(cfg, report, tag.empty() ? "eval" : tag);
    std::cout << breakdown_csv_header() << "\n" << breakdown_csv_row(detail.breakdown) << "\n";
    return 0;
}

int cmd_report(const std::string& runs_dir) {
    std::vector<RunReport> reports;
    for (const auto& entry : fs::directory_iterator(runs_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() > 12 && name.substr(name.size() - 12) == "_report.json") {
            std::ifstream in(entry.path());
            std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            reports.push_back(report_from_json(text));
        }
    }
    std::cout << comparison_csv(reports);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("COFT_THREADS")) cap_threads(std::atoi(threads));

    CLI::App app{"Selective fine-tuning laboratory for toy decoder transformers"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (flags override file values)")->capture_default_str();

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic task suite");
    uint64_t gen_seed = 1;
    std::string gen_out = "runs/data";
    std::string gen_sizes;
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--sizes", gen_sizes, "comma-separated k=v size overrides");

    auto* pre = app.add_subcommand("pretrain", "train the base model on the versatility mixture");
    bool pre_resume = false;
    pre->add_flag("--resume", pre_resume, "not supported; pretraining is single-shot");

    auto* sft = app.add_subcommand("sft", "fine-tune the base model with one method");
    std::string sft_method = "full";
    std::string sft_scope, sft_scope_file, sft_checkpoint, sft_tag;
    double sft_alpha = -1;
    int sft_rank = 0;
    bool sft_no_finemask = false;
    sft->add_option("--method", sft_method, "full|l1|l2|lora|wiseft|vsoftmask|cofitune")->required();
    sft->add_option("--scope", sft_scope, "tuning scope a:b:MODS (MODS: MHA,FFN,UP,DOWN,ALL joined by +)");
    sft->add_option("--scope-file", sft_scope_file, "JSON file with a \"scope\" key (e.g. search output)");
    sft->add_option("--alpha", sft_alpha, "wise-ft interpolation weight");
    sft->add_option("--rank", sft_rank, "lora rank (4, 8 or 16)");
    sft->add_flag("--no-finemask", sft_no_finemask, "cofitune without the gradient soft mask");
    sft->add_option("--checkpoint", sft_checkpoint, "base checkpoint (default <out_dir>/base.coft)");
    sft->add_option("--tag", sft_tag, "output file stem (default method name)");

    auto* search = app.add_subcommand("search", "coarse layer-range/module exploration");

    auto* imp = app.add_subcommand("importance", "compute unit importance for a scope");
    std::string imp_scope;
    imp->add_option("--scope", imp_scope, "tuning scope a:b:MODS (default: the Insight-1 scope)");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a suite");
    std::string ev_checkpoint, ev_suite, ev_tag;
    ev->add_option("--checkpoint", ev_checkpoint, "COFT1 checkpoint")->required();
    ev->add_option("--suite", ev_suite, "suite directory (default config data_dir)");
    ev->add_option("--tag", ev_tag, "output file stem");

    auto* rep = app.add_subcommand("report", "aggregate *_report.json files into a comparison table");
    std::string rep_runs = "runs";
    rep->add_option("--runs", rep_runs, "directory of run reports");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = load_config(config_path);
        if (gen->parsed()) return cmd_gen_data(gen_seed, gen_out, gen_sizes);
        if (pre->parsed()) return cmd_pretrain(cfg, pre_resume);
        if (sft->parsed())
            return cmd_sft(cfg, sft_method, sft_scope, sft_scope_file, sft_alpha, sft_rank, sft_no_finemask,
                           sft_checkpoint, sft_tag);
        if (search->parsed()) return cmd_search(cfg);
        if (imp->parsed()) return cmd_importance(cfg, imp_scope);
        if (ev->parsed()) return cmd_eval(cfg, ev_checkpoint, ev_suite, ev_tag);
        if (rep->parsed()) return cmd_report(rep_runs);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: Unhandled: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
