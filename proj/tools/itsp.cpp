// Command-line surface for the insertion-based semantic parser: synthetic
// corpus generation, training, evaluation, single-query parsing and the
// gradient self-check.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "itsp/corpus.hpp"
#include "itsp/decode_eval.hpp"
#include "itsp/training.hpp"

namespace {

using namespace itsp;

struct SynthArgs {
    std::string spec_path;
    std::string out = "-";
    std::string emit_grammar;
    int count = 1000;
    std::uint64_t seed = 1;
    std::string word_order;
    std::string lexicon_suffix;
    int nesting_depth = 0;
};

int run_synth(const SynthArgs& a) {
    GrammarSpec g;
    if (!a.spec_path.empty()) {
        std::ifstream in(a.spec_path);
        if (!in) throw IOFailure("cannot read " + a.spec_path);
        g = GrammarSpec::from_json(nlohmann::json::parse(in));
    } else {
        g = default_grammar();
    }
    if (!a.word_order.empty()) g.word_order = a.word_order;
    if (a.nesting_depth > 0) g.nesting_depth = a.nesting_depth;
    if (!a.lexicon_suffix.empty()) g = transfer_variant(g, a.lexicon_suffix, g.word_order);
    if (!a.emit_grammar.empty()) {
        std::ofstream out(a.emit_grammar);
        if (!out) throw IOFailure("cannot write " + a.emit_grammar);
        out << g.to_json().dump(2) << "\n";
        return 0;
    }
    auto examples = generate_synthetic(g, a.count, a.seed);
    if (a.out == "-") {
        for (const auto& ex : examples) {
            nlohmann::json j{{"tokens", ex.query.tokens}, {"target", render(ex.target)}};
            if (!ex.language_tag.empty()) j["lang"] = ex.language_tag;
            std::cout << j.dump() << "\n";
        }
    } else {
        save_jsonl(a.out, examples);
        std::fprintf(stderr, "wrote %zu examples to %s\n", examples.size(), a.out.c_str());
    }
    return 0;
}

struct TrainArgs {
    std::string data;
    std::string dev;
    std::string out = "model.ckpt";
    std::string config;
    std::string metrics;
    TrainConfig train;
    ModelConfig model;
    std::string weighting = "tree";
    double tau = 1.0;
    std::string copy = "on";
    bool quiet = false;
};

void apply_kv_config(const std::string& path, TrainConfig& t, ModelConfig& m) {
    std::ifstream in(path);
    if (!in) throw IOFailure("cannot read " + path);
    nlohmann::json jt = t.to_json(), jm = m.to_json();
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw IOFailure(path + ":" + std::to_string(line_no) + ": expected key=value");
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        nlohmann::json* target = jt.contains(key) ? &jt : jm.contains(key) ? &jm : nullptr;
        if (target == nullptr)
            throw IOFailure(path + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
        nlohmann::json& slot = (*target)[key];
        if (slot.is_string())
            slot = val;
        else if (slot.is_boolean())
            slot = (val == "1" || val == "true" || val == "on");
        else if (slot.is_number_integer() || slot.is_number_unsigned())
            slot = static_cast<std::int64_t>(std::stoll(val));
        else
            slot = std::stod(val);
    }
    t = TrainConfig::from_json(jt);
    m = ModelConfig::from_json(jm);
}

int run_train(TrainArgs& a) {
    if (!a.config.empty()) apply_kv_config(a.config, a.train, a.model);
    a.train.weighting =
        a.weighting == "uniform" ? Weighting::uniform() : Weighting::tree(a.tau);
    a.model.copy_enabled = a.copy != "off";

    LoadResult train_data = load_jsonl(a.data);
    if (train_data.examples.empty()) throw IOFailure("no usable examples in " + a.data);
    if (train_data.skipped > 0)
        std::fprintf(stderr, "skipped %d malformed training lines\n", train_data.skipped);
    std::vector<Example> dev;
    if (!a.dev.empty()) dev = load_jsonl(a.dev).examples;

    Vocabulary vocab = build_vocab(train_data.examples);
    a.model.seed = a.train.seed;
    ModelF model = ModelF::build(a.model, vocab);

    FitOptions opts;
    opts.checkpoint_path = a.out;
    opts.metrics_path = a.metrics;
    opts.verbose = !a.quiet;
    FitReport rep = fit(model, train_data.examples, dev, a.train, opts);

    nlohmann::json summary{{"steps", rep.steps},
                           {"final_loss", rep.final_loss},
                           {"dev_em", rep.dev_em},
                           {"checkpoint", a.out}};
    std::cout << summary.dump() << "\n";
    return 0;
}

struct EvalArgs {
    std::string data;
    std::string ckpt;
    std::string mode = "scratch";
    double penalty = 0.0;
    int max_steps = 64;
    std::uint64_t seed = 1;
};

int run_eval(const EvalArgs& a) {
    ModelF model = load_checkpoint(a.ckpt);
    LoadResult data = load_jsonl(a.data);
    if (data.skipped > 0)
        std::fprintf(stderr, "skipped %d malformed lines\n", data.skipped);
    DecodeConfig cfg;
    cfg.mode = DecodeConfig::mode_of(a.mode);
    cfg.penalty = a.penalty;
    cfg.max_steps = a.max_steps;
    EvalReport rep = evaluate(model, data.examples, cfg);
    std::cout << rep.to_json().dump() << "\n";
    return 0;
}

struct ParseArgs {
    std::string ckpt;
    std::string mode = "scratch";
    double penalty = 0.0;
    int max_steps = 64;
    std::string query;
};

int run_parse(const ParseArgs& a) {
    ModelF model = load_checkpoint(a.ckpt);
    SourceQuery q;
    std::istringstream in(a.query);
    std::string w;
    while (in >> w) q.tokens.push_back(w);
    if (q.tokens.empty()) throw DomainError("empty query");
    DecodeConfig cfg;
    cfg.mode = DecodeConfig::mode_of(a.mode);
    cfg.penalty = a.penalty;
    cfg.max_steps = a.max_steps;
    cfg.max_len = model.cfg.max_len;
    NeuralScorer scorer(model);
    DecodeResult r = decode(scorer, q, cfg, model.vocab);
    std::cout << render(r.sequence) << "\n";
    nlohmann::json stats{{"steps", r.stats.steps_used},
                         {"model_calls", r.stats.model_calls},
                         {"tokens_per_step", r.stats.tokens_per_step},
                         {"terminated", termination_name(r.stats.terminated)},
                         {"valid", r.valid}};
    if (!r.valid) stats["invalid_category"] = r.invalid_category;
    std::cout << stats.dump() << "\n";
    return 0;
}

struct GradcheckArgs {
    int dim = 8;
    int seeds = 10;
    double epsilon = 1e-5;
};

int run_gradcheck(const GradcheckArgs& a) {
    double worst = 0.0;
    for (int s = 1; s <= a.seeds; ++s) {
        GradCheckResult r = gradcheck(a.dim, static_cast<std::uint64_t>(s), a.epsilon);
        std::fprintf(stderr, "seed %d: max relative error %.3g over %d entries\n", s,
                     r.max_rel_error, r.checked);
        worst = std::max(worst, r.max_rel_error);
    }
    nlohmann::json out{{"max_rel_error", worst}, {"seeds", a.seeds}, {"dim", a.dim}};
    std::cout << out.dump() << "\n";
    return worst < 1e-4 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"insertion-based task-oriented semantic parser"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "generate a synthetic corpus (jsonl)");
    s->add_option("--spec", synth.spec_path, "grammar spec json (default: built-in grammar)");
    s->add_option("--count", synth.count, "number of examples");
    s->add_option("--seed", synth.seed, "generation seed");
    s->add_option("--out", synth.out, "output path, '-' for stdout");
    s->add_option("--emit-grammar", synth.emit_grammar, "write the grammar json and exit");
    s->add_option("--word-order", synth.word_order, "identity|reverse override");
    s->add_option("--lexicon-suffix", synth.lexicon_suffix,
                  "derive a transfer language by suffixing every surface word");
    s->add_option("--nesting-depth", synth.nesting_depth, "override max intent nesting");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "train a parser and write a checkpoint");
    t->add_option("--data", train.data, "training jsonl")->required();
    t->add_option("--dev", train.dev, "dev jsonl for EM tracking");
    t->add_option("--out", train.out, "checkpoint path");
    t->add_option("--config", train.config, "flat key=value config file");
    t->add_option("--metrics", train.metrics, "metrics jsonl path");
    t->add_option("--steps", train.train.max_steps, "optimization steps");
    t->add_option("--batch", train.train.batch_size, "batch size");
    t->add_option("--warmup", train.train.warmup_steps, "warmup steps");
    t->add_option("--lr-factor", train.train.lr_factor, "noam factor");
    t->add_option("--tau", train.tau, "tree weighting temperature");
    t->add_option("--weighting", train.weighting, "tree|uniform")
        ->check(CLI::IsMember({"tree", "uniform"}));
    t->add_option("--copy", train.copy, "on|off copy mechanism")
        ->check(CLI::IsMember({"on", "off"}));
    t->add_flag("--input-src-training", train.train.input_src_training,
                "sample hypotheses that keep every pointer");
    t->add_flag("--freeze-encoder-embeddings", train.train.freeze_encoder_embeddings,
                "do not update the encoder embedding table");
    t->add_option("--seed", train.train.seed, "training seed");
    t->add_option("--checkpoint-every", train.train.checkpoint_every, "checkpoint period");
    t->add_option("--d-enc", train.model.d_enc, "encoder width");
    t->add_option("--d-dec", train.model.d_dec, "decoder width");
    t->add_option("--enc-layers", train.model.enc_layers, "encoder layers");
    t->add_option("--dec-layers", train.model.dec_layers, "decoder layers");
    t->add_option("--heads", train.model.heads, "attention heads");
    t->add_option("--dropout", train.model.dropout, "dropout rate");
    t->add_option("--ffn-mult", train.model.ffn_mult, "feed-forward expansion");
    t->add_option("--max-len", train.model.max_len, "maximum sequence length");
    t->add_flag("--labeled-close", train.model.labeled_close, "per-label close tags");
    t->add_flag("--quiet", train.quiet, "suppress progress lines");

    EvalArgs eval_args;
    auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a jsonl dataset");
    e->add_option("--data", eval_args.data, "dataset jsonl")->required();
    e->add_option("--ckpt", eval_args.ckpt, "checkpoint")->required();
    e->add_option("--mode", eval_args.mode, "scratch|input-src")
        ->check(CLI::IsMember({"scratch", "input-src"}));
    e->add_option("--penalty", eval_args.penalty, "no-insertion penalty");
    e->add_option("--max-steps", eval_args.max_steps, "decode step cap");
    e->add_option("--seed", eval_args.seed, "seed (decoding itself is deterministic)");

    ParseArgs parse_args;
    auto* p = app.add_subcommand("parse", "parse one whitespace-tokenized query");
    p->add_option("--ckpt", parse_args.ckpt, "checkpoint")->required();
    p->add_option("--mode", parse_args.mode, "scratch|input-src")
        ->check(CLI::IsMember({"scratch", "input-src"}));
    p->add_option("--penalty", parse_args.penalty, "no-insertion penalty");
    p->add_option("--max-steps", parse_args.max_steps, "decode step cap");
    p->add_option("query", parse_args.query, "query text")->required();

    GradcheckArgs gc;
    auto* g = app.add_subcommand("gradcheck", "finite-difference check of the loss stack");
    g->add_option("--dim", gc.dim, "hidden size (<= 16)");
    g->add_option("--seeds", gc.seeds, "number of random seeds");
    g->add_option("--epsilon", gc.epsilon, "finite-difference step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        if (err.get_exit_code() == 0) return app.exit(err); // --help
        app.exit(err);
        return 2;
    }

    try {
        if (app.got_subcommand(s)) return run_synth(synth);
        if (app.got_subcommand(t)) return run_train(train);
        if (app.got_subcommand(e)) return run_eval(eval_args);
        if (app.got_subcommand(p)) return run_parse(parse_args);
        if (app.got_subcommand(g)) return run_gradcheck(gc);
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
    return 2;
}
