#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <vector>

#include "itsp/training.hpp"

using namespace itsp;

namespace {

Vocabulary train_vocab() {
    return Vocabulary({"]"}, {"A", "B"}, {"X"}, {"u", "v", "w", "y"});
}

ModelConfig tiny_cfg(std::uint64_t seed = 5) {
    ModelConfig c;
    c.d_enc = 8;
    c.d_dec = 8;
    c.enc_layers = 1;
    c.dec_layers = 1;
    c.heads = 2;
    c.ffn_mult = 2;
    c.dropout = 0.0;
    c.max_len = 32;
    c.seed = seed;
    return c;
}

std::vector<Example> tiny_corpus(int count, std::uint64_t seed) {
    GrammarSpec g = default_grammar();
    return generate_synthetic(g, count, seed);
}

} // namespace

TEST_CASE("slot_loss hand-computed values") {
    Vocabulary v = train_vocab();
    SlotTargetDistribution gold;
    gold.probs[2] = 1.0;

    std::vector<double> pred(8, 0.1);
    pred[2] = 0.3;
    // gold one-hot against itself
    std::vector<double> same(8, 0.0);
    same[2] = 1.0;
    CHECK(slot_loss(same, gold) == doctest::Approx(0.0));

    // one-hot gold, pred 0.5 on that token -> ln 2
    std::vector<double> half(8, 0.5 / 7);
    half[2] = 0.5;
    CHECK(slot_loss(half, gold) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    CHECK(slot_loss(half, gold) == doctest::Approx(0.693147).epsilon(1e-5));

    // gold {a: 0.5, b: 0.5}, pred {a: 0.5, b: 0.25, ...} -> 0.5 ln 2
    SlotTargetDistribution gold2;
    gold2.probs[0] = 0.5;
    gold2.probs[1] = 0.5;
    std::vector<double> pred2(8, 0.25 / 6);
    pred2[0] = 0.5;
    pred2[1] = 0.25;
    CHECK(slot_loss(pred2, gold2) == doctest::Approx(0.346574).epsilon(1e-5));

    // non-negative on random prediction rows
    Rng rng(4);
    for (int it = 0; it < 50; ++it) {
        std::vector<double> p(8);
        double z = 0;
        for (auto& x : p) z += (x = rng.next_double() + 1e-3);
        for (auto& x : p) x /= z;
        CHECK(slot_loss(p, gold2) >= -1e-12);
    }
}

TEST_CASE("sequence_loss is the mean and is permutation invariant") {
    CHECK(sequence_loss({0, 0, 0}) == doctest::Approx(0.0));
    CHECK(sequence_loss({std::log(2.0)}) == doctest::Approx(std::log(2.0)));
    CHECK(sequence_loss({0.2, 0.4}) == doctest::Approx(0.3));
    CHECK(sequence_loss({0.4, 0.2}) == doctest::Approx(0.3));
    CHECK(sequence_loss({0.1, 0.2, 0.3}) == doctest::Approx(sequence_loss({0.3, 0.1, 0.2})));
    CHECK_THROWS_AS(sequence_loss({}), DomainError);
}

TEST_CASE("noam learning rate") {
    // step = warmup = 500, factor 0.15, d_dec 128
    CHECK(lr(500, 500, 0.15, 128) == doctest::Approx(0.000593).epsilon(1e-3));
    CHECK(lr(500, 500, 0.15, 128) ==
          doctest::Approx(0.15 * std::pow(128.0, -0.5) * std::pow(500.0, -0.5)).epsilon(1e-12));
    CHECK(lr(1, 500, 0.15, 128) < lr(500, 500, 0.15, 128));
    CHECK(lr(2000, 500, 0.15, 128) == doctest::Approx(lr(500, 500, 0.15, 128) / 2).epsilon(1e-9));
    // continuous peak: both branches agree at step == warmup
    CHECK(lr(499, 500, 0.15, 128) < lr(500, 500, 0.15, 128));
    CHECK(lr(501, 500, 0.15, 128) < lr(500, 500, 0.15, 128));
    CHECK_THROWS_AS(lr(0, 500, 0.15, 128), DomainError);
}

TEST_CASE("make_batch sampling modes") {
    auto corpus = tiny_corpus(30, 3);
    Vocabulary vocab = build_vocab(corpus);
    std::vector<const Example*> ptrs;
    for (const auto& ex : corpus) ptrs.push_back(&ex);
    Rng rng(17);

    SUBCASE("input_src_training keeps every pointer") {
        auto batch = make_batch(ptrs, Weighting::tree(1.0), rng, true, vocab);
        for (const auto& item : batch) {
            int pointers = 0;
            for (const auto& t : item.hyp.tokens)
                if (t.kind == TokKind::Pointer) ++pointers;
            CHECK(pointers == item.example->query.length());
            CHECK(static_cast<int>(item.gold.size()) == item.hyp.slot_count());
        }
    }
    SUBCASE("free sampling reaches both extremes") {
        bool saw_empty = false, saw_full = false;
        for (int round = 0; round < 60 && !(saw_empty && saw_full); ++round) {
            auto batch = make_batch(ptrs, Weighting::tree(1.0), rng, false, vocab);
            for (const auto& item : batch) {
                const int body = item.hyp.length() - 2;
                if (body == 0) saw_empty = true;
                if (body == item.example->target.body_length()) saw_full = true;
            }
        }
        CHECK(saw_empty);
        CHECK(saw_full);
    }
    SUBCASE("per-item loss support matches the tape loss") {
        auto batch = make_batch(ptrs, Weighting::tree(1.0), rng, false, vocab);
        auto model = ModelF::build(tiny_cfg(), vocab);
        const TrainItem& item = batch.front();
        Tape<float> t(&model.params, nullptr);
        Rng drop(0);
        const int lp = model.slot_log_probs(t, item.example->query, item.hyp, false, drop);
        const int loss_node = t.kl_to_gold(lp, &item.gold);
        // same value as the standalone slot_loss/sequence_loss composition
        std::vector<double> per_slot;
        for (int s = 0; s < item.hyp.slot_count(); ++s) {
            std::vector<double> row(t.val(lp).cols);
            for (int j = 0; j < t.val(lp).cols; ++j)
                row[j] = std::exp(static_cast<double>(t.val(lp).at(s, j)));
            SlotTargetDistribution d;
            d.probs = item.gold[s];
            per_slot.push_back(slot_loss(row, d));
        }
        CHECK(t.val(loss_node).at(0, 0) ==
              doctest::Approx(sequence_loss(per_slot)).epsilon(1e-4));
    }
}

TEST_CASE("fit reduces loss, is seed-deterministic, honors the freeze flag") {
    auto corpus = tiny_corpus(10, 9);
    Vocabulary vocab = build_vocab(corpus);

    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.max_steps = 50;
    cfg.warmup_steps = 20;
    cfg.lr_factor = 1.0;
    cfg.seed = 3;
    cfg.checkpoint_every = 0;

    auto model_a = ModelF::build(tiny_cfg(), vocab);
    FitReport ra = fit(model_a, corpus, {}, cfg);
    CHECK(ra.loss_history.size() == 50);
    CHECK(ra.loss_history.back() < ra.loss_history.front());

    auto model_b = ModelF::build(tiny_cfg(), vocab);
    FitReport rb = fit(model_b, corpus, {}, cfg);
    CHECK(ra.loss_history[9] == rb.loss_history[9]);

    // freezing the encoder embedding table keeps it bitwise intact
    auto model_c = ModelF::build(tiny_cfg(), vocab);
    Mat<float> before = model_c.params[model_c.src_emb];
    TrainConfig frozen = cfg;
    frozen.freeze_encoder_embeddings = true;
    fit(model_c, corpus, {}, frozen);
    CHECK(model_c.params[model_c.src_emb].a == before.a);
    // and without freezing it moves
    CHECK(model_a.params[model_a.src_emb].a != before.a);
}

TEST_CASE("fit raises DivergenceError on a non-finite loss") {
    auto corpus = tiny_corpus(4, 2);
    Vocabulary vocab = build_vocab(corpus);
    auto model = ModelF::build(tiny_cfg(), vocab);
    model.params[model.tag_w].a[0] = std::numeric_limits<float>::quiet_NaN();
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.max_steps = 3;
    cfg.checkpoint_every = 0;
    CHECK_THROWS_AS(fit(model, corpus, {}, cfg), DivergenceError);
}

TEST_CASE("checkpoint save/load reproduces eval outputs bitwise") {
    auto corpus = tiny_corpus(8, 4);
    Vocabulary vocab = build_vocab(corpus);
    auto model = ModelF::build(tiny_cfg(7), vocab);

    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.max_steps = 12;
    cfg.warmup_steps = 5;
    cfg.checkpoint_every = 0;
    fit(model, corpus, {}, cfg);

    const std::string path = "/tmp/itsp_test_ckpt.bin";
    save_checkpoint(path, model, cfg, 12, {{"loss", 1.0}});

    Checkpoint meta;
    ModelF loaded = load_checkpoint(path, &meta);
    CHECK(meta.step == 12);
    CHECK(meta.train.batch_size == 4);
    CHECK(loaded.vocab == model.vocab);

    for (const auto& ex : corpus) {
        Mat<float> enc_a = model.run_encoder(ex.query);
        Mat<float> enc_b = loaded.run_encoder(ex.query);
        REQUIRE(enc_a.a == enc_b.a);
        Hypothesis h = Hypothesis::initial();
        Mat<float> pa = model.infer_slot_probs(enc_a, h);
        Mat<float> pb = loaded.infer_slot_probs(enc_b, h);
        CHECK(pa.a == pb.a);
    }
    // the temp file from atomic writes is gone
    std::ifstream tmp(path + ".tmp");
    CHECK(!tmp.good());
    std::remove(path.c_str());
}

TEST_CASE("fit writes periodic checkpoints and a metrics stream") {
    auto corpus = tiny_corpus(6, 5);
    Vocabulary vocab = build_vocab(corpus);
    auto model = ModelF::build(tiny_cfg(), vocab);
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.max_steps = 6;
    cfg.warmup_steps = 2;
    cfg.checkpoint_every = 3;
    FitOptions opts;
    opts.checkpoint_path = "/tmp/itsp_fit_ckpt.bin";
    opts.metrics_path = "/tmp/itsp_fit_metrics.jsonl";
    opts.dev_eval_examples = 4;
    fit(model, corpus, corpus, cfg, opts);

    Checkpoint meta;
    ModelF loaded = load_checkpoint(opts.checkpoint_path, &meta);
    CHECK(meta.step == 6);
    CHECK(meta.metrics.contains("dev_em"));

    std::ifstream metrics(opts.metrics_path);
    REQUIRE(metrics.good());
    int lines = 0;
    std::string line;
    bool saw_dev_em_value = false;
    while (std::getline(metrics, line)) {
        ++lines;
        auto j = nlohmann::json::parse(line);
        CHECK(j.contains("step"));
        CHECK(j.contains("loss"));
        CHECK(j.contains("lr"));
        CHECK(j.contains("dev_em"));
        if (!j["dev_em"].is_null()) saw_dev_em_value = true;
    }
    CHECK(lines == 6);
    CHECK(saw_dev_em_value); // computed at the checkpoint steps
    std::remove(opts.checkpoint_path.c_str());
    std::remove(opts.metrics_path.c_str());
}

TEST_CASE("gradcheck: full stack under 1e-4, bad epsilon rejected") {
    CHECK_THROWS_AS(gradcheck(8, 1, 0.0), DomainError);
    GradCheckResult r = gradcheck(8, 1, 1e-5);
    CHECK(r.checked > 500);
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("gradcheck: linear-only toy head is exact to 1e-7") {
    // a purely linear graph: matmul plus KL against a fixed gold row
    ParamStore<double> ps;
    Rng rng(3);
    const int W = ps.add("w", Mat<double>::randn(4, 6, 0.5, rng));
    Mat<double> x = Mat<double>::randn(2, 4, 0.5, rng);
    std::vector<std::map<int, double>> gold = {{{1, 1.0}}, {{4, 0.7}, {2, 0.3}}};

    auto forward = [&](Tape<double>& t) {
        const int logits = t.matmul(t.leaf_ref(&x), t.param(W));
        return t.kl_to_gold(t.log_softmax_rows(logits), &gold);
    };
    auto grads = ps.make_grad_buffer();
    {
        Tape<double> t(&ps, &grads);
        t.backward(forward(t));
    }
    const double eps = 1e-6;
    double worst = 0.0;
    for (std::size_t i = 0; i < ps[W].size(); ++i) {
        const double orig = ps[W].a[i];
        ps[W].a[i] = orig + eps;
        Tape<double> tp(&ps, nullptr);
        const double fp = tp.val(forward(tp)).at(0, 0);
        ps[W].a[i] = orig - eps;
        Tape<double> tm(&ps, nullptr);
        const double fm = tm.val(forward(tm)).at(0, 0);
        ps[W].a[i] = orig;
        const double fd = (fp - fm) / (2 * eps);
        worst = std::max(worst, std::fabs(fd - grads[W].a[i]) /
                                    std::max(1.0, std::fabs(fd) + std::fabs(grads[W].a[i])));
    }
    CHECK(worst < 1e-7);
}
