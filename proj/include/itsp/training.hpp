#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "itsp/decode_eval.hpp"
#include "itsp/model.hpp"
#include "itsp/oracle.hpp"

namespace itsp {

struct TrainConfig {
    int batch_size = 16;
    int max_steps = 2000;
    int warmup_steps = 500;
    double lr_factor = 0.15;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-9;
    Weighting weighting = Weighting::tree(1.0);
    bool input_src_training = false;
    bool freeze_encoder_embeddings = false;
    std::uint64_t seed = 1;
    int checkpoint_every = 500;
    double clip_norm = 1.0;

    void validate() const {
        if (warmup_steps < 1) throw DomainError("warmup_steps must be >= 1");
        if (lr_factor <= 0.0) throw DomainError("lr_factor must be > 0");
        if (batch_size < 1) throw DomainError("batch_size must be >= 1");
        if (max_steps < 1) throw DomainError("max_steps must be >= 1");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"batch_size", batch_size},
            {"max_steps", max_steps},
            {"warmup_steps", warmup_steps},
            {"lr_factor", lr_factor},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"weighting", weighting.kind == Weighting::Kind::Tree ? "tree" : "uniform"},
            {"tau", weighting.tau},
            {"input_src_training", input_src_training},
            {"freeze_encoder_embeddings", freeze_encoder_embeddings},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every},
            {"clip_norm", clip_norm}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_steps = j.value("max_steps", c.max_steps);
        c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
        c.lr_factor = j.value("lr_factor", c.lr_factor);
        c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
        c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        const std::string w = j.value("weighting", "tree");
        c.weighting = w == "uniform" ? Weighting::uniform()
                                     : Weighting::tree(j.value("tau", 1.0));
        c.input_src_training = j.value("input_src_training", c.input_src_training);
        c.freeze_encoder_embeddings =
            j.value("freeze_encoder_embeddings", c.freeze_encoder_embeddings);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
        return c;
    }
};

// ---- losses ----

// KL(gold || pred) over the joint support; equals soft-label cross entropy up
// to the gold entropy, so its gradient w.r.t. the logits is (p - g).
inline double slot_loss(const std::vector<double>& pred_probs,
                        const SlotTargetDistribution& gold) {
    double loss = 0.0;
    for (const auto& [j, g] : gold.probs) {
        if (g <= 0.0) continue;
        loss += g * (std::log(g) - std::log(pred_probs.at(j)));
    }
    return loss;
}

inline double sequence_loss(const std::vector<double>& slot_losses) {
    if (slot_losses.empty()) throw DomainError("sequence_loss needs at least one slot");
    double s = 0.0;
    for (double x : slot_losses) s += x;
    return s / slot_losses.size();
}

// Noam schedule: linear warmup to the peak at step == warmup, then inverse
// square-root decay, scaled by lr_factor * d_dec^-0.5.
inline double lr(int step, int warmup_steps, double lr_factor, int d_dec) {
    if (step < 1) throw DomainError("lr is defined for step >= 1");
    const double s = static_cast<double>(step);
    return lr_factor * std::pow(static_cast<double>(d_dec), -0.5) *
           std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup_steps), -1.5));
}

// ---- batches ----

struct TrainItem {
    const Example* example = nullptr;
    Hypothesis hyp;
    std::vector<std::map<int, double>> gold; // per-slot distributions over V+m
};

inline TrainItem make_train_item(const Example& ex, const Weighting& weighting, Rng& rng,
                                 bool input_src_training, const Vocabulary& vocab) {
    TrainItem item;
    item.example = &ex;
    auto [hyp, cands] = input_src_training ? sample_subsequence_with_pointers(ex.target, rng)
                                           : sample_subsequence(ex.target, rng);
    item.hyp = std::move(hyp);
    item.gold.reserve(cands.size());
    for (const auto& c : cands)
        item.gold.push_back(build_slot_distribution(c, weighting, vocab).probs);
    return item;
}

// One fresh subsequence sample per example visit.
inline std::vector<TrainItem> make_batch(const std::vector<const Example*>& examples,
                                         const Weighting& weighting, Rng& rng,
                                         bool input_src_training, const Vocabulary& vocab) {
    std::vector<TrainItem> batch;
    batch.reserve(examples.size());
    for (const Example* ex : examples)
        batch.push_back(make_train_item(*ex, weighting, rng, input_src_training, vocab));
    return batch;
}

// ---- optimizer ----

template <class T>
class AdamNoam {
public:
    AdamNoam(const ParamStore<T>& params, const TrainConfig& cfg, int d_dec)
        : cfg_(cfg), d_dec_(d_dec) {
        m_ = params.make_grad_buffer();
        v_ = params.make_grad_buffer();
    }

    void freeze(int pid) { frozen_.push_back(pid); }

    double current_lr() const { return lr(std::max(1, step_), cfg_.warmup_steps, cfg_.lr_factor, d_dec_); }

    void step(ParamStore<T>& params, std::vector<Mat<T>>& grads) {
        ++step_;
        if (cfg_.clip_norm > 0.0) {
            double sq = 0.0;
            for (const auto& g : grads)
                for (const auto& x : g.a) sq += static_cast<double>(x) * x;
            const double norm = std::sqrt(sq);
            if (norm > cfg_.clip_norm) {
                const T sc = static_cast<T>(cfg_.clip_norm / norm);
                for (auto& g : grads)
                    for (auto& x : g.a) x *= sc;
            }
        }
        const double a = lr(step_, cfg_.warmup_steps, cfg_.lr_factor, d_dec_);
        const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
        const double bc1 = 1.0 - std::pow(b1, step_);
        const double bc2 = 1.0 - std::pow(b2, step_);
        for (int p = 0; p < params.count(); ++p) {
            if (std::find(frozen_.begin(), frozen_.end(), p) != frozen_.end()) continue;
            Mat<T>& w = params[p];
            Mat<T>& g = grads[p];
            Mat<T>& m = m_[p];
            Mat<T>& v = v_[p];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g.a[i];
                m.a[i] = static_cast<T>(b1 * m.a[i] + (1.0 - b1) * gi);
                v.a[i] = static_cast<T>(b2 * v.a[i] + (1.0 - b2) * gi * gi);
                const double mh = m.a[i] / bc1;
                const double vh = v.a[i] / bc2;
                w.a[i] -= static_cast<T>(a * mh / (std::sqrt(vh) + cfg_.adam_eps));
            }
        }
    }

    int steps_taken() const { return step_; }

private:
    TrainConfig cfg_;
    int d_dec_;
    int step_ = 0;
    std::vector<Mat<T>> m_, v_;
    std::vector<int> frozen_;
};

// ---- checkpointing ----

struct Checkpoint {
    int version = 1;
    ModelConfig model;
    TrainConfig train;
    Vocabulary vocab;
    int step = 0;
    nlohmann::json metrics;
};

// Single-file archive: a text header, a JSON manifest, then named parameter
// blobs as little-endian float32, row-major, in manifest order. Writes are
// atomic (temp file + rename).
inline void save_checkpoint(const std::string& path, const ModelF& model,
                            const TrainConfig& train_cfg, int step,
                            const nlohmann::json& metrics) {
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["model"] = model.cfg.to_json();
    manifest["train"] = train_cfg.to_json();
    manifest["vocab"] = model.vocab.to_json();
    manifest["step"] = step;
    manifest["metrics"] = metrics;
    auto& tensors = manifest["tensors"] = nlohmann::json::array();
    for (const auto& e : model.params.entries)
        tensors.push_back({{"name", e.name}, {"rows", e.w.rows}, {"cols", e.w.cols}});

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IOFailure("cannot write " + tmp);
        const std::string m = manifest.dump();
        out << "ITSPCKPT 1\n";
        out << "MANIFEST " << m.size() << "\n";
        out.write(m.data(), static_cast<std::streamsize>(m.size()));
        out << "\n";
        for (const auto& e : model.params.entries)
            out.write(reinterpret_cast<const char*>(e.w.a.data()),
                      static_cast<std::streamsize>(e.w.size() * sizeof(float)));
        if (!out) throw IOFailure("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IOFailure("cannot rename " + tmp + " to " + path);
}

inline ModelF load_checkpoint(const std::string& path, Checkpoint* meta = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOFailure("cannot read " + path);
    std::string line;
    std::getline(in, line);
    if (line != "ITSPCKPT 1") throw IOFailure("bad checkpoint header in " + path);
    std::getline(in, line);
    if (line.rfind("MANIFEST ", 0) != 0) throw IOFailure("missing manifest in " + path);
    const std::size_t len = std::stoul(line.substr(9));
    std::string mtext(len, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(len));
    in.ignore(1); // trailing newline
    nlohmann::json manifest = nlohmann::json::parse(mtext);

    Checkpoint ck;
    ck.version = manifest.at("version").get<int>();
    ck.model = ModelConfig::from_json(manifest.at("model"));
    ck.train = TrainConfig::from_json(manifest.at("train"));
    ck.vocab = Vocabulary::from_json(manifest.at("vocab"));
    ck.step = manifest.value("step", 0);
    ck.metrics = manifest.value("metrics", nlohmann::json::object());

    ModelF model = ModelF::build(ck.model, ck.vocab);
    std::map<std::string, int> by_name;
    for (int p = 0; p < model.params.count(); ++p) by_name[model.params.entries[p].name] = p;
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const int rows = t.at("rows").get<int>();
        const int cols = t.at("cols").get<int>();
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IOFailure("unknown tensor '" + name + "' in " + path);
        Mat<float>& w = model.params[it->second];
        if (w.rows != rows || w.cols != cols)
            throw IOFailure("shape mismatch for tensor '" + name + "' in " + path);
        in.read(reinterpret_cast<char*>(w.a.data()),
                static_cast<std::streamsize>(w.size() * sizeof(float)));
    }
    if (!in) throw IOFailure("truncated checkpoint " + path);
    if (meta) *meta = std::move(ck);
    return model;
}

// ---- the training loop ----

struct FitOptions {
    std::string checkpoint_path; // empty disables periodic checkpoints
    std::string metrics_path;    // empty disables the metrics stream
    int dev_eval_examples = 200; // dev subset for periodic EM; full dev at the end
    bool verbose = false;
};

struct FitReport {
    std::vector<double> loss_history;
    double final_loss = 0.0;
    double dev_em = -1.0;
    int steps = 0;
};

// Runs the optimization recipe: per-example subsequence sampling, KL slot
// loss averaged per sequence then over the batch, Adam with the Noam
// schedule, global-norm clipping. Deterministic for a fixed seed and thread
// count.
inline FitReport fit(ModelF& model, const std::vector<Example>& train,
                     const std::vector<Example>& dev, const TrainConfig& cfg,
                     const FitOptions& opts = {}) {
    cfg.validate();
    if (train.empty()) throw DomainError("fit needs a non-empty training corpus");

    AdamNoam<float> opt(model.params, cfg, model.cfg.d_dec);
    if (cfg.freeze_encoder_embeddings) opt.freeze(model.src_emb);

#ifdef _OPENMP
    const int workers = std::max(1, omp_get_max_threads());
#else
    const int workers = 1;
#endif
    std::vector<std::vector<Mat<float>>> worker_grads;
    for (int w = 0; w < workers; ++w) worker_grads.push_back(model.params.make_grad_buffer());

    std::ofstream metrics;
    if (!opts.metrics_path.empty()) {
        metrics.open(opts.metrics_path);
        if (!metrics) throw IOFailure("cannot write " + opts.metrics_path);
    }

    DecodeConfig dev_cfg;
    dev_cfg.mode = cfg.input_src_training ? DecodeConfig::Mode::InputSrc
                                          : DecodeConfig::Mode::Scratch;

    Rng sampler = Rng::derive(cfg.seed, 0xba7c4);
    std::vector<int> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::size_t cursor = order.size(); // forces a shuffle on first use
    int epoch = 0;

    FitReport report;
    report.loss_history.reserve(cfg.max_steps);

    for (int step = 1; step <= cfg.max_steps; ++step) {
        std::vector<const Example*> chosen;
        chosen.reserve(cfg.batch_size);
        while (static_cast<int>(chosen.size()) < cfg.batch_size) {
            if (cursor >= order.size()) {
                Rng shuffle_rng = Rng::derive(cfg.seed, 0x50f1e, epoch);
                for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
                    std::swap(order[i], order[shuffle_rng.below(i + 1)]);
                cursor = 0;
                ++epoch;
            }
            chosen.push_back(&train[order[cursor++]]);
        }
        std::vector<TrainItem> batch =
            make_batch(chosen, cfg.weighting, sampler, cfg.input_src_training, model.vocab);

        const int B = static_cast<int>(batch.size());
        std::vector<double> losses(B, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int b = 0; b < B; ++b) {
#ifdef _OPENMP
            const int w = omp_get_thread_num();
#else
            const int w = 0;
#endif
            Rng ex_rng = Rng::derive(cfg.seed, static_cast<std::uint64_t>(step) << 20, b);
            Tape<float> tape(&model.params, &worker_grads[w]);
            const int lp = model.slot_log_probs(tape, batch[b].example->query, batch[b].hyp,
                                                true, ex_rng);
            const int loss = tape.kl_to_gold(lp, &batch[b].gold);
            losses[b] = tape.val(loss).at(0, 0);
            tape.backward(loss);
        }

        double batch_loss = 0.0;
        for (double l : losses) batch_loss += l;
        batch_loss /= B;
        if (!std::isfinite(batch_loss))
            throw DivergenceError("non-finite loss at step " + std::to_string(step));

        std::vector<Mat<float>>& grads = worker_grads[0];
        for (int w = 1; w < workers; ++w)
            for (std::size_t p = 0; p < grads.size(); ++p) {
                for (std::size_t i = 0; i < grads[p].size(); ++i)
                    grads[p].a[i] += worker_grads[w][p].a[i];
                worker_grads[w][p].fill(0.0f);
            }
        const float inv_b = 1.0f / static_cast<float>(B);
        for (auto& g : grads)
            for (auto& x : g.a) x *= inv_b;

        opt.step(model.params, grads);
        for (auto& g : grads) g.fill(0.0f);

        report.loss_history.push_back(batch_loss);
        report.final_loss = batch_loss;
        report.steps = step;

        const bool checkpoint_now =
            cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        double dev_em = -1.0;
        if (checkpoint_now && !dev.empty()) {
            std::vector<Example> subset(
                dev.begin(),
                dev.begin() + std::min<std::size_t>(dev.size(), opts.dev_eval_examples));
            dev_em = evaluate(model, subset, dev_cfg).em;
        }
        if (metrics.is_open()) {
            nlohmann::json line{{"step", step},
                                {"loss", batch_loss},
                                {"lr", lr(step, cfg.warmup_steps, cfg.lr_factor,
                                          model.cfg.d_dec)}};
            line["dev_em"] = dev_em >= 0 ? nlohmann::json(dev_em) : nlohmann::json();
            metrics << line.dump() << "\n";
        }
        if (opts.verbose && (step % 50 == 0 || step == 1))
            std::fprintf(stderr, "step %d loss %.4f lr %.6f%s\n", step, batch_loss,
                         lr(step, cfg.warmup_steps, cfg.lr_factor, model.cfg.d_dec),
                         dev_em >= 0 ? (" dev_em " + std::to_string(dev_em)).c_str() : "");
        if (checkpoint_now && !opts.checkpoint_path.empty()) {
            nlohmann::json m{{"loss", batch_loss}, {"dev_em", dev_em}};
            save_checkpoint(opts.checkpoint_path, model, cfg, step, m);
        }
    }

    if (!dev.empty()) report.dev_em = evaluate(model, dev, dev_cfg).em;
    if (!opts.checkpoint_path.empty()) {
        nlohmann::json m{{"loss", report.final_loss}, {"dev_em", report.dev_em}};
        save_checkpoint(opts.checkpoint_path, model, cfg, report.steps, m);
    }
    return report;
}

// ---- gradient checking ----

struct GradCheckResult {
    double max_rel_error = 0.0;
    int checked = 0;
};

// Central finite differences against the analytic gradients of the complete
// loss stack (encode, embed, decode, pool, joint softmax, KL) in double
// precision at tiny dimensions.
inline GradCheckResult gradcheck(int d, std::uint64_t seed, double epsilon) {
    if (epsilon <= 0.0) throw DomainError("gradcheck needs epsilon > 0");
    if (d > 16) throw DomainError("gradcheck is meant for d <= 16");

    Vocabulary vocab({"]"}, {"A", "B"}, {"X"}, {"u", "v", "w", "y"});
    ModelConfig cfg;
    cfg.d_enc = d;
    cfg.d_dec = d;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.heads = 2;
    cfg.ffn_mult = 2;
    cfg.dropout = 0.0;
    cfg.max_len = 16;
    cfg.seed = seed;
    ModelD model = ModelD::build(cfg, vocab);

    SourceQuery query;
    query.tokens = {"u", "w", "y"};
    TargetSequence target = parse_rendered("[IN:A @0 [SL:X @1 @2 ] ]");
    Rng rng(seed ^ 0xfeed);
    auto [hyp, cands] = sample_subsequence(target, rng);
    std::vector<std::map<int, double>> gold;
    for (const auto& c : cands)
        gold.push_back(build_slot_distribution(c, Weighting::tree(1.0), vocab).probs);

    auto forward = [&](Tape<double>& tape) {
        Rng drop(0);
        const int lp = model.slot_log_probs(tape, query, hyp, false, drop);
        return tape.kl_to_gold(lp, &gold);
    };

    auto grads = model.params.make_grad_buffer();
    {
        Tape<double> tape(&model.params, &grads);
        tape.backward(forward(tape));
    }

    GradCheckResult result;
    for (int p = 0; p < model.params.count(); ++p) {
        Mat<double>& w = model.params[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double orig = w.a[i];
            w.a[i] = orig + epsilon;
            Tape<double> tp(&model.params, nullptr);
            const double fp = tp.val(forward(tp)).at(0, 0);
            w.a[i] = orig - epsilon;
            Tape<double> tm(&model.params, nullptr);
            const double fm = tm.val(forward(tm)).at(0, 0);
            w.a[i] = orig;
            const double fd = (fp - fm) / (2 * epsilon);
            const double an = grads[p].a[i];
            const double rel =
                std::fabs(fd - an) / std::max(1.0, std::fabs(fd) + std::fabs(an));
            result.max_rel_error = std::max(result.max_rel_error, rel);
            ++result.checked;
        }
    }
    return result;
}

} // namespace itsp
