#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "itsp/model.hpp"
#include "itsp/oracle.hpp"

namespace itsp {

struct DecodeConfig {
    enum class Mode { Scratch, InputSrc };
    Mode mode = Mode::Scratch;
    double penalty = 0.0; // subtracted from log p(no-insertion) in every slot
    int max_steps = 64;
    int max_len = 256;

    void validate() const {
        if (max_steps < 1) throw DomainError("max_steps must be >= 1");
        if (penalty < 0.0) throw DomainError("penalty must be >= 0");
    }

    static Mode mode_of(const std::string& s) {
        if (s == "scratch") return Mode::Scratch;
        if (s == "input-src" || s == "input_src") return Mode::InputSrc;
        throw DomainError("unknown decode mode '" + s + "'");
    }
};

enum class Termination { Natural, StepCap, LengthCap };

inline const char* termination_name(Termination t) {
    switch (t) {
        case Termination::Natural: return "natural";
        case Termination::StepCap: return "step_cap";
        case Termination::LengthCap: return "length_cap";
    }
    return "?";
}

// steps_used counts insertion steps that actually inserted; the final
// all-no-insertion call is reported separately through model_calls.
struct DecodeStats {
    int steps_used = 0;
    std::vector<int> tokens_per_step;
    Termination terminated = Termination::Natural;
    int model_calls = 0;
};

struct DecodeResult {
    TargetSequence sequence;
    DecodeStats stats;
    bool valid = false;
    std::string invalid_category;
};

// Per-slot insertion distributions for a growing hypothesis. score() returns
// joint probabilities of shape (T-1) x (V + m).
class SlotScorer {
public:
    virtual ~SlotScorer() = default;
    virtual void begin(const SourceQuery&) {}
    virtual Mat<float> score(const Hypothesis&) = 0;
    // Insertions actually applied, as (slot, joint id) pairs ordered by slot.
    virtual void observe(const std::vector<std::pair<int, int>>&) {}
};

class NeuralScorer : public SlotScorer {
public:
    explicit NeuralScorer(const ModelF& model) : model_(model) {}

    void begin(const SourceQuery& q) override { enc_ = model_.run_encoder(q); }

    Mat<float> score(const Hypothesis& h) override { return model_.infer_slot_probs(enc_, h); }

private:
    const ModelF& model_;
    Mat<float> enc_;
};

// Ideal teacher: returns the ground-truth slot distributions for a reference
// target, tracking where each hypothesis token sits in that target. The
// default temperature 0.5 keeps the winning token of every run central, so
// greedy decoding against this scorer realizes the balanced-tree schedule.
class OracleScorer : public SlotScorer {
public:
    OracleScorer(const TargetSequence& gold, const Vocabulary& vocab,
                 Weighting weighting = Weighting::tree(0.5))
        : gold_(gold), vocab_(vocab), weighting_(weighting) {}

    void begin(const SourceQuery& q) override {
        m_ = q.length();
        aligned_ = false;
        positions_.clear();
    }

    Mat<float> score(const Hypothesis& hyp) override {
        if (!aligned_) align(hyp);
        last_cands_ = detail::candidates_from_positions(gold_, positions_);
        Mat<float> probs(static_cast<int>(last_cands_.size()), vocab_.V() + m_);
        for (std::size_t s = 0; s < last_cands_.size(); ++s) {
            SlotTargetDistribution d =
                build_slot_distribution(last_cands_[s], weighting_, vocab_);
            for (const auto& [id, p] : d.probs)
                probs.at(static_cast<int>(s), id) = static_cast<float>(p);
        }
        return probs;
    }

    void observe(const std::vector<std::pair<int, int>>& insertions) override {
        // bind each inserted token to its most central occurrence in the run
        std::vector<int> added;
        for (const auto& [slot, jid] : insertions) {
            const SlotCandidates& c = last_cands_[slot];
            const TargetToken tok = vocab_.token_of_joint(jid);
            const double center = (c.count() - 1) / 2.0;
            int best = -1;
            double best_d = std::numeric_limits<double>::infinity();
            for (int j = 0; j < c.count(); ++j) {
                if (!(c.tokens[j] == tok)) continue;
                const double d = std::fabs(j - center);
                if (d < best_d - 1e-12) {
                    best_d = d;
                    best = c.positions[j];
                }
            }
            if (best < 0) throw DomainError("inserted token is not a candidate of its slot");
            added.push_back(best);
        }
        positions_.insert(positions_.end(), added.begin(), added.end());
        std::sort(positions_.begin(), positions_.end());
    }

private:
    void align(const Hypothesis& hyp) {
        // leftmost subsequence alignment of the hypothesis body in the gold body
        const int n = gold_.body_length();
        int p = 0;
        for (int i = 1; i + 1 < hyp.length(); ++i) {
            while (p < n && !(gold_.tokens[p + 1] == hyp.tokens[i])) ++p;
            if (p >= n) throw DomainError("hypothesis is not a subsequence of the reference");
            positions_.push_back(p++);
        }
        aligned_ = true;
    }

    const TargetSequence& gold_;
    const Vocabulary& vocab_;
    Weighting weighting_;
    int m_ = 0;
    bool aligned_ = false;
    std::vector<int> positions_;
    std::vector<SlotCandidates> last_cands_;
};

// One parallel insertion step: argmax per slot after the no-insertion
// penalty, pointer ids masked in input-src mode, all winners inserted
// simultaneously. Ties break toward the lowest token id.
inline std::pair<Hypothesis, std::vector<std::pair<int, int>>> greedy_insert_step(
    SlotScorer& scorer, const Hypothesis& hyp, const DecodeConfig& cfg,
    const Vocabulary& vocab) {
    const Mat<float> probs = scorer.score(hyp);
    const int slots = probs.rows;
    const int width = probs.cols;
    const int no_ins = vocab.no_insert_id();
    std::vector<std::pair<int, int>> insertions;
    for (int s = 0; s < slots; ++s) {
        int best = -1;
        double best_score = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < width; ++j) {
            if (cfg.mode == DecodeConfig::Mode::InputSrc && j >= vocab.V()) continue;
            double sc = std::log(static_cast<double>(probs.at(s, j)));
            if (j == no_ins) sc -= cfg.penalty;
            if (sc > best_score) {
                best_score = sc;
                best = j;
            }
        }
        if (best != no_ins && best >= 0 &&
            best_score > -std::numeric_limits<double>::infinity())
            insertions.push_back({s, best});
    }
    Hypothesis next;
    next.tokens.reserve(hyp.tokens.size() + insertions.size());
    std::size_t ins = 0;
    for (int i = 0; i < hyp.length(); ++i) {
        next.tokens.push_back(hyp.tokens[i]);
        if (ins < insertions.size() && insertions[ins].first == i) {
            next.tokens.push_back(vocab.token_of_joint(insertions[ins].second));
            ++ins;
        }
    }
    return {std::move(next), std::move(insertions)};
}

// Iterated parallel insertion decoding. Scratch mode grows from [bos, eos];
// input-src mode starts from the fully pointerized source and inserts only
// tags. Invalid outputs are returned flagged, never repaired.
inline DecodeResult decode(SlotScorer& scorer, const SourceQuery& query, const DecodeConfig& cfg,
                           const Vocabulary& vocab) {
    cfg.validate();
    DecodeResult result;
    Hypothesis hyp = Hypothesis::initial();
    if (cfg.mode == DecodeConfig::Mode::InputSrc) {
        for (int i = 0; i < query.length(); ++i)
            hyp.tokens.insert(hyp.tokens.end() - 1, TargetToken::pointer(i));
    }
    scorer.begin(query);
    DecodeStats& stats = result.stats;
    bool capped = false;
    while (true) {
        if (hyp.length() >= cfg.max_len) {
            stats.terminated = Termination::LengthCap;
            capped = true;
            break;
        }
        if (stats.steps_used >= cfg.max_steps) {
            stats.terminated = Termination::StepCap;
            capped = true;
            break;
        }
        auto [next, insertions] = greedy_insert_step(scorer, hyp, cfg, vocab);
        ++stats.model_calls;
        if (insertions.empty()) break; // converged: every slot chose no-insertion
        scorer.observe(insertions);
        hyp = std::move(next);
        ++stats.steps_used;
        stats.tokens_per_step.push_back(static_cast<int>(insertions.size()));
    }
    if (!capped) stats.terminated = Termination::Natural;
    result.sequence.tokens = std::move(hyp.tokens);
    try {
        delinearize(result.sequence, query);
        result.valid = true;
    } catch (const MalformedSequence& e) {
        result.valid = false;
        result.invalid_category = MalformedSequence::name(e.category);
    }
    return result;
}

struct EvalReport {
    double em = 0.0;
    double ic = 0.0;
    double avg_steps = 0.0;      // insertion steps, terminal no-insertion call excluded
    double avg_steps_incl = 0.0; // model calls including the convergence check
    double invalid_rate = 0.0;
    std::vector<double> tokens_per_step; // mean tokens generated at steps 1..9
    double avg_body_length = 0.0;
    int count = 0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"em", em},
                              {"ic", ic},
                              {"avg_steps", avg_steps},
                              {"avg_steps_incl", avg_steps_incl},
                              {"tokens_per_step", tokens_per_step},
                              {"invalid_rate", invalid_rate},
                              {"avg_body_length", avg_body_length},
                              {"count", count}};
    }
};

using ScorerFactory = std::function<std::unique_ptr<SlotScorer>(const Example&)>;

// Decodes every example and aggregates exact match, intent accuracy, step
// statistics and the per-step token histogram (mean over examples that reach
// each step).
inline EvalReport evaluate(const ScorerFactory& make_scorer,
                           const std::vector<Example>& dataset, const DecodeConfig& cfg,
                           const Vocabulary& vocab) {
    const int n = static_cast<int>(dataset.size());
    EvalReport rep;
    rep.count = n;
    if (n == 0) return rep;

    std::vector<DecodeResult> results(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 8)
#endif
    for (int i = 0; i < n; ++i) {
        auto scorer = make_scorer(dataset[i]);
        results[i] = decode(*scorer, dataset[i].query, cfg, vocab);
    }

    const int hist_len = 9;
    std::vector<double> tok_sum(hist_len, 0.0);
    std::vector<int> tok_cnt(hist_len, 0);
    for (int i = 0; i < n; ++i) {
        const DecodeResult& r = results[i];
        const Example& ex = dataset[i];
        if (exact_match(r.sequence, ex.target)) rep.em += 1.0;
        const auto pred_intent = intent_of(r.sequence);
        const auto gold_intent = intent_of(ex.target);
        if (pred_intent.has_value() && gold_intent.has_value() &&
            *pred_intent == *gold_intent)
            rep.ic += 1.0;
        if (!r.valid) rep.invalid_rate += 1.0;
        rep.avg_steps += r.stats.steps_used;
        rep.avg_steps_incl += r.stats.model_calls;
        rep.avg_body_length += ex.target.body_length();
        for (int s = 0; s < hist_len && s < static_cast<int>(r.stats.tokens_per_step.size());
             ++s) {
            tok_sum[s] += r.stats.tokens_per_step[s];
            ++tok_cnt[s];
        }
    }
    rep.em /= n;
    rep.ic /= n;
    rep.invalid_rate /= n;
    rep.avg_steps /= n;
    rep.avg_steps_incl /= n;
    rep.avg_body_length /= n;
    rep.tokens_per_step.assign(hist_len, 0.0);
    for (int s = 0; s < hist_len; ++s)
        if (tok_cnt[s] > 0) rep.tokens_per_step[s] = tok_sum[s] / tok_cnt[s];
    return rep;
}

inline EvalReport evaluate(const ModelF& model, const std::vector<Example>& dataset,
                           const DecodeConfig& cfg) {
    DecodeConfig clamped = cfg;
    clamped.max_len = std::min(cfg.max_len, model.cfg.max_len);
    return evaluate(
        [&model](const Example&) { return std::make_unique<NeuralScorer>(model); }, dataset,
        clamped, model.vocab);
}

} // namespace itsp
