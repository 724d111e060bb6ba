#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "itsp/autodiff.hpp"
#include "itsp/corpus.hpp"
#include "itsp/parse_ir.hpp"
#include "itsp/rng.hpp"

namespace itsp {

// Order-preserving subsequence of a target, bos/eos always retained. A length
// T hypothesis exposes T-1 insertion slots.
struct Hypothesis {
    std::vector<TargetToken> tokens;

    int length() const { return static_cast<int>(tokens.size()); }
    int slot_count() const { return length() - 1; }

    static Hypothesis initial() { return {{TargetToken::bos(), TargetToken::eos()}}; }

    bool operator==(const Hypothesis& o) const { return tokens == o.tokens; }
};

// The contiguous run of target tokens falling strictly between the hypothesis
// tokens adjacent to one insertion slot. positions index the target body.
struct SlotCandidates {
    int slot = 0;
    std::vector<TargetToken> tokens;
    std::vector<int> positions;

    int count() const { return static_cast<int>(tokens.size()); }
};

// Ground-truth insertion distribution for one slot over the joint id space
// (tag vocabulary ids, then pointer ids V..V+m-1).
struct SlotTargetDistribution {
    std::map<int, double> probs;
};

struct Weighting {
    enum class Kind { Tree, Uniform };
    Kind kind = Kind::Tree;
    double tau = 1.0;

    static Weighting tree(double tau) { return {Kind::Tree, tau}; }
    static Weighting uniform() { return {Kind::Uniform, 0.0}; }
};

// Softmax over negative distances to the run's center, d(j) = |j - (i-1)/2|.
// The single middle token of an odd run is the unique argmax.
inline std::vector<double> tree_weights(int i, double tau) {
    if (i < 1) throw DomainError("tree_weights requires at least one candidate");
    if (tau <= 0.0) throw DomainError("tree_weights requires tau > 0");
    const double center = (i - 1) / 2.0;
    std::vector<double> w(i);
    double z = 0.0;
    for (int j = 0; j < i; ++j) {
        w[j] = std::exp(-std::fabs(j - center) / tau);
        z += w[j];
    }
    for (auto& x : w) x /= z;
    return w;
}

inline std::vector<double> uniform_weights(int i) {
    if (i < 1) throw DomainError("uniform_weights requires at least one candidate");
    return std::vector<double>(i, 1.0 / i);
}

inline std::vector<double> candidate_weights(int i, const Weighting& w) {
    return w.kind == Weighting::Kind::Tree ? tree_weights(i, w.tau) : uniform_weights(i);
}

namespace detail {

// Candidates for every slot of a hypothesis given the positions (into the
// target body) of its interior tokens. sentinel-free: hyp_positions excludes
// bos/eos.
inline std::vector<SlotCandidates> candidates_from_positions(
    const TargetSequence& target, const std::vector<int>& hyp_positions) {
    const int n = target.body_length();
    std::vector<SlotCandidates> out(hyp_positions.size() + 1);
    int prev = -1;
    for (std::size_t s = 0; s <= hyp_positions.size(); ++s) {
        const int next = s < hyp_positions.size() ? hyp_positions[s] : n;
        SlotCandidates& c = out[s];
        c.slot = static_cast<int>(s);
        for (int p = prev + 1; p < next; ++p) {
            c.tokens.push_back(target.tokens[p + 1]); // +1 skips bos
            c.positions.push_back(p);
        }
        prev = next;
    }
    return out;
}

} // namespace detail

// Builds the hypothesis and per-slot candidates for an explicit set of kept
// body positions (sorted).
inline std::pair<Hypothesis, std::vector<SlotCandidates>> subsequence_at(
    const TargetSequence& target, const std::vector<int>& kept) {
    Hypothesis hyp;
    hyp.tokens.push_back(TargetToken::bos());
    for (int p : kept) hyp.tokens.push_back(target.tokens[p + 1]);
    hyp.tokens.push_back(TargetToken::eos());
    return {std::move(hyp), detail::candidates_from_positions(target, kept)};
}

// Uniformly random size-k subset of body positions, order preserved
// (selection sampling).
inline std::pair<Hypothesis, std::vector<SlotCandidates>> sample_subsequence_of_size(
    const TargetSequence& target, int k, Rng& rng) {
    const int n = target.body_length();
    std::vector<int> kept;
    kept.reserve(k);
    int need = k;
    for (int p = 0; p < n && need > 0; ++p) {
        if (rng.below(n - p) < need) {
            kept.push_back(p);
            --need;
        }
    }
    return subsequence_at(target, kept);
}

// Uniform training sample: k ~ U{0..n}, then a uniform size-k subset.
// bos/eos always retained.
inline std::pair<Hypothesis, std::vector<SlotCandidates>> sample_subsequence(
    const TargetSequence& target, Rng& rng) {
    const int n = target.body_length();
    return sample_subsequence_of_size(target, rng.below(n + 1), rng);
}

// As above but every pointer token is kept; only tag tokens are dropped.
// Mirrors source-initialized inference, where pointers are never inserted.
inline std::pair<Hypothesis, std::vector<SlotCandidates>> sample_subsequence_with_pointers(
    const TargetSequence& target, Rng& rng) {
    const int n = target.body_length();
    std::vector<int> optional_positions;
    for (int p = 0; p < n; ++p)
        if (target.tokens[p + 1].kind != TokKind::Pointer) optional_positions.push_back(p);
    const int t = static_cast<int>(optional_positions.size());
    const int k = rng.below(t + 1);
    std::vector<char> keep(n, 0);
    for (int p = 0; p < n; ++p)
        if (target.tokens[p + 1].kind == TokKind::Pointer) keep[p] = 1;
    int need = k;
    for (int idx = 0; idx < t && need > 0; ++idx) {
        if (rng.below(t - idx) < need) {
            keep[optional_positions[idx]] = 1;
            --need;
        }
    }
    std::vector<int> kept;
    for (int p = 0; p < n; ++p)
        if (keep[p]) kept.push_back(p);
    Hypothesis hyp;
    hyp.tokens.push_back(TargetToken::bos());
    for (int p : kept) hyp.tokens.push_back(target.tokens[p + 1]);
    hyp.tokens.push_back(TargetToken::eos());
    return {std::move(hyp), detail::candidates_from_positions(target, kept)};
}

// Ground-truth distribution for one slot. Empty slots get a point mass on
// no-insertion; duplicate candidate tokens accumulate their positional
// weights onto one token id.
inline SlotTargetDistribution build_slot_distribution(const SlotCandidates& cands,
                                                      const Weighting& weighting,
                                                      const Vocabulary& vocab) {
    SlotTargetDistribution dist;
    const int i = cands.count();
    if (i == 0) {
        dist.probs[vocab.no_insert_id()] = 1.0;
        return dist;
    }
    const std::vector<double> w = candidate_weights(i, weighting);
    for (int j = 0; j < i; ++j) dist.probs[vocab.joint_id(cands.tokens[j])] += w[j];
    return dist;
}

// Exact number of parallel balanced-tree insertion steps for a body of
// length n: ceil(log2(n+1)).
inline int steps_lower_bound(int n) {
    int steps = 0;
    long long capacity = 0; // tokens reachable in `steps` steps = 2^steps - 1
    while (capacity < n) {
        ++steps;
        capacity = capacity * 2 + 1;
    }
    return steps;
}

// Ideal balanced generation order: every step inserts the median candidate of
// every active run (ties toward the left). Returns the body positions
// inserted per step; concatenating all steps covers 0..n-1.
inline std::vector<std::vector<int>> oracle_schedule(const TargetSequence& target) {
    const int n = target.body_length();
    std::vector<std::vector<int>> steps;
    std::vector<int> hyp; // positions, sorted
    while (static_cast<int>(hyp.size()) < n) {
        std::vector<int> inserted;
        int prev = -1;
        for (std::size_t s = 0; s <= hyp.size(); ++s) {
            const int next = s < hyp.size() ? hyp[s] : n;
            const int run = next - prev - 1;
            if (run > 0) inserted.push_back(prev + 1 + (run - 1) / 2);
            prev = next;
        }
        std::vector<int> merged;
        merged.reserve(hyp.size() + inserted.size());
        std::size_t a = 0, b = 0;
        while (a < hyp.size() || b < inserted.size()) {
            if (a < hyp.size() && (b >= inserted.size() || hyp[a] < inserted[b]))
                merged.push_back(hyp[a++]);
            else
                merged.push_back(inserted[b++]);
        }
        hyp = std::move(merged);
        steps.push_back(std::move(inserted));
    }
    return steps;
}

} // namespace itsp
