#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "itsp/autodiff.hpp"
#include "itsp/corpus.hpp"
#include "itsp/errors.hpp"
#include "itsp/oracle.hpp"

namespace itsp {

// Architecture knobs. The decoder follows the insertion transformer layout:
// unmasked self-attention, cross-attention over the encoder, slot pooling,
// and a joint tag + pointer output head.
struct ModelConfig {
    int d_enc = 128;
    int d_dec = 128;
    int enc_layers = 2;
    int dec_layers = 4;
    int heads = 4;
    int ffn_mult = 4;
    double dropout = 0.1;
    bool copy_enabled = true;
    bool labeled_close = false;
    bool pointer_pos_enc = true; // positional encodings also on copied pointer rows
    int max_len = 256;
    std::uint64_t seed = 1;

    void validate() const {
        if (dec_layers < 1) throw DomainError("dec_layers must be >= 1");
        if (enc_layers < 0) throw DomainError("enc_layers must be >= 0");
        if (heads < 1 || d_dec % heads != 0 || d_enc % heads != 0)
            throw DomainError("heads must divide d_enc and d_dec");
        if (dropout < 0.0 || dropout >= 1.0) throw DomainError("dropout must be in [0,1)");
        if (max_len < 2) throw DomainError("max_len must be >= 2");
        if (ffn_mult < 1) throw DomainError("ffn_mult must be >= 1");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"d_enc", d_enc},
                              {"d_dec", d_dec},
                              {"enc_layers", enc_layers},
                              {"dec_layers", dec_layers},
                              {"heads", heads},
                              {"ffn_mult", ffn_mult},
                              {"dropout", dropout},
                              {"copy_enabled", copy_enabled},
                              {"labeled_close", labeled_close},
                              {"pointer_pos_enc", pointer_pos_enc},
                              {"max_len", max_len},
                              {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.d_enc = j.value("d_enc", c.d_enc);
        c.d_dec = j.value("d_dec", c.d_dec);
        c.enc_layers = j.value("enc_layers", c.enc_layers);
        c.dec_layers = j.value("dec_layers", c.dec_layers);
        c.heads = j.value("heads", c.heads);
        c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
        c.dropout = j.value("dropout", c.dropout);
        c.copy_enabled = j.value("copy_enabled", c.copy_enabled);
        c.labeled_close = j.value("labeled_close", c.labeled_close);
        c.pointer_pos_enc = j.value("pointer_pos_enc", c.pointer_pos_enc);
        c.max_len = j.value("max_len", c.max_len);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

// Standard sinusoidal position table.
template <class T>
Mat<T> positional_encoding(int len, int d) {
    Mat<T> p(len, d);
    for (int pos = 0; pos < len; ++pos)
        for (int j = 0; j < d; j += 2) {
            const double angle = pos / std::pow(10000.0, static_cast<double>(j) / d);
            p.at(pos, j) = static_cast<T>(std::sin(angle));
            if (j + 1 < d) p.at(pos, j + 1) = static_cast<T>(std::cos(angle));
        }
    return p;
}

namespace detail {

struct AttnIds {
    int wq, bq, wk, bk, wv, bv, wo, bo;
};
struct LnIds {
    int g, b;
};
struct FfnIds {
    int w1, b1, w2, b2;
};
struct EncLayerIds {
    AttnIds self;
    LnIds ln1;
    FfnIds ffn;
    LnIds ln2;
};
struct DecLayerIds {
    AttnIds self;
    LnIds ln1;
    AttnIds cross;
    LnIds ln2;
    FfnIds ffn;
    LnIds ln3;
};

} // namespace detail

// One state per source token; the mask marks real (non-pad) positions, which
// in per-example processing is every position.
struct EncoderOutput {
    int node = -1;
    std::vector<std::uint8_t> mask;

    int length() const { return static_cast<int>(mask.size()); }
};

template <class T>
class Model {
public:
    ModelConfig cfg;
    Vocabulary vocab;
    ParamStore<T> params;

    // When set, encoder states come from here instead of the trainable
    // encoder (frozen; no gradient flows into them). Stands in for an
    // externally computed multilingual encoder.
    std::function<Mat<T>(const SourceQuery&)> injected_encoder;

    int src_emb = -1;
    int tag_emb = -1;
    int ptr_emb = -1;
    int copy_w = -1, copy_b = -1;
    int slot_w = -1;
    int tag_w = -1, tag_b = -1;
    int pq_w = -1, pq_b = -1, pk_w = -1, pk_b = -1;
    detail::LnIds enc_ln{-1, -1}, dec_ln{-1, -1};
    std::vector<detail::EncLayerIds> enc_stack;
    std::vector<detail::DecLayerIds> dec_stack;

    static Model build(const ModelConfig& cfg, Vocabulary vocab) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        m.vocab = std::move(vocab);
        Rng rng(cfg.seed);

        auto xavier = [&rng](int rows, int cols) {
            const T std = static_cast<T>(std::sqrt(2.0 / (rows + cols)));
            return Mat<T>::randn(rows, cols, std, rng);
        };
        auto ln_ids = [&](const std::string& name, int d) {
            return detail::LnIds{m.params.add(name + ".g", Mat<T>::constant(1, d, T(1))),
                                 m.params.add(name + ".b", Mat<T>(1, d))};
        };
        auto attn_ids = [&](const std::string& name, int dq, int dkv, int dout) {
            return detail::AttnIds{m.params.add(name + ".wq", xavier(dq, dout)),
                                   m.params.add(name + ".bq", Mat<T>(1, dout)),
                                   m.params.add(name + ".wk", xavier(dkv, dout)),
                                   m.params.add(name + ".bk", Mat<T>(1, dout)),
                                   m.params.add(name + ".wv", xavier(dkv, dout)),
                                   m.params.add(name + ".bv", Mat<T>(1, dout)),
                                   m.params.add(name + ".wo", xavier(dout, dout)),
                                   m.params.add(name + ".bo", Mat<T>(1, dout))};
        };
        auto ffn_ids = [&](const std::string& name, int d) {
            const int h = d * cfg.ffn_mult;
            return detail::FfnIds{m.params.add(name + ".w1", xavier(d, h)),
                                  m.params.add(name + ".b1", Mat<T>(1, h)),
                                  m.params.add(name + ".w2", xavier(h, d)),
                                  m.params.add(name + ".b2", Mat<T>(1, d))};
        };

        const int d_enc = cfg.d_enc, d_dec = cfg.d_dec;
        m.src_emb = m.params.add(
            "enc.emb", Mat<T>::randn(m.vocab.encoder_rows(), d_enc,
                                     static_cast<T>(1.0 / std::sqrt(d_enc)), rng));
        for (int l = 0; l < cfg.enc_layers; ++l) {
            const std::string p = "enc.l" + std::to_string(l);
            m.enc_stack.push_back({attn_ids(p + ".self", d_enc, d_enc, d_enc),
                                   ln_ids(p + ".ln1", d_enc), ffn_ids(p + ".ffn", d_enc),
                                   ln_ids(p + ".ln2", d_enc)});
        }
        m.enc_ln = ln_ids("enc.ln", d_enc);

        m.tag_emb = m.params.add(
            "dec.emb", Mat<T>::randn(m.vocab.V(), d_dec,
                                     static_cast<T>(1.0 / std::sqrt(d_dec)), rng));
        m.ptr_emb = m.params.add(
            "dec.ptr_emb", Mat<T>::randn(cfg.max_len, d_dec,
                                         static_cast<T>(1.0 / std::sqrt(d_dec)), rng));
        // copy projection starts as a (truncated) identity
        m.copy_w = m.params.add("dec.copy.w", Mat<T>::identity(d_enc, d_dec));
        m.copy_b = m.params.add("dec.copy.b", Mat<T>(1, d_dec));

        for (int l = 0; l < cfg.dec_layers; ++l) {
            const std::string p = "dec.l" + std::to_string(l);
            m.dec_stack.push_back({attn_ids(p + ".self", d_dec, d_dec, d_dec),
                                   ln_ids(p + ".ln1", d_dec),
                                   attn_ids(p + ".cross", d_dec, d_enc, d_dec),
                                   ln_ids(p + ".ln2", d_dec), ffn_ids(p + ".ffn", d_dec),
                                   ln_ids(p + ".ln3", d_dec)});
        }
        m.dec_ln = ln_ids("dec.ln", d_dec);

        m.slot_w = m.params.add("head.slot.w", xavier(2 * d_dec, d_dec));
        m.tag_w = m.params.add("head.tag.w", xavier(d_dec, m.vocab.V()));
        m.tag_b = m.params.add("head.tag.b", Mat<T>(1, m.vocab.V()));
        m.pq_w = m.params.add("head.ptr.wq", xavier(d_dec, d_dec));
        m.pq_b = m.params.add("head.ptr.bq", Mat<T>(1, d_dec));
        m.pk_w = m.params.add("head.ptr.wk", xavier(d_enc, d_dec));
        m.pk_b = m.params.add("head.ptr.bk", Mat<T>(1, d_dec));
        return m;
    }

    // ---- forward pieces ----

    int linear(Tape<T>& t, int x, int w, int b) const {
        return t.add_row_broadcast(t.matmul(x, t.param(w)), t.param(b));
    }

    int attention(Tape<T>& t, const detail::AttnIds& a, int q_in, int kv_in,
                  bool zero_attention = false) const {
        const int q = linear(t, q_in, a.wq, a.bq);
        const int k = linear(t, kv_in, a.wk, a.bk);
        const int v = linear(t, kv_in, a.wv, a.bv);
        const int dout = t.val(q).cols;
        const int dh = dout / cfg.heads;
        int merged = -1;
        for (int h = 0; h < cfg.heads; ++h) {
            const int qh = t.slice_cols(q, h * dh, (h + 1) * dh);
            const int kh = t.slice_cols(k, h * dh, (h + 1) * dh);
            const int vh = t.slice_cols(v, h * dh, (h + 1) * dh);
            int scores = t.scale(t.matmul_nt(qh, kh), static_cast<T>(1.0 / std::sqrt(dh)));
            int probs = t.softmax_rows(scores);
            if (zero_attention) probs = t.scale(probs, T(0));
            const int oh = t.matmul(probs, vh);
            merged = h == 0 ? oh : t.concat_cols(merged, oh);
        }
        return linear(t, merged, a.wo, a.bo);
    }

    int ffn(Tape<T>& t, const detail::FfnIds& f, int x) const {
        return linear(t, t.relu(linear(t, x, f.w1, f.b1)), f.w2, f.b2);
    }

    int norm(Tape<T>& t, const detail::LnIds& ln, int x) const {
        return t.layer_norm(x, t.param(ln.g), t.param(ln.b));
    }

    // Trainable encoder (or the injected states when the adapter is set).
    EncoderOutput encode(Tape<T>& t, const SourceQuery& query, bool training, Rng& rng) const {
        const int m = query.length();
        if (m > cfg.max_len)
            throw LengthError("query length " + std::to_string(m) + " exceeds max_len " +
                              std::to_string(cfg.max_len));
        if (m < 1) throw LengthError("query must have at least one token");
        EncoderOutput out;
        out.mask.assign(m, 1);
        if (injected_encoder) {
            out.node = t.leaf(injected_encoder(query));
            return out;
        }
        std::vector<int> rows;
        rows.reserve(m);
        for (const auto& w : query.tokens) rows.push_back(vocab.word_row(w));
        int x = t.scale(t.gather_rows(t.param(src_emb), rows),
                        static_cast<T>(std::sqrt(static_cast<double>(cfg.d_enc))));
        x = t.add(x, t.leaf(positional_encoding<T>(m, cfg.d_enc)));
        x = t.dropout(x, static_cast<T>(cfg.dropout), rng, training);
        for (const auto& layer : enc_stack) {
            const int nx = norm(t, layer.ln1, x);
            x = t.add(x, t.dropout(attention(t, layer.self, nx, nx),
                                   static_cast<T>(cfg.dropout), rng, training));
            x = t.add(x, t.dropout(ffn(t, layer.ffn, norm(t, layer.ln2, x)),
                                   static_cast<T>(cfg.dropout), rng, training));
        }
        out.node = norm(t, enc_ln, x);
        return out;
    }

    // Wraps precomputed encoder states (e.g. cached during decoding, or a
    // probe) as a gradient-tracked tape input.
    EncoderOutput encode_from_states(Tape<T>& t, const Mat<T>* states) const {
        EncoderOutput out;
        out.mask.assign(states->rows, 1);
        out.node = t.input(states);
        return out;
    }

    // Decoder input: tag tokens from learned embeddings, pointer tokens from
    // copied encoder states (or per-position embeddings when copying is off),
    // positional encodings added after substitution.
    int embed_hypothesis(Tape<T>& t, const Hypothesis& hyp, const EncoderOutput& enc,
                         bool training, Rng& rng) const {
        const int T_len = hyp.length();
        if (T_len > cfg.max_len) throw LengthError("hypothesis exceeds max_len");
        const int m = enc.length();
        const int tag_src = t.scale(t.param(tag_emb),
                                    static_cast<T>(std::sqrt(static_cast<double>(cfg.d_dec))));
        int ptr_src = -1;
        std::vector<std::pair<int, int>> picks;
        picks.reserve(T_len);
        std::vector<char> is_ptr(T_len, 0);
        for (int i = 0; i < T_len; ++i) {
            const TargetToken& tok = hyp.tokens[i];
            if (tok.kind == TokKind::Pointer) {
                if (tok.index < 0 || tok.index >= m)
                    throw IndexError("pointer @" + std::to_string(tok.index) +
                                     " outside the encoded query");
                if (ptr_src < 0) {
                    ptr_src = cfg.copy_enabled
                                  ? linear(t, enc.node, copy_w, copy_b)
                                  : t.scale(t.param(ptr_emb),
                                            static_cast<T>(std::sqrt(
                                                static_cast<double>(cfg.d_dec))));
                }
                picks.push_back({ptr_src, tok.index});
                is_ptr[i] = 1;
            } else {
                picks.push_back({tag_src, vocab.tag_id(tok)});
            }
        }
        int x = t.assemble_rows(std::move(picks));
        Mat<T> pos = positional_encoding<T>(T_len, cfg.d_dec);
        if (!cfg.pointer_pos_enc)
            for (int i = 0; i < T_len; ++i)
                if (is_ptr[i])
                    for (int j = 0; j < cfg.d_dec; ++j) pos.at(i, j) = T(0);
        x = t.add(x, t.leaf(std::move(pos)));
        return t.dropout(x, static_cast<T>(cfg.dropout), rng, training);
    }

    // Insertion decoder stack: full bidirectional self-attention (no causal
    // mask) plus cross-attention over the encoder.
    int decode_states(Tape<T>& t, int dec_in, const EncoderOutput& enc, bool training, Rng& rng,
                      bool zero_cross_attention = false) const {
        int x = dec_in;
        for (const auto& layer : dec_stack) {
            const int nx = norm(t, layer.ln1, x);
            x = t.add(x, t.dropout(attention(t, layer.self, nx, nx),
                                   static_cast<T>(cfg.dropout), rng, training));
            x = t.add(x, t.dropout(attention(t, layer.cross, norm(t, layer.ln2, x), enc.node,
                                             zero_cross_attention),
                                   static_cast<T>(cfg.dropout), rng, training));
            x = t.add(x, t.dropout(ffn(t, layer.ffn, norm(t, layer.ln3, x)),
                                   static_cast<T>(cfg.dropout), rng, training));
        }
        return norm(t, dec_ln, x);
    }

    // s = concat(r[1:], r[:-1]) * W_s; one row per insertion slot.
    int pool_slots(Tape<T>& t, int r) const {
        const int T_len = t.val(r).rows;
        if (T_len < 2) throw DomainError("pool_slots needs a hypothesis of length >= 2");
        const int right = t.slice_rows(r, 1, T_len);
        const int left = t.slice_rows(r, 0, T_len - 1);
        return t.matmul(t.concat_cols(right, left), t.param(slot_w));
    }

    int tag_logits(Tape<T>& t, int s) const { return linear(t, s, tag_w, tag_b); }

    // Scaled dot-product scores between projected slot representations and
    // projected encoder states; h is the post-projection width.
    int pointer_scores(Tape<T>& t, int s, const EncoderOutput& enc) const {
        const int q = linear(t, s, pq_w, pq_b);
        const int k = linear(t, enc.node, pk_w, pk_b);
        return t.scale(t.matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(cfg.d_dec)));
    }

    // Row-wise softmax over [tag logits | pointer scores] -> (T-1) x (V + m).
    int joint_log_probs(Tape<T>& t, int tag, int ptr) const {
        return t.log_softmax_rows(t.concat_cols(tag, ptr));
    }

    int joint_distribution(Tape<T>& t, int tag, int ptr) const {
        return t.softmax_rows(t.concat_cols(tag, ptr));
    }

    // Full chain from query + hypothesis to per-slot joint log-probabilities.
    int slot_log_probs(Tape<T>& t, const SourceQuery& query, const Hypothesis& hyp, bool training,
                       Rng& rng, EncoderOutput* enc_out = nullptr) const {
        EncoderOutput enc = encode(t, query, training, rng);
        if (enc_out) *enc_out = enc;
        return slot_log_probs_with_enc(t, enc, hyp, training, rng);
    }

    int slot_log_probs_with_enc(Tape<T>& t, const EncoderOutput& enc, const Hypothesis& hyp,
                                bool training, Rng& rng) const {
        const int dec_in = embed_hypothesis(t, hyp, enc, training, rng);
        const int r = decode_states(t, dec_in, enc, training, rng);
        const int s = pool_slots(t, r);
        return joint_log_probs(t, tag_logits(t, s), pointer_scores(t, s, enc));
    }

    // ---- eval-mode conveniences (no gradients) ----

    Mat<T> run_encoder(const SourceQuery& query) const {
        Tape<T> t(&params, nullptr);
        Rng rng(0);
        return t.val(encode(t, query, false, rng).node);
    }

    // Per-slot probabilities over the joint space given cached encoder states.
    Mat<T> infer_slot_probs(const Mat<T>& enc_states, const Hypothesis& hyp) const {
        Tape<T> t(&params, nullptr);
        Rng rng(0);
        EncoderOutput enc;
        enc.mask.assign(enc_states.rows, 1);
        enc.node = t.leaf_ref(&enc_states);
        const int lp = slot_log_probs_with_enc(t, enc, hyp, false, rng);
        Mat<T> probs = t.val(lp);
        for (auto& x : probs.a) x = std::exp(x);
        return probs;
    }
};

using ModelF = Model<float>;
using ModelD = Model<double>;

} // namespace itsp
