#pragma once

#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace itsp {

struct InvalidTree : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidBio : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tokenized utterance. Tokens are surface strings without embedded whitespace.
struct SourceQuery {
    std::vector<std::string> tokens;

    int length() const { return static_cast<int>(tokens.size()); }

    static SourceQuery of(std::initializer_list<const char*> words) {
        SourceQuery q;
        for (const char* w : words) q.tokens.emplace_back(w);
        return q;
    }
};

enum class TokKind : unsigned char {
    OpenIntent,
    OpenSlot,
    Close,
    Pointer,
    Bos,
    Eos,
    NoInsert,
    Pad,
    Unk,
};

// One target-side token. Pointers carry a 0-based source position; open tags
// carry a label. Close carries a label only under the labeled_close scheme.
struct TargetToken {
    TokKind kind;
    std::string name;
    int index = -1;

    static TargetToken open_intent(std::string n) { return {TokKind::OpenIntent, std::move(n), -1}; }
    static TargetToken open_slot(std::string n) { return {TokKind::OpenSlot, std::move(n), -1}; }
    static TargetToken close(std::string n = "") { return {TokKind::Close, std::move(n), -1}; }
    static TargetToken pointer(int i) { return {TokKind::Pointer, "", i}; }
    static TargetToken bos() { return {TokKind::Bos, "", -1}; }
    static TargetToken eos() { return {TokKind::Eos, "", -1}; }
    static TargetToken no_insert() { return {TokKind::NoInsert, "", -1}; }
    static TargetToken pad() { return {TokKind::Pad, "", -1}; }
    static TargetToken unk() { return {TokKind::Unk, "", -1}; }

    bool operator==(const TargetToken& o) const {
        return kind == o.kind && name == o.name && index == o.index;
    }
};

// Flat generation target: BOS + body + EOS. Body length n excludes BOS/EOS.
struct TargetSequence {
    std::vector<TargetToken> tokens;

    int body_length() const { return static_cast<int>(tokens.size()) - 2; }

    bool operator==(const TargetSequence& o) const { return tokens == o.tokens; }
};

struct MalformedSequence : std::runtime_error {
    enum class Category {
        Unbalanced,
        NoRootIntent,
        PointerOutOfRange,
        PointerOrder,
        PointerCoverage,
    };
    Category category;

    MalformedSequence(Category c, const std::string& msg)
        : std::runtime_error(msg), category(c) {}

    static const char* name(Category c) {
        switch (c) {
            case Category::Unbalanced: return "unbalanced";
            case Category::NoRootIntent: return "no-root-intent";
            case Category::PointerOutOfRange: return "pointer-out-of-range";
            case Category::PointerOrder: return "pointer-order";
            case Category::PointerCoverage: return "pointer-coverage";
        }
        return "?";
    }
};

enum class NodeKind : unsigned char { Intent, Slot };

struct ParseNode;

// A child is either a source token (index >= 0) or a nested node. Trees are
// immutable after construction, so shared subtrees are safe.
struct ParseChild {
    int source_index = -1;
    std::shared_ptr<ParseNode> node;

    bool is_token() const { return source_index >= 0; }

    static ParseChild token(int i) { return {i, nullptr}; }
    static ParseChild nested(ParseNode n);
};

struct ParseNode {
    NodeKind kind;
    std::string name;
    std::vector<ParseChild> children;
};

inline ParseChild ParseChild::nested(ParseNode n) {
    return {-1, std::make_shared<ParseNode>(std::move(n))};
}

struct ParseTree {
    ParseNode root;
};

inline bool node_equal(const ParseNode& a, const ParseNode& b) {
    if (a.kind != b.kind || a.name != b.name || a.children.size() != b.children.size())
        return false;
    for (std::size_t i = 0; i < a.children.size(); ++i) {
        const auto& ca = a.children[i];
        const auto& cb = b.children[i];
        if (ca.is_token() != cb.is_token()) return false;
        if (ca.is_token()) {
            if (ca.source_index != cb.source_index) return false;
        } else if (!node_equal(*ca.node, *cb.node)) {
            return false;
        }
    }
    return true;
}

inline bool tree_equal(const ParseTree& a, const ParseTree& b) {
    return node_equal(a.root, b.root);
}

namespace detail {

inline void linearize_node(const ParseNode& node, bool labeled_close,
                           std::vector<TargetToken>& out, int m, int& last_index, int& count) {
    out.push_back(node.kind == NodeKind::Intent ? TargetToken::open_intent(node.name)
                                                : TargetToken::open_slot(node.name));
    for (const auto& child : node.children) {
        if (child.is_token()) {
            const int i = child.source_index;
            if (i >= m) throw InvalidTree("source index " + std::to_string(i) + " out of range");
            if (i <= last_index)
                throw InvalidTree("source indices must be strictly increasing");
            last_index = i;
            ++count;
            out.push_back(TargetToken::pointer(i));
        } else {
            linearize_node(*child.node, labeled_close, out, m, last_index, count);
        }
    }
    out.push_back(TargetToken::close(labeled_close ? node.name : ""));
}

} // namespace detail

// Depth-first, left-to-right serialization of the tree over the query.
inline TargetSequence linearize(const ParseTree& tree, const SourceQuery& query,
                                bool labeled_close = false) {
    if (tree.root.kind != NodeKind::Intent) throw InvalidTree("root must be an intent");
    std::vector<TargetToken> out;
    out.push_back(TargetToken::bos());
    int last_index = -1;
    int count = 0;
    detail::linearize_node(tree.root, labeled_close, out, query.length(), last_index, count);
    if (count != query.length())
        throw InvalidTree("tree does not cover every source token");
    out.push_back(TargetToken::eos());
    return {std::move(out)};
}

// Inverse of linearize. Operates on untrusted model output and reports the
// first violated constraint.
inline ParseTree delinearize(const TargetSequence& seq, const SourceQuery& query) {
    using Cat = MalformedSequence::Category;
    const auto& toks = seq.tokens;
    const int m = query.length();
    if (toks.size() < 2 || toks.front().kind != TokKind::Bos || toks.back().kind != TokKind::Eos)
        throw MalformedSequence(Cat::Unbalanced, "sequence must be wrapped in bos/eos");
    for (std::size_t i = 1; i + 1 < toks.size(); ++i)
        if (toks[i].kind == TokKind::Bos || toks[i].kind == TokKind::Eos)
            throw MalformedSequence(Cat::Unbalanced, "interior bos/eos");
    if (toks.size() == 2 || toks[1].kind != TokKind::OpenIntent)
        throw MalformedSequence(Cat::NoRootIntent, "first token must open an intent");

    std::vector<ParseNode> stack;
    ParseNode root;
    bool have_root = false;
    int last_pointer = -1;
    int pointer_count = 0;

    for (std::size_t i = 1; i + 1 < toks.size(); ++i) {
        const TargetToken& t = toks[i];
        if (have_root)
            throw MalformedSequence(Cat::Unbalanced, "content after the root closed");
        switch (t.kind) {
            case TokKind::OpenIntent:
            case TokKind::OpenSlot:
                stack.push_back(ParseNode{
                    t.kind == TokKind::OpenIntent ? NodeKind::Intent : NodeKind::Slot, t.name, {}});
                break;
            case TokKind::Close: {
                if (stack.empty())
                    throw MalformedSequence(Cat::Unbalanced, "close without matching open");
                if (!t.name.empty() && t.name != stack.back().name)
                    throw MalformedSequence(Cat::Unbalanced, "close label mismatch");
                ParseNode done = std::move(stack.back());
                stack.pop_back();
                if (stack.empty()) {
                    root = std::move(done);
                    have_root = true;
                } else {
                    stack.back().children.push_back(ParseChild::nested(std::move(done)));
                }
                break;
            }
            case TokKind::Pointer: {
                if (stack.empty())
                    throw MalformedSequence(Cat::Unbalanced, "pointer outside the parse");
                if (t.index < 0 || t.index >= m)
                    throw MalformedSequence(Cat::PointerOutOfRange,
                                            "@" + std::to_string(t.index) + " out of range");
                if (t.index <= last_pointer)
                    throw MalformedSequence(Cat::PointerOrder,
                                            "pointer indices must strictly increase");
                last_pointer = t.index;
                ++pointer_count;
                stack.back().children.push_back(ParseChild::token(t.index));
                break;
            }
            default:
                throw MalformedSequence(Cat::Unbalanced, "special token inside the parse body");
        }
    }
    if (!have_root) throw MalformedSequence(Cat::Unbalanced, "unclosed open tag");
    if (pointer_count != m)
        throw MalformedSequence(Cat::PointerCoverage, "pointers cover " +
                                    std::to_string(pointer_count) + " of " + std::to_string(m) +
                                    " source tokens");
    return {std::move(root)};
}

// True iff the token lists are identical; malformed output never matches a
// valid reference.
inline bool exact_match(const TargetSequence& pred, const TargetSequence& gold) {
    return pred.tokens == gold.tokens;
}

// Outermost intent label, or nullopt when the first content token is not an
// intent opener (counted as a misclassification downstream).
inline std::optional<std::string> intent_of(const TargetSequence& seq) {
    if (seq.tokens.size() < 3) return std::nullopt;
    const TargetToken& first = seq.tokens[1];
    if (first.kind != TokKind::OpenIntent) return std::nullopt;
    return first.name;
}

struct BioParse {
    ParseTree tree;
    int repairs = 0; // dangling I- tags promoted to B-
};

// Flat ATIS/SNIPS-style ingestion: one root intent, each maximal B/I span a
// depth-1 slot, O tokens direct children. Dangling I- tags are repaired by
// promotion to B- and counted.
inline BioParse bio_to_tree(const std::string& intent, const std::vector<std::string>& tags,
                            const SourceQuery& query) {
    const int m = query.length();
    if (static_cast<int>(tags.size()) != m)
        throw InvalidBio("expected " + std::to_string(m) + " tags, got " +
                         std::to_string(tags.size()));
    ParseNode root{NodeKind::Intent, intent, {}};
    int repairs = 0;
    int i = 0;
    while (i < m) {
        const std::string& tag = tags[i];
        if (tag == "O" || tag == "o") {
            root.children.push_back(ParseChild::token(i));
            ++i;
            continue;
        }
        if (tag.size() < 3 || tag[1] != '-' || (tag[0] != 'B' && tag[0] != 'I'))
            throw InvalidBio("bad tag '" + tag + "' at position " + std::to_string(i));
        if (tag[0] == 'I') ++repairs; // dangling I- starts a span anyway
        const std::string label = tag.substr(2);
        ParseNode slot{NodeKind::Slot, label, {}};
        slot.children.push_back(ParseChild::token(i));
        ++i;
        while (i < m && tags[i].size() >= 3 && tags[i][0] == 'I' && tags[i][1] == '-' &&
               tags[i].substr(2) == label) {
            slot.children.push_back(ParseChild::token(i));
            ++i;
        }
        root.children.push_back(ParseChild::nested(std::move(slot)));
    }
    return {ParseTree{std::move(root)}, repairs};
}

// ---- canonical text rendering ----
//
// Tags render as "[IN:NAME", "[SL:NAME", "]", pointers as "@n", all joined by
// single spaces. bos/eos are implicit. Labeled closes render as "]IN:NAME".

inline std::string render_token(const TargetToken& t) {
    switch (t.kind) {
        case TokKind::OpenIntent: return "[IN:" + t.name;
        case TokKind::OpenSlot: return "[SL:" + t.name;
        case TokKind::Close: return t.name.empty() ? "]" : "]" + t.name;
        case TokKind::Pointer: return "@" + std::to_string(t.index);
        case TokKind::Bos: return "<bos>";
        case TokKind::Eos: return "<eos>";
        case TokKind::NoInsert: return "<noins>";
        case TokKind::Pad: return "<pad>";
        case TokKind::Unk: return "<unk>";
    }
    return "?";
}

inline std::string render(const TargetSequence& seq) {
    std::string out;
    for (std::size_t i = 1; i + 1 < seq.tokens.size(); ++i) {
        if (!out.empty()) out += ' ';
        out += render_token(seq.tokens[i]);
    }
    return out;
}

// Parses the canonical rendering back into a sequence (no validation beyond
// token syntax; run delinearize for structural checks).
inline TargetSequence parse_rendered(const std::string& text) {
    TargetSequence seq;
    seq.tokens.push_back(TargetToken::bos());
    std::istringstream in(text);
    std::string w;
    while (in >> w) {
        if (w.rfind("[IN:", 0) == 0) {
            seq.tokens.push_back(TargetToken::open_intent(w.substr(4)));
        } else if (w.rfind("[SL:", 0) == 0) {
            seq.tokens.push_back(TargetToken::open_slot(w.substr(4)));
        } else if (w == "]") {
            seq.tokens.push_back(TargetToken::close());
        } else if (w.rfind("]", 0) == 0) {
            seq.tokens.push_back(TargetToken::close(w.substr(1)));
        } else if (w.size() > 1 && w[0] == '@') {
            int idx = -1;
            try {
                std::size_t used = 0;
                idx = std::stoi(w.substr(1), &used);
                if (used != w.size() - 1) idx = -1;
            } catch (const std::exception&) {
                idx = -1;
            }
            if (idx < 0)
                throw MalformedSequence(MalformedSequence::Category::PointerOutOfRange,
                                        "bad pointer token '" + w + "'");
            seq.tokens.push_back(TargetToken::pointer(idx));
        } else {
            throw MalformedSequence(MalformedSequence::Category::Unbalanced,
                                    "unrecognized token '" + w + "'");
        }
    }
    seq.tokens.push_back(TargetToken::eos());
    return seq;
}

} // namespace itsp
