#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "itsp/errors.hpp"
#include "itsp/parse_ir.hpp"
#include "itsp/rng.hpp"

namespace itsp {

struct GrammarError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IOFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Example {
    SourceQuery query;
    TargetSequence target;
    std::string language_tag;
};

// ---- vocabulary ----

// Tag-side vocabulary plus the source lexicon. Tag ids are assigned in a
// fixed deterministic order: the five special tokens, then close tags, then
// intent openers, then slot openers (each group sorted). Pointer tokens never
// enter the tag vocabulary; in the joint output space pointer position p maps
// to id V + p.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;
    static constexpr int kNoInsert = 4;

    Vocabulary() = default;

    Vocabulary(std::vector<std::string> close_keys, std::vector<std::string> intent_labels,
               std::vector<std::string> slot_labels, std::vector<std::string> source_words) {
        keys_ = {"<pad>", "<unk>", "<bos>", "<eos>", "<noins>"};
        sort_unique(close_keys);
        sort_unique(intent_labels);
        sort_unique(slot_labels);
        sort_unique(source_words);
        for (const auto& c : close_keys) keys_.push_back(c);
        for (const auto& l : intent_labels) keys_.push_back("[IN:" + l);
        for (const auto& l : slot_labels) keys_.push_back("[SL:" + l);
        for (int i = 0; i < static_cast<int>(keys_.size()); ++i) ids_[keys_[i]] = i;
        words_ = std::move(source_words);
        for (int i = 0; i < static_cast<int>(words_.size()); ++i) word_ids_[words_[i]] = i;
    }

    int V() const { return static_cast<int>(keys_.size()); }

    int pad_id() const { return kPad; }
    int unk_id() const { return kUnk; }
    int bos_id() const { return kBos; }
    int eos_id() const { return kEos; }
    int no_insert_id() const { return kNoInsert; }

    static std::string tag_key(const TargetToken& t) {
        switch (t.kind) {
            case TokKind::OpenIntent: return "[IN:" + t.name;
            case TokKind::OpenSlot: return "[SL:" + t.name;
            case TokKind::Close: return "]" + t.name;
            case TokKind::Bos: return "<bos>";
            case TokKind::Eos: return "<eos>";
            case TokKind::NoInsert: return "<noins>";
            case TokKind::Pad: return "<pad>";
            case TokKind::Unk: return "<unk>";
            case TokKind::Pointer: break;
        }
        throw DomainError("pointer tokens have no tag id");
    }

    int tag_id(const TargetToken& t) const {
        auto it = ids_.find(tag_key(t));
        return it == ids_.end() ? kUnk : it->second;
    }

    bool knows(const TargetToken& t) const {
        return t.kind == TokKind::Pointer || ids_.count(tag_key(t)) > 0;
    }

    // Joint output space: tag ids then pointers.
    int joint_id(const TargetToken& t) const {
        if (t.kind == TokKind::Pointer) return V() + t.index;
        return tag_id(t);
    }

    TargetToken token_of_joint(int id) const {
        if (id >= V()) return TargetToken::pointer(id - V());
        const std::string& k = keys_[id];
        if (k == "<pad>") return TargetToken::pad();
        if (k == "<unk>") return TargetToken::unk();
        if (k == "<bos>") return TargetToken::bos();
        if (k == "<eos>") return TargetToken::eos();
        if (k == "<noins>") return TargetToken::no_insert();
        if (k.rfind("[IN:", 0) == 0) return TargetToken::open_intent(k.substr(4));
        if (k.rfind("[SL:", 0) == 0) return TargetToken::open_slot(k.substr(4));
        return TargetToken::close(k.substr(1));
    }

    const std::vector<std::string>& tag_keys() const { return keys_; }

    // source lexicon; the embedding table has two extra rows for unk and pad
    int lexicon_size() const { return static_cast<int>(words_.size()); }
    int encoder_rows() const { return lexicon_size() + 2; }
    int unk_word_row() const { return lexicon_size(); }
    int pad_word_row() const { return lexicon_size() + 1; }

    int word_row(const std::string& w) const {
        auto it = word_ids_.find(w);
        return it == word_ids_.end() ? unk_word_row() : it->second;
    }

    const std::vector<std::string>& source_words() const { return words_; }

    nlohmann::json to_json() const {
        return nlohmann::json{{"tags", keys_}, {"words", words_}};
    }

    static Vocabulary from_json(const nlohmann::json& j) {
        Vocabulary v;
        v.keys_ = j.at("tags").get<std::vector<std::string>>();
        v.words_ = j.at("words").get<std::vector<std::string>>();
        for (int i = 0; i < static_cast<int>(v.keys_.size()); ++i) v.ids_[v.keys_[i]] = i;
        for (int i = 0; i < static_cast<int>(v.words_.size()); ++i) v.word_ids_[v.words_[i]] = i;
        return v;
    }

    bool operator==(const Vocabulary& o) const { return keys_ == o.keys_ && words_ == o.words_; }

private:
    static void sort_unique(std::vector<std::string>& v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    }

    std::vector<std::string> keys_;
    std::unordered_map<std::string, int> ids_;
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> word_ids_;
};

inline Vocabulary build_vocab(const std::vector<Example>& examples) {
    std::vector<std::string> closes, intents, slots, words;
    for (const auto& ex : examples) {
        for (const auto& t : ex.target.tokens) {
            switch (t.kind) {
                case TokKind::OpenIntent: intents.push_back(t.name); break;
                case TokKind::OpenSlot: slots.push_back(t.name); break;
                case TokKind::Close: closes.push_back("]" + t.name); break;
                default: break;
            }
        }
        for (const auto& w : ex.query.tokens) words.push_back(w);
    }
    return Vocabulary(std::move(closes), std::move(intents), std::move(slots), std::move(words));
}

// ---- synthetic grammar ----

struct SlotSpec {
    std::string name;
    std::vector<std::string> fillers;
    std::vector<std::string> nests; // intents this slot may contain
    int max_filler_words = 2;
};

struct IntentSpec {
    std::string name;
    // carrier templates: literal words plus "$SLOT" references
    std::vector<std::vector<std::string>> carriers;
};

struct GrammarSpec {
    std::vector<IntentSpec> intents;
    std::vector<SlotSpec> slots;
    int nesting_depth = 2;
    std::string word_order = "identity"; // or "reverse"
    double nest_probability = 0.25;
    bool labeled_close = false; // per-label close tags in generated targets
    std::string language_tag = "en";
    std::vector<std::string> extra_vocab;

    const SlotSpec* find_slot(const std::string& name) const {
        for (const auto& s : slots)
            if (s.name == name) return &s;
        return nullptr;
    }

    const IntentSpec* find_intent(const std::string& name) const {
        for (const auto& i : intents)
            if (i.name == name) return &i;
        return nullptr;
    }

    void validate() const {
        if (nesting_depth < 1) throw GrammarError("nesting_depth must be >= 1");
        if (word_order != "identity" && word_order != "reverse" &&
            word_order != "root_reverse")
            throw GrammarError("word_order must be identity, reverse or root_reverse");
        if (intents.empty()) throw GrammarError("grammar needs at least one intent");
        for (const auto& in : intents) {
            if (in.carriers.empty())
                throw GrammarError("intent " + in.name + " has no carrier templates");
            for (const auto& tpl : in.carriers)
                for (const auto& item : tpl)
                    if (!item.empty() && item[0] == '$' && find_slot(item.substr(1)) == nullptr)
                        throw GrammarError("intent " + in.name + " references unknown slot " +
                                           item.substr(1));
        }
        for (const auto& s : slots) {
            if (s.fillers.empty()) throw GrammarError("slot " + s.name + " has an empty lexicon");
            for (const auto& n : s.nests)
                if (find_intent(n) == nullptr)
                    throw GrammarError("slot " + s.name + " nests unknown intent " + n);
        }
    }

    // Full surface lexicon: carrier literals, fillers and extras, sorted.
    std::vector<std::string> surface_lexicon() const {
        std::set<std::string> words(extra_vocab.begin(), extra_vocab.end());
        for (const auto& in : intents)
            for (const auto& tpl : in.carriers)
                for (const auto& item : tpl)
                    if (item.empty() || item[0] != '$') words.insert(item);
        for (const auto& s : slots) words.insert(s.fillers.begin(), s.fillers.end());
        return {words.begin(), words.end()};
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["language_tag"] = language_tag;
        j["nesting_depth"] = nesting_depth;
        j["word_order"] = word_order;
        j["nest_probability"] = nest_probability;
        j["labeled_close"] = labeled_close;
        j["vocab"] = extra_vocab;
        for (const auto& in : intents)
            j["intents"].push_back({{"name", in.name}, {"carriers", in.carriers}});
        for (const auto& s : slots)
            j["slots"].push_back({{"name", s.name},
                                  {"fillers", s.fillers},
                                  {"nests", s.nests},
                                  {"max_filler_words", s.max_filler_words}});
        return j;
    }

    static GrammarSpec from_json(const nlohmann::json& j) {
        GrammarSpec g;
        g.language_tag = j.value("language_tag", "en");
        g.nesting_depth = j.value("nesting_depth", 2);
        g.word_order = j.value("word_order", "identity");
        g.nest_probability = j.value("nest_probability", 0.25);
        g.labeled_close = j.value("labeled_close", false);
        g.extra_vocab = j.value("vocab", std::vector<std::string>{});
        for (const auto& ji : j.value("intents", nlohmann::json::array())) {
            IntentSpec in;
            in.name = ji.at("name").get<std::string>();
            in.carriers = ji.at("carriers").get<std::vector<std::vector<std::string>>>();
            g.intents.push_back(std::move(in));
        }
        for (const auto& js : j.value("slots", nlohmann::json::array())) {
            SlotSpec s;
            s.name = js.at("name").get<std::string>();
            s.fillers = js.at("fillers").get<std::vector<std::string>>();
            s.nests = js.value("nests", std::vector<std::string>{});
            s.max_filler_words = js.value("max_filler_words", 2);
            g.slots.push_back(std::move(s));
        }
        g.validate();
        return g;
    }
};

namespace detail {

inline bool template_has_nestable(const GrammarSpec& g, const std::vector<std::string>& tpl) {
    for (const auto& item : tpl)
        if (!item.empty() && item[0] == '$') {
            const SlotSpec* s = g.find_slot(item.substr(1));
            if (s && !s->nests.empty()) return true;
        }
    return false;
}

inline ParseNode gen_intent(const GrammarSpec& g, const IntentSpec& intent, int remaining_depth,
                            bool force_nest, Rng& rng, std::vector<std::string>& words);

inline ParseNode gen_slot(const GrammarSpec& g, const SlotSpec& slot, int remaining_depth,
                          bool nest_here, Rng& rng, std::vector<std::string>& words) {
    ParseNode node{NodeKind::Slot, slot.name, {}};
    if (nest_here) {
        const std::string& nested = slot.nests[rng.below(static_cast<int>(slot.nests.size()))];
        node.children.push_back(ParseChild::nested(
            gen_intent(g, *g.find_intent(nested), remaining_depth - 1, false, rng, words)));
        return node;
    }
    const int n_words = 1 + rng.below(std::max(1, slot.max_filler_words));
    for (int i = 0; i < n_words; ++i) {
        node.children.push_back(ParseChild::token(static_cast<int>(words.size())));
        words.push_back(slot.fillers[rng.below(static_cast<int>(slot.fillers.size()))]);
    }
    return node;
}

inline ParseNode gen_intent(const GrammarSpec& g, const IntentSpec& intent, int remaining_depth,
                            bool force_nest, Rng& rng, std::vector<std::string>& words) {
    std::vector<const std::vector<std::string>*> usable;
    for (const auto& tpl : intent.carriers)
        if (!force_nest || template_has_nestable(g, tpl)) usable.push_back(&tpl);
    if (usable.empty())
        for (const auto& tpl : intent.carriers) usable.push_back(&tpl);
    const auto& tpl = *usable[rng.below(static_cast<int>(usable.size()))];

    ParseNode node{NodeKind::Intent, intent.name, {}};
    bool must_nest = force_nest;
    for (const auto& item : tpl) {
        if (item.empty() || item[0] != '$') {
            node.children.push_back(ParseChild::token(static_cast<int>(words.size())));
            words.push_back(item);
            continue;
        }
        const SlotSpec& slot = *g.find_slot(item.substr(1));
        const bool can_nest = remaining_depth >= 2 && !slot.nests.empty();
        bool nest_here = false;
        if (can_nest) {
            if (must_nest) {
                nest_here = true;
                must_nest = false;
            } else {
                nest_here = rng.next_double() < g.nest_probability;
            }
        }
        node.children.push_back(
            ParseChild::nested(gen_slot(g, slot, remaining_depth, nest_here, rng, words)));
    }
    return node;
}

inline void mirror_node(ParseNode& node, int m) {
    std::reverse(node.children.begin(), node.children.end());
    for (auto& c : node.children) {
        if (c.is_token())
            c.source_index = m - 1 - c.source_index;
        else
            mirror_node(*c.node, m);
    }
}

inline void collect_token_children(ParseNode& node, std::vector<int*>& slots) {
    for (auto& c : node.children) {
        if (c.is_token())
            slots.push_back(&c.source_index);
        else
            collect_token_children(*c.node, slots);
    }
}

// Renumbers source indices to follow the tree's current left-to-right order
// and permutes the surface words to match. Used after reordering children.
inline void reindex_tree(ParseNode& root, std::vector<std::string>& words) {
    std::vector<int*> token_children;
    collect_token_children(root, token_children);
    std::vector<std::string> reordered;
    reordered.reserve(words.size());
    for (std::size_t i = 0; i < token_children.size(); ++i) {
        reordered.push_back(words[*token_children[i]]);
        *token_children[i] = static_cast<int>(i);
    }
    words = std::move(reordered);
}

inline int tree_depth(const ParseNode& node) {
    int d = node.kind == NodeKind::Intent ? 1 : 0;
    int best = 0;
    for (const auto& c : node.children)
        if (!c.is_token()) best = std::max(best, tree_depth(*c.node));
    return d + best;
}

} // namespace detail

// Deterministic synthetic corpus: a pure function of (spec, count, seed).
// Example i targets intent nesting depth 1 + (i mod nesting_depth), so the
// depth distribution always covers 1..nesting_depth when the grammar has
// nestable slots.
inline std::vector<Example> generate_synthetic(const GrammarSpec& spec, int count,
                                               std::uint64_t seed) {
    spec.validate();
    if (count < 1) throw GrammarError("count must be >= 1");

    std::vector<const IntentSpec*> nest_roots;
    for (const auto& in : spec.intents)
        for (const auto& tpl : in.carriers)
            if (detail::template_has_nestable(spec, tpl)) {
                nest_roots.push_back(&in);
                break;
            }

    Rng rng(seed);
    std::vector<Example> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        const int target_depth = 1 + (spec.nesting_depth > 0 ? i % spec.nesting_depth : 0);
        const bool force_nest = target_depth >= 2 && !nest_roots.empty();
        const IntentSpec& root =
            force_nest ? *nest_roots[rng.below(static_cast<int>(nest_roots.size()))]
                       : spec.intents[rng.below(static_cast<int>(spec.intents.size()))];
        std::vector<std::string> words;
        ParseNode root_node =
            detail::gen_intent(spec, root, target_depth, force_nest, rng, words);
        const int m = static_cast<int>(words.size());
        if (spec.word_order == "reverse") {
            detail::mirror_node(root_node, m);
            std::reverse(words.begin(), words.end());
        } else if (spec.word_order == "root_reverse") {
            // constituent-level reorder: the root's children flip, each
            // subtree keeps its internal order
            std::reverse(root_node.children.begin(), root_node.children.end());
            detail::reindex_tree(root_node, words);
        }
        Example ex;
        ex.query.tokens = std::move(words);
        ex.language_tag = spec.language_tag;
        ex.target = linearize(ParseTree{std::move(root_node)}, ex.query, spec.labeled_close);
        out.push_back(std::move(ex));
    }
    return out;
}

// Language-transfer analog: same labels and structure, surface lexicon mapped
// through a suffix and (by default) reversed word order.
inline GrammarSpec transfer_variant(const GrammarSpec& base, const std::string& suffix,
                                    const std::string& word_order = "reverse") {
    GrammarSpec g = base;
    g.language_tag = base.language_tag + "-" + (suffix.empty() ? "x" : suffix);
    g.word_order = word_order;
    auto map_word = [&suffix](std::string& w) { w += suffix; };
    for (auto& in : g.intents)
        for (auto& tpl : in.carriers)
            for (auto& item : tpl)
                if (item.empty() || item[0] != '$') map_word(item);
    for (auto& s : g.slots)
        for (auto& f : s.fillers) map_word(f);
    for (auto& w : g.extra_vocab) map_word(w);
    return g;
}

// Default desk-scale grammar: 8 intents, 12 slots, nesting depth 2, roughly
// 200 surface words, mean query length around 9.
inline GrammarSpec default_grammar() {
    GrammarSpec g;
    g.nesting_depth = 2;
    g.nest_probability = 0.25;

    auto slot = [&](const char* name, std::vector<std::string> fillers,
                    std::vector<std::string> nests = {}, int max_words = 2) {
        g.slots.push_back(SlotSpec{name, std::move(fillers), std::move(nests), max_words});
    };
    slot("LOCATION", {"boston", "denver", "paris", "tokyo", "austin", "seattle", "madrid", "oslo",
                      "cairo", "lima", "dublin", "prague"});
    slot("DATETIME", {"today", "tomorrow", "tonight", "monday", "tuesday", "friday", "noon",
                      "midnight", "morning", "evening", "sunday", "saturday"});
    slot("ARTIST", {"beatles", "coldplay", "adele", "drake", "queen", "abba", "eminem", "rihanna",
                    "nirvana", "madonna", "beyonce", "sting"});
    slot("SONG", {"yesterday", "hello", "believe", "thriller", "imagine", "respect", "stay",
                  "happy", "roar", "firework", "royals", "shallow"});
    slot("RESTAURANT", {"vesuvio", "luigis", "sakura", "tandoor", "elcamino", "bluefin",
                        "trattoria", "bistro", "noodlehouse", "greenleaf", "smokehouse",
                        "lapaella"});
    slot("PARTY_SIZE", {"two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
                        "eleven", "twelve", "thirteen"}, {}, 1);
    slot("RECIPIENT", {"alice", "bob", "carol", "david", "erin", "frank", "grace", "henry",
                       "irene", "jack", "karen", "leo"}, {}, 1);
    slot("MESSAGE", {"running", "late", "meeting", "moved", "dinner", "ready", "call", "back",
                     "soon", "landed", "safe", "waiting"}, {"CREATE_REMINDER", "CALL_CONTACT"}, 3);
    slot("DESTINATION", {"airport", "downtown", "museum", "stadium", "harbor", "library", "zoo",
                         "mall", "campus", "beach", "cinema", "gym"});
    slot("ORIGIN", {"home", "work", "school", "office", "hotel", "station", "garage", "apartment",
                    "house", "loft", "studio", "dorm"});
    slot("TODO", {"groceries", "laundry", "dishes", "homework", "taxes", "invoices", "emails",
                  "workout", "packing", "cleaning", "reading", "writing"},
         {"CALL_CONTACT", "PLAY_MUSIC", "SEND_MESSAGE"});
    slot("CONTACT", {"mom", "dad", "grandma", "grandpa", "uncle", "aunt", "cousin", "boss",
                     "doctor", "dentist", "plumber", "neighbor"}, {}, 1);

    auto intent = [&](const char* name, std::vector<std::vector<std::string>> carriers) {
        g.intents.push_back(IntentSpec{name, std::move(carriers)});
    };
    intent("GET_WEATHER", {{"whats", "the", "weather", "in", "$LOCATION"},
                           {"weather", "forecast", "for", "$LOCATION", "$DATETIME"},
                           {"will", "it", "rain", "in", "$LOCATION", "$DATETIME"}});
    intent("PLAY_MUSIC", {{"play", "$SONG", "by", "$ARTIST"},
                          {"play", "some", "$ARTIST"},
                          {"put", "on", "$SONG"}});
    intent("BOOK_TABLE", {{"book", "a", "table", "at", "$RESTAURANT", "for", "$PARTY_SIZE"},
                          {"reserve", "$RESTAURANT", "for", "$PARTY_SIZE", "people", "$DATETIME"}});
    intent("SET_ALARM", {{"set", "an", "alarm", "for", "$DATETIME"},
                         {"wake", "me", "up", "$DATETIME"}});
    intent("SEND_MESSAGE", {{"text", "$RECIPIENT", "that", "$MESSAGE"},
                            {"send", "a", "message", "to", "$RECIPIENT", "saying", "$MESSAGE"}});
    intent("GET_DIRECTIONS", {{"directions", "from", "$ORIGIN", "to", "$DESTINATION"},
                              {"how", "do", "i", "get", "to", "$DESTINATION"},
                              {"navigate", "to", "$DESTINATION"}});
    intent("CREATE_REMINDER", {{"remind", "me", "to", "$TODO", "$DATETIME"},
                               {"create", "a", "reminder", "to", "$TODO"}});
    intent("CALL_CONTACT", {{"call", "$CONTACT"},
                            {"give", "$CONTACT", "a", "ring"},
                            {"dial", "$CONTACT", "now"}});
    g.validate();
    return g;
}

// ---- file ingestion ----

struct LoadResult {
    std::vector<Example> examples;
    int skipped = 0;
    int repairs = 0;
    std::vector<std::string> messages; // "line N: category - detail"
};

namespace detail {

inline void report(LoadResult& r, int line_no, const std::string& category,
                   const std::string& detail) {
    ++r.skipped;
    r.messages.push_back("line " + std::to_string(line_no) + ": " + category + " - " + detail);
}

inline std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

} // namespace detail

// Canonical corpus format: one JSON object per line with "tokens" and
// "target" (canonical rendering), optional "lang".
inline void save_jsonl(const std::string& path, const std::vector<Example>& examples) {
    std::ofstream out(path);
    if (!out) throw IOFailure("cannot write " + path);
    for (const auto& ex : examples) {
        nlohmann::json j{{"tokens", ex.query.tokens}, {"target", render(ex.target)}};
        if (!ex.language_tag.empty()) j["lang"] = ex.language_tag;
        out << j.dump() << "\n";
    }
}

inline LoadResult load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IOFailure("cannot read " + path);
    LoadResult r;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        Example ex;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            ex.query.tokens = j.at("tokens").get<std::vector<std::string>>();
            ex.language_tag = j.value("lang", "");
            ex.target = parse_rendered(j.at("target").get<std::string>());
            delinearize(ex.target, ex.query); // validation only
        } catch (const MalformedSequence& e) {
            detail::report(r, line_no, MalformedSequence::name(e.category), e.what());
            continue;
        } catch (const std::exception& e) {
            detail::report(r, line_no, "json", e.what());
            continue;
        }
        r.examples.push_back(std::move(ex));
    }
    return r;
}

// TOP TSV: three tab-separated columns (raw utterance, tokenized utterance,
// bracketed parse). Column 3 carries the source words inline; they must match
// column 2 in order and become pointers.
inline LoadResult load_top_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IOFailure("cannot read " + path);
    LoadResult r;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (cols.size() != 3) {
            detail::report(r, line_no, "columns", "expected 3 tab-separated columns, got " +
                                                      std::to_string(cols.size()));
            continue;
        }
        const std::vector<std::string> tokens = detail::split_ws(cols[1]);
        const std::vector<std::string> items = detail::split_ws(cols[2]);
        if (tokens.empty()) {
            detail::report(r, line_no, "empty", "no tokens in column 2");
            continue;
        }

        std::vector<ParseNode> stack;
        ParseNode root;
        bool have_root = false, bad = false;
        int pos = 0;
        std::string why, category = "parse";
        for (const auto& item : items) {
            if (have_root) { bad = true; why = "content after root closed"; break; }
            if (item.rfind("[IN:", 0) == 0) {
                stack.push_back(ParseNode{NodeKind::Intent, item.substr(4), {}});
            } else if (item.rfind("[SL:", 0) == 0) {
                if (stack.empty()) { bad = true; why = "slot outside intent"; break; }
                stack.push_back(ParseNode{NodeKind::Slot, item.substr(4), {}});
            } else if (item == "]") {
                if (stack.empty()) { bad = true; category = "unbalanced"; why = "extra ]"; break; }
                ParseNode done = std::move(stack.back());
                stack.pop_back();
                if (stack.empty()) {
                    root = std::move(done);
                    have_root = true;
                } else {
                    stack.back().children.push_back(ParseChild::nested(std::move(done)));
                }
            } else {
                if (stack.empty()) { bad = true; why = "word outside the parse"; break; }
                if (pos >= static_cast<int>(tokens.size()) || tokens[pos] != item) {
                    bad = true;
                    category = "token-mismatch";
                    why = "'" + item + "' does not match column 2";
                    break;
                }
                stack.back().children.push_back(ParseChild::token(pos));
                ++pos;
            }
        }
        if (!bad && (!have_root || !stack.empty())) {
            bad = true;
            category = "unbalanced";
            why = "unclosed brackets";
        }
        if (!bad && pos != static_cast<int>(tokens.size())) {
            bad = true;
            category = "token-mismatch";
            why = "parse covers " + std::to_string(pos) + " of " +
                  std::to_string(tokens.size()) + " tokens";
        }
        if (!bad && root.kind != NodeKind::Intent) {
            bad = true;
            category = "no-root-intent";
            why = "root is not an intent";
        }
        if (bad) {
            detail::report(r, line_no, category, why);
            continue;
        }
        Example ex;
        ex.query.tokens = tokens;
        try {
            ex.target = linearize(ParseTree{std::move(root)}, ex.query);
            delinearize(ex.target, ex.query);
        } catch (const std::exception& e) {
            detail::report(r, line_no, "parse", e.what());
            continue;
        }
        r.examples.push_back(std::move(ex));
    }
    return r;
}

// BIO format: blocks of "token<TAB>tag" lines separated by blank lines, each
// block headed by "# intent=NAME". Dangling I- tags are repaired and counted.
inline LoadResult load_bio(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IOFailure("cannot read " + path);
    LoadResult r;
    std::string line;
    int line_no = 0;

    std::string intent;
    std::vector<std::string> tokens, tags;
    int block_start = 1;
    bool block_bad = false;
    std::string block_why;

    auto flush = [&]() {
        if (intent.empty() && tokens.empty()) return;
        if (block_bad) {
            detail::report(r, block_start, "block", block_why);
        } else if (intent.empty()) {
            detail::report(r, block_start, "block", "missing '# intent=' header");
        } else if (tokens.empty()) {
            detail::report(r, block_start, "block", "empty block");
        } else {
            Example ex;
            ex.query.tokens = tokens;
            try {
                BioParse bp = bio_to_tree(intent, tags, ex.query);
                r.repairs += bp.repairs;
                ex.target = linearize(bp.tree, ex.query);
                r.examples.push_back(std::move(ex));
            } catch (const std::exception& e) {
                detail::report(r, block_start, "bio", e.what());
            }
        }
        intent.clear();
        tokens.clear();
        tags.clear();
        block_bad = false;
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            flush();
            block_start = line_no + 1;
            continue;
        }
        if (line.rfind("# intent=", 0) == 0) {
            intent = line.substr(9);
            continue;
        }
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) {
            block_bad = true;
            block_why = "line " + std::to_string(line_no) + " has no tab";
            continue;
        }
        tokens.push_back(line.substr(0, tab));
        tags.push_back(line.substr(tab + 1));
    }
    flush();
    return r;
}

} // namespace itsp
