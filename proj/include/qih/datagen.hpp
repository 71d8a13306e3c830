#pragma once

// Synthetic query logs shaped like product-search engagement data, plus the
// ingestion steps that turn logs into training sets: action-weighted
// aggregation, threshold filtering, majority downsampling and leak-free splits.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "qih/heads.hpp"
#include "qih/random.hpp"
#include "qih/tokenizer.hpp"

namespace qih {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ActionType { Click, Purchase };

inline std::string to_string(ActionType a) { return a == ActionType::Click ? "click" : "purchase"; }

inline ActionType parse_action(std::string_view s) {
    if (s == "click") return ActionType::Click;
    if (s == "purchase") return ActionType::Purchase;
    throw DataError("unknown action type '" + std::string(s) + "'");
}

struct QueryRecord {
    std::string query;
    int category = 0;  // taxonomy leaf id
    ActionType action = ActionType::Click;
    int count = 1;
    bool operator==(const QueryRecord&) const = default;
};

// Multi-label category sets (domain task) or a single 0/1 label (intent task).
struct LabeledExample {
    std::string query;
    std::vector<int> labels;

    int binary_label() const {
        if (labels.size() != 1 || (labels[0] != 0 && labels[0] != 1))
            throw DataError("example '" + query + "' does not carry a binary label");
        return labels[0];
    }
    bool operator==(const LabeledExample&) const = default;
};

struct IntentLexicon {
    std::string name;
    std::vector<std::string> prefixes;  // prepended phrases, e.g. "help with"
    std::vector<std::string> suffixes;  // appended phrases, e.g. "repair"
};

inline std::vector<IntentLexicon> default_intents() {
    return {
        {"help", {"help with", "how to fix", "how to install", "support for"}, {"repair", "not working", "manual"}},
        {"adult", {"adult", "mature", "explicit"}, {"for adults", "nsfw"}},
        {"low_asp", {"cheap", "budget", "inexpensive", "discount"}, {"under 10", "on sale"}},
    };
}

struct SyntheticSpec {
    std::size_t departments = 10;
    std::size_t groups_per_department = 4;
    std::size_t leaves_per_group = 5;
    std::size_t nouns_per_leaf = 3;
    std::size_t modifiers_per_group = 3;
    std::size_t words_per_department = 2;
    std::vector<IntentLexicon> intents = default_intents();
    // Fraction of departments whose leaves are intent-positive, per intent.
    double intent_department_fraction = 0.3;
    // Probability a positive query carries a surface marker; the rest are
    // positive only through their product category.
    double marker_probability = 0.5;
    // Probability a log record also carries a marker of another intent.
    double log_cross_marker_rate = 0.3;
    double noise_rate = 0.0;
    std::array<double, 2> priors{0.5, 0.5};  // {negative, positive}
    double purchase_rate = 0.2;
    std::uint64_t seed = 1;

    void validate() const {
        if (departments == 0 || groups_per_department == 0 || leaves_per_group == 0)
            throw DataError("synthetic spec: empty taxonomy");
        if (nouns_per_leaf == 0) throw DataError("synthetic spec: leaves need at least one noun");
        if (noise_rate < 0 || noise_rate >= 1) throw DataError("synthetic spec: noise rate must be in [0, 1)");
        if (priors[0] < 0 || priors[1] < 0 || std::abs(priors[0] + priors[1] - 1.0) > 1e-9)
            throw DataError("synthetic spec: priors must be non-negative and sum to 1");
        if (marker_probability < 0 || marker_probability > 1)
            throw DataError("synthetic spec: marker probability must be in [0, 1]");
        if (log_cross_marker_rate < 0 || log_cross_marker_rate > 1)
            throw DataError("synthetic spec: cross marker rate must be in [0, 1]");
        if (intents.empty()) throw DataError("synthetic spec: at least one intent lexicon required");
    }
};

// Deterministic world derived from a spec: taxonomy, per-node vocabulary,
// intent category sets, and a WordPiece vocabulary covering all of it.
class SyntheticWorld {
public:
    explicit SyntheticWorld(SyntheticSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        Rng rng(spec_.seed);
        build_syllables();
        std::vector<TaxonomyNode> nodes{{0, "root", -1, false}};
        auto add = [&](int parent, const std::string& prefix) {
            const int id = static_cast<int>(nodes.size());
            nodes.push_back({id, prefix + std::to_string(id), parent, false});
            return id;
        };
        node_words_.emplace_back();
        for (std::size_t d = 0; d < spec_.departments; ++d) {
            const int dept = add(0, "department-");
            departments_.push_back(dept);
            node_words_.push_back(fresh_words(rng, spec_.words_per_department));
            for (std::size_t g = 0; g < spec_.groups_per_department; ++g) {
                const int group = add(dept, "group-");
                node_words_.push_back(fresh_words(rng, spec_.modifiers_per_group));
                for (std::size_t l = 0; l < spec_.leaves_per_group; ++l) {
                    add(group, "leaf-");
                    node_words_.push_back(fresh_words(rng, spec_.nouns_per_leaf));
                }
            }
        }
        taxonomy_ = Taxonomy(std::move(nodes));
        leaves_ = taxonomy_.leaves();
        const auto n_groups = std::max<std::size_t>(
            1, static_cast<std::size_t>(
                   std::lround(spec_.intent_department_fraction * static_cast<double>(departments_.size()))));
        for (std::size_t i = 0; i < spec_.intents.size(); ++i) {
            auto ds = departments_;
            rng.shuffle(ds);
            std::set<int> leaves;
            for (std::size_t k = 0; k < n_groups && k < ds.size(); ++k)
                for (int group : taxonomy_.children(ds[k]))
                    for (int leaf : taxonomy_.children(group)) leaves.insert(leaf);
            std::vector<int> pos, neg;
            for (int leaf : leaves_) (leaves.count(leaf) ? pos : neg).push_back(leaf);
            if (pos.empty() || neg.empty()) throw DataError("synthetic spec: intent category split is degenerate");
            intent_leaves_.push_back(std::move(pos));
            non_intent_leaves_.push_back(std::move(neg));
        }
    }

    const SyntheticSpec& spec() const { return spec_; }
    const Taxonomy& taxonomy() const { return taxonomy_; }
    const std::vector<int>& leaves() const { return leaves_; }

    std::size_t intent_index(const std::string& name) const {
        for (std::size_t i = 0; i < spec_.intents.size(); ++i)
            if (spec_.intents[i].name == name) return i;
        throw DataError("unknown intent '" + name + "'");
    }

    bool leaf_is_intent_positive(std::size_t intent, int leaf) const {
        const auto& pos = intent_leaves_.at(intent);
        return std::binary_search(pos.begin(), pos.end(), leaf);
    }

    bool has_marker(std::size_t intent, const std::string& query) const {
        const auto& lex = spec_.intents.at(intent);
        const std::string padded = " " + query + " ";
        for (const auto& phrases : {lex.prefixes, lex.suffixes})
            for (const auto& m : phrases)
                if (padded.find(" " + m + " ") != std::string::npos) return true;
        return false;
    }

    // Product-type query for a leaf: optional department word, optional group
    // modifier, one or two leaf nouns.
    std::string product_query(Rng& rng, int leaf) const {
        const int group = taxonomy_.node(leaf).parent;
        const int dept = taxonomy_.node(group).parent;
        std::vector<std::string> words;
        if (rng.bernoulli(0.3)) words.push_back(rng.pick(node_words_[static_cast<std::size_t>(dept)]));
        if (rng.bernoulli(0.6)) words.push_back(rng.pick(node_words_[static_cast<std::size_t>(group)]));
        const auto& nouns = node_words_[static_cast<std::size_t>(leaf)];
        words.push_back(rng.pick(nouns));
        if (nouns.size() > 1 && rng.bernoulli(0.3)) {
            const auto& second = rng.pick(nouns);
            if (second != words.back()) words.push_back(second);
        }
        std::string q;
        for (const auto& w : words) q += (q.empty() ? "" : " ") + w;
        return q;
    }

    std::string decorate(Rng& rng, std::size_t intent, const std::string& query) const {
        const auto& lex = spec_.intents.at(intent);
        const bool use_prefix = lex.suffixes.empty() || (!lex.prefixes.empty() && rng.bernoulli(0.6));
        return use_prefix ? rng.pick(lex.prefixes) + " " + query : query + " " + rng.pick(lex.suffixes);
    }

    // One query for `intent` with the requested truth. Returns (query, source leaf).
    std::pair<std::string, int> intent_query(Rng& rng, std::size_t intent, bool positive) const {
        const auto& pool = positive ? intent_leaves_.at(intent) : non_intent_leaves_.at(intent);
        const int leaf = rng.pick(pool);
        std::string q = product_query(rng, leaf);
        if (positive && rng.bernoulli(spec_.marker_probability)) q = decorate(rng, intent, q);
        return {q, leaf};
    }

    // Ground truth: positive iff the source category is intent-positive or a marker is present.
    int truth(std::size_t intent, int leaf, const std::string& query) const {
        return leaf_is_intent_positive(intent, leaf) || has_marker(intent, query) ? 1 : 0;
    }

    // Every syllable as a word-initial and a "##" continuation piece, plus all
    // lexicon words whole, plus the special tokens.
    Vocab vocab() const {
        std::vector<std::string> tokens{std::string(kPadToken), std::string(kUnkToken), std::string(kClsToken)};
        for (const auto& s : syllables_) tokens.push_back(s);
        for (const auto& s : syllables_) tokens.push_back(std::string(kContinuationPrefix) + s);
        std::set<std::string> seen(tokens.begin(), tokens.end());
        for (const auto& lex : spec_.intents)
            for (const auto& phrases : {lex.prefixes, lex.suffixes})
                for (const auto& p : phrases)
                    for (const auto& w : split_words(p))
                        if (seen.insert(w).second) tokens.push_back(w);
        for (char c = '0'; c <= '9'; ++c)
            if (seen.insert(std::string(1, c)).second) tokens.push_back(std::string(1, c));
        return Vocab::from_tokens(std::move(tokens));
    }

private:
    void build_syllables() {
        const std::string consonants = "bdfgklmnprstvz";
        const std::string vowels = "aeiou";
        for (char c : consonants)
            for (char v : vowels) syllables_.push_back(std::string{c, v});
    }

    std::vector<std::string> fresh_words(Rng& rng, std::size_t n) {
        std::vector<std::string> out;
        while (out.size() < n) {
            std::string w;
            const std::size_t len = 2 + rng.below(2);
            for (std::size_t i = 0; i < len; ++i) w += rng.pick(syllables_);
            if (used_words_.insert(w).second) out.push_back(w);
        }
        return out;
    }

    SyntheticSpec spec_;
    Taxonomy taxonomy_;
    std::vector<std::string> syllables_;
    std::set<std::string> used_words_;
    std::vector<std::vector<std::string>> node_words_;
    std::vector<int> departments_;
    std::vector<int> leaves_;
    std::vector<std::vector<int>> intent_leaves_;
    std::vector<std::vector<int>> non_intent_leaves_;
};

struct SyntheticLog {
    std::vector<QueryRecord> records;
    // truth[r][i]: intent i ground truth for records[r], intents in spec order.
    std::vector<std::vector<int>> truth;
    // Leaf the query text was generated from (differs from the record's category only under noise).
    std::vector<int> source;
};

// Engagement records. Each record's positivity for the first intent is drawn
// from the priors, and some records also carry a marker of another intent.
// Category noise replaces the engaged leaf with a random one.
inline SyntheticLog generate_synthetic_log(const SyntheticWorld& world, std::size_t n) {
    if (n < 1) throw DataError("generate_synthetic_log: need at least one record");
    const auto& spec = world.spec();
    Rng rng(spec.seed ^ 0x5eed5eedull);
    SyntheticLog log;
    log.records.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        const bool positive = rng.bernoulli(spec.priors[1]);
        auto [query, leaf] = world.intent_query(rng, 0, positive);
        if (spec.intents.size() > 1 && rng.bernoulli(spec.log_cross_marker_rate))
            query = world.decorate(rng, 1 + rng.below(spec.intents.size() - 1), query);
        std::vector<int> truth;
        for (std::size_t i = 0; i < spec.intents.size(); ++i) truth.push_back(world.truth(i, leaf, query));
        int engaged = leaf;
        if (rng.bernoulli(spec.noise_rate)) engaged = rng.pick(world.leaves());
        const auto action = rng.bernoulli(spec.purchase_rate) ? ActionType::Purchase : ActionType::Click;
        const int count = 1 + static_cast<int>(rng.below(4));
        log.records.push_back({std::move(query), engaged, action, count});
        log.truth.push_back(std::move(truth));
        log.source.push_back(leaf);
    }
    return log;
}

// Binary examples for one intent; labels flip with the spec's noise rate.
inline std::vector<LabeledExample> generate_intent_examples(const SyntheticWorld& world, const std::string& intent,
                                                            std::size_t n, std::uint64_t seed) {
    if (n < 1) throw DataError("generate_intent_examples: need at least one example");
    const auto idx = world.intent_index(intent);
    const auto& spec = world.spec();
    Rng rng(seed);
    std::vector<LabeledExample> out;
    out.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        const bool positive = rng.bernoulli(spec.priors[1]);
        auto [query, leaf] = world.intent_query(rng, idx, positive);
        int label = world.truth(idx, leaf, query);
        if (rng.bernoulli(spec.noise_rate)) label = 1 - label;
        out.push_back({std::move(query), {label}});
    }
    return out;
}

struct ActionWeights {
    double click = 1.0;
    double purchase = 5.0;
    double operator()(ActionType a) const { return a == ActionType::Click ? click : purchase; }
};

struct AggregationResult {
    std::vector<LabeledExample> examples;  // sorted by query; labels ascending
    std::size_t dropped_queries = 0;
};

// score(query, category) = sum weight(action) * count; pairs below min_score are dropped.
inline AggregationResult aggregate_query_categories(std::span<const QueryRecord> records, double min_score,
                                                    ActionWeights weights = {}) {
    if (!(weights.click > 0) || !(weights.purchase > 0))
        throw DataError("aggregate_query_categories: action weights must be positive");
    std::map<std::string, std::map<int, double>> scores;
    for (const auto& r : records) scores[r.query][r.category] += weights(r.action) * r.count;
    AggregationResult out;
    for (const auto& [query, cats] : scores) {
        LabeledExample ex{query, {}};
        for (const auto& [cat, score] : cats)
            if (score >= min_score) ex.labels.push_back(cat);
        if (ex.labels.empty()) ++out.dropped_queries;
        else out.examples.push_back(std::move(ex));
    }
    return out;
}

// Uniformly subsample the majority class down to the minority size; relative order is kept.
inline std::vector<LabeledExample> balance_downsample(std::span<const LabeledExample> examples, std::uint64_t seed) {
    std::array<std::vector<std::size_t>, 2> by_class;
    for (std::size_t i = 0; i < examples.size(); ++i)
        by_class[static_cast<std::size_t>(examples[i].binary_label())].push_back(i);
    if (by_class[0].empty() || by_class[1].empty()) throw DataError("balance_downsample: a class is empty");
    const std::size_t target = std::min(by_class[0].size(), by_class[1].size());
    auto& majority = by_class[0].size() > target ? by_class[0] : by_class[1];
    Rng rng(seed);
    rng.shuffle(majority);
    majority.resize(target);
    std::vector<std::size_t> keep;
    keep.insert(keep.end(), by_class[0].begin(), by_class[0].end());
    keep.insert(keep.end(), by_class[1].begin(), by_class[1].end());
    std::sort(keep.begin(), keep.end());
    std::vector<LabeledExample> out;
    out.reserve(keep.size());
    for (auto i : keep) out.push_back(examples[i]);
    return out;
}

struct SplitResult {
    std::vector<LabeledExample> train, validation, test;
};

// Partition by unique query text so no query appears in two sets.
inline SplitResult split(std::span<const LabeledExample> examples, std::array<double, 3> ratios, std::uint64_t seed) {
    if (examples.size() < 3) throw DataError("split: need at least 3 examples");
    for (double r : ratios)
        if (!(r > 0)) throw DataError("split: ratios must be positive");
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw DataError("split: ratios must sum to 1");
    std::vector<std::string> queries;
    for (const auto& e : examples) queries.push_back(e.query);
    std::sort(queries.begin(), queries.end());
    queries.erase(std::unique(queries.begin(), queries.end()), queries.end());
    Rng rng(seed);
    rng.shuffle(queries);
    const auto n = static_cast<double>(queries.size());
    const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * n));
    const auto n_val = std::min(queries.size() - n_train, static_cast<std::size_t>(std::llround(ratios[1] * n)));
    std::map<std::string, int> where;
    for (std::size_t i = 0; i < queries.size(); ++i) where[queries[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
    SplitResult out;
    for (const auto& e : examples) {
        switch (where[e.query]) {
        case 0: out.train.push_back(e); break;
        case 1: out.validation.push_back(e); break;
        default: out.test.push_back(e); break;
        }
    }
    return out;
}

// ---- TSV ingestion ----

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, '\t')) out.push_back(field);
    if (!line.empty() && line.back() == '\t') out.emplace_back();
    return out;
}

inline void check_query_text(const std::string& q) {
    if (q.find_first_of("\t\n\r") != std::string::npos) throw DataError("query contains tab or newline: " + q);
}

// query<TAB>category_id<TAB>action_type<TAB>count
inline void write_log_tsv(std::ostream& os, std::span<const QueryRecord> records) {
    for (const auto& r : records) {
        check_query_text(r.query);
        os << r.query << '\t' << r.category << '\t' << to_string(r.action) << '\t' << r.count << '\n';
    }
}

inline std::vector<QueryRecord> read_log_tsv(std::istream& is) {
    std::vector<QueryRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto f = split_tabs(line);
        if (f.size() != 4) throw DataError("log line " + std::to_string(line_no) + ": expected 4 fields");
        QueryRecord r{f[0], std::stoi(f[1]), parse_action(f[2]), std::stoi(f[3])};
        if (r.count < 1) throw DataError("log line " + std::to_string(line_no) + ": count must be positive");
        out.push_back(std::move(r));
    }
    return out;
}

// query<TAB>label[,label...]
inline void write_labeled_tsv(std::ostream& os, std::span<const LabeledExample> examples) {
    for (const auto& e : examples) {
        check_query_text(e.query);
        os << e.query << '\t';
        for (std::size_t i = 0; i < e.labels.size(); ++i) os << (i ? "," : "") << e.labels[i];
        os << '\n';
    }
}

inline std::vector<LabeledExample> read_labeled_tsv(std::istream& is) {
    std::vector<LabeledExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto f = split_tabs(line);
        if (f.size() != 2) throw DataError("labeled line " + std::to_string(line_no) + ": expected 2 fields");
        LabeledExample e{f[0], {}};
        std::istringstream ls(f[1]);
        std::string tok;
        while (std::getline(ls, tok, ',')) e.labels.push_back(std::stoi(tok));
        if (e.labels.empty()) throw DataError("labeled line " + std::to_string(line_no) + ": no labels");
        out.push_back(std::move(e));
    }
    return out;
}

template <class T, class Fn>
T with_file(const std::string& path, Fn&& fn) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open '" + path + "'");
    return fn(f);
}

inline std::vector<QueryRecord> load_log_tsv(const std::string& path) {
    return with_file<std::vector<QueryRecord>>(path, [](std::istream& is) { return read_log_tsv(is); });
}

inline std::vector<LabeledExample> load_labeled_tsv(const std::string& path) {
    return with_file<std::vector<LabeledExample>>(path, [](std::istream& is) { return read_labeled_tsv(is); });
}

} // namespace qih
