#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "qih/checkpoint.hpp"
#include "qih/graph.hpp"
#include "qih/random.hpp"
#include "qih/tokenizer.hpp"

namespace qih {

inline constexpr double kProbClamp = 1e-7;

// L(y, p) = -sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)], p clamped to [1e-7, 1 - 1e-7].
inline double bce_loss(std::span<const double> y, std::span<const double> y_hat) {
    if (y.size() != y_hat.size())
        throw ShapeError("bce_loss: " + std::to_string(y.size()) + " labels vs " + std::to_string(y_hat.size()) +
                         " predictions");
    double loss = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double p = std::clamp(y_hat[i], kProbClamp, 1.0 - kProbClamp);
        loss -= y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
    }
    return loss;
}

// Affine map D -> K over the CLS embedding. K = 2 for intent heads (softmax),
// K = |categories| for the category head (independent sigmoids).
template <class T>
struct DenseHead {
    ParamPtr<T> weight;
    ParamPtr<T> bias;

    static DenseHead zeros(std::size_t in, std::size_t out, const std::string& prefix) {
        return {make_param<T>(prefix + ".weight", {in, out}), make_param<T>(prefix + ".bias", {out})};
    }

    // Weights ~ N(0, 0.02) truncated, biases zero.
    static DenseHead random(std::size_t in, std::size_t out, const std::string& prefix, std::uint64_t seed) {
        auto h = zeros(in, out, prefix);
        Rng rng(seed);
        for (auto& v : h.weight->data) v = static_cast<T>(rng.truncated_normal(0.02));
        return h;
    }

    std::size_t input_dim() const { return weight->shape.at(0); }
    std::size_t output_dim() const { return weight->shape.at(1); }
    std::size_t parameter_count() const { return weight->size() + bias->size(); }
    std::vector<ParamPtr<T>> parameters() const { return {weight, bias}; }

    Var logits(Graph<T>& g, Var x) const {
        if (g.cols(x) != input_dim())
            throw ShapeError("head '" + weight->name + "': input width " + std::to_string(g.cols(x)) +
                             " but weight expects " + std::to_string(input_dim()));
        return g.linear(x, g.param(weight), g.param(bias));
    }

    DenseHead clone() const { return {clone_param(*weight), clone_param(*bias)}; }
};

template <class T>
using IntentHead = DenseHead<T>;
template <class T>
using CategoryHead = DenseHead<T>;

template <class T>
IntentHead<T> make_intent_head(std::size_t hidden, std::uint64_t seed, const std::string& prefix = "head") {
    return IntentHead<T>::random(hidden, 2, prefix, seed);
}

// Per-category sigmoid scores for one CLS vector; no normalization across categories.
template <class T>
std::vector<T> category_head_forward(std::span<const T> cls, const CategoryHead<T>& head) {
    Graph<T> g(Mode::Infer);
    Var x = g.input(1, cls.size(), std::vector<T>(cls.begin(), cls.end()));
    return g.values(g.sigmoid(head.logits(g, x)));
}

// Two-way softmax; element 1 is the positive class.
template <class T>
std::array<T, 2> intent_head_forward(std::span<const T> cls, const IntentHead<T>& head) {
    if (head.output_dim() != 2) throw ShapeError("intent head must have 2 outputs");
    Graph<T> g(Mode::Infer);
    Var x = g.input(1, cls.size(), std::vector<T>(cls.begin(), cls.end()));
    auto p = g.values(g.softmax(head.logits(g, x)));
    return {p[0], p[1]};
}

// ---- taxonomy ----

struct TaxonomyNode {
    int id = 0;
    std::string name;
    int parent = -1;  // -1 for the root
    bool leaf = false;
};

class Taxonomy {
public:
    Taxonomy() = default;

    // Node ids must be 0..n-1 in order; leaf flags are derived.
    explicit Taxonomy(std::vector<TaxonomyNode> nodes) : nodes_(std::move(nodes)) {
        if (nodes_.empty()) throw ConfigError("taxonomy: no nodes");
        children_.assign(nodes_.size(), {});
        int roots = 0;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            auto& n = nodes_[i];
            if (n.id != static_cast<int>(i)) throw ConfigError("taxonomy: node ids must be dense and ordered");
            if (n.parent < 0) {
                ++roots;
                root_ = n.id;
                continue;
            }
            if (n.parent >= static_cast<int>(nodes_.size()) || n.parent == n.id)
                throw ConfigError("taxonomy: node " + std::to_string(n.id) + " has invalid parent");
            children_[static_cast<std::size_t>(n.parent)].push_back(n.id);
        }
        if (roots != 1) throw ConfigError("taxonomy: expected exactly one root, found " + std::to_string(roots));
        for (auto& n : nodes_) n.leaf = children_[static_cast<std::size_t>(n.id)].empty() && n.parent >= 0;
        // Acyclic iff every node reaches the root within n steps.
        for (const auto& n : nodes_) {
            int cur = n.id;
            for (std::size_t steps = 0; cur != root_; ++steps) {
                if (steps > nodes_.size()) throw ConfigError("taxonomy: cycle through node " + std::to_string(n.id));
                cur = nodes_[static_cast<std::size_t>(cur)].parent;
            }
        }
        for (const auto& n : nodes_)
            if (n.id != root_) scored_.push_back(n.id);
        output_index_.assign(nodes_.size(), -1);
        for (std::size_t i = 0; i < scored_.size(); ++i) output_index_[static_cast<std::size_t>(scored_[i])] = static_cast<int>(i);
    }

    std::size_t size() const { return nodes_.size(); }
    int root() const { return root_; }
    const TaxonomyNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    const std::vector<TaxonomyNode>& nodes() const { return nodes_; }
    const std::vector<int>& children(int id) const { return children_.at(static_cast<std::size_t>(id)); }
    bool is_leaf(int id) const { return id >= 0 && static_cast<std::size_t>(id) < nodes_.size() && node(id).leaf; }

    std::vector<int> leaves() const {
        std::vector<int> out;
        for (const auto& n : nodes_)
            if (n.leaf) out.push_back(n.id);
        return out;
    }

    // Non-root ancestors of `id`, nearest first (excluding `id`).
    std::vector<int> ancestors(int id) const {
        std::vector<int> out;
        for (int p = node(id).parent; p >= 0 && p != root_; p = node(p).parent) out.push_back(p);
        return out;
    }

    // Every non-root node gets one category-head output, in id order.
    const std::vector<int>& scored_nodes() const { return scored_; }
    int output_index(int id) const { return output_index_.at(static_cast<std::size_t>(id)); }

    // Target vector over scored nodes for a set of leaves: the leaves plus all their ancestors.
    std::vector<float> target(std::span<const int> leaf_ids) const {
        std::vector<float> y(scored_.size(), 0.f);
        for (int leaf : leaf_ids) {
            y.at(static_cast<std::size_t>(output_index(leaf))) = 1.f;
            for (int a : ancestors(leaf)) y[static_cast<std::size_t>(output_index(a))] = 1.f;
        }
        return y;
    }

    // TSV: id<TAB>parent_id<TAB>name, parent -1 for the root.
    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("cannot write taxonomy '" + path + "'");
        for (const auto& n : nodes_) f << n.id << '\t' << n.parent << '\t' << n.name << '\n';
    }

    static Taxonomy load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot open taxonomy '" + path + "'");
        std::vector<TaxonomyNode> nodes;
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            std::istringstream ss(line);
            std::string id, parent, name;
            std::getline(ss, id, '\t');
            std::getline(ss, parent, '\t');
            std::getline(ss, name);
            nodes.push_back({std::stoi(id), name, std::stoi(parent), false});
        }
        return Taxonomy(std::move(nodes));
    }

private:
    std::vector<TaxonomyNode> nodes_;
    std::vector<std::vector<int>> children_;
    std::vector<int> scored_;
    std::vector<int> output_index_;
    int root_ = -1;
};

// ---- n-gram DNN baseline ----

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Character 1/2/3-grams inside each word plus one whole-word gram per word
// (prefixed "w:" so it never collides textually with a character gram).
inline std::vector<std::string> extract_ngrams(std::string_view query) {
    std::vector<std::string> grams;
    for (const auto& word : split_words(normalize(query))) {
        for (std::size_t n = 1; n <= 3; ++n)
            for (std::size_t i = 0; i + n <= word.size(); ++i) grams.push_back(word.substr(i, n));
        grams.push_back("w:" + word);
    }
    return grams;
}

inline std::vector<std::int32_t> ngram_ids(std::string_view query, std::size_t table_size) {
    std::vector<std::int32_t> ids;
    for (const auto& g : extract_ngrams(query)) ids.push_back(static_cast<std::int32_t>(fnv1a(g) % table_size));
    return ids;
}

// Averaged hashed n-gram embeddings feeding a single affine layer to 2 logits.
template <class T>
struct DnnBaseline {
    ParamPtr<T> table;
    DenseHead<T> output;

    static DnnBaseline random(std::size_t table_size, std::size_t dim, std::uint64_t seed) {
        DnnBaseline m;
        m.table = make_param<T>("dnn.ngram_table", {table_size, dim});
        Rng rng(seed);
        for (auto& v : m.table->data) v = static_cast<T>((rng.uniform() - 0.5) * 0.2);
        m.output = DenseHead<T>::random(dim, 2, "dnn.output", seed + 1);
        return m;
    }

    static DnnBaseline zeros(std::size_t table_size, std::size_t dim) {
        return {make_param<T>("dnn.ngram_table", {table_size, dim}), DenseHead<T>::zeros(dim, 2, "dnn.output")};
    }

    std::size_t table_size() const { return table->shape.at(0); }
    std::size_t dim() const { return table->shape.at(1); }
    std::size_t parameter_count() const { return table->size() + output.parameter_count(); }
    std::vector<ParamPtr<T>> parameters() const { return {table, output.weight, output.bias}; }

    Var features(Graph<T>& g, std::span<const std::string> queries) const {
        std::vector<std::int32_t> ids;
        std::vector<std::size_t> offsets{0};
        for (const auto& q : queries) {
            auto qi = ngram_ids(q, table_size());
            ids.insert(ids.end(), qi.begin(), qi.end());
            offsets.push_back(ids.size());
        }
        return g.embedding_bag_mean(g.param(table), std::move(ids), std::move(offsets));
    }

    Var logits(Graph<T>& g, std::span<const std::string> queries) const { return output.logits(g, features(g, queries)); }
};

// Parameter count of the baseline for a given hash-table size and dimension.
inline std::uint64_t dnn_parameter_count(std::uint64_t table_size, std::uint64_t dim) {
    return table_size * dim + dim * 2 + 2;
}

template <class T>
std::vector<T> ngram_featurize(std::string_view query, const DnnBaseline<T>& model) {
    Graph<T> g(Mode::Infer);
    std::string q(query);
    return g.values(model.features(g, std::span<const std::string>(&q, 1)));
}

template <class T>
std::array<T, 2> dnn_baseline_forward(std::span<const T> feature, const DnnBaseline<T>& model) {
    return intent_head_forward<T>(feature, model.output);
}

// ---- head checkpoints ----

inline Checkpoint head_checkpoint(const DenseHead<float>& head, const std::string& head_type) {
    Checkpoint ckpt;
    ckpt.config["kind"] = "head";
    ckpt.config["head_type"] = head_type;
    ckpt.tensors.push_back(*head.weight);
    ckpt.tensors.push_back(*head.bias);
    for (auto& t : ckpt.tensors) t.grad.reset();
    return ckpt;
}

inline DenseHead<float> head_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
    const auto* w = ckpt.find(prefix + ".weight");
    const auto* b = ckpt.find(prefix + ".bias");
    if (!w || !b) throw FormatError("head checkpoint missing '" + prefix + "' tensors");
    if (w->shape.size() != 2 || b->shape.size() != 1 || b->shape[0] != w->shape[1])
        throw FormatError("head checkpoint '" + prefix + "' has inconsistent shapes");
    return {std::make_shared<Tensor<float>>(*w), std::make_shared<Tensor<float>>(*b)};
}

} // namespace qih
