#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qih/adam.hpp"
#include "qih/checkpoint.hpp"
#include "qih/datagen.hpp"
#include "qih/encoder.hpp"
#include "qih/evaluator.hpp"
#include "qih/heads.hpp"
#include "qih/intent_model.hpp"
#include "qih/tokenizer.hpp"

namespace qih {

struct Hyperparameters {
    double learning_rate = 3e-5;  // 0 runs the loop without updating weights
    std::size_t batch_size = 500;
    std::size_t steps_per_epoch = 1000;
    std::size_t epochs = 10;
    std::uint64_t seed = 1;
    double dropout = 0.1;

    void validate() const {
        if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
            throw ConfigError("hyperparameters: learning rate must be finite and non-negative");
        if (batch_size < 1 || steps_per_epoch < 1 || epochs < 1)
            throw ConfigError("hyperparameters: batch size, steps per epoch and epochs must be positive");
        if (dropout < 0 || dropout >= 1) throw ConfigError("hyperparameters: dropout must be in [0, 1)");
    }

    // Keys: learning_rate, batch_size, steps_per_epoch, epochs, seed, dropout. Missing keys keep `defaults`.
    static Hyperparameters from_config(const ConfigBlock& c, const Hyperparameters& defaults) {
        auto h = defaults;
        if (auto it = c.find("learning_rate"); it != c.end()) h.learning_rate = std::stod(it->second);
        if (auto it = c.find("batch_size"); it != c.end()) h.batch_size = std::stoul(it->second);
        if (auto it = c.find("steps_per_epoch"); it != c.end()) h.steps_per_epoch = std::stoul(it->second);
        if (auto it = c.find("epochs"); it != c.end()) h.epochs = std::stoul(it->second);
        if (auto it = c.find("seed"); it != c.end()) h.seed = std::stoull(it->second);
        if (auto it = c.find("dropout"); it != c.end()) h.dropout = std::stod(it->second);
        h.validate();
        return h;
    }

    static Hyperparameters from_config(const ConfigBlock& c) { return from_config(c, Hyperparameters{}); }

    // Settings for the small (L=2, D=64) encoder on the synthetic benchmark.
    static Hyperparameters desk_domain() { return {3e-3, 64, 400, 8, 1, 0.1}; }
    static Hyperparameters desk_finetune() { return {2e-3, 32, 200, 10, 1, 0.1}; }
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double loss = 0;        // mean training loss over the epoch's steps
    double val_metric = 0;
    std::string checkpoint;
};

struct TrainingHistory {
    std::vector<EpochRecord> epochs;
    double initial_loss = 0;  // before the first update, on the first batch
    std::size_t best_epoch = 0;
};

// 1-based epoch with the highest validation metric; ties go to the earliest.
inline std::size_t select_best_epoch(const TrainingHistory& history) {
    if (history.epochs.empty()) throw std::invalid_argument("select_best_epoch: empty history");
    std::size_t best = 0;
    for (std::size_t i = 1; i < history.epochs.size(); ++i)
        if (history.epochs[i].val_metric > history.epochs[best].val_metric) best = i;
    return history.epochs[best].epoch;
}

inline void write_history_csv(std::ostream& os, const TrainingHistory& history) {
    os << "epoch,loss,val_metric\n";
    os.precision(9);
    for (const auto& e : history.epochs) os << e.epoch << ',' << e.loss << ',' << e.val_metric << '\n';
}

// ---- datasets ----

struct CategoryDataset {
    std::vector<TokenSequence> tokens;
    std::vector<std::vector<float>> targets;  // one entry per scored taxonomy node
    std::size_t size() const { return tokens.size(); }
};

inline CategoryDataset make_category_dataset(std::span<const LabeledExample> examples, const Vocab& vocab,
                                             const Taxonomy& taxonomy, int max_pieces = 12) {
    CategoryDataset d;
    for (const auto& e : examples) {
        for (int l : e.labels)
            if (!taxonomy.is_leaf(l)) throw DataError("example '" + e.query + "': category " + std::to_string(l) + " is not a leaf");
        d.tokens.push_back(tokenize(e.query, vocab, max_pieces));
        d.targets.push_back(taxonomy.target(e.labels));
    }
    return d;
}

struct IntentDataset {
    std::vector<TokenSequence> tokens;
    std::vector<int> labels;
    std::size_t size() const { return tokens.size(); }
};

inline IntentDataset make_intent_dataset(std::span<const LabeledExample> examples, const Vocab& vocab,
                                         int max_pieces = 12) {
    IntentDataset d;
    for (const auto& e : examples) {
        d.tokens.push_back(tokenize(e.query, vocab, max_pieces));
        d.labels.push_back(e.binary_label());
    }
    return d;
}

template <class V>
std::vector<typename V::value_type> take(const V& v, std::span<const std::size_t> idx) {
    std::vector<typename V::value_type> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(v[i]);
    return out;
}

namespace detail {

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::vector<std::vector<float>> snapshot(const std::vector<ParamPtr<float>>& params) {
    std::vector<std::vector<float>> s;
    for (const auto& p : params) s.push_back(p->data);
    return s;
}

inline void restore(const std::vector<ParamPtr<float>>& params, const std::vector<std::vector<float>>& s) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->data = s[i];
}

// Generic epoch loop. loss_fn(graph, batch indices) builds a scalar loss;
// metric_fn() scores the current weights on validation data. The best epoch's
// weights are restored before returning.
template <class LossFn, class MetricFn>
TrainingHistory train_loop(const std::vector<ParamPtr<float>>& params, std::size_t n, const Hyperparameters& h,
                           LossFn loss_fn, MetricFn metric_fn) {
    h.validate();
    if (n == 0) throw DataError("training: empty dataset");
    zero_grad(params);
    Rng rng(mix(h.seed, 0x7261696eull));
    auto order = iota_indices(n);
    AdamState<float> adam;
    TrainingHistory hist;
    std::vector<std::vector<float>> best;
    double best_metric = -1;
    std::uint64_t step = 0;
    for (std::size_t epoch = 1; epoch <= h.epochs; ++epoch) {
        rng.shuffle(order);
        std::size_t cursor = 0;
        double loss_sum = 0;
        for (std::size_t s = 0; s < h.steps_per_epoch; ++s, ++step) {
            std::vector<std::size_t> idx(std::min(h.batch_size, n));
            for (auto& i : idx) i = order[cursor++ % n];
            if (step == 0) {
                Graph<float> probe(Mode::Infer);
                hist.initial_loss = probe.scalar(loss_fn(probe, std::span<const std::size_t>(idx)));
            }
            Graph<float> g(Mode::Train, mix(h.seed, step));
            Var loss = loss_fn(g, std::span<const std::size_t>(idx));
            loss_sum += g.scalar(loss);
            if (h.learning_rate > 0) {
                g.backward(loss);
                adam_step(params, adam, h.learning_rate);
                zero_grad(params);
            }
        }
        const double metric = metric_fn();
        hist.epochs.push_back({epoch, loss_sum / static_cast<double>(h.steps_per_epoch), metric,
                               "epoch-" + std::to_string(epoch)});
        if (metric > best_metric) {
            best_metric = metric;
            best = snapshot(params);
        }
    }
    hist.best_epoch = select_best_epoch(hist);
    restore(params, best);
    return hist;
}

} // namespace detail

// ---- domain-specific training ----

struct DomainModel {
    Encoder<float> encoder;
    CategoryHead<float> head;

    std::vector<ParamPtr<float>> parameters() const {
        auto p = encoder.parameters();
        p.push_back(head.weight);
        p.push_back(head.bias);
        return p;
    }
};

inline DomainModel make_domain_model(const EncoderConfig& config, const Taxonomy& taxonomy, std::uint64_t seed) {
    return {init_weights<float>(config, seed), CategoryHead<float>::random(config.hidden, taxonomy.scored_nodes().size(),
                                                                           "category", detail::mix(seed, 1))};
}

template <class T>
Var category_logits(Graph<T>& g, const Encoder<T>& enc, const CategoryHead<T>& head, const TokenBatch& batch) {
    auto hidden = run_encoder(g, enc, batch, 0, enc.config.num_layers);
    return head.logits(g, g.select_rows(hidden.back(), batch.cls_rows()));
}

// Per-node sigmoid scores, evaluated in chunks.
inline std::vector<std::vector<float>> category_scores(const DomainModel& m, std::span<const TokenSequence> tokens,
                                                       std::size_t chunk = 256) {
    std::vector<std::vector<float>> out;
    for (std::size_t s = 0; s < tokens.size(); s += chunk) {
        const auto batch = TokenBatch::from(tokens.subspan(s, std::min(chunk, tokens.size() - s)));
        Graph<float> g(Mode::Infer);
        Var p = g.sigmoid(category_logits(g, m.encoder, m.head, batch));
        const float* d = g.data(p);
        const std::size_t k = g.cols(p);
        for (std::size_t b = 0; b < batch.batch; ++b) out.emplace_back(d + b * k, d + (b + 1) * k);
    }
    return out;
}

// Micro-averaged F1 over all scored nodes at threshold 0.5.
inline double micro_f1(std::span<const std::vector<float>> scores, std::span<const std::vector<float>> targets) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        for (std::size_t j = 0; j < scores[i].size(); ++j) {
            const bool pred = scores[i][j] >= 0.5f, truth = targets[i][j] > 0.5f;
            tp += pred && truth;
            fp += pred && !truth;
            fn += !pred && truth;
        }
    return tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

inline TrainingHistory train_domain(DomainModel& model, const CategoryDataset& train, const CategoryDataset& val,
                                    const Hyperparameters& hyper) {
    if (train.size() == 0) throw DataError("train_domain: empty training set");
    if (val.size() == 0) throw DataError("train_domain: empty validation set");
    const auto params = model.parameters();
    for (const auto& p : params) p->trainable = true;
    model.encoder.config.dropout = hyper.dropout;
    auto loss = [&](Graph<float>& g, std::span<const std::size_t> idx) {
        const auto seqs = take(train.tokens, idx);
        const auto batch = TokenBatch::from(seqs);
        std::vector<float> y;
        for (auto i : idx) y.insert(y.end(), train.targets[i].begin(), train.targets[i].end());
        return g.sigmoid_bce(category_logits(g, model.encoder, model.head, batch), std::move(y));
    };
    auto metric = [&] { return micro_f1(category_scores(model, val.tokens), val.targets); };
    return detail::train_loop(params, train.size(), hyper, loss, metric);
}

inline void save_domain_model(const std::string& dir, const DomainModel& m) {
    save_encoder(dir + "/encoder.qih", m.encoder);
    save_checkpoint(dir + "/category_head.qih", head_checkpoint(m.head, "category"));
}

// ---- intent fine-tuning ----

// Hidden state after the frozen prefix for every sequence, in inference mode.
// N == L: CLS rows of `layer` ([n, D]); 0 < N < L: all positions of layer N ([n*seq, D]); N == 0: empty.
inline std::vector<float> prefix_states(const Encoder<float>& enc, std::size_t frozen_prefix, std::size_t layer,
                                        std::span<const TokenSequence> tokens, std::size_t chunk = 256) {
    const std::size_t L = enc.config.num_layers;
    std::vector<float> out;
    if (frozen_prefix == 0) return out;
    const std::size_t upto = frozen_prefix == L ? layer : frozen_prefix;
    for (std::size_t s = 0; s < tokens.size(); s += chunk) {
        const auto batch = TokenBatch::from(tokens.subspan(s, std::min(chunk, tokens.size() - s)));
        Graph<float> g(Mode::Infer);
        auto hidden = run_encoder(g, enc, batch, 0, upto);
        if (frozen_prefix == L) {
            auto v = g.values(g.select_rows(hidden.back(), batch.cls_rows()));
            out.insert(out.end(), v.begin(), v.end());
        } else {
            auto v = g.values(hidden.back());
            out.insert(out.end(), v.begin(), v.end());
        }
    }
    return out;
}

// Rows of `state` belonging to the given examples (`width` floats per example).
inline std::vector<float> gather_state(const std::vector<float>& state, std::size_t width,
                                       std::span<const std::size_t> idx) {
    std::vector<float> out;
    out.reserve(idx.size() * width);
    for (auto i : idx) out.insert(out.end(), state.begin() + i * width, state.begin() + (i + 1) * width);
    return out;
}

inline std::size_t state_width(const EncoderConfig& c, std::size_t frozen_prefix, std::size_t seq) {
    if (frozen_prefix == 0) return 0;
    return frozen_prefix == c.num_layers ? c.hidden : seq * c.hidden;
}

// Positive-class scores of an artifact bound to `view`, in chunks. Serving uses the same path per query.
inline std::vector<float> score_intent(const IntentArtifact& a, const Encoder<float>& view,
                                       std::span<const TokenSequence> tokens, std::size_t chunk = 256) {
    std::vector<float> out;
    for (std::size_t s = 0; s < tokens.size(); s += chunk) {
        auto part = tokens.subspan(s, std::min(chunk, tokens.size() - s));
        const auto batch = TokenBatch::from(part);
        auto scores = intent_scores(view, a, prefix_states(view, a.frozen_prefix, a.layer, part, chunk), batch);
        out.insert(out.end(), scores.begin(), scores.end());
    }
    return out;
}

inline std::vector<ScoredExample> to_scored(std::span<const float> scores, std::span<const int> labels) {
    std::vector<ScoredExample> out;
    for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({scores[i], labels[i]});
    return out;
}

struct FinetuneOptions {
    std::string name = "intent";
    std::size_t frozen_prefix = 0;
    std::size_t layer = 0;  // CLS layer for N == L; 0 means the last layer
    std::uint64_t head_seed = 7;
};

struct FinetuneResult {
    IntentArtifact artifact;
    TrainingHistory history;
    std::string frozen_checksum_before;
    std::string frozen_checksum_after;
};

inline std::vector<ParamPtr<float>> frozen_parameters(const Encoder<float>& enc, std::size_t frozen_prefix) {
    std::vector<ParamPtr<float>> out;
    if (frozen_prefix == 0) return out;
    out = enc.embedding_parameters();
    for (std::size_t l = 1; l <= frozen_prefix; ++l) {
        auto p = enc.layer_parameters(l);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

// Trains in place: `enc` gets the freeze applied and its unfrozen tensors updated.
// The artifact aliases enc's unfrozen tensors.
inline FinetuneResult finetune_intent_in_place(Encoder<float>& enc, const IntentDataset& train,
                                               const IntentDataset& val, const FinetuneOptions& opt,
                                               const Hyperparameters& hyper) {
    hyper.validate();
    const std::size_t L = enc.config.num_layers;
    const std::size_t N = opt.frozen_prefix;
    if (N > L) throw ConfigError("finetune: frozen prefix " + std::to_string(N) + " exceeds " + std::to_string(L) + " layers");
    const std::size_t layer = opt.layer == 0 ? L : opt.layer;
    if (layer < 1 || layer > L || (N < L && layer != L))
        throw ConfigError("finetune: CLS layer " + std::to_string(layer) + " invalid for frozen prefix " + std::to_string(N));
    if (train.size() == 0 || val.size() == 0) throw DataError("finetune: empty dataset");
    if (std::count(train.labels.begin(), train.labels.end(), 1) == 0 ||
        std::count(train.labels.begin(), train.labels.end(), 0) == 0)
        throw DataError("finetune: training data has a single class");

    const std::string fingerprint = encoder_fingerprint(enc);
    apply_freeze(enc, {N});
    enc.config.dropout = hyper.dropout;
    auto head = make_intent_head<float>(enc.config.hidden, opt.head_seed);
    const auto frozen = frozen_parameters(enc, N);
    FinetuneResult r;
    r.frozen_checksum_before = tensor_checksum(frozen);

    const std::size_t seq = train.tokens.front().length();
    const std::size_t width = state_width(enc.config, N, seq);
    const auto train_state = prefix_states(enc, N, layer, train.tokens);

    auto params = enc.parameters();
    params.push_back(head.weight);
    params.push_back(head.bias);

    auto artifact = make_artifact(opt.name, enc, N, layer, head, fingerprint);
    auto loss = [&](Graph<float>& g, std::span<const std::size_t> idx) {
        const auto seqs = take(train.tokens, idx);
        const auto batch = TokenBatch::from(seqs);
        Var state{};
        if (N > 0) state = g.input(N == L ? idx.size() : idx.size() * seq, enc.config.hidden,
                                   gather_state(train_state, width, idx));
        return g.softmax_cross_entropy(intent_logits(g, enc, N, head, state, batch), take(train.labels, idx));
    };
    auto metric = [&] {
        auto scores = score_intent(artifact, enc, val.tokens);
        return confusion_metrics(to_scored(scores, val.labels), 0.5).accuracy;
    };
    r.history = detail::train_loop(params, train.size(), hyper, loss, metric);
    r.frozen_checksum_after = tensor_checksum(frozen);
    if (r.frozen_checksum_after != r.frozen_checksum_before)
        throw std::logic_error("finetune: frozen tensors changed during training");
    r.artifact = std::move(artifact);
    return r;
}

// Leaves `base` untouched; the artifact owns copies of the tuned tensors.
inline FinetuneResult finetune_intent(const Encoder<float>& base, const IntentDataset& train, const IntentDataset& val,
                                      const FinetuneOptions& opt, const Hyperparameters& hyper) {
    auto work = base.clone();
    return finetune_intent_in_place(work, train, val, opt, hyper);
}

// ---- n-gram baseline ----

struct DnnResult {
    DnnBaseline<float> model;
    TrainingHistory history;
};

inline std::vector<float> score_dnn(const DnnBaseline<float>& m, std::span<const std::string> queries,
                                    std::size_t chunk = 512) {
    std::vector<float> out;
    for (std::size_t s = 0; s < queries.size(); s += chunk) {
        Graph<float> g(Mode::Infer);
        Var p = g.softmax(m.logits(g, queries.subspan(s, std::min(chunk, queries.size() - s))));
        const float* d = g.data(p);
        for (std::size_t b = 0; b < g.rows(p); ++b) out.push_back(d[b * 2 + 1]);
    }
    return out;
}

inline DnnResult train_dnn_baseline(std::span<const LabeledExample> train, std::span<const LabeledExample> val,
                                    std::size_t table_size, std::size_t dim, const Hyperparameters& hyper) {
    if (train.empty() || val.empty()) throw DataError("dnn baseline: empty dataset");
    DnnResult r{DnnBaseline<float>::random(table_size, dim, hyper.seed), {}};
    std::vector<std::string> q, vq;
    std::vector<int> y, vy;
    for (const auto& e : train) q.push_back(e.query), y.push_back(e.binary_label());
    for (const auto& e : val) vq.push_back(e.query), vy.push_back(e.binary_label());
    auto loss = [&](Graph<float>& g, std::span<const std::size_t> idx) {
        const auto qs = take(q, idx);
        return g.softmax_cross_entropy(r.model.logits(g, qs), take(y, idx));
    };
    auto metric = [&] { return confusion_metrics(to_scored(score_dnn(r.model, vq), vy), 0.5).accuracy; };
    r.history = detail::train_loop(r.model.parameters(), q.size(), hyper, loss, metric);
    return r;
}

} // namespace qih
