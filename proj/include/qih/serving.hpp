#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "qih/encoder.hpp"
#include "qih/intent_model.hpp"
#include "qih/tokenizer.hpp"

namespace qih {

class ServiceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Layers whose CLS vectors every bundle carries: the final three (fewer for shallower encoders).
inline std::vector<std::size_t> final_layers(std::size_t num_layers) {
    std::vector<std::size_t> out;
    for (std::size_t l = num_layers > 2 ? num_layers - 2 : 1; l <= num_layers; ++l) out.push_back(l);
    return out;
}

struct EmbeddingBundle {
    std::string query;
    TokenSequence tokens;
    std::map<std::size_t, std::vector<float>> layers;      // CLS per final layer
    std::map<std::size_t, std::vector<float>> cut_states;  // all positions at requested cut points, [seq*D]
};

class EmbeddingService {
public:
    EmbeddingService(Encoder<float> encoder, Vocab vocab, int max_pieces = 12)
        : encoder_(std::move(encoder)), vocab_(std::move(vocab)), max_pieces_(max_pieces),
          fingerprint_(encoder_fingerprint(encoder_)) {
        if (vocab_.size() > encoder_.config.vocab_size)
            throw ServiceError("vocab of " + std::to_string(vocab_.size()) + " tokens exceeds encoder vocab size " +
                               std::to_string(encoder_.config.vocab_size));
    }

    const Encoder<float>& encoder() const { return encoder_; }
    const Vocab& vocab() const { return vocab_; }
    int max_pieces() const { return max_pieces_; }
    const std::string& fingerprint() const { return fingerprint_; }
    std::uint64_t forward_count() const { return forwards_.load(); }

    // One encoder forward pass. Cut points must lie in [1, L).
    EmbeddingBundle get_embeddings(const std::string& query, const std::set<std::size_t>& cut_points = {}) const {
        const std::size_t L = encoder_.config.num_layers;
        for (auto c : cut_points)
            if (c < 1 || c >= L) throw ServiceError("cut point " + std::to_string(c) + " outside [1, " + std::to_string(L) + ")");
        EmbeddingBundle b;
        b.query = query;
        b.tokens = tokenize(query, vocab_, max_pieces_);
        const auto batch = TokenBatch::from(std::span<const TokenSequence>(&b.tokens, 1));
        Graph<float> g(Mode::Infer);
        auto hidden = run_encoder(g, encoder_, batch, 0, L);
        forwards_.fetch_add(1);
        for (auto l : final_layers(L)) {
            const float* h = g.data(hidden[l]);
            b.layers[l].assign(h, h + encoder_.config.hidden);
        }
        for (auto c : cut_points) b.cut_states[c] = g.values(hidden[c]);
        return b;
    }

private:
    Encoder<float> encoder_;
    Vocab vocab_;
    int max_pieces_;
    std::string fingerprint_;
    mutable std::atomic<std::uint64_t> forwards_{0};
};

// "own-layers" or the index of a final layer whose CLS the head consumes.
struct LayerSpec {
    bool own_layers = false;
    std::size_t layer = 0;

    static LayerSpec parse(const std::string& s) {
        if (s == "own-layers") return {true, 0};
        try {
            std::size_t pos = 0;
            const auto v = std::stoul(s, &pos);
            if (pos == s.size() && v > 0) return {false, v};
        } catch (const std::exception&) {
        }
        throw ServiceError("layer spec '" + s + "' is neither a layer index nor 'own-layers'");
    }

    std::string str() const { return own_layers ? "own-layers" : std::to_string(layer); }
};

struct IntentSpecification {
    std::string name;
    std::string layer_spec;  // empty: derived from the artifact
    std::string head_path;
    std::optional<double> threshold;  // absent: the artifact's threshold
};

struct RegisteredIntent {
    std::string name;
    LayerSpec layer_spec;
    double threshold = 0.5;
    IntentArtifact artifact;
    Encoder<float> view;  // base encoder with the artifact's tuned part bound in
};

struct IntentResult {
    std::string name;
    std::optional<std::string> error;
    bool positive = false;
    double score = 0;
    double threshold = 0.5;
};

// Copy-on-write name -> intent map. Readers take a snapshot and never block writers.
class IntentRegistry {
public:
    using Map = std::map<std::string, std::shared_ptr<const RegisteredIntent>>;

    explicit IntentRegistry(std::shared_ptr<const EmbeddingService> service)
        : service_(std::move(service)), snapshot_(std::make_shared<const Map>()) {}

    std::shared_ptr<const Map> snapshot() const {
        std::lock_guard lock(mutex_);
        return snapshot_;
    }

    void register_intent(const IntentSpecification& spec) {
        register_intent(spec, load_artifact(spec.head_path));
    }

    void register_intent(const IntentSpecification& spec, IntentArtifact artifact) {
        const auto& enc = service_->encoder();
        const std::size_t L = enc.config.num_layers;
        if (spec.name.empty()) throw ServiceError("intent name must not be empty");
        if (!artifact.config.same_architecture(enc.config))
            throw ServiceError("intent '" + spec.name + "': head was trained for a different encoder architecture");
        if (artifact.base_fingerprint != service_->fingerprint())
            throw ServiceError("intent '" + spec.name + "': head was trained on encoder " + artifact.base_fingerprint +
                               " but the loaded encoder is " + service_->fingerprint());
        auto entry = std::make_shared<RegisteredIntent>();
        entry->name = spec.name;
        entry->layer_spec = spec.layer_spec.empty()
                                ? LayerSpec{artifact.uses_own_layers(), artifact.uses_own_layers() ? 0 : artifact.layer}
                                : LayerSpec::parse(spec.layer_spec);
        if (entry->layer_spec.own_layers != artifact.uses_own_layers())
            throw ServiceError("intent '" + spec.name + "': layer spec " + entry->layer_spec.str() +
                               " does not match a head with frozen prefix " + std::to_string(artifact.frozen_prefix));
        if (!entry->layer_spec.own_layers) {
            const auto fl = final_layers(L);
            if (std::find(fl.begin(), fl.end(), entry->layer_spec.layer) == fl.end() ||
                entry->layer_spec.layer != artifact.layer)
                throw ServiceError("intent '" + spec.name + "': layer spec " + entry->layer_spec.str() +
                                   " is not resolvable (head consumes layer " + std::to_string(artifact.layer) + ")");
        }
        entry->threshold = spec.threshold.value_or(artifact.threshold);
        if (!(entry->threshold >= 0 && entry->threshold <= 1))
            throw ServiceError("intent '" + spec.name + "': threshold must be in [0, 1]");
        artifact.name = spec.name;
        entry->view = bind_encoder(artifact, enc);
        entry->artifact = std::move(artifact);

        std::lock_guard lock(mutex_);
        if (snapshot_->count(spec.name)) throw ServiceError("intent '" + spec.name + "' is already registered");
        auto next = std::make_shared<Map>(*snapshot_);
        (*next)[spec.name] = std::move(entry);
        snapshot_ = std::move(next);
    }

    void remove_intent(const std::string& name) {
        std::lock_guard lock(mutex_);
        if (!snapshot_->count(name)) throw ServiceError("intent '" + name + "' is not registered");
        auto next = std::make_shared<Map>(*snapshot_);
        next->erase(name);
        snapshot_ = std::move(next);
    }

    // Bytes of intent-owned parameters (heads plus tuned layers); the shared encoder is not counted.
    std::size_t resident_bytes() const {
        std::size_t n = 0;
        for (const auto& [name, e] : *snapshot()) n += e->artifact.parameter_bytes();
        return n;
    }

private:
    std::shared_ptr<const EmbeddingService> service_;
    mutable std::mutex mutex_;
    std::shared_ptr<const Map> snapshot_;
};

// Score of one registered intent given a bundle that carries its cut point.
inline IntentResult evaluate_intent(const RegisteredIntent& e, const EmbeddingBundle& bundle) {
    const auto& a = e.artifact;
    const std::size_t L = a.config.num_layers;
    const auto batch = TokenBatch::from(std::span<const TokenSequence>(&bundle.tokens, 1));
    std::vector<float> state;
    if (a.frozen_prefix == L) state = bundle.layers.at(a.layer);
    else if (a.frozen_prefix > 0) state = bundle.cut_states.at(a.frozen_prefix);
    IntentResult r;
    r.name = e.name;
    r.threshold = e.threshold;
    r.score = intent_scores(e.view, a, std::move(state), batch).front();
    r.positive = r.score >= r.threshold;
    return r;
}

class IntentService {
public:
    IntentService(std::shared_ptr<const EmbeddingService> embeddings, std::shared_ptr<IntentRegistry> registry)
        : embeddings_(std::move(embeddings)), registry_(std::move(registry)) {}

    const EmbeddingService& embeddings() const { return *embeddings_; }
    IntentRegistry& registry() { return *registry_; }

    // One embedding computation, then every requested intent in parallel.
    std::map<std::string, IntentResult> get_query_intents(const std::string& query,
                                                          std::span<const std::string> intents) const {
        const auto snap = registry_->snapshot();
        std::set<std::size_t> cuts;
        const std::size_t L = embeddings_->encoder().config.num_layers;
        for (const auto& name : intents)
            if (auto it = snap->find(name); it != snap->end()) {
                const auto n = it->second->artifact.frozen_prefix;
                if (n > 0 && n < L) cuts.insert(n);
            }
        const auto bundle = embeddings_->get_embeddings(query, cuts);
        std::map<std::string, std::future<IntentResult>> pending;
        std::map<std::string, IntentResult> out;
        for (const auto& name : intents) {
            if (pending.count(name) || out.count(name)) continue;
            auto it = snap->find(name);
            if (it == snap->end()) {
                IntentResult r;
                r.name = name;
                r.error = "unknown intent '" + name + "'";
                out[name] = std::move(r);
                continue;
            }
            pending[name] = std::async(std::launch::async, [entry = it->second, &bundle] {
                return evaluate_intent(*entry, bundle);
            });
        }
        for (auto& [name, f] : pending) {
            try {
                out[name] = f.get();
            } catch (const std::exception& ex) {
                IntentResult r;
                r.name = name;
                r.error = ex.what();
                out[name] = std::move(r);
            }
        }
        return out;
    }

private:
    std::shared_ptr<const EmbeddingService> embeddings_;
    std::shared_ptr<IntentRegistry> registry_;
};

struct LatencyReport {
    std::size_t requests = 0;
    std::uint64_t forward_passes = 0;
    double p50_ms = 0, p95_ms = 0, p99_ms = 0;
    std::vector<std::map<std::string, IntentResult>> results;  // indexed like the queries
};

inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
    return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

// Issues every query from `concurrency` workers and checks one forward pass per request.
inline LatencyReport latency_probe(const IntentService& service, std::span<const std::string> queries,
                                   std::span<const std::string> intents, std::size_t concurrency) {
    if (concurrency < 1) throw ServiceError("latency_probe: concurrency must be at least 1");
    LatencyReport rep;
    rep.requests = queries.size();
    rep.results.resize(queries.size());
    std::vector<double> ms(queries.size());
    std::atomic<std::size_t> next{0};
    const auto before = service.embeddings().forward_count();
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < queries.size();) {
            const auto t0 = std::chrono::steady_clock::now();
            rep.results[i] = service.get_query_intents(queries[i], intents);
            ms[i] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        }
    };
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < concurrency; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    rep.forward_passes = service.embeddings().forward_count() - before;
    if (rep.forward_passes != rep.requests)
        throw std::logic_error("latency_probe: " + std::to_string(rep.forward_passes) + " forward passes for " +
                               std::to_string(rep.requests) + " requests");
    rep.p50_ms = percentile(ms, 0.50);
    rep.p95_ms = percentile(ms, 0.95);
    rep.p99_ms = percentile(ms, 0.99);
    return rep;
}

} // namespace qih
