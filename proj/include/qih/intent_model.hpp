#pragma once

// A fine-tuned intent classifier: a 2-way head plus, for partially frozen
// variants, the encoder layers it tuned. The frozen prefix is never copied;
// it is referenced by the fingerprint of the shared encoder it was cut from.

#include <span>
#include <string>
#include <vector>

#include "qih/encoder.hpp"
#include "qih/heads.hpp"

namespace qih {

struct IntentArtifact {
    std::string name;
    EncoderConfig config;
    std::size_t frozen_prefix = 0;  // N
    std::size_t layer = 0;          // CLS source layer for fully frozen heads (N == L); L otherwise
    IntentHead<float> head;
    std::vector<ParamPtr<float>> own_embeddings;       // only when N == 0
    std::vector<EncoderLayer<float>> own_layers;       // layers N+1..L
    std::string base_fingerprint;
    double threshold = 0.5;

    bool uses_own_layers() const { return frozen_prefix < config.num_layers; }

    std::vector<ParamPtr<float>> parameters() const {
        auto out = own_embeddings;
        for (const auto& l : own_layers) {
            auto p = l.parameters();
            out.insert(out.end(), p.begin(), p.end());
        }
        out.push_back(head.weight);
        out.push_back(head.bias);
        return out;
    }

    std::size_t parameter_bytes() const { return total_size(parameters()) * sizeof(float); }
};

// Encoder whose frozen prefix aliases `base` and whose tuned part is the artifact's.
inline Encoder<float> bind_encoder(const IntentArtifact& a, const Encoder<float>& base) {
    Encoder<float> view = base;  // shares tensors
    if (a.frozen_prefix == 0) {
        view.word = a.own_embeddings.at(0);
        view.position = a.own_embeddings.at(1);
        view.token_type = a.own_embeddings.at(2);
        view.norm_g = a.own_embeddings.at(3);
        view.norm_b = a.own_embeddings.at(4);
    }
    for (std::size_t i = 0; i < a.own_layers.size(); ++i) view.layers[a.frozen_prefix + i] = a.own_layers[i];
    return view;
}

// Extracts the tuned part of `tuned` (an encoder trained with frozen prefix N) into an artifact.
inline IntentArtifact make_artifact(std::string name, const Encoder<float>& tuned, std::size_t frozen_prefix,
                                    std::size_t layer, IntentHead<float> head, std::string base_fingerprint) {
    IntentArtifact a;
    a.name = std::move(name);
    a.config = tuned.config;
    a.frozen_prefix = frozen_prefix;
    a.layer = layer;
    a.head = std::move(head);
    a.base_fingerprint = std::move(base_fingerprint);
    if (frozen_prefix == 0) a.own_embeddings = tuned.embedding_parameters();
    for (std::size_t l = frozen_prefix + 1; l <= tuned.config.num_layers; ++l) a.own_layers.push_back(tuned.layers[l - 1]);
    return a;
}

// Logits from the hidden state after layer N. For N == L `state` holds CLS rows
// of `layer` ([batch, D]); for 0 < N < L it holds every position ([batch*seq, D]);
// for N == 0 it is ignored and the tokens in `batch` are embedded.
template <class T>
Var intent_logits(Graph<T>& g, const Encoder<T>& view, std::size_t frozen_prefix, const DenseHead<T>& head, Var state,
                  const TokenBatch& batch) {
    const std::size_t L = view.config.num_layers;
    if (frozen_prefix == L) return head.logits(g, state);
    auto hidden = run_encoder(g, view, batch, frozen_prefix, L, frozen_prefix == 0 ? Var{} : state);
    return head.logits(g, g.select_rows(hidden.back(), batch.cls_rows()));
}

// Inference-mode positive-class scores.
inline std::vector<float> intent_scores(const Encoder<float>& view, const IntentArtifact& a,
                                        std::vector<float> state, const TokenBatch& batch) {
    Graph<float> g(Mode::Infer);
    Var in{};
    if (a.frozen_prefix == a.config.num_layers) in = g.input(batch.batch, a.config.hidden, std::move(state));
    else if (a.frozen_prefix > 0) in = g.input(batch.batch * batch.seq, a.config.hidden, std::move(state));
    Var probs = g.softmax(intent_logits(g, view, a.frozen_prefix, a.head, in, batch));
    const float* p = g.data(probs);
    std::vector<float> out(batch.batch);
    for (std::size_t b = 0; b < batch.batch; ++b) out[b] = p[b * 2 + 1];
    return out;
}

// ---- persistence ----

inline Checkpoint artifact_checkpoint(const IntentArtifact& a) {
    Checkpoint ckpt;
    ckpt.config = a.config.to_config();
    ckpt.config["kind"] = "head";
    ckpt.config["head_type"] = "intent";
    ckpt.config["name"] = a.name;
    ckpt.config["frozen_prefix"] = std::to_string(a.frozen_prefix);
    ckpt.config["layer"] = std::to_string(a.layer);
    ckpt.config["base_fingerprint"] = a.base_fingerprint;
    ckpt.config["threshold"] = std::to_string(a.threshold);
    for (const auto& p : a.parameters()) {
        ckpt.tensors.push_back(*p);
        ckpt.tensors.back().grad.reset();
    }
    return ckpt;
}

inline IntentArtifact artifact_from_checkpoint(const Checkpoint& ckpt) {
    auto get = [&](const char* key) {
        auto it = ckpt.config.find(key);
        if (it == ckpt.config.end()) throw FormatError(std::string("intent checkpoint missing '") + key + "'");
        return it->second;
    };
    if (get("kind") != "head" || get("head_type") != "intent") throw FormatError("not an intent head checkpoint");
    IntentArtifact a;
    a.name = get("name");
    a.config = EncoderConfig::from_config(ckpt.config);
    a.frozen_prefix = std::stoul(get("frozen_prefix"));
    a.layer = std::stoul(get("layer"));
    a.base_fingerprint = get("base_fingerprint");
    a.threshold = std::stod(get("threshold"));
    if (a.frozen_prefix > a.config.num_layers) throw FormatError("intent checkpoint: frozen prefix exceeds layers");
    a.head = head_from_checkpoint(ckpt, "head");
    // Reuse the canonical allocation to get names and shapes for the tuned part.
    auto shape = allocate_encoder<float>(a.config);
    if (a.frozen_prefix == 0) {
        a.own_embeddings = shape.embedding_parameters();
        load_tensors(ckpt, a.own_embeddings);
    }
    for (std::size_t l = a.frozen_prefix + 1; l <= a.config.num_layers; ++l) {
        a.own_layers.push_back(shape.layers[l - 1]);
        load_tensors(ckpt, a.own_layers.back().parameters());
    }
    return a;
}

inline void save_artifact(const std::string& path, const IntentArtifact& a) { save_checkpoint(path, artifact_checkpoint(a)); }
inline IntentArtifact load_artifact(const std::string& path) { return artifact_from_checkpoint(load_checkpoint(path)); }

} // namespace qih
