#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "qih/checkpoint.hpp"
#include "qih/graph.hpp"
#include "qih/random.hpp"
#include "qih/tokenizer.hpp"

namespace qih {

struct EncoderConfig {
    std::size_t num_layers = 12;
    std::size_t hidden = 768;
    std::size_t heads = 12;
    std::size_t feed_forward = 3072;
    std::size_t vocab_size = 30522;
    std::size_t max_positions = 512;
    std::size_t token_types = 2;
    double dropout = 0.1;

    static EncoderConfig reference() { return {}; }

    void validate() const {
        if (num_layers < 1 || hidden < 1 || heads < 1 || feed_forward < 1 || vocab_size < 1 || max_positions < 1 ||
            token_types < 1)
            throw ConfigError("encoder config: all dimensions must be at least 1");
        if (hidden % heads != 0)
            throw ConfigError("encoder config: hidden " + std::to_string(hidden) + " not divisible by heads " +
                              std::to_string(heads));
        if (dropout < 0 || dropout >= 1) throw ConfigError("encoder config: dropout must be in [0, 1)");
    }

    ConfigBlock to_config() const {
        return {{"layers", std::to_string(num_layers)},   {"hidden", std::to_string(hidden)},
                {"heads", std::to_string(heads)},         {"feed_forward", std::to_string(feed_forward)},
                {"vocab_size", std::to_string(vocab_size)}, {"max_positions", std::to_string(max_positions)},
                {"token_types", std::to_string(token_types)}, {"dropout", std::to_string(dropout)}};
    }

    // Missing keys keep their defaults.
    static EncoderConfig from_config(const ConfigBlock& c) {
        EncoderConfig cfg;
        auto get = [&](const char* key, std::size_t& field) {
            if (auto it = c.find(key); it != c.end()) field = std::stoul(it->second);
        };
        get("layers", cfg.num_layers);
        get("hidden", cfg.hidden);
        get("heads", cfg.heads);
        get("feed_forward", cfg.feed_forward);
        get("vocab_size", cfg.vocab_size);
        get("max_positions", cfg.max_positions);
        get("token_types", cfg.token_types);
        if (auto it = c.find("dropout"); it != c.end()) cfg.dropout = std::stod(it->second);
        return cfg;
    }

    bool same_architecture(const EncoderConfig& o) const {
        return num_layers == o.num_layers && hidden == o.hidden && heads == o.heads &&
               feed_forward == o.feed_forward && vocab_size == o.vocab_size && max_positions == o.max_positions &&
               token_types == o.token_types;
    }
};

// Embedding block plus layers 1..frozen_prefix are frozen when frozen_prefix >= 1.
struct FreezeSpec {
    std::size_t frozen_prefix = 0;
};

struct ParameterCount {
    std::uint64_t total = 0;
    std::uint64_t trainable = 0;
    bool operator==(const ParameterCount&) const = default;
};

inline std::uint64_t layer_parameter_count(const EncoderConfig& c) {
    const std::uint64_t d = c.hidden, f = c.feed_forward;
    return 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d);
}

inline std::uint64_t embedding_parameter_count(const EncoderConfig& c) {
    const std::uint64_t d = c.hidden;
    return c.vocab_size * d + c.max_positions * d + c.token_types * d + 2 * d;
}

inline ParameterCount count_parameters(const EncoderConfig& config, FreezeSpec freeze, std::uint64_t head_params) {
    const std::uint64_t layer = layer_parameter_count(config);
    const std::uint64_t emb = embedding_parameter_count(config);
    ParameterCount out;
    out.total = emb + config.num_layers * layer + head_params;
    const std::uint64_t n = freeze.frozen_prefix;
    if (n > config.num_layers) throw ConfigError("count_parameters: frozen prefix exceeds layer count");
    out.trainable = (n == 0 ? emb : 0) + (config.num_layers - n) * layer + head_params;
    return out;
}

template <class T>
struct EncoderLayer {
    ParamPtr<T> query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
    ParamPtr<T> attn_norm_g, attn_norm_b;
    ParamPtr<T> ff_in_w, ff_in_b, ff_out_w, ff_out_b;
    ParamPtr<T> ff_norm_g, ff_norm_b;

    std::vector<ParamPtr<T>> parameters() const {
        return {query_w, query_b, key_w,  key_b,   value_w,  value_b,  out_w,     out_b,
                attn_norm_g, attn_norm_b, ff_in_w, ff_in_b, ff_out_w, ff_out_b, ff_norm_g, ff_norm_b};
    }
};

template <class T>
struct Encoder {
    EncoderConfig config;
    ParamPtr<T> word, position, token_type, norm_g, norm_b;
    std::vector<EncoderLayer<T>> layers;

    std::vector<ParamPtr<T>> embedding_parameters() const { return {word, position, token_type, norm_g, norm_b}; }

    // Layer index is 1-based.
    std::vector<ParamPtr<T>> layer_parameters(std::size_t layer) const { return layers.at(layer - 1).parameters(); }

    std::vector<ParamPtr<T>> parameters() const {
        auto out = embedding_parameters();
        for (const auto& l : layers) {
            auto p = l.parameters();
            out.insert(out.end(), p.begin(), p.end());
        }
        return out;
    }

    std::size_t parameter_bytes() const { return total_size(parameters()) * sizeof(T); }

    // Fully independent copy of every tensor.
    Encoder clone() const { return cast<T>(); }

    template <class U>
    Encoder<U> cast() const {
        Encoder<U> out;
        out.config = config;
        auto c = [](const ParamPtr<T>& p) { return cast_param<U>(*p); };
        out.word = c(word);
        out.position = c(position);
        out.token_type = c(token_type);
        out.norm_g = c(norm_g);
        out.norm_b = c(norm_b);
        for (const auto& l : layers) {
            EncoderLayer<U> n;
            n.query_w = c(l.query_w), n.query_b = c(l.query_b), n.key_w = c(l.key_w), n.key_b = c(l.key_b);
            n.value_w = c(l.value_w), n.value_b = c(l.value_b), n.out_w = c(l.out_w), n.out_b = c(l.out_b);
            n.attn_norm_g = c(l.attn_norm_g), n.attn_norm_b = c(l.attn_norm_b);
            n.ff_in_w = c(l.ff_in_w), n.ff_in_b = c(l.ff_in_b), n.ff_out_w = c(l.ff_out_w), n.ff_out_b = c(l.ff_out_b);
            n.ff_norm_g = c(l.ff_norm_g), n.ff_norm_b = c(l.ff_norm_b);
            out.layers.push_back(std::move(n));
        }
        return out;
    }
};

// Zero-filled tensors with the canonical names and shapes for `config`.
template <class T>
Encoder<T> allocate_encoder(const EncoderConfig& config) {
    config.validate();
    const std::size_t d = config.hidden, f = config.feed_forward;
    Encoder<T> enc;
    enc.config = config;
    enc.word = make_param<T>("embeddings.word", {config.vocab_size, d});
    enc.position = make_param<T>("embeddings.position", {config.max_positions, d});
    enc.token_type = make_param<T>("embeddings.token_type", {config.token_types, d});
    enc.norm_g = make_param<T>("embeddings.norm.gamma", {d}, T{1});
    enc.norm_b = make_param<T>("embeddings.norm.beta", {d});
    for (std::size_t i = 1; i <= config.num_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        EncoderLayer<T> l;
        l.query_w = make_param<T>(p + "attention.query.weight", {d, d});
        l.query_b = make_param<T>(p + "attention.query.bias", {d});
        l.key_w = make_param<T>(p + "attention.key.weight", {d, d});
        l.key_b = make_param<T>(p + "attention.key.bias", {d});
        l.value_w = make_param<T>(p + "attention.value.weight", {d, d});
        l.value_b = make_param<T>(p + "attention.value.bias", {d});
        l.out_w = make_param<T>(p + "attention.output.weight", {d, d});
        l.out_b = make_param<T>(p + "attention.output.bias", {d});
        l.attn_norm_g = make_param<T>(p + "attention.norm.gamma", {d}, T{1});
        l.attn_norm_b = make_param<T>(p + "attention.norm.beta", {d});
        l.ff_in_w = make_param<T>(p + "ffn.input.weight", {d, f});
        l.ff_in_b = make_param<T>(p + "ffn.input.bias", {f});
        l.ff_out_w = make_param<T>(p + "ffn.output.weight", {f, d});
        l.ff_out_b = make_param<T>(p + "ffn.output.bias", {d});
        l.ff_norm_g = make_param<T>(p + "ffn.norm.gamma", {d}, T{1});
        l.ff_norm_b = make_param<T>(p + "ffn.norm.beta", {d});
        enc.layers.push_back(std::move(l));
    }
    return enc;
}

// Weight matrices and embedding tables ~ truncated normal(0.02); biases 0; norm gamma 1, beta 0.
template <class T>
Encoder<T> init_weights(const EncoderConfig& config, std::uint64_t seed) {
    auto enc = allocate_encoder<T>(config);
    Rng rng(seed);
    for (const auto& p : enc.parameters())
        if (p->shape.size() == 2)
            for (auto& v : p->data) v = static_cast<T>(rng.truncated_normal(0.02));
    return enc;
}

template <class T>
void apply_freeze(Encoder<T>& enc, FreezeSpec spec) {
    if (spec.frozen_prefix > enc.config.num_layers)
        throw ConfigError("apply_freeze: frozen prefix " + std::to_string(spec.frozen_prefix) + " exceeds " +
                          std::to_string(enc.config.num_layers) + " layers");
    for (const auto& p : enc.parameters()) p->trainable = true;
    if (spec.frozen_prefix == 0) return;
    for (const auto& p : enc.embedding_parameters()) p->trainable = false;
    for (std::size_t i = 1; i <= spec.frozen_prefix; ++i)
        for (const auto& p : enc.layer_parameters(i)) p->trainable = false;
}

inline Checkpoint encoder_checkpoint(const Encoder<float>& enc) {
    Checkpoint ckpt;
    ckpt.config = enc.config.to_config();
    ckpt.config["kind"] = "encoder";
    for (const auto& p : enc.parameters()) ckpt.tensors.push_back(*p);
    for (auto& t : ckpt.tensors) t.grad.reset();
    return ckpt;
}

// Copies named tensors out of a checkpoint into already-allocated parameters,
// reporting the first missing or mis-shaped tensor.
inline void load_tensors(const Checkpoint& ckpt, const std::vector<ParamPtr<float>>& params) {
    for (const auto& p : params) {
        const auto* t = ckpt.find(p->name);
        if (!t) throw ConfigError("checkpoint is missing tensor '" + p->name + "'");
        if (t->shape != p->shape)
            throw ConfigError("tensor '" + p->name + "' has shape " + shape_string(t->shape) +
                              " in checkpoint, expected " + shape_string(p->shape));
        p->data = t->data;
    }
}

inline Encoder<float> encoder_from_checkpoint(const Checkpoint& ckpt, const EncoderConfig& expected) {
    auto enc = allocate_encoder<float>(expected);
    load_tensors(ckpt, enc.parameters());
    return enc;
}

inline Encoder<float> encoder_from_checkpoint(const Checkpoint& ckpt) {
    return encoder_from_checkpoint(ckpt, EncoderConfig::from_config(ckpt.config));
}

inline Encoder<float> load_encoder(const std::string& path, const EncoderConfig& expected) {
    return encoder_from_checkpoint(load_checkpoint(path), expected);
}

inline Encoder<float> load_encoder(const std::string& path) { return encoder_from_checkpoint(load_checkpoint(path)); }

inline void save_encoder(const std::string& path, const Encoder<float>& enc) {
    save_checkpoint(path, encoder_checkpoint(enc));
}

// Identity of a set of shared encoder weights: SHA-256 of its checkpoint bytes
// with the dropout rate left out (it does not affect inference).
inline std::string encoder_fingerprint(const Encoder<float>& enc) {
    auto ckpt = encoder_checkpoint(enc);
    ckpt.config.erase("dropout");
    return sha256_hex(serialize(ckpt));
}

struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int32_t> ids;
    std::vector<std::uint8_t> mask;

    static TokenBatch from(std::span<const TokenSequence> sequences) {
        TokenBatch b;
        b.batch = sequences.size();
        b.seq = sequences.empty() ? 0 : sequences.front().length();
        for (const auto& s : sequences) {
            if (s.length() != b.seq || s.attention_mask.size() != b.seq)
                throw ShapeError("token batch: sequences must share one length");
            b.ids.insert(b.ids.end(), s.ids.begin(), s.ids.end());
            b.mask.insert(b.mask.end(), s.attention_mask.begin(), s.attention_mask.end());
        }
        return b;
    }

    std::vector<std::size_t> cls_rows() const {
        std::vector<std::size_t> rows(batch);
        for (std::size_t b = 0; b < batch; ++b) rows[b] = b * seq;
        return rows;
    }
};

// Hidden state after the embedding block ("layer 0").
template <class T>
Var embed(Graph<T>& g, const Encoder<T>& enc, const TokenBatch& batch) {
    if (batch.seq > enc.config.max_positions)
        throw ShapeError("embed: sequence length " + std::to_string(batch.seq) + " exceeds max positions " +
                         std::to_string(enc.config.max_positions));
    for (auto id : batch.ids)
        if (id < 0 || static_cast<std::size_t>(id) >= enc.config.vocab_size)
            throw ShapeError("embed: token id " + std::to_string(id) + " outside vocab of " +
                             std::to_string(enc.config.vocab_size));
    std::vector<std::int32_t> positions(batch.ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % batch.seq);
    std::vector<std::int32_t> types(batch.ids.size(), 0);
    Var x = g.add(g.gather(g.param(enc.word), batch.ids), g.gather(g.param(enc.position), std::move(positions)));
    x = g.add(x, g.gather(g.param(enc.token_type), std::move(types)));
    x = g.layer_norm(x, g.param(enc.norm_g), g.param(enc.norm_b));
    return g.dropout(x, static_cast<T>(enc.config.dropout));
}

// Post-norm transformer block with GELU feed-forward.
template <class T>
Var encoder_layer(Graph<T>& g, const EncoderLayer<T>& l, const EncoderConfig& cfg, Var x, const TokenBatch& batch) {
    const T rate = static_cast<T>(cfg.dropout);
    Var q = g.linear(x, g.param(l.query_w), g.param(l.query_b));
    Var k = g.linear(x, g.param(l.key_w), g.param(l.key_b));
    Var v = g.linear(x, g.param(l.value_w), g.param(l.value_b));
    Var a = g.attention(q, k, v, batch.mask, batch.batch, batch.seq, cfg.heads);
    a = g.dropout(g.linear(a, g.param(l.out_w), g.param(l.out_b)), rate);
    x = g.layer_norm(g.add(x, a), g.param(l.attn_norm_g), g.param(l.attn_norm_b));
    Var h = g.gelu(g.linear(x, g.param(l.ff_in_w), g.param(l.ff_in_b)));
    h = g.dropout(g.linear(h, g.param(l.ff_out_w), g.param(l.ff_out_b)), rate);
    return g.layer_norm(g.add(x, h), g.param(l.ff_norm_g), g.param(l.ff_norm_b));
}

// Runs layers from_layer+1 .. to_layer starting from `start` (the hidden state
// after from_layer; computed from the tokens when from_layer == 0 and start is
// invalid). Returns hidden[l] for l in [from_layer, to_layer], indexed by l - from_layer.
template <class T>
std::vector<Var> run_encoder(Graph<T>& g, const Encoder<T>& enc, const TokenBatch& batch, std::size_t from_layer,
                             std::size_t to_layer, Var start = {}) {
    if (to_layer > enc.config.num_layers || from_layer > to_layer)
        throw std::out_of_range("run_encoder: layer range (" + std::to_string(from_layer) + ", " +
                                std::to_string(to_layer) + "] invalid for " +
                                std::to_string(enc.config.num_layers) + " layers");
    if (!start.valid()) {
        if (from_layer != 0) throw std::invalid_argument("run_encoder: start state required past the embeddings");
        start = embed(g, enc, batch);
    }
    std::vector<Var> hidden{start};
    for (std::size_t l = from_layer + 1; l <= to_layer; ++l)
        hidden.push_back(encoder_layer(g, enc.layers[l - 1], enc.config, hidden.back(), batch));
    return hidden;
}

template <class T>
using LayerOutputs = std::map<std::size_t, std::vector<T>>;

inline void check_layers(const std::set<std::size_t>& layers, std::size_t num_layers) {
    for (auto l : layers)
        if (l < 1 || l > num_layers)
            throw std::out_of_range("encode: layer " + std::to_string(l) + " outside [1, " +
                                    std::to_string(num_layers) + "]");
}

// CLS embeddings of the requested layers for every sequence in the batch.
template <class T>
std::vector<LayerOutputs<T>> encode_batch(const Encoder<T>& enc, std::span<const TokenSequence> tokens,
                                          const std::set<std::size_t>& layers, Mode mode = Mode::Infer,
                                          std::uint64_t seed = 0) {
    check_layers(layers, enc.config.num_layers);
    std::vector<LayerOutputs<T>> out(tokens.size());
    if (tokens.empty() || layers.empty()) return out;
    const auto batch = TokenBatch::from(tokens);
    Graph<T> g(mode, seed);
    auto hidden = run_encoder(g, enc, batch, 0, *layers.rbegin());
    const std::size_t d = enc.config.hidden;
    for (auto l : layers) {
        const T* h = g.data(hidden[l]);
        for (std::size_t b = 0; b < batch.batch; ++b) {
            const T* row = h + b * batch.seq * d;
            out[b][l].assign(row, row + d);
        }
    }
    return out;
}

template <class T>
LayerOutputs<T> encode(const Encoder<T>& enc, const TokenSequence& tokens, const std::set<std::size_t>& layers,
                       Mode mode = Mode::Infer, std::uint64_t seed = 0) {
    return encode_batch(enc, std::span<const TokenSequence>(&tokens, 1), layers, mode, seed).front();
}

} // namespace qih
