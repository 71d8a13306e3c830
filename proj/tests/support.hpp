#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qih/encoder.hpp"
#include "qih/random.hpp"
#include "qih/tensor.hpp"

namespace qih::test {

template <class T>
ParamPtr<T> random_param(const std::string& name, Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
    auto p = make_param<T>(name, std::move(shape));
    Rng rng(seed);
    for (auto& v : p->data) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
    return p;
}

template <class T>
std::vector<T> random_values(std::size_t n, std::uint64_t seed, double lo = -1, double hi = 1) {
    Rng rng(seed);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(lo + (hi - lo) * rng.uniform());
    return v;
}

inline EncoderConfig toy_config(std::size_t layers = 2, std::size_t vocab = 40) {
    EncoderConfig c;
    c.num_layers = layers;
    c.hidden = 8;
    c.heads = 2;
    c.feed_forward = 16;
    c.vocab_size = vocab;
    c.max_positions = 8;
    c.dropout = 0.1;
    return c;
}

inline std::vector<TokenSequence> toy_sequences(std::size_t n, std::size_t seq, std::size_t vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenSequence> out;
    for (std::size_t i = 0; i < n; ++i) {
        TokenSequence t;
        const std::size_t len = 2 + rng.below(seq - 1);
        for (std::size_t j = 0; j < seq; ++j) {
            const bool real = j < len;
            t.ids.push_back(j == 0 ? 2 : real ? static_cast<std::int32_t>(3 + rng.below(vocab - 3)) : 0);
            t.attention_mask.push_back(real ? 1 : 0);
        }
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace qih::test
