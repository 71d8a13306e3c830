#pragma once

// QIH1 checkpoint file:
//   "QIH1"
//   u32 config length, config text ("key=value\n" lines, sorted by key)
//   u32 tensor count
//   per tensor: u32 name length, name, u32 rank, u64 dims[rank], float32 payload
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include "qih/tensor.hpp"

namespace qih {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using ConfigBlock = std::map<std::string, std::string>;

struct Checkpoint {
    ConfigBlock config;
    std::vector<Tensor<float>> tensors;

    const Tensor<float>* find(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}
    std::string_view take(std::size_t n) {
        if (n > bytes_.size() - pos_) throw FormatError("checkpoint: truncated file");
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint64_t uint(int width) {
        auto s = take(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = width - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string config_text(const ConfigBlock& config) {
    std::string text;
    for (const auto& [k, v] : config) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw FormatError("config entry '" + k + "' contains a reserved character");
        text += k + "=" + v + "\n";
    }
    return text;
}

inline ConfigBlock parse_config_text(std::string_view text) {
    ConfigBlock config;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(pos, end - pos);
        pos = end + 1;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        auto first = line.find_first_not_of(" \t");
        if (first == std::string_view::npos || line[first] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string_view::npos) throw FormatError("config line without '=': " + std::string(line));
        auto trim = [](std::string_view s) {
            auto b = s.find_first_not_of(" \t");
            auto e = s.find_last_not_of(" \t");
            return b == std::string_view::npos ? std::string() : std::string(s.substr(b, e - b + 1));
        };
        config[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return config;
}

inline void append_tensor(std::string& out, const Tensor<float>& t) {
    t.check_invariants();
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_u64(out, d);
    for (float f : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
}

inline std::string serialize(const Checkpoint& ckpt) {
    std::string out = "QIH1";
    const std::string text = config_text(ckpt.config);
    detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) append_tensor(out, t);
    return out;
}

inline Checkpoint deserialize(std::string_view bytes) {
    detail::Reader r(bytes);
    if (r.take(4) != "QIH1") throw FormatError("checkpoint: bad magic (expected QIH1)");
    Checkpoint ckpt;
    const auto config_len = r.uint(4);
    ckpt.config = parse_config_text(r.take(config_len));
    const auto count = r.uint(4);
    for (std::uint64_t i = 0; i < count; ++i) {
        Tensor<float> t;
        t.name = std::string(r.take(r.uint(4)));
        const auto rank = r.uint(4);
        for (std::uint64_t d = 0; d < rank; ++d) t.shape.push_back(r.uint(8));
        const std::size_t n = element_count(t.shape);
        t.data.resize(n);
        for (std::size_t j = 0; j < n; ++j) t.data[j] = std::bit_cast<float>(static_cast<std::uint32_t>(r.uint(4)));
        ckpt.tensors.push_back(std::move(t));
    }
    if (!r.done()) throw FormatError("checkpoint: trailing bytes after last tensor");
    return ckpt;
}

inline void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, serialize(ckpt)); }
inline Checkpoint load_checkpoint(const std::string& path) { return deserialize(read_file(path)); }

inline std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    std::ostringstream ss;
    for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return ss.str();
}

// SHA-256 over the serialized records of the given tensors, in order.
inline std::string tensor_checksum(const std::vector<ParamPtr<float>>& tensors) {
    std::string bytes;
    for (const auto& t : tensors) append_tensor(bytes, *t);
    return sha256_hex(bytes);
}

} // namespace qih
