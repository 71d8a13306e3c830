#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace qih {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor. Parameters are held through ParamPtr so graphs,
// optimizers and checkpoints can all refer to the same storage.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    std::optional<std::vector<T>> grad;
    std::string name;
    bool trainable = true;

    Tensor() = default;
    Tensor(std::string name_, Shape shape_, T fill = T{0})
        : shape(std::move(shape_)), data(element_count(shape), fill), name(std::move(name_)) {}

    std::size_t size() const { return data.size(); }

    // Rows/cols of the 2-D view used by the graph; rank-1 tensors are a single row.
    std::size_t rows() const {
        if (shape.empty()) return 1;
        if (shape.size() == 1) return 1;
        return element_count(shape) / shape.back();
    }
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

    void zero_grad() { grad.reset(); }

    void check_invariants() const {
        if (element_count(shape) != data.size())
            throw ShapeError("tensor '" + name + "': shape " + shape_string(shape) +
                             " does not match " + std::to_string(data.size()) + " values");
        if (grad && grad->size() != data.size())
            throw ShapeError("tensor '" + name + "': gradient size mismatch");
    }
};

template <class T>
using ParamPtr = std::shared_ptr<Tensor<T>>;

template <class T>
ParamPtr<T> make_param(std::string name, Shape shape, T fill = T{0}) {
    return std::make_shared<Tensor<T>>(std::move(name), std::move(shape), fill);
}

template <class T>
ParamPtr<T> clone_param(const Tensor<T>& src) {
    auto out = std::make_shared<Tensor<T>>(src);
    out->grad.reset();
    return out;
}

template <class To, class From>
ParamPtr<To> cast_param(const Tensor<From>& src) {
    auto out = std::make_shared<Tensor<To>>();
    out->shape = src.shape;
    out->name = src.name;
    out->trainable = src.trainable;
    out->data.assign(src.data.begin(), src.data.end());
    return out;
}

template <class T>
bool all_finite(const std::vector<T>& values) {
    for (T v : values)
        if (!std::isfinite(v)) return false;
    return true;
}

template <class T>
std::size_t total_size(const std::vector<ParamPtr<T>>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p->size();
    return n;
}

template <class T>
std::size_t trainable_size(const std::vector<ParamPtr<T>>& params) {
    std::size_t n = 0;
    for (const auto& p : params)
        if (p->trainable) n += p->size();
    return n;
}

} // namespace qih
