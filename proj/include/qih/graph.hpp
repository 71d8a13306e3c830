#pragma once

// Tape-based reverse-mode autodiff over 2-D row-major matrices.
//
// Every kernel computes each output row from the matching input row(s) only,
// with a fixed accumulation order, so a query evaluated inside a batch gives
// bit-identical results to the same query evaluated alone.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qih/tensor.hpp"

namespace qih {

enum class Mode { Train, Infer };

namespace kernel {

// y[n,m] += x[n,k] * w[k,m]
template <class T>
void gemm_nn(const T* x, const T* w, T* y, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        T* yr = y + i * m;
        const T* xr = x + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T xv = xr[p];
            const T* wr = w + p * m;
            for (std::size_t j = 0; j < m; ++j) yr[j] += xv * wr[j];
        }
    }
}

// dx[n,k] += dy[n,m] * w[k,m]^T
template <class T>
void gemm_nt(const T* dy, const T* w, T* dx, std::size_t n, std::size_t k, std::size_t m) {
    std::vector<T> wt(k * m);
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < m; ++j) wt[j * k + p] = w[p * m + j];
    gemm_nn(dy, wt.data(), dx, n, m, k);
}

// dw[k,m] += x[n,k]^T * dy[n,m]
template <class T>
void gemm_tn(const T* x, const T* dy, T* dw, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* xr = x + i * k;
        const T* dyr = dy + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T xv = xr[p];
            if (xv == T{0}) continue;
            T* dwr = dw + p * m;
            for (std::size_t j = 0; j < m; ++j) dwr[j] += xv * dyr[j];
        }
    }
}

template <class T>
T sigmoid(T x) {
    if (x >= 0) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

template <class T>
T gelu(T x) {
    return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
    return cdf + x * pdf;
}

// Masked scaled-dot-product attention probabilities for one (sequence, head).
// q/k rows are `stride` apart; masked keys get probability exactly 0.
template <class T>
void attention_probs(const T* q, const T* k, std::size_t stride, std::size_t seq, std::size_t head_dim,
                     const std::uint8_t* mask, T* probs) {
    const T scale = T{1} / std::sqrt(static_cast<T>(head_dim));
    for (std::size_t i = 0; i < seq; ++i) {
        T* row = probs + i * seq;
        T maxv = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
            if (!mask[j]) {
                row[j] = 0;
                continue;
            }
            T s = 0;
            const T* qi = q + i * stride;
            const T* kj = k + j * stride;
            for (std::size_t d = 0; d < head_dim; ++d) s += qi[d] * kj[d];
            row[j] = s * scale;
            maxv = std::max(maxv, row[j]);
        }
        T sum = 0;
        for (std::size_t j = 0; j < seq; ++j) {
            if (!mask[j]) continue;
            row[j] = std::exp(row[j] - maxv);
            sum += row[j];
        }
        if (sum > 0)
            for (std::size_t j = 0; j < seq; ++j) row[j] /= sum;
    }
}

} // namespace kernel

struct Var {
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::size_t id = npos;
    bool valid() const { return id != npos; }
};

template <class T>
class Graph {
public:
    explicit Graph(Mode mode = Mode::Infer, std::uint64_t seed = 0) : mode_(mode), rng_(seed) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = delete;
    Graph& operator=(Graph&&) = delete;

    Mode mode() const { return mode_; }
    std::size_t size() const { return nodes_.size(); }

    Var input(std::size_t rows, std::size_t cols, std::vector<T> values) {
        if (values.size() != rows * cols)
            throw ShapeError("input: " + std::to_string(values.size()) + " values for [" +
                             std::to_string(rows) + ", " + std::to_string(cols) + "]");
        Var v = make(rows, cols, false);
        nodes_[v.id].value = std::move(values);
        return v;
    }

    // Parameters are referenced, not copied. Gradient flows only into trainable ones.
    Var param(const ParamPtr<T>& p) {
        if (!p) throw std::invalid_argument("param: null tensor");
        p->check_invariants();
        Node n;
        n.rows = p->rows();
        n.cols = p->cols();
        n.param = p;
        n.needs_grad = p->trainable && mode_ == Mode::Train;
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    std::size_t rows(Var v) const { return node(v).rows; }
    std::size_t cols(Var v) const { return node(v).cols; }
    const T* data(Var v) const {
        const Node& n = node(v);
        return n.param ? n.param->data.data() : n.value.data();
    }
    std::vector<T> values(Var v) const {
        const T* d = data(v);
        return std::vector<T>(d, d + rows(v) * cols(v));
    }
    T scalar(Var v) const {
        if (rows(v) * cols(v) != 1) throw ShapeError("scalar: node is not 1x1");
        return data(v)[0];
    }
    // Gradient of the last backward pass with respect to a node (empty if none flowed).
    const std::vector<T>& grad(Var v) const { return node(v).grad; }

    Var matmul(Var a, Var b) {
        const Node &na = node(a), &nb = node(b);
        if (na.cols != nb.rows)
            throw ShapeError("matmul: lhs " + dims(na) + " incompatible with rhs " + dims(nb));
        const std::size_t n = na.rows, k = na.cols, m = nb.cols;
        Var out = make(n, m, needs(a) || needs(b));
        kernel::gemm_nn(data(a), data(b), nodes_[out.id].value.data(), n, k, m);
        on_backward(out, [this, a, b, out, n, k, m] {
            const T* g = nodes_[out.id].grad.data();
            if (needs(a)) kernel::gemm_nt(g, data(b), grad_buf(a), n, k, m);
            if (needs(b)) kernel::gemm_tn(data(a), g, grad_buf(b), n, k, m);
        });
        return out;
    }

    // x[n,k] * w[k,m] + bias[m]
    Var linear(Var x, Var w, Var bias) {
        const Node& nb = node(bias);
        if (nb.rows * nb.cols != node(w).cols)
            throw ShapeError("linear: bias " + dims(nb) + " does not match weight " + dims(node(w)));
        return add_row(matmul(x, w), bias);
    }

    Var add(Var a, Var b) {
        const Node &na = node(a), &nb = node(b);
        if (na.rows != nb.rows || na.cols != nb.cols)
            throw ShapeError("add: lhs " + dims(na) + " and rhs " + dims(nb) + " differ");
        const std::size_t len = na.rows * na.cols;
        Var out = make(na.rows, na.cols, needs(a) || needs(b));
        T* o = nodes_[out.id].value.data();
        const T *pa = data(a), *pb = data(b);
        for (std::size_t i = 0; i < len; ++i) o[i] = pa[i] + pb[i];
        on_backward(out, [this, a, b, out, len] {
            const T* g = nodes_[out.id].grad.data();
            for (Var in : {a, b})
                if (needs(in)) {
                    T* d = grad_buf(in);
                    for (std::size_t i = 0; i < len; ++i) d[i] += g[i];
                }
        });
        return out;
    }

    // Broadcast-add a single row to every row of x.
    Var add_row(Var x, Var row) {
        const Node &nx = node(x), &nr = node(row);
        if (nr.rows * nr.cols != nx.cols)
            throw ShapeError("add_row: row " + dims(nr) + " does not broadcast over " + dims(nx));
        const std::size_t n = nx.rows, m = nx.cols;
        Var out = make(n, m, needs(x) || needs(row));
        T* o = nodes_[out.id].value.data();
        const T *px = data(x), *pr = data(row);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) o[i * m + j] = px[i * m + j] + pr[j];
        on_backward(out, [this, x, row, out, n, m] {
            const T* g = nodes_[out.id].grad.data();
            if (needs(x)) {
                T* d = grad_buf(x);
                for (std::size_t i = 0; i < n * m; ++i) d[i] += g[i];
            }
            if (needs(row)) {
                T* d = grad_buf(row);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) d[j] += g[i * m + j];
            }
        });
        return out;
    }

    Var gelu(Var x) {
        return unary(x, [](T v) { return kernel::gelu(v); },
                     [](T in, T) { return kernel::gelu_grad(in); });
    }

    Var sigmoid(Var x) {
        return unary(x, [](T v) { return kernel::sigmoid(v); },
                     [](T, T out) { return out * (T{1} - out); });
    }

    // Row-wise layer norm: (x - mean) / sqrt(var + eps) * gamma + beta.
    Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-12)) {
        const Node& nx = node(x);
        const std::size_t n = nx.rows, m = nx.cols;
        if (node(gamma).rows * node(gamma).cols != m || node(beta).rows * node(beta).cols != m)
            throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(m) + " values, input " +
                             dims(nx));
        Var out = make(n, m, needs(x) || needs(gamma) || needs(beta));
        std::vector<T> xhat(n * m), inv_std(n);
        const T *px = data(x), *pg = data(gamma), *pb = data(beta);
        T* o = nodes_[out.id].value.data();
        for (std::size_t i = 0; i < n; ++i) {
            const T* r = px + i * m;
            double mean = 0;
            for (std::size_t j = 0; j < m; ++j) mean += r[j];
            mean /= static_cast<double>(m);
            double var = 0;
            for (std::size_t j = 0; j < m; ++j) {
                const double c = r[j] - mean;
                var += c * c;
            }
            var /= static_cast<double>(m);
            const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            inv_std[i] = istd;
            for (std::size_t j = 0; j < m; ++j) {
                const T h = static_cast<T>(r[j] - mean) * istd;
                xhat[i * m + j] = h;
                o[i * m + j] = h * pg[j] + pb[j];
            }
        }
        on_backward(out, [this, x, gamma, beta, out, n, m, xhat = std::move(xhat),
                          inv_std = std::move(inv_std)] {
            const T* g = nodes_[out.id].grad.data();
            const T* pg = data(gamma);
            if (needs(gamma) || needs(beta)) {
                T* dg = needs(gamma) ? grad_buf(gamma) : nullptr;
                T* db = needs(beta) ? grad_buf(beta) : nullptr;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                        if (dg) dg[j] += g[i * m + j] * xhat[i * m + j];
                        if (db) db[j] += g[i * m + j];
                    }
            }
            if (needs(x)) {
                T* dx = grad_buf(x);
                for (std::size_t i = 0; i < n; ++i) {
                    double sum_dh = 0, sum_dh_h = 0;
                    for (std::size_t j = 0; j < m; ++j) {
                        const double dh = g[i * m + j] * pg[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[i * m + j];
                    }
                    const double inv_m = 1.0 / static_cast<double>(m);
                    for (std::size_t j = 0; j < m; ++j) {
                        const double dh = g[i * m + j] * pg[j];
                        dx[i * m + j] += static_cast<T>(
                            inv_std[i] * (dh - sum_dh * inv_m - xhat[i * m + j] * sum_dh_h * inv_m));
                    }
                }
            }
        });
        return out;
    }

    // Row-wise softmax.
    Var softmax(Var x) {
        const Node& nx = node(x);
        const std::size_t n = nx.rows, m = nx.cols;
        Var out = make(n, m, needs(x));
        T* o = nodes_[out.id].value.data();
        const T* px = data(x);
        for (std::size_t i = 0; i < n; ++i) softmax_row(px + i * m, o + i * m, m);
        on_backward(out, [this, x, out, n, m] {
            const T* g = nodes_[out.id].grad.data();
            const T* y = nodes_[out.id].value.data();
            T* dx = grad_buf(x);
            for (std::size_t i = 0; i < n; ++i) {
                T dot = 0;
                for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * y[i * m + j];
                for (std::size_t j = 0; j < m; ++j) dx[i * m + j] += y[i * m + j] * (g[i * m + j] - dot);
            }
        });
        return out;
    }

    // Multi-head self-attention core. q, k, v: [batch*seq, dim]; mask: batch*seq
    // entries, 0 marks a padded key. Returns the concatenated head outputs.
    Var attention(Var q, Var k, Var v, std::span<const std::uint8_t> mask, std::size_t batch,
                  std::size_t seq, std::size_t heads) {
        const Node &nq = node(q), &nk = node(k), &nv = node(v);
        const std::size_t dim = nq.cols;
        if (nk.rows != nq.rows || nv.rows != nq.rows || nk.cols != dim || nv.cols != dim)
            throw ShapeError("attention: q " + dims(nq) + ", k " + dims(nk) + ", v " + dims(nv) +
                             " must share a shape");
        if (nq.rows != batch * seq || mask.size() != batch * seq)
            throw ShapeError("attention: batch*seq = " + std::to_string(batch * seq) + " but q " + dims(nq) +
                             " and mask has " + std::to_string(mask.size()) + " entries");
        if (heads == 0 || dim % heads != 0)
            throw ShapeError("attention: dim " + std::to_string(dim) + " not divisible by heads " +
                             std::to_string(heads));
        const std::size_t hd = dim / heads;
        Var out = make(nq.rows, dim, needs(q) || needs(k) || needs(v));
        std::vector<T> probs(batch * heads * seq * seq);
        std::vector<std::uint8_t> mask_copy(mask.begin(), mask.end());
        const T *pq = data(q), *pk = data(k), *pv = data(v);
        T* o = nodes_[out.id].value.data();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t base = b * seq * dim + h * hd;
                T* p = probs.data() + (b * heads + h) * seq * seq;
                kernel::attention_probs(pq + base, pk + base, dim, seq, hd, mask_copy.data() + b * seq, p);
                for (std::size_t i = 0; i < seq; ++i) {
                    T* oi = o + base + i * dim;
                    for (std::size_t j = 0; j < seq; ++j) {
                        const T w = p[i * seq + j];
                        if (w == T{0}) continue;
                        const T* vj = pv + base + j * dim;
                        for (std::size_t d = 0; d < hd; ++d) oi[d] += w * vj[d];
                    }
                }
            }
        on_backward(out, [this, q, k, v, out, batch, seq, heads, dim, hd, probs = std::move(probs)] {
            const T* g = nodes_[out.id].grad.data();
            const T *pq = data(q), *pk = data(k), *pv = data(v);
            T* dq = needs(q) ? grad_buf(q) : nullptr;
            T* dk = needs(k) ? grad_buf(k) : nullptr;
            T* dv = needs(v) ? grad_buf(v) : nullptr;
            const T scale = T{1} / std::sqrt(static_cast<T>(hd));
            std::vector<T> dp(seq);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t base = b * seq * dim + h * hd;
                    const T* p = probs.data() + (b * heads + h) * seq * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const T* gi = g + base + i * dim;
                        T dot = 0;
                        for (std::size_t j = 0; j < seq; ++j) {
                            const T w = p[i * seq + j];
                            if (w == T{0}) {
                                dp[j] = 0;
                                continue;
                            }
                            const T* vj = pv + base + j * dim;
                            T s = 0;
                            for (std::size_t d = 0; d < hd; ++d) s += gi[d] * vj[d];
                            dp[j] = s;
                            dot += w * s;
                            if (dv) {
                                T* dvj = dv + base + j * dim;
                                for (std::size_t d = 0; d < hd; ++d) dvj[d] += w * gi[d];
                            }
                        }
                        for (std::size_t j = 0; j < seq; ++j) {
                            const T w = p[i * seq + j];
                            if (w == T{0}) continue;
                            const T ds = w * (dp[j] - dot) * scale;
                            if (dq) {
                                T* dqi = dq + base + i * dim;
                                const T* kj = pk + base + j * dim;
                                for (std::size_t d = 0; d < hd; ++d) dqi[d] += ds * kj[d];
                            }
                            if (dk) {
                                T* dkj = dk + base + j * dim;
                                const T* qi = pq + base + i * dim;
                                for (std::size_t d = 0; d < hd; ++d) dkj[d] += ds * qi[d];
                            }
                        }
                    }
                }
        });
        return out;
    }

    // Row lookup into a [V, D] table.
    Var gather(Var table, std::vector<std::int32_t> ids) {
        const Node& nt = node(table);
        for (auto id : ids)
            if (id < 0 || static_cast<std::size_t>(id) >= nt.rows)
                throw ShapeError("gather: id " + std::to_string(id) + " outside table " + dims(nt));
        const std::size_t m = nt.cols;
        Var out = make(ids.size(), m, needs(table));
        T* o = nodes_[out.id].value.data();
        const T* pt = data(table);
        for (std::size_t i = 0; i < ids.size(); ++i)
            std::copy_n(pt + static_cast<std::size_t>(ids[i]) * m, m, o + i * m);
        on_backward(out, [this, table, out, m, ids = std::move(ids)] {
            const T* g = nodes_[out.id].grad.data();
            T* d = grad_buf(table);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                T* dr = d + static_cast<std::size_t>(ids[i]) * m;
                for (std::size_t j = 0; j < m; ++j) dr[j] += g[i * m + j];
            }
        });
        return out;
    }

    // Mean of table rows per bag; bag b spans ids[offsets[b], offsets[b+1]). Empty bags give zeros.
    Var embedding_bag_mean(Var table, std::vector<std::int32_t> ids, std::vector<std::size_t> offsets) {
        const Node& nt = node(table);
        if (offsets.empty() || offsets.back() != ids.size())
            throw ShapeError("embedding_bag_mean: offsets must end at ids.size()");
        for (auto id : ids)
            if (id < 0 || static_cast<std::size_t>(id) >= nt.rows)
                throw ShapeError("embedding_bag_mean: id " + std::to_string(id) + " outside table " + dims(nt));
        const std::size_t m = nt.cols, bags = offsets.size() - 1;
        Var out = make(bags, m, needs(table));
        T* o = nodes_[out.id].value.data();
        const T* pt = data(table);
        for (std::size_t b = 0; b < bags; ++b) {
            const std::size_t lo = offsets[b], hi = offsets[b + 1];
            if (hi == lo) continue;
            for (std::size_t i = lo; i < hi; ++i) {
                const T* r = pt + static_cast<std::size_t>(ids[i]) * m;
                for (std::size_t j = 0; j < m; ++j) o[b * m + j] += r[j];
            }
            const T inv = T{1} / static_cast<T>(hi - lo);
            for (std::size_t j = 0; j < m; ++j) o[b * m + j] *= inv;
        }
        on_backward(out, [this, table, out, m, bags, ids = std::move(ids), offsets = std::move(offsets)] {
            const T* g = nodes_[out.id].grad.data();
            T* d = grad_buf(table);
            for (std::size_t b = 0; b < bags; ++b) {
                const std::size_t lo = offsets[b], hi = offsets[b + 1];
                if (hi == lo) continue;
                const T inv = T{1} / static_cast<T>(hi - lo);
                for (std::size_t i = lo; i < hi; ++i) {
                    T* dr = d + static_cast<std::size_t>(ids[i]) * m;
                    for (std::size_t j = 0; j < m; ++j) dr[j] += g[b * m + j] * inv;
                }
            }
        });
        return out;
    }

    Var select_rows(Var x, std::vector<std::size_t> row_ids) {
        const Node& nx = node(x);
        for (auto r : row_ids)
            if (r >= nx.rows) throw ShapeError("select_rows: row " + std::to_string(r) + " outside " + dims(nx));
        const std::size_t m = nx.cols;
        Var out = make(row_ids.size(), m, needs(x));
        T* o = nodes_[out.id].value.data();
        const T* px = data(x);
        for (std::size_t i = 0; i < row_ids.size(); ++i) std::copy_n(px + row_ids[i] * m, m, o + i * m);
        on_backward(out, [this, x, out, m, row_ids = std::move(row_ids)] {
            const T* g = nodes_[out.id].grad.data();
            T* d = grad_buf(x);
            for (std::size_t i = 0; i < row_ids.size(); ++i)
                for (std::size_t j = 0; j < m; ++j) d[row_ids[i] * m + j] += g[i * m + j];
        });
        return out;
    }

    // Inverted dropout; identity in inference mode or at rate 0.
    Var dropout(Var x, T rate) {
        if (rate < 0 || rate >= 1) throw ConfigError("dropout: rate must be in [0, 1)");
        if (mode_ == Mode::Infer || rate == T{0}) return x;
        const Node& nx = node(x);
        const std::size_t len = nx.rows * nx.cols;
        std::vector<T> scale(len);
        const T keep = T{1} / (T{1} - rate);
        for (auto& s : scale) s = uniform() < static_cast<double>(rate) ? T{0} : keep;
        Var out = make(nx.rows, nx.cols, needs(x));
        T* o = nodes_[out.id].value.data();
        const T* px = data(x);
        for (std::size_t i = 0; i < len; ++i) o[i] = px[i] * scale[i];
        on_backward(out, [this, x, out, len, scale = std::move(scale)] {
            const T* g = nodes_[out.id].grad.data();
            T* d = grad_buf(x);
            for (std::size_t i = 0; i < len; ++i) d[i] += g[i] * scale[i];
        });
        return out;
    }

    // Binary cross-entropy on probabilities, summed over columns and averaged
    // over rows. Probabilities are clamped to [1e-7, 1 - 1e-7].
    Var bce(Var probs, std::vector<T> targets) {
        const Node& np = node(probs);
        const std::size_t n = np.rows, m = np.cols;
        check_targets(targets, n * m, "bce");
        const T* p = data(probs);
        double loss = 0;
        for (std::size_t i = 0; i < n * m; ++i) {
            const double c = clamp_prob(p[i]);
            loss -= targets[i] * std::log(c) + (1 - targets[i]) * std::log(1 - c);
        }
        Var out = make(1, 1, needs(probs));
        nodes_[out.id].value[0] = static_cast<T>(loss / static_cast<double>(n));
        on_backward(out, [this, probs, out, n, m, targets = std::move(targets)] {
            const T g = nodes_[out.id].grad[0] / static_cast<T>(n);
            const T* p = data(probs);
            T* d = grad_buf(probs);
            for (std::size_t i = 0; i < n * m; ++i) {
                const double c = clamp_prob(p[i]);
                d[i] += g * static_cast<T>(-targets[i] / c + (1 - targets[i]) / (1 - c));
            }
        });
        return out;
    }

    // sigmoid followed by bce, fused. The loss value matches bce(sigmoid(z));
    // the gradient is sigmoid(z) - y, which stays informative when the sigmoid saturates.
    Var sigmoid_bce(Var logits, std::vector<T> targets) {
        const Node& nz = node(logits);
        const std::size_t n = nz.rows, m = nz.cols;
        check_targets(targets, n * m, "sigmoid_bce");
        const T* z = data(logits);
        double loss = 0;
        for (std::size_t i = 0; i < n * m; ++i) {
            const double c = clamp_prob(kernel::sigmoid(static_cast<double>(z[i])));
            loss -= targets[i] * std::log(c) + (1 - targets[i]) * std::log(1 - c);
        }
        Var out = make(1, 1, needs(logits));
        nodes_[out.id].value[0] = static_cast<T>(loss / static_cast<double>(n));
        on_backward(out, [this, logits, out, n, m, targets = std::move(targets)] {
            const T g = nodes_[out.id].grad[0] / static_cast<T>(n);
            const T* z = data(logits);
            T* d = grad_buf(logits);
            for (std::size_t i = 0; i < n * m; ++i) d[i] += g * (kernel::sigmoid(z[i]) - targets[i]);
        });
        return out;
    }

    // Mean over rows of -log softmax(logits)[label].
    Var softmax_cross_entropy(Var logits, std::vector<int> labels) {
        const Node& nz = node(logits);
        const std::size_t n = nz.rows, m = nz.cols;
        if (labels.size() != n)
            throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                             dims(nz));
        for (int l : labels)
            if (l < 0 || static_cast<std::size_t>(l) >= m)
                throw ShapeError("softmax_cross_entropy: label " + std::to_string(l) + " out of range");
        std::vector<T> sm(n * m);
        const T* z = data(logits);
        double loss = 0;
        for (std::size_t i = 0; i < n; ++i) {
            softmax_row(z + i * m, sm.data() + i * m, m);
            T maxv = *std::max_element(z + i * m, z + (i + 1) * m);
            double s = 0;
            for (std::size_t j = 0; j < m; ++j) s += std::exp(static_cast<double>(z[i * m + j] - maxv));
            loss += std::log(s) - static_cast<double>(z[i * m + static_cast<std::size_t>(labels[i])] - maxv);
        }
        Var out = make(1, 1, needs(logits));
        nodes_[out.id].value[0] = static_cast<T>(loss / static_cast<double>(n));
        on_backward(out, [this, logits, out, n, m, labels = std::move(labels), sm = std::move(sm)] {
            const T g = nodes_[out.id].grad[0] / static_cast<T>(n);
            T* d = grad_buf(logits);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    d[i * m + j] += g * (sm[i * m + j] - (static_cast<int>(j) == labels[i] ? T{1} : T{0}));
        });
        return out;
    }

    // Scalar sum_i w_i * x_i; used to reduce arbitrary outputs for gradient checks.
    Var weighted_sum(Var x, std::vector<T> weights) {
        const Node& nx = node(x);
        const std::size_t len = nx.rows * nx.cols;
        if (weights.size() != len)
            throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for " + dims(nx));
        const T* px = data(x);
        double s = 0;
        for (std::size_t i = 0; i < len; ++i) s += static_cast<double>(weights[i]) * px[i];
        Var out = make(1, 1, needs(x));
        nodes_[out.id].value[0] = static_cast<T>(s);
        on_backward(out, [this, x, out, len, weights = std::move(weights)] {
            const T g = nodes_[out.id].grad[0];
            T* d = grad_buf(x);
            for (std::size_t i = 0; i < len; ++i) d[i] += g * weights[i];
        });
        return out;
    }

    // Reverse pass from a scalar loss. Trainable parameters referenced by this
    // graph get their gradient accumulated into Tensor::grad; frozen ones are untouched.
    void backward(Var loss) {
        if (nodes_.empty() || !loss.valid() || loss.id >= nodes_.size())
            throw std::logic_error("backward: no forward pass recorded for this loss");
        if (backward_done_) throw std::logic_error("backward: graph already differentiated");
        Node& root = nodes_[loss.id];
        if (root.rows * root.cols != 1) throw ShapeError("backward: loss must be scalar, got " + dims(root));
        if (!all_finite(std::vector<T>(data(loss), data(loss) + 1)))
            throw NumericError("backward: loss is not finite");
        backward_done_ = true;
        if (!root.needs_grad) return;
        root.grad.assign(1, T{1});
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.empty() || !n.backward) continue;
            n.backward();
        }
        for (auto& n : nodes_) {
            if (!n.param || !n.param->trainable || n.grad.empty()) continue;
            if (!all_finite(n.grad)) throw NumericError("backward: non-finite gradient for '" + n.param->name + "'");
            auto& acc = n.param->grad;
            if (!acc) acc.emplace(n.param->size(), T{0});
            for (std::size_t j = 0; j < n.grad.size(); ++j) (*acc)[j] += n.grad[j];
        }
    }

private:
    struct Node {
        std::size_t rows = 0, cols = 0;
        std::vector<T> value;
        ParamPtr<T> param;
        std::vector<T> grad;
        bool needs_grad = false;
        std::function<void()> backward;
    };

    static double clamp_prob(double p) { return std::clamp(p, 1e-7, 1.0 - 1e-7); }

    static void check_targets(const std::vector<T>& targets, std::size_t expected, const char* op) {
        if (targets.size() != expected)
            throw ShapeError(std::string(op) + ": " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(expected) + " predictions");
    }

    static void softmax_row(const T* in, T* out, std::size_t m) {
        const T maxv = *std::max_element(in, in + m);
        T sum = 0;
        for (std::size_t j = 0; j < m; ++j) {
            out[j] = std::exp(in[j] - maxv);
            sum += out[j];
        }
        for (std::size_t j = 0; j < m; ++j) out[j] /= sum;
    }

    const Node& node(Var v) const {
        if (!v.valid() || v.id >= nodes_.size()) throw std::out_of_range("graph: unknown node");
        return nodes_[v.id];
    }
    bool needs(Var v) const { return nodes_[v.id].needs_grad; }

    static std::string dims(const Node& n) {
        std::string s = "[" + std::to_string(n.rows) + ", " + std::to_string(n.cols) + "]";
        if (n.param) s = "'" + n.param->name + "' " + s;
        return s;
    }

    Var make(std::size_t rows, std::size_t cols, bool needs_grad) {
        Node n;
        n.rows = rows;
        n.cols = cols;
        n.value.assign(rows * cols, T{0});
        n.needs_grad = needs_grad && mode_ == Mode::Train;
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    template <class F>
    void on_backward(Var out, F&& fn) {
        if (nodes_[out.id].needs_grad) nodes_[out.id].backward = std::forward<F>(fn);
        if (!all_finite(nodes_[out.id].value)) throw NumericError("forward produced a non-finite value");
    }

    T* grad_buf(Var v) {
        Node& n = nodes_[v.id];
        if (n.grad.empty()) n.grad.assign(n.rows * n.cols, T{0});
        return n.grad.data();
    }

    template <class F, class G>
    Var unary(Var x, F f, G df) {
        const Node& nx = node(x);
        const std::size_t len = nx.rows * nx.cols;
        Var out = make(nx.rows, nx.cols, needs(x));
        T* o = nodes_[out.id].value.data();
        const T* px = data(x);
        for (std::size_t i = 0; i < len; ++i) o[i] = f(px[i]);
        on_backward(out, [this, x, out, len, df] {
            const T* g = nodes_[out.id].grad.data();
            const T* in = data(x);
            const T* y = nodes_[out.id].value.data();
            T* d = grad_buf(x);
            for (std::size_t i = 0; i < len; ++i) d[i] += g[i] * df(in[i], y[i]);
        });
        return out;
    }

    double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

    Mode mode_;
    std::mt19937_64 rng_;
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

} // namespace qih
