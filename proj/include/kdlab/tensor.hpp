#pragma once

// Dense double-precision tensors with tape-based reverse-mode autodiff.
// One tape per training step; the tape is the implicit graph recorded on
// the result tensors, replayed in reverse execution order by backward().

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace kdlab {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

namespace detail {

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // sized lazily, same numel as data
    std::uint64_t node_id = next_node_id();
    // Parents that require grad; traversal order of the reverse pass.
    std::vector<std::shared_ptr<TensorImpl>> parents;
    // Accumulates d(root)/d(parent) into each parent's grad buffer.
    std::function<void(const TensorImpl&)> backprop;

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { grad.assign(data.size(), 0.0); }
};

// Grad recording can be suspended (teacher forward passes, evaluation).
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        auto impl = std::make_shared<detail::TensorImpl>();
        impl->data.assign(shape_numel(shape), value);
        impl->shape = std::move(shape);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
        auto impl = std::make_shared<detail::TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor scalar(double value) { return from_values({1}, {value}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->data.size(); }
    std::size_t dim() const { return impl_->shape.size(); }
    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) {
        if (v && impl_->backprop)
            throw std::logic_error("requires_grad may only be toggled on leaf tensors");
        impl_->requires_grad = v;
    }
    bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
    std::vector<double>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw std::logic_error("grad accessed before backward");
        return impl_->grad;
    }
    void clear_grad() { impl_->grad.clear(); }
    bool is_leaf() const { return !impl_->backprop; }

    double value() const {
        if (numel() != 1) throw std::invalid_argument("value() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    double at(std::initializer_list<std::size_t> idx) const {
        return impl_->data[flat_index(idx)];
    }

    bool all_finite() const {
        for (double v : impl_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        const Shape& s = impl_->shape;
        if (idx.size() != s.size()) throw std::invalid_argument("index rank mismatch");
        std::size_t flat = 0, d = 0;
        for (std::size_t i : idx) {
            if (i >= s[d]) throw std::out_of_range("index out of range");
            flat = flat * s[d] + i;
            ++d;
        }
        return flat;
    }

    std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

// Makes a result node; records parents/backprop only when the tape is live
// and some input needs gradients.
inline Tensor make_node(Shape shape, std::vector<double> data,
                        std::vector<Tensor> inputs,
                        std::function<void(const TensorImpl&)> backprop) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool track = grad_enabled_flag();
    bool needs = false;
    if (track)
        for (const Tensor& t : inputs)
            if (t.requires_grad()) { needs = true; break; }
    if (needs) {
        impl->requires_grad = true;
        for (const Tensor& t : inputs)
            if (t.requires_grad()) impl->parents.push_back(t.impl());
        impl->backprop = std::move(backprop);
    }
    return Tensor(std::move(impl));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_node(a.shape(), std::move(out), {a, b}, [ai, bi](const detail::TensorImpl& self) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_node(a.shape(), std::move(out), {a, b}, [ai, bi](const detail::TensorImpl& self) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_node(a.shape(), std::move(out), {a, b}, [ai, bi](const detail::TensorImpl& self) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * bi->data[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i] * ai->data[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto ai = a.impl();
    return detail::make_node(a.shape(), std::move(out), {a}, [ai, c](const detail::TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * c;
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    auto ai = a.impl();
    return detail::make_node(a.shape(), std::move(out), {a}, [ai](const detail::TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (ai->data[i] > 0.0) ai->grad[i] += self.grad[i];
    });
}

// log(max(x, floor)); the clamp zeroes the gradient where it engages.
inline Tensor log_clamped(const Tensor& a, double floor) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(a.data()[i], floor));
    auto ai = a.impl();
    return detail::make_node(a.shape(), std::move(out), {a}, [ai, floor](const detail::TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (ai->data[i] > floor) ai->grad[i] += self.grad[i] / ai->data[i];
    });
}

// ---- reductions ----

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto ai = a.impl();
    return detail::make_node({1}, {s}, {a}, [ai](const detail::TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += self.grad[0];
    });
}

inline Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto ai = a.impl();
    return detail::make_node({1}, {s * inv}, {a}, [ai, inv](const detail::TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += self.grad[0] * inv;
    });
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

// ---- shape helpers for batched matmul ----

namespace detail {

struct MatDims {
    std::size_t batch, p, q, r;
    bool b_broadcast;  // b is 2-D, shared across the batch
};

inline MatDims matmul_dims(const Shape& a, const Shape& b) {
    if (a.size() < 2 || b.size() < 2)
        throw std::invalid_argument("matmul: operands must have rank >= 2, got " + shape_str(a) +
                                    " and " + shape_str(b));
    MatDims d{};
    d.p = a[a.size() - 2];
    d.q = a[a.size() - 1];
    d.r = b[b.size() - 1];
    if (b[b.size() - 2] != d.q)
        throw std::invalid_argument("matmul: inner extents disagree for " + shape_str(a) + " x " +
                                    shape_str(b));
    Shape abatch(a.begin(), a.end() - 2);
    Shape bbatch(b.begin(), b.end() - 2);
    if (bbatch.empty()) {
        d.b_broadcast = true;
    } else if (abatch == bbatch) {
        d.b_broadcast = false;
    } else {
        throw std::invalid_argument("matmul: batch extents disagree for " + shape_str(a) + " x " +
                                    shape_str(b));
    }
    d.batch = shape_numel(abatch);
    return d;
}

}  // namespace detail

// Batched matrix product; a 2-D right operand is broadcast over the batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto d = detail::matmul_dims(a.shape(), b.shape());
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(d.r);
    std::vector<double> out(d.batch * d.p * d.r, 0.0);
    const auto& A = a.data();
    const auto& B = b.data();
    for (std::size_t n = 0; n < d.batch; ++n) {
        const double* ap = A.data() + n * d.p * d.q;
        const double* bp = B.data() + (d.b_broadcast ? 0 : n * d.q * d.r);
        double* op = out.data() + n * d.p * d.r;
        for (std::size_t i = 0; i < d.p; ++i)
            for (std::size_t k = 0; k < d.q; ++k) {
                const double av = ap[i * d.q + k];
                if (av == 0.0) continue;
                const double* brow = bp + k * d.r;
                double* orow = op + i * d.r;
                for (std::size_t j = 0; j < d.r; ++j) orow[j] += av * brow[j];
            }
    }
    auto ai = a.impl(), bi = b.impl();
    return detail::make_node(std::move(out_shape), std::move(out), {a, b},
                             [ai, bi, d](const detail::TensorImpl& self) {
        // dA = G . B^T, dB = A^T . G (summed over the batch when broadcast)
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (std::size_t n = 0; n < d.batch; ++n) {
                const double* gp = self.grad.data() + n * d.p * d.r;
                const double* bp = bi->data.data() + (d.b_broadcast ? 0 : n * d.q * d.r);
                double* agp = ai->grad.data() + n * d.p * d.q;
                for (std::size_t i = 0; i < d.p; ++i)
                    for (std::size_t k = 0; k < d.q; ++k) {
                        double s = 0.0;
                        const double* grow = gp + i * d.r;
                        const double* brow = bp + k * d.r;
                        for (std::size_t j = 0; j < d.r; ++j) s += grow[j] * brow[j];
                        agp[i * d.q + k] += s;
                    }
            }
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (std::size_t n = 0; n < d.batch; ++n) {
                const double* gp = self.grad.data() + n * d.p * d.r;
                const double* ap = ai->data.data() + n * d.p * d.q;
                double* bgp = bi->grad.data() + (d.b_broadcast ? 0 : n * d.q * d.r);
                for (std::size_t i = 0; i < d.p; ++i) {
                    const double* arow = ap + i * d.q;
                    const double* grow = gp + i * d.r;
                    for (std::size_t k = 0; k < d.q; ++k) {
                        const double av = arow[k];
                        if (av == 0.0) continue;
                        double* brow = bgp + k * d.r;
                        for (std::size_t j = 0; j < d.r; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        }
    });
}

inline Tensor transpose_last2(const Tensor& a) {
    if (a.dim() < 2) throw std::invalid_argument("transpose_last2: rank must be >= 2");
    const Shape& s = a.shape();
    const std::size_t p = s[s.size() - 2], q = s[s.size() - 1];
    const std::size_t batch = a.numel() / (p * q);
    Shape out_shape = s;
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    std::vector<double> out(a.numel());
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j)
                out[n * p * q + j * p + i] = a.data()[n * p * q + i * q + j];
    auto ai = a.impl();
    return detail::make_node(std::move(out_shape), std::move(out), {a},
                             [ai, p, q, batch](const detail::TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q; ++j)
                    ai->grad[n * p * q + i * q + j] += self.grad[n * p * q + j * p + i];
    });
}

// ---- row-wise ops over the trailing dimension ----

inline Tensor softmax_rows(const Tensor& a) {
    if (a.dim() < 1) throw std::invalid_argument("softmax_rows: rank must be >= 1");
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.numel() / n;
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.data().data() + r * n;
        double* y = out.data() + r * n;
        double m = x[0];
        for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = std::exp(x[i] - m);
            z += y[i];
        }
        for (std::size_t i = 0; i < n; ++i) y[i] /= z;
    }
    auto ai = a.impl();
    std::vector<double> saved = out;
    // dL/dx_i = p_i * (g_i - sum_j g_j p_j), using the saved output p.
    return detail::make_node(a.shape(), std::move(out), {a},
                             [ai, n, rows, p = std::move(saved)](const detail::TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* pr = p.data() + r * n;
            const double* gr = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += gr[i] * pr[i];
            for (std::size_t i = 0; i < n; ++i) ai->grad[r * n + i] += pr[i] * (gr[i] - dot);
        }
    });
}

inline constexpr double kLayerNormEps = 1e-5;

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const std::size_t d = x.shape().back();
    if (d < 2) throw std::invalid_argument("layer_norm: trailing extent must be >= 2");
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw std::invalid_argument("layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[r] = is;
        for (std::size_t i = 0; i < d; ++i) {
            xhat[r * d + i] = (xr[i] - mean) * is;
            out[r * d + i] = xhat[r * d + i] * gain.data()[i] + bias.data()[i];
        }
    }
    auto xi = x.impl(), gi = gain.impl(), bi = bias.impl();
    return detail::make_node(x.shape(), std::move(out), {x, gain, bias},
                             [xi, gi, bi, d, rows, xh = std::move(xhat),
                              is = std::move(inv_std)](const detail::TensorImpl& self) {
        if (gi->requires_grad) gi->ensure_grad();
        if (bi->requires_grad) bi->ensure_grad();
        if (xi->requires_grad) xi->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = self.grad.data() + r * d;
            const double* xr = xh.data() + r * d;
            if (gi->requires_grad)
                for (std::size_t i = 0; i < d; ++i) gi->grad[i] += gr[i] * xr[i];
            if (bi->requires_grad)
                for (std::size_t i = 0; i < d; ++i) bi->grad[i] += gr[i];
            if (xi->requires_grad) {
                // dxhat_i = g_i * gain_i; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    const double dxh = gr[i] * gi->data[i];
                    s1 += dxh;
                    s2 += dxh * xr[i];
                }
                s1 /= static_cast<double>(d);
                s2 /= static_cast<double>(d);
                for (std::size_t i = 0; i < d; ++i) {
                    const double dxh = gr[i] * gi->data[i];
                    xi->grad[r * d + i] += (dxh - s1 - xr[i] * s2) * is[r];
                }
            }
        }
    });
}

// x[.., d] + b[d]
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    const std::size_t d = x.shape().back();
    if (b.shape() != Shape{d})
        throw std::invalid_argument("add_bias: bias shape " + shape_str(b.shape()) +
                                    " does not match trailing extent " + std::to_string(d));
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < d; ++i) out[r * d + i] = x.data()[r * d + i] + b.data()[i];
    auto xi = x.impl(), bi = b.impl();
    return detail::make_node(x.shape(), std::move(out), {x, b},
                             [xi, bi, d, rows](const detail::TensorImpl& self) {
        if (xi->requires_grad) {
            xi->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t i = 0; i < d; ++i) bi->grad[i] += self.grad[r * d + i];
        }
    });
}

// ---- gather / slice ----

// table[vocab, d] indexed by ids -> [batch, seq, d]; grads scatter-add into the table.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                               std::size_t batch, std::size_t seq) {
    if (table.dim() != 2) throw std::invalid_argument("embedding_lookup: table must be 2-D");
    if (ids.size() != batch * seq) throw std::invalid_argument("embedding_lookup: id count mismatch");
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    std::vector<double> out(batch * seq * d);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        const int id = ids[t];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab)
            throw std::invalid_argument("embedding_lookup: token id " + std::to_string(id) +
                                        " out of range at position " + std::to_string(t));
        std::copy_n(table.data().data() + static_cast<std::size_t>(id) * d, d, out.data() + t * d);
    }
    auto ti = table.impl();
    return detail::make_node({batch, seq, d}, std::move(out), {table},
                             [ti, ids, d](const detail::TensorImpl& self) {
        ti->ensure_grad();
        for (std::size_t t = 0; t < ids.size(); ++t) {
            double* row = ti->grad.data() + static_cast<std::size_t>(ids[t]) * d;
            const double* g = self.grad.data() + t * d;
            for (std::size_t i = 0; i < d; ++i) row[i] += g[i];
        }
    });
}

// x[b, s, d] + pos[max_len, d] rows 0..s-1, broadcast over the batch.
inline Tensor add_position(const Tensor& x, const Tensor& pos) {
    if (x.dim() != 3 || pos.dim() != 2 || x.shape()[2] != pos.shape()[1])
        throw std::invalid_argument("add_position: incompatible shapes " + shape_str(x.shape()) +
                                    " and " + shape_str(pos.shape()));
    const std::size_t b = x.shape()[0], s = x.shape()[1], d = x.shape()[2];
    if (s > pos.shape()[0])
        throw std::invalid_argument("add_position: sequence longer than position table");
    std::vector<double> out(x.numel());
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t t = 0; t < s; ++t)
            for (std::size_t i = 0; i < d; ++i)
                out[(n * s + t) * d + i] = x.data()[(n * s + t) * d + i] + pos.data()[t * d + i];
    auto xi = x.impl(), pi = pos.impl();
    return detail::make_node(x.shape(), std::move(out), {x, pos},
                             [xi, pi, b, s, d](const detail::TensorImpl& self) {
        if (xi->requires_grad) {
            xi->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
        }
        if (pi->requires_grad) {
            pi->ensure_grad();
            for (std::size_t n = 0; n < b; ++n)
                for (std::size_t t = 0; t < s; ++t)
                    for (std::size_t i = 0; i < d; ++i)
                        pi->grad[t * d + i] += self.grad[(n * s + t) * d + i];
        }
    });
}

// x[b, s, d] -> x[:, 0, :] as [b, d]
inline Tensor select_first(const Tensor& x) {
    if (x.dim() != 3) throw std::invalid_argument("select_first: expected rank-3 input");
    const std::size_t b = x.shape()[0], s = x.shape()[1], d = x.shape()[2];
    std::vector<double> out(b * d);
    for (std::size_t n = 0; n < b; ++n)
        std::copy_n(x.data().data() + n * s * d, d, out.data() + n * d);
    auto xi = x.impl();
    return detail::make_node({b, d}, std::move(out), {x}, [xi, s, d, b](const detail::TensorImpl& self) {
        xi->ensure_grad();
        for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < d; ++i) xi->grad[n * s * d + i] += self.grad[n * d + i];
    });
}

// x[rows, cols] -> row r as [cols]
inline Tensor select_row(const Tensor& x, std::size_t r) {
    if (x.dim() != 2) throw std::invalid_argument("select_row: expected rank-2 input");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (r >= rows) throw std::invalid_argument("select_row: row " + std::to_string(r) + " out of range");
    std::vector<double> out(x.data().begin() + r * cols, x.data().begin() + (r + 1) * cols);
    auto xi = x.impl();
    return detail::make_node({cols}, std::move(out), {x}, [xi, r, cols](const detail::TensorImpl& self) {
        xi->ensure_grad();
        for (std::size_t i = 0; i < cols; ++i) xi->grad[r * cols + i] += self.grad[i];
    });
}

// Concatenate along the trailing dimension; all parts share leading shape.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_last: no parts");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        Shape l(p.shape().begin(), p.shape().end() - 1);
        if (l != lead) throw std::invalid_argument("concat_last: leading shapes disagree");
        total += p.shape().back();
    }
    const std::size_t rows = shape_numel(lead);
    Shape out_shape = lead;
    out_shape.push_back(total);
    std::vector<double> out(rows * total);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.shape().back();
        offsets.push_back(off);
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(p.data().data() + r * w, w, out.data() + r * total + off);
        off += w;
    }
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl());
    return detail::make_node(std::move(out_shape), std::move(out), parts,
                             [impls, offsets, rows, total](const detail::TensorImpl& self) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
            auto& pi = impls[k];
            if (!pi->requires_grad) continue;
            pi->ensure_grad();
            const std::size_t w = pi->shape.back();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t i = 0; i < w; ++i)
                    pi->grad[r * w + i] += self.grad[r * total + offsets[k] + i];
        }
    });
}

// sum_j v[j] * xs[j]; gradients flow to v and to each xs[j].
inline Tensor weighted_sum(const Tensor& v, const std::vector<Tensor>& xs) {
    if (v.dim() != 1 || v.numel() != xs.size())
        throw std::invalid_argument("weighted_sum: weight vector length " + std::to_string(v.numel()) +
                                    " does not match " + std::to_string(xs.size()) + " terms");
    for (const Tensor& x : xs) detail::check_same_shape(xs[0], x, "weighted_sum");
    std::vector<double> out(xs[0].numel(), 0.0);
    for (std::size_t j = 0; j < xs.size(); ++j) {
        const double w = v.data()[j];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * xs[j].data()[i];
    }
    std::vector<Tensor> inputs = xs;
    inputs.push_back(v);
    auto vi = v.impl();
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (const Tensor& x : xs) impls.push_back(x.impl());
    return detail::make_node(xs[0].shape(), std::move(out), std::move(inputs),
                             [vi, impls](const detail::TensorImpl& self) {
        for (std::size_t j = 0; j < impls.size(); ++j) {
            if (impls[j]->requires_grad) {
                impls[j]->ensure_grad();
                const double w = vi->data[j];
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    impls[j]->grad[i] += w * self.grad[i];
            }
            if (vi->requires_grad) {
                vi->ensure_grad();
                double s = 0.0;
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    s += self.grad[i] * impls[j]->data[i];
                vi->grad[j] += s;
            }
        }
    });
}

// Mean over the batch of -log softmax(logits)[label]; analytic backward.
inline Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.dim() != 2 || logits.shape()[0] != labels.size())
        throw std::invalid_argument("cross_entropy_with_logits: logits " + shape_str(logits.shape()) +
                                    " vs " + std::to_string(labels.size()) + " labels");
    const std::size_t b = logits.shape()[0], c = logits.shape()[1];
    std::vector<double> probs(b * c);
    double loss = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
        const double* x = logits.data().data() + n * c;
        double m = x[0];
        for (std::size_t i = 1; i < c; ++i) m = std::max(m, x[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            probs[n * c + i] = std::exp(x[i] - m);
            z += probs[n * c + i];
        }
        for (std::size_t i = 0; i < c; ++i) probs[n * c + i] /= z;
        const int y = labels[n];
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw std::invalid_argument("cross_entropy_with_logits: label out of range");
        loss -= std::log(probs[n * c + static_cast<std::size_t>(y)]);
    }
    loss /= static_cast<double>(b);
    auto li = logits.impl();
    return detail::make_node({1}, {loss}, {logits},
                             [li, labels, b, c, p = std::move(probs)](const detail::TensorImpl& self) {
        li->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(b);
        for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < c; ++i) {
                double d = p[n * c + i];
                if (static_cast<std::size_t>(labels[n]) == i) d -= 1.0;
                li->grad[n * c + i] += g * d;
            }
    });
}

// ---- reverse pass ----

// Backpropagates from a scalar root. Grads of every reachable tensor are
// overwritten (zeroed then accumulated), never carried across calls.
inline void backward(const Tensor& root) {
    if (root.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<std::shared_ptr<detail::TensorImpl>> stack{root.impl()};
    while (!stack.empty()) {
        auto node = stack.back();
        stack.pop_back();
        if (!seen.insert(node.get()).second) continue;
        order.push_back(node.get());
        for (auto& p : node->parents) stack.push_back(p);
    }
    // Reverse execution order == descending node ids.
    std::sort(order.begin(), order.end(),
              [](const detail::TensorImpl* a, const detail::TensorImpl* b) { return a->node_id > b->node_id; });
    for (auto* n : order) {
        n->ensure_grad();
        n->zero_grad();
    }
    root.impl()->grad[0] = 1.0;
    for (auto* n : order)
        if (n->backprop) n->backprop(*n);
}

}  // namespace kdlab
