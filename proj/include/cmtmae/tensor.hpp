#pragma once

// Reverse-mode autodiff over dense double tensors. Eager: every op computes
// its value immediately and, when any input requires gradients, records a
// backward closure on the result node. backward(loss) walks the recorded
// graph once in reverse topological order.
//
// Values are immutable once a node has been consumed by an op; parameters
// (leaf nodes) expose mutable storage for the optimizer. All math is IEEE
// double with fixed summation order, so identical inputs give bit-identical
// results run to run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cmtmae/errors.hpp"

namespace cmtmae {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Runtime toggle for non-finite checks on every op output. Defaults on in
// debug builds; the trainer's loss check stays on regardless.
inline bool& finite_checks_flag() {
#ifdef NDEBUG
    static bool on = false;
#else
    static bool on = true;
#endif
    return on;
}

inline void set_finite_checks(bool on) { finite_checks_flag() = on; }
inline bool finite_checks_enabled() { return finite_checks_flag(); }

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until backward reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
};

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (static_cast<int64_t>(values.size()) != shape_numel(shape))
            throw DimensionError("from_values: " + std::to_string(values.size()) +
                                 " values for shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> v(static_cast<size_t>(shape_numel(shape)), 0.0);
        return from_values(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::vector<double> v(static_cast<size_t>(shape_numel(shape)), value);
        return from_values(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_values({1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node()->shape; }
    int rank() const { return static_cast<int>(node()->shape.size()); }
    int64_t numel() const { return shape_numel(node()->shape); }

    int rows() const {
        const Shape& s = node()->shape;
        return s.empty() ? 1 : s[0];
    }

    int cols() const {
        const Shape& s = node()->shape;
        if (s.size() != 2) throw ContractError("cols() on tensor of shape " + shape_str(s));
        return s[1];
    }

    const std::vector<double>& values() const { return node()->values; }

    // Leaf-only mutable access; used by init, the optimizer and checkpoint
    // load. Interior nodes are immutable by contract.
    std::vector<double>& values_mut() {
        if (node()->backward_fn) throw ContractError("values_mut on non-leaf tensor");
        return node()->values;
    }

    bool requires_grad() const { return node()->requires_grad; }
    bool has_grad() const { return !node()->grad.empty(); }

    const std::vector<double>& grad() const {
        if (node()->grad.empty()) throw ContractError("grad() before backward reached this tensor");
        return node()->grad;
    }

    double grad_or_zero(size_t i) const {
        return node()->grad.empty() ? 0.0 : node()->grad[i];
    }

    void zero_grad() {
        auto& g = node()->grad;
        std::fill(g.begin(), g.end(), 0.0);
    }

    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node()->values[0];
    }

    // Value copy with no graph history and no gradient requirement.
    Tensor detach() const {
        return from_values(node()->shape, node()->values, false);
    }

    Tensor copy(bool requires_grad) const {
        return from_values(node()->shape, node()->values, requires_grad);
    }

    // Node identity, for optimizer registry audits.
    const void* id() const { return node_.get(); }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

    detail::Node* node() const {
        if (!node_) throw ContractError("use of default-constructed Tensor");
        return node_.get();
    }

    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op(const char*, Shape, std::vector<double>, const std::vector<Tensor>&,
                          std::function<void(detail::Node&)>);
};

// Shared op constructor. Parents and the closure are recorded only when some
// input requires gradients; otherwise the result is a plain leaf, so forward
// passes through frozen models build no graph at all.
inline Tensor make_op(const char* name, Shape shape, std::vector<double> values,
                      const std::vector<Tensor>& inputs,
                      std::function<void(detail::Node&)> backward_fn) {
    if (finite_checks_enabled()) detail::check_finite(values, name);
    bool rg = false;
    for (const Tensor& t : inputs) rg = rg || t.requires_grad();
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(inputs.size());
        for (const Tensor& t : inputs) n->parents.push_back(t.node_ptr());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

namespace detail {

inline std::vector<double>& ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
    return n.grad;
}

// c[m,n] = a[m,k] * b[k,n]
inline void gemm(int m, int k, int n, const double* __restrict a, const double* __restrict b,
                 double* __restrict c) {
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * n;
        std::fill(ci, ci + n, 0.0);
        const double* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// da[m,k] += g[m,n] * b[k,n]^T, i.e. da[i,p] += dot(g[i,:], b[p,:]).
// Four independent accumulators keep the reduction vectorizable without
// licensing reassociation globally.
inline void gemm_acc_nt(int m, int k, int n, const double* __restrict g,
                        const double* __restrict b, double* __restrict da) {
    for (int i = 0; i < m; ++i) {
        const double* gi = g + static_cast<size_t>(i) * n;
        double* dai = da + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* bp = b + static_cast<size_t>(p) * n;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            int j = 0;
            for (; j + 4 <= n; j += 4) {
                s0 += gi[j] * bp[j];
                s1 += gi[j + 1] * bp[j + 1];
                s2 += gi[j + 2] * bp[j + 2];
                s3 += gi[j + 3] * bp[j + 3];
            }
            for (; j < n; ++j) s0 += gi[j] * bp[j];
            dai[p] += (s0 + s1) + (s2 + s3);
        }
    }
}

// db[k,n] += a[m,k]^T * g[m,n], i.e. db[p,j] += sum_i a[i,p] * g[i,j].
inline void gemm_acc_tn(int m, int k, int n, const double* __restrict a,
                        const double* __restrict g, double* __restrict db) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        const double* gi = g + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            double* dbp = db + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) dbp[j] += av * gi[j];
        }
    }
}

}  // namespace detail

// ---- elementwise ----

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return make_op("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& g = detail::ensure_grad(*p);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return make_op("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            auto& g = detail::ensure_grad(*pa);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = detail::ensure_grad(*pb);
            for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return make_op("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            auto& g = detail::ensure_grad(*pa);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->values[i];
        }
        if (pb->requires_grad) {
            auto& g = detail::ensure_grad(*pb);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->values[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    return make_op("scale", a.shape(), std::move(out), {a}, [c](detail::Node& self) {
        auto& p = self.parents[0];
        auto& g = detail::ensure_grad(*p);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

// ---- shape ----

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    return make_op("reshape", std::move(shape), a.values(), {a}, [](detail::Node& self) {
        auto& g = detail::ensure_grad(*self.parents[0]);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: rank-2 required, got " + shape_str(a.shape()));
    const int m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(a.values().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = a.values()[static_cast<size_t>(i) * n + j];
    return make_op("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
        auto& g = detail::ensure_grad(*self.parents[0]);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                g[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
    });
}

// ---- matmul ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(static_cast<size_t>(m) * n);
    detail::gemm(m, k, n, a.values().data(), b.values().data(), out.data());
    return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            auto& g = detail::ensure_grad(*pa);
            detail::gemm_acc_nt(m, k, n, self.grad.data(), pb->values.data(), g.data());
        }
        if (pb->requires_grad) {
            auto& g = detail::ensure_grad(*pb);
            detail::gemm_acc_tn(m, k, n, pa->values.data(), self.grad.data(), g.data());
        }
    });
}

// ---- row-structured ops ----

// softmax over the last axis (each row of a matrix, or a whole vector).
// Stabilized by max subtraction; each slice sums to 1.
inline Tensor softmax(const Tensor& a) {
    const int n = a.rank() == 2 ? a.shape()[1] : static_cast<int>(a.numel());
    const int m = a.rank() == 2 ? a.shape()[0] : 1;
    if (a.rank() > 2) throw DimensionError("softmax: rank-2 max, got " + shape_str(a.shape()));
    std::vector<double> out(a.values().size());
    for (int i = 0; i < m; ++i) {
        const double* x = a.values().data() + static_cast<size_t>(i) * n;
        double* y = out.data() + static_cast<size_t>(i) * n;
        double mx = x[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        for (int j = 0; j < n; ++j) y[j] /= s;
    }
    return make_op("softmax", a.shape(), std::move(out), {a}, [m, n](detail::Node& self) {
        auto& g = detail::ensure_grad(*self.parents[0]);
        for (int i = 0; i < m; ++i) {
            const double* y = self.values.data() + static_cast<size_t>(i) * n;
            const double* dy = self.grad.data() + static_cast<size_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += dy[j] * y[j];
            double* gx = g.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) gx[j] += y[j] * (dy[j] - dot);
        }
    });
}

namespace detail {

// Shared layer-norm forward: per-row mean/population-variance normalization.
inline void ln_forward(const double* x, double* y, int m, int n, double eps, double* inv_std_out) {
    for (int i = 0; i < m; ++i) {
        const double* xi = x + static_cast<size_t>(i) * n;
        double* yi = y + static_cast<size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += xi[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std_out[i] = inv;
        for (int j = 0; j < n; ++j) yi[j] = (xi[j] - mean) * inv;
    }
}

// dx for y = (x - mean)/std given dL/dy in dyhat:
// dx = inv * (dyhat - mean(dyhat) - y * mean(dyhat . y))
inline void ln_backward_row(const double* y, const double* dyhat, double inv, int n, double* dx) {
    double mean_dy = 0.0, mean_dyy = 0.0;
    for (int j = 0; j < n; ++j) {
        mean_dy += dyhat[j];
        mean_dyy += dyhat[j] * y[j];
    }
    mean_dy /= n;
    mean_dyy /= n;
    for (int j = 0; j < n; ++j) dx[j] += inv * (dyhat[j] - mean_dy - y[j] * mean_dyy);
}

}  // namespace detail

// Per-row layer norm without affine parameters.
inline Tensor layer_norm(const Tensor& a, double eps) {
    if (a.rank() != 2) throw DimensionError("layer_norm: rank-2 required, got " + shape_str(a.shape()));
    const int m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(a.values().size());
    auto inv_std = std::make_shared<std::vector<double>>(m);
    detail::ln_forward(a.values().data(), out.data(), m, n, eps, inv_std->data());
    return make_op("layer_norm", a.shape(), std::move(out), {a}, [m, n, inv_std](detail::Node& self) {
        auto& g = detail::ensure_grad(*self.parents[0]);
        for (int i = 0; i < m; ++i) {
            const size_t off = static_cast<size_t>(i) * n;
            detail::ln_backward_row(self.values.data() + off, self.grad.data() + off,
                                    (*inv_std)[i], n, g.data() + off);
        }
    });
}

// Per-row layer norm with learned gain/bias (rank-1, length = row width).
inline Tensor layer_norm_affine(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    if (a.rank() != 2) throw DimensionError("layer_norm_affine: rank-2 required, got " + shape_str(a.shape()));
    const int m = a.shape()[0], n = a.shape()[1];
    if (gain.numel() != n || bias.numel() != n)
        throw DimensionError("layer_norm_affine: gain/bias length " + std::to_string(gain.numel()) +
                             "/" + std::to_string(bias.numel()) + " for row width " + std::to_string(n));
    std::vector<double> normalized(a.values().size());
    auto inv_std = std::make_shared<std::vector<double>>(m);
    detail::ln_forward(a.values().data(), normalized.data(), m, n, eps, inv_std->data());
    auto xhat = std::make_shared<std::vector<double>>(normalized);
    std::vector<double> out(a.values().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            const size_t idx = static_cast<size_t>(i) * n + j;
            out[idx] = normalized[idx] * gain.values()[j] + bias.values()[j];
        }
    return make_op("layer_norm_affine", a.shape(), std::move(out), {a, gain, bias},
                   [m, n, inv_std, xhat](detail::Node& self) {
                       auto& px = self.parents[0];
                       auto& pg = self.parents[1];
                       auto& pb = self.parents[2];
                       if (pg->requires_grad) {
                           auto& gg = detail::ensure_grad(*pg);
                           for (int i = 0; i < m; ++i)
                               for (int j = 0; j < n; ++j)
                                   gg[j] += self.grad[static_cast<size_t>(i) * n + j] *
                                            (*xhat)[static_cast<size_t>(i) * n + j];
                       }
                       if (pb->requires_grad) {
                           auto& gb = detail::ensure_grad(*pb);
                           for (int i = 0; i < m; ++i)
                               for (int j = 0; j < n; ++j) gb[j] += self.grad[static_cast<size_t>(i) * n + j];
                       }
                       if (px->requires_grad) {
                           auto& gx = detail::ensure_grad(*px);
                           std::vector<double> dyhat(n);
                           for (int i = 0; i < m; ++i) {
                               const size_t off = static_cast<size_t>(i) * n;
                               for (int j = 0; j < n; ++j)
                                   dyhat[j] = self.grad[off + j] * pg->values[j];
                               detail::ln_backward_row(xhat->data() + off, dyhat.data(),
                                                       (*inv_std)[i], n, gx.data() + off);
                           }
                       }
                   });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
inline Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = a.values()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
    }
    return make_op("gelu", a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        auto& g = detail::ensure_grad(*p);
        for (size_t i = 0; i < g.size(); ++i) {
            const double x = p->values[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
            const double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
            g[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

// ---- gather / scatter / concat / slice ----

inline void check_row_indices(const char* op, const std::vector<int>& idx, int rows) {
    for (int i : idx) {
        if (i < 0 || i >= rows)
            throw DimensionError(std::string(op) + ": row index " + std::to_string(i) +
                                 " out of range for " + std::to_string(rows) + " rows");
    }
}

inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    if (a.rank() != 2) throw DimensionError("gather_rows: rank-2 required, got " + shape_str(a.shape()));
    const int n = a.shape()[1];
    check_row_indices("gather_rows", idx, a.shape()[0]);
    std::vector<double> out(idx.size() * static_cast<size_t>(n));
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(a.values().data() + static_cast<size_t>(idx[r]) * n, n, out.data() + r * n);
    auto indices = std::make_shared<std::vector<int>>(idx);
    return make_op("gather_rows", {static_cast<int>(idx.size()), n}, std::move(out), {a},
                   [n, indices](detail::Node& self) {
                       auto& g = detail::ensure_grad(*self.parents[0]);
                       for (size_t r = 0; r < indices->size(); ++r) {
                           double* dst = g.data() + static_cast<size_t>((*indices)[r]) * n;
                           const double* src = self.grad.data() + r * n;
                           for (int j = 0; j < n; ++j) dst[j] += src[j];
                       }
                   });
}

// Writes rows[r] over base row idx[r]. Indices must be distinct: overwritten
// base rows get zero gradient, row r of rows gets the gradient at idx[r].
inline Tensor scatter_rows(const Tensor& base, const std::vector<int>& idx, const Tensor& rows) {
    if (base.rank() != 2 || rows.rank() != 2 || base.shape()[1] != rows.shape()[1])
        throw DimensionError("scatter_rows: incompatible shapes " + shape_str(base.shape()) +
                             " vs " + shape_str(rows.shape()));
    if (static_cast<int>(idx.size()) != rows.shape()[0])
        throw DimensionError("scatter_rows: " + std::to_string(idx.size()) + " indices for " +
                             std::to_string(rows.shape()[0]) + " rows");
    check_row_indices("scatter_rows", idx, base.shape()[0]);
    const int n = base.shape()[1];
    std::vector<double> out = base.values();
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(rows.values().data() + r * static_cast<size_t>(n), n,
                    out.data() + static_cast<size_t>(idx[r]) * n);
    auto indices = std::make_shared<std::vector<int>>(idx);
    return make_op("scatter_rows", base.shape(), std::move(out), {base, rows},
                   [n, indices](detail::Node& self) {
                       auto& pbase = self.parents[0];
                       auto& prows = self.parents[1];
                       if (pbase->requires_grad) {
                           auto& g = detail::ensure_grad(*pbase);
                           std::vector<char> overwritten(g.size() / n, 0);
                           for (int i : *indices) overwritten[static_cast<size_t>(i)] = 1;
                           for (size_t r = 0; r < overwritten.size(); ++r) {
                               if (overwritten[r]) continue;
                               for (int j = 0; j < n; ++j)
                                   g[r * n + j] += self.grad[r * n + j];
                           }
                       }
                       if (prows->requires_grad) {
                           auto& g = detail::ensure_grad(*prows);
                           for (size_t r = 0; r < indices->size(); ++r) {
                               const double* src = self.grad.data() + static_cast<size_t>((*indices)[r]) * n;
                               for (int j = 0; j < n; ++j) g[r * n + j] += src[j];
                           }
                       }
                   });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty input");
    const int n = parts[0].shape().size() == 2 ? parts[0].shape()[1] : -1;
    int m = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != 2 || t.shape()[1] != n)
            throw DimensionError("concat_rows: shape " + shape_str(t.shape()) + " vs width " +
                                 std::to_string(n));
        m += t.shape()[0];
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(m) * n);
    for (const Tensor& t : parts) out.insert(out.end(), t.values().begin(), t.values().end());
    std::vector<int> row_counts;
    for (const Tensor& t : parts) row_counts.push_back(t.shape()[0]);
    auto counts = std::make_shared<std::vector<int>>(std::move(row_counts));
    return make_op("concat_rows", {m, n}, std::move(out), parts, [n, counts](detail::Node& self) {
        size_t off = 0;
        for (size_t p = 0; p < self.parents.size(); ++p) {
            const size_t len = static_cast<size_t>((*counts)[p]) * n;
            if (self.parents[p]->requires_grad) {
                auto& g = detail::ensure_grad(*self.parents[p]);
                for (size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
            }
            off += len;
        }
    });
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    if (a.rank() != 2) throw DimensionError("slice_rows: rank-2 required, got " + shape_str(a.shape()));
    if (r0 < 0 || r1 > a.shape()[0] || r0 >= r1)
        throw DimensionError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                             ") for " + std::to_string(a.shape()[0]) + " rows");
    const int n = a.shape()[1];
    std::vector<double> out(a.values().begin() + static_cast<size_t>(r0) * n,
                            a.values().begin() + static_cast<size_t>(r1) * n);
    return make_op("slice_rows", {r1 - r0, n}, std::move(out), {a}, [r0, n](detail::Node& self) {
        auto& g = detail::ensure_grad(*self.parents[0]);
        const size_t off = static_cast<size_t>(r0) * n;
        for (size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
    });
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    if (a.rank() != 2) throw DimensionError("slice_cols: rank-2 required, got " + shape_str(a.shape()));
    if (c0 < 0 || c1 > a.shape()[1] || c0 >= c1)
        throw DimensionError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") for " + std::to_string(a.shape()[1]) + " cols");
    const int m = a.shape()[0], n = a.shape()[1], w = c1 - c0;
    std::vector<double> out(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i)
        std::copy_n(a.values().data() + static_cast<size_t>(i) * n + c0, w,
                    out.data() + static_cast<size_t>(i) * w);
    return make_op("slice_cols", {m, w}, std::move(out), {a}, [m, n, c0, w](detail::Node& self) {
        auto& g = detail::ensure_grad(*self.parents[0]);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                g[static_cast<size_t>(i) * n + c0 + j] += self.grad[static_cast<size_t>(i) * w + j];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    const int m = parts[0].rank() == 2 ? parts[0].shape()[0] : -1;
    int n = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != 2 || t.shape()[0] != m)
            throw DimensionError("concat_cols: shape " + shape_str(t.shape()) + " vs height " +
                                 std::to_string(m));
        n += t.shape()[1];
    }
    std::vector<double> out(static_cast<size_t>(m) * n);
    std::vector<int> widths;
    for (const Tensor& t : parts) widths.push_back(t.shape()[1]);
    int c0 = 0;
    for (size_t p = 0; p < parts.size(); ++p) {
        const int w = widths[p];
        for (int i = 0; i < m; ++i)
            std::copy_n(parts[p].values().data() + static_cast<size_t>(i) * w, w,
                        out.data() + static_cast<size_t>(i) * n + c0);
        c0 += w;
    }
    auto ws = std::make_shared<std::vector<int>>(std::move(widths));
    return make_op("concat_cols", {m, n}, std::move(out), parts, [m, n, ws](detail::Node& self) {
        int c0 = 0;
        for (size_t p = 0; p < self.parents.size(); ++p) {
            const int w = (*ws)[p];
            if (self.parents[p]->requires_grad) {
                auto& g = detail::ensure_grad(*self.parents[p]);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j)
                        g[static_cast<size_t>(i) * w + j] +=
                            self.grad[static_cast<size_t>(i) * n + c0 + j];
            }
            c0 += w;
        }
    });
}

// Repeats a [1,n] row m times.
inline Tensor tile_rows(const Tensor& row, int m) {
    if (row.rank() != 2 || row.shape()[0] != 1)
        throw DimensionError("tile_rows: [1,n] required, got " + shape_str(row.shape()));
    const int n = row.shape()[1];
    std::vector<double> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i) std::copy_n(row.values().data(), n, out.data() + static_cast<size_t>(i) * n);
    return make_op("tile_rows", {m, n}, std::move(out), {row}, [m, n](detail::Node& self) {
        auto& g = detail::ensure_grad(*self.parents[0]);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) g[j] += self.grad[static_cast<size_t>(i) * n + j];
    });
}

// ---- reductions ----

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return make_op("sum", {1}, {s}, {a}, [](detail::Node& self) {
        auto& g = detail::ensure_grad(*self.parents[0]);
        for (double& v : g) v += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// Mean over all elements of the squared difference.
inline Tensor mse(const Tensor& a, const Tensor& b) {
    check_same_shape("mse", a, b);
    return mean(square(sub(a, b)));
}

// ---- backward ----

// Reverse topological order over the recorded graph, built once per backward.
// Each node's closure runs exactly once; gradients accumulate across fanout.
class Tape {
  public:
    explicit Tape(const Tensor& root) : root_(root.node_ptr()) {
        if (!root_) throw ContractError("Tape: undefined root");
        // Iterative DFS post-order.
        std::vector<std::pair<detail::Node*, size_t>> stack;
        stack.emplace_back(root_.get(), 0);
        visiting_.insert_or_touch(root_.get());
        while (!stack.empty()) {
            auto& [node, next_parent] = stack.back();
            if (next_parent < node->parents.size()) {
                detail::Node* p = node->parents[next_parent].get();
                ++next_parent;
                if (p->requires_grad && visiting_.insert_or_touch(p)) stack.emplace_back(p, 0);
            } else {
                order_.push_back(node);
                stack.pop_back();
            }
        }
    }

    // Seeds d(root)/d(root) = 1 and propagates. Root must be scalar.
    void backward() {
        if (root_->values.size() != 1)
            throw ContractError("backward requires a scalar loss, got shape " + shape_str(root_->shape));
        if (!root_->requires_grad)
            throw ContractError("backward on a tensor that requires no gradients");
        detail::ensure_grad(*root_);
        root_->grad[0] = 1.0;
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            detail::Node* n = *it;
            if (!n->backward_fn) continue;
            for (auto& p : n->parents)
                if (p->requires_grad) detail::ensure_grad(*p);
            n->backward_fn(*n);
        }
    }

    size_t size() const { return order_.size(); }

  private:
    // Small open-addressing pointer set; avoids unordered_set overhead on the
    // per-step hot path.
    struct PtrSet {
        std::vector<detail::Node*> slots;
        size_t count = 0;

        PtrSet() : slots(1024, nullptr) {}

        bool insert_or_touch(detail::Node* p) {
            if (count * 2 >= slots.size()) grow();
            size_t mask = slots.size() - 1;
            size_t i = (reinterpret_cast<uintptr_t>(p) >> 4) & mask;
            while (slots[i]) {
                if (slots[i] == p) return false;
                i = (i + 1) & mask;
            }
            slots[i] = p;
            ++count;
            return true;
        }

        void grow() {
            std::vector<detail::Node*> old = std::move(slots);
            slots.assign(old.size() * 2, nullptr);
            count = 0;
            for (detail::Node* p : old)
                if (p) insert_or_touch(p);
        }
    };

    std::shared_ptr<detail::Node> root_;
    std::vector<detail::Node*> order_;
    PtrSet visiting_;
};

inline void backward(const Tensor& loss) {
    Tape tape(loss);
    tape.backward();
}

}  // namespace cmtmae
