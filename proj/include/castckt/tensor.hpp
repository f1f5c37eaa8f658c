#pragma once

// Dense float64 tensors with reverse-mode differentiation.
//
// Every op allocates a fresh node that remembers its parents and a backward
// rule; backward() orders the reachable nodes topologically and runs the rules
// in reverse. Leaves (tensors created directly, e.g. parameters) accumulate
// gradients across calls until zero_grad().

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "castckt/errors.hpp"

namespace castckt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Propagates this node's grad into its parents.
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buf() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

class Tensor {
   public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (castckt::numel(shape) != values.size()) {
            throw ShapeMismatch("tensor of shape " + shape_str(shape) + " given " + std::to_string(values.size()) +
                                " values");
        }
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }
    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        const std::size_t count = castckt::numel(shape);
        return from(std::move(shape), std::vector<double>(count, v), requires_grad);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }
    static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    /// Size of dimension `axis`; negative axes count from the end.
    std::size_t dim(int axis) const { return node_->shape.at(norm_axis(axis)); }

    std::span<const double> data() const { return node_->value; }
    /// In-place access for optimizers; never use on a tensor that is part of a live graph.
    std::span<double> mutable_data() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad_buf(); }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    void zero_grad() { node_->grad.clear(); }

    double item() const {
        if (numel() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    double at(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != rank()) throw ShapeMismatch("index rank mismatch for shape " + shape_str(shape()));
        std::size_t flat = 0, d = 0;
        for (std::size_t i : idx) flat = flat * node_->shape[d++] + i;
        return node_->value.at(flat);
    }

    /// Same values, no history.
    Tensor detach() const { return from(shape(), node_->value, false); }
    /// Independent copy of values; keeps the requires_grad flag but not the history.
    Tensor clone() const { return from(shape(), node_->value, requires_grad()); }

    std::size_t norm_axis(int axis) const {
        const int r = static_cast<int>(rank());
        const int a = axis < 0 ? axis + r : axis;
        if (a < 0 || a >= r) throw ShapeMismatch("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
        return static_cast<std::size_t>(a);
    }

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

   private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    for (const auto& p : parents) {
        if (p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i + a.size() >= r ? a[i + a.size() - r] : 1;
        const std::size_t db = i + b.size() >= r ? b[i + b.size() - r] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeMismatch(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

/// For every flat index of `out`, the flat index of `in` it reads from.
/// Empty when the shapes are equal (identity).
inline std::vector<std::size_t> broadcast_plan(const Shape& in, const Shape& out) {
    if (in == out) return {};
    const std::size_t r = out.size();
    std::vector<std::size_t> stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = r; i-- > 0;) {
        const std::size_t k = i + in.size();
        if (k >= r) {
            const std::size_t d = in[k - r];
            stride[i] = d == 1 ? 0 : s;
            s *= d;
        }
    }
    const std::size_t total = numel(out);
    std::vector<std::size_t> plan(total);
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
        plan[flat] = off;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            off += stride[d];
            if (idx[d] < out[d]) break;
            off -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    return plan;
}

inline std::size_t at_plan(const std::vector<std::size_t>& plan, std::size_t i) { return plan.empty() ? i : plan[i]; }

/// Elementwise binary op with broadcasting. `da`/`db` give the local partials
/// from (x, y, out).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
    auto pa = broadcast_plan(a.shape(), out_shape);
    auto pb = broadcast_plan(b.shape(), out_shape);
    const std::size_t n = numel(out_shape);
    std::vector<double> out(n);
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[at_plan(pa, i)], bv[at_plan(pb, i)]);
    return make_result(std::move(out_shape), std::move(out), {a, b},
                       [pa = std::move(pa), pb = std::move(pb), da, db](Node& self) {
                           Node& na = *self.parents[0];
                           Node& nb = *self.parents[1];
                           const auto& g = self.grad;
                           if (na.requires_grad) {
                               auto& ga = na.grad_buf();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   const std::size_t ia = at_plan(pa, i), ib = at_plan(pb, i);
                                   ga[ia] += g[i] * da(na.value[ia], nb.value[ib], self.value[i]);
                               }
                           }
                           if (nb.requires_grad) {
                               auto& gb = nb.grad_buf();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   const std::size_t ia = at_plan(pa, i), ib = at_plan(pb, i);
                                   gb[ib] += g[i] * db(na.value[ia], nb.value[ib], self.value[i]);
                               }
                           }
                       });
}

/// Elementwise unary op; `df` gives the local derivative from (x, out).
template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
    auto av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    return make_result(a.shape(), std::move(out), {a}, [df](Node& self) {
        Node& na = *self.parents[0];
        auto& ga = na.grad_buf();
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * df(na.value[i], self.value[i]);
    });
}

/// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

}  // namespace detail

// -- elementwise arithmetic --------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double o) { return -o / y; });
}
/// Elementwise maximum; ties send the gradient to `a`.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
        [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor operator+(const Tensor& a, double c) {
    return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Tensor operator+(double c, const Tensor& a) { return a + c; }
inline Tensor operator-(const Tensor& a, double c) { return a + (-c); }
inline Tensor operator*(const Tensor& a, double c) {
    return detail::unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}
inline Tensor operator*(double c, const Tensor& a) { return a * c; }
inline Tensor operator/(const Tensor& a, double c) { return a * (1.0 / c); }
inline Tensor operator-(const Tensor& a) { return a * -1.0; }
inline Tensor operator-(double c, const Tensor& a) { return (-a) + c; }

// -- elementwise functions ---------------------------------------------------

inline Tensor relu(const Tensor& a) {
    return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Tensor tanh(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
inline Tensor sigmoid(const Tensor& a) {
    return detail::unary(
        a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}
inline Tensor exp(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor pow(const Tensor& a, double p) {
    return detail::unary(
        a, [p](double x) { return std::pow(x, p); }, [p](double x, double) { return p * std::pow(x, p - 1.0); });
}
inline Tensor square(const Tensor& a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Tensor sqrt(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}
inline Tensor abs(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::abs(x); },
                         [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}
/// Gradient is zero where the input was clamped.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return detail::unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// -- shape ops ---------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw ShapeMismatch("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    return detail::make_result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), {a},
                               [](detail::Node& self) {
                                   auto& g = self.parents[0]->grad_buf();
                                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                               });
}

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    if (detail::broadcast_shape(a.shape(), shape, "broadcast_to") != shape) {
        throw ShapeMismatch("broadcast_to: " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    auto plan = detail::broadcast_plan(a.shape(), shape);
    std::vector<double> out(numel(shape));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[detail::at_plan(plan, i)];
    return detail::make_result(shape, std::move(out), {a}, [plan = std::move(plan)](detail::Node& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[detail::at_plan(plan, i)] += self.grad[i];
    });
}

inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
    const Shape& in = a.shape();
    const std::size_t r = in.size();
    if (perm.size() != r) throw ShapeMismatch("permute: rank mismatch for " + shape_str(in));
    std::vector<bool> seen(r, false);
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (perm[i] >= r || seen[perm[i]]) throw ShapeMismatch("permute: invalid permutation for " + shape_str(in));
        seen[perm[i]] = true;
        out_shape[i] = in[perm[i]];
    }
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
    const std::size_t n = a.numel();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        src[flat] = off;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            off += in_stride[perm[d]];
            if (idx[d] < out_shape[d]) break;
            off -= in_stride[perm[d]] * idx[d];
            idx[d] = 0;
        }
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[src[i]];
    return detail::make_result(std::move(out_shape), std::move(out), {a}, [src = std::move(src)](detail::Node& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[src[i]] += self.grad[i];
    });
}

/// Swaps the last two dimensions.
inline Tensor transpose(const Tensor& a) {
    if (a.rank() < 2) throw ShapeMismatch("transpose needs rank >= 2, got " + shape_str(a.shape()));
    std::vector<std::size_t> perm(a.rank());
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
    return permute(a, perm);
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeMismatch("concat of zero tensors");
    const std::size_t ax = parts[0].norm_axis(axis);
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size()) {
            throw ShapeMismatch("concat: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != ax && s[i] != parts[0].shape()[i]) {
                throw ShapeMismatch("concat: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
            }
        }
        out_shape[ax] += s[ax];
    }
    const auto sp = detail::split_axis(out_shape, ax);
    std::vector<double> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t len = p.shape()[ax];
        for (std::size_t o = 0; o < sp.outer; ++o) {
            std::copy_n(p.data().begin() + o * len * sp.inner, len * sp.inner,
                        out.begin() + (o * sp.len + off) * sp.inner);
        }
        off += len;
    }
    return detail::make_result(out_shape, std::move(out), parts, [sp, offsets, ax](detail::Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            detail::Node& p = *self.parents[k];
            if (!p.requires_grad) continue;
            auto& g = p.grad_buf();
            const std::size_t len = p.shape[ax];
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t i = 0; i < len * sp.inner; ++i) {
                    g[o * len * sp.inner + i] += self.grad[(o * sp.len + offsets[k]) * sp.inner + i];
                }
            }
        }
    });
}

inline Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t len) {
    const std::size_t ax = a.norm_axis(axis);
    if (start + len > a.shape()[ax]) {
        throw ShapeMismatch("slice [" + std::to_string(start) + ", " + std::to_string(start + len) + ") out of range for " +
                            shape_str(a.shape()));
    }
    const auto sp = detail::split_axis(a.shape(), ax);
    Shape out_shape = a.shape();
    out_shape[ax] = len;
    std::vector<double> out(numel(out_shape));
    for (std::size_t o = 0; o < sp.outer; ++o) {
        std::copy_n(a.data().begin() + (o * sp.len + start) * sp.inner, len * sp.inner, out.begin() + o * len * sp.inner);
    }
    return detail::make_result(std::move(out_shape), std::move(out), {a}, [sp, start, len](detail::Node& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < len * sp.inner; ++i) {
                g[(o * sp.len + start) * sp.inner + i] += self.grad[o * len * sp.inner + i];
            }
        }
    });
}

// -- reductions --------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return detail::make_result({}, {s}, {a}, [](detail::Node& self) {
        auto& g = self.parents[0]->grad_buf();
        for (double& v : g) v += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return sum(a) / static_cast<double>(a.numel()); }

inline Tensor sum(const Tensor& a, int axis, bool keepdim = false) {
    const std::size_t ax = a.norm_axis(axis);
    const auto sp = detail::split_axis(a.shape(), ax);
    Shape out_shape = a.shape();
    if (keepdim) {
        out_shape[ax] = 1;
    } else {
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    }
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t l = 0; l < sp.len; ++l) {
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += a.data()[(o * sp.len + l) * sp.inner + i];
        }
    }
    return detail::make_result(std::move(out_shape), std::move(out), {a}, [sp](detail::Node& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t l = 0; l < sp.len; ++l) {
                for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.len + l) * sp.inner + i] += self.grad[o * sp.inner + i];
            }
        }
    });
}

inline Tensor mean(const Tensor& a, int axis, bool keepdim = false) {
    return sum(a, axis, keepdim) / static_cast<double>(a.dim(axis));
}

// -- normalisation -----------------------------------------------------------

inline Tensor softmax(const Tensor& a, int axis = -1) {
    const auto sp = detail::split_axis(a.shape(), a.norm_axis(axis));
    std::vector<double> out(a.numel());
    auto x = a.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, x[base + l * sp.inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) {
                out[base + l * sp.inner] = std::exp(x[base + l * sp.inner] - mx);
                z += out[base + l * sp.inner];
            }
            for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= z;
        }
    }
    return detail::make_result(a.shape(), std::move(out), {a}, [sp](detail::Node& self) {
        auto& g = self.parents[0]->grad_buf();
        const auto& y = self.value;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                double dot = 0.0;
                for (std::size_t l = 0; l < sp.len; ++l) dot += self.grad[base + l * sp.inner] * y[base + l * sp.inner];
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t k = base + l * sp.inner;
                    g[k] += y[k] * (self.grad[k] - dot);
                }
            }
        }
    });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Standardises along `axis` (no affine part). The variance is floored at eps
/// rather than offset by it, so rows with variance >= eps come out with unit
/// variance exactly.
inline Tensor layer_norm(const Tensor& a, int axis = -1, double eps = kLayerNormEps) {
    const auto sp = detail::split_axis(a.shape(), a.norm_axis(axis));
    std::vector<double> out(a.numel());
    std::vector<double> inv_sd(sp.outer * sp.inner);
    std::vector<char> floored(sp.outer * sp.inner, 0);
    auto x = a.data();
    const double len = static_cast<double>(sp.len);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double mu = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) mu += x[base + l * sp.inner];
            mu /= len;
            double var = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) var += (x[base + l * sp.inner] - mu) * (x[base + l * sp.inner] - mu);
            var /= len;
            const std::size_t r = o * sp.inner + i;
            floored[r] = var < eps;
            inv_sd[r] = 1.0 / std::sqrt(std::max(var, eps));
            for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] = (x[base + l * sp.inner] - mu) * inv_sd[r];
        }
    }
    return detail::make_result(a.shape(), std::move(out), {a}, [sp, inv_sd, floored, len](detail::Node& self) {
        auto& g = self.parents[0]->grad_buf();
        const auto& y = self.value;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                const std::size_t r = o * sp.inner + i;
                double mg = 0.0, mgy = 0.0;
                for (std::size_t l = 0; l < sp.len; ++l) {
                    mg += self.grad[base + l * sp.inner];
                    mgy += self.grad[base + l * sp.inner] * y[base + l * sp.inner];
                }
                mg /= len;
                mgy /= len;
                if (floored[r]) mgy = 0.0;
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t k = base + l * sp.inner;
                    g[k] += inv_sd[r] * (self.grad[k] - mg - y[k] * mgy);
                }
            }
        }
    });
}

// -- matmul ------------------------------------------------------------------

/// Batched matrix product over the last two dimensions with broadcasting of
/// the leading (batch) dimensions.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2 || a.shape().back() != b.shape()[b.rank() - 2]) {
        throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t M = a.shape()[a.rank() - 2], K = a.shape().back(), N = b.shape().back();
    using detail::CMap;
    using detail::MMap;

    // Common case: a right operand without batch dims folds into one GEMM.
    if (b.rank() == 2) {
        const std::size_t rows = a.numel() / K;
        Shape out_shape = a.shape();
        out_shape.back() = N;
        std::vector<double> out(rows * N);
        MMap(out.data(), rows, N).noalias() = CMap(a.data().data(), rows, K) * CMap(b.data().data(), K, N);
        return detail::make_result(std::move(out_shape), std::move(out), {a, b}, [rows, K, N](detail::Node& self) {
            detail::Node& na = *self.parents[0];
            detail::Node& nb = *self.parents[1];
            CMap g(self.grad.data(), rows, N);
            if (na.requires_grad) MMap(na.grad_buf().data(), rows, K).noalias() += g * CMap(nb.value.data(), K, N).transpose();
            if (nb.requires_grad) MMap(nb.grad_buf().data(), K, N).noalias() += CMap(na.value.data(), rows, K).transpose() * g;
        });
    }

    const Shape ba(a.shape().begin(), a.shape().end() - 2);
    const Shape bb(b.shape().begin(), b.shape().end() - 2);
    Shape batch = detail::broadcast_shape(ba, bb, "matmul");
    auto pa = detail::broadcast_plan(ba, batch);
    auto pb = detail::broadcast_plan(bb, batch);
    const std::size_t nb_ = numel(batch);
    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(N);
    std::vector<double> out(nb_ * M * N);
    for (std::size_t i = 0; i < nb_; ++i) {
        MMap(out.data() + i * M * N, M, N).noalias() =
            CMap(a.data().data() + detail::at_plan(pa, i) * M * K, M, K) *
            CMap(b.data().data() + detail::at_plan(pb, i) * K * N, K, N);
    }
    return detail::make_result(std::move(out_shape), std::move(out), {a, b},
                               [pa = std::move(pa), pb = std::move(pb), nb_, M, K, N](detail::Node& self) {
                                   detail::Node& na = *self.parents[0];
                                   detail::Node& nbn = *self.parents[1];
                                   for (std::size_t i = 0; i < nb_; ++i) {
                                       const std::size_t ia = detail::at_plan(pa, i), ib = detail::at_plan(pb, i);
                                       CMap g(self.grad.data() + i * M * N, M, N);
                                       if (na.requires_grad) {
                                           MMap(na.grad_buf().data() + ia * M * K, M, K).noalias() +=
                                               g * CMap(nbn.value.data() + ib * K * N, K, N).transpose();
                                       }
                                       if (nbn.requires_grad) {
                                           MMap(nbn.grad_buf().data() + ib * K * N, K, N).noalias() +=
                                               CMap(na.value.data() + ia * M * K, M, K).transpose() * g;
                                       }
                                   }
                               });
}

// -- masks -------------------------------------------------------------------

/// Constant 0/1 mask keeping the k largest entries along `axis` (ties resolved
/// toward the lower index). Carries no gradient; multiply it into a tensor for
/// a straight-through selection.
inline Tensor top_k_mask(const Tensor& a, std::size_t k, int axis = -1) {
    const auto sp = detail::split_axis(a.shape(), a.norm_axis(axis));
    std::vector<double> mask(a.numel(), 0.0);
    std::vector<std::size_t> order(sp.len);
    auto x = a.data();
    const std::size_t keep = std::min(k, sp.len);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t p, std::size_t q) { return x[base + p * sp.inner] > x[base + q * sp.inner]; });
            for (std::size_t r = 0; r < keep; ++r) mask[base + order[r] * sp.inner] = 1.0;
        }
    }
    return Tensor::from(a.shape(), std::move(mask));
}

/// Inverted dropout with a constant mask; identity when p == 0.
template <class Rng>
Tensor dropout(const Tensor& a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    std::bernoulli_distribution keep(1.0 - p);
    std::vector<double> mask(a.numel());
    for (double& m : mask) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
    return a * Tensor::from(a.shape(), std::move(mask));
}

// -- backward ----------------------------------------------------------------

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw NonScalarLoss("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::Node* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    // Interior grads are recomputed from scratch on every call.
    for (auto* n : order) {
        if (n->backward) n->grad.assign(n->value.size(), 0.0);
    }
    loss.node()->grad_buf()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

// -- parameters --------------------------------------------------------------

/// Named learnable tensors. Iteration order is lexicographic by name.
class ParamRegistry {
   public:
    Tensor& add(const std::string& name, Tensor t) {
        if (params_.count(name)) throw FormatError("duplicate parameter name '" + name + "'");
        t.set_requires_grad(true);
        return params_.emplace(name, std::move(t)).first->second;
    }

    /// Glorot-uniform initialised matrix/tensor; the last two dims define fan-in/out.
    template <class Rng>
    Tensor& add_glorot(const std::string& name, Shape shape, Rng& rng) {
        const std::size_t fan_out = shape.back();
        const std::size_t fan_in = shape.size() >= 2 ? shape[shape.size() - 2] : 1;
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> u(-limit, limit);
        std::vector<double> v(numel(shape));
        for (double& x : v) x = u(rng);
        return add(name, Tensor::from(std::move(shape), std::move(v)));
    }

    Tensor& add_constant(const std::string& name, Shape shape, double value) {
        return add(name, Tensor::full(std::move(shape), value));
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }
    const Tensor& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw FormatError("unknown parameter '" + name + "'");
        return it->second;
    }
    Tensor& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw FormatError("unknown parameter '" + name + "'");
        return it->second;
    }
    std::size_t size() const { return params_.size(); }
    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.numel();
        return n;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    /// Deep copy of all values (no gradients).
    ParamRegistry clone() const {
        ParamRegistry r;
        for (const auto& [name, t] : params_) r.add(name, t.detach());
        return r;
    }

    void zero_grad() {
        for (auto& [_, t] : params_) t.zero_grad();
    }

    double grad_norm() const {
        double s = 0.0;
        for (const auto& [_, t] : params_) {
            for (double g : t.grad()) s += g * g;
        }
        return std::sqrt(s);
    }

    /// Overwrites values from a registry with the same names and shapes.
    void assign_values(const ParamRegistry& other) {
        for (auto& [name, t] : params_) {
            const Tensor& o = other.at(name);
            if (o.shape() != t.shape()) {
                throw ShapeMismatch("parameter '" + name + "': " + shape_str(t.shape()) + " vs " + shape_str(o.shape()));
            }
            std::copy(o.data().begin(), o.data().end(), t.mutable_data().begin());
        }
    }

   private:
    std::map<std::string, Tensor> params_;
};

}  // namespace castckt
