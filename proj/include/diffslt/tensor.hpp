#pragma once

// Dense row-major tensors with reverse-mode autodiff on an explicit tape.
// Tensors are reference types: copies share the same storage, gradient
// buffer and tape identity. Ops record onto the thread-local active tape
// when gradient mode is on and any input is tracked.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffslt/rng.hpp"

namespace diffslt {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

template <typename S>
struct TensorCore {
    Shape shape;
    std::shared_ptr<std::vector<S>> data;
    std::shared_ptr<std::vector<S>> grad;  // null until tracked
    bool requires_grad = false;
    std::uint64_t tape_serial = 0;
    int tape_node = -1;
};

template <typename S>
class TapeT {
public:
    struct Node {
        std::vector<int> parents;
        std::function<void()> pull;  // accumulates output grad into parents
    };

    int emit(std::vector<int> parents, std::function<void()> pull) {
        nodes_.push_back(Node{std::move(parents), std::move(pull)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int emit_leaf() { return emit({}, nullptr); }

    void clear() {
        nodes_.clear();
        ++serial_;
    }

    std::uint64_t serial() const { return serial_; }
    std::size_t size() const { return nodes_.size(); }
    const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }

private:
    std::vector<Node> nodes_;
    std::uint64_t serial_ = 1;
};

template <typename S>
inline TapeT<S>*& active_tape() {
    thread_local TapeT<S>* tape = nullptr;
    return tape;
}

inline int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}

template <typename S>
class TapeScope {
public:
    explicit TapeScope(TapeT<S>& tape) : prev_(active_tape<S>()) { active_tape<S>() = &tape; }
    ~TapeScope() { active_tape<S>() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    TapeT<S>* prev_;
};

class NoGradGuard {
public:
    NoGradGuard() { ++no_grad_depth(); }
    ~NoGradGuard() { --no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
class TensorT {
public:
    TensorT() : core_(std::make_shared<TensorCore<S>>()) {
        core_->data = std::make_shared<std::vector<S>>();
    }

    static TensorT zeros(Shape shape) {
        TensorT t;
        t.core_->shape = std::move(shape);
        t.core_->data = std::make_shared<std::vector<S>>(shape_numel(t.core_->shape), S(0));
        return t;
    }

    static TensorT full(Shape shape, S value) {
        TensorT t = zeros(std::move(shape));
        for (auto& x : t.data()) x = value;
        return t;
    }

    static TensorT from(Shape shape, std::vector<S> values) {
        if (shape_numel(shape) != values.size())
            shape_error("Tensor::from", "data length " + std::to_string(values.size()) +
                                            " does not match shape " + shape_str(shape));
        TensorT t;
        t.core_->shape = std::move(shape);
        t.core_->data = std::make_shared<std::vector<S>>(std::move(values));
        return t;
    }

    static TensorT scalar(S value) { return from({1}, {value}); }

    static TensorT randn(Shape shape, Rng& rng, double stddev = 1.0) {
        TensorT t = zeros(std::move(shape));
        for (auto& x : t.data()) x = static_cast<S>(rng.normal() * stddev);
        return t;
    }

    const Shape& shape() const { return core_->shape; }
    int rank() const { return static_cast<int>(core_->shape.size()); }
    int dim(int i) const { return core_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return core_->data->size(); }

    std::vector<S>& data() { return *core_->data; }
    const std::vector<S>& data() const { return *core_->data; }

    bool requires_grad() const { return core_->requires_grad; }
    TensorT& set_requires_grad(bool b) {
        core_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return core_->grad != nullptr; }
    std::vector<S>& grad() {
        if (!core_->grad) throw std::runtime_error("tensor has no gradient buffer");
        return *core_->grad;
    }
    const std::vector<S>& grad() const {
        if (!core_->grad) throw std::runtime_error("tensor has no gradient buffer");
        return *core_->grad;
    }

    void ensure_grad() {
        if (!core_->grad) core_->grad = std::make_shared<std::vector<S>>(numel(), S(0));
    }

    void zero_grad() {
        if (core_->grad)
            for (auto& g : *core_->grad) g = S(0);
    }

    S item() const {
        if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar, shape " + shape_str(shape()));
        return (*core_->data)[0];
    }

    S at(std::initializer_list<int> idx) const {
        std::size_t off = 0;
        std::size_t stride = 1;
        const auto& sh = core_->shape;
        std::vector<int> v(idx);
        for (int i = static_cast<int>(sh.size()) - 1; i >= 0; --i) {
            off += static_cast<std::size_t>(v[static_cast<std::size_t>(i)]) * stride;
            stride *= static_cast<std::size_t>(sh[static_cast<std::size_t>(i)]);
        }
        return (*core_->data)[off];
    }

    // Value copy detached from the tape.
    TensorT detach() const {
        TensorT t;
        t.core_->shape = core_->shape;
        t.core_->data = core_->data;  // shares values
        return t;
    }

    TensorT clone() const {
        TensorT t;
        t.core_->shape = core_->shape;
        t.core_->data = std::make_shared<std::vector<S>>(*core_->data);
        return t;
    }

    std::shared_ptr<TensorCore<S>> core() const { return core_; }

private:
    std::shared_ptr<TensorCore<S>> core_;
};

// ---------------------------------------------------------------------------
// Recording machinery
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
inline bool tracked(const TensorT<S>& t, const TapeT<S>* tape) {
    if (t.requires_grad()) return true;
    auto c = t.core();
    return tape && c->tape_serial == tape->serial() && c->tape_node >= 0;
}

template <typename S>
inline bool recording(std::initializer_list<const TensorT<S>*> inputs) {
    if (no_grad_depth() > 0) return false;
    TapeT<S>* tape = active_tape<S>();
    if (!tape) return false;
    for (const TensorT<S>* t : inputs)
        if (tracked(*t, tape)) return true;
    return false;
}

// Makes sure a tracked input has a node on the current tape and a grad buffer.
// Returns the node id, or -1 for constants.
template <typename S>
inline int enroll(const TensorT<S>& t) {
    TapeT<S>* tape = active_tape<S>();
    auto c = t.core();
    if (!tracked(t, tape)) return -1;
    if (c->tape_serial != tape->serial() || c->tape_node < 0) {
        c->tape_node = tape->emit_leaf();
        c->tape_serial = tape->serial();
    }
    if (!c->grad) c->grad = std::make_shared<std::vector<S>>(c->data->size(), S(0));
    return c->tape_node;
}

template <typename S>
inline void attach(TensorT<S>& out, std::vector<int> parents, std::function<void()> pull) {
    TapeT<S>* tape = active_tape<S>();
    auto c = out.core();
    c->requires_grad = true;
    c->grad = std::make_shared<std::vector<S>>(c->data->size(), S(0));
    c->tape_node = tape->emit(std::move(parents), std::move(pull));
    c->tape_serial = tape->serial();
}

}  // namespace detail

// backward: seeds the scalar loss with gradient 1 and pulls the tape in
// reverse topological order. Parameters not reachable from the loss keep
// whatever is in their grad buffers (zeros after zero_grad).
template <typename S>
inline void backward(TensorT<S>& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    TapeT<S>* tape = active_tape<S>();
    auto c = loss.core();
    if (!tape || c->tape_serial != tape->serial() || c->tape_node < 0)
        throw std::runtime_error("backward: loss is not on the active tape");
    loss.ensure_grad();
    loss.grad()[0] = S(1);

    const int start = c->tape_node;
    std::vector<char> reach(static_cast<std::size_t>(start) + 1, 0);
    reach[static_cast<std::size_t>(start)] = 1;
    for (int i = start; i >= 0; --i) {
        if (!reach[static_cast<std::size_t>(i)]) continue;
        const auto& node = tape->node(i);
        for (int p : node.parents)
            if (p >= 0) reach[static_cast<std::size_t>(p)] = 1;
        if (node.pull) node.pull();
    }
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

template <typename S>
inline TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        shape_error("add", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const std::size_t n = out.numel();
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::recording<S>({&a, &b})) {
        int na = detail::enroll(a), nb = detail::enroll(b);
        auto ca = a.core(), cb = b.core(), co = out.core();
        detail::attach(out, {na, nb}, [ca, cb, co, na, nb, n]() {
            const S* g = co->grad->data();
            if (na >= 0) {
                S* da = ca->grad->data();
                for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
            }
            if (nb >= 0) {
                S* db = cb->grad->data();
                for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
            }
        });
    }
    return out;
}

template <typename S>
inline TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        shape_error("sub", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const std::size_t n = out.numel();
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    if (detail::recording<S>({&a, &b})) {
        int na = detail::enroll(a), nb = detail::enroll(b);
        auto ca = a.core(), cb = b.core(), co = out.core();
        detail::attach(out, {na, nb}, [ca, cb, co, na, nb, n]() {
            const S* g = co->grad->data();
            if (na >= 0) {
                S* da = ca->grad->data();
                for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
            }
            if (nb >= 0) {
                S* db = cb->grad->data();
                for (std::size_t i = 0; i < n; ++i) db[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename S>
inline TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        shape_error("mul", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const std::size_t n = out.numel();
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (detail::recording<S>({&a, &b})) {
        int na = detail::enroll(a), nb = detail::enroll(b);
        auto ca = a.core(), cb = b.core(), co = out.core();
        detail::attach(out, {na, nb}, [ca, cb, co, na, nb, n]() {
            const S* g = co->grad->data();
            if (na >= 0) {
                S* da = ca->grad->data();
                const S* vb = cb->data->data();
                for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * vb[i];
            }
            if (nb >= 0) {
                S* db = cb->grad->data();
                const S* va = ca->data->data();
                for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * va[i];
            }
        });
    }
    return out;
}

template <typename S>
inline TensorT<S> scale(const TensorT<S>& a, double c) {
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const std::size_t n = out.numel();
    const S* pa = a.data().data();
    S* po = out.data().data();
    const S cs = static_cast<S>(c);
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * cs;
    if (detail::recording<S>({&a})) {
        int na = detail::enroll(a);
        auto ca = a.core(), co = out.core();
        detail::attach(out, {na}, [ca, co, cs, n]() {
            const S* g = co->grad->data();
            S* da = ca->grad->data();
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * cs;
        });
    }
    return out;
}

// y = x * m with m a constant mask the size of x (no gradient into m).
template <typename S>
inline TensorT<S> mul_const(const TensorT<S>& a, std::shared_ptr<const std::vector<S>> mask) {
    if (mask->size() != a.numel())
        shape_error("mul_const", "mask length " + std::to_string(mask->size()) + " vs tensor " + shape_str(a.shape()));
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const std::size_t n = out.numel();
    const S* pa = a.data().data();
    const S* pm = mask->data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pm[i];
    if (detail::recording<S>({&a})) {
        int na = detail::enroll(a);
        auto ca = a.core(), co = out.core();
        detail::attach(out, {na}, [ca, co, mask, n]() {
            const S* g = co->grad->data();
            const S* pm2 = mask->data();
            S* da = ca->grad->data();
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * pm2[i];
        });
    }
    return out;
}

// x [..., D] + bias [D] broadcast over leading axes.
template <typename S>
inline TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& bias) {
    if (x.rank() < 1 || bias.rank() != 1 || bias.dim(0) != x.dim(x.rank() - 1))
        shape_error("add_bias", "bias " + shape_str(bias.shape()) + " does not match last axis of " + shape_str(x.shape()));
    const std::size_t d = static_cast<std::size_t>(bias.dim(0));
    const std::size_t rows = x.numel() / d;
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    const S* px = x.data().data();
    const S* pb = bias.data().data();
    S* po = out.data().data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
    if (detail::recording<S>({&x, &bias})) {
        int nx = detail::enroll(x), nb = detail::enroll(bias);
        auto cx = x.core(), cb = bias.core(), co = out.core();
        detail::attach(out, {nx, nb}, [cx, cb, co, nx, nb, rows, d]() {
            const S* g = co->grad->data();
            if (nx >= 0) {
                S* dx = cx->grad->data();
                const std::size_t n = rows * d;
                for (std::size_t i = 0; i < n; ++i) dx[i] += g[i];
            }
            if (nb >= 0) {
                S* db = cb->grad->data();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
            }
        });
    }
    return out;
}

// x [B, L, D] + rows [L, D] broadcast over the batch axis.
template <typename S>
inline TensorT<S> add_bcast_rows(const TensorT<S>& x, const TensorT<S>& rows) {
    if (x.rank() != 3 || rows.rank() != 2 || rows.dim(0) != x.dim(1) || rows.dim(1) != x.dim(2))
        shape_error("add_bcast_rows", shape_str(rows.shape()) + " does not broadcast over " + shape_str(x.shape()));
    const std::size_t b = static_cast<std::size_t>(x.dim(0));
    const std::size_t block = static_cast<std::size_t>(x.dim(1)) * static_cast<std::size_t>(x.dim(2));
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    const S* px = x.data().data();
    const S* pr = rows.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < block; ++j) po[i * block + j] = px[i * block + j] + pr[j];
    if (detail::recording<S>({&x, &rows})) {
        int nx = detail::enroll(x), nr = detail::enroll(rows);
        auto cx = x.core(), cr = rows.core(), co = out.core();
        detail::attach(out, {nx, nr}, [cx, cr, co, nx, nr, b, block]() {
            const S* g = co->grad->data();
            if (nx >= 0) {
                S* dx = cx->grad->data();
                for (std::size_t i = 0; i < b * block; ++i) dx[i] += g[i];
            }
            if (nr >= 0) {
                S* dr = cr->grad->data();
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t j = 0; j < block; ++j) dr[j] += g[i * block + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
inline void mm_kernel(const S* a, const S* b, S* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        S* orow = out + i * n;
        const S* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const S av = arow[kk];
            const S* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// matmul(a, b):
//   - b rank 2 [k, n]: a is [..., k], treated as [M, k] (shared weights)
//   - equal rank >= 3: batched product over matching leading dims
template <typename S>
inline TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() < 2)
        shape_error("matmul", "lhs must have rank >= 2, got " + shape_str(a.shape()));
    const int ra = a.rank(), rb = b.rank();
    const std::size_t k = static_cast<std::size_t>(a.dim(ra - 1));
    std::size_t batches = 1, m = static_cast<std::size_t>(a.dim(ra - 2)), n = 0;
    bool batched_b = false;
    Shape out_shape;
    if (rb == 2) {
        if (static_cast<std::size_t>(b.dim(0)) != k)
            shape_error("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        n = static_cast<std::size_t>(b.dim(1));
        out_shape = a.shape();
        out_shape.back() = static_cast<int>(n);
        batches = 1;
        m = a.numel() / k;
    } else {
        if (ra != rb) shape_error("matmul", "rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        for (int i = 0; i < ra - 2; ++i) {
            if (a.dim(i) != b.dim(i))
                shape_error("matmul", "batch dims differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
            batches *= static_cast<std::size_t>(a.dim(i));
        }
        if (b.dim(rb - 2) != static_cast<int>(k))
            shape_error("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        n = static_cast<std::size_t>(b.dim(rb - 1));
        batched_b = true;
        out_shape = a.shape();
        out_shape[static_cast<std::size_t>(ra) - 1] = static_cast<int>(n);
    }

    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::size_t t = 0; t < batches; ++t)
        detail::mm_kernel(pa + t * m * k, batched_b ? pb + t * k * n : pb, po + t * m * n, m, k, n);

    if (detail::recording<S>({&a, &b})) {
        int na = detail::enroll(a), nb = detail::enroll(b);
        auto ca = a.core(), cb = b.core(), co = out.core();
        detail::attach(out, {na, nb}, [ca, cb, co, na, nb, batches, batched_b, m, k, n]() {
            const S* g = co->grad->data();
            const S* va = ca->data->data();
            const S* vb = cb->data->data();
            for (std::size_t t = 0; t < batches; ++t) {
                const S* gt = g + t * m * n;
                const S* at = va + t * m * k;
                const S* bt = batched_b ? vb + t * k * n : vb;
                if (na >= 0) {
                    S* da = ca->grad->data() + t * m * k;
                    // da += g . b^T
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            S acc = S(0);
                            const S* grow = gt + i * n;
                            const S* brow = bt + kk * n;
                            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            da[i * k + kk] += acc;
                        }
                }
                if (nb >= 0) {
                    S* db = cb->grad->data() + (batched_b ? t * k * n : 0);
                    // db += a^T . g
                    for (std::size_t i = 0; i < m; ++i) {
                        const S* grow = gt + i * n;
                        const S* arow = at + i * k;
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const S av = arow[kk];
                            S* drow = db + kk * n;
                            for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Batched a . b^T: a [*, m, k], b [*, n, k] -> [*, m, n].
template <typename S>
inline TensorT<S> bmm_nt(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != b.rank() || a.rank() < 2)
        shape_error("bmm_nt", "rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int r = a.rank();
    std::size_t batches = 1;
    for (int i = 0; i < r - 2; ++i) {
        if (a.dim(i) != b.dim(i))
            shape_error("bmm_nt", "batch dims differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        batches *= static_cast<std::size_t>(a.dim(i));
    }
    if (a.dim(r - 1) != b.dim(r - 1))
        shape_error("bmm_nt", "inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = static_cast<std::size_t>(a.dim(r - 2));
    const std::size_t n = static_cast<std::size_t>(b.dim(r - 2));
    const std::size_t k = static_cast<std::size_t>(a.dim(r - 1));
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(r) - 2] = static_cast<int>(m);
    out_shape[static_cast<std::size_t>(r) - 1] = static_cast<int>(n);

    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::size_t t = 0; t < batches; ++t) {
        const S* at = pa + t * m * k;
        const S* bt = pb + t * n * k;
        S* ot = po + t * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                S acc = S(0);
                const S* arow = at + i * k;
                const S* brow = bt + j * k;
                for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
                ot[i * n + j] = acc;
            }
    }

    if (detail::recording<S>({&a, &b})) {
        int na = detail::enroll(a), nb = detail::enroll(b);
        auto ca = a.core(), cb = b.core(), co = out.core();
        detail::attach(out, {na, nb}, [ca, cb, co, na, nb, batches, m, n, k]() {
            const S* g = co->grad->data();
            const S* va = ca->data->data();
            const S* vb = cb->data->data();
            for (std::size_t t = 0; t < batches; ++t) {
                const S* gt = g + t * m * n;
                const S* at = va + t * m * k;
                const S* bt = vb + t * n * k;
                if (na >= 0) {
                    S* da = ca->grad->data() + t * m * k;
                    // da += g . b
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const S gv = gt[i * n + j];
                            const S* brow = bt + j * k;
                            S* drow = da + i * k;
                            for (std::size_t kk = 0; kk < k; ++kk) drow[kk] += gv * brow[kk];
                        }
                }
                if (nb >= 0) {
                    S* db = cb->grad->data() + t * n * k;
                    // db += g^T . a
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const S gv = gt[i * n + j];
                            const S* arow = at + i * k;
                            S* drow = db + j * k;
                            for (std::size_t kk = 0; kk < k; ++kk) drow[kk] += gv * arow[kk];
                        }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
inline TensorT<S> reshape(const TensorT<S>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        shape_error("reshape", shape_str(a.shape()) + " cannot reshape to " + shape_str(new_shape));
    TensorT<S> out = TensorT<S>::from(std::move(new_shape), a.data());
    if (detail::recording<S>({&a})) {
        int na = detail::enroll(a);
        auto ca = a.core(), co = out.core();
        const std::size_t n = a.numel();
        detail::attach(out, {na}, [ca, co, n]() {
            const S* g = co->grad->data();
            S* da = ca->grad->data();
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
        });
    }
    return out;
}

// [A, B, C, D] -> [A, C, B, D]; used for head split/merge.
template <typename S>
inline TensorT<S> swap_axes_1_2(const TensorT<S>& x) {
    if (x.rank() != 4) shape_error("swap_axes_1_2", "expected rank 4, got " + shape_str(x.shape()));
    const std::size_t A = static_cast<std::size_t>(x.dim(0));
    const std::size_t B = static_cast<std::size_t>(x.dim(1));
    const std::size_t C = static_cast<std::size_t>(x.dim(2));
    const std::size_t D = static_cast<std::size_t>(x.dim(3));
    TensorT<S> out = TensorT<S>::zeros({static_cast<int>(A), static_cast<int>(C), static_cast<int>(B), static_cast<int>(D)});
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                const S* src = px + ((a * B + b) * C + c) * D;
                S* dst = po + ((a * C + c) * B + b) * D;
                for (std::size_t d = 0; d < D; ++d) dst[d] = src[d];
            }
    if (detail::recording<S>({&x})) {
        int nx = detail::enroll(x);
        auto cx = x.core(), co = out.core();
        detail::attach(out, {nx}, [cx, co, A, B, C, D]() {
            const S* g = co->grad->data();
            S* dx = cx->grad->data();
            for (std::size_t a = 0; a < A; ++a)
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c) {
                        const S* src = g + ((a * C + c) * B + b) * D;
                        S* dst = dx + ((a * B + b) * C + c) * D;
                        for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
                    }
        });
    }
    return out;
}

template <typename S>
inline TensorT<S> concat(const TensorT<S>& a, const TensorT<S>& b, int axis) {
    if (a.rank() != b.rank()) shape_error("concat", "rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (axis < 0 || axis >= a.rank()) shape_error("concat", "axis out of range");
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            shape_error("concat", "shapes differ off-axis: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] += b.dim(axis);
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.dim(i));
    for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<std::size_t>(a.dim(i));
    const std::size_t block_a = static_cast<std::size_t>(a.dim(axis)) * inner;
    const std::size_t block_b = static_cast<std::size_t>(b.dim(axis)) * inner;

    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        S* dst = po + o * (block_a + block_b);
        for (std::size_t i = 0; i < block_a; ++i) dst[i] = pa[o * block_a + i];
        for (std::size_t i = 0; i < block_b; ++i) dst[block_a + i] = pb[o * block_b + i];
    }
    if (detail::recording<S>({&a, &b})) {
        int na = detail::enroll(a), nb = detail::enroll(b);
        auto ca = a.core(), cb = b.core(), co = out.core();
        detail::attach(out, {na, nb}, [ca, cb, co, na, nb, outer, block_a, block_b]() {
            const S* g = co->grad->data();
            for (std::size_t o = 0; o < outer; ++o) {
                const S* src = g + o * (block_a + block_b);
                if (na >= 0) {
                    S* da = ca->grad->data() + o * block_a;
                    for (std::size_t i = 0; i < block_a; ++i) da[i] += src[i];
                }
                if (nb >= 0) {
                    S* db = cb->grad->data() + o * block_b;
                    for (std::size_t i = 0; i < block_b; ++i) db[i] += src[block_a + i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities, normalization, softmax
// ---------------------------------------------------------------------------

// Exact-erf GELU: x * Phi(x).
template <typename S>
inline TensorT<S> gelu(const TensorT<S>& x) {
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    const std::size_t n = out.numel();
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(px[i]);
        po[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * 0.7071067811865475244)));
    }
    if (detail::recording<S>({&x})) {
        int nx = detail::enroll(x);
        auto cx = x.core(), co = out.core();
        detail::attach(out, {nx}, [cx, co, n]() {
            const S* g = co->grad->data();
            const S* px2 = cx->data->data();
            S* dx = cx->grad->data();
            for (std::size_t i = 0; i < n; ++i) {
                const double v = static_cast<double>(px2[i]);
                const double phi = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
                const double pdf = 0.3989422804014327 * std::exp(-0.5 * v * v);
                dx[i] += g[i] * static_cast<S>(phi + v * pdf);
            }
        });
    }
    return out;
}

// Last-axis layer norm with learned gain/bias. Biased variance.
template <typename S>
inline TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, double eps = 1e-5) {
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
    const int r = x.rank();
    if (r < 1) shape_error("layer_norm", "input must have rank >= 1");
    const std::size_t d = static_cast<std::size_t>(x.dim(r - 1));
    if (gain.rank() != 1 || bias.rank() != 1 || static_cast<std::size_t>(gain.dim(0)) != d ||
        static_cast<std::size_t>(bias.dim(0)) != d)
        shape_error("layer_norm", "gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                                      " do not match last axis of " + shape_str(x.shape()));
    const std::size_t rows = x.numel() / d;
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<S>>(x.numel());
    auto inv_std = std::make_shared<std::vector<S>>(rows);
    const S* px = x.data().data();
    const S* pg = gain.data().data();
    const S* pb = bias.data().data();
    S* po = out.data().data();
    for (std::size_t rr = 0; rr < rows; ++rr) {
        const S* row = px + rr * d;
        S mean = S(0);
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<S>(d);
        S var = S(0);
        for (std::size_t j = 0; j < d; ++j) {
            const S c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S istd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(var) + eps));
        (*inv_std)[rr] = istd;
        S* xh = xhat->data() + rr * d;
        S* orow = po + rr * d;
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (row[j] - mean) * istd;
            orow[j] = pg[j] * xh[j] + pb[j];
        }
    }
    if (detail::recording<S>({&x, &gain, &bias})) {
        int nx = detail::enroll(x), ng = detail::enroll(gain), nb = detail::enroll(bias);
        auto cx = x.core(), cg = gain.core(), cb = bias.core(), co = out.core();
        detail::attach(out, {nx, ng, nb}, [cx, cg, cb, co, nx, ng, nb, xhat, inv_std, rows, d]() {
            const S* g = co->grad->data();
            const S* pg2 = cg->data->data();
            for (std::size_t rr = 0; rr < rows; ++rr) {
                const S* grow = g + rr * d;
                const S* xh = xhat->data() + rr * d;
                if (ng >= 0) {
                    S* dg = cg->grad->data();
                    for (std::size_t j = 0; j < d; ++j) dg[j] += grow[j] * xh[j];
                }
                if (nb >= 0) {
                    S* db = cb->grad->data();
                    for (std::size_t j = 0; j < d; ++j) db[j] += grow[j];
                }
                if (nx >= 0) {
                    S* dx = cx->grad->data() + rr * d;
                    S mean_gg = S(0), mean_gx = S(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const S gg = grow[j] * pg2[j];
                        mean_gg += gg;
                        mean_gx += gg * xh[j];
                    }
                    mean_gg /= static_cast<S>(d);
                    mean_gx /= static_cast<S>(d);
                    const S istd = (*inv_std)[rr];
                    for (std::size_t j = 0; j < d; ++j) {
                        const S gg = grow[j] * pg2[j];
                        dx[j] += istd * (gg - mean_gg - xh[j] * mean_gx);
                    }
                }
            }
        });
    }
    return out;
}

// Masked softmax over the last axis. scores [..., Lq, Lk].
// key_valid, when given, holds one byte per (batch, key) with batch index
// = flat_row / Lq over the collapsed leading axes of shape [B, H, Lq] where
// the mask is indexed by B = leading dim 0. causal masks keys j > query i.
template <typename S>
inline TensorT<S> softmax_attn(const TensorT<S>& scores,
                               std::shared_ptr<const std::vector<std::uint8_t>> key_valid = nullptr,
                               bool causal = false) {
    const int r = scores.rank();
    if (r < 2) shape_error("softmax_attn", "expected rank >= 2, got " + shape_str(scores.shape()));
    const std::size_t lk = static_cast<std::size_t>(scores.dim(r - 1));
    const std::size_t lq = static_cast<std::size_t>(scores.dim(r - 2));
    const std::size_t rows = scores.numel() / lk;
    const std::size_t batch0 = static_cast<std::size_t>(scores.dim(0));
    const std::size_t rows_per_batch = rows / batch0;
    if (key_valid && key_valid->size() != batch0 * lk)
        shape_error("softmax_attn", "key mask size " + std::to_string(key_valid->size()) + " != batch*Lk");

    TensorT<S> out = TensorT<S>::zeros(scores.shape());
    const S* ps = scores.data().data();
    S* po = out.data().data();
    for (std::size_t row = 0; row < rows; ++row) {
        const std::size_t bidx = row / rows_per_batch;
        const std::size_t qidx = row % lq;
        const S* srow = ps + row * lk;
        S* orow = po + row * lk;
        const std::uint8_t* valid = key_valid ? key_valid->data() + bidx * lk : nullptr;
        S maxv = S(0);
        bool any = false;
        for (std::size_t j = 0; j < lk; ++j) {
            if (valid && !valid[j]) continue;
            if (causal && j > qidx) continue;
            if (!any || srow[j] > maxv) maxv = srow[j];
            any = true;
        }
        if (!any) continue;  // fully masked row stays zero
        S denom = S(0);
        for (std::size_t j = 0; j < lk; ++j) {
            if ((valid && !valid[j]) || (causal && j > qidx)) {
                orow[j] = S(0);
                continue;
            }
            const S e = static_cast<S>(std::exp(static_cast<double>(srow[j] - maxv)));
            orow[j] = e;
            denom += e;
        }
        for (std::size_t j = 0; j < lk; ++j) orow[j] /= denom;
    }
    if (detail::recording<S>({&scores})) {
        int ns = detail::enroll(scores);
        auto cs = scores.core(), co = out.core();
        detail::attach(out, {ns}, [cs, co, rows, lk]() {
            const S* g = co->grad->data();
            const S* p = co->data->data();
            S* ds = cs->grad->data();
            for (std::size_t row = 0; row < rows; ++row) {
                const S* grow = g + row * lk;
                const S* prow = p + row * lk;
                S dot = S(0);
                for (std::size_t j = 0; j < lk; ++j) dot += grow[j] * prow[j];
                S* drow = ds + row * lk;
                for (std::size_t j = 0; j < lk; ++j) drow[j] += prow[j] * (grow[j] - dot);
            }
        });
    }
    return out;
}

// Scaled dot-product attention with head split. q [B, Lq, D] (or [Lq, D]),
// k/v [B, Lk, D]; per head softmax(q k^T / sqrt(d_head)) v, heads
// re-concatenated.
template <typename S>
inline TensorT<S> attention(const TensorT<S>& q_in, const TensorT<S>& k_in, const TensorT<S>& v_in, int heads,
                            std::shared_ptr<const std::vector<std::uint8_t>> key_valid = nullptr,
                            bool causal = false) {
    const bool flat = q_in.rank() == 2;
    TensorT<S> q = flat ? reshape(q_in, {1, q_in.dim(0), q_in.dim(1)}) : q_in;
    TensorT<S> k = flat ? reshape(k_in, {1, k_in.dim(0), k_in.dim(1)}) : k_in;
    TensorT<S> v = flat ? reshape(v_in, {1, v_in.dim(0), v_in.dim(1)}) : v_in;
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        shape_error("attention", "expected rank-3 inputs, got " + shape_str(q_in.shape()));
    const int D = q.dim(2);
    if (k.dim(2) != D || v.dim(2) != D)
        shape_error("attention", "model width mismatch: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                                     ", v " + shape_str(v.shape()));
    if (k.dim(0) != q.dim(0) || v.dim(0) != k.dim(0) || v.dim(1) != k.dim(1))
        shape_error("attention", "batch/key shapes differ: k " + shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    if (heads < 1 || D % heads != 0)
        throw std::invalid_argument("attention: width " + std::to_string(D) + " not divisible by " +
                                    std::to_string(heads) + " heads");
    const int B = q.dim(0), Lq = q.dim(1), Lk = k.dim(1), dh = D / heads;
    TensorT<S> qh = swap_axes_1_2(reshape(q, {B, Lq, heads, dh}));
    TensorT<S> kh = swap_axes_1_2(reshape(k, {B, Lk, heads, dh}));
    TensorT<S> vh = swap_axes_1_2(reshape(v, {B, Lk, heads, dh}));
    TensorT<S> logits = scale(bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    TensorT<S> probs = softmax_attn(logits, std::move(key_valid), causal);
    TensorT<S> mixed = matmul(probs, vh);
    TensorT<S> out = reshape(swap_axes_1_2(mixed), {B, Lq, D});
    return flat ? reshape(out, {Lq, D}) : out;
}

// ---------------------------------------------------------------------------
// Losses and reductions
// ---------------------------------------------------------------------------

template <typename S>
inline TensorT<S> sum_all(const TensorT<S>& x) {
    TensorT<S> out = TensorT<S>::zeros({1});
    S acc = S(0);
    for (const S v : x.data()) acc += v;
    out.data()[0] = acc;
    if (detail::recording<S>({&x})) {
        int nx = detail::enroll(x);
        auto cx = x.core(), co = out.core();
        const std::size_t n = x.numel();
        detail::attach(out, {nx}, [cx, co, n]() {
            const S g = (*co->grad)[0];
            S* dx = cx->grad->data();
            for (std::size_t i = 0; i < n; ++i) dx[i] += g;
        });
    }
    return out;
}

template <typename S>
inline TensorT<S> mean_all(const TensorT<S>& x) {
    const std::size_t n = x.numel();
    TensorT<S> out = TensorT<S>::zeros({1});
    S acc = S(0);
    for (const S v : x.data()) acc += v;
    out.data()[0] = acc / static_cast<S>(n);
    if (detail::recording<S>({&x})) {
        int nx = detail::enroll(x);
        auto cx = x.core(), co = out.core();
        detail::attach(out, {nx}, [cx, co, n]() {
            const S g = (*co->grad)[0] / static_cast<S>(n);
            S* dx = cx->grad->data();
            for (std::size_t i = 0; i < n; ++i) dx[i] += g;
        });
    }
    return out;
}

template <typename S>
inline TensorT<S> abs_elem(const TensorT<S>& x) {
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    const std::size_t n = x.numel();
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = px[i] < S(0) ? -px[i] : px[i];
    if (detail::recording<S>({&x})) {
        int nx = detail::enroll(x);
        auto cx = x.core(), co = out.core();
        detail::attach(out, {nx}, [cx, co, n]() {
            const S* g = co->grad->data();
            const S* px2 = cx->data->data();
            S* dx = cx->grad->data();
            for (std::size_t i = 0; i < n; ++i) {
                if (px2[i] > S(0))
                    dx[i] += g[i];
                else if (px2[i] < S(0))
                    dx[i] -= g[i];
            }
        });
    }
    return out;
}

// Embedding lookup: table [V, D], ids with any logical shape -> [ids..., D].
template <typename S>
inline TensorT<S> embedding(const TensorT<S>& table, const std::vector<int>& ids, Shape id_shape) {
    if (table.rank() != 2) shape_error("embedding", "table must be rank 2, got " + shape_str(table.shape()));
    if (shape_numel(id_shape) != ids.size()) shape_error("embedding", "id count does not match id shape");
    const int V = table.dim(0);
    const std::size_t d = static_cast<std::size_t>(table.dim(1));
    for (int id : ids)
        if (id < 0 || id >= V)
            throw std::invalid_argument("embedding: id " + std::to_string(id) + " out of range [0," +
                                        std::to_string(V) + ")");
    Shape out_shape = id_shape;
    out_shape.push_back(static_cast<int>(d));
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const S* pt = table.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const S* src = pt + static_cast<std::size_t>(ids[i]) * d;
        S* dst = po + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
    }
    if (detail::recording<S>({&table})) {
        int nt = detail::enroll(table);
        auto ct = table.core(), co = out.core();
        auto ids_copy = std::make_shared<std::vector<int>>(ids);
        detail::attach(out, {nt}, [ct, co, ids_copy, d]() {
            const S* g = co->grad->data();
            S* dt = ct->grad->data();
            for (std::size_t i = 0; i < ids_copy->size(); ++i) {
                S* dst = dt + static_cast<std::size_t>((*ids_copy)[i]) * d;
                const S* src = g + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// Mean token-level cross entropy over non-pad positions.
// logits [..., V], targets flat ids of length numel/V.
template <typename S>
inline TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets, int pad_id) {
    const int r = logits.rank();
    if (r < 2) shape_error("cross_entropy", "logits must have rank >= 2, got " + shape_str(logits.shape()));
    const std::size_t V = static_cast<std::size_t>(logits.dim(r - 1));
    const std::size_t rows = logits.numel() / V;
    if (targets.size() != rows)
        shape_error("cross_entropy", "targets length " + std::to_string(targets.size()) + " != positions " +
                                         std::to_string(rows));
    std::size_t count = 0;
    for (std::size_t i = 0; i < rows; ++i) {
        if (targets[i] == pad_id) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V)
            throw std::invalid_argument("cross_entropy: target id " + std::to_string(targets[i]) +
                                        " out of range [0," + std::to_string(V) + ")");
        ++count;
    }
    if (count == 0) throw std::runtime_error("cross_entropy: no supervised positions (all targets are pad)");

    TensorT<S> out = TensorT<S>::zeros({1});
    const S* pl = logits.data().data();
    double acc = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        if (targets[i] == pad_id) continue;
        const S* row = pl + i * V;
        double maxv = static_cast<double>(row[0]);
        for (std::size_t j = 1; j < V; ++j) maxv = std::max(maxv, static_cast<double>(row[j]));
        double denom = 0.0;
        for (std::size_t j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j]) - maxv);
        const double lse = maxv + std::log(denom);
        acc += lse - static_cast<double>(row[static_cast<std::size_t>(targets[i])]);
    }
    out.data()[0] = static_cast<S>(acc / static_cast<double>(count));

    if (detail::recording<S>({&logits})) {
        int nl = detail::enroll(logits);
        auto cl = logits.core(), co = out.core();
        auto tgt = std::make_shared<std::vector<int>>(targets);
        detail::attach(out, {nl}, [cl, co, tgt, pad_id, rows, V, count]() {
            const S g = (*co->grad)[0] / static_cast<S>(count);
            const S* pl2 = cl->data->data();
            S* dl = cl->grad->data();
            for (std::size_t i = 0; i < rows; ++i) {
                if ((*tgt)[i] == pad_id) continue;
                const S* row = pl2 + i * V;
                double maxv = static_cast<double>(row[0]);
                for (std::size_t j = 1; j < V; ++j) maxv = std::max(maxv, static_cast<double>(row[j]));
                double denom = 0.0;
                for (std::size_t j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j]) - maxv);
                S* drow = dl + i * V;
                for (std::size_t j = 0; j < V; ++j) {
                    const double p = std::exp(static_cast<double>(row[j]) - maxv) / denom;
                    drow[j] += g * static_cast<S>(p);
                }
                drow[static_cast<std::size_t>((*tgt)[i])] -= g;
            }
        });
    }
    return out;
}

}  // namespace diffslt
