// Minimal reverse-mode autodiff over 2-D tensors, Eigen-backed kernels.
//
// Tensors are row-major (rows, cols) buffers. Ops record a backward closure
// when grad mode is on and any input requires grad; backward() on a scalar
// root walks the tape in reverse topological order. Batched structures
// (feature maps, per-proposal matrices) are packed into 2-D with explicit
// dimension arguments on the ops that need them.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

namespace condet::ad {

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII guard disabling tape recording (inference / EMA forward passes).
struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGrad() { grad_mode() = prev; }
};

template <class S>
struct TensorImplT {
    int rows = 0, cols = 0;
    std::vector<S> v;
    std::vector<S> g;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImplT>> parents;
    std::function<void(TensorImplT&)> backfn;

    size_t size() const { return v.size(); }
    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), S(0));
    }
};

template <class S>
class TensorT {
public:
    using Impl = TensorImplT<S>;
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Map = Eigen::Map<Mat>;
    using CMap = Eigen::Map<const Mat>;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<Impl> p) : p_(std::move(p)) {}

    static TensorT zeros(int rows, int cols, bool requires_grad = false) {
        auto p = std::make_shared<Impl>();
        p->rows = rows;
        p->cols = cols;
        p->v.assign(static_cast<size_t>(rows) * cols, S(0));
        p->requires_grad = requires_grad;
        return TensorT(std::move(p));
    }

    static TensorT full(int rows, int cols, S value) {
        TensorT t = zeros(rows, cols);
        std::fill(t.impl().v.begin(), t.impl().v.end(), value);
        return t;
    }

    template <class M>
    static TensorT from_matrix(const M& m, bool requires_grad = false) {
        TensorT t = zeros(static_cast<int>(m.rows()), static_cast<int>(m.cols()), requires_grad);
        for (int r = 0; r < t.rows(); ++r)
            for (int c = 0; c < t.cols(); ++c) t.impl().v[static_cast<size_t>(r) * t.cols() + c] = static_cast<S>(m(r, c));
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }
    int rows() const { return p_->rows; }
    int cols() const { return p_->cols; }
    size_t size() const { return p_->size(); }
    bool requires_grad() const { return p_->requires_grad; }

    Impl& impl() const { return *p_; }
    const std::shared_ptr<Impl>& ptr() const { return p_; }

    S* data() { return p_->v.data(); }
    const S* data() const { return p_->v.data(); }
    S item() const {
        if (size() != 1) throw std::logic_error("item(): tensor is not scalar");
        return p_->v[0];
    }
    S at(int r, int c) const { return p_->v[static_cast<size_t>(r) * cols() + c]; }

    Map val() { return Map(p_->v.data(), rows(), cols()); }
    CMap val() const { return CMap(p_->v.data(), rows(), cols()); }
    Map grad() {
        p_->ensure_grad();
        return Map(p_->g.data(), rows(), cols());
    }

    // Value copy cut off from the tape.
    TensorT detach() const {
        TensorT t = zeros(rows(), cols());
        t.impl().v = p_->v;
        return t;
    }

    void zero_grad() { p_->g.assign(p_->v.size(), S(0)); }

    void backward() const {
        if (size() != 1) throw std::logic_error("backward(): root must be scalar");
        std::vector<Impl*> topo;
        std::unordered_set<Impl*> seen;
        std::vector<std::pair<Impl*, size_t>> stack;
        stack.push_back({p_.get(), 0});
        seen.insert(p_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Impl* parent = node->parents[idx++].get();
                if (parent->requires_grad && !seen.count(parent)) {
                    seen.insert(parent);
                    stack.push_back({parent, 0});
                }
            } else {
                topo.push_back(node);
                stack.pop_back();
            }
        }
        p_->ensure_grad();
        p_->g[0] = S(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            if ((*it)->backfn) (*it)->backfn(**it);
        }
    }

private:
    std::shared_ptr<Impl> p_;
};

namespace detail {

template <class S>
TensorT<S> make_result(int rows, int cols, std::vector<std::shared_ptr<TensorImplT<S>>> parents,
                       std::function<void(TensorImplT<S>&)> backfn) {
    auto out = TensorT<S>::zeros(rows, cols);
    bool need = false;
    if (grad_mode()) {
        for (auto& p : parents)
            if (p->requires_grad) need = true;
    }
    if (need) {
        out.impl().requires_grad = true;
        out.impl().parents = std::move(parents);
        out.impl().backfn = std::move(backfn);
    }
    return out;
}

template <class S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---- elementwise binary ----

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "add");
    auto out = detail::make_result<S>(a.rows(), a.cols(), {a.ptr(), b.ptr()}, [](TensorImplT<S>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < self.size(); ++i) p->g[i] += self.g[i];
        }
    });
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "sub");
    auto out = detail::make_result<S>(a.rows(), a.cols(), {a.ptr(), b.ptr()}, [](TensorImplT<S>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.size(); ++i) pa->g[i] += self.g[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self.size(); ++i) pb->g[i] -= self.g[i];
        }
    });
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<S> av = a.impl().v, bv = b.impl().v;
    auto out = detail::make_result<S>(a.rows(), a.cols(), {a.ptr(), b.ptr()},
                                      [av, bv](TensorImplT<S>& self) {
                                          auto& pa = self.parents[0];
                                          auto& pb = self.parents[1];
                                          if (pa->requires_grad) {
                                              pa->ensure_grad();
                                              for (size_t i = 0; i < self.size(); ++i) pa->g[i] += self.g[i] * bv[i];
                                          }
                                          if (pb->requires_grad) {
                                              pb->ensure_grad();
                                              for (size_t i = 0; i < self.size(); ++i) pb->g[i] += self.g[i] * av[i];
                                          }
                                      });
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

template <class S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<S> av = a.impl().v, bv = b.impl().v;
    auto out = detail::make_result<S>(a.rows(), a.cols(), {a.ptr(), b.ptr()},
                                      [av, bv](TensorImplT<S>& self) {
                                          auto& pa = self.parents[0];
                                          auto& pb = self.parents[1];
                                          if (pa->requires_grad) {
                                              pa->ensure_grad();
                                              for (size_t i = 0; i < self.size(); ++i) pa->g[i] += self.g[i] / bv[i];
                                          }
                                          if (pb->requires_grad) {
                                              pb->ensure_grad();
                                              for (size_t i = 0; i < self.size(); ++i)
                                                  pb->g[i] -= self.g[i] * av[i] / (bv[i] * bv[i]);
                                          }
                                      });
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] / b.data()[i];
    return out;
}

// Elementwise max; gradient routes to the winning side (ties -> a).
template <class S>
TensorT<S> cmax(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "cmax");
    std::vector<uint8_t> pick(a.size());
    for (size_t i = 0; i < a.size(); ++i) pick[i] = a.data()[i] >= b.data()[i] ? 0 : 1;
    auto out = detail::make_result<S>(a.rows(), a.cols(), {a.ptr(), b.ptr()},
                                      [pick](TensorImplT<S>& self) {
                                          for (size_t i = 0; i < self.size(); ++i) {
                                              auto& p = self.parents[pick[i]];
                                              if (!p->requires_grad) continue;
                                              p->ensure_grad();
                                              p->g[i] += self.g[i];
                                          }
                                      });
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = std::max(a.data()[i], b.data()[i]);
    return out;
}

template <class S>
TensorT<S> cmin(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "cmin");
    std::vector<uint8_t> pick(a.size());
    for (size_t i = 0; i < a.size(); ++i) pick[i] = a.data()[i] <= b.data()[i] ? 0 : 1;
    auto out = detail::make_result<S>(a.rows(), a.cols(), {a.ptr(), b.ptr()},
                                      [pick](TensorImplT<S>& self) {
                                          for (size_t i = 0; i < self.size(); ++i) {
                                              auto& p = self.parents[pick[i]];
                                              if (!p->requires_grad) continue;
                                              p->ensure_grad();
                                              p->g[i] += self.g[i];
                                          }
                                      });
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = std::min(a.data()[i], b.data()[i]);
    return out;
}

// ---- elementwise unary / scalar ----

namespace detail {

template <class S, class Fwd, class Bwd>
TensorT<S> unary_op(const TensorT<S>& a, Fwd fwd, Bwd dydx_from_xy) {
    std::vector<S> x = a.impl().v;
    auto out = TensorT<S>::zeros(a.rows(), a.cols());
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = fwd(x[i]);
    std::vector<S> y = out.impl().v;
    auto res = detail::make_result<S>(a.rows(), a.cols(), {a.ptr()},
                                      [x, y, dydx_from_xy](TensorImplT<S>& self) {
                                          auto& p = self.parents[0];
                                          p->ensure_grad();
                                          for (size_t i = 0; i < self.size(); ++i)
                                              p->g[i] += self.g[i] * dydx_from_xy(x[i], y[i]);
                                      });
    res.impl().v = std::move(out.impl().v);
    return res;
}

}  // namespace detail

template <class S>
TensorT<S> relu(const TensorT<S>& a) {
    return detail::unary_op(
        a, [](S x) { return x > S(0) ? x : S(0); }, [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <class S>
TensorT<S> silu(const TensorT<S>& a) {
    return detail::unary_op(
        a, [](S x) { return x / (S(1) + std::exp(-x)); },
        [](S x, S) {
            S s = S(1) / (S(1) + std::exp(-x));
            return s * (S(1) + x * (S(1) - s));
        });
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& a) {
    return detail::unary_op(
        a, [](S x) { return S(1) / (S(1) + std::exp(-x)); }, [](S, S y) { return y * (S(1) - y); });
}

template <class S>
TensorT<S> exp_t(const TensorT<S>& a) {
    return detail::unary_op(
        a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <class S>
TensorT<S> log_t(const TensorT<S>& a) {
    return detail::unary_op(
        a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <class S>
TensorT<S> square(const TensorT<S>& a) {
    return detail::unary_op(
        a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

template <class S>
TensorT<S> sqrt_t(const TensorT<S>& a) {
    return detail::unary_op(
        a, [](S x) { return std::sqrt(x); }, [](S, S y) { return S(1) / (S(2) * y); });
}

template <class S>
TensorT<S> abs_t(const TensorT<S>& a) {
    return detail::unary_op(
        a, [](S x) { return std::abs(x); }, [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

template <class S>
TensorT<S> neg(const TensorT<S>& a) {
    return detail::unary_op(
        a, [](S x) { return -x; }, [](S, S) { return S(-1); });
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S k) {
    return detail::unary_op(
        a, [k](S x) { return k * x; }, [k](S, S) { return k; });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& a, S k) {
    return detail::unary_op(
        a, [k](S x) { return x + k; }, [](S, S) { return S(1); });
}

template <class S>
TensorT<S> recip(const TensorT<S>& a) {
    return detail::unary_op(
        a, [](S x) { return S(1) / x; }, [](S, S y) { return -y * y; });
}

template <class S>
TensorT<S> min_scalar(const TensorT<S>& a, S k) {
    return detail::unary_op(
        a, [k](S x) { return std::min(x, k); }, [k](S x, S) { return x <= k ? S(1) : S(0); });
}

template <class S>
TensorT<S> max_scalar(const TensorT<S>& a, S k) {
    return detail::unary_op(
        a, [k](S x) { return std::max(x, k); }, [k](S x, S) { return x >= k ? S(1) : S(0); });
}

template <class S>
TensorT<S> clamp(const TensorT<S>& a, S lo, S hi) {
    return min_scalar(max_scalar(a, lo), hi);
}

// ---- broadcast ----

// a[n,c] + b[1,c]
template <class S>
TensorT<S> add_rowvec(const TensorT<S>& a, const TensorT<S>& b) {
    if (b.rows() != 1 || b.cols() != a.cols()) throw std::invalid_argument("add_rowvec: bad shapes");
    int n = a.rows(), c = a.cols();
    auto out = detail::make_result<S>(n, c, {a.ptr(), b.ptr()}, [n, c](TensorImplT<S>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.size(); ++i) pa->g[i] += self.g[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < c; ++j) pb->g[j] += self.g[static_cast<size_t>(r) * c + j];
        }
    });
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<size_t>(r) * c + j] = a.data()[static_cast<size_t>(r) * c + j] + b.data()[j];
    return out;
}

// a[n,c] * b[1,c]
template <class S>
TensorT<S> mul_rowvec(const TensorT<S>& a, const TensorT<S>& b) {
    if (b.rows() != 1 || b.cols() != a.cols()) throw std::invalid_argument("mul_rowvec: bad shapes");
    int n = a.rows(), c = a.cols();
    std::vector<S> av = a.impl().v, bv = b.impl().v;
    auto out = detail::make_result<S>(n, c, {a.ptr(), b.ptr()}, [n, c, av, bv](TensorImplT<S>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < c; ++j) pa->g[static_cast<size_t>(r) * c + j] += self.g[static_cast<size_t>(r) * c + j] * bv[j];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < c; ++j) pb->g[j] += self.g[static_cast<size_t>(r) * c + j] * av[static_cast<size_t>(r) * c + j];
        }
    });
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<size_t>(r) * c + j] = a.data()[static_cast<size_t>(r) * c + j] * b.data()[j];
    return out;
}

// a[n,c] op b[n,1]
template <class S>
TensorT<S> add_colvec(const TensorT<S>& a, const TensorT<S>& b) {
    if (b.cols() != 1 || b.rows() != a.rows()) throw std::invalid_argument("add_colvec: bad shapes");
    int n = a.rows(), c = a.cols();
    auto out = detail::make_result<S>(n, c, {a.ptr(), b.ptr()}, [n, c](TensorImplT<S>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.size(); ++i) pa->g[i] += self.g[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int r = 0; r < n; ++r) {
                S acc = S(0);
                for (int j = 0; j < c; ++j) acc += self.g[static_cast<size_t>(r) * c + j];
                pb->g[r] += acc;
            }
        }
    });
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<size_t>(r) * c + j] = a.data()[static_cast<size_t>(r) * c + j] + b.data()[r];
    return out;
}

template <class S>
TensorT<S> sub_colvec(const TensorT<S>& a, const TensorT<S>& b) {
    if (b.cols() != 1 || b.rows() != a.rows()) throw std::invalid_argument("sub_colvec: bad shapes");
    int n = a.rows(), c = a.cols();
    auto out = detail::make_result<S>(n, c, {a.ptr(), b.ptr()}, [n, c](TensorImplT<S>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.size(); ++i) pa->g[i] += self.g[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int r = 0; r < n; ++r) {
                S acc = S(0);
                for (int j = 0; j < c; ++j) acc += self.g[static_cast<size_t>(r) * c + j];
                pb->g[r] -= acc;
            }
        }
    });
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<size_t>(r) * c + j] = a.data()[static_cast<size_t>(r) * c + j] - b.data()[r];
    return out;
}

template <class S>
TensorT<S> mul_colvec(const TensorT<S>& a, const TensorT<S>& b) {
    if (b.cols() != 1 || b.rows() != a.rows()) throw std::invalid_argument("mul_colvec: bad shapes");
    int n = a.rows(), c = a.cols();
    std::vector<S> av = a.impl().v, bv = b.impl().v;
    auto out = detail::make_result<S>(n, c, {a.ptr(), b.ptr()}, [n, c, av, bv](TensorImplT<S>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < c; ++j) pa->g[static_cast<size_t>(r) * c + j] += self.g[static_cast<size_t>(r) * c + j] * bv[r];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int r = 0; r < n; ++r) {
                S acc = S(0);
                for (int j = 0; j < c; ++j) acc += self.g[static_cast<size_t>(r) * c + j] * av[static_cast<size_t>(r) * c + j];
                pb->g[r] += acc;
            }
        }
    });
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<size_t>(r) * c + j] = a.data()[static_cast<size_t>(r) * c + j] * b.data()[r];
    return out;
}

// ---- matrix ----

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dim mismatch");
    using Mat = typename TensorT<S>::Mat;
    using CMap = typename TensorT<S>::CMap;
    using Map = typename TensorT<S>::Map;
    Mat av = CMap(a.data(), a.rows(), a.cols());
    Mat bv = CMap(b.data(), b.rows(), b.cols());
    auto out = detail::make_result<S>(a.rows(), b.cols(), {a.ptr(), b.ptr()},
                                      [av, bv](TensorImplT<S>& self) {
                                          CMap go(self.g.data(), self.rows, self.cols);
                                          auto& pa = self.parents[0];
                                          auto& pb = self.parents[1];
                                          if (pa->requires_grad) {
                                              pa->ensure_grad();
                                              Map ga(pa->g.data(), pa->rows, pa->cols);
                                              ga.noalias() += go * bv.transpose();
                                          }
                                          if (pb->requires_grad) {
                                              pb->ensure_grad();
                                              Map gb(pb->g.data(), pb->rows, pb->cols);
                                              gb.noalias() += av.transpose() * go;
                                          }
                                      });
    Map om(out.data(), out.rows(), out.cols());
    om.noalias() = av * bv;
    return out;
}

template <class S>
TensorT<S> transpose_t(const TensorT<S>& a) {
    int n = a.rows(), c = a.cols();
    auto out = detail::make_result<S>(c, n, {a.ptr()}, [n, c](TensorImplT<S>& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < c; ++j) p->g[static_cast<size_t>(r) * c + j] += self.g[static_cast<size_t>(j) * n + r];
    });
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < c; ++j) out.data()[static_cast<size_t>(j) * n + r] = a.data()[static_cast<size_t>(r) * c + j];
    return out;
}

// Batched matmul over n independent (p x q) @ (q x r) pairs packed per row.
template <class S>
TensorT<S> bmm(const TensorT<S>& a, const TensorT<S>& b, int p, int q, int r) {
    if (a.rows() != b.rows()) throw std::invalid_argument("bmm: batch mismatch");
    if (a.cols() != p * q || b.cols() != q * r) throw std::invalid_argument("bmm: packed shape mismatch");
    int n = a.rows();
    using CMap = typename TensorT<S>::CMap;
    using Map = typename TensorT<S>::Map;
    std::vector<S> av = a.impl().v, bv = b.impl().v;
    auto out = detail::make_result<S>(n, p * r, {a.ptr(), b.ptr()},
                                      [n, p, q, r, av, bv](TensorImplT<S>& self) {
                                          auto& pa = self.parents[0];
                                          auto& pb = self.parents[1];
                                          if (pa->requires_grad) pa->ensure_grad();
                                          if (pb->requires_grad) pb->ensure_grad();
                                          for (int i = 0; i < n; ++i) {
                                              CMap ai(av.data() + static_cast<size_t>(i) * p * q, p, q);
                                              CMap bi(bv.data() + static_cast<size_t>(i) * q * r, q, r);
                                              CMap gi(self.g.data() + static_cast<size_t>(i) * p * r, p, r);
                                              if (pa->requires_grad) {
                                                  Map gai(pa->g.data() + static_cast<size_t>(i) * p * q, p, q);
                                                  gai.noalias() += gi * bi.transpose();
                                              }
                                              if (pb->requires_grad) {
                                                  Map gbi(pb->g.data() + static_cast<size_t>(i) * q * r, q, r);
                                                  gbi.noalias() += ai.transpose() * gi;
                                              }
                                          }
                                      });
    for (int i = 0; i < n; ++i) {
        CMap ai(a.data() + static_cast<size_t>(i) * p * q, p, q);
        CMap bi(b.data() + static_cast<size_t>(i) * q * r, q, r);
        Map oi(out.data() + static_cast<size_t>(i) * p * r, p, r);
        oi.noalias() = ai * bi;
    }
    return out;
}

// ---- shape ----

template <class S>
TensorT<S> reshape(const TensorT<S>& a, int rows, int cols) {
    if (static_cast<size_t>(rows) * cols != a.size()) throw std::invalid_argument("reshape: size mismatch");
    auto out = detail::make_result<S>(rows, cols, {a.ptr()}, [](TensorImplT<S>& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (size_t i = 0; i < self.size(); ++i) p->g[i] += self.g[i];
    });
    out.impl().v = a.impl().v;
    return out;
}

template <class S>
TensorT<S> slice_cols(const TensorT<S>& a, int start, int len) {
    if (start < 0 || len < 0 || start + len > a.cols()) throw std::invalid_argument("slice_cols: out of range");
    int n = a.rows(), c = a.cols();
    auto out = detail::make_result<S>(n, len, {a.ptr()}, [n, c, start, len](TensorImplT<S>& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < len; ++j)
                p->g[static_cast<size_t>(r) * c + start + j] += self.g[static_cast<size_t>(r) * len + j];
    });
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < len; ++j)
            out.data()[static_cast<size_t>(r) * len + j] = a.data()[static_cast<size_t>(r) * c + start + j];
    return out;
}

template <class S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    int n = parts[0].rows(), total = 0;
    std::vector<std::shared_ptr<TensorImplT<S>>> parents;
    std::vector<int> widths;
    for (auto& t : parts) {
        if (t.rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
        widths.push_back(t.cols());
        total += t.cols();
        parents.push_back(t.ptr());
    }
    auto out = detail::make_result<S>(n, total, parents, [n, total, widths](TensorImplT<S>& self) {
        int off = 0;
        for (size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            int w = widths[k];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int r = 0; r < n; ++r)
                    for (int j = 0; j < w; ++j)
                        p->g[static_cast<size_t>(r) * w + j] += self.g[static_cast<size_t>(r) * total + off + j];
            }
            off += w;
        }
    });
    int off = 0;
    for (size_t k = 0; k < parts.size(); ++k) {
        int w = widths[k];
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < w; ++j)
                out.data()[static_cast<size_t>(r) * total + off + j] = parts[k].data()[static_cast<size_t>(r) * w + j];
        off += w;
    }
    return out;
}

template <class S>
TensorT<S> gather_rows(const TensorT<S>& a, const std::vector<int>& idx) {
    int c = a.cols();
    for (int i : idx)
        if (i < 0 || i >= a.rows()) throw std::invalid_argument("gather_rows: index out of range");
    auto out = detail::make_result<S>(static_cast<int>(idx.size()), c, {a.ptr()}, [idx, c](TensorImplT<S>& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (size_t r = 0; r < idx.size(); ++r)
            for (int j = 0; j < c; ++j) p->g[static_cast<size_t>(idx[r]) * c + j] += self.g[r * c + j];
    });
    for (size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < c; ++j) out.data()[r * c + j] = a.data()[static_cast<size_t>(idx[r]) * c + j];
    return out;
}

// ---- reductions ----

template <class S>
TensorT<S> sum_all(const TensorT<S>& a) {
    auto out = detail::make_result<S>(1, 1, {a.ptr()}, [](TensorImplT<S>& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (size_t i = 0; i < p->g.size(); ++i) p->g[i] += self.g[0];
    });
    S acc = S(0);
    for (size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    out.data()[0] = acc;
    return out;
}

template <class S>
TensorT<S> mean_all(const TensorT<S>& a) {
    return scale(sum_all(a), S(1) / static_cast<S>(a.size()));
}

template <class S>
TensorT<S> sum_rows(const TensorT<S>& a) {
    int n = a.rows(), c = a.cols();
    auto out = detail::make_result<S>(n, 1, {a.ptr()}, [n, c](TensorImplT<S>& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < c; ++j) p->g[static_cast<size_t>(r) * c + j] += self.g[r];
    });
    for (int r = 0; r < n; ++r) {
        S acc = S(0);
        for (int j = 0; j < c; ++j) acc += a.data()[static_cast<size_t>(r) * c + j];
        out.data()[r] = acc;
    }
    return out;
}

template <class S>
TensorT<S> mean_rows(const TensorT<S>& a) {
    return scale(sum_rows(a), S(1) / static_cast<S>(a.cols()));
}

// ---- fused nn ops ----

// Row-wise softmax with the standard max-shift.
template <class S>
TensorT<S> softmax_rows(const TensorT<S>& a) {
    int n = a.rows(), c = a.cols();
    auto out = TensorT<S>::zeros(n, c);
    for (int r = 0; r < n; ++r) {
        const S* x = a.data() + static_cast<size_t>(r) * c;
        S* y = out.data() + static_cast<size_t>(r) * c;
        S m = x[0];
        for (int j = 1; j < c; ++j) m = std::max(m, x[j]);
        S z = S(0);
        for (int j = 0; j < c; ++j) {
            y[j] = std::exp(x[j] - m);
            z += y[j];
        }
        for (int j = 0; j < c; ++j) y[j] /= z;
    }
    std::vector<S> yv = out.impl().v;
    auto res = detail::make_result<S>(n, c, {a.ptr()}, [n, c, yv](TensorImplT<S>& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (int r = 0; r < n; ++r) {
            const S* y = yv.data() + static_cast<size_t>(r) * c;
            const S* go = self.g.data() + static_cast<size_t>(r) * c;
            S dot = S(0);
            for (int j = 0; j < c; ++j) dot += go[j] * y[j];
            S* gi = p->g.data() + static_cast<size_t>(r) * c;
            for (int j = 0; j < c; ++j) gi[j] += (go[j] - dot) * y[j];
        }
    });
    res.impl().v = std::move(out.impl().v);
    return res;
}

}  // namespace condet::ad
