// Network building blocks on top of the autodiff tensors: parameter
// registry, linear / layer-norm / conv layers, multi-head self-attention.
#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "condet/common.hpp"
#include "condet/tensor.hpp"

namespace condet::nn {

using ad::TensorT;

// Flat registry of named parameter tensors. Optimizer, EMA and checkpoint
// code iterate it in registration order, which fixes update determinism.
template <class S>
struct ParamStoreT {
    std::vector<std::pair<std::string, TensorT<S>>> params;

    TensorT<S> make(const std::string& name, int rows, int cols) {
        auto t = TensorT<S>::zeros(rows, cols, /*requires_grad=*/true);
        params.emplace_back(name, t);
        return t;
    }

    void zero_grads() {
        for (auto& [name, t] : params) t.zero_grad();
    }

    size_t total_size() const {
        size_t n = 0;
        for (auto& [name, t] : params) n += t.size();
        return n;
    }

    // Copies values from another store with identical layout.
    void copy_values_from(const ParamStoreT& other) {
        if (other.params.size() != params.size()) throw std::logic_error("param store layout mismatch");
        for (size_t i = 0; i < params.size(); ++i) {
            if (other.params[i].second.size() != params[i].second.size())
                throw std::logic_error("param store layout mismatch");
            params[i].second.impl().v = other.params[i].second.impl().v;
        }
    }
};

template <class S>
void fill_uniform(TensorT<S>& t, Rng& rng, double limit) {
    for (size_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(rng.uniform(-limit, limit));
}

template <class S>
void xavier_uniform(TensorT<S>& t, Rng& rng) {
    double limit = std::sqrt(6.0 / (t.rows() + t.cols()));
    fill_uniform(t, rng, limit);
}

template <class S>
struct LinearT {
    TensorT<S> w;  // [in, out]
    TensorT<S> b;  // [1, out]; undefined when bias-free

    LinearT() = default;
    LinearT(ParamStoreT<S>& store, const std::string& name, int in, int out, Rng& rng, bool bias = true) {
        w = store.make(name + ".w", in, out);
        xavier_uniform(w, rng);
        if (bias) b = store.make(name + ".b", 1, out);
    }

    TensorT<S> operator()(const TensorT<S>& x) const {
        auto y = ad::matmul(x, w);
        if (b.defined()) y = ad::add_rowvec(y, b);
        return y;
    }
};

template <class S>
struct LayerNormT {
    TensorT<S> gamma, beta;  // [1, d]
    S eps = static_cast<S>(1e-5);

    LayerNormT() = default;
    LayerNormT(ParamStoreT<S>& store, const std::string& name, int dim) {
        gamma = store.make(name + ".g", 1, dim);
        for (size_t i = 0; i < gamma.size(); ++i) gamma.data()[i] = S(1);
        beta = store.make(name + ".b", 1, dim);
    }

    TensorT<S> operator()(const TensorT<S>& x) const {
        auto mu = ad::mean_rows(x);
        auto xc = ad::sub_colvec(x, mu);
        auto var = ad::mean_rows(ad::square(xc));
        auto inv = ad::recip(ad::sqrt_t(ad::add_scalar(var, eps)));
        auto y = ad::mul_colvec(xc, inv);
        return ad::add_rowvec(ad::mul_rowvec(y, gamma), beta);
    }
};

namespace detail {

// im2col for a single [Cin, H*W] image, zero padding, square kernel.
template <class S>
std::vector<S> im2col(const S* x, int cin, int h, int w, int k, int stride, int pad, int oh, int ow) {
    std::vector<S> col(static_cast<size_t>(cin) * k * k * oh * ow, S(0));
    int ocols = oh * ow;
    for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                S* dst = col.data() + (static_cast<size_t>(c) * k * k + ky * k + kx) * ocols;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        dst[oy * ow + ox] = x[static_cast<size_t>(c) * h * w + iy * w + ix];
                    }
                }
            }
        }
    }
    return col;
}

template <class S>
void col2im_add(const S* col, S* gx, int cin, int h, int w, int k, int stride, int pad, int oh, int ow) {
    int ocols = oh * ow;
    for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const S* src = col + (static_cast<size_t>(c) * k * k + ky * k + kx) * ocols;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        gx[static_cast<size_t>(c) * h * w + iy * w + ix] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Convolution over one image packed as [Cin, H*W] -> [Cout, OH*OW].
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& weight, int h, int w, int k, int stride, int pad) {
    int cin = x.rows();
    if (x.cols() != h * w) throw std::invalid_argument("conv2d: H*W mismatch");
    if (weight.cols() != cin * k * k) throw std::invalid_argument("conv2d: weight shape mismatch");
    int cout = weight.rows();
    int oh = (h + 2 * pad - k) / stride + 1;
    int ow = (w + 2 * pad - k) / stride + 1;
    using CMap = typename TensorT<S>::CMap;
    using Map = typename TensorT<S>::Map;
    std::vector<S> col = detail::im2col(x.data(), cin, h, w, k, stride, pad, oh, ow);
    std::vector<S> wv = weight.impl().v;
    auto out = ad::detail::make_result<S>(
        cout, oh * ow, {x.ptr(), weight.ptr()},
        [col, wv, cin, h, w, k, stride, pad, oh, ow](ad::TensorImplT<S>& self) {
            auto& px = self.parents[0];
            auto& pw = self.parents[1];
            int cout = self.rows;
            CMap go(self.g.data(), cout, oh * ow);
            if (pw->requires_grad) {
                pw->ensure_grad();
                Map gw(pw->g.data(), pw->rows, pw->cols);
                CMap colm(col.data(), cin * k * k, oh * ow);
                gw.noalias() += go * colm.transpose();
            }
            if (px->requires_grad) {
                px->ensure_grad();
                CMap wm(wv.data(), cout, cin * k * k);
                typename TensorT<S>::Mat gcol = wm.transpose() * go;
                detail::col2im_add(gcol.data(), px->g.data(), cin, h, w, k, stride, pad, oh, ow);
            }
        });
    CMap wm(weight.data(), cout, cin * k * k);
    CMap colm(col.data(), cin * k * k, oh * ow);
    Map om(out.data(), cout, oh * ow);
    om.noalias() = wm * colm;
    return out;
}

template <class S>
struct Conv2dT {
    TensorT<S> w;  // [Cout, Cin*k*k]
    TensorT<S> b;  // [Cout, 1]
    int k = 3, stride = 1, pad = 1;

    Conv2dT() = default;
    Conv2dT(ParamStoreT<S>& store, const std::string& name, int cin, int cout, int k_, int stride_, int pad_,
            Rng& rng)
        : k(k_), stride(stride_), pad(pad_) {
        w = store.make(name + ".w", cout, cin * k * k);
        fill_uniform(w, rng, std::sqrt(1.0 / (static_cast<double>(cin) * k * k)));
        b = store.make(name + ".b", cout, 1);
    }

    TensorT<S> operator()(const TensorT<S>& x, int h, int w_in) const {
        return ad::add_colvec(conv2d(x, w, h, w_in, k, stride, pad), b);
    }
};

// Multi-head self-attention over a proposal set [n, d].
template <class S>
struct SelfAttentionT {
    LinearT<S> wq, wk, wv, wo;
    int heads = 2;
    int dim = 0;

    SelfAttentionT() = default;
    SelfAttentionT(ParamStoreT<S>& store, const std::string& name, int d, int heads_, Rng& rng)
        : heads(heads_), dim(d) {
        wq = LinearT<S>(store, name + ".q", d, d, rng);
        wk = LinearT<S>(store, name + ".k", d, d, rng);
        wv = LinearT<S>(store, name + ".v", d, d, rng);
        wo = LinearT<S>(store, name + ".o", d, d, rng);
    }

    TensorT<S> operator()(const TensorT<S>& x) const {
        int dh = dim / heads;
        auto q = wq(x), k = wk(x), v = wv(x);
        std::vector<TensorT<S>> parts;
        parts.reserve(heads);
        S inv = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
        for (int hh = 0; hh < heads; ++hh) {
            auto qh = ad::slice_cols(q, hh * dh, dh);
            auto kh = ad::slice_cols(k, hh * dh, dh);
            auto vh = ad::slice_cols(v, hh * dh, dh);
            auto att = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose_t(kh)), inv));
            parts.push_back(ad::matmul(att, vh));
        }
        return wo(heads == 1 ? parts[0] : ad::concat_cols(parts));
    }
};

}  // namespace condet::nn
