// The learnable consistency function: a strided conv feature extractor,
// single-scale RoI-aligned pooling and an iterative detection head
// (self-attention -> dynamic conv -> cls/reg heads per stage), wrapped in
// the c_skip / c_out consistency parameterization.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "condet/common.hpp"
#include "condet/corruption.hpp"
#include "condet/geometry.hpp"
#include "condet/image.hpp"
#include "condet/nn.hpp"
#include "condet/schedule.hpp"
#include "condet/tensor.hpp"

namespace condet {

template <class S>
using TensorOf = ad::TensorT<S>;
using Tensor = ad::TensorT<float>;

struct ModelConfig {
    int num_classes = 3;
    int d_model = 64;  // extractor output channels == proposal embedding dim
    int stages = 2;
    int heads = 2;
    int roi_size = 7;
    int dyn_rank = 16;
    int ffn_dim = 256;
    int time_dim = 64;

    void validate() const {
        if (num_classes < 1) throw std::invalid_argument("model: num_classes must be >= 1");
        if (d_model % heads != 0) throw std::invalid_argument("model: heads must divide d_model");
        if (stages < 1) throw std::invalid_argument("model: stages must be >= 1");
        if (roi_size < 1 || dyn_rank < 1 || ffn_dim < 1 || time_dim < 2 || time_dim % 2 != 0)
            throw std::invalid_argument("model: bad head dimensions");
    }
};

// Single-scale feature grid plus the geometry needed to map boxes onto it.
template <class S>
struct ImageFeaturesT {
    ad::TensorT<S> map;  // [channels, fh*fw]
    int channels = 0;
    int fh = 0, fw = 0;
    int stride = 8;
    int image_w = 0, image_h = 0;  // original (unpadded) pixel size
};
using ImageFeatures = ImageFeaturesT<float>;

struct DetectionOutput {
    BoxArray x0;                 // clean-signal estimate
    BoxArray xb;                 // the noisy input boxes, echoed for the sampler
    BoxArray x_box;              // normalized [0,1] cxcywh, clamped from x0
    Eigen::MatrixXd cls_logits;  // [n, C]

    int count() const { return static_cast<int>(x0.rows()); }

    std::vector<double> row_scores() const {
        std::vector<double> s(count());
        for (int i = 0; i < count(); ++i) {
            double m = cls_logits.row(i).maxCoeff();
            s[i] = 1.0 / (1.0 + std::exp(-m));
        }
        return s;
    }

    std::vector<Detection> to_detections() const {
        std::vector<Detection> dets(count());
        for (int i = 0; i < count(); ++i) {
            Eigen::Index best = 0;
            cls_logits.row(i).maxCoeff(&best);
            dets[i].box = Box{x_box(i, 0), x_box(i, 1), x_box(i, 2), x_box(i, 3)};
            dets[i].category = static_cast<int>(best);
            dets[i].score = 1.0 / (1.0 + std::exp(-cls_logits(i, best)));
        }
        return dets;
    }
};

// Renewal keyed on the decode's max class score (sigmoid of logits).
inline RenewalResult box_renewal(const DetectionOutput& pred, const ProposalSet& x_b, const ProposalSet& x_0,
                                 double b_th) {
    return box_renewal(pred.row_scores(), x_b, x_0, b_th);
}

// f_theta(x, sigma) = c_skip(sigma) * x + c_out(sigma) * F_theta(...), the
// skip-connection consistency parameterization. Scalar/batch double form.
inline BoxArray consistency_combine(const BoxArray& x_t, const BoxArray& f_raw, double c_skip, double c_out) {
    if (x_t.rows() != f_raw.rows()) throw std::invalid_argument("consistency_combine: row mismatch");
    return c_skip * x_t + c_out * f_raw;
}

namespace detail {

struct BilinearTap {
    int idx[4];
    float w[4];
};

// torchvision-style bilinear sample at (y, x) with zero outside [-1, size].
inline bool bilinear_taps(double y, double x, int h, int w, BilinearTap& tap) {
    if (y < -1.0 || y > h || x < -1.0 || x > w) return false;
    if (y <= 0) y = 0;
    if (x <= 0) x = 0;
    int y_low = static_cast<int>(y), x_low = static_cast<int>(x);
    int y_high, x_high;
    if (y_low >= h - 1) {
        y_high = y_low = h - 1;
        y = y_low;
    } else {
        y_high = y_low + 1;
    }
    if (x_low >= w - 1) {
        x_high = x_low = w - 1;
        x = x_low;
    } else {
        x_high = x_low + 1;
    }
    float ly = static_cast<float>(y - y_low), lx = static_cast<float>(x - x_low);
    float hy = 1.0f - ly, hx = 1.0f - lx;
    tap.idx[0] = y_low * w + x_low;
    tap.idx[1] = y_low * w + x_high;
    tap.idx[2] = y_high * w + x_low;
    tap.idx[3] = y_high * w + x_high;
    tap.w[0] = hy * hx;
    tap.w[1] = hy * lx;
    tap.w[2] = ly * hx;
    tap.w[3] = ly * lx;
    return true;
}

}  // namespace detail

// RoI-aligned crop of a [C, fh*fw] feature map for image-pixel xyxy boxes.
// Output row layout per proposal: (bin_y, bin_x, channel), i.e. a packed
// [pooled*pooled, C] matrix, 2x2 sample points per bin, aligned offsets.
template <class S>
ad::TensorT<S> roi_align(const ad::TensorT<S>& feat, int fh, int fw,
                         const std::vector<std::array<double, 4>>& rois, double spatial_scale, int pooled) {
    const int n = static_cast<int>(rois.size());
    const int channels = feat.rows();
    const int pp = pooled * pooled;
    constexpr int kSamples = 2;
    // (proposal, bin, sample) -> taps; recorded for the backward scatter.
    std::vector<detail::BilinearTap> taps(static_cast<size_t>(n) * pp * kSamples * kSamples);
    std::vector<uint8_t> valid(taps.size(), 0);
    for (int i = 0; i < n; ++i) {
        double x1 = rois[i][0] * spatial_scale - 0.5;
        double y1 = rois[i][1] * spatial_scale - 0.5;
        double x2 = rois[i][2] * spatial_scale - 0.5;
        double y2 = rois[i][3] * spatial_scale - 0.5;
        double bw = std::max(x2 - x1, 1e-6) / pooled;
        double bh = std::max(y2 - y1, 1e-6) / pooled;
        for (int py = 0; py < pooled; ++py) {
            for (int px = 0; px < pooled; ++px) {
                for (int sy = 0; sy < kSamples; ++sy) {
                    for (int sx = 0; sx < kSamples; ++sx) {
                        double y = y1 + (py + (sy + 0.5) / kSamples) * bh;
                        double x = x1 + (px + (sx + 0.5) / kSamples) * bw;
                        size_t t = ((static_cast<size_t>(i) * pp + py * pooled + px) * kSamples + sy) * kSamples + sx;
                        valid[t] = detail::bilinear_taps(y, x, fh, fw, taps[t]) ? 1 : 0;
                    }
                }
            }
        }
    }
    const S inv_count = S(1) / (kSamples * kSamples);
    auto out = ad::detail::make_result<S>(
        n, pp * channels, {feat.ptr()},
        [taps, valid, n, pp, channels, inv_count](ad::TensorImplT<S>& self) {
            auto& p = self.parents[0];
            p->ensure_grad();
            int grid = static_cast<int>(p->cols);
            for (int i = 0; i < n; ++i) {
                for (int b = 0; b < pp; ++b) {
                    const S* go = self.g.data() + (static_cast<size_t>(i) * pp + b) * channels;
                    for (int s = 0; s < kSamples * kSamples; ++s) {
                        size_t t = (static_cast<size_t>(i) * pp + b) * kSamples * kSamples + s;
                        if (!valid[t]) continue;
                        const auto& tap = taps[t];
                        for (int c = 0; c < channels; ++c) {
                            S g = go[c] * inv_count;
                            S* gc = p->g.data() + static_cast<size_t>(c) * grid;
                            for (int q = 0; q < 4; ++q) gc[tap.idx[q]] += g * static_cast<S>(tap.w[q]);
                        }
                    }
                }
            }
        });
    const int grid = fh * fw;
    for (int i = 0; i < n; ++i) {
        for (int b = 0; b < pp; ++b) {
            S* dst = out.data() + (static_cast<size_t>(i) * pp + b) * channels;
            std::fill(dst, dst + channels, S(0));
            for (int s = 0; s < kSamples * kSamples; ++s) {
                size_t t = (static_cast<size_t>(i) * pp + b) * kSamples * kSamples + s;
                if (!valid[t]) continue;
                const auto& tap = taps[t];
                for (int c = 0; c < channels; ++c) {
                    const S* fc = feat.data() + static_cast<size_t>(c) * grid;
                    S v = fc[tap.idx[0]] * static_cast<S>(tap.w[0]) + fc[tap.idx[1]] * static_cast<S>(tap.w[1]) +
                          fc[tap.idx[2]] * static_cast<S>(tap.w[2]) + fc[tap.idx[3]] * static_cast<S>(tap.w[3]);
                    dst[c] += v * inv_count;
                }
            }
        }
    }
    return out;
}

namespace detail {

// One head stage: SA -> dynamic interaction -> FFN -> time conditioning ->
// classification / regression branches.
template <class S>
struct HeadStageT {
    nn::SelfAttentionT<S> attn;
    nn::LayerNormT<S> norm_attn, norm_inter, norm_ffn;
    nn::LinearT<S> dyn_params, dyn_out;
    nn::LayerNormT<S> dyn_ln1, dyn_ln2, dyn_ln3;
    nn::LinearT<S> ffn1, ffn2;
    nn::LinearT<S> time_proj;
    nn::LinearT<S> cls_fc, cls_out;
    nn::LinearT<S> reg_fc1, reg_fc2, reg_out;

    HeadStageT() = default;
    HeadStageT(nn::ParamStoreT<S>& store, const std::string& prefix, const ModelConfig& cfg, int time_hidden,
               Rng& rng) {
        int d = cfg.d_model, r = cfg.dyn_rank, pp = cfg.roi_size * cfg.roi_size;
        attn = nn::SelfAttentionT<S>(store, prefix + ".attn", d, cfg.heads, rng);
        norm_attn = nn::LayerNormT<S>(store, prefix + ".ln_attn", d);
        dyn_params = nn::LinearT<S>(store, prefix + ".dyn_params", d, 2 * d * r, rng);
        dyn_ln1 = nn::LayerNormT<S>(store, prefix + ".dyn_ln1", r);
        dyn_ln2 = nn::LayerNormT<S>(store, prefix + ".dyn_ln2", d);
        dyn_out = nn::LinearT<S>(store, prefix + ".dyn_out", pp * d, d, rng);
        dyn_ln3 = nn::LayerNormT<S>(store, prefix + ".dyn_ln3", d);
        norm_inter = nn::LayerNormT<S>(store, prefix + ".ln_inter", d);
        ffn1 = nn::LinearT<S>(store, prefix + ".ffn1", d, cfg.ffn_dim, rng);
        ffn2 = nn::LinearT<S>(store, prefix + ".ffn2", cfg.ffn_dim, d, rng);
        norm_ffn = nn::LayerNormT<S>(store, prefix + ".ln_ffn", d);
        time_proj = nn::LinearT<S>(store, prefix + ".time_proj", time_hidden, 2 * d, rng);
        cls_fc = nn::LinearT<S>(store, prefix + ".cls_fc", d, d, rng);
        cls_out = nn::LinearT<S>(store, prefix + ".cls_out", d, cfg.num_classes, rng);
        // Focal-friendly prior: initial foreground probability ~ 0.01.
        S bias = static_cast<S>(-std::log((1.0 - 0.01) / 0.01));
        for (size_t i = 0; i < cls_out.b.size(); ++i) cls_out.b.data()[i] = bias;
        reg_fc1 = nn::LinearT<S>(store, prefix + ".reg_fc1", d, d, rng);
        reg_fc2 = nn::LinearT<S>(store, prefix + ".reg_fc2", d, d, rng);
        reg_out = nn::LinearT<S>(store, prefix + ".reg_out", d, 4, rng);
    }
};

inline constexpr double kDeltaClamp = 4.135166556742356;  // log(1000/16)

}  // namespace detail

template <class S>
class DetectorModelT {
public:
    using Tn = ad::TensorT<S>;

    DetectorModelT(const ModelConfig& cfg, const NoiseSchedule& schedule, uint64_t init_seed)
        : cfg_(cfg), schedule_(schedule) {
        cfg_.validate();
        schedule_.validate();
        Rng rng(splitmix64(init_seed ^ 0xc0ffee));
        int d = cfg_.d_model;
        conv1_ = nn::Conv2dT<S>(store_, "ext.conv1", 3, 16, 3, 2, 1, rng);
        conv2_ = nn::Conv2dT<S>(store_, "ext.conv2", 16, 32, 3, 2, 1, rng);
        conv3_ = nn::Conv2dT<S>(store_, "ext.conv3", 32, d, 3, 2, 1, rng);
        time_fc1_ = nn::LinearT<S>(store_, "time.fc1", cfg_.time_dim, time_hidden(), rng);
        time_fc2_ = nn::LinearT<S>(store_, "time.fc2", time_hidden(), time_hidden(), rng);
        stages_.reserve(cfg_.stages);
        for (int s = 0; s < cfg_.stages; ++s)
            stages_.emplace_back(store_, "head" + std::to_string(s), cfg_, time_hidden(), rng);
    }

    const ModelConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    nn::ParamStoreT<S>& params() { return store_; }
    const nn::ParamStoreT<S>& params() const { return store_; }
    int64_t decode_calls() const { return decode_calls_.load(); }
    void reset_decode_calls() { decode_calls_.store(0); }

    DetectorModelT(const DetectorModelT&) = delete;
    DetectorModelT& operator=(const DetectorModelT&) = delete;

    static constexpr int kStride = 8;

    // Pads to a stride multiple and runs the three conv blocks.
    ImageFeaturesT<S> extract_features(const ImageU8& image) const {
        if (image.empty()) throw std::invalid_argument("extract_features: empty image");
        int ph = ((image.height + kStride - 1) / kStride) * kStride;
        int pw = ((image.width + kStride - 1) / kStride) * kStride;
        Tn x = Tn::zeros(3, ph * pw);
        for (int c = 0; c < 3; ++c) {
            S* dst = x.data() + static_cast<size_t>(c) * ph * pw;
            for (int y = 0; y < image.height; ++y)
                for (int xx = 0; xx < image.width; ++xx)
                    dst[y * pw + xx] = static_cast<S>(image.at(xx, y, c)) / S(255) - S(0.5);
        }
        auto h1 = ad::relu(conv1_(x, ph, pw));
        auto h2 = ad::relu(conv2_(h1, ph / 2, pw / 2));
        auto h3 = ad::relu(conv3_(h2, ph / 4, pw / 4));
        ImageFeaturesT<S> f;
        f.map = h3;
        f.channels = cfg_.d_model;
        f.fh = ph / kStride;
        f.fw = pw / kStride;
        f.stride = kStride;
        f.image_w = image.width;
        f.image_h = image.height;
        return f;
    }

    struct RawOutput {
        Tn f_box_signal;  // [n,4] network box output in signal space
        Tn logits;        // [n,C]
    };

    // F_theta: the free-form network. Input boxes must already carry the
    // c_in/2 scaling; sigma conditions the head via the time embedding.
    RawOutput raw_forward(const ImageFeaturesT<S>& feat, const BoxArray& scaled_boxes, double sigma) const {
        ++decode_calls_;
        int n = static_cast<int>(scaled_boxes.rows());
        if (n == 0) {
            return {Tn::zeros(0, 4), Tn::zeros(0, cfg_.num_classes)};
        }
        Tn temb = time_embedding(sigma);
        temb = time_fc2_(ad::silu(time_fc1_(temb)));

        // Pooling boxes: (scaled + 1)/2 -> normalized cxcywh -> pixel xyxy.
        std::vector<std::array<double, 4>> rois = pooling_rois(scaled_boxes, feat);
        int pp = cfg_.roi_size * cfg_.roi_size;
        int d = cfg_.d_model;

        Tn pro;  // [n, d]
        Tn logits, boxes_px;
        std::vector<std::array<double, 4>> cur_rois = rois;
        for (int si = 0; si < cfg_.stages; ++si) {
            const auto& st = stages_[si];
            Tn roi = roi_align<S>(feat.map, feat.fh, feat.fw, cur_rois, 1.0 / feat.stride, cfg_.roi_size);
            if (si == 0) {
                // Initial proposal embedding: spatial mean of the RoI crop.
                Tn ones = Tn::full(n, pp, S(1) / pp);
                pro = ad::bmm(ones, roi, 1, pp, d);
            }
            pro = st.norm_attn(ad::add(pro, st.attn(pro)));

            auto dyn_p = st.dyn_params(pro);
            auto p1 = ad::slice_cols(dyn_p, 0, d * cfg_.dyn_rank);
            auto p2 = ad::slice_cols(dyn_p, d * cfg_.dyn_rank, cfg_.dyn_rank * d);
            auto m1 = ad::bmm(roi, p1, pp, d, cfg_.dyn_rank);
            m1 = ad::relu(st.dyn_ln1(ad::reshape(m1, n * pp, cfg_.dyn_rank)));
            auto m2 = ad::bmm(ad::reshape(m1, n, pp * cfg_.dyn_rank), p2, pp, cfg_.dyn_rank, d);
            m2 = ad::relu(st.dyn_ln2(ad::reshape(m2, n * pp, d)));
            auto inter = ad::relu(st.dyn_ln3(st.dyn_out(ad::reshape(m2, n, pp * d))));
            pro = st.norm_inter(ad::add(pro, inter));

            auto ffn = st.ffn2(ad::relu(st.ffn1(pro)));
            pro = st.norm_ffn(ad::add(pro, ffn));

            auto ss = st.time_proj(ad::silu(temb));  // [1, 2d]
            auto sc = ad::slice_cols(ss, 0, d);
            auto sh = ad::slice_cols(ss, d, d);
            pro = ad::add_rowvec(ad::mul_rowvec(pro, ad::add_scalar(sc, S(1))), sh);

            logits = st.cls_out(ad::relu(st.cls_fc(pro)));
            auto reg = ad::relu(st.reg_fc2(ad::relu(st.reg_fc1(pro))));
            boxes_px = apply_deltas(st.reg_out(reg), cur_rois);
            if (si + 1 < cfg_.stages) cur_rois = sanitize_rois(boxes_px);
        }

        // Pixel xyxy -> normalized cxcywh -> signal space.
        auto x1 = ad::slice_cols(boxes_px, 0, 1);
        auto y1 = ad::slice_cols(boxes_px, 1, 1);
        auto x2 = ad::slice_cols(boxes_px, 2, 1);
        auto y2 = ad::slice_cols(boxes_px, 3, 1);
        auto cxn = ad::scale(ad::add(x1, x2), S(0.5));
        auto cyn = ad::scale(ad::add(y1, y2), S(0.5));
        auto wn = ad::sub(x2, x1);
        auto hn = ad::sub(y2, y1);
        Tn inv_size = Tn::zeros(1, 4);
        inv_size.data()[0] = S(1) / feat.image_w;
        inv_size.data()[1] = S(1) / feat.image_h;
        inv_size.data()[2] = S(1) / feat.image_w;
        inv_size.data()[3] = S(1) / feat.image_h;
        auto b01 = ad::mul_rowvec(ad::concat_cols<S>({cxn, cyn, wn, hn}), inv_size);
        auto f_box = ad::add_scalar(ad::scale(b01, S(2)), S(-1));
        return {f_box, logits};
    }

    struct TrainOutput {
        Tn x0_signal;  // [n,4], carries gradients
        Tn logits;     // [n,C]
        BoxArray x0_value;
        Eigen::MatrixXd logits_value;
    };

    // Training-path f_theta: consistency combination kept on the tape.
    TrainOutput forward_train(const ImageFeaturesT<S>& feat, const ProposalSet& x_t) const {
        check_sigma(x_t.sigma);
        auto [c_skip, c_out] = schedule_.c_skip_out(x_t.sigma);
        BoxArray scaled = x_t.boxes * (schedule_.c_in(x_t.sigma) / 2.0);
        RawOutput raw = raw_forward(feat, scaled, x_t.sigma);
        Tn xt_const = Tn::from_matrix(x_t.boxes);
        Tn x0 = ad::add(ad::scale(xt_const, static_cast<S>(c_skip)),
                        ad::scale(raw.f_box_signal, static_cast<S>(c_out)));
        TrainOutput out;
        out.x0_signal = x0;
        out.logits = raw.logits;
        out.x0_value.resize(x0.rows(), 4);
        for (int i = 0; i < x0.rows(); ++i)
            for (int c = 0; c < 4; ++c) out.x0_value(i, c) = x0.at(i, c);
        out.logits_value.resize(raw.logits.rows(), raw.logits.cols());
        for (int i = 0; i < raw.logits.rows(); ++i)
            for (int c = 0; c < raw.logits.cols(); ++c) out.logits_value(i, c) = raw.logits.at(i, c);
        return out;
    }

    // Inference-path f_theta: no tape, combination in double precision so
    // the sigma_min boundary is the exact identity.
    DetectionOutput decode(const ImageFeaturesT<S>& feat, const ProposalSet& x_t) const {
        ad::NoGrad ng;
        check_sigma(x_t.sigma);
        auto [c_skip, c_out] = schedule_.c_skip_out(x_t.sigma);
        BoxArray scaled = x_t.boxes * (schedule_.c_in(x_t.sigma) / 2.0);
        RawOutput raw = raw_forward(feat, scaled, x_t.sigma);
        int n = x_t.count();
        BoxArray f_raw(n, 4);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < 4; ++c) f_raw(i, c) = raw.f_box_signal.at(i, c);
        DetectionOutput out;
        out.x0 = consistency_combine(x_t.boxes, f_raw, c_skip, c_out);
        out.xb = x_t.boxes;
        out.x_box.resize(n, 4);
        for (int i = 0; i < n; ++i) {
            Box b = box_from_signal_row(out.x0, i);
            out.x_box(i, 0) = b.cx;
            out.x_box(i, 1) = b.cy;
            out.x_box(i, 2) = b.w;
            out.x_box(i, 3) = b.h;
        }
        out.cls_logits.resize(n, cfg_.num_classes);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < cfg_.num_classes; ++c) out.cls_logits(i, c) = raw.logits.at(i, c);
        return out;
    }

private:
    int time_hidden() const { return 4 * cfg_.d_model; }

    void check_sigma(double sigma) const {
        if (sigma < schedule_.sigma_min || sigma > schedule_.sigma_max)
            throw std::domain_error("decode: sigma outside [sigma_min, sigma_max]");
    }

    // Sinusoidal embedding of log(sigma)/4, spread across the band.
    Tn time_embedding(double sigma) const {
        int half = cfg_.time_dim / 2;
        double pos = 100.0 * std::log(sigma) / 4.0;
        Tn t = Tn::zeros(1, cfg_.time_dim);
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            t.data()[2 * i] = static_cast<S>(std::sin(pos * freq));
            t.data()[2 * i + 1] = static_cast<S>(std::cos(pos * freq));
        }
        return t;
    }

    std::vector<std::array<double, 4>> pooling_rois(const BoxArray& scaled_boxes, const ImageFeaturesT<S>& feat) const {
        int n = static_cast<int>(scaled_boxes.rows());
        std::vector<std::array<double, 4>> rois(n);
        for (int i = 0; i < n; ++i) {
            double cx = (scaled_boxes(i, 0) + 1.0) / 2.0 * feat.image_w;
            double cy = (scaled_boxes(i, 1) + 1.0) / 2.0 * feat.image_h;
            double w = std::max((scaled_boxes(i, 2) + 1.0) / 2.0 * feat.image_w, 1.0);
            double h = std::max((scaled_boxes(i, 3) + 1.0) / 2.0 * feat.image_h, 1.0);
            rois[i] = {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
        }
        return rois;
    }

    // Classic (dx, dy, dw, dh) refinement with weights (2,2,1,1) applied to
    // the stage's input boxes; returns pixel xyxy as a tensor.
    Tn apply_deltas(const Tn& deltas, const std::vector<std::array<double, 4>>& base) const {
        int n = deltas.rows();
        Tn cx = Tn::zeros(n, 1), cy = Tn::zeros(n, 1), w = Tn::zeros(n, 1), h = Tn::zeros(n, 1);
        for (int i = 0; i < n; ++i) {
            cx.data()[i] = static_cast<S>((base[i][0] + base[i][2]) / 2);
            cy.data()[i] = static_cast<S>((base[i][1] + base[i][3]) / 2);
            w.data()[i] = static_cast<S>(std::max(base[i][2] - base[i][0], 1.0));
            h.data()[i] = static_cast<S>(std::max(base[i][3] - base[i][1], 1.0));
        }
        auto dx = ad::scale(ad::slice_cols(deltas, 0, 1), S(0.5));
        auto dy = ad::scale(ad::slice_cols(deltas, 1, 1), S(0.5));
        auto dw = ad::min_scalar(ad::slice_cols(deltas, 2, 1), static_cast<S>(detail::kDeltaClamp));
        auto dh = ad::min_scalar(ad::slice_cols(deltas, 3, 1), static_cast<S>(detail::kDeltaClamp));
        auto pcx = ad::add(ad::mul(dx, w), cx);
        auto pcy = ad::add(ad::mul(dy, h), cy);
        auto pw = ad::mul(ad::exp_t(dw), w);
        auto ph = ad::mul(ad::exp_t(dh), h);
        auto x1 = ad::sub(pcx, ad::scale(pw, S(0.5)));
        auto y1 = ad::sub(pcy, ad::scale(ph, S(0.5)));
        auto x2 = ad::add(pcx, ad::scale(pw, S(0.5)));
        auto y2 = ad::add(pcy, ad::scale(ph, S(0.5)));
        return ad::concat_cols<S>({x1, y1, x2, y2});
    }

    // Detached, degenerate-safe boxes for the next stage's pooling.
    std::vector<std::array<double, 4>> sanitize_rois(const Tn& boxes_px) const {
        std::vector<std::array<double, 4>> out(boxes_px.rows());
        for (int i = 0; i < boxes_px.rows(); ++i) {
            double x1 = boxes_px.at(i, 0), y1 = boxes_px.at(i, 1);
            double x2 = boxes_px.at(i, 2), y2 = boxes_px.at(i, 3);
            if (x2 < x1) std::swap(x1, x2);
            if (y2 < y1) std::swap(y1, y2);
            out[i] = {x1, y1, std::max(x2, x1 + 1.0), std::max(y2, y1 + 1.0)};
        }
        return out;
    }

    ModelConfig cfg_;
    NoiseSchedule schedule_;
    nn::ParamStoreT<S> store_;
    nn::Conv2dT<S> conv1_, conv2_, conv3_;
    nn::LinearT<S> time_fc1_, time_fc2_;
    std::vector<detail::HeadStageT<S>> stages_;
    mutable std::atomic<int64_t> decode_calls_{0};
};

using DetectorModel = DetectorModelT<float>;

}  // namespace condet
