// Set-prediction matching (optimal one-to-one assignment) and the focal /
// L1 / GIoU detection loss, combined across the two consistency timesteps.
#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "condet/geometry.hpp"
#include "condet/tensor.hpp"

namespace condet {

struct LossWeights {
    double lambda_cls = 2.0;
    double lambda_l1 = 5.0;
    double lambda_giou = 2.0;

    void validate() const {
        if (!(lambda_cls > 0 && lambda_l1 > 0 && lambda_giou > 0))
            throw std::invalid_argument("loss weights must be strictly positive");
    }
};

inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kFocalGamma = 2.0;

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // (prediction index, gt index)
    std::vector<int> unmatched_preds;
};

// Jonker-Volgenant shortest augmenting path; returns for each of the m rows
// the assigned column (m <= n). Optimal for the given cost matrix.
inline std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost) {
    int m = static_cast<int>(cost.size());
    if (m == 0) return {};
    int n = static_cast<int>(cost[0].size());
    if (m > n) throw std::invalid_argument("solve_assignment: more rows than columns");
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(m + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= m; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = -1;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(m, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

// DETR-style focal matching cost for one (logit, target class) pair.
inline double focal_match_cost(double logit) {
    double p = 1.0 / (1.0 + std::exp(-logit));
    p = std::min(std::max(p, 1e-8), 1.0 - 1e-8);
    double pos = kFocalAlpha * std::pow(1.0 - p, kFocalGamma) * (-std::log(p));
    double neg = (1.0 - kFocalAlpha) * std::pow(p, kFocalGamma) * (-std::log(1.0 - p));
    return pos - neg;
}

// Pair cost: lambda_cls * focal + lambda_l1 * L1 + lambda_giou * (1 - giou),
// on normalized coordinates.
inline double pair_cost(const Box& pred, double logit_for_gt_class, const Box& gt, const LossWeights& w) {
    double l1 = std::abs(pred.cx - gt.cx) + std::abs(pred.cy - gt.cy) + std::abs(pred.w - gt.w) +
                std::abs(pred.h - gt.h);
    return w.lambda_cls * focal_match_cost(logit_for_gt_class) + w.lambda_l1 * l1 +
           w.lambda_giou * (1.0 - giou(pred, gt));
}

// Minimum-total-cost one-to-one assignment of GT boxes to predictions.
inline MatchResult match(const BoxArray& pred_boxes_norm, const Eigen::MatrixXd& logits,
                         const std::vector<GtObject>& gt, const LossWeights& weights) {
    int n = static_cast<int>(pred_boxes_norm.rows());
    int m = static_cast<int>(gt.size());
    if (m > n) throw std::invalid_argument("match: more GT boxes than predictions");
    MatchResult res;
    if (m > 0) {
        std::vector<std::vector<double>> cost(m, std::vector<double>(n));
        for (int g = 0; g < m; ++g) {
            for (int i = 0; i < n; ++i) {
                Box pb{pred_boxes_norm(i, 0), pred_boxes_norm(i, 1), pred_boxes_norm(i, 2), pred_boxes_norm(i, 3)};
                cost[g][i] = pair_cost(pb, logits(i, gt[g].category), gt[g].box, weights);
            }
        }
        auto assign = solve_assignment(cost);
        res.pairs.reserve(m);
        for (int g = 0; g < m; ++g) res.pairs.emplace_back(assign[g], g);
    }
    std::vector<char> used(n, 0);
    for (auto& [pi, gi] : res.pairs) used[pi] = 1;
    for (int i = 0; i < n; ++i)
        if (!used[i]) res.unmatched_preds.push_back(i);
    return res;
}

// Sigmoid focal loss over every (prediction, class) cell, summed and divided
// by `normalizer`. target_class[i] == -1 marks a background row.
template <class S>
ad::TensorT<S> sigmoid_focal_loss(const ad::TensorT<S>& logits, const std::vector<int>& target_class,
                                  S alpha, S gamma, S normalizer) {
    int n = logits.rows(), c = logits.cols();
    if (static_cast<int>(target_class.size()) != n)
        throw std::invalid_argument("sigmoid_focal_loss: target size mismatch");
    auto softplus = [](S z) { return std::log1p(std::exp(-std::abs(z))) + std::max(z, S(0)); };
    std::vector<S> x = logits.impl().v;
    auto out = ad::detail::make_result<S>(
        1, 1, {logits.ptr()},
        [x, target_class, alpha, gamma, normalizer, n, c](ad::TensorImplT<S>& self) {
            auto& p = self.parents[0];
            p->ensure_grad();
            S go = self.g[0] / normalizer;
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < c; ++j) {
                    S xi = x[static_cast<size_t>(i) * c + j];
                    S pr = S(1) / (S(1) + std::exp(-xi));
                    S g;
                    if (target_class[i] == j) {
                        g = alpha * std::pow(S(1) - pr, gamma) * (gamma * pr * std::log(std::max(pr, S(1e-12))) - (S(1) - pr));
                    } else {
                        g = (S(1) - alpha) * std::pow(pr, gamma) *
                            (pr - gamma * (S(1) - pr) * std::log(std::max(S(1) - pr, S(1e-12))));
                    }
                    p->g[static_cast<size_t>(i) * c + j] += go * g;
                }
            }
        });
    S acc = S(0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < c; ++j) {
            S xi = x[static_cast<size_t>(i) * c + j];
            S pr = S(1) / (S(1) + std::exp(-xi));
            if (target_class[i] == j) {
                acc += alpha * std::pow(S(1) - pr, gamma) * softplus(-xi);
            } else {
                acc += (S(1) - alpha) * std::pow(pr, gamma) * softplus(xi);
            }
        }
    }
    out.data()[0] = acc / normalizer;
    return out;
}

template <class S>
struct DetectionLossT {
    ad::TensorT<S> total;  // scalar on the tape
    double value = 0.0;
    double cls = 0.0;
    double l1 = 0.0;
    double giou = 0.0;
};

// Converts a clean-signal estimate to clamped normalized boxes on the tape
// (the from_signal_space map as tensor ops).
template <class S>
ad::TensorT<S> signal_to_normalized(const ad::TensorT<S>& x0_signal) {
    return ad::scale(ad::add_scalar(ad::clamp(x0_signal, S(-1), S(1)), S(1)), S(0.5));
}

// Focal over all predictions normalized by match count; L1 and GIoU
// averaged over matched pairs.
template <class S>
DetectionLossT<S> detection_loss(const ad::TensorT<S>& pred_boxes_norm, const ad::TensorT<S>& logits,
                                 const std::vector<GtObject>& gt, const MatchResult& match,
                                 const LossWeights& weights) {
    weights.validate();
    int n = pred_boxes_norm.rows();
    int n_match = static_cast<int>(match.pairs.size());
    S norm = static_cast<S>(std::max(1, n_match));

    std::vector<int> target(n, -1);
    for (auto& [pi, gi] : match.pairs) target[pi] = gt[gi].category;
    auto cls_loss = sigmoid_focal_loss(logits, target, static_cast<S>(kFocalAlpha), static_cast<S>(kFocalGamma), norm);

    DetectionLossT<S> out;
    ad::TensorT<S> l1_loss, giou_loss;
    if (n_match > 0) {
        std::vector<int> pidx(n_match);
        auto gtm = ad::TensorT<S>::zeros(n_match, 4);
        for (int k = 0; k < n_match; ++k) {
            pidx[k] = match.pairs[k].first;
            const Box& b = gt[match.pairs[k].second].box;
            gtm.data()[k * 4 + 0] = static_cast<S>(b.cx);
            gtm.data()[k * 4 + 1] = static_cast<S>(b.cy);
            gtm.data()[k * 4 + 2] = static_cast<S>(b.w);
            gtm.data()[k * 4 + 3] = static_cast<S>(b.h);
        }
        auto pm = ad::gather_rows(pred_boxes_norm, pidx);
        l1_loss = ad::scale(ad::sum_all(ad::abs_t(ad::sub(pm, gtm))), S(1) / norm);

        auto col = [](const ad::TensorT<S>& t, int j) { return ad::slice_cols(t, j, 1); };
        auto pcx = col(pm, 0), pcy = col(pm, 1), pw = col(pm, 2), ph = col(pm, 3);
        auto gcx = col(gtm, 0), gcy = col(gtm, 1), gw = col(gtm, 2), gh = col(gtm, 3);
        auto px1 = ad::sub(pcx, ad::scale(pw, S(0.5))), px2 = ad::add(pcx, ad::scale(pw, S(0.5)));
        auto py1 = ad::sub(pcy, ad::scale(ph, S(0.5))), py2 = ad::add(pcy, ad::scale(ph, S(0.5)));
        auto gx1 = ad::sub(gcx, ad::scale(gw, S(0.5))), gx2 = ad::add(gcx, ad::scale(gw, S(0.5)));
        auto gy1 = ad::sub(gcy, ad::scale(gh, S(0.5))), gy2 = ad::add(gcy, ad::scale(gh, S(0.5)));
        auto iw = ad::relu(ad::sub(ad::cmin(px2, gx2), ad::cmax(px1, gx1)));
        auto ih = ad::relu(ad::sub(ad::cmin(py2, gy2), ad::cmax(py1, gy1)));
        auto inter = ad::mul(iw, ih);
        auto uni = ad::sub(ad::add(ad::mul(pw, ph), ad::mul(gw, gh)), inter);
        auto hw = ad::sub(ad::cmax(px2, gx2), ad::cmin(px1, gx1));
        auto hh = ad::sub(ad::cmax(py2, gy2), ad::cmin(py1, gy1));
        auto hull = ad::mul(hw, hh);
        auto g = ad::sub(ad::div(inter, uni), ad::div(ad::sub(hull, uni), hull));
        giou_loss = ad::scale(ad::sum_all(ad::add_scalar(ad::neg(g), S(1))), S(1) / norm);
    } else {
        l1_loss = ad::TensorT<S>::zeros(1, 1);
        giou_loss = ad::TensorT<S>::zeros(1, 1);
    }

    out.total = ad::add(
        ad::add(ad::scale(cls_loss, static_cast<S>(weights.lambda_cls)), ad::scale(l1_loss, static_cast<S>(weights.lambda_l1))),
        ad::scale(giou_loss, static_cast<S>(weights.lambda_giou)));
    out.value = static_cast<double>(out.total.item());
    out.cls = static_cast<double>(cls_loss.item());
    out.l1 = static_cast<double>(l1_loss.item());
    out.giou = static_cast<double>(giou_loss.item());
    return out;
}

struct LossBreakdown {
    double total = 0.0;
    double cls = 0.0;
    double l1 = 0.0;
    double giou = 0.0;
};

// Plain-value detection loss for a decoded output (no tape); matching is
// recomputed internally unless one is supplied.
inline LossBreakdown evaluate_detection_loss(const BoxArray& pred_boxes_norm, const Eigen::MatrixXd& logits,
                                             const std::vector<GtObject>& gt, const LossWeights& weights,
                                             const MatchResult* fixed_match = nullptr) {
    ad::NoGrad ng;
    MatchResult m = fixed_match ? *fixed_match : match(pred_boxes_norm, logits, gt, weights);
    auto pb = ad::TensorT<double>::from_matrix(pred_boxes_norm);
    auto lg = ad::TensorT<double>::from_matrix(logits);
    auto dl = detection_loss<double>(pb, lg, gt, m, weights);
    return {dl.value, dl.cls, dl.l1, dl.giou};
}

// Eq-style dual-timestep loss: the two detection losses (each with its own
// independent matching) summed.
inline LossBreakdown consistency_loss(const BoxArray& boxes_t, const Eigen::MatrixXd& logits_t,
                                      const BoxArray& boxes_tm1, const Eigen::MatrixXd& logits_tm1,
                                      const std::vector<GtObject>& gt, const LossWeights& weights) {
    LossBreakdown a = evaluate_detection_loss(boxes_t, logits_t, gt, weights);
    LossBreakdown b = evaluate_detection_loss(boxes_tm1, logits_tm1, gt, weights);
    return {a.total + b.total, a.cls + b.cls, a.l1 + b.l1, a.giou + b.giou};
}

}  // namespace condet
