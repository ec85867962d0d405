// COCO-style average precision: 10 IoU thresholds, 101-point interpolated
// PR integration, area bins at 32^2 / 96^2 pixels, per-class table.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "condet/data.hpp"
#include "condet/geometry.hpp"

namespace condet {

struct EvalReport {
    double ap = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    double ap_small = 0.0;
    double ap_medium = 0.0;
    double ap_large = 0.0;
    std::vector<double> per_class;  // mean over IoU thresholds, all areas

    bool operator==(const EvalReport& other) const = default;
};

namespace detail {

inline constexpr int kMaxDets = 100;

struct EvalDet {
    double score;
    int image;   // index into the record list
    int index;   // insertion index within the image (stable tie-break)
    Box box;
    double area_px;
};

struct EvalGt {
    int image;
    Box box;
    double area_px;
};

// Greedy matching for one (class, area-range) slice at every IoU threshold;
// returns per-threshold (tp flags aligned with dets sorted by score) and the
// non-ignored GT count.
struct SliceResult {
    std::vector<std::vector<char>> tp;      // [thr][det]
    std::vector<std::vector<char>> ignore;  // [thr][det]
    int npig = 0;
};

inline SliceResult evaluate_slice(const std::vector<EvalDet>& dets_sorted, const std::vector<EvalGt>& gts,
                                  const std::vector<double>& thrs, double area_lo, double area_hi) {
    SliceResult res;
    // unignored GT first; greedy matching prefers them at equal eligibility
    std::vector<int> gt_order(gts.size());
    std::iota(gt_order.begin(), gt_order.end(), 0);
    auto ignored = [&](int g) { return gts[g].area_px < area_lo || gts[g].area_px > area_hi; };
    std::stable_sort(gt_order.begin(), gt_order.end(), [&](int a, int b) { return ignored(a) < ignored(b); });
    for (size_t g = 0; g < gts.size(); ++g)
        if (!ignored(static_cast<int>(g))) ++res.npig;

    res.tp.assign(thrs.size(), std::vector<char>(dets_sorted.size(), 0));
    res.ignore.assign(thrs.size(), std::vector<char>(dets_sorted.size(), 0));
    for (size_t ti = 0; ti < thrs.size(); ++ti) {
        std::vector<char> gt_used(gts.size(), 0);
        for (size_t d = 0; d < dets_sorted.size(); ++d) {
            double best_iou = thrs[ti];
            int m = -1;
            for (int g : gt_order) {
                if (gts[g].image != dets_sorted[d].image || gt_used[g]) continue;
                // once matched to an unignored GT, never trade for an ignored one
                if (m >= 0 && !ignored(m) && ignored(g)) break;
                double v = iou(dets_sorted[d].box, gts[g].box);
                if (v < best_iou) continue;
                best_iou = v;
                m = g;
            }
            if (m >= 0) {
                gt_used[m] = 1;
                if (ignored(m)) {
                    res.ignore[ti][d] = 1;
                } else {
                    res.tp[ti][d] = 1;
                }
            } else if (dets_sorted[d].area_px < area_lo || dets_sorted[d].area_px > area_hi) {
                // unmatched detection outside the bin does not count as FP
                res.ignore[ti][d] = 1;
            }
        }
    }
    return res;
}

// 101-point interpolated AP from (tp, ignore) flags over score-sorted dets.
inline double interpolated_ap(const std::vector<char>& tp, const std::vector<char>& ignore, int npig) {
    if (npig == 0) return -1.0;
    std::vector<double> precision, recall;
    int tp_cum = 0, fp_cum = 0;
    for (size_t d = 0; d < tp.size(); ++d) {
        if (ignore[d]) continue;
        if (tp[d]) {
            ++tp_cum;
        } else {
            ++fp_cum;
        }
        precision.push_back(static_cast<double>(tp_cum) / (tp_cum + fp_cum));
        recall.push_back(static_cast<double>(tp_cum) / npig);
    }
    // precision envelope, monotone non-increasing from the right
    for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
        precision[i] = std::max(precision[i], precision[i + 1]);
    double ap = 0;
    for (int r = 0; r <= 100; ++r) {
        double rec = r / 100.0;
        auto it = std::lower_bound(recall.begin(), recall.end(), rec);
        if (it != recall.end()) ap += precision[it - recall.begin()];
    }
    return ap / 101.0;
}

}  // namespace detail

// detections[i] pairs with ground_truth[i]; boxes normalized, areas taken
// from each record's pixel size. Unknown image ids are rejected by the
// id-keyed overload below.
inline EvalReport evaluate(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<DatasetRecord>& ground_truth) {
    if (detections.size() != ground_truth.size())
        throw std::invalid_argument("evaluate: detections/ground_truth length mismatch");
    std::vector<double> thrs;
    for (int i = 0; i < 10; ++i) thrs.push_back(0.5 + 0.05 * i);
    constexpr double kInf = std::numeric_limits<double>::infinity();
    const double kAreas[4][2] = {{0, kInf}, {0, 32.0 * 32.0}, {32.0 * 32.0, 96.0 * 96.0}, {96.0 * 96.0, kInf}};

    int num_classes = 0;
    for (const auto& rec : ground_truth)
        for (const auto& g : rec.gt) num_classes = std::max(num_classes, g.category + 1);
    for (const auto& dets : detections)
        for (const auto& d : dets) num_classes = std::max(num_classes, d.category + 1);

    EvalReport report;
    report.per_class.assign(num_classes, 0.0);
    if (num_classes == 0) return report;

    // ap[class][area][thr]
    std::vector<std::vector<std::vector<double>>> ap(
        num_classes, std::vector<std::vector<double>>(4, std::vector<double>(thrs.size(), -1.0)));

    for (int c = 0; c < num_classes; ++c) {
        std::vector<detail::EvalDet> dets;
        std::vector<detail::EvalGt> gts;
        for (size_t im = 0; im < ground_truth.size(); ++im) {
            const auto& rec = ground_truth[im];
            double px = static_cast<double>(rec.image.width) * rec.image.height;
            std::vector<detail::EvalDet> img_dets;
            for (size_t k = 0; k < detections[im].size(); ++k) {
                const Detection& d = detections[im][k];
                if (d.category != c) continue;
                img_dets.push_back({d.score, static_cast<int>(im), static_cast<int>(k), d.box, d.box.area() * px});
            }
            std::stable_sort(img_dets.begin(), img_dets.end(),
                             [](const auto& a, const auto& b) { return a.score > b.score; });
            if (static_cast<int>(img_dets.size()) > detail::kMaxDets) img_dets.resize(detail::kMaxDets);
            dets.insert(dets.end(), img_dets.begin(), img_dets.end());
            for (const auto& g : rec.gt)
                if (g.category == c) gts.push_back({static_cast<int>(im), g.box, g.box.area() * px});
        }
        std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.image != b.image) return a.image < b.image;
            return a.index < b.index;
        });
        for (int a = 0; a < 4; ++a) {
            auto slice = detail::evaluate_slice(dets, gts, thrs, kAreas[a][0], kAreas[a][1]);
            for (size_t ti = 0; ti < thrs.size(); ++ti)
                ap[c][a][ti] = detail::interpolated_ap(slice.tp[ti], slice.ignore[ti], slice.npig);
        }
    }

    auto mean_over = [&](int area, int thr_index) {  // thr_index < 0: all thresholds
        double acc = 0;
        int count = 0;
        for (int c = 0; c < num_classes; ++c) {
            for (size_t ti = 0; ti < thrs.size(); ++ti) {
                if (thr_index >= 0 && static_cast<int>(ti) != thr_index) continue;
                if (ap[c][area][ti] < 0) continue;
                acc += ap[c][area][ti];
                ++count;
            }
        }
        return count > 0 ? acc / count : 0.0;
    };
    report.ap = mean_over(0, -1);
    report.ap50 = mean_over(0, 0);
    report.ap75 = mean_over(0, 5);
    report.ap_small = mean_over(1, -1);
    report.ap_medium = mean_over(2, -1);
    report.ap_large = mean_over(3, -1);
    for (int c = 0; c < num_classes; ++c) {
        double acc = 0;
        int count = 0;
        for (size_t ti = 0; ti < thrs.size(); ++ti)
            if (ap[c][0][ti] >= 0) {
                acc += ap[c][0][ti];
                ++count;
            }
        report.per_class[c] = count > 0 ? acc / count : 0.0;
    }
    return report;
}

// Id-keyed detections; every key must reference a known image id.
inline EvalReport evaluate(const std::map<int64_t, std::vector<Detection>>& detections_by_id,
                           const std::vector<DatasetRecord>& ground_truth) {
    std::map<int64_t, size_t> by_id;
    for (size_t i = 0; i < ground_truth.size(); ++i) by_id[ground_truth[i].id] = i;
    std::vector<std::vector<Detection>> aligned(ground_truth.size());
    for (const auto& [id, dets] : detections_by_id) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw std::invalid_argument("evaluate: detections reference unknown image id " + std::to_string(id));
        aligned[it->second] = dets;
    }
    return evaluate(aligned, ground_truth);
}

}  // namespace condet
