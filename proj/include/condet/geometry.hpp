// Box representation, signal-space transforms, IoU/GIoU and per-class NMS.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "condet/common.hpp"

namespace condet {

// Center/size box. Clean boxes live in normalized [0,1] image coordinates.
struct Box {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;

    double x1() const { return cx - 0.5 * w; }
    double y1() const { return cy - 0.5 * h; }
    double x2() const { return cx + 0.5 * w; }
    double y2() const { return cy + 0.5 * h; }
    double area() const { return w * h; }

    static Box from_xyxy(double x1, double y1, double x2, double y2) {
        return {0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
    }
};

struct Detection {
    Box box;
    int category = 0;
    double score = 0.0;
};

struct GtObject {
    Box box;
    int category = 0;
};

// Affine map [0,1] -> [-1,1] per coordinate, so clean boxes have roughly
// sigma_data = 0.5 standard deviation in signal space.
inline std::array<double, 4> to_signal_space(const Box& b) {
    return {2.0 * b.cx - 1.0, 2.0 * b.cy - 1.0, 2.0 * b.w - 1.0, 2.0 * b.h - 1.0};
}

// Inverse of to_signal_space. Clamps each coordinate to [-1,1] first and
// floors w,h at 0, so the result is always a valid clean box.
inline Box from_signal_space(const std::array<double, 4>& s) {
    auto clamp1 = [](double v) { return std::clamp(v, -1.0, 1.0); };
    Box b{0.5 * (clamp1(s[0]) + 1.0), 0.5 * (clamp1(s[1]) + 1.0),
          0.5 * (clamp1(s[2]) + 1.0), 0.5 * (clamp1(s[3]) + 1.0)};
    b.w = std::max(b.w, 0.0);
    b.h = std::max(b.h, 0.0);
    return b;
}

inline BoxArray boxes_to_signal(const std::vector<Box>& boxes) {
    BoxArray out(static_cast<int>(boxes.size()), 4);
    for (size_t i = 0; i < boxes.size(); ++i) {
        auto s = to_signal_space(boxes[i]);
        for (int j = 0; j < 4; ++j) out(static_cast<int>(i), j) = s[j];
    }
    return out;
}

inline Box box_from_signal_row(const BoxArray& m, int row) {
    return from_signal_space({m(row, 0), m(row, 1), m(row, 2), m(row, 3)});
}

inline double intersection_area(const Box& a, const Box& b) {
    double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
    double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    return iw * ih;
}

inline double iou(const Box& a, const Box& b) {
    double inter = intersection_area(a, b);
    double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

// GIoU = IoU - (hull - union) / hull. Both boxes degenerate -> 0.
inline double giou(const Box& a, const Box& b) {
    if (a.area() <= 0.0 && b.area() <= 0.0) return 0.0;
    double inter = intersection_area(a, b);
    double uni = a.area() + b.area() - inter;
    double hw = std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1());
    double hh = std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1());
    double hull = hw * hh;
    double v = (uni > 0.0 ? inter / uni : 0.0);
    if (hull > 0.0) v -= (hull - uni) / hull;
    return v;
}

// Greedy per-class suppression: a box is dropped iff a higher-scoring kept
// box of the same class overlaps it with IoU > iou_threshold. Ties broken
// by input index; output sorted by score descending.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
    std::vector<int> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return dets[i].score > dets[j].score; });
    std::vector<Detection> kept;
    kept.reserve(dets.size());
    for (int idx : order) {
        const Detection& d = dets[idx];
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.category == d.category && iou(k.box, d.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

}  // namespace condet
