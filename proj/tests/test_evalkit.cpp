#include <catch2/catch_amalgamated.hpp>

#include "condet/common.hpp"
#include "condet/evalkit.hpp"

using condet::Box;
using condet::DatasetRecord;
using condet::Detection;
using condet::EvalReport;
using condet::GtObject;
using condet::Rng;

namespace {

DatasetRecord record_with(int64_t id, std::vector<GtObject> gt, int size = 640) {
    DatasetRecord rec;
    rec.id = id;
    rec.image.width = size;
    rec.image.height = size;
    rec.gt = std::move(gt);
    return rec;
}

// Independent small-case evaluator: explicit per-threshold greedy matching
// and a literal 101-point sweep, single area range, no maxDets cap.
double oracle_ap_at(const std::vector<std::vector<Detection>>& dets, const std::vector<DatasetRecord>& gt,
                    int category, double thr) {
    struct Row {
        double score;
        int image, index;
        Box box;
    };
    std::vector<Row> rows;
    int npos = 0;
    for (size_t im = 0; im < gt.size(); ++im) {
        for (size_t k = 0; k < dets[im].size(); ++k)
            if (dets[im][k].category == category)
                rows.push_back({dets[im][k].score, static_cast<int>(im), static_cast<int>(k), dets[im][k].box});
        for (const auto& g : gt[im].gt)
            if (g.category == category) ++npos;
    }
    if (npos == 0) return -1.0;
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image != b.image) return a.image < b.image;
        return a.index < b.index;
    });
    std::vector<std::vector<char>> used(gt.size());
    for (size_t im = 0; im < gt.size(); ++im) used[im].assign(gt[im].gt.size(), 0);
    std::vector<char> is_tp;
    for (const auto& r : rows) {
        int best = -1;
        double best_iou = thr;
        for (size_t g = 0; g < gt[r.image].gt.size(); ++g) {
            if (gt[r.image].gt[g].category != category || used[r.image][g]) continue;
            double v = condet::iou(r.box, gt[r.image].gt[g].box);
            if (v >= best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            used[r.image][best] = 1;
            is_tp.push_back(1);
        } else {
            is_tp.push_back(0);
        }
    }
    std::vector<double> prec, rec;
    int tp = 0, fp = 0;
    for (char t : is_tp) {
        t ? ++tp : ++fp;
        prec.push_back(static_cast<double>(tp) / (tp + fp));
        rec.push_back(static_cast<double>(tp) / npos);
    }
    for (int i = static_cast<int>(prec.size()) - 2; i >= 0; --i) prec[i] = std::max(prec[i], prec[i + 1]);
    double ap = 0;
    for (int r = 0; r <= 100; ++r) {
        double target = r / 100.0;
        double best = 0;
        for (size_t i = 0; i < rec.size(); ++i)
            if (rec[i] >= target) {
                best = prec[i];
                break;
            }
        ap += best;
    }
    return ap / 101.0;
}

double oracle_mean_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<DatasetRecord>& gt,
                      int num_classes) {
    double acc = 0;
    int count = 0;
    for (int c = 0; c < num_classes; ++c) {
        for (int t = 0; t < 10; ++t) {
            double ap = oracle_ap_at(dets, gt, c, 0.5 + 0.05 * t);
            if (ap >= 0) {
                acc += ap;
                ++count;
            }
        }
    }
    return count ? acc / count : 0.0;
}

}  // namespace

TEST_CASE("perfect single detection scores AP 1.0") {
    std::vector<DatasetRecord> gt = {record_with(0, {{Box{0.5, 0.5, 0.2, 0.2}, 0}})};
    std::vector<std::vector<Detection>> dets = {{{Box{0.5, 0.5, 0.2, 0.2}, 0, 0.9}}};
    auto rep = condet::evaluate(dets, gt);
    CHECK(rep.ap == Catch::Approx(1.0).margin(1e-12));
    CHECK(rep.ap50 == Catch::Approx(1.0).margin(1e-12));
    CHECK(rep.ap75 == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("zero detections scores zero everywhere") {
    std::vector<DatasetRecord> gt = {record_with(0, {{Box{0.5, 0.5, 0.2, 0.2}, 0}})};
    std::vector<std::vector<Detection>> dets = {{}};
    auto rep = condet::evaluate(dets, gt);
    CHECK(rep.ap == 0.0);
    CHECK(rep.ap50 == 0.0);
    CHECK(rep.ap75 == 0.0);
}

TEST_CASE("recall-limited AP50 with 2 GT and 1 perfect detection") {
    std::vector<DatasetRecord> gt = {
        record_with(0, {{Box{0.3, 0.3, 0.2, 0.2}, 0}, {Box{0.7, 0.7, 0.2, 0.2}, 0}})};
    std::vector<std::vector<Detection>> dets = {{{Box{0.3, 0.3, 0.2, 0.2}, 0, 0.9}}};
    auto rep = condet::evaluate(dets, gt);
    // precision 1 up to recall 0.5 -> 51 of 101 recall points
    CHECK(rep.ap50 == Catch::Approx(51.0 / 101.0).margin(1e-12));
}

TEST_CASE("duplicate detection of one GT counts as a false positive") {
    std::vector<DatasetRecord> gt = {
        record_with(0, {{Box{0.3, 0.3, 0.2, 0.2}, 0}, {Box{0.7, 0.7, 0.2, 0.2}, 0}})};
    std::vector<std::vector<Detection>> dets = {{
        {Box{0.3, 0.3, 0.2, 0.2}, 0, 0.9},  // TP
        {Box{0.3, 0.3, 0.2, 0.2}, 0, 0.8},  // duplicate -> FP
        {Box{0.7, 0.7, 0.2, 0.2}, 0, 0.7},  // TP
    }};
    auto rep = condet::evaluate(dets, gt);
    // envelope: precision 1 to recall .5, then 2/3 up to recall 1
    CHECK(rep.ap50 == Catch::Approx((51.0 + 50.0 * (2.0 / 3.0)) / 101.0).margin(1e-12));
}

TEST_CASE("agreement with the independent small-case oracle") {
    Rng rng(909);
    for (int trial = 0; trial < 30; ++trial) {
        int n_img = 1 + static_cast<int>(rng.uniform_int(0, 4));
        std::vector<DatasetRecord> gt;
        std::vector<std::vector<Detection>> dets(n_img);
        for (int im = 0; im < n_img; ++im) {
            int n_gt = static_cast<int>(rng.uniform_int(0, 4));
            std::vector<GtObject> objs;
            for (int g = 0; g < n_gt; ++g)
                objs.push_back({Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3),
                                    rng.uniform(0.05, 0.3)},
                                static_cast<int>(rng.uniform_int(0, 1))});
            gt.push_back(record_with(im, objs));
            int n_det = static_cast<int>(rng.uniform_int(0, 6));
            for (int d = 0; d < n_det; ++d) {
                Detection det;
                if (!objs.empty() && rng.uniform() < 0.6) {
                    const auto& src = objs[rng.uniform_int(0, static_cast<int64_t>(objs.size()) - 1)];
                    det.box = Box{src.box.cx + rng.uniform(-0.05, 0.05), src.box.cy + rng.uniform(-0.05, 0.05),
                                  src.box.w * rng.uniform(0.8, 1.2), src.box.h * rng.uniform(0.8, 1.2)};
                    det.category = src.category;
                } else {
                    det.box = Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3),
                                  rng.uniform(0.05, 0.3)};
                    det.category = static_cast<int>(rng.uniform_int(0, 1));
                }
                det.score = rng.uniform(0.1, 1.0);
                dets[im].push_back(det);
            }
        }
        auto rep = condet::evaluate(dets, gt);
        CHECK(rep.ap == Catch::Approx(oracle_mean_ap(dets, gt, 2)).margin(1e-6));
        double o50 = 0;
        int c50 = 0;
        for (int c = 0; c < 2; ++c) {
            double v = oracle_ap_at(dets, gt, c, 0.5);
            if (v >= 0) {
                o50 += v;
                ++c50;
            }
        }
        CHECK(rep.ap50 == Catch::Approx(c50 ? o50 / c50 : 0.0).margin(1e-6));
        CHECK(rep.ap <= rep.ap50 + 1e-12);
    }
}

TEST_CASE("image-order permutation invariance") {
    Rng rng(111);
    std::vector<DatasetRecord> gt;
    std::vector<std::vector<Detection>> dets(4);
    for (int im = 0; im < 4; ++im) {
        std::vector<GtObject> objs = {{Box{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), 0.2, 0.2}, im % 2}};
        gt.push_back(record_with(im, objs));
        dets[im].push_back({objs[0].box, objs[0].category, rng.uniform(0.5, 1.0)});
        dets[im].push_back({Box{0.1, 0.1, 0.1, 0.1}, objs[0].category, 0.4});
    }
    auto base = condet::evaluate(dets, gt);

    std::vector<DatasetRecord> gt_perm = {gt[2], gt[0], gt[3], gt[1]};
    std::vector<std::vector<Detection>> dets_perm = {dets[2], dets[0], dets[3], dets[1]};
    auto perm = condet::evaluate(dets_perm, gt_perm);
    CHECK(base.ap == Catch::Approx(perm.ap).margin(1e-12));
    CHECK(base.ap50 == Catch::Approx(perm.ap50).margin(1e-12));
}

TEST_CASE("area bins split by pixel size") {
    // 640x640 image: a 0.04 box is 25.6 px -> small; a 0.3 box is 192 px -> large
    std::vector<DatasetRecord> gt = {
        record_with(0, {{Box{0.25, 0.25, 0.04, 0.04}, 0}, {Box{0.7, 0.7, 0.3, 0.3}, 0}})};
    std::vector<std::vector<Detection>> dets = {{
        {Box{0.25, 0.25, 0.04, 0.04}, 0, 0.9},
        {Box{0.7, 0.7, 0.3, 0.3}, 0, 0.8},
    }};
    auto rep = condet::evaluate(dets, gt);
    CHECK(rep.ap_small == Catch::Approx(1.0).margin(1e-12));
    CHECK(rep.ap_large == Catch::Approx(1.0).margin(1e-12));
    CHECK(rep.ap_medium == 0.0);  // no medium GT anywhere
}

TEST_CASE("unknown image id in keyed detections is an error") {
    std::vector<DatasetRecord> gt = {record_with(7, {{Box{0.5, 0.5, 0.2, 0.2}, 0}})};
    std::map<int64_t, std::vector<Detection>> dets;
    dets[8] = {{Box{0.5, 0.5, 0.2, 0.2}, 0, 0.9}};
    CHECK_THROWS_WITH(condet::evaluate(dets, gt), Catch::Matchers::ContainsSubstring("unknown image id"));
}

TEST_CASE("eval report equality is usable for determinism checks") {
    std::vector<DatasetRecord> gt = {record_with(0, {{Box{0.5, 0.5, 0.2, 0.2}, 1}})};
    std::vector<std::vector<Detection>> dets = {{{Box{0.5, 0.5, 0.2, 0.2}, 1, 0.9}}};
    CHECK(condet::evaluate(dets, gt) == condet::evaluate(dets, gt));
}
