// Deterministic synthetic-shapes dataset and COCO-format annotation IO.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "condet/common.hpp"
#include "condet/geometry.hpp"
#include "condet/image.hpp"

namespace condet {

struct DatasetRecord {
    int64_t id = 0;
    ImageU8 image;
    std::vector<GtObject> gt;  // normalized cxcywh boxes, dense category ids
    std::string file_name;
};

enum class ShapeClass { kRectangle = 0, kEllipse = 1, kTriangle = 2 };

inline std::vector<std::string> shape_class_names(int num_classes) {
    static const std::vector<std::string> base = {"rectangle", "ellipse", "triangle"};
    std::vector<std::string> names;
    for (int i = 0; i < num_classes; ++i)
        names.push_back(i < static_cast<int>(base.size()) ? base[i] : "class_" + std::to_string(i));
    return names;
}

namespace detail {

// Low-frequency value noise for the textured background.
inline void fill_background(ImageU8& img, Rng& rng) {
    constexpr int kGrid = 5;
    double base[3];
    for (double& b : base) b = rng.uniform(70, 170);
    double knots[3][kGrid][kGrid];
    for (int c = 0; c < 3; ++c)
        for (int gy = 0; gy < kGrid; ++gy)
            for (int gx = 0; gx < kGrid; ++gx) knots[c][gy][gx] = rng.uniform(-40, 40);
    for (int y = 0; y < img.height; ++y) {
        double fy = static_cast<double>(y) / img.height * (kGrid - 1);
        int gy = std::min(static_cast<int>(fy), kGrid - 2);
        double ty = fy - gy;
        for (int x = 0; x < img.width; ++x) {
            double fx = static_cast<double>(x) / img.width * (kGrid - 1);
            int gx = std::min(static_cast<int>(fx), kGrid - 2);
            double tx = fx - gx;
            double grain = rng.uniform(-8, 8);
            for (int c = 0; c < 3; ++c) {
                double v00 = knots[c][gy][gx], v01 = knots[c][gy][gx + 1];
                double v10 = knots[c][gy + 1][gx], v11 = knots[c][gy + 1][gx + 1];
                double v = (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
                double px = base[c] + v + grain;
                img.at(x, y, c) = static_cast<uint8_t>(std::clamp(px, 0.0, 255.0));
            }
        }
    }
}

inline std::array<uint8_t, 3> contrast_color(const ImageU8& img, Rng& rng) {
    double mean = 0;
    for (int c = 0; c < 3; ++c) mean += img.at(img.width / 2, img.height / 2, c);
    mean /= 3.0;
    std::array<uint8_t, 3> col;
    for (auto& ch : col) {
        double v = mean > 120 ? rng.uniform(0, 70) : rng.uniform(185, 255);
        ch = static_cast<uint8_t>(v);
    }
    return col;
}

inline void fill_shape(ImageU8& img, ShapeClass cls, int x1, int y1, int x2, int y2,
                       const std::array<uint8_t, 3>& col, double apex_frac) {
    double cx = (x1 + x2) / 2.0, cy = (y1 + y2) / 2.0;
    double rx = (x2 - x1) / 2.0, ry = (y2 - y1) / 2.0;
    double apex_x = x1 + apex_frac * (x2 - x1);
    for (int y = y1; y < y2; ++y) {
        for (int x = x1; x < x2; ++x) {
            double px = x + 0.5, py = y + 0.5;
            bool inside = false;
            switch (cls) {
                case ShapeClass::kRectangle:
                    inside = true;
                    break;
                case ShapeClass::kEllipse: {
                    double dx = (px - cx) / rx, dy = (py - cy) / ry;
                    inside = dx * dx + dy * dy <= 1.0;
                    break;
                }
                case ShapeClass::kTriangle: {
                    // apex on the top edge, base along the bottom edge
                    double t = (py - y1) / std::max(y2 - y1, 1);
                    double left = apex_x + t * (x1 - apex_x);
                    double right = apex_x + t * (x2 - apex_x);
                    inside = px >= left && px <= right;
                    break;
                }
            }
            if (inside)
                for (int c = 0; c < 3; ++c) img.at(x, y, c) = col[c];
        }
    }
}

}  // namespace detail

// Deterministic per-record generation: record i depends only on
// (split_seed, i), never on count.
inline std::vector<DatasetRecord> generate_synthetic(uint64_t split_seed, int count, int image_size,
                                                     int max_objects, int num_classes) {
    if (count < 1) throw std::invalid_argument("generate_synthetic: count must be >= 1");
    if (num_classes < 1 || num_classes > 3)
        throw std::invalid_argument("generate_synthetic: num_classes must be in [1,3]");
    constexpr int kMinSide = 8;
    std::vector<DatasetRecord> records(count);
    Rng base(split_seed);
    for (int i = 0; i < count; ++i) {
        Rng rng = base.fork(static_cast<uint64_t>(i) + 1);
        DatasetRecord& rec = records[i];
        rec.id = i;
        rec.image = ImageU8::filled(image_size, image_size);
        detail::fill_background(rec.image, rng);
        int n_obj = max_objects == 0 ? 0 : static_cast<int>(rng.uniform_int(1, max_objects));
        for (int k = 0; k < n_obj; ++k) {
            int cls = static_cast<int>(rng.uniform_int(0, num_classes - 1));
            int max_side = std::max(kMinSide + 1, static_cast<int>(image_size * 0.45));
            int w = static_cast<int>(rng.uniform_int(kMinSide, max_side));
            int h = static_cast<int>(rng.uniform_int(kMinSide, max_side));
            int x1 = static_cast<int>(rng.uniform_int(1, image_size - w - 1));
            int y1 = static_cast<int>(rng.uniform_int(1, image_size - h - 1));
            auto col = detail::contrast_color(rec.image, rng);
            double apex = rng.uniform(0.25, 0.75);
            detail::fill_shape(rec.image, static_cast<ShapeClass>(cls), x1, y1, x1 + w, y1 + h, col, apex);
            GtObject obj;
            obj.box = Box::from_xyxy(static_cast<double>(x1) / image_size, static_cast<double>(y1) / image_size,
                                     static_cast<double>(x1 + w) / image_size,
                                     static_cast<double>(y1 + h) / image_size);
            obj.category = cls;
            rec.gt.push_back(obj);
        }
    }
    return records;
}

struct CategoryMap {
    std::map<int, int> to_dense;         // original id -> dense index
    std::vector<int> to_original;        // dense index -> original id
    std::vector<std::string> names;      // dense index -> name

    int num_classes() const { return static_cast<int>(to_original.size()); }
};

struct CocoDataset {
    std::vector<DatasetRecord> records;
    CategoryMap categories;
    int skipped_zero_area = 0;
};

// Reads a COCO-style annotation file; converts pixel [x,y,w,h] boxes to
// normalized cxcywh and remaps category ids to dense [0, C). Images are
// loaded from image_root when it is non-empty.
inline CocoDataset load_coco(const std::string& annotation_path, const std::string& image_root = "") {
    std::ifstream f(annotation_path);
    if (!f) throw std::runtime_error("load_coco: cannot open " + annotation_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("load_coco: " + annotation_path + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("images") || !j.contains("annotations") || !j.contains("categories"))
        throw std::runtime_error("load_coco: " + annotation_path +
                                 ": expected object with images/annotations/categories");

    CocoDataset ds;
    for (const auto& cat : j["categories"]) {
        if (!cat.contains("id")) throw std::runtime_error("load_coco: category without id");
        ds.categories.to_dense[cat["id"].get<int>()] = 0;  // fill after sort
    }
    for (auto& [orig, dense] : ds.categories.to_dense) {
        dense = static_cast<int>(ds.categories.to_original.size());
        ds.categories.to_original.push_back(orig);
        ds.categories.names.emplace_back();
    }
    for (const auto& cat : j["categories"]) {
        int dense = ds.categories.to_dense.at(cat["id"].get<int>());
        ds.categories.names[dense] = cat.value("name", "category_" + std::to_string(cat["id"].get<int>()));
    }

    std::map<int64_t, size_t> by_id;
    std::map<int64_t, std::pair<int, int>> sizes;
    for (const auto& im : j["images"]) {
        if (!im.contains("id") || !im.contains("width") || !im.contains("height"))
            throw std::runtime_error("load_coco: image entry missing id/width/height");
        DatasetRecord rec;
        rec.id = im["id"].get<int64_t>();
        rec.file_name = im.value("file_name", "");
        int w = im["width"].get<int>(), h = im["height"].get<int>();
        sizes[rec.id] = {w, h};
        if (!image_root.empty()) {
            auto path = std::filesystem::path(image_root) / rec.file_name;
            rec.image = read_ppm(path.string());
            if (rec.image.width != w || rec.image.height != h)
                throw std::runtime_error("load_coco: size mismatch for " + rec.file_name);
        } else {
            rec.image.width = w;  // size-only record; pixels not materialized
            rec.image.height = h;
        }
        by_id[rec.id] = ds.records.size();
        ds.records.push_back(std::move(rec));
    }

    for (const auto& ann : j["annotations"]) {
        if (!ann.contains("image_id") || !ann.contains("bbox") || !ann.contains("category_id"))
            throw std::runtime_error("load_coco: annotation missing image_id/bbox/category_id");
        int64_t image_id = ann["image_id"].get<int64_t>();
        auto it = by_id.find(image_id);
        if (it == by_id.end())
            throw std::runtime_error("load_coco: annotation references unknown image id " +
                                     std::to_string(image_id));
        auto bbox = ann["bbox"];
        if (!bbox.is_array() || bbox.size() != 4) throw std::runtime_error("load_coco: bbox must be [x,y,w,h]");
        double x = bbox[0].get<double>(), y = bbox[1].get<double>();
        double w = bbox[2].get<double>(), h = bbox[3].get<double>();
        if (w <= 0.0 || h <= 0.0) {
            ++ds.skipped_zero_area;
            continue;
        }
        int cat_orig = ann["category_id"].get<int>();
        auto cit = ds.categories.to_dense.find(cat_orig);
        if (cit == ds.categories.to_dense.end())
            throw std::runtime_error("load_coco: annotation references unknown category id " +
                                     std::to_string(cat_orig));
        auto [iw, ih] = sizes[image_id];
        GtObject obj;
        obj.box = Box{(x + w / 2) / iw, (y + h / 2) / ih, w / iw, h / ih};
        obj.category = cit->second;
        ds.records[it->second].gt.push_back(obj);
    }
    return ds;
}

// Writes records as PPM images plus a COCO-style annotation file.
inline std::string save_coco_dataset(const std::string& dir, const std::vector<DatasetRecord>& records,
                                     int num_classes) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["images"] = nlohmann::json::array();
    j["annotations"] = nlohmann::json::array();
    j["categories"] = nlohmann::json::array();
    auto names = shape_class_names(num_classes);
    for (int c = 0; c < num_classes; ++c)
        j["categories"].push_back({{"id", c + 1}, {"name", names[c]}});
    int64_t ann_id = 1;
    for (const auto& rec : records) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%06lld.ppm", static_cast<long long>(rec.id));
        std::string file_name = buf;
        write_ppm((std::filesystem::path(dir) / file_name).string(), rec.image);
        j["images"].push_back({{"id", rec.id},
                               {"file_name", file_name},
                               {"width", rec.image.width},
                               {"height", rec.image.height}});
        for (const auto& obj : rec.gt) {
            double x = obj.box.x1() * rec.image.width, y = obj.box.y1() * rec.image.height;
            double w = obj.box.w * rec.image.width, h = obj.box.h * rec.image.height;
            j["annotations"].push_back({{"id", ann_id++},
                                        {"image_id", rec.id},
                                        {"category_id", obj.category + 1},
                                        {"bbox", {x, y, w, h}},
                                        {"area", w * h},
                                        {"iscrowd", 0}});
        }
    }
    auto ann_path = (std::filesystem::path(dir) / "annotations.json").string();
    std::ofstream os(ann_path);
    os << j.dump(2) << "\n";
    if (!os) throw std::runtime_error("save_coco_dataset: write failed for " + ann_path);
    return ann_path;
}

}  // namespace condet
