// 8-bit RGB image container, binary PPM (P6) IO and box overlay drawing.
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "condet/geometry.hpp"

namespace condet {

struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel

    bool empty() const { return width <= 0 || height <= 0; }

    uint8_t& at(int x, int y, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    uint8_t at(int x, int y, int c) const { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }

    static ImageU8 filled(int w, int h, uint8_t v = 0) {
        ImageU8 img;
        img.width = w;
        img.height = h;
        img.rgb.assign(static_cast<size_t>(w) * h * 3, v);
        return img;
    }

    ImageU8 hflip() const {
        ImageU8 out = filled(width, height);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                for (int c = 0; c < 3; ++c) out.at(x, y, c) = at(width - 1 - x, y, c);
        return out;
    }
};

inline void write_ppm(const std::string& path, const ImageU8& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!f) throw std::runtime_error("write_ppm: write failed for " + path);
}

inline ImageU8 read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw std::runtime_error("read_ppm: " + path + " is not a binary PPM");
    auto next_int = [&]() {
        int v;
        f >> std::ws;
        while (f.peek() == '#') {
            std::string line;
            std::getline(f, line);
            f >> std::ws;
        }
        if (!(f >> v)) throw std::runtime_error("read_ppm: malformed header in " + path);
        return v;
    };
    int w = next_int(), h = next_int(), maxval = next_int();
    if (maxval != 255) throw std::runtime_error("read_ppm: only 8-bit PPM supported: " + path);
    f.get();  // single whitespace after header
    ImageU8 img = ImageU8::filled(w, h);
    f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
        throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    return img;
}

// Strokes a normalized-coordinate box outline; color cycles by category.
inline void draw_box(ImageU8& img, const Box& box, int category) {
    static constexpr std::array<std::array<uint8_t, 3>, 6> palette = {
        {{230, 60, 60}, {60, 200, 80}, {70, 110, 240}, {240, 200, 40}, {200, 70, 220}, {60, 210, 210}}};
    const auto& col = palette[static_cast<size_t>(category < 0 ? 0 : category) % palette.size()];
    int x1 = std::max(0, static_cast<int>(box.x1() * img.width));
    int y1 = std::max(0, static_cast<int>(box.y1() * img.height));
    int x2 = std::min(img.width - 1, static_cast<int>(box.x2() * img.width));
    int y2 = std::min(img.height - 1, static_cast<int>(box.y2() * img.height));
    if (x2 < x1 || y2 < y1) return;
    for (int x = x1; x <= x2; ++x)
        for (int c = 0; c < 3; ++c) {
            img.at(x, y1, c) = col[c];
            img.at(x, y2, c) = col[c];
        }
    for (int y = y1; y <= y2; ++y)
        for (int c = 0; c < 3; ++c) {
            img.at(x1, y, c) = col[c];
            img.at(x2, y, c) = col[c];
        }
}

}  // namespace condet
