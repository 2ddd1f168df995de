#pragma once

// Synthetic scene builders shared by the filter, pipeline, and acceptance
// suites.

#include <cstdio>
#include <filesystem>
#include <random>
#include <vector>

#include "cova/coco.hpp"
#include "cova/core.hpp"
#include "cova/io.hpp"

namespace fixtures {

inline cova::Frame solid(int w, int h, std::uint8_t v) {
    cova::Frame f;
    f.width = w;
    f.height = h;
    f.pixels.assign(static_cast<std::size_t>(w) * h * 3, v);
    return f;
}

inline void paint_rect(cova::Frame& f, int x0, int y0, int w, int h, std::uint8_t r,
                       std::uint8_t g, std::uint8_t b) {
    for (int y = std::max(0, y0); y < std::min(f.height, y0 + h); ++y)
        for (int x = std::max(0, x0); x < std::min(f.width, x0 + w); ++x) {
            auto* p = f.pixels.data() + (static_cast<std::size_t>(y) * f.width + x) * 3;
            p[0] = r;
            p[1] = g;
            p[2] = b;
        }
}

struct SquarePosition {
    int x, y;
};

// Bright square moving left to right over a dark background. Returns the
// frames and the square's top-left corner per frame.
inline std::pair<std::vector<cova::Frame>, std::vector<SquarePosition>> moving_square_scene(
    int frames, int w = 640, int h = 480, int square = 20, int step = 4,
    std::uint8_t bg = 30, std::uint8_t fg = 220) {
    std::vector<cova::Frame> out;
    std::vector<SquarePosition> pos;
    for (int i = 0; i < frames; ++i) {
        cova::Frame f = solid(w, h, bg);
        const int x = 40 + (i * step) % (w - square - 80);
        const int y = h / 2 - square / 2;
        paint_rect(f, x, y, square, square, fg, fg, fg);
        f.index = i;
        out.push_back(std::move(f));
        pos.push_back({x, y});
    }
    return {std::move(out), std::move(pos)};
}

inline std::vector<cova::Frame> constant_scene(int frames, int w = 64, int h = 48,
                                               std::uint8_t v = 90) {
    std::vector<cova::Frame> out;
    for (int i = 0; i < frames; ++i) {
        out.push_back(solid(w, h, v));
        out.back().index = i;
    }
    return out;
}

// Writes frames to dir as zero-padded PNGs and returns the file names in
// playback order (which matches lexicographic order).
inline std::vector<std::string> write_frames(const std::filesystem::path& dir,
                                             const std::vector<cova::Frame>& frames) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> names;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "f_%04zu.png", i);
        cova::write_png(dir / buf, frames[i]);
        names.emplace_back(buf);
    }
    return names;
}

// COCO ground truth with one labeled box per frame.
inline void write_single_object_gt(const std::filesystem::path& path,
                                   const std::vector<std::string>& names,
                                   const std::vector<cova::BoundingBox>& boxes,
                                   const std::vector<std::string>& labels,
                                   const cova::LabelMap& label_map, int width, int height) {
    cova::CocoDataset ds;
    ds.labels = label_map;
    for (std::size_t i = 0; i < names.size(); ++i) {
        cova::CocoImage im;
        im.id = int(i) + 1;
        im.file_name = names[i];
        im.width = width;
        im.height = height;
        ds.images.push_back(im);
        cova::CocoAnnotation a;
        a.id = int(i) + 1;
        a.image_id = im.id;
        a.category_id = label_map.id_of(labels[i]);
        a.box = boxes[i];
        ds.annotations.push_back(a);
    }
    cova::write_coco_json(path, ds);
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("cova_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace fixtures
