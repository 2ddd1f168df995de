#pragma once

// Shared domain types for the specialization pipeline plus exact
// bounding-box geometry. Everything here is an immutable value type and
// every operation is a pure function.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cova {

struct BoundingBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    bool valid() const { return x_min <= x_max && y_min <= y_max; }

    bool operator==(const BoundingBox&) const = default;
};

struct Detection {
    BoundingBox box;
    std::string label;
    double score = 0.0;
};

struct GroundTruthObject {
    BoundingBox box;
    std::string label;
};

struct Frame {
    std::string stream_id;
    std::string name;  // per-frame identity (e.g. source file name); the
                       // key the annotation stage sends as the frame id
    std::int64_t index = 0;
    std::int64_t timestamp_ms = 0;
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // H*W*3, interleaved RGB

    bool valid() const {
        return width > 0 && height > 0 &&
               pixels.size() == static_cast<std::size_t>(width) * height * 3;
    }
};

class LabelMap {
public:
    LabelMap() = default;

    // Names are assigned contiguous ids starting at 1, in the order given.
    explicit LabelMap(const std::vector<std::string>& names) {
        for (const auto& n : names) add(n);
    }

    int add(const std::string& name) {
        if (contains(name)) throw std::invalid_argument("duplicate label: " + name);
        entries_.push_back(name);
        return static_cast<int>(entries_.size());
    }

    bool contains(const std::string& name) const {
        return std::find(entries_.begin(), entries_.end(), name) != entries_.end();
    }

    int id_of(const std::string& name) const {
        auto it = std::find(entries_.begin(), entries_.end(), name);
        if (it == entries_.end()) throw std::out_of_range("unknown label: " + name);
        return static_cast<int>(it - entries_.begin()) + 1;
    }

    const std::string& name_of(int id) const {
        if (id < 1 || id > static_cast<int>(entries_.size()))
            throw std::out_of_range("unknown class id " + std::to_string(id));
        return entries_[id - 1];
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<std::string>& names() const { return entries_; }

    bool operator==(const LabelMap&) const = default;

private:
    std::vector<std::string> entries_;
};

// Intersection over union. Zero-area boxes never match anything: a pair of
// identical degenerate boxes yields 0, keeping downstream matching total.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
    const double ix_min = std::max(a.x_min, b.x_min);
    const double iy_min = std::max(a.y_min, b.y_min);
    const double ix_max = std::min(a.x_max, b.x_max);
    const double iy_max = std::min(a.y_max, b.y_max);
    const double iw = ix_max - ix_min;
    const double ih = iy_max - iy_min;
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

inline BoundingBox clamp_box(const BoundingBox& b, double width, double height) {
    auto clip = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
    return {clip(b.x_min, width), clip(b.y_min, height),
            clip(b.x_max, width), clip(b.y_max, height)};
}

// Exact union area of a box set, by rasterizing into a boolean mask and
// counting. Boxes are treated as half-open pixel ranges after rounding.
inline std::int64_t union_area(const std::vector<BoundingBox>& boxes, int width, int height) {
    if (boxes.empty()) return 0;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(width) * height, 0);
    for (const auto& b : boxes) {
        const int x0 = std::clamp(static_cast<int>(std::lround(b.x_min)), 0, width);
        const int y0 = std::clamp(static_cast<int>(std::lround(b.y_min)), 0, height);
        const int x1 = std::clamp(static_cast<int>(std::lround(b.x_max)), 0, width);
        const int y1 = std::clamp(static_cast<int>(std::lround(b.y_max)), 0, height);
        for (int y = y0; y < y1; ++y)
            std::fill(mask.begin() + static_cast<std::size_t>(y) * width + x0,
                      mask.begin() + static_cast<std::size_t>(y) * width + x1, 1);
    }
    return std::count(mask.begin(), mask.end(), 1);
}

namespace detail {

// 64-bit FNV-1a with a seed fold; used for stateless per-item randomness
// and for content-derived file name suffixes.
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t seed) {
    std::uint64_t h = 14695981039346656037ull ^ seed;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace detail

}  // namespace cova
