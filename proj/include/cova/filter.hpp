#pragma once

// Filter-stage plugins: pass-through, static-frame gating, moving-region
// cropping, MSE deduplication, and the motion-coverage statistic.

#include <deque>
#include <optional>
#include <vector>

#include "cova/background.hpp"
#include "cova/core.hpp"
#include "cova/image.hpp"

namespace cova {

struct MotionRegion {
    BoundingBox box;
    std::int64_t area = 0;
    std::int64_t source_frame = 0;
};

struct FilterItem {
    Frame crop;          // pixels owned by the item
    int offset_x = 0;    // crop origin in the source frame
    int offset_y = 0;
    std::int64_t source_frame = 0;
    std::string stream_id;
};

struct FilterOutput {
    std::vector<FilterItem> items;
};

struct MotionFilterParams {
    std::int64_t min_area = 0;       // 0 = derive from frame area
    double min_area_fraction = 0.001;
    int dilate_radius = 1;
    int dilate_iterations = 2;
    int padding = 8;

    std::int64_t effective_min_area(int width, int height) const {
        if (min_area > 0) return min_area;
        return static_cast<std::int64_t>(min_area_fraction * width * height);
    }
};

enum class RegionMode { PerRegion, EnclosingBox };

inline Frame crop_frame(const Frame& f, int x0, int y0, int w, int h) {
    Frame out;
    out.stream_id = f.stream_id;
    out.name = f.name;
    out.index = f.index;
    out.timestamp_ms = f.timestamp_ms;
    out.width = w;
    out.height = h;
    out.pixels.resize(static_cast<std::size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y) {
        const auto* src = f.pixels.data() + (static_cast<std::size_t>(y0 + y) * f.width + x0) * 3;
        std::copy(src, src + static_cast<std::size_t>(w) * 3,
                  out.pixels.data() + static_cast<std::size_t>(y) * w * 3);
    }
    return out;
}

inline FilterOutput filter_no_op(const Frame& f) {
    FilterOutput out;
    out.items.push_back({f, 0, 0, f.index, f.stream_id});
    return out;
}

// Shared motion front end: model update, dilation, component extraction,
// min-area filtering.
inline std::vector<MotionRegion> detect_motion_regions(const Frame& f, BackgroundModel& model,
                                                       const MotionFilterParams& p) {
    BinaryMask mask = model.update_and_classify(to_gray(f));
    if (mask.count() > 0) mask = dilate(mask, p.dilate_radius, p.dilate_iterations);
    const auto min_area = p.effective_min_area(f.width, f.height);
    std::vector<MotionRegion> regions;
    for (const auto& c : connected_components(mask))
        if (c.area >= min_area) regions.push_back({c.box, c.area, f.index});
    return regions;
}

inline FilterOutput filter_static(const Frame& f, BackgroundModel& model,
                                  const MotionFilterParams& p) {
    if (detect_motion_regions(f, model, p).empty()) return {};
    return filter_no_op(f);
}

inline BoundingBox pad_and_clamp(const BoundingBox& b, int padding, int w, int h) {
    return clamp_box({b.x_min - padding, b.y_min - padding, b.x_max + padding, b.y_max + padding},
                     w, h);
}

inline FilterOutput filter_moving_regions(const Frame& f, BackgroundModel& model,
                                          const MotionFilterParams& p, RegionMode mode) {
    const auto regions = detect_motion_regions(f, model, p);
    FilterOutput out;
    if (regions.empty()) return out;

    std::vector<BoundingBox> boxes;
    if (mode == RegionMode::EnclosingBox) {
        BoundingBox all = regions[0].box;
        for (const auto& r : regions) {
            all.x_min = std::min(all.x_min, r.box.x_min);
            all.y_min = std::min(all.y_min, r.box.y_min);
            all.x_max = std::max(all.x_max, r.box.x_max);
            all.y_max = std::max(all.y_max, r.box.y_max);
        }
        boxes.push_back(all);
    } else {
        for (const auto& r : regions) boxes.push_back(r.box);
    }

    for (const auto& b : boxes) {
        const auto padded = pad_and_clamp(b, p.padding, f.width, f.height);
        const int x0 = static_cast<int>(padded.x_min);
        const int y0 = static_cast<int>(padded.y_min);
        const int w = static_cast<int>(padded.x_max) - x0;
        const int h = static_cast<int>(padded.y_max) - y0;
        if (w <= 0 || h <= 0) continue;
        out.items.push_back({crop_frame(f, x0, y0, w, h), x0, y0, f.index, f.stream_id});
    }
    return out;
}

// Region-level MSE deduplication. Keeps a bounded history of recently kept
// crops; a candidate is dropped when it barely differs from the most recent
// kept crop covering the same region (>= 50% IoU of region boxes).
class MseDeduplicator {
public:
    MseDeduplicator(double threshold, int comparison_size = 64, std::size_t history = 16)
        : threshold_(threshold), size_(comparison_size), history_(history) {}

    bool keep(const FilterItem& item) {
        const BoundingBox box{double(item.offset_x), double(item.offset_y),
                              double(item.offset_x + item.crop.width),
                              double(item.offset_y + item.crop.height)};
        const GrayImage resized = resize_gray(to_gray(item.crop), size_, size_);
        for (auto it = kept_.rbegin(); it != kept_.rend(); ++it) {
            if (iou(it->box, box) < 0.5) continue;
            if (mse(resized, it->thumb) < threshold_) return false;
            break;  // only the most recent overlapping crop counts
        }
        kept_.push_back({box, resized});
        if (kept_.size() > history_) kept_.pop_front();
        return true;
    }

    // Nearest-neighbor resize to the fixed comparison size.
    static GrayImage resize_gray(const GrayImage& in, int w, int h) {
        GrayImage out = make_gray(w, h);
        for (int y = 0; y < h; ++y) {
            const int sy = std::min(in.height - 1, y * in.height / h);
            for (int x = 0; x < w; ++x) {
                const int sx = std::min(in.width - 1, x * in.width / w);
                out.at(x, y) = in.at(sx, sy);
            }
        }
        return out;
    }

private:
    struct Entry {
        BoundingBox box;
        GrayImage thumb;
    };
    double threshold_;
    int size_;
    std::size_t history_;
    std::deque<Entry> kept_;
};

struct MotionCoverage {
    std::vector<double> per_frame;  // fraction of frame area, every frame
    double average = 0.0;           // over frames with >= 1 region
};

template <typename FrameIter>
MotionCoverage motion_coverage(FrameIter next, BackgroundModel& model,
                               const MotionFilterParams& p) {
    MotionCoverage cov;
    double sum = 0.0;
    std::int64_t qualifying = 0;
    while (auto f = next()) {
        const auto regions = detect_motion_regions(*f, model, p);
        std::vector<BoundingBox> boxes;
        for (const auto& r : regions) boxes.push_back(r.box);
        const double frac =
            double(union_area(boxes, f->width, f->height)) / (double(f->width) * f->height);
        cov.per_frame.push_back(frac);
        if (!regions.empty()) {
            sum += frac;
            ++qualifying;
        }
    }
    cov.average = qualifying > 0 ? sum / double(qualifying) : 0.0;
    return cov;
}

}  // namespace cova
