#pragma once

// Raster primitives behind background subtraction and motion detection.
// Implemented from scratch on plain byte buffers; all deterministic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "cova/core.hpp"

namespace cova {

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;  // H*W

    std::uint8_t at(int x, int y) const {
        return data[static_cast<std::size_t>(y) * width + x];
    }
    std::uint8_t& at(int x, int y) {
        return data[static_cast<std::size_t>(y) * width + x];
    }
    bool same_size(const GrayImage& o) const {
        return width == o.width && height == o.height;
    }
    bool operator==(const GrayImage&) const = default;
};

struct BinaryMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;  // H*W, 0 or 1

    bool at(int x, int y) const {
        return data[static_cast<std::size_t>(y) * width + x] != 0;
    }
    void set(int x, int y, bool v) {
        data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0;
    }
    std::int64_t count() const {
        return std::count(data.begin(), data.end(), std::uint8_t{1});
    }
    bool operator==(const BinaryMask&) const = default;
};

inline GrayImage make_gray(int width, int height, std::uint8_t fill = 0) {
    return {width, height,
            std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height, fill)};
}

inline BinaryMask make_mask(int width, int height, bool fill = false) {
    return {width, height,
            std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height,
                                      fill ? std::uint8_t{1} : std::uint8_t{0})};
}

// Rec.601 luma, rounded.
inline GrayImage to_gray(const Frame& f) {
    GrayImage out = make_gray(f.width, f.height);
    const std::size_t n = out.data.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double r = f.pixels[i * 3 + 0];
        const double g = f.pixels[i * 3 + 1];
        const double b = f.pixels[i * 3 + 2];
        const double y = 0.299 * r + 0.587 * g + 0.114 * b;
        out.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(y), 0L, 255L));
    }
    return out;
}

inline std::vector<double> gaussian_kernel(double sigma) {
    if (sigma <= 0.0) throw std::invalid_argument("sigma must be > 0");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> taps(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-(i * i) / (2.0 * sigma * sigma));
        taps[i + radius] = w;
        sum += w;
    }
    for (auto& w : taps) w /= sum;
    return taps;
}

// Separable convolution, replicate border, kernel radius ceil(3*sigma).
// Rows are staged into padded buffers so the inner loops carry no clamps
// and vectorize.
inline GrayImage gaussian_blur(const GrayImage& img, double sigma) {
    const auto taps = gaussian_kernel(sigma);
    const int radius = static_cast<int>(taps.size() / 2);
    const int ntaps = static_cast<int>(taps.size());
    const int w = img.width, h = img.height;

    std::vector<double> tmp(static_cast<std::size_t>(w) * h);
    std::vector<double> row(static_cast<std::size_t>(w) + 2 * radius);
    for (int y = 0; y < h; ++y) {
        const std::uint8_t* src = img.data.data() + static_cast<std::size_t>(y) * w;
        for (int i = 0; i < radius; ++i) row[i] = src[0];
        for (int x = 0; x < w; ++x) row[radius + x] = src[x];
        for (int i = 0; i < radius; ++i) row[radius + w + i] = src[w - 1];
        double* dst = tmp.data() + static_cast<std::size_t>(y) * w;
        std::fill(dst, dst + w, 0.0);
        for (int k = 0; k < ntaps; ++k) {
            const double t = taps[k];
            const double* shifted = row.data() + k;
            for (int x = 0; x < w; ++x) dst[x] += t * shifted[x];
        }
    }

    GrayImage out = make_gray(w, h);
    std::vector<double> acc(w);
    for (int y = 0; y < h; ++y) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int k = 0; k < ntaps; ++k) {
            const int yi = std::clamp(y + k - radius, 0, h - 1);
            const double* src = tmp.data() + static_cast<std::size_t>(yi) * w;
            const double t = taps[k];
            for (int x = 0; x < w; ++x) acc[x] += t * src[x];
        }
        std::uint8_t* dst = out.data.data() + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x)
            dst[x] = static_cast<std::uint8_t>(std::clamp(std::lround(acc[x]), 0L, 255L));
    }
    return out;
}

inline GrayImage abs_diff(const GrayImage& a, const GrayImage& b) {
    if (!a.same_size(b)) throw std::invalid_argument("abs_diff: dimension mismatch");
    GrayImage out = make_gray(a.width, a.height);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<std::uint8_t>(std::abs(int(a.data[i]) - int(b.data[i])));
    return out;
}

// Set iff intensity strictly above t.
inline BinaryMask binary_threshold(const GrayImage& img, int t) {
    BinaryMask out = make_mask(img.width, img.height);
    for (std::size_t i = 0; i < img.data.size(); ++i)
        out.data[i] = img.data[i] > t ? 1 : 0;
    return out;
}

// Square (2r+1)x(2r+1) structuring element, repeated `iterations` times.
inline BinaryMask dilate(const BinaryMask& m, int radius, int iterations = 1) {
    if (radius < 1 || iterations < 1)
        throw std::invalid_argument("dilate: radius and iterations must be >= 1");
    const int w = m.width, h = m.height;
    BinaryMask cur = m;
    for (int it = 0; it < iterations; ++it) {
        BinaryMask next = make_mask(w, h);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!cur.at(x, y)) continue;
                const int y0 = std::max(0, y - radius), y1 = std::min(h - 1, y + radius);
                const int x0 = std::max(0, x - radius), x1 = std::min(w - 1, x + radius);
                for (int yy = y0; yy <= y1; ++yy)
                    for (int xx = x0; xx <= x1; ++xx) next.set(xx, yy, true);
            }
        }
        cur = std::move(next);
    }
    return cur;
}

struct Component {
    BoundingBox box;
    std::int64_t area = 0;
};

// 8-connected components; tight boxes; ordered by (y_min, x_min).
inline std::vector<Component> connected_components(const BinaryMask& m) {
    const int w = m.width, h = m.height;
    std::vector<std::int32_t> label(static_cast<std::size_t>(w) * h, -1);
    std::vector<Component> comps;
    std::vector<std::pair<int, int>> stack;

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t idx = static_cast<std::size_t>(y) * w + x;
            if (!m.data[idx] || label[idx] >= 0) continue;
            const std::int32_t id = static_cast<std::int32_t>(comps.size());
            int min_x = x, max_x = x, min_y = y, max_y = y;
            std::int64_t area = 0;
            label[idx] = id;
            stack.push_back({x, y});
            while (!stack.empty()) {
                auto [cx, cy] = stack.back();
                stack.pop_back();
                ++area;
                min_x = std::min(min_x, cx);
                max_x = std::max(max_x, cx);
                min_y = std::min(min_y, cy);
                max_y = std::max(max_y, cy);
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dx == 0 && dy == 0) continue;
                        const int nx = cx + dx, ny = cy + dy;
                        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                        const std::size_t nidx = static_cast<std::size_t>(ny) * w + nx;
                        if (!m.data[nidx] || label[nidx] >= 0) continue;
                        label[nidx] = id;
                        stack.push_back({nx, ny});
                    }
                }
            }
            // Box spans the pixel extents; +1 makes it the exclusive corner.
            comps.push_back({{double(min_x), double(min_y), double(max_x + 1), double(max_y + 1)}, area});
        }
    }
    std::sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) {
        return std::tie(a.box.y_min, a.box.x_min) < std::tie(b.box.y_min, b.box.x_min);
    });
    return comps;
}

inline double mse(const GrayImage& a, const GrayImage& b) {
    if (!a.same_size(b)) throw std::invalid_argument("mse: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = double(a.data[i]) - double(b.data[i]);
        acc += d * d;
    }
    return a.data.empty() ? 0.0 : acc / double(a.data.size());
}

inline double mse(const Frame& a, const Frame& b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("mse: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = double(a.pixels[i]) - double(b.pixels[i]);
        acc += d * d;
    }
    return a.pixels.empty() ? 0.0 : acc / double(a.pixels.size());
}

}  // namespace cova
