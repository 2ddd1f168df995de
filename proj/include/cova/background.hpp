#pragma once

// Scene background modeling for static cameras: first-frame reference and
// online per-pixel Mixture-of-Gaussians. A model instance belongs to one
// stream worker; updates are strictly sequential.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "cova/image.hpp"

namespace cova {

struct BackgroundParams {
    int k = 3;                         // Gaussians per pixel
    double alpha = 0.05;               // learning rate
    double background_weight_threshold = 0.7;  // T
    double match_sigmas = 2.5;
    double initial_variance = 225.0;   // sigma = 15
    double initial_weight = 0.05;
    double variance_floor = 4.0;
    double blur_sigma = 2.0;
    int diff_threshold = 25;           // first-frame variant threshold

    static constexpr int kMax = 16;

    void validate() const {
        if (k < 1 || k > kMax) throw std::invalid_argument("k must be in [1,16]");
        if (alpha <= 0.0 || alpha >= 1.0) throw std::invalid_argument("alpha must be in (0,1)");
        if (background_weight_threshold <= 0.0 || background_weight_threshold > 1.0)
            throw std::invalid_argument("background_weight_threshold must be in (0,1]");
        if (match_sigmas <= 0.0) throw std::invalid_argument("match_sigmas must be > 0");
        if (initial_weight <= 0.0 || initial_weight >= 1.0)
            throw std::invalid_argument("initial_weight must be in (0,1)");
        if (initial_variance <= 0.0 || variance_floor <= 0.0)
            throw std::invalid_argument("variances must be > 0");
    }
};

struct Gaussian {
    double weight = 0.0;
    double mean = 0.0;
    double variance = 1.0;
};

namespace detail {

// fitness(a) > fitness(b) with fitness = w / sqrt(var), compared without
// square roots: w_a/sqrt(v_a) > w_b/sqrt(v_b)  <=>  w_a^2 v_b > w_b^2 v_a.
inline bool fitter(const Gaussian& a, const Gaussian& b) {
    return a.weight * a.weight * b.variance > b.weight * b.weight * a.variance;
}

inline void mog_init_pixel(const BackgroundParams& p, Gaussian* g, double first_value) {
    for (int i = 0; i < p.k; ++i) g[i] = {0.0, 0.0, p.initial_variance};
    g[0] = {1.0, first_value, p.initial_variance};
}

// One observation of one pixel. Mutates the k Gaussians in place and
// returns true when the pixel is classified background. Allocation-free:
// this runs once per pixel per frame. K > 0 fixes the mixture size at
// compile time so the loops unroll; K == 0 falls back to the runtime k.
template <int K = 0>
inline bool mog_update_pixel(const BackgroundParams& p, Gaussian* g, double x) {
    const int k = K > 0 ? K : p.k;
    std::array<int, BackgroundParams::kMax> order;
    for (int i = 0; i < k; ++i) order[i] = i;
    // Insertion sort by descending fitness, stable (k is tiny).
    for (int i = 1; i < k; ++i) {
        const int v = order[i];
        int j = i;
        while (j > 0 && fitter(g[v], g[order[j - 1]])) {
            order[j] = order[j - 1];
            --j;
        }
        order[j] = v;
    }

    const double band2 = p.match_sigmas * p.match_sigmas;
    int matched = -1;
    for (int oi = 0; oi < k; ++oi) {
        const int i = order[oi];
        if (g[i].weight <= 0.0) continue;
        const double d = x - g[i].mean;
        if (d * d <= band2 * g[i].variance) {
            matched = i;
            break;
        }
    }

    if (matched >= 0) {
        for (int i = 0; i < k; ++i)
            g[i].weight = (1.0 - p.alpha) * g[i].weight + (i == matched ? p.alpha : 0.0);
        const double rho = p.alpha;
        Gaussian& m = g[matched];
        m.mean = (1.0 - rho) * m.mean + rho * x;
        const double d = x - m.mean;
        const double v = (1.0 - rho) * m.variance + rho * d * d;
        m.variance = v < p.variance_floor ? p.variance_floor : v;
    } else {
        g[order[k - 1]] = {p.initial_weight, x, p.initial_variance};
    }

    double sum = 0.0;
    for (int i = 0; i < k; ++i) sum += g[i].weight;
    for (int i = 0; i < k; ++i) g[i].weight /= sum;

    if (matched < 0) return false;

    // Re-rank after the update; background iff the matched Gaussian sits in
    // the smallest prefix whose cumulative weight exceeds T.
    for (int i = 1; i < k; ++i) {
        const int v = order[i];
        int j = i;
        while (j > 0 && fitter(g[v], g[order[j - 1]])) {
            order[j] = order[j - 1];
            --j;
        }
        order[j] = v;
    }
    double cum = 0.0;
    for (int oi = 0; oi < k; ++oi) {
        const int i = order[oi];
        cum += g[i].weight;
        if (i == matched) return true;
        if (cum > p.background_weight_threshold) return false;
    }
    return false;
}

}  // namespace detail

// One pixel's mixture. Scalar convenience wrapper over the same recurrence
// the full-frame grid uses.
struct PixelMixture {
    std::vector<Gaussian> g;

    void init(const BackgroundParams& p, double first_value) {
        g.resize(p.k);
        detail::mog_init_pixel(p, g.data(), first_value);
    }

    bool update_and_classify(const BackgroundParams& p, double x) {
        return detail::mog_update_pixel(p, g.data(), x);
    }

    double dominant_mean() const {
        int best = 0;
        for (std::size_t i = 1; i < g.size(); ++i)
            if (detail::fitter(g[i], g[best])) best = static_cast<int>(i);
        return g[best].mean;
    }
};

enum class BackgroundVariant { FirstFrame, MixtureOfGaussians };

class BackgroundModel {
public:
    BackgroundModel(BackgroundVariant variant, int width, int height,
                    BackgroundParams params = {})
        : variant_(variant), width_(width), height_(height), params_(params) {
        params_.validate();
        if (width <= 0 || height <= 0)
            throw std::invalid_argument("model dimensions must be positive");
    }

    BackgroundVariant variant() const { return variant_; }
    int width() const { return width_; }
    int height() const { return height_; }
    std::int64_t frames_seen() const { return frames_seen_; }
    const BackgroundParams& params() const { return params_; }

    // Consumes the next frame (already grayscale), updates model state and
    // returns the foreground mask. Both variants share the blur front end.
    BinaryMask update_and_classify(const GrayImage& img) {
        if (img.width != width_ || img.height != height_)
            throw std::invalid_argument("frame dimensions do not match model");
        const GrayImage blurred = gaussian_blur(img, params_.blur_sigma);
        BinaryMask mask = make_mask(width_, height_);

        if (variant_ == BackgroundVariant::FirstFrame) {
            if (frames_seen_ == 0) {
                reference_ = blurred;
            } else {
                mask = binary_threshold(abs_diff(blurred, reference_), params_.diff_threshold);
            }
        } else {
            const std::size_t npix = blurred.data.size();
            if (frames_seen_ == 0) {
                grid_.resize(npix * params_.k);
                for (std::size_t i = 0; i < npix; ++i)
                    detail::mog_init_pixel(params_, &grid_[i * params_.k], blurred.data[i]);
            } else {
                switch (params_.k) {
                    case 3:
                        update_grid<3>(blurred, mask);
                        break;
                    case 5:
                        update_grid<5>(blurred, mask);
                        break;
                    default:
                        update_grid<0>(blurred, mask);
                        break;
                }
            }
        }
        ++frames_seen_;
        return mask;
    }

    GrayImage background_image() const {
        if (frames_seen_ == 0) throw std::runtime_error("no frames seen yet");
        if (variant_ == BackgroundVariant::FirstFrame) return reference_;
        GrayImage out = make_gray(width_, height_);
        const int k = params_.k;
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            const Gaussian* g = &grid_[i * k];
            int best = 0;
            for (int j = 1; j < k; ++j)
                if (detail::fitter(g[j], g[best])) best = j;
            out.data[i] = static_cast<std::uint8_t>(
                std::clamp(std::lround(g[best].mean), 0L, 255L));
        }
        return out;
    }

    // Grid state for a single pixel, for inspection and tests.
    std::vector<Gaussian> pixel_state(int x, int y) const {
        const std::size_t base = (static_cast<std::size_t>(y) * width_ + x) * params_.k;
        return {grid_.begin() + base, grid_.begin() + base + params_.k};
    }

    // Binary snapshot so a pipeline can resume. Versioned header + raw grids,
    // little-endian.
    void save(std::ostream& os) const {
        const char magic[4] = {'C', 'B', 'G', '1'};
        os.write(magic, 4);
        auto put_u32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
        auto put_i64 = [&](std::int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); };
        auto put_f64 = [&](double v) { os.write(reinterpret_cast<const char*>(&v), 8); };
        put_u32(variant_ == BackgroundVariant::FirstFrame ? 0 : 1);
        put_u32(static_cast<std::uint32_t>(width_));
        put_u32(static_cast<std::uint32_t>(height_));
        put_u32(static_cast<std::uint32_t>(params_.k));
        put_i64(frames_seen_);
        put_f64(params_.alpha);
        put_f64(params_.background_weight_threshold);
        put_f64(params_.match_sigmas);
        put_f64(params_.initial_variance);
        put_f64(params_.initial_weight);
        put_f64(params_.variance_floor);
        put_f64(params_.blur_sigma);
        put_u32(static_cast<std::uint32_t>(params_.diff_threshold));
        if (variant_ == BackgroundVariant::FirstFrame) {
            if (frames_seen_ > 0)
                os.write(reinterpret_cast<const char*>(reference_.data.data()),
                         static_cast<std::streamsize>(reference_.data.size()));
        } else {
            for (const auto& gg : grid_) {
                put_f64(gg.weight);
                put_f64(gg.mean);
                put_f64(gg.variance);
            }
        }
    }

    static BackgroundModel load(std::istream& is) {
        char magic[4];
        is.read(magic, 4);
        if (!is || std::memcmp(magic, "CBG1", 4) != 0)
            throw std::runtime_error("bad background snapshot header");
        auto get_u32 = [&] { std::uint32_t v = 0; is.read(reinterpret_cast<char*>(&v), 4); return v; };
        auto get_i64 = [&] { std::int64_t v = 0; is.read(reinterpret_cast<char*>(&v), 8); return v; };
        auto get_f64 = [&] { double v = 0; is.read(reinterpret_cast<char*>(&v), 8); return v; };
        const auto variant = get_u32() == 0 ? BackgroundVariant::FirstFrame
                                            : BackgroundVariant::MixtureOfGaussians;
        const int w = static_cast<int>(get_u32());
        const int h = static_cast<int>(get_u32());
        BackgroundParams p;
        p.k = static_cast<int>(get_u32());
        const std::int64_t seen = get_i64();
        p.alpha = get_f64();
        p.background_weight_threshold = get_f64();
        p.match_sigmas = get_f64();
        p.initial_variance = get_f64();
        p.initial_weight = get_f64();
        p.variance_floor = get_f64();
        p.blur_sigma = get_f64();
        p.diff_threshold = static_cast<int>(get_u32());
        BackgroundModel m(variant, w, h, p);
        m.frames_seen_ = seen;
        if (variant == BackgroundVariant::FirstFrame) {
            if (seen > 0) {
                m.reference_ = make_gray(w, h);
                is.read(reinterpret_cast<char*>(m.reference_.data.data()),
                        static_cast<std::streamsize>(m.reference_.data.size()));
            }
        } else if (seen > 0) {
            m.grid_.resize(static_cast<std::size_t>(w) * h * p.k);
            for (auto& gg : m.grid_) {
                gg.weight = get_f64();
                gg.mean = get_f64();
                gg.variance = get_f64();
            }
        }
        if (!is) throw std::runtime_error("truncated background snapshot");
        return m;
    }

private:
    template <int K>
    void update_grid(const GrayImage& blurred, BinaryMask& mask) {
        const int k = params_.k;
        for (std::size_t i = 0; i < blurred.data.size(); ++i)
            mask.data[i] =
                detail::mog_update_pixel<K>(params_, &grid_[i * k], blurred.data[i]) ? 0 : 1;
    }

    BackgroundVariant variant_;
    int width_;
    int height_;
    BackgroundParams params_;
    std::int64_t frames_seen_ = 0;
    GrayImage reference_;           // FirstFrame
    std::vector<Gaussian> grid_;    // MoG, npixels * k
};

}  // namespace cova
