#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "cova/core.hpp"

using namespace cova;

namespace {

// Mask-rasterized IoU, the independent route the analytic formula is
// checked against. Integer boxes only.
double iou_by_mask(const BoundingBox& a, const BoundingBox& b, int w, int h) {
    std::int64_t inter = 0, uni = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const bool in_a = x >= a.x_min && x < a.x_max && y >= a.y_min && y < a.y_max;
            const bool in_b = x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
            inter += in_a && in_b;
            uni += in_a || in_b;
        }
    }
    return uni == 0 ? 0.0 : double(inter) / double(uni);
}

BoundingBox random_box(std::mt19937& rng, int w, int h) {
    std::uniform_int_distribution<int> dx(0, w), dy(0, h);
    int x0 = dx(rng), x1 = dx(rng), y0 = dy(rng), y1 = dy(rng);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    return {double(x0), double(y0), double(x1), double(y1)};
}

}  // namespace

TEST_CASE("iou basic cases") {
    CHECK(iou({0, 0, 10, 10}, {0, 0, 10, 10}) == doctest::Approx(1.0));
    CHECK(iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
    CHECK(iou({0, 0, 10, 10}, {5, 0, 15, 10}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("iou degenerate boxes give 0") {
    CHECK(iou({5, 5, 5, 5}, {5, 5, 5, 5}) == 0.0);
    CHECK(iou({5, 5, 5, 5}, {0, 0, 10, 10}) == 0.0);
}

TEST_CASE("iou symmetric and bounded on random pairs") {
    std::mt19937 rng(7);
    for (int i = 0; i < 200; ++i) {
        const auto a = random_box(rng, 40, 40);
        const auto b = random_box(rng, 40, 40);
        const double ab = iou(a, b);
        CHECK(ab == iou(b, a));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
        if (ab == 1.0) CHECK(a == b);
    }
}

TEST_CASE("iou matches rasterized mask route on integer boxes") {
    std::mt19937 rng(11);
    const int w = 32, h = 32;
    for (int i = 0; i < 200; ++i) {
        const auto a = random_box(rng, w, h);
        const auto b = random_box(rng, w, h);
        CHECK(iou(a, b) == doctest::Approx(iou_by_mask(a, b, w, h)).epsilon(1e-12));
    }
}

TEST_CASE("clamp_box") {
    CHECK(clamp_box({-5, -5, 10, 10}, 100, 100) == BoundingBox{0, 0, 10, 10});
    CHECK(clamp_box({0, 0, 10, 10}, 100, 100) == BoundingBox{0, 0, 10, 10});
    const auto far = clamp_box({150, 150, 160, 160}, 100, 100);
    CHECK(far == BoundingBox{100, 100, 100, 100});
    CHECK(far.area() == 0.0);
}

TEST_CASE("union_area basic") {
    CHECK(union_area({}, 100, 100) == 0);
    CHECK(union_area({{0, 0, 64, 48}}, 64, 48) == 64 * 48);
    CHECK(union_area({{0, 0, 10, 10}, {5, 5, 15, 15}}, 100, 100) == 175);
}

TEST_CASE("union_area bounds") {
    std::mt19937 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<BoundingBox> boxes;
        double sum = 0.0, max_one = 0.0;
        for (int i = 0; i < 5; ++i) {
            boxes.push_back(random_box(rng, 50, 50));
            sum += boxes.back().area();
            max_one = std::max(max_one, boxes.back().area());
        }
        const auto u = double(union_area(boxes, 50, 50));
        CHECK(u <= sum);
        CHECK(u >= max_one);
    }
}

TEST_CASE("label map ids contiguous from 1") {
    LabelMap lm({"person", "car"});
    CHECK(lm.id_of("person") == 1);
    CHECK(lm.id_of("car") == 2);
    CHECK(lm.name_of(2) == "car");
    CHECK_THROWS(lm.id_of("boat"));
    CHECK_THROWS(LabelMap({"a", "a"}));
}
