#pragma once

// Reference annotation service: serves detections from a ground-truth file
// over the annotate wire protocol, optionally degraded (confidence noise,
// size-dependent false negatives, localization jitter) to emulate an
// imperfect teacher. Deterministic given (seed, request id).

#include <atomic>
#include <cmath>
#include <random>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "cova/annotate.hpp"
#include "cova/coco.hpp"
#include "cova/core.hpp"

namespace cova {

struct GroundTruthStore {
    GroundTruthSet objects;  // keyed by image file name
    std::map<std::string, std::pair<int, int>> dimensions;  // file name -> (w,h)
    LabelMap labels;
};

inline GroundTruthStore load_ground_truth(const std::filesystem::path& path) {
    const auto ds = read_coco_json(path);
    GroundTruthStore store;
    store.labels = ds.labels;
    store.objects = coco_ground_truth(ds);
    for (const auto& im : ds.images) {
        store.dimensions[im.file_name] = {im.width, im.height};
        for (const auto& o : store.objects[im.file_name]) {
            const auto c = clamp_box(o.box, im.width, im.height);
            if (!(c == o.box))
                throw SchemaError("annotation box outside image bounds for " + im.file_name);
        }
    }
    return store;
}

struct DegradationProfile {
    std::uint64_t seed = 0;
    // Beta(a,b) confidence law; a <= 0 or b <= 0 means degenerate at 1.0.
    double confidence_a = 0.0;
    double confidence_b = 0.0;
    double fn_area_threshold = 0.0;  // object area / crop area below which FN applies
    double fn_drop_probability = 0.0;
    double jitter_sigma = 0.0;       // fraction of box dimension

    bool perfect() const {
        return fn_drop_probability == 0.0 && jitter_sigma == 0.0 &&
               (confidence_a <= 0.0 || confidence_b <= 0.0);
    }

    void validate() const {
        if (fn_drop_probability < 0.0 || fn_drop_probability > 1.0)
            throw std::invalid_argument("fn_drop_probability must be in [0,1]");
        if (jitter_sigma < 0.0) throw std::invalid_argument("jitter_sigma must be >= 0");
    }

    static DegradationProfile from_json(const nlohmann::json& j) {
        DegradationProfile p;
        if (j.contains("seed")) p.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("confidence_beta")) {
            p.confidence_a = j["confidence_beta"][0].get<double>();
            p.confidence_b = j["confidence_beta"][1].get<double>();
        }
        if (j.contains("fn_small_object")) {
            p.fn_area_threshold = j["fn_small_object"]["area_threshold"].get<double>();
            p.fn_drop_probability = j["fn_small_object"]["drop_probability"].get<double>();
        }
        if (j.contains("jitter_sigma")) p.jitter_sigma = j["jitter_sigma"].get<double>();
        p.validate();
        return p;
    }
};

namespace detail {

inline double sample_beta(std::mt19937_64& rng, double a, double b) {
    std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
    const double x = ga(rng), y = gb(rng);
    return x + y > 0 ? x / (x + y) : 0.5;
}

}  // namespace detail

// Builds the wire response for one request against the store. Randomness is
// derived statelessly from (profile.seed, request id), so concurrent or
// reordered requests cannot change any response.
inline WireResponse teacher_respond(const GroundTruthStore& store,
                                    const DegradationProfile& profile,
                                    const ParsedRequestId& req) {
    WireResponse resp;
    resp.model = profile.perfect() ? "ground-truth" : "ground-truth-degraded";
    auto it = store.objects.find(req.frame_id);
    if (it == store.objects.end()) return resp;  // unknown frame: empty detections

    std::mt19937_64 rng(detail::fnv1a(req.frame_id + "|" + std::to_string(req.x) + "|" +
                                          std::to_string(req.y) + "|" + std::to_string(req.w) +
                                          "|" + std::to_string(req.h) + "|" +
                                          std::to_string(req.seq),
                                      profile.seed));
    const BoundingBox crop{double(req.x), double(req.y), double(req.x + req.w),
                           double(req.y + req.h)};
    const double crop_area = crop.area();

    for (const auto& obj : it->second) {
        // Inclusion rule: at least 30% of the object's area inside the crop.
        const BoundingBox inter{std::max(obj.box.x_min, crop.x_min),
                                std::max(obj.box.y_min, crop.y_min),
                                std::min(obj.box.x_max, crop.x_max),
                                std::min(obj.box.y_max, crop.y_max)};
        if (!inter.valid() || inter.area() <= 0.0) continue;
        if (obj.box.area() <= 0.0 || inter.area() / obj.box.area() < 0.3) continue;

        if (profile.fn_drop_probability > 0.0 && crop_area > 0.0 &&
            obj.box.area() / crop_area < profile.fn_area_threshold) {
            if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) <
                profile.fn_drop_probability)
                continue;
        }

        BoundingBox box = obj.box;
        if (profile.jitter_sigma > 0.0) {
            std::normal_distribution<double> nx(0.0, profile.jitter_sigma * box.width());
            std::normal_distribution<double> ny(0.0, profile.jitter_sigma * box.height());
            box.x_min += nx(rng);
            box.x_max += nx(rng);
            box.y_min += ny(rng);
            box.y_max += ny(rng);
            if (box.x_min > box.x_max) std::swap(box.x_min, box.x_max);
            if (box.y_min > box.y_max) std::swap(box.y_min, box.y_max);
        }

        // Intersect with the crop and express in normalized crop coordinates.
        box = {std::clamp(box.x_min, crop.x_min, crop.x_max),
               std::clamp(box.y_min, crop.y_min, crop.y_max),
               std::clamp(box.x_max, crop.x_min, crop.x_max),
               std::clamp(box.y_max, crop.y_min, crop.y_max)};
        if (box.area() <= 0.0) continue;

        WireDetection wd;
        wd.label = obj.label;
        wd.score = profile.confidence_a > 0.0 && profile.confidence_b > 0.0
                       ? detail::sample_beta(rng, profile.confidence_a, profile.confidence_b)
                       : 1.0;
        wd.box[0] = (box.y_min - crop.y_min) / req.h;
        wd.box[1] = (box.x_min - crop.x_min) / req.w;
        wd.box[2] = (box.y_max - crop.y_min) / req.h;
        wd.box[3] = (box.x_max - crop.x_min) / req.w;
        resp.detections.push_back(std::move(wd));
    }
    return resp;
}

// In-process annotator backed directly by a ground-truth store; used by the
// oracle_file pipeline plugin and by tests that do not need a socket.
class OracleFileAnnotator : public Annotator {
public:
    OracleFileAnnotator(GroundTruthStore store, AnnotatorConfig cfg,
                        DegradationProfile profile = {})
        : store_(std::move(store)), cfg_(std::move(cfg)), profile_(profile) {
        cfg_.validate();
    }

    AnnotatedItem annotate(const AnnotationRequest& req) override {
        const auto parsed = parse_request_id(req.request_id());
        const auto resp = teacher_respond(store_, profile_, *parsed);
        return build_annotated_item(req, resp, cfg_, 0.0);
    }

private:
    GroundTruthStore store_;
    AnnotatorConfig cfg_;
    DegradationProfile profile_;
};

// HTTP reference server for the wire contract.
class TeacherService {
public:
    TeacherService(GroundTruthStore store, DegradationProfile profile, int delay_ms = 0)
        : store_(std::move(store)), profile_(profile), delay_ms_(delay_ms) {
        profile_.validate();
        server_.Post("/annotate", [this](const httplib::Request& rq, httplib::Response& rs) {
            handle(rq, rs);
        });
        server_.Get("/stats", [this](const httplib::Request&, httplib::Response& rs) {
            nlohmann::json j{{"requests", requests_.load()},
                             {"max_concurrent", max_concurrent_.load()},
                             {"unknown_frames", unknown_frames_.load()}};
            rs.set_content(j.dump(), "application/json");
        });
    }

    // Blocking listen on a fixed port.
    bool serve(const std::string& host, int port) { return server_.listen(host, port); }

    // Starts on an ephemeral port and returns it; server runs on a thread.
    int start(const std::string& host = "127.0.0.1") {
        const int port = server_.bind_to_any_port(host);
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port;
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    ~TeacherService() { stop(); }

    std::int64_t max_concurrent() const { return max_concurrent_.load(); }

private:
    void handle(const httplib::Request& rq, httplib::Response& rs) {
        const auto now = ++concurrent_;
        std::int64_t seen = max_concurrent_.load();
        while (now > seen && !max_concurrent_.compare_exchange_weak(seen, now)) {
        }
        ++requests_;
        struct Dec {
            std::atomic<std::int64_t>& c;
            ~Dec() { --c; }
        } dec{concurrent_};

        if (delay_ms_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms_));

        const auto id = rq.get_header_value("X-Request-Id");
        const auto parsed = parse_request_id(id);
        if (!parsed || parsed->w <= 0 || parsed->h <= 0) {
            rs.status = 400;
            rs.set_content("{\"error\":\"bad or missing X-Request-Id\"}", "application/json");
            return;
        }
        if (rq.get_header_value("Content-Type") != "image/png" || rq.body.size() < 8 ||
            png_sig_cmp(reinterpret_cast<const unsigned char*>(rq.body.data()), 0, 8) != 0) {
            rs.status = 400;
            rs.set_content("{\"error\":\"body must be PNG\"}", "application/json");
            return;
        }
        if (!store_.objects.count(parsed->frame_id)) ++unknown_frames_;

        const auto resp = teacher_respond(store_, profile_, *parsed);
        nlohmann::ordered_json j;
        j["detections"] = nlohmann::ordered_json::array();
        for (const auto& d : resp.detections)
            j["detections"].push_back({{"label", d.label},
                                       {"score", d.score},
                                       {"box", {d.box[0], d.box[1], d.box[2], d.box[3]}}});
        j["model"] = resp.model;
        rs.set_content(j.dump(), "application/json");
    }

    GroundTruthStore store_;
    DegradationProfile profile_;
    int delay_ms_;
    httplib::Server server_;
    std::thread thread_;
    std::atomic<std::int64_t> concurrent_{0};
    std::atomic<std::int64_t> max_concurrent_{0};
    std::atomic<std::int64_t> requests_{0};
    std::atomic<std::int64_t> unknown_frames_{0};
};

}  // namespace cova
