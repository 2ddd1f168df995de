#pragma once

// Annotation stage: the teacher wire protocol, an HTTP client with retry
// and bounded concurrency, crop-to-frame coordinate remapping, confidence
// and class post-filtering, and the RoI-size sweep harness.
//
// Wire contract (normative):
//   POST {endpoint}/annotate
//     body: PNG bytes, Content-Type: image/png, X-Request-Id: opaque string
//   200 JSON: {"detections":[{"label":"person","score":0.91,
//              "box":[ymin,xmin,ymax,xmax]}], "model":"name"}
//     box is normalized to the crop, floats in [0,1].
//   4xx: malformed request (no retry). 5xx / transport error: retried with
//   exponential backoff.
//
// Request ids produced by this client are structured as
// "frame_id|x|y|w|h|seq" so that the reference teacher can locate the crop;
// servers must treat the id as opaque otherwise.

#include <chrono>
#include <condition_variable>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cova/core.hpp"
#include "cova/io.hpp"

namespace cova {

struct AnnotationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ProtocolError : AnnotationError {
    using AnnotationError::AnnotationError;
};

struct AnnotatorConfig {
    std::string endpoint;                    // e.g. http://127.0.0.1:8080
    double min_confidence = 0.3;
    std::vector<std::string> target_classes; // non-empty
    int timeout_ms = 5000;
    int max_retries = 3;
    int max_in_flight = 4;
    int backoff_base_ms = 100;

    void validate() const {
        if (min_confidence < 0.0 || min_confidence > 1.0)
            throw std::invalid_argument("min_confidence must be in [0,1]");
        if (target_classes.empty())
            throw std::invalid_argument("target_classes must be non-empty");
        if (max_in_flight < 1) throw std::invalid_argument("max_in_flight must be positive");
    }
};

struct AnnotationRequest {
    std::vector<std::uint8_t> png;  // encoded crop
    int offset_x = 0;
    int offset_y = 0;
    int crop_width = 0;
    int crop_height = 0;
    int frame_width = 0;   // for clamping remapped boxes
    int frame_height = 0;
    std::string frame_id;
    std::string stream_id;  // origin stream/video, kept for provenance
    std::int64_t frame_index = 0;
    int crop_index = 0;

    std::string request_id() const {
        return frame_id + "|" + std::to_string(offset_x) + "|" + std::to_string(offset_y) +
               "|" + std::to_string(crop_width) + "|" + std::to_string(crop_height) + "|" +
               std::to_string(crop_index);
    }
};

struct ParsedRequestId {
    std::string frame_id;
    int x = 0, y = 0, w = 0, h = 0;
    int seq = 0;
};

inline std::optional<ParsedRequestId> parse_request_id(const std::string& id) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= id.size(); ++i)
        if (i == id.size() || id[i] == '|') {
            parts.push_back(id.substr(start, i - start));
            start = i + 1;
        }
    if (parts.size() != 6) return std::nullopt;
    try {
        return ParsedRequestId{parts[0], std::stoi(parts[1]), std::stoi(parts[2]),
                               std::stoi(parts[3]), std::stoi(parts[4]), std::stoi(parts[5])};
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

struct AnnotatedItem {
    std::string frame_id;
    std::string stream_id;
    std::int64_t frame_index = 0;
    int crop_index = 0;
    int offset_x = 0;
    int offset_y = 0;
    int crop_width = 0;
    int crop_height = 0;
    std::vector<Detection> detections;  // frame coordinates
    double teacher_latency_ms = 0.0;
    std::string teacher_model;
};

// Normalized [ymin,xmin,ymax,xmax] crop coordinates to frame pixels.
inline Detection remap_to_frame(const std::string& label, double score, double ymin,
                                double xmin, double ymax, double xmax, int offset_x,
                                int offset_y, int crop_w, int crop_h, int frame_w,
                                int frame_h) {
    if (ymin > ymax || xmin > xmax || ymin < 0 || xmin < 0 || ymax > 1 || xmax > 1)
        throw ProtocolError("malformed normalized box [" + std::to_string(ymin) + "," +
                            std::to_string(xmin) + "," + std::to_string(ymax) + "," +
                            std::to_string(xmax) + "]");
    const BoundingBox box{offset_x + xmin * crop_w, offset_y + ymin * crop_h,
                          offset_x + xmax * crop_w, offset_y + ymax * crop_h};
    return {clamp_box(box, frame_w, frame_h), label, score};
}

struct WireDetection {
    std::string label;
    double score = 0.0;
    double box[4] = {0, 0, 0, 0};  // [ymin,xmin,ymax,xmax]
};

struct WireResponse {
    std::vector<WireDetection> detections;
    std::string model;
};

inline WireResponse parse_wire_response(const std::string& body) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError("invalid response JSON (" + std::string(e.what()) +
                            "): " + body.substr(0, 200));
    }
    if (!j.contains("detections") || !j["detections"].is_array())
        throw ProtocolError("response missing \"detections\": " + body.substr(0, 200));
    WireResponse r;
    if (j.contains("model")) r.model = j["model"].get<std::string>();
    for (const auto& d : j["detections"]) {
        if (!d.contains("label") || !d.contains("score") || !d.contains("box") ||
            !d["box"].is_array() || d["box"].size() != 4)
            throw ProtocolError("malformed detection entry: " + d.dump().substr(0, 200));
        WireDetection wd;
        wd.label = d["label"].get<std::string>();
        wd.score = d["score"].get<double>();
        for (int i = 0; i < 4; ++i) wd.box[i] = d["box"][i].get<double>();
        if (wd.score < 0.0 || wd.score > 1.0)
            throw ProtocolError("score out of [0,1]: " + d.dump().substr(0, 200));
        r.detections.push_back(std::move(wd));
    }
    return r;
}

// Applies remapping plus the confidence and class post-filters shared by
// every annotator implementation.
inline AnnotatedItem build_annotated_item(const AnnotationRequest& req, const WireResponse& resp,
                                          const AnnotatorConfig& cfg, double latency_ms) {
    AnnotatedItem item;
    item.frame_id = req.frame_id;
    item.stream_id = req.stream_id.empty() ? req.frame_id : req.stream_id;
    item.frame_index = req.frame_index;
    item.crop_index = req.crop_index;
    item.offset_x = req.offset_x;
    item.offset_y = req.offset_y;
    item.crop_width = req.crop_width;
    item.crop_height = req.crop_height;
    item.teacher_latency_ms = latency_ms;
    item.teacher_model = resp.model;
    for (const auto& wd : resp.detections) {
        if (wd.score < cfg.min_confidence) continue;
        if (std::find(cfg.target_classes.begin(), cfg.target_classes.end(), wd.label) ==
            cfg.target_classes.end())
            continue;
        item.detections.push_back(remap_to_frame(
            wd.label, wd.score, wd.box[0], wd.box[1], wd.box[2], wd.box[3], req.offset_x,
            req.offset_y, req.crop_width, req.crop_height, req.frame_width, req.frame_height));
    }
    return item;
}

class Annotator {
public:
    virtual ~Annotator() = default;
    virtual AnnotatedItem annotate(const AnnotationRequest& req) = 0;
};

namespace detail {

// Counting semaphore with a runtime capacity.
class InFlightLimiter {
public:
    explicit InFlightLimiter(int capacity) : available_(capacity) {}
    void acquire() {
        std::unique_lock lk(m_);
        cv_.wait(lk, [&] { return available_ > 0; });
        --available_;
    }
    void release() {
        {
            std::lock_guard lk(m_);
            ++available_;
        }
        cv_.notify_one();
    }

private:
    std::mutex m_;
    std::condition_variable cv_;
    int available_;
};

}  // namespace detail

// HTTP client against the wire contract. Shareable across workers; at most
// max_in_flight requests are outstanding at any moment.
class HttpAnnotator : public Annotator {
public:
    explicit HttpAnnotator(AnnotatorConfig cfg)
        : cfg_(std::move(cfg)), limiter_(cfg_.max_in_flight) {
        cfg_.validate();
        if (cfg_.endpoint.empty()) throw std::invalid_argument("endpoint required");
    }

    AnnotatedItem annotate(const AnnotationRequest& req) override;

    const AnnotatorConfig& config() const { return cfg_; }

private:
    AnnotatorConfig cfg_;
    detail::InFlightLimiter limiter_;
};

struct RoiSweepRow {
    double scale = 0.0;
    int roi_width = 0;
    int roi_height = 0;
    std::optional<double> confidence;  // missing when the annotator failed
};

// Crops centered square RoIs of growing scale around object_box, queries
// the annotator, and records the top confidence of the best-IoU detection
// against the object. Scale 1 is the smallest square containing the object.
inline std::vector<RoiSweepRow> roi_sweep(const Frame& frame, const BoundingBox& object_box,
                                          const std::vector<double>& scales, Annotator& ann,
                                          const AnnotatorConfig& cfg) {
    std::vector<RoiSweepRow> rows;
    const double cx = (object_box.x_min + object_box.x_max) / 2.0;
    const double cy = (object_box.y_min + object_box.y_max) / 2.0;
    const double base = std::max(object_box.width(), object_box.height());
    int seq = 0;
    for (double scale : scales) {
        if (scale < 1.0) throw std::invalid_argument("roi_sweep: scales must be >= 1");
        const double side = base * scale;
        const auto roi = clamp_box({cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2},
                                   frame.width, frame.height);
        const int x0 = int(roi.x_min), y0 = int(roi.y_min);
        const int w = std::max(1, int(roi.x_max) - x0), h = std::max(1, int(roi.y_max) - y0);

        Frame crop;
        crop.width = w;
        crop.height = h;
        crop.pixels.resize(std::size_t(w) * h * 3);
        for (int y = 0; y < h; ++y)
            std::copy_n(frame.pixels.data() + (std::size_t(y0 + y) * frame.width + x0) * 3,
                        std::size_t(w) * 3, crop.pixels.data() + std::size_t(y) * w * 3);

        AnnotationRequest req;
        req.png = encode_png(crop);
        req.offset_x = x0;
        req.offset_y = y0;
        req.crop_width = w;
        req.crop_height = h;
        req.frame_width = frame.width;
        req.frame_height = frame.height;
        req.frame_id = !frame.name.empty()
                           ? frame.name
                           : (frame.stream_id.empty() ? "frame" : frame.stream_id);
        req.stream_id = frame.stream_id;
        req.frame_index = frame.index;
        req.crop_index = seq++;

        RoiSweepRow row{scale, w, h, std::nullopt};
        try {
            const auto item = ann.annotate(req);
            row.confidence = 0.0;  // answered, nothing matched the object
            double best_iou = 0.0;
            for (const auto& d : item.detections) {
                const double v = iou(d.box, object_box);
                if (v > best_iou) {
                    best_iou = v;
                    row.confidence = d.score;
                }
            }
        } catch (const AnnotationError&) {
            // recorded as a missing cell
        }
        rows.push_back(row);
    }
    (void)cfg;
    return rows;
}

inline std::string roi_sweep_csv(const std::vector<RoiSweepRow>& rows) {
    std::string out = "scale,roi_width,roi_height,confidence\n";
    for (const auto& r : rows) {
        char buf[128];
        if (r.confidence)
            std::snprintf(buf, sizeof buf, "%g,%d,%d,%.6f\n", r.scale, r.roi_width,
                          r.roi_height, *r.confidence);
        else
            std::snprintf(buf, sizeof buf, "%g,%d,%d,\n", r.scale, r.roi_width, r.roi_height);
        out += buf;
    }
    return out;
}

}  // namespace cova

// The HTTP transport lives in a separate header so that pure remapping and
// parsing users do not pull in cpp-httplib.
#include "cova/annotate_http.hpp"
