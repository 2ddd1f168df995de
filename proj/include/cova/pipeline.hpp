#pragma once

// Pipeline orchestration: JSON config schema, plugin registry for the five
// stages (capture, filter, annotate, dataset, train), bounded-queue stage
// wiring, run lifecycle (collect → export → split → train), drift
// monitoring, and metrics.
//
// Config schema (all stage entries required, one per stage):
//   {
//     "pipeline": [
//       {"stage": "capture",  "plugin": "image_directory", "params": {...}},
//       {"stage": "filter",   "plugin": "moving_objects_only", "params": {...}},
//       {"stage": "annotate", "plugin": "http", "params": {...}},
//       {"stage": "dataset",  "plugin": "default", "params": {...}},
//       {"stage": "train",    "plugin": "none", "params": {...}}
//     ],
//     "label_map": ["person", "car"],
//     "target_classes": ["person"],
//     "target_image_count": 1000,
//     "deadline": "2024-05-01T12:00:00Z",   // or "deadline_seconds": 120
//     "eval_fraction": 0.0,
//     "output_dir": "cova-out",
//     "queue_capacity": 64,
//     "drift": {"enabled": false, "window_length": 100, "threshold": 0.5,
//               "consecutive_windows": 2, "rearm": false, "max_reruns": 1}
//   }
//
// The "plugin_path" key (dynamic code loading) is rejected everywhere; the
// registry is extended at compile time instead (see README, "Plugins").
//
// Exit codes: 0 success, 1 stage failure (e.g. empty dataset at export),
// 2 config error, 3 annotation unavailable, 4 trainer failed.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cova/annotate.hpp"
#include "cova/background.hpp"
#include "cova/dataset.hpp"
#include "cova/evaluate.hpp"
#include "cova/filter.hpp"
#include "cova/io.hpp"
#include "cova/teacher.hpp"

namespace cova {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct AnnotationUnavailable : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kExitSuccess = 0;
inline constexpr int kExitStageFailure = 1;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitAnnotationUnavailable = 3;
inline constexpr int kExitTrainerFailed = 4;

// ---------------------------------------------------------- bounded queue

// Blocking bounded FIFO with cooperative shutdown. close() lets consumers
// drain; cancel() unblocks everyone immediately and drops the backlog.
template <typename T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw std::invalid_argument("queue capacity must be positive");
    }

    bool push(T value) {
        std::unique_lock lk(m_);
        not_full_.wait(lk, [&] { return items_.size() < capacity_ || closed_ || cancelled_; });
        if (closed_ || cancelled_) return false;
        items_.push_back(std::move(value));
        high_water_ = std::max(high_water_, items_.size());
        not_empty_.notify_one();
        return true;
    }

    std::optional<T> pop() {
        std::unique_lock lk(m_);
        not_empty_.wait(lk, [&] { return !items_.empty() || closed_ || cancelled_; });
        if (cancelled_ || items_.empty()) return std::nullopt;
        T out = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return out;
    }

    void close() {
        {
            std::lock_guard lk(m_);
            closed_ = true;
        }
        not_full_.notify_all();
        not_empty_.notify_all();
    }

    void cancel() {
        {
            std::lock_guard lk(m_);
            cancelled_ = true;
            items_.clear();
        }
        not_full_.notify_all();
        not_empty_.notify_all();
    }

    std::size_t high_water() const {
        std::lock_guard lk(m_);
        return high_water_;
    }

private:
    mutable std::mutex m_;
    std::condition_variable not_full_, not_empty_;
    std::deque<T> items_;
    std::size_t capacity_;
    std::size_t high_water_ = 0;
    bool closed_ = false;
    bool cancelled_ = false;
};

// ----------------------------------------------------------------- config

struct StageConfig {
    std::string stage;   // capture | filter | annotate | dataset | train
    std::string plugin;
    nlohmann::json params = nlohmann::json::object();
};

struct DriftConfig {
    bool enabled = false;
    DriftSettings settings;
    bool rearm = false;
    int max_reruns = 1;
};

struct PipelineConfig {
    std::vector<StageConfig> stages;  // in declared order
    LabelMap labels;
    std::vector<std::string> target_classes;
    int target_image_count = 1000;
    std::optional<std::string> deadline_iso;   // absolute, ISO-8601
    std::optional<double> deadline_seconds;    // relative to run start
    double eval_fraction = 0.0;
    std::filesystem::path output_dir = "cova-out";
    int queue_capacity = 64;
    DriftConfig drift;
    std::string fingerprint;  // hash of the raw config text

    const StageConfig& stage(const std::string& name) const {
        for (const auto& s : stages)
            if (s.stage == name) return s;
        throw ConfigError("missing stage \"" + name + "\"");
    }
};

// ----------------------------------------------------------------- stages

// Capture is a FrameSource (io module). Filter is stateful per stream.
class FilterPlugin {
public:
    virtual ~FilterPlugin() = default;
    virtual FilterOutput process(const Frame& frame) = 0;
};

struct RunMetrics {
    std::int64_t frames_captured = 0;
    std::int64_t items_passed_filter = 0;
    std::int64_t annotation_requests = 0;
    std::int64_t annotation_errors = 0;
    std::int64_t examples_accepted = 0;
    std::int64_t bytes_uploaded = 0;
    double capture_filter_ms = 0.0;
    double annotate_ms = 0.0;
    double dataset_ms = 0.0;
    std::size_t queue_high_water = 0;
};

struct RunReport {
    int exit_code = kExitSuccess;
    std::string error;             // empty on success
    std::string stop_reason;       // count | deadline | end_of_stream | stopped | fatal
    std::filesystem::path dataset_dir;
    std::filesystem::path manifest_path;
    RunMetrics metrics;
    std::optional<TrainerReport> trainer;
    std::vector<DriftMonitor::Signal> drift_signals;
    bool rearm_requested = false;
    std::vector<RunReport> reruns;  // populated by run_pipeline on re-arm
};

// --------------------------------------------------------------- registry

// Compile-time extensible plugin registry; (stage, name) → factory. The
// factories receive the stage params plus the validated global config.
struct PluginRegistry {
    using CaptureFactory = std::function<std::unique_ptr<FrameSource>(
        const nlohmann::json&, const PipelineConfig&)>;
    using FilterFactory = std::function<std::unique_ptr<FilterPlugin>(
        const nlohmann::json&, const PipelineConfig&)>;
    using AnnotateFactory = std::function<std::unique_ptr<Annotator>(
        const nlohmann::json&, const PipelineConfig&)>;
    using TrainFactory = std::function<std::optional<TrainerSpec>(
        const nlohmann::json&, const PipelineConfig&)>;

    std::map<std::string, CaptureFactory> capture;
    std::map<std::string, FilterFactory> filter;
    std::map<std::string, AnnotateFactory> annotate;
    std::map<std::string, std::function<void(const nlohmann::json&)>> dataset;
    std::map<std::string, TrainFactory> train;

    bool has(const std::string& stage, const std::string& name) const {
        if (stage == "capture") return capture.count(name) > 0;
        if (stage == "filter") return filter.count(name) > 0;
        if (stage == "annotate") return annotate.count(name) > 0;
        if (stage == "dataset") return dataset.count(name) > 0;
        if (stage == "train") return train.count(name) > 0;
        return false;
    }

    static const PluginRegistry& builtins();
};

// ------------------------------------------------------ config parsing

namespace detail {

inline void reject_plugin_path(const nlohmann::json& j, const std::string& path) {
    if (j.is_object() && j.contains("plugin_path"))
        throw ConfigError(
            path + ".plugin_path: dynamic plugin loading is not supported; register "
                   "plugins at compile time instead (see README, \"Plugins\")");
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& path) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(path + "." + key + ": wrong type");
    }
}

}  // namespace detail

inline PipelineConfig parse_config(const std::string& text,
                                   const PluginRegistry& registry = PluginRegistry::builtins()) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("$: config must be a JSON object");
    detail::reject_plugin_path(j, "$");

    PipelineConfig cfg;
    {
        char buf[20];
        std::snprintf(buf, sizeof buf, "%016llx",
                      static_cast<unsigned long long>(detail::fnv1a(j.dump(), 0)));
        cfg.fingerprint = buf;
    }

    if (!j.contains("pipeline") || !j["pipeline"].is_array())
        throw ConfigError("$.pipeline: required stage array is missing");
    static const std::vector<std::string> kStages = {"capture", "filter", "annotate",
                                                     "dataset", "train"};
    std::map<std::string, int> seen;
    int i = 0;
    for (const auto& entry : j["pipeline"]) {
        const std::string path = "$.pipeline[" + std::to_string(i++) + "]";
        if (!entry.is_object()) throw ConfigError(path + ": stage entry must be an object");
        detail::reject_plugin_path(entry, path);
        StageConfig sc;
        sc.stage = detail::get_or<std::string>(entry, "stage", "", path);
        sc.plugin = detail::get_or<std::string>(entry, "plugin", "", path);
        if (std::find(kStages.begin(), kStages.end(), sc.stage) == kStages.end())
            throw ConfigError(path + ".stage: unknown stage \"" + sc.stage + "\"");
        if (seen.count(sc.stage))
            throw ConfigError(path + ".stage: duplicate stage \"" + sc.stage + "\"");
        seen[sc.stage] = 1;
        if (entry.contains("params")) {
            if (!entry["params"].is_object())
                throw ConfigError(path + ".params: must be an object");
            sc.params = entry["params"];
            detail::reject_plugin_path(sc.params, path + ".params");
        }
        if (!registry.has(sc.stage, sc.plugin))
            throw ConfigError(path + ".plugin: unknown plugin \"" + sc.plugin +
                              "\" for stage \"" + sc.stage + "\"");
        cfg.stages.push_back(std::move(sc));
    }
    for (const auto& s : kStages)
        if (!seen.count(s)) throw ConfigError("$.pipeline: missing stage \"" + s + "\"");

    if (!j.contains("label_map") || !j["label_map"].is_array() || j["label_map"].empty())
        throw ConfigError("$.label_map: required non-empty array of class names");
    try {
        cfg.labels = LabelMap(j["label_map"].get<std::vector<std::string>>());
    } catch (const std::exception& e) {
        throw ConfigError(std::string("$.label_map: ") + e.what());
    }

    cfg.target_classes =
        detail::get_or<std::vector<std::string>>(j, "target_classes", {}, "$");
    if (cfg.target_classes.empty())
        throw ConfigError("$.target_classes: required non-empty array");
    for (const auto& c : cfg.target_classes)
        if (!cfg.labels.contains(c))
            throw ConfigError("$.target_classes: \"" + c + "\" is not in label_map");

    cfg.target_image_count = detail::get_or<int>(j, "target_image_count", 1000, "$");
    if (cfg.target_image_count < 1)
        throw ConfigError("$.target_image_count: must be >= 1");

    if (j.contains("deadline")) {
        const auto s = detail::get_or<std::string>(j, "deadline", "", "$");
        try {
            parse_iso8601(s);
        } catch (const std::exception&) {
            throw ConfigError("$.deadline: not an ISO-8601 timestamp: \"" + s + "\"");
        }
        cfg.deadline_iso = s;
    }
    if (j.contains("deadline_seconds")) {
        const double s = detail::get_or<double>(j, "deadline_seconds", 0.0, "$");
        if (s <= 0.0) throw ConfigError("$.deadline_seconds: must be positive");
        cfg.deadline_seconds = s;
    }

    cfg.eval_fraction = detail::get_or<double>(j, "eval_fraction", 0.0, "$");
    if (cfg.eval_fraction < 0.0 || cfg.eval_fraction >= 1.0)
        throw ConfigError("$.eval_fraction: must be in [0,1)");

    cfg.output_dir = detail::get_or<std::string>(j, "output_dir", "cova-out", "$");
    cfg.queue_capacity = detail::get_or<int>(j, "queue_capacity", 64, "$");
    if (cfg.queue_capacity < 1) throw ConfigError("$.queue_capacity: must be >= 1");

    if (j.contains("drift")) {
        const auto& d = j["drift"];
        if (!d.is_object()) throw ConfigError("$.drift: must be an object");
        cfg.drift.enabled = detail::get_or<bool>(d, "enabled", false, "$.drift");
        cfg.drift.settings.window_length =
            detail::get_or<int>(d, "window_length", 100, "$.drift");
        cfg.drift.settings.threshold = detail::get_or<double>(d, "threshold", 0.5, "$.drift");
        cfg.drift.settings.consecutive_windows =
            detail::get_or<int>(d, "consecutive_windows", 2, "$.drift");
        cfg.drift.rearm = detail::get_or<bool>(d, "rearm", false, "$.drift");
        cfg.drift.max_reruns = detail::get_or<int>(d, "max_reruns", 1, "$.drift");
        if (cfg.drift.settings.window_length < 1)
            throw ConfigError("$.drift.window_length: must be >= 1");
    }
    return cfg;
}

// ------------------------------------------------------- built-in plugins

namespace detail {

inline BackgroundParams background_params_from_json(const nlohmann::json& p,
                                                    const std::string& path) {
    BackgroundParams bp;
    bp.k = get_or<int>(p, "k", bp.k, path);
    bp.alpha = get_or<double>(p, "alpha", bp.alpha, path);
    bp.background_weight_threshold =
        get_or<double>(p, "background_weight_threshold", bp.background_weight_threshold, path);
    bp.match_sigmas = get_or<double>(p, "match_sigmas", bp.match_sigmas, path);
    bp.initial_variance = get_or<double>(p, "initial_variance", bp.initial_variance, path);
    bp.initial_weight = get_or<double>(p, "initial_weight", bp.initial_weight, path);
    bp.variance_floor = get_or<double>(p, "variance_floor", bp.variance_floor, path);
    bp.blur_sigma = get_or<double>(p, "blur_sigma", bp.blur_sigma, path);
    bp.diff_threshold = get_or<int>(p, "diff_threshold", bp.diff_threshold, path);
    try {
        bp.validate();
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return bp;
}

inline MotionFilterParams motion_params_from_json(const nlohmann::json& p,
                                                  const std::string& path) {
    MotionFilterParams mp;
    mp.min_area = get_or<std::int64_t>(p, "min_area", mp.min_area, path);
    mp.min_area_fraction =
        get_or<double>(p, "min_area_fraction", mp.min_area_fraction, path);
    mp.dilate_radius = get_or<int>(p, "dilate_radius", mp.dilate_radius, path);
    mp.dilate_iterations = get_or<int>(p, "dilate_iterations", mp.dilate_iterations, path);
    mp.padding = get_or<int>(p, "padding", mp.padding, path);
    return mp;
}

inline BackgroundVariant background_variant_from_json(const nlohmann::json& p,
                                                      const std::string& path) {
    const auto v = get_or<std::string>(p, "background_variant", "mog", path);
    if (v == "mog") return BackgroundVariant::MixtureOfGaussians;
    if (v == "first_frame") return BackgroundVariant::FirstFrame;
    throw ConfigError(path + ".background_variant: unknown variant \"" + v + "\"");
}

// Motion-based filter plugins share the lazily created background model
// (dimensions are only known at the first frame).
class MotionFilterBase : public FilterPlugin {
public:
    MotionFilterBase(const nlohmann::json& p, const std::string& path)
        : variant_(background_variant_from_json(p, path)),
          bparams_(background_params_from_json(p, path)),
          mparams_(motion_params_from_json(p, path)) {}

protected:
    BackgroundModel& model(const Frame& f) {
        if (!model_)
            model_.emplace(variant_, f.width, f.height, bparams_);
        return *model_;
    }
    BackgroundVariant variant_;
    BackgroundParams bparams_;
    MotionFilterParams mparams_;
    std::optional<BackgroundModel> model_;
};

class NoFilterPlugin final : public FilterPlugin {
public:
    FilterOutput process(const Frame& f) override { return filter_no_op(f); }
};

class StaticFramesFilterPlugin final : public MotionFilterBase {
public:
    using MotionFilterBase::MotionFilterBase;
    FilterOutput process(const Frame& f) override {
        return filter_static(f, model(f), mparams_);
    }
};

class MovingObjectsFilterPlugin final : public MotionFilterBase {
public:
    MovingObjectsFilterPlugin(const nlohmann::json& p, const std::string& path)
        : MotionFilterBase(p, path) {
        const auto mode = get_or<std::string>(p, "region_mode", "per_region", path);
        if (mode == "per_region")
            mode_ = RegionMode::PerRegion;
        else if (mode == "enclosing_box")
            mode_ = RegionMode::EnclosingBox;
        else
            throw ConfigError(path + ".region_mode: unknown mode \"" + mode + "\"");
        const double mse = get_or<double>(p, "dedup_mse_threshold", 0.0, path);
        if (mse > 0.0) dedup_.emplace(mse);
    }

    FilterOutput process(const Frame& f) override {
        FilterOutput out = filter_moving_regions(f, model(f), mparams_, mode_);
        if (!dedup_) return out;
        FilterOutput kept;
        for (auto& item : out.items)
            if (dedup_->keep(item)) kept.items.push_back(std::move(item));
        return kept;
    }

private:
    RegionMode mode_ = RegionMode::PerRegion;
    std::optional<MseDeduplicator> dedup_;
};

}  // namespace detail

inline const PluginRegistry& PluginRegistry::builtins() {
    static const PluginRegistry registry = [] {
        PluginRegistry r;
        r.capture["image_directory"] = [](const nlohmann::json& p, const PipelineConfig&) {
            FrameSourceConfig sc;
            sc.kind = SourceKind::ImageDirectory;
            sc.path = detail::get_or<std::string>(p, "path", "", "capture.params");
            if (sc.path.empty()) throw ConfigError("capture.params.path: required");
            sc.loop = detail::get_or<bool>(p, "loop", false, "capture.params");
            sc.frame_rate_hint =
                detail::get_or<double>(p, "frame_rate", 30.0, "capture.params");
            return std::make_unique<FrameSource>(sc);
        };
        r.capture["raw_video"] = [](const nlohmann::json& p, const PipelineConfig&) {
            FrameSourceConfig sc;
            sc.kind = SourceKind::RawVideoFile;
            sc.path = detail::get_or<std::string>(p, "path", "", "capture.params");
            if (sc.path.empty()) throw ConfigError("capture.params.path: required");
            sc.loop = detail::get_or<bool>(p, "loop", false, "capture.params");
            sc.frame_rate_hint =
                detail::get_or<double>(p, "frame_rate", 30.0, "capture.params");
            return std::make_unique<FrameSource>(sc);
        };
        r.filter["no_filter"] = [](const nlohmann::json&, const PipelineConfig&) {
            return std::unique_ptr<FilterPlugin>(new detail::NoFilterPlugin());
        };
        r.filter["filter_static_frames"] = [](const nlohmann::json& p, const PipelineConfig&) {
            return std::unique_ptr<FilterPlugin>(
                new detail::StaticFramesFilterPlugin(p, "filter.params"));
        };
        r.filter["moving_objects_only"] = [](const nlohmann::json& p, const PipelineConfig&) {
            return std::unique_ptr<FilterPlugin>(
                new detail::MovingObjectsFilterPlugin(p, "filter.params"));
        };
        r.annotate["http"] = [](const nlohmann::json& p, const PipelineConfig& cfg) {
            AnnotatorConfig ac;
            ac.endpoint = detail::get_or<std::string>(p, "endpoint", "", "annotate.params");
            if (ac.endpoint.empty()) throw ConfigError("annotate.params.endpoint: required");
            ac.min_confidence =
                detail::get_or<double>(p, "min_confidence", ac.min_confidence,
                                       "annotate.params");
            ac.timeout_ms = detail::get_or<int>(p, "timeout_ms", ac.timeout_ms,
                                                "annotate.params");
            ac.max_retries = detail::get_or<int>(p, "max_retries", ac.max_retries,
                                                 "annotate.params");
            ac.max_in_flight = detail::get_or<int>(p, "max_in_flight", ac.max_in_flight,
                                                   "annotate.params");
            ac.backoff_base_ms = detail::get_or<int>(p, "backoff_base_ms",
                                                     ac.backoff_base_ms, "annotate.params");
            ac.target_classes = cfg.target_classes;
            try {
                ac.validate();
            } catch (const std::exception& e) {
                throw ConfigError(std::string("annotate.params: ") + e.what());
            }
            return std::unique_ptr<Annotator>(new HttpAnnotator(ac));
        };
        r.annotate["oracle_file"] = [](const nlohmann::json& p, const PipelineConfig& cfg) {
            const auto gt =
                detail::get_or<std::string>(p, "ground_truth", "", "annotate.params");
            if (gt.empty()) throw ConfigError("annotate.params.ground_truth: required");
            GroundTruthStore store;
            try {
                store = load_ground_truth(gt);
            } catch (const std::exception& e) {
                throw ConfigError("annotate.params.ground_truth: " + std::string(e.what()));
            }
            DegradationProfile profile;
            if (p.contains("degradation")) {
                try {
                    profile = DegradationProfile::from_json(p["degradation"]);
                } catch (const std::exception& e) {
                    throw ConfigError("annotate.params.degradation: " +
                                      std::string(e.what()));
                }
            }
            AnnotatorConfig ac;
            ac.endpoint = "oracle_file";
            ac.min_confidence = detail::get_or<double>(p, "min_confidence",
                                                       ac.min_confidence, "annotate.params");
            ac.max_in_flight = detail::get_or<int>(p, "max_in_flight", ac.max_in_flight,
                                                   "annotate.params");
            ac.target_classes = cfg.target_classes;
            return std::unique_ptr<Annotator>(
                new OracleFileAnnotator(std::move(store), ac, profile));
        };
        r.dataset["default"] = [](const nlohmann::json&) {};
        r.train["external_command"] = [](const nlohmann::json& p, const PipelineConfig&) {
            TrainerSpec spec;
            spec.command = detail::get_or<std::string>(p, "command", "", "train.params");
            spec.epochs = detail::get_or<int>(p, "epochs", 0, "train.params");
            const auto layers =
                detail::get_or<std::string>(p, "trainable_layers", "box_regression",
                                            "train.params");
            try {
                spec.trainable_layers = trainable_layers_from_string(layers);
                spec.validate();
            } catch (const std::exception& e) {
                throw ConfigError(std::string("train.params: ") + e.what());
            }
            return std::optional<TrainerSpec>(spec);
        };
        r.train["none"] = [](const nlohmann::json&, const PipelineConfig&) {
            return std::optional<TrainerSpec>();
        };
        return r;
    }();
    return registry;
}

// -------------------------------------------------------------------- run

// Cooperative stop handle for external shutdown (e.g. SIGINT).
class RunController {
public:
    void request_stop() { stop_.store(true); }
    bool stop_requested() const { return stop_.load(); }

private:
    std::atomic<bool> stop_{false};
};

namespace detail {

struct AnnotateJob {
    std::uint64_t ticket = 0;
    FilterItem item;
};

struct AnnotateResult {
    std::uint64_t ticket = 0;
    bool failed = false;  // item-level failure; skipped by the dataset stage
    AnnotatedItem annotated;
    Frame stored_image;
};

// Min-heap reordering by ticket so dataset-stage consumption matches
// filter-stage emission order regardless of annotator completion order.
class Reorderer {
public:
    void add(AnnotateResult r) { heap_.push(std::move(r)); }
    std::optional<AnnotateResult> next_in_order() {
        if (heap_.empty() || heap_.top().ticket != next_) return std::nullopt;
        AnnotateResult out = heap_.top();
        heap_.pop();
        ++next_;
        return out;
    }

private:
    struct ByTicket {
        bool operator()(const AnnotateResult& a, const AnnotateResult& b) const {
            return a.ticket > b.ticket;
        }
    };
    std::priority_queue<AnnotateResult, std::vector<AnnotateResult>, ByTicket> heap_;
    std::uint64_t next_ = 0;
};

}  // namespace detail

// Executes one collection run: capture→filter feed one worker, annotate
// fans out, the dataset stage is the single consumer and owns the stop
// condition. Returns a report instead of throwing so partial metrics and
// the partial dataset survive failures.
inline RunReport run(const PipelineConfig& cfg,
                     const PluginRegistry& registry = PluginRegistry::builtins(),
                     RunController* controller = nullptr,
                     const std::filesystem::path& dataset_subdir = "dataset") {
    RunReport report;
    report.dataset_dir = cfg.output_dir / dataset_subdir;

    std::unique_ptr<FrameSource> source;
    std::unique_ptr<FilterPlugin> filter;
    std::unique_ptr<Annotator> annotator;
    std::optional<TrainerSpec> trainer_spec;
    int annotate_workers = 4;
    try {
        const auto& cap = cfg.stage("capture");
        const auto& fil = cfg.stage("filter");
        const auto& ann = cfg.stage("annotate");
        const auto& tr = cfg.stage("train");
        source = registry.capture.at(cap.plugin)(cap.params, cfg);
        filter = registry.filter.at(fil.plugin)(fil.params, cfg);
        annotator = registry.annotate.at(ann.plugin)(ann.params, cfg);
        trainer_spec = registry.train.at(tr.plugin)(tr.params, cfg);
        annotate_workers =
            detail::get_or<int>(ann.params, "max_in_flight", 4, "annotate.params");
        if (annotate_workers < 1) throw ConfigError("annotate.params.max_in_flight: >= 1");
    } catch (const ConfigError& e) {
        report.exit_code = kExitConfigError;
        report.error = e.what();
        return report;
    } catch (const std::exception& e) {
        report.exit_code = kExitConfigError;
        report.error = e.what();
        return report;
    }

    std::optional<std::chrono::system_clock::time_point> deadline;
    if (cfg.deadline_iso) deadline = parse_iso8601(*cfg.deadline_iso);
    if (cfg.deadline_seconds)
        deadline = current_time() + std::chrono::milliseconds(
                                        std::int64_t(*cfg.deadline_seconds * 1000.0));

    DatasetWriter writer(report.dataset_dir, cfg.labels, cfg.target_classes,
                         cfg.target_image_count, deadline, cfg.fingerprint);
    writer.manifest().eval_fraction = cfg.eval_fraction;

    BoundedQueue<detail::AnnotateJob> jobs(std::size_t(cfg.queue_capacity));
    BoundedQueue<detail::AnnotateResult> results(std::size_t(cfg.queue_capacity));
    std::atomic<bool> stop{false};         // dataset stage reached a stop condition
    std::atomic<bool> fatal{false};        // annotation endpoint unavailable
    std::atomic<bool> deadline_hit{false};
    std::string fatal_message;
    std::mutex fatal_m;
    RunMetrics metrics;
    std::atomic<std::int64_t> requests{0}, errors{0}, bytes{0}, annotate_us{0};

    auto stop_requested = [&] {
        return stop.load() || fatal.load() ||
               (controller && controller->stop_requested());
    };

    const auto t_run0 = std::chrono::steady_clock::now();
    std::thread producer([&] {
        const auto t0 = std::chrono::steady_clock::now();
        std::uint64_t ticket = 0;
        while (!stop_requested()) {
            // Guards against deadline starvation: a motionless stream never
            // reaches the dataset stage, so the deadline is checked here too.
            if (deadline && current_time() >= *deadline) {
                deadline_hit.store(true);
                break;
            }
            auto f = source->next_frame();
            if (!f) break;
            ++metrics.frames_captured;
            FilterOutput out = filter->process(*f);
            bool aborted = false;
            for (auto& item : out.items) {
                ++metrics.items_passed_filter;
                if (!jobs.push({ticket++, std::move(item)})) {
                    aborted = true;
                    break;
                }
            }
            if (aborted) break;
        }
        jobs.close();
        metrics.capture_filter_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
    });

    std::atomic<int> live_workers{annotate_workers};
    std::vector<std::thread> workers;
    for (int w = 0; w < annotate_workers; ++w)
        workers.emplace_back([&] {
            while (auto job = jobs.pop()) {
                detail::AnnotateResult res;
                res.ticket = job->ticket;
                AnnotationRequest req;
                req.png = encode_png(job->item.crop);
                req.offset_x = job->item.offset_x;
                req.offset_y = job->item.offset_y;
                req.crop_width = job->item.crop.width;
                req.crop_height = job->item.crop.height;
                // The crop records only its own offset; frame dimensions
                // bound the remap clamp.
                req.frame_width = job->item.offset_x + job->item.crop.width;
                req.frame_height = job->item.offset_y + job->item.crop.height;
                req.frame_id = job->item.crop.name.empty() ? job->item.stream_id
                                                           : job->item.crop.name;
                req.stream_id = job->item.stream_id;
                req.frame_index = job->item.source_frame;
                req.crop_index = int(job->ticket & 0x7fffffff);
                bytes += std::int64_t(req.png.size());
                ++requests;
                const auto t_ann = std::chrono::steady_clock::now();
                try {
                    res.annotated = annotator->annotate(req);
                    res.stored_image = std::move(job->item.crop);
                } catch (const ProtocolError&) {
                    ++errors;
                    res.failed = true;  // item-level: count and continue
                } catch (const AnnotationError& e) {
                    {
                        std::lock_guard lk(fatal_m);
                        fatal_message = e.what();
                    }
                    fatal.store(true);
                    jobs.cancel();
                    break;
                }
                annotate_us += std::chrono::duration_cast<std::chrono::microseconds>(
                                   std::chrono::steady_clock::now() - t_ann)
                                   .count();
                if (!results.push(std::move(res))) break;
            }
            if (--live_workers == 0) results.close();
        });

    // Dataset stage: single consumer, reordered by ticket.
    const auto t_ds0 = std::chrono::steady_clock::now();
    detail::Reorderer reorder;
    DriftMonitor drift(cfg.drift.settings);
    while (auto res = results.pop()) {
        reorder.add(std::move(*res));
        while (auto next = reorder.next_in_order()) {
            if (next->failed) continue;
            if (stop.load()) continue;  // drained, not stored
            // Re-base the annotated coordinates: the writer subtracts the
            // item offset, which remap_to_frame already applied.
            const auto status = writer.accumulate(next->annotated, next->stored_image);
            if (status == AccumulateStatus::Accepted ||
                (status == AccumulateStatus::StopCount &&
                 int(writer.manifest().examples.size()) == cfg.target_image_count)) {
                metrics.examples_accepted = std::int64_t(writer.manifest().examples.size());
                if (cfg.drift.enabled)
                    for (const auto& a : writer.manifest().examples.back().annotations)
                        if (auto sig = drift.observe(a.label)) {
                            report.drift_signals.push_back(*sig);
                            if (cfg.drift.rearm) report.rearm_requested = true;
                        }
            }
            if (is_stop(status) && !stop.load()) {
                report.stop_reason =
                    status == AccumulateStatus::StopCount ? "count" : "deadline";
                stop.store(true);  // producer stops; in-flight work drains
            }
        }
    }
    metrics.dataset_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_ds0)
            .count();

    producer.join();
    for (auto& w : workers) w.join();

    metrics.annotation_requests = requests.load();
    metrics.annotation_errors = errors.load();
    metrics.bytes_uploaded = bytes.load();
    metrics.examples_accepted = std::int64_t(writer.manifest().examples.size());
    metrics.queue_high_water = std::max(jobs.high_water(), results.high_water());
    metrics.annotate_ms = double(annotate_us.load()) / 1000.0;  // cumulative in-annotator
    (void)t_run0;
    report.metrics = metrics;

    if (report.stop_reason.empty()) {
        if (fatal.load())
            report.stop_reason = "fatal";
        else if (deadline_hit.load())
            report.stop_reason = "deadline";
        else if (controller && controller->stop_requested())
            report.stop_reason = "stopped";
        else
            report.stop_reason = "end_of_stream";
    }

    // Always leave a loadable manifest behind, even on failure paths.
    write_manifest(writer.dir(), writer.manifest());
    report.manifest_path = writer.dir() / "manifest.json";

    if (fatal.load()) {
        report.exit_code = kExitAnnotationUnavailable;
        std::lock_guard lk(fatal_m);
        report.error = "annotation unavailable: " + fatal_message;
        return report;
    }

    try {
        if (cfg.eval_fraction > 0.0) {
            auto [train_set, eval_set] =
                split_by_video(writer.manifest().examples, cfg.eval_fraction);
            export_coco(train_set, cfg.labels, writer.dir());
            export_coco(eval_set, cfg.labels, writer.dir() / "eval");
            std::filesystem::rename(writer.dir() / "eval" / "annotations.json",
                                    writer.dir() / "eval_annotations.json");
            std::filesystem::remove(writer.dir() / "eval");
        } else {
            export_coco(writer.manifest().examples, cfg.labels, writer.dir());
        }
    } catch (const std::exception& e) {
        report.exit_code = kExitStageFailure;
        report.error = std::string("dataset export failed: ") + e.what();
        return report;
    }

    if (trainer_spec) {
        try {
            report.trainer =
                invoke_trainer(*trainer_spec, writer.dir(), cfg.output_dir / "model");
        } catch (const TrainerFailed& e) {
            report.exit_code = kExitTrainerFailed;
            report.error = e.what();
            return report;
        }
    }
    return report;
}

// Runs the pipeline; when drift re-arm is enabled and a signal fired,
// collection reruns into rerun-N subdirectories (bounded by max_reruns).
inline RunReport run_pipeline(const PipelineConfig& cfg,
                              const PluginRegistry& registry = PluginRegistry::builtins(),
                              RunController* controller = nullptr) {
    RunReport report = run(cfg, registry, controller, "dataset");
    int rerun = 0;
    while (report.rearm_requested && rerun < cfg.drift.max_reruns &&
           report.exit_code == kExitSuccess &&
           !(controller && controller->stop_requested())) {
        ++rerun;
        RunReport again =
            run(cfg, registry, controller, "rerun-" + std::to_string(rerun));
        const bool again_rearm = again.rearm_requested;
        report.reruns.push_back(std::move(again));
        if (!again_rearm) break;
    }
    return report;
}

// ------------------------------------------------------------- reporting

inline nlohmann::ordered_json report_to_json(const RunReport& r) {
    nlohmann::ordered_json j;
    j["exit_code"] = r.exit_code;
    j["stop_reason"] = r.stop_reason;
    if (!r.error.empty()) j["error"] = r.error;
    j["dataset_dir"] = r.dataset_dir.string();
    j["manifest"] = r.manifest_path.string();
    j["metrics"] = {{"frames_captured", r.metrics.frames_captured},
                    {"items_passed_filter", r.metrics.items_passed_filter},
                    {"annotation_requests", r.metrics.annotation_requests},
                    {"annotation_errors", r.metrics.annotation_errors},
                    {"examples_accepted", r.metrics.examples_accepted},
                    {"bytes_uploaded", r.metrics.bytes_uploaded},
                    {"capture_filter_ms", r.metrics.capture_filter_ms},
                    {"annotate_ms", r.metrics.annotate_ms},
                    {"dataset_ms", r.metrics.dataset_ms},
                    {"queue_high_water", r.metrics.queue_high_water}};
    j["drift_signals"] = nlohmann::ordered_json::array();
    for (const auto& s : r.drift_signals)
        j["drift_signals"].push_back(
            {{"window_index", s.window_index}, {"divergence", s.divergence}});
    j["rearm_requested"] = r.rearm_requested;
    if (r.trainer)
        j["trainer"] = {{"command", r.trainer->command}, {"exit_code", r.trainer->exit_code}};
    for (const auto& rr : r.reruns) j["reruns"].push_back(report_to_json(rr));
    if (r.reruns.empty()) j["reruns"] = nlohmann::ordered_json::array();
    return j;
}

}  // namespace cova
