#pragma once

// Dataset stage: assembles annotated items into a training dataset with
// stop conditions (count target and wall-clock deadline), target-class
// filtering, by-video train/eval splitting, class-balance reporting, COCO
// export, incremental merge, and the external-trainer invocation boundary.
//
// Stored images keep whatever the filter emitted (crop or full frame);
// annotations are expressed in the stored image's coordinate system, with
// the originating stream/frame/offset kept as provenance in manifest.json.

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <json.hpp>

#include "cova/annotate.hpp"
#include "cova/coco.hpp"
#include "cova/core.hpp"
#include "cova/io.hpp"

namespace cova {

struct TrainerFailed : std::runtime_error {
    explicit TrainerFailed(const std::string& what, int exit_code_, std::string output_)
        : std::runtime_error(what), exit_code(exit_code_), output(std::move(output_)) {}
    int exit_code;
    std::string output;
};

// ------------------------------------------------------------------ clock

// Wall clock, overridable with the COVA_CLOCK environment variable
// (ISO-8601 UTC, e.g. "2024-05-01T12:00:00Z") for deterministic tests.
inline std::chrono::system_clock::time_point parse_iso8601(const std::string& s) {
    std::tm tm{};
    std::istringstream is(s);
    is >> std::get_time(&tm, "%Y-%m-%dT%H:%M:%S");
    if (is.fail()) throw std::invalid_argument("invalid ISO-8601 timestamp: " + s);
    return std::chrono::system_clock::from_time_t(timegm(&tm));
}

inline std::string format_iso8601(std::chrono::system_clock::time_point tp) {
    const std::time_t t = std::chrono::system_clock::to_time_t(tp);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::chrono::system_clock::time_point current_time() {
    if (const char* env = std::getenv("COVA_CLOCK"); env && *env) return parse_iso8601(env);
    return std::chrono::system_clock::now();
}

// ------------------------------------------------------------------ types

struct TrainingExample {
    std::string file_name;  // relative to the dataset directory (images/...)
    int width = 0;
    int height = 0;
    std::vector<Detection> annotations;  // stored-image coordinates
    // Provenance.
    std::string stream_id;
    std::int64_t frame_index = 0;
    int crop_index = 0;
    int offset_x = 0;  // stored image's origin within the source frame
    int offset_y = 0;
};

struct DatasetManifest {
    std::string created_at;
    int target_image_count = 0;
    std::optional<std::string> deadline;  // ISO-8601, absent = none
    std::vector<std::string> label_map;   // full class list, ids 1..N in order
    std::vector<std::string> target_classes;
    std::vector<TrainingExample> examples;
    std::map<std::string, int> class_counts;  // per-class annotation instances
    double eval_fraction = 0.0;
    std::string config_fingerprint;
    std::string counts_unit = "examples";  // the count target counts stored
                                           // examples (crops when a region
                                           // filter is active), not frames
};

enum class TrainableLayers { Unfrozen, BoxRegression, Top };

inline std::string to_string(TrainableLayers t) {
    switch (t) {
        case TrainableLayers::Unfrozen: return "unfrozen";
        case TrainableLayers::BoxRegression: return "box_regression";
        case TrainableLayers::Top: return "top";
    }
    return "unfrozen";
}

inline TrainableLayers trainable_layers_from_string(const std::string& s) {
    if (s == "unfrozen") return TrainableLayers::Unfrozen;
    if (s == "box_regression") return TrainableLayers::BoxRegression;
    if (s == "top") return TrainableLayers::Top;
    throw std::invalid_argument("unknown trainable_layers value: " + s);
}

struct TrainerSpec {
    std::string command;  // template with {dataset_dir}, {label_map}, {output_dir}
    TrainableLayers trainable_layers = TrainableLayers::BoxRegression;
    int epochs = 0;  // 0 = trainer default

    void validate() const {
        if (command.find("{dataset_dir}") == std::string::npos)
            throw std::invalid_argument("trainer command must contain {dataset_dir}");
    }
};

struct TrainerReport {
    std::string command;  // after placeholder substitution
    int exit_code = 0;
    std::string output;   // combined stdout+stderr
};

// ------------------------------------------------------------- accumulate

enum class AccumulateStatus { Accepted, RejectedNoTargets, StopCount, StopDeadline };

inline const char* to_string(AccumulateStatus s) {
    switch (s) {
        case AccumulateStatus::Accepted: return "accepted";
        case AccumulateStatus::RejectedNoTargets: return "rejected_no_targets";
        case AccumulateStatus::StopCount: return "stop_count";
        case AccumulateStatus::StopDeadline: return "stop_deadline";
    }
    return "?";
}

inline bool is_stop(AccumulateStatus s) {
    return s == AccumulateStatus::StopCount || s == AccumulateStatus::StopDeadline;
}

// Single-writer dataset assembler. Images are written under dir/images/
// before the example is recorded, so a disk failure never leaves the
// manifest pointing at a missing file.
class DatasetWriter {
public:
    DatasetWriter(std::filesystem::path dir, LabelMap labels, std::vector<std::string> targets,
                  int target_image_count,
                  std::optional<std::chrono::system_clock::time_point> deadline = std::nullopt,
                  std::string config_fingerprint = {})
        : dir_(std::move(dir)), labels_(std::move(labels)), deadline_(deadline) {
        if (target_image_count < 1)
            throw std::invalid_argument("target_image_count must be >= 1");
        if (targets.empty()) throw std::invalid_argument("target_classes must be non-empty");
        std::filesystem::create_directories(dir_ / "images");
        manifest_.created_at = format_iso8601(current_time());
        manifest_.target_image_count = target_image_count;
        manifest_.label_map = labels_.names();
        manifest_.target_classes = std::move(targets);
        if (deadline_) manifest_.deadline = format_iso8601(*deadline_);
        manifest_.config_fingerprint = std::move(config_fingerprint);
        for (const auto& c : manifest_.target_classes) manifest_.class_counts[c];
    }

    // The deadline is evaluated on every call, including rejected items and
    // calls after the count target was hit.
    AccumulateStatus accumulate(const AnnotatedItem& item, const Frame& stored_image) {
        if (deadline_ && current_time() >= *deadline_) return AccumulateStatus::StopDeadline;
        if (int(manifest_.examples.size()) >= manifest_.target_image_count)
            return AccumulateStatus::StopCount;

        TrainingExample ex;
        for (const auto& d : item.detections) {
            if (std::find(manifest_.target_classes.begin(), manifest_.target_classes.end(),
                          d.label) == manifest_.target_classes.end())
                continue;
            // Frame coordinates to stored-image coordinates.
            BoundingBox b{d.box.x_min - item.offset_x, d.box.y_min - item.offset_y,
                          d.box.x_max - item.offset_x, d.box.y_max - item.offset_y};
            b = clamp_box(b, stored_image.width, stored_image.height);
            if (b.area() <= 0.0) continue;
            ex.annotations.push_back({b, d.label, d.score});
        }
        if (ex.annotations.empty()) return AccumulateStatus::RejectedNoTargets;

        ex.file_name = "images/" + sanitize(item.frame_id) + "_" +
                       std::to_string(item.frame_index) + "_" +
                       std::to_string(item.crop_index) + ".png";
        ex.width = stored_image.width;
        ex.height = stored_image.height;
        ex.stream_id = item.stream_id.empty() ? item.frame_id : item.stream_id;
        ex.frame_index = item.frame_index;
        ex.crop_index = item.crop_index;
        ex.offset_x = item.offset_x;
        ex.offset_y = item.offset_y;

        write_png(dir_ / ex.file_name, stored_image);  // write, then record
        for (const auto& a : ex.annotations) ++manifest_.class_counts[a.label];
        manifest_.examples.push_back(std::move(ex));

        return int(manifest_.examples.size()) >= manifest_.target_image_count
                   ? AccumulateStatus::StopCount
                   : AccumulateStatus::Accepted;
    }

    const DatasetManifest& manifest() const { return manifest_; }
    DatasetManifest& manifest() { return manifest_; }
    const std::filesystem::path& dir() const { return dir_; }
    const LabelMap& labels() const { return labels_; }

private:
    static std::string sanitize(const std::string& s) {
        std::string out = s.empty() ? "frame" : s;
        for (char& c : out)
            if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '-';
        return out;
    }

    std::filesystem::path dir_;
    LabelMap labels_;
    std::optional<std::chrono::system_clock::time_point> deadline_;
    DatasetManifest manifest_;
};

// --------------------------------------------------------------- manifest

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["created_at"] = m.created_at;
    j["target_image_count"] = m.target_image_count;
    j["deadline"] = m.deadline ? nlohmann::ordered_json(*m.deadline)
                               : nlohmann::ordered_json(nullptr);
    j["counts_unit"] = m.counts_unit;
    j["label_map"] = m.label_map;
    j["target_classes"] = m.target_classes;
    j["eval_fraction"] = m.eval_fraction;
    j["config_fingerprint"] = m.config_fingerprint;
    j["class_counts"] = m.class_counts;
    j["examples"] = nlohmann::ordered_json::array();
    for (const auto& e : m.examples) {
        nlohmann::ordered_json annotations = nlohmann::ordered_json::array();
        for (const auto& a : e.annotations)
            annotations.push_back(
                {{"label", a.label},
                 {"score", a.score},
                 {"bbox", {a.box.x_min, a.box.y_min, a.box.width(), a.box.height()}}});
        j["examples"].push_back({{"file_name", e.file_name},
                                 {"width", e.width},
                                 {"height", e.height},
                                 {"stream_id", e.stream_id},
                                 {"frame_index", e.frame_index},
                                 {"crop_index", e.crop_index},
                                 {"offset_x", e.offset_x},
                                 {"offset_y", e.offset_y},
                                 {"annotations", std::move(annotations)}});
    }
    return j;
}

inline void write_manifest(const std::filesystem::path& dir, const DatasetManifest& m) {
    std::ofstream os(dir / "manifest.json", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write manifest.json in " + dir.string());
    os << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("invalid manifest JSON: ") + e.what());
    }
    DatasetManifest m;
    m.created_at = j.value("created_at", "");
    m.target_image_count = j.value("target_image_count", 0);
    if (j.contains("deadline") && !j["deadline"].is_null())
        m.deadline = j["deadline"].get<std::string>();
    m.counts_unit = j.value("counts_unit", "examples");
    m.label_map = j.value("label_map", std::vector<std::string>{});
    m.target_classes = j.value("target_classes", std::vector<std::string>{});
    m.eval_fraction = j.value("eval_fraction", 0.0);
    m.config_fingerprint = j.value("config_fingerprint", "");
    if (j.contains("class_counts"))
        for (const auto& [k, v] : j["class_counts"].items()) m.class_counts[k] = v.get<int>();
    for (const auto& e : j.value("examples", nlohmann::json::array())) {
        TrainingExample ex;
        ex.file_name = e.at("file_name").get<std::string>();
        ex.width = e.value("width", 0);
        ex.height = e.value("height", 0);
        ex.stream_id = e.value("stream_id", "");
        ex.frame_index = e.value("frame_index", std::int64_t(0));
        ex.crop_index = e.value("crop_index", 0);
        ex.offset_x = e.value("offset_x", 0);
        ex.offset_y = e.value("offset_y", 0);
        for (const auto& a : e.value("annotations", nlohmann::json::array())) {
            const auto& b = a.at("bbox");
            const double x = b.at(0), y = b.at(1), w = b.at(2), h = b.at(3);
            ex.annotations.push_back({{x, y, x + w, y + h},
                                      a.at("label").get<std::string>(),
                                      a.value("score", -1.0)});
        }
        m.examples.push_back(std::move(ex));
    }
    return m;
}

// ------------------------------------------------------------ export_coco

// Writes annotations.json next to images/ with deterministic ids assigned
// by insertion order. Teacher scores are retained in the non-standard
// "score" field so a dataset can be re-thresholded without re-annotation.
inline void export_coco(const std::vector<TrainingExample>& examples, const LabelMap& labels,
                        const std::filesystem::path& out_dir) {
    if (examples.empty()) throw std::runtime_error("cannot export an empty dataset");
    std::filesystem::create_directories(out_dir);
    CocoDataset ds;
    ds.labels = labels;
    int ann_id = 0;
    for (const auto& ex : examples) {
        CocoImage im;
        im.id = int(ds.images.size()) + 1;
        im.file_name = ex.file_name;
        im.width = ex.width;
        im.height = ex.height;
        for (const auto& a : ex.annotations) {
            CocoAnnotation ca;
            ca.id = ++ann_id;
            ca.image_id = im.id;
            ca.category_id = labels.id_of(a.label);
            ca.box = a.box;
            ca.score = a.score;
            ds.annotations.push_back(ca);
        }
        ds.images.push_back(std::move(im));
    }
    write_coco_json(out_dir / "annotations.json", ds);
}

// ------------------------------------------------------------------ split

// Assigns whole origin segments (stream ids) to one side so no segment
// spans both; greedy by descending segment size until the eval side meets
// the requested fraction (within one segment).
inline std::pair<std::vector<TrainingExample>, std::vector<TrainingExample>> split_by_video(
    const std::vector<TrainingExample>& examples, double eval_fraction) {
    if (eval_fraction < 0.0 || eval_fraction >= 1.0)
        throw std::invalid_argument("eval_fraction must be in [0,1)");
    if (eval_fraction == 0.0) return {examples, {}};

    std::map<std::string, std::size_t> sizes;
    for (const auto& e : examples) ++sizes[e.stream_id];
    if (sizes.size() < 2)
        throw std::runtime_error(
            "by-video split needs at least two origin segments when eval_fraction > 0");

    std::vector<std::pair<std::string, std::size_t>> segments(sizes.begin(), sizes.end());
    std::stable_sort(segments.begin(), segments.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    const double target = eval_fraction * double(examples.size());
    std::set<std::string> eval_segments;
    std::size_t eval_count = 0;
    for (const auto& [id, n] : segments) {
        if (double(eval_count) >= target) break;
        if (eval_segments.size() + 1 == segments.size()) break;  // keep one for train
        eval_segments.insert(id);
        eval_count += n;
    }
    std::pair<std::vector<TrainingExample>, std::vector<TrainingExample>> out;
    for (const auto& e : examples)
        (eval_segments.count(e.stream_id) ? out.second : out.first).push_back(e);
    return out;
}

// ------------------------------------------------------------------ merge

namespace detail {
inline std::uint64_t fnv1a_bytes(const std::string& s) { return fnv1a(s, 0); }
}  // namespace detail

// Merges two exported dataset directories (images/ + annotations.json) into
// out_dir. Ids are re-assigned; duplicate image file names from the second
// dataset are renamed with an origin-hash suffix so both are kept.
inline void merge_datasets(const std::filesystem::path& base_dir,
                           const std::filesystem::path& extra_dir,
                           const std::filesystem::path& out_dir) {
    const CocoDataset base = read_coco_json(base_dir / "annotations.json");
    const CocoDataset extra = read_coco_json(extra_dir / "annotations.json");
    if (base.labels.names() != extra.labels.names())
        throw std::runtime_error("cannot merge datasets with different label maps");

    std::filesystem::create_directories(out_dir / "images");
    CocoDataset merged;
    merged.labels = base.labels;
    int next_ann = 0;
    std::set<std::string> used_names;

    auto ingest = [&](const CocoDataset& ds, const std::filesystem::path& src_dir) {
        std::map<int, int> image_remap;
        for (const auto& im : ds.images) {
            CocoImage out = im;
            out.id = int(merged.images.size()) + 1;
            if (used_names.count(out.file_name)) {
                const auto hash = detail::fnv1a_bytes(src_dir.string() + "/" + out.file_name);
                char suffix[20];
                std::snprintf(suffix, sizeof suffix, "-%08llx",
                              static_cast<unsigned long long>(hash & 0xffffffffull));
                const auto dot = out.file_name.rfind('.');
                out.file_name = dot == std::string::npos
                                    ? out.file_name + suffix
                                    : out.file_name.substr(0, dot) + suffix +
                                          out.file_name.substr(dot);
            }
            used_names.insert(out.file_name);
            std::filesystem::copy_file(src_dir / im.file_name, out_dir / out.file_name,
                                       std::filesystem::copy_options::overwrite_existing);
            image_remap[im.id] = out.id;
            merged.images.push_back(std::move(out));
        }
        for (const auto& a : ds.annotations) {
            CocoAnnotation out = a;
            out.id = ++next_ann;
            out.image_id = image_remap.at(a.image_id);
            merged.annotations.push_back(out);
        }
    };
    ingest(base, base_dir);
    ingest(extra, extra_dir);
    write_coco_json(out_dir / "annotations.json", merged);
}

// --------------------------------------------------- class balance report

struct ClassBalanceReport {
    std::map<std::string, int> counts;       // per target class
    std::vector<std::string> warnings;       // classes below the minimum
    int minimum = 10;
};

inline ClassBalanceReport class_balance_report(const DatasetManifest& m, int minimum = 10) {
    ClassBalanceReport r;
    r.minimum = minimum;
    for (const auto& cls : m.target_classes) {
        const auto it = m.class_counts.find(cls);
        const int n = it == m.class_counts.end() ? 0 : it->second;
        r.counts[cls] = n;
        if (n < minimum)
            r.warnings.push_back("class \"" + cls + "\" has only " + std::to_string(n) +
                                 " instances (minimum " + std::to_string(minimum) +
                                 "); specialization quality will suffer");
    }
    return r;
}

// --------------------------------------------------------- trainer launch

// Substitutes {dataset_dir}, {label_map}, {output_dir} in the command
// template and runs it through the shell, capturing combined output. The
// trainable-layers choice and epochs hint are passed through verbatim in
// the COVA_TRAINABLE_LAYERS / COVA_EPOCHS environment variables.
inline TrainerReport invoke_trainer(const TrainerSpec& spec,
                                    const std::filesystem::path& dataset_dir,
                                    const std::filesystem::path& output_dir) {
    spec.validate();
    auto substitute = [](std::string s, const std::string& key, const std::string& value) {
        for (std::size_t pos = 0; (pos = s.find(key, pos)) != std::string::npos;
             pos += value.size())
            s.replace(pos, key.size(), value);
        return s;
    };
    std::string cmd = spec.command;
    cmd = substitute(cmd, "{dataset_dir}", dataset_dir.string());
    cmd = substitute(cmd, "{label_map}", (dataset_dir / "annotations.json").string());
    cmd = substitute(cmd, "{output_dir}", output_dir.string());

    TrainerReport report;
    report.command = cmd;
    setenv("COVA_TRAINABLE_LAYERS", to_string(spec.trainable_layers).c_str(), 1);
    setenv("COVA_EPOCHS", std::to_string(spec.epochs).c_str(), 1);
    const std::string shell_cmd = "( " + cmd + " ) 2>&1";
    FILE* pipe = popen(shell_cmd.c_str(), "r");
    if (!pipe) throw TrainerFailed("failed to launch trainer: " + cmd, -1, "");
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) report.output.append(buf, n);
    const int status = pclose(pipe);
    report.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    if (report.exit_code != 0)
        throw TrainerFailed("trainer exited with status " + std::to_string(report.exit_code) +
                                ": " + cmd,
                            report.exit_code, report.output);
    return report;
}

}  // namespace cova
