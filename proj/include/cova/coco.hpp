#pragma once

// COCO JSON reading/writing: the canonical dataset interchange format, plus
// the detections JSON-lines format consumed by the evaluator.
// annotations.json schema (field names bit-exact):
//   images:      [{id, file_name, width, height}]
//   annotations: [{id, image_id, category_id, bbox:[x,y,w,h], area,
//                  iscrowd:0, score?}]   (bbox in absolute pixels; score is
//                  this artifact's provenance extension)
//   categories:  [{id, name}]

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cova/core.hpp"
#include "cova/evaluate.hpp"

namespace cova {

struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CocoImage {
    int id = 0;
    std::string file_name;
    int width = 0;
    int height = 0;
};

struct CocoAnnotation {
    int id = 0;
    int image_id = 0;
    int category_id = 0;
    BoundingBox box;       // internal corner form
    double score = -1.0;   // < 0 means absent
};

struct CocoDataset {
    std::vector<CocoImage> images;
    std::vector<CocoAnnotation> annotations;
    LabelMap labels;
};

inline nlohmann::ordered_json coco_to_json(const CocoDataset& ds) {
    nlohmann::ordered_json j;
    j["images"] = nlohmann::ordered_json::array();
    for (const auto& im : ds.images)
        j["images"].push_back({{"id", im.id},
                               {"file_name", im.file_name},
                               {"width", im.width},
                               {"height", im.height}});
    j["annotations"] = nlohmann::ordered_json::array();
    for (const auto& a : ds.annotations) {
        nlohmann::ordered_json ja = {
            {"id", a.id},
            {"image_id", a.image_id},
            {"category_id", a.category_id},
            {"bbox", {a.box.x_min, a.box.y_min, a.box.width(), a.box.height()}},
            {"area", a.box.area()},
            {"iscrowd", 0}};
        if (a.score >= 0.0) ja["score"] = a.score;
        j["annotations"].push_back(std::move(ja));
    }
    j["categories"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < ds.labels.size(); ++i)
        j["categories"].push_back({{"id", int(i) + 1}, {"name", ds.labels.names()[i]}});
    return j;
}

inline void write_coco_json(const std::filesystem::path& path, const CocoDataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    os << coco_to_json(ds).dump(2) << "\n";
}

inline CocoDataset parse_coco_json(const nlohmann::json& j) {
    auto require = [](const nlohmann::json& obj, const char* key,
                      const std::string& where) -> const nlohmann::json& {
        if (!obj.contains(key))
            throw SchemaError("missing \"" + std::string(key) + "\" at " + where);
        return obj.at(key);
    };
    CocoDataset ds;
    std::map<int, std::string> cat_names;
    for (const auto& c : require(j, "categories", "$"))
        cat_names[require(c, "id", "$.categories").get<int>()] =
            require(c, "name", "$.categories").get<std::string>();
    // Ids must be contiguous from 1 to map onto a LabelMap.
    for (std::size_t i = 1; i <= cat_names.size(); ++i) {
        auto it = cat_names.find(int(i));
        if (it == cat_names.end())
            throw SchemaError("category ids not contiguous from 1 at $.categories");
        ds.labels.add(it->second);
    }
    std::map<int, std::size_t> image_index;
    for (const auto& im : require(j, "images", "$")) {
        CocoImage ci;
        ci.id = require(im, "id", "$.images").get<int>();
        ci.file_name = require(im, "file_name", "$.images").get<std::string>();
        ci.width = require(im, "width", "$.images").get<int>();
        ci.height = require(im, "height", "$.images").get<int>();
        if (image_index.count(ci.id)) throw SchemaError("duplicate image id at $.images");
        image_index[ci.id] = ds.images.size();
        ds.images.push_back(std::move(ci));
    }
    for (const auto& a : require(j, "annotations", "$")) {
        CocoAnnotation ca;
        ca.id = require(a, "id", "$.annotations").get<int>();
        ca.image_id = require(a, "image_id", "$.annotations").get<int>();
        ca.category_id = require(a, "category_id", "$.annotations").get<int>();
        if (!image_index.count(ca.image_id))
            throw SchemaError("annotation references missing image id " +
                              std::to_string(ca.image_id) + " at $.annotations");
        if (!cat_names.count(ca.category_id))
            throw SchemaError("annotation references missing category id at $.annotations");
        const auto& bbox = require(a, "bbox", "$.annotations");
        if (!bbox.is_array() || bbox.size() != 4)
            throw SchemaError("bbox must be [x,y,w,h] at $.annotations");
        const double x = bbox[0], y = bbox[1], w = bbox[2], h = bbox[3];
        if (w < 0 || h < 0) throw SchemaError("negative bbox extent at $.annotations");
        ca.box = {x, y, x + w, y + h};
        if (a.contains("score")) ca.score = a.at("score").get<double>();
        ds.annotations.push_back(std::move(ca));
    }
    return ds;
}

inline CocoDataset read_coco_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("invalid JSON: ") + e.what());
    }
    return parse_coco_json(j);
}

// GT per image keyed by file name, in evaluator form.
inline GroundTruthSet coco_ground_truth(const CocoDataset& ds) {
    std::map<int, std::string> id_to_name;
    for (const auto& im : ds.images) id_to_name[im.id] = im.file_name;
    GroundTruthSet out;
    for (const auto& im : ds.images) out[im.file_name];  // images with no GT still count
    for (const auto& a : ds.annotations)
        out[id_to_name.at(a.image_id)].push_back({a.box, ds.labels.name_of(a.category_id)});
    return out;
}

// ------------------------------------------------- detections JSON lines
// One object per line: {"image_id": "...", "label": "...", "score": s,
// "box": [x,y,w,h]}.

inline void write_detections_jsonl(const std::filesystem::path& path, const DetectionSet& dets) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    for (const auto& [image_id, list] : dets)
        for (const auto& d : list) {
            nlohmann::ordered_json j = {
                {"image_id", image_id},
                {"label", d.label},
                {"score", d.score},
                {"box", {d.box.x_min, d.box.y_min, d.box.width(), d.box.height()}}};
            os << j.dump() << "\n";
        }
}

inline DetectionSet read_detections_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path.string());
    DetectionSet out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("line " + std::to_string(lineno) + ": " + e.what());
        }
        for (const char* key : {"image_id", "label", "score", "box"})
            if (!j.contains(key))
                throw SchemaError("line " + std::to_string(lineno) + ": missing \"" +
                                  key + "\"");
        const auto& b = j["box"];
        if (!b.is_array() || b.size() != 4)
            throw SchemaError("line " + std::to_string(lineno) + ": box must be [x,y,w,h]");
        const double x = b[0], y = b[1], w = b[2], h = b[3];
        out[j["image_id"].get<std::string>()].push_back(
            {{x, y, x + w, y + h}, j["label"].get<std::string>(), j["score"].get<double>()});
    }
    return out;
}

}  // namespace cova
