#pragma once

// COCO-style detection evaluation: greedy score-ordered matching, 101-point
// interpolated AP, mAP over the 0.50:0.05:0.95 threshold sweep, plus a
// total-variation drift monitor over class histograms.
//
// Settings pinned for comparability: single area range "all", maxDets 100,
// all ground truth treated as iscrowd=0.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cova/core.hpp"

namespace cova {

inline constexpr int kMaxDetections = 100;

inline std::vector<double> coco_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
    return t;
}

struct MatchResult {
    std::vector<bool> tp;  // per detection, in the given (score-desc) order
    int fn = 0;            // unmatched ground-truth count
};

// Greedy one-to-one matching for a single image and class set. Detections
// must arrive sorted by descending score (ties by insertion order); each
// detection takes the unmatched same-class GT with the highest IoU >=
// threshold.
inline MatchResult match(const std::vector<Detection>& dets,
                         const std::vector<GroundTruthObject>& gts, double iou_threshold) {
    MatchResult r;
    r.tp.assign(dets.size(), false);
    std::vector<bool> taken(gts.size(), false);
    for (std::size_t d = 0; d < dets.size(); ++d) {
        double best = iou_threshold;
        int best_g = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].label != dets[d].label) continue;
            const double v = iou(dets[d].box, gts[g].box);
            if (v >= best && (best_g < 0 || v > best)) {
                best = v;
                best_g = static_cast<int>(g);
            }
        }
        if (best_g >= 0) {
            taken[best_g] = true;
            r.tp[d] = true;
        }
    }
    r.fn = static_cast<int>(std::count(taken.begin(), taken.end(), false));
    return r;
}

// 101-point interpolated AP. Input: TP flags for one class across all
// images, globally sorted by descending score, plus the class's total GT
// count.
inline double average_precision(const std::vector<bool>& tp_flags, std::int64_t total_gt) {
    if (total_gt <= 0) throw std::invalid_argument("average_precision: no ground truth");
    std::vector<double> precision, recall;
    std::int64_t tp = 0, fp = 0;
    for (bool is_tp : tp_flags) {
        is_tp ? ++tp : ++fp;
        precision.push_back(double(tp) / double(tp + fp));
        recall.push_back(double(tp) / double(total_gt));
    }
    double sum = 0.0;
    for (int i = 0; i <= 100; ++i) {
        const double r = i / 100.0;
        double p_interp = 0.0;
        for (std::size_t j = 0; j < recall.size(); ++j)
            if (recall[j] >= r) p_interp = std::max(p_interp, precision[j]);
        sum += p_interp;
    }
    return sum / 101.0;
}

struct ClassEvaluation {
    std::string label;
    std::int64_t gt_count = 0;
    std::map<double, double> ap_by_threshold;
    double ap = 0.0;  // mean over thresholds
};

struct EvaluationReport {
    std::vector<ClassEvaluation> per_class;  // classes with >= 1 GT instance
    double map = 0.0;
};

// Detections and ground truth grouped per image id.
using DetectionSet = std::map<std::string, std::vector<Detection>>;
using GroundTruthSet = std::map<std::string, std::vector<GroundTruthObject>>;

inline EvaluationReport evaluate(const DetectionSet& dets_per_image,
                                 const GroundTruthSet& gts_per_image,
                                 const LabelMap& labels) {
    std::int64_t total_gt = 0;
    for (const auto& [_, gts] : gts_per_image) total_gt += gts.size();
    if (total_gt == 0) throw std::invalid_argument("evaluate: no ground truth anywhere");

    const auto thresholds = coco_iou_thresholds();
    EvaluationReport report;
    double ap_sum = 0.0;

    for (const auto& label : labels.names()) {
        ClassEvaluation ce;
        ce.label = label;
        for (const auto& [_, gts] : gts_per_image)
            for (const auto& g : gts) ce.gt_count += g.label == label;
        if (ce.gt_count == 0) continue;  // class excluded from mAP

        double threshold_ap_sum = 0.0;
        for (double t : thresholds) {
            // Per image: match class-filtered, score-sorted, maxDets-capped
            // detections; then merge globally by score for the PR curve.
            std::vector<std::pair<double, bool>> scored;  // (score, tp)
            for (const auto& [image_id, dets] : dets_per_image) {
                std::vector<Detection> cls_dets;
                for (const auto& d : dets)
                    if (d.label == label) cls_dets.push_back(d);
                std::stable_sort(cls_dets.begin(), cls_dets.end(),
                                 [](const Detection& a, const Detection& b) {
                                     return a.score > b.score;
                                 });
                if (cls_dets.size() > kMaxDetections) cls_dets.resize(kMaxDetections);
                std::vector<GroundTruthObject> cls_gts;
                auto it = gts_per_image.find(image_id);
                if (it != gts_per_image.end())
                    for (const auto& g : it->second)
                        if (g.label == label) cls_gts.push_back(g);
                const auto m = match(cls_dets, cls_gts, t);
                for (std::size_t i = 0; i < cls_dets.size(); ++i)
                    scored.push_back({cls_dets[i].score, m.tp[i]});
            }
            std::stable_sort(scored.begin(), scored.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            std::vector<bool> flags;
            for (const auto& [_, tp] : scored) flags.push_back(tp);
            const double ap = average_precision(flags, ce.gt_count);
            ce.ap_by_threshold[t] = ap;
            threshold_ap_sum += ap;
        }
        // Sum first, divide once: a perfect class must score exactly 1.0.
        ce.ap = threshold_ap_sum / double(thresholds.size());
        ap_sum += ce.ap;
        report.per_class.push_back(std::move(ce));
    }
    if (report.per_class.empty())
        throw std::invalid_argument("evaluate: no target class has ground truth");
    report.map = ap_sum / double(report.per_class.size());
    return report;
}

// ----------------------------------------------------------------- drift

using ClassHistogram = std::map<std::string, std::int64_t>;

// Total-variation distance between normalized class histograms, over the
// union of their supports.
inline double drift_divergence(const ClassHistogram& reference, const ClassHistogram& current) {
    double ref_total = 0.0, cur_total = 0.0;
    for (const auto& [_, c] : reference) ref_total += double(c);
    for (const auto& [_, c] : current) cur_total += double(c);
    if (ref_total == 0.0 || cur_total == 0.0) return 0.0;
    double tv = 0.0;
    auto get = [](const ClassHistogram& h, const std::string& k) {
        auto it = h.find(k);
        return it == h.end() ? std::int64_t{0} : it->second;
    };
    std::vector<std::string> keys;
    for (const auto& [k, _] : reference) keys.push_back(k);
    for (const auto& [k, _] : current)
        if (!reference.count(k)) keys.push_back(k);
    for (const auto& k : keys)
        tv += std::abs(double(get(reference, k)) / ref_total -
                       double(get(current, k)) / cur_total);
    return 0.5 * tv;
}

struct DriftSettings {
    std::int64_t window_length = 100;  // accepted items per window
    double threshold = 0.5;            // TV distance
    int consecutive_windows = 2;       // k
};

// Single-owner stateful accumulator per stream. The first full window
// becomes the reference; a retrain signal fires when divergence exceeds the
// threshold for k consecutive completed windows.
class DriftMonitor {
public:
    explicit DriftMonitor(DriftSettings s) : settings_(s) {}

    struct Signal {
        std::int64_t window_index;
        double divergence;
    };

    std::optional<Signal> observe(const std::string& label) {
        current_[label] += 1;
        if (++count_ < settings_.window_length) return std::nullopt;

        std::optional<Signal> out;
        if (!reference_set_) {
            reference_ = current_;
            reference_set_ = true;
        } else {
            const double tv = drift_divergence(reference_, current_);
            streak_ = tv > settings_.threshold ? streak_ + 1 : 0;
            if (streak_ >= settings_.consecutive_windows) {
                out = Signal{window_index_, tv};
                streak_ = 0;
            }
        }
        ++window_index_;
        current_.clear();
        count_ = 0;
        return out;
    }

private:
    DriftSettings settings_;
    ClassHistogram reference_;
    bool reference_set_ = false;
    ClassHistogram current_;
    std::int64_t count_ = 0;
    std::int64_t window_index_ = 0;
    int streak_ = 0;
};

}  // namespace cova
