#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include "cova/dataset.hpp"
#include "cova/teacher.hpp"
#include "fixtures.hpp"

using namespace cova;

namespace {

struct EnvClock {
    explicit EnvClock(const std::string& iso) { setenv("COVA_CLOCK", iso.c_str(), 1); }
    ~EnvClock() { unsetenv("COVA_CLOCK"); }
};

AnnotatedItem make_item(const std::string& stream, std::int64_t frame_index, int crop_index,
                        std::vector<Detection> dets, int offset_x = 0, int offset_y = 0) {
    AnnotatedItem item;
    item.frame_id = stream;
    item.frame_index = frame_index;
    item.crop_index = crop_index;
    item.offset_x = offset_x;
    item.offset_y = offset_y;
    item.detections = std::move(dets);
    return item;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("clock helpers") {
    const auto tp = parse_iso8601("2024-05-01T12:00:00Z");
    CHECK(format_iso8601(tp) == "2024-05-01T12:00:00Z");
    CHECK(parse_iso8601("2024-05-01T12:00:01Z") > tp);
    CHECK_THROWS_AS(parse_iso8601("not a time"), std::invalid_argument);

    EnvClock clock("2030-01-02T03:04:05Z");
    CHECK(format_iso8601(current_time()) == "2030-01-02T03:04:05Z");
}

TEST_CASE("accumulate accept / reject / stop") {
    fixtures::TempDir tmp("dataset");
    const LabelMap labels({"person", "car"});
    const Frame crop = fixtures::solid(64, 48, 80);

    SUBCASE("accepted items update per-class counts") {
        DatasetWriter w(tmp.path() / "ds", labels, {"person", "car"}, 10);
        const auto r = w.accumulate(
            make_item("s0", 0, 0,
                      {{{1, 1, 10, 10}, "person", 0.9}, {{20, 1, 30, 10}, "person", 0.8}}),
            crop);
        CHECK(r == AccumulateStatus::Accepted);
        CHECK(w.manifest().class_counts.at("person") == 2);
        CHECK(w.manifest().class_counts.at("car") == 0);
        CHECK(w.manifest().examples.size() == 1);
        CHECK(std::filesystem::exists(tmp.path() / "ds" / w.manifest().examples[0].file_name));
    }

    SUBCASE("items without target-class detections are rejected") {
        DatasetWriter w(tmp.path() / "ds", labels, {"car"}, 10);
        const auto r = w.accumulate(make_item("s0", 0, 0, {{{1, 1, 10, 10}, "person", 0.9}}),
                                    crop);
        CHECK(r == AccumulateStatus::RejectedNoTargets);
        CHECK(w.manifest().examples.empty());
        CHECK(w.accumulate(make_item("s0", 1, 0, {}), crop) ==
              AccumulateStatus::RejectedNoTargets);
    }

    SUBCASE("stop fires exactly on the Nth accepted item") {
        const int target = 5;
        DatasetWriter w(tmp.path() / "ds", labels, {"person"}, target);
        for (int i = 0; i < target - 1; ++i)
            CHECK(w.accumulate(make_item("s0", i, 0, {{{1, 1, 10, 10}, "person", 0.9}}),
                               crop) == AccumulateStatus::Accepted);
        // A rejected item in between must not advance the count.
        CHECK(w.accumulate(make_item("s0", 90, 0, {}), crop) ==
              AccumulateStatus::RejectedNoTargets);
        CHECK(w.accumulate(make_item("s0", 91, 0, {{{1, 1, 10, 10}, "person", 0.9}}), crop) ==
              AccumulateStatus::StopCount);
        CHECK(int(w.manifest().examples.size()) == target);
        // Further calls keep reporting the stop and store nothing.
        CHECK(w.accumulate(make_item("s0", 92, 0, {{{1, 1, 10, 10}, "person", 0.9}}), crop) ==
              AccumulateStatus::StopCount);
        CHECK(int(w.manifest().examples.size()) == target);
    }

    SUBCASE("deadline is honored on every call, including rejected items") {
        EnvClock clock("2024-05-01T12:00:00Z");
        DatasetWriter w(tmp.path() / "ds", labels, {"person"}, 100,
                        parse_iso8601("2024-05-01T12:10:00Z"));
        CHECK(w.accumulate(make_item("s0", 0, 0, {{{1, 1, 10, 10}, "person", 0.9}}), crop) ==
              AccumulateStatus::Accepted);
        setenv("COVA_CLOCK", "2024-05-01T12:10:00Z", 1);
        CHECK(w.accumulate(make_item("s0", 1, 0, {}), crop) == AccumulateStatus::StopDeadline);
        CHECK(w.accumulate(make_item("s0", 2, 0, {{{1, 1, 10, 10}, "person", 0.9}}), crop) ==
              AccumulateStatus::StopDeadline);
        CHECK(w.manifest().examples.size() == 1);
        CHECK(w.manifest().deadline == std::string("2024-05-01T12:10:00Z"));
    }

    SUBCASE("detections are translated into stored-image coordinates") {
        DatasetWriter w(tmp.path() / "ds", labels, {"person"}, 10);
        const auto item =
            make_item("s0", 3, 1, {{{105, 207, 125, 227}, "person", 0.7}}, 100, 200);
        CHECK(w.accumulate(item, crop) == AccumulateStatus::Accepted);
        const auto& ex = w.manifest().examples.at(0);
        CHECK(ex.annotations.size() == 1);
        CHECK(ex.annotations[0].box == BoundingBox{5, 7, 25, 27});
        CHECK(ex.offset_x == 100);
        CHECK(ex.offset_y == 200);
    }

    SUBCASE("conservation: examples match stored files, counts match annotations") {
        DatasetWriter w(tmp.path() / "ds", labels, {"person", "car"}, 100);
        std::mt19937 rng(7);
        int accepted = 0;
        for (int i = 0; i < 30; ++i) {
            std::vector<Detection> dets;
            const int n = int(rng() % 3);
            for (int d = 0; d < n; ++d)
                dets.push_back({{1.0 + d, 1, 10.0 + d, 10},
                                rng() % 2 ? "person" : "car", 0.9});
            if (w.accumulate(make_item("s0", i, 0, dets), crop) == AccumulateStatus::Accepted)
                ++accepted;
        }
        CHECK(int(w.manifest().examples.size()) == accepted);
        std::size_t files = 0;
        for ([[maybe_unused]] const auto& e :
             std::filesystem::directory_iterator(tmp.path() / "ds" / "images"))
            ++files;
        CHECK(files == w.manifest().examples.size());
        std::size_t total_annotations = 0;
        for (const auto& e : w.manifest().examples) total_annotations += e.annotations.size();
        std::size_t count_sum = 0;
        for (const auto& [cls, n] : w.manifest().class_counts) count_sum += std::size_t(n);
        CHECK(count_sum == total_annotations);
    }
}

TEST_CASE("coco export") {
    fixtures::TempDir tmp("dataset");
    const LabelMap labels({"person"});
    const Frame crop = fixtures::solid(100, 100, 90);

    SUBCASE("corner-form box becomes [x,y,w,h] with area") {
        DatasetWriter w(tmp.path() / "ds", labels, {"person"}, 10);
        w.accumulate(make_item("s0", 0, 0, {{{10, 20, 50, 60}, "person", 0.95}}), crop);
        export_coco(w.manifest().examples, labels, tmp.path() / "ds");
        const auto j = nlohmann::json::parse(slurp(tmp.path() / "ds" / "annotations.json"));
        REQUIRE(j["annotations"].size() == 1);
        const auto& a = j["annotations"][0];
        CHECK(a["bbox"] == nlohmann::json({10.0, 20.0, 40.0, 40.0}));
        CHECK(a["area"] == 1600.0);
        CHECK(a["iscrowd"] == 0);
        CHECK(a["score"] == 0.95);
        CHECK(j["categories"] == nlohmann::json({{{"id", 1}, {"name", "person"}}}));
    }

    SUBCASE("export then load round-trips the ground truth") {
        DatasetWriter w(tmp.path() / "ds", labels, {"person"}, 10);
        w.accumulate(make_item("s0", 0, 0,
                               {{{10, 20, 50, 60}, "person", 0.9},
                                {{30, 30, 80, 90}, "person", 0.8}}),
                     crop);
        w.accumulate(make_item("s0", 1, 0, {{{5, 5, 15, 15}, "person", 0.7}}), crop);
        export_coco(w.manifest().examples, labels, tmp.path() / "ds");
        const auto store = load_ground_truth(tmp.path() / "ds" / "annotations.json");
        REQUIRE(store.objects.size() == 2);
        for (const auto& ex : w.manifest().examples) {
            const auto& loaded = store.objects.at(ex.file_name);
            REQUIRE(loaded.size() == ex.annotations.size());
            for (std::size_t i = 0; i < loaded.size(); ++i) {
                CHECK(loaded[i].box == ex.annotations[i].box);
                CHECK(loaded[i].label == ex.annotations[i].label);
            }
        }
    }

    SUBCASE("two exports are byte-identical") {
        DatasetWriter w(tmp.path() / "ds", labels, {"person"}, 10);
        w.accumulate(make_item("s0", 0, 0, {{{10, 20, 50, 60}, "person", 0.9}}), crop);
        export_coco(w.manifest().examples, labels, tmp.path() / "a");
        export_coco(w.manifest().examples, labels, tmp.path() / "b");
        CHECK(slurp(tmp.path() / "a" / "annotations.json") ==
              slurp(tmp.path() / "b" / "annotations.json"));
    }

    SUBCASE("empty export is an error") {
        CHECK_THROWS(export_coco({}, labels, tmp.path() / "empty"));
    }
}

TEST_CASE("by-video split") {
    auto examples_for = [](const std::vector<std::pair<std::string, int>>& segments) {
        std::vector<TrainingExample> out;
        for (const auto& [id, n] : segments)
            for (int i = 0; i < n; ++i) {
                TrainingExample e;
                e.stream_id = id;
                e.file_name = id + "_" + std::to_string(i);
                out.push_back(e);
            }
        return out;
    };

    SUBCASE("two segments at 0.5 go one each side") {
        const auto [train, eval] = split_by_video(examples_for({{"a", 6}, {"b", 6}}), 0.5);
        CHECK(train.size() == 6);
        CHECK(eval.size() == 6);
        CHECK(train.front().stream_id != eval.front().stream_id);
    }

    SUBCASE("ten equal segments at 0.2 put two segments in eval") {
        std::vector<std::pair<std::string, int>> segs;
        for (int i = 0; i < 10; ++i) segs.push_back({"seg" + std::to_string(i), 4});
        const auto [train, eval] = split_by_video(examples_for(segs), 0.2);
        std::set<std::string> eval_ids, train_ids;
        for (const auto& e : eval) eval_ids.insert(e.stream_id);
        for (const auto& e : train) train_ids.insert(e.stream_id);
        CHECK(eval_ids.size() == 2);
        CHECK(train_ids.size() == 8);
        for (const auto& id : eval_ids) CHECK(!train_ids.count(id));
    }

    SUBCASE("no segment ever spans both sides") {
        std::mt19937 rng(11);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<std::pair<std::string, int>> segs;
            const int nseg = 2 + int(rng() % 6);
            for (int i = 0; i < nseg; ++i)
                segs.push_back({"v" + std::to_string(i), 1 + int(rng() % 9)});
            const double fraction = 0.1 + 0.8 * (rng() % 100) / 100.0;
            const auto all = examples_for(segs);
            const auto [train, eval] = split_by_video(all, fraction);
            CHECK(train.size() + eval.size() == all.size());
            CHECK(!train.empty());
            CHECK(!eval.empty());
            std::set<std::string> eval_ids, train_ids;
            for (const auto& e : eval) eval_ids.insert(e.stream_id);
            for (const auto& e : train) train_ids.insert(e.stream_id);
            for (const auto& id : eval_ids) CHECK(!train_ids.count(id));
        }
    }

    SUBCASE("zero fraction keeps everything in train") {
        const auto [train, eval] = split_by_video(examples_for({{"a", 3}}), 0.0);
        CHECK(train.size() == 3);
        CHECK(eval.empty());
    }

    SUBCASE("single segment with positive fraction is an error") {
        CHECK_THROWS(split_by_video(examples_for({{"a", 5}}), 0.2));
    }
}

TEST_CASE("dataset merge") {
    fixtures::TempDir tmp("dataset");
    const LabelMap labels({"person"});
    const Frame crop = fixtures::solid(32, 32, 70);

    auto build = [&](const std::filesystem::path& dir, const std::string& stream, int n) {
        DatasetWriter w(dir, labels, {"person"}, 100);
        for (int i = 0; i < n; ++i)
            w.accumulate(make_item(stream, i, 0, {{{1, 1, 10, 10}, "person", 0.9}}), crop);
        export_coco(w.manifest().examples, labels, dir);
    };

    SUBCASE("merging with an empty dataset re-emits the same content") {
        build(tmp.path() / "d", "a", 3);
        CocoDataset empty;
        empty.labels = labels;
        std::filesystem::create_directories(tmp.path() / "empty" / "images");
        write_coco_json(tmp.path() / "empty" / "annotations.json", empty);
        merge_datasets(tmp.path() / "d", tmp.path() / "empty", tmp.path() / "out");
        const auto merged = read_coco_json(tmp.path() / "out" / "annotations.json");
        const auto base = read_coco_json(tmp.path() / "d" / "annotations.json");
        REQUIRE(merged.images.size() == base.images.size());
        for (std::size_t i = 0; i < merged.images.size(); ++i)
            CHECK(merged.images[i].file_name == base.images[i].file_name);
        CHECK(merged.annotations.size() == base.annotations.size());
    }

    SUBCASE("disjoint merge of 3 and 4 yields 7 images with additive counts") {
        build(tmp.path() / "d1", "a", 3);
        build(tmp.path() / "d2", "b", 4);
        merge_datasets(tmp.path() / "d1", tmp.path() / "d2", tmp.path() / "out");
        const auto merged = read_coco_json(tmp.path() / "out" / "annotations.json");
        CHECK(merged.images.size() == 7);
        CHECK(merged.annotations.size() == 7);
        std::set<int> ids;
        for (const auto& im : merged.images) ids.insert(im.id);
        CHECK(ids.size() == 7);
        for (const auto& im : merged.images)
            CHECK(std::filesystem::exists(tmp.path() / "out" / im.file_name));
    }

    SUBCASE("duplicate file names get an origin-hash suffix and both survive") {
        build(tmp.path() / "d1", "a", 2);
        build(tmp.path() / "d2", "a", 2);  // same stream id → same file names
        merge_datasets(tmp.path() / "d1", tmp.path() / "d2", tmp.path() / "out");
        const auto merged = read_coco_json(tmp.path() / "out" / "annotations.json");
        CHECK(merged.images.size() == 4);
        std::set<std::string> names;
        for (const auto& im : merged.images) {
            CHECK(!names.count(im.file_name));
            names.insert(im.file_name);
            CHECK(std::filesystem::exists(tmp.path() / "out" / im.file_name));
        }
    }

    SUBCASE("label-map mismatch is an error") {
        build(tmp.path() / "d1", "a", 1);
        const LabelMap other({"person", "car"});
        DatasetWriter w(tmp.path() / "d2", other, {"person"}, 100);
        w.accumulate(make_item("b", 0, 0, {{{1, 1, 10, 10}, "person", 0.9}}), crop);
        export_coco(w.manifest().examples, other, tmp.path() / "d2");
        CHECK_THROWS(merge_datasets(tmp.path() / "d1", tmp.path() / "d2", tmp.path() / "out"));
    }
}

TEST_CASE("class balance report") {
    DatasetManifest m;
    m.target_classes = {"person", "car"};

    SUBCASE("a near-empty class triggers a warning") {
        m.class_counts = {{"person", 500}, {"car", 1}};
        const auto r = class_balance_report(m);
        REQUIRE(r.warnings.size() == 1);
        CHECK(r.warnings[0].find("car") != std::string::npos);
        CHECK(r.counts.at("person") == 500);
    }

    SUBCASE("balanced classes produce no warnings") {
        m.class_counts = {{"person", 500}, {"car", 500}};
        CHECK(class_balance_report(m).warnings.empty());
    }

    SUBCASE("an empty dataset warns for every target class") {
        CHECK(class_balance_report(m).warnings.size() == 2);
    }
}

TEST_CASE("trainer invocation") {
    fixtures::TempDir tmp("dataset");
    std::filesystem::create_directories(tmp.path() / "ds");
    std::filesystem::create_directories(tmp.path() / "out");

    SUBCASE("no-op trainer succeeds") {
        TrainerSpec spec;
        spec.command = "true {dataset_dir}";
        const auto report = invoke_trainer(spec, tmp.path() / "ds", tmp.path() / "out");
        CHECK(report.exit_code == 0);
    }

    SUBCASE("placeholders are substituted into the launched command") {
        TrainerSpec spec;
        spec.command = "echo train --data {dataset_dir} --labels {label_map} --out {output_dir}";
        spec.trainable_layers = TrainableLayers::BoxRegression;
        spec.epochs = 5000;
        const auto report = invoke_trainer(spec, tmp.path() / "ds", tmp.path() / "out");
        CHECK(report.output.find((tmp.path() / "ds").string()) != std::string::npos);
        CHECK(report.output.find((tmp.path() / "ds" / "annotations.json").string()) !=
              std::string::npos);
        CHECK(report.output.find((tmp.path() / "out").string()) != std::string::npos);
    }

    SUBCASE("environment carries the layer choice and epochs hint") {
        TrainerSpec spec;
        spec.command = "ls {dataset_dir} >/dev/null; echo $COVA_TRAINABLE_LAYERS/$COVA_EPOCHS";
        spec.trainable_layers = TrainableLayers::Top;
        spec.epochs = 42;
        const auto report = invoke_trainer(spec, tmp.path() / "ds", tmp.path() / "out");
        CHECK(report.output.find("top/42") != std::string::npos);
    }

    SUBCASE("nonzero exit raises with the captured output") {
        TrainerSpec spec;
        spec.command = "echo boom {dataset_dir}; false";
        try {
            invoke_trainer(spec, tmp.path() / "ds", tmp.path() / "out");
            FAIL("expected TrainerFailed");
        } catch (const TrainerFailed& e) {
            CHECK(e.exit_code == 1);
            CHECK(e.output.find("boom") != std::string::npos);
        }
    }

    SUBCASE("missing command raises") {
        TrainerSpec spec;
        spec.command = "definitely-not-a-real-binary-xyz {dataset_dir}";
        CHECK_THROWS_AS(invoke_trainer(spec, tmp.path() / "ds", tmp.path() / "out"), TrainerFailed);
    }

    SUBCASE("template without the dataset placeholder is invalid") {
        TrainerSpec spec;
        spec.command = "true";
        CHECK_THROWS_AS(invoke_trainer(spec, tmp.path() / "ds", tmp.path() / "out"),
                        std::invalid_argument);
    }
}

TEST_CASE("manifest serialization") {
    fixtures::TempDir tmp("dataset");
    EnvClock clock("2024-05-01T12:00:00Z");
    const LabelMap labels({"person"});
    DatasetWriter w(tmp.path() / "ds", labels, {"person"}, 3, std::nullopt, "cfg-abc");
    w.accumulate(make_item("s0", 0, 0, {{{1, 1, 10, 10}, "person", 0.9}}),
                 fixtures::solid(32, 32, 70));
    write_manifest(w.dir(), w.manifest());
    const auto j = nlohmann::json::parse(slurp(tmp.path() / "ds" / "manifest.json"));
    CHECK(j["version"] == 1);
    CHECK(j["created_at"] == "2024-05-01T12:00:00Z");
    CHECK(j["target_image_count"] == 3);
    CHECK(j["deadline"].is_null());
    CHECK(j["counts_unit"] == "examples");
    CHECK(j["config_fingerprint"] == "cfg-abc");
    CHECK(j["class_counts"]["person"] == 1);
    REQUIRE(j["examples"].size() == 1);
    CHECK(j["examples"][0]["stream_id"] == "s0");
}
