// cova — operator entry point for the specialization pipeline and its
// analysis harnesses.
//
// Subcommands: run, bgsub, stats, eval, roi-sweep, serve-teacher, export.
// Reports (JSON/CSV) go to standard output; logs go to standard error.
// Exit codes: 0 success, 1 stage failure, 2 config/input error,
// 3 annotation unavailable, 4 trainer failed.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "cova/pipeline.hpp"

namespace {

cova::RunController* g_controller = nullptr;

void handle_sigint(int) {
    if (g_controller) g_controller->request_stop();
}

std::string slurp_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw cova::ConfigError("cannot open: " + p.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Directory → image_directory source, file → CVR1 raw video.
cova::FrameSource make_source(const std::string& input, bool loop = false) {
    cova::FrameSourceConfig sc;
    sc.path = input;
    sc.kind = std::filesystem::is_directory(input) ? cova::SourceKind::ImageDirectory
                                                   : cova::SourceKind::RawVideoFile;
    sc.loop = loop;
    return cova::FrameSource(sc, [](const std::string& msg) {
        std::cerr << "warning: skipping item: " << msg << "\n";
    });
}

cova::Frame mask_to_frame(const cova::BinaryMask& m) {
    cova::Frame f;
    f.width = m.width;
    f.height = m.height;
    f.pixels.resize(std::size_t(m.width) * m.height * 3);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        const std::uint8_t v = m.data[i] ? 255 : 0;
        f.pixels[3 * i] = f.pixels[3 * i + 1] = f.pixels[3 * i + 2] = v;
    }
    return f;
}

// ----------------------------------------------------------------- run

int cmd_run(const std::string& config_path, bool dry_run) {
    cova::PipelineConfig cfg;
    try {
        cfg = cova::parse_config(slurp_file(config_path));
    } catch (const cova::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return cova::kExitConfigError;
    }
    if (dry_run) {
        std::cout << "config ok\n";
        return cova::kExitSuccess;
    }
    cova::RunController controller;
    g_controller = &controller;
    std::signal(SIGINT, handle_sigint);
    const auto report = cova::run_pipeline(cfg, cova::PluginRegistry::builtins(), &controller);
    g_controller = nullptr;
    if (!report.error.empty()) std::cerr << "error: " << report.error << "\n";
    std::cout << cova::report_to_json(report).dump(2) << "\n";
    return report.exit_code;
}

// --------------------------------------------------------------- bgsub

struct MotionFlags {
    bool first_frame = false;
    cova::BackgroundParams bg;
    cova::MotionFilterParams motion;
    std::int64_t max_frames = 0;

    void add_to(CLI::App& app, bool with_variant = true) {
        if (with_variant) {
            app.add_flag("--first-frame", first_frame,
                         "Use the first-frame background model instead of MoG");
            auto* mog = app.add_flag("--mog", "Use the mixture-of-Gaussians model (default)");
            mog->excludes("--first-frame");
        }
        app.add_option("--k", bg.k, "Gaussians per pixel");
        app.add_option("--alpha", bg.alpha, "MoG learning rate");
        app.add_option("--background-weight-threshold", bg.background_weight_threshold,
                       "Cumulative-weight background threshold T");
        app.add_option("--blur-sigma", bg.blur_sigma, "Pre-blur Gaussian sigma");
        app.add_option("--diff-threshold", bg.diff_threshold,
                       "First-frame absolute-difference threshold");
        app.add_option("--min-area", motion.min_area, "Minimum region area in pixels");
        app.add_option("--min-area-fraction", motion.min_area_fraction,
                       "Minimum region area as a frame fraction (when --min-area is 0)");
        app.add_option("--dilate-radius", motion.dilate_radius, "Dilation radius");
        app.add_option("--dilate-iterations", motion.dilate_iterations, "Dilation iterations");
        app.add_option("--max-frames", max_frames, "Stop after this many frames (0 = all)");
    }

    cova::BackgroundVariant variant() const {
        return first_frame ? cova::BackgroundVariant::FirstFrame
                           : cova::BackgroundVariant::MixtureOfGaussians;
    }
};

int cmd_bgsub(const std::string& input, const std::string& out_dir, const MotionFlags& flags) {
    auto source = make_source(input);
    std::filesystem::create_directories(out_dir);
    std::ofstream csv(std::filesystem::path(out_dir) / "regions.csv", std::ios::binary);
    csv << "frame,x,y,w,h,area\n";

    std::optional<cova::BackgroundModel> model;
    std::int64_t n = 0;
    while (auto f = source.next_frame()) {
        if (flags.max_frames > 0 && n >= flags.max_frames) break;
        if (!model) model.emplace(flags.variant(), f->width, f->height, flags.bg);
        cova::BinaryMask mask = model->update_and_classify(cova::to_gray(*f));
        if (mask.count() > 0)
            mask = cova::dilate(mask, flags.motion.dilate_radius,
                                flags.motion.dilate_iterations);
        char name[32];
        std::snprintf(name, sizeof name, "mask_%06lld.png", static_cast<long long>(f->index));
        cova::write_png(std::filesystem::path(out_dir) / name, mask_to_frame(mask));
        const auto min_area = flags.motion.effective_min_area(f->width, f->height);
        for (const auto& c : cova::connected_components(mask)) {
            if (c.area < min_area) continue;
            csv << f->index << "," << int(c.box.x_min) << "," << int(c.box.y_min) << ","
                << int(c.box.x_max - c.box.x_min) << "," << int(c.box.y_max - c.box.y_min)
                << "," << c.area << "\n";
        }
        ++n;
    }
    std::cerr << "processed " << n << " frames into " << out_dir << "\n";
    return cova::kExitSuccess;
}

// --------------------------------------------------------------- stats

int cmd_stats(const std::string& input, const MotionFlags& flags) {
    auto source = make_source(input);
    std::optional<cova::BackgroundModel> model;
    std::int64_t remaining =
        flags.max_frames > 0 ? flags.max_frames : std::numeric_limits<std::int64_t>::max();

    // motion_coverage needs the model up front; peek the first frame.
    auto first = source.next_frame();
    if (!first) {
        std::cout << "frame,coverage\naverage,0\n";
        return cova::kExitSuccess;
    }
    model.emplace(flags.variant(), first->width, first->height, flags.bg);
    bool used_first = false;
    auto next = [&]() -> std::optional<cova::Frame> {
        if (remaining-- <= 0) return std::nullopt;
        if (!used_first) {
            used_first = true;
            return std::move(first);
        }
        return source.next_frame();
    };
    const auto cov = cova::motion_coverage(next, *model, flags.motion);
    std::cout << "frame,coverage\n";
    for (std::size_t i = 0; i < cov.per_frame.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu,%.6f\n", i, cov.per_frame[i]);
        std::cout << buf;
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "average,%.6f\n", cov.average);
    std::cout << buf;
    return cova::kExitSuccess;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const std::string& gt_path, const std::string& dets_path,
             const std::string& out_path) {
    const auto ds = cova::read_coco_json(gt_path);
    const auto gts = cova::coco_ground_truth(ds);
    const auto dets = cova::read_detections_jsonl(dets_path);
    const auto report = cova::evaluate(dets, gts, ds.labels);

    nlohmann::ordered_json j;
    j["map"] = report.map;
    j["classes"] = nlohmann::ordered_json::array();
    std::printf("%-16s %8s %10s %10s %10s\n", "class", "gt", "AP@0.50", "AP@0.75", "AP");
    for (const auto& c : report.per_class) {
        nlohmann::ordered_json jc;
        jc["label"] = c.label;
        jc["gt_count"] = c.gt_count;
        jc["ap"] = c.ap;
        for (const auto& [thr, ap] : c.ap_by_threshold) {
            char key[16];
            std::snprintf(key, sizeof key, "%.2f", thr);
            jc["ap_by_threshold"][key] = ap;
        }
        j["classes"].push_back(std::move(jc));
        std::printf("%-16s %8lld %10.4f %10.4f %10.4f\n", c.label.c_str(),
                    static_cast<long long>(c.gt_count), c.ap_by_threshold.at(0.50),
                    c.ap_by_threshold.at(0.75), c.ap);
    }
    std::printf("%-16s %8s %10s %10s %10.4f\n", "mAP", "", "", "", report.map);
    std::ofstream os(out_path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + out_path);
    os << j.dump(2) << "\n";
    std::cerr << "report written to " << out_path << "\n";
    return cova::kExitSuccess;
}

// ----------------------------------------------------------- roi-sweep

int cmd_roi_sweep(const std::string& image, const std::vector<double>& box,
                  std::vector<double> scales, const std::string& endpoint,
                  const std::vector<std::string>& classes, double min_confidence) {
    cova::Frame frame = cova::read_image(image);
    frame.name = std::filesystem::path(image).filename().string();
    const cova::BoundingBox object{box[0], box[1], box[0] + box[2], box[1] + box[3]};
    if (scales.empty()) scales = {1.0, 2.0, 4.0, 8.0};

    cova::AnnotatorConfig cfg;
    cfg.endpoint = endpoint;
    cfg.min_confidence = min_confidence;
    cfg.target_classes = classes;
    cfg.validate();
    cova::HttpAnnotator annotator(cfg);
    const auto rows = cova::roi_sweep(frame, object, scales, annotator, cfg);
    std::cout << cova::roi_sweep_csv(rows);
    return cova::kExitSuccess;
}

// ------------------------------------------------------- serve-teacher

int cmd_serve_teacher(const std::string& gt_path, const std::string& host, int port,
                      const std::string& profile_path, std::uint64_t seed, int delay_ms) {
    auto store = cova::load_ground_truth(gt_path);
    cova::DegradationProfile profile;
    if (!profile_path.empty())
        profile = cova::DegradationProfile::from_json(
            nlohmann::json::parse(slurp_file(profile_path)));
    if (seed != 0) profile.seed = seed;
    cova::TeacherService service(std::move(store), profile, delay_ms);
    std::cerr << "teacher listening on " << host << ":" << port << "\n";
    if (!service.serve(host, port)) {
        std::cerr << "error: cannot bind " << host << ":" << port << "\n";
        return cova::kExitConfigError;
    }
    return cova::kExitSuccess;
}

// -------------------------------------------------------------- export

int cmd_export(const std::string& dataset_dir, std::string out_dir) {
    const auto manifest = cova::read_manifest(std::filesystem::path(dataset_dir) /
                                              "manifest.json");
    if (out_dir.empty()) out_dir = dataset_dir;
    const cova::LabelMap labels(manifest.label_map.empty() ? manifest.target_classes
                                                           : manifest.label_map);
    cova::export_coco(manifest.examples, labels, out_dir);
    std::cerr << "wrote " << (std::filesystem::path(out_dir) / "annotations.json").string()
              << " with " << manifest.examples.size() << " images\n";
    return cova::kExitSuccess;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cova — automated model-specialization pipeline for static cameras"};
    app.require_subcommand(1);

    // run
    std::string config_path;
    bool dry_run = false;
    auto* run = app.add_subcommand("run", "Execute a pipeline from a JSON config");
    run->add_option("--config", config_path, "Pipeline config file")->required();
    run->add_flag("--dry-run", dry_run, "Validate the config and exit");

    // bgsub
    std::string input, out_dir;
    MotionFlags bgsub_flags;
    auto* bgsub = app.add_subcommand("bgsub", "Background subtraction masks + region CSV");
    bgsub->add_option("--input", input, "Image directory or CVR1 raw video")->required();
    bgsub->add_option("--out", out_dir, "Output directory")->required();
    bgsub_flags.add_to(*bgsub);

    // stats
    std::string stats_input;
    MotionFlags stats_flags;
    auto* stats = app.add_subcommand("stats", "Motion-coverage statistics as CSV");
    stats->add_option("--input", stats_input, "Image directory or CVR1 raw video")->required();
    stats_flags.add_to(*stats);

    // eval
    std::string gt_path, dets_path, report_path = "report.json";
    auto* eval = app.add_subcommand("eval", "COCO-style mAP evaluation");
    eval->add_option("--gt", gt_path, "Ground-truth COCO JSON")->required();
    eval->add_option("--dets", dets_path, "Detections JSON lines")->required();
    eval->add_option("--out", report_path, "Report JSON output path");

    // roi-sweep
    std::string sweep_image, sweep_endpoint;
    std::vector<double> sweep_box, sweep_scales;
    std::vector<std::string> sweep_classes;
    double sweep_min_confidence = 0.0;
    auto* sweep = app.add_subcommand("roi-sweep",
                                     "Teacher confidence as a function of RoI scale");
    sweep->add_option("--image", sweep_image, "Input image")->required();
    sweep->add_option("--box", sweep_box, "Object box: x y w h")->expected(4)->required();
    sweep->add_option("--scales", sweep_scales, "RoI scales (>= 1)");
    sweep->add_option("--endpoint", sweep_endpoint, "Annotator endpoint")->required();
    sweep->add_option("--classes", sweep_classes, "Target classes")->required();
    sweep->add_option("--min-confidence", sweep_min_confidence, "Confidence filter");

    // serve-teacher
    std::string teacher_gt, teacher_host = "127.0.0.1", teacher_profile;
    int teacher_port = 8080, teacher_delay = 0;
    std::uint64_t teacher_seed = 0;
    auto* teacher = app.add_subcommand("serve-teacher",
                                       "Reference annotation service over HTTP");
    teacher->add_option("--gt", teacher_gt, "Ground-truth COCO JSON")->required();
    teacher->add_option("--bind", teacher_host, "Bind address");
    teacher->add_option("--port", teacher_port, "Port");
    teacher->add_option("--profile", teacher_profile, "Degradation profile JSON file");
    teacher->add_option("--seed", teacher_seed, "Degradation seed override");
    teacher->add_option("--delay-ms", teacher_delay, "Artificial per-request delay");

    // export
    std::string export_dataset, export_out;
    auto* exp = app.add_subcommand("export", "Re-export COCO annotations from a manifest");
    exp->add_option("--dataset", export_dataset, "Dataset directory with manifest.json")
        ->required();
    exp->add_option("--out", export_out, "Output directory (default: dataset directory)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, dry_run);
        if (bgsub->parsed()) return cmd_bgsub(input, out_dir, bgsub_flags);
        if (stats->parsed()) return cmd_stats(stats_input, stats_flags);
        if (eval->parsed()) return cmd_eval(gt_path, dets_path, report_path);
        if (sweep->parsed())
            return cmd_roi_sweep(sweep_image, sweep_box, sweep_scales, sweep_endpoint,
                                 sweep_classes, sweep_min_confidence);
        if (teacher->parsed())
            return cmd_serve_teacher(teacher_gt, teacher_host, teacher_port, teacher_profile,
                                     teacher_seed, teacher_delay);
        if (exp->parsed()) return cmd_export(export_dataset, export_out);
    } catch (const cova::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return cova::kExitConfigError;
    } catch (const cova::SchemaError& e) {
        std::cerr << "schema error: " << e.what() << "\n";
        return cova::kExitConfigError;
    } catch (const cova::AnnotationUnavailable& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cova::kExitAnnotationUnavailable;
    } catch (const cova::TrainerFailed& e) {
        std::cerr << "trainer failed: " << e.what() << "\n";
        return cova::kExitTrainerFailed;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return cova::kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cova::kExitConfigError;
    }
    return cova::kExitSuccess;
}
