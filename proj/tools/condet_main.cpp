// condet command-line entry point: train / infer / eval / schedule / data /
// sweep subcommands over the header library.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "condet/checkpoint.hpp"
#include "condet/config.hpp"
#include "condet/data.hpp"
#include "condet/evalkit.hpp"
#include "condet/manifest.hpp"
#include "condet/sampler.hpp"
#include "condet/sweep.hpp"
#include "condet/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using condet::json;

struct GlobalOpts {
    std::string config_path;
    uint64_t seed = 0;
    std::string out_dir = "runs/latest";
    std::string log_level = "info";
};

condet::RunConfig load_run_config(const GlobalOpts& g) {
    return g.config_path.empty() ? condet::RunConfig{} : condet::load_config(g.config_path);
}

bool verbose(const GlobalOpts& g) { return g.log_level == "debug" || g.log_level == "info"; }

std::vector<double> parse_values(const std::string& csv) {
    std::vector<double> vals;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) vals.push_back(std::stod(item));
    }
    if (vals.empty()) throw std::invalid_argument("--values: expected a comma-separated list");
    return vals;
}

// --images accepts a COCO annotation json or a directory of .ppm files.
condet::CocoDataset load_images_arg(const std::string& images) {
    if (fs::is_directory(images)) {
        condet::CocoDataset ds;
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(images))
            if (e.path().extension() == ".ppm") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw std::runtime_error("infer: no .ppm images in " + images);
        int64_t id = 0;
        for (const auto& f : files) {
            condet::DatasetRecord rec;
            rec.id = id++;
            rec.file_name = f.filename().string();
            rec.image = condet::read_ppm(f.string());
            ds.records.push_back(std::move(rec));
        }
        return ds;
    }
    auto parent = fs::path(images).parent_path().string();
    return condet::load_coco(images, parent.empty() ? "." : parent);
}

json detections_to_results(const std::vector<condet::BatchItem>& items,
                           const std::vector<condet::DatasetRecord>& records,
                           const condet::CategoryMap* categories) {
    json arr = json::array();
    for (size_t i = 0; i < items.size(); ++i) {
        const auto& rec = records[i];
        for (const auto& d : items[i].detections) {
            int cat = categories && d.category < categories->num_classes()
                          ? categories->to_original[d.category]
                          : d.category + 1;
            arr.push_back({{"image_id", items[i].image_id},
                           {"category_id", cat},
                           {"bbox",
                            {d.box.x1() * rec.image.width, d.box.y1() * rec.image.height,
                             d.box.w * rec.image.width, d.box.h * rec.image.height}},
                           {"score", d.score}});
        }
    }
    return arr;
}

void print_report(const condet::EvalReport& rep, const std::vector<std::string>& class_names) {
    std::printf("%-10s %8.4f\n", "AP", rep.ap);
    std::printf("%-10s %8.4f\n", "AP50", rep.ap50);
    std::printf("%-10s %8.4f\n", "AP75", rep.ap75);
    std::printf("%-10s %8.4f\n", "APs", rep.ap_small);
    std::printf("%-10s %8.4f\n", "APm", rep.ap_medium);
    std::printf("%-10s %8.4f\n", "APl", rep.ap_large);
    for (size_t c = 0; c < rep.per_class.size(); ++c) {
        std::string name = c < class_names.size() ? class_names[c] : "class_" + std::to_string(c);
        std::printf("%-10s %8.4f\n", name.c_str(), rep.per_class[c]);
    }
    json record = {{"ap", rep.ap},           {"ap50", rep.ap50},       {"ap75", rep.ap75},
                   {"ap_small", rep.ap_small}, {"ap_medium", rep.ap_medium}, {"ap_large", rep.ap_large},
                   {"per_class", rep.per_class}};
    std::printf("%s\n", record.dump().c_str());
}

int cmd_schedule_dump(int total_steps, double sigma_min, double sigma_max, double rho, double sigma_data) {
    condet::NoiseSchedule s{sigma_min, sigma_max, rho, total_steps, sigma_data};
    s.validate();
    for (int t = 0; t < s.total_steps; ++t) {
        double sigma = s.sigma_at(t);
        auto [skip, out] = s.c_skip_out(sigma);
        std::printf("%d,%.12g,%.12g,%.12g,%.12g\n", t, sigma, s.c_in(sigma), skip, out);
    }
    return 0;
}

int cmd_data_synth(const GlobalOpts& g, const std::string& out, int count, int image_size, int max_objects,
                   int classes) {
    auto cfg = load_run_config(g);
    condet::RunManifest manifest(out, "data synth", condet::config_to_json(cfg), g.seed);
    auto records = condet::generate_synthetic(g.seed, count, image_size, max_objects, classes);
    auto ann = condet::save_coco_dataset(out, records, classes);
    manifest.add_artifact(ann);
    manifest.finalize(true);
    if (verbose(g)) std::fprintf(stderr, "wrote %d images + %s\n", count, ann.c_str());
    return 0;
}

int cmd_train(const GlobalOpts& g, int iterations_override, double lr_override, int threads_override) {
    auto cfg = load_run_config(g);
    if (iterations_override >= 0) cfg.trainer.iterations = iterations_override;
    if (lr_override > 0) cfg.trainer.learning_rate = lr_override;
    if (threads_override > 0) cfg.trainer.threads = threads_override;
    cfg.validate();

    condet::RunManifest manifest(g.out_dir, "train", condet::config_to_json(cfg), g.seed);
    std::vector<condet::DatasetRecord> dataset;
    if (cfg.data.source == "synthetic") {
        dataset = condet::generate_synthetic(condet::splitmix64(g.seed ^ 1), cfg.data.train_count,
                                             cfg.data.image_size, cfg.data.max_objects, cfg.data.num_classes);
    } else {
        auto ds = condet::load_coco(cfg.data.annotations, cfg.data.image_root);
        dataset = std::move(ds.records);
        cfg.model.num_classes = ds.categories.num_classes();
    }

    std::ofstream metrics(fs::path(g.out_dir) / "metrics.ndjson");
    int64_t last_print = 0;
    auto progress = [&](int64_t k) {
        if (verbose(g) && (k - last_print >= 500 || k == cfg.trainer.iterations)) {
            std::fprintf(stderr, "iteration %lld / %d\n", static_cast<long long>(k), cfg.trainer.iterations);
            last_print = k;
        }
    };
    auto result = condet::train(dataset, cfg, g.seed, g.out_dir, &metrics, {}, progress);
    manifest.add_artifact(result.final_checkpoint);
    manifest.add_artifact((fs::path(g.out_dir) / "metrics.ndjson").string());
    manifest.finalize(true);
    std::printf("%s\n", result.final_checkpoint.c_str());
    return 0;
}

int cmd_infer(const GlobalOpts& g, const std::string& checkpoint, const std::string& images,
              const condet::SamplerConfig& sampler_base, bool use_ema, int threads,
              const std::string& out_path, const std::string& overlay_dir) {
    auto ck = condet::load_checkpoint(checkpoint);
    auto& model = use_ema ? *ck.ema_model : *ck.model;
    auto ds = load_images_arg(images);

    condet::RunManifest manifest(g.out_dir, "infer", condet::config_to_json(ck.config), g.seed);
    condet::SamplerConfig cfg = sampler_base;
    cfg.seed = g.seed;
    cfg.validate(ck.config.schedule);

    std::vector<const condet::DatasetRecord*> ptrs;
    for (const auto& r : ds.records) ptrs.push_back(&r);
    auto items = condet::sample_batch(ptrs, model, ck.config.schedule, cfg, threads);

    json results = detections_to_results(items, ds.records, ds.categories.num_classes() ? &ds.categories : nullptr);
    {
        std::ofstream f(out_path);
        if (!f) throw std::runtime_error("infer: cannot open " + out_path);
        f << results.dump(2) << "\n";
    }
    manifest.add_artifact(out_path);

    if (!overlay_dir.empty()) {
        fs::create_directories(overlay_dir);
        for (size_t i = 0; i < items.size(); ++i) {
            condet::ImageU8 img = ds.records[i].image;
            if (img.rgb.empty()) continue;
            for (const auto& d : items[i].detections) condet::draw_box(img, d.box, d.category);
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%06lld.ppm", static_cast<long long>(items[i].image_id));
            condet::write_ppm((fs::path(overlay_dir) / buf).string(), img);
        }
        manifest.add_artifact(overlay_dir);
    }
    double total = 0;
    for (const auto& it : items) total += it.stats.seconds;
    if (verbose(g))
        std::fprintf(stderr, "decoded %zu images, %.3f s/image, results at %s\n", items.size(),
                     items.empty() ? 0.0 : total / items.size(), out_path.c_str());
    manifest.finalize(true);
    return 0;
}

int cmd_eval(const std::string& results_path, const std::string& annotations_path) {
    auto ds = condet::load_coco(annotations_path);
    std::ifstream f(results_path);
    if (!f) throw std::runtime_error("eval: cannot open " + results_path);
    json results;
    try {
        results = json::parse(f);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("eval: " + results_path + ": " + e.what());
    }
    std::map<int64_t, std::pair<int, int>> sizes;
    for (const auto& rec : ds.records) sizes[rec.id] = {rec.image.width, rec.image.height};
    std::map<int64_t, std::vector<condet::Detection>> dets;
    for (const auto& r : results) {
        int64_t id = r.at("image_id").get<int64_t>();
        auto it = sizes.find(id);
        if (it == sizes.end())
            throw std::runtime_error("eval: results reference unknown image id " + std::to_string(id));
        auto [w, h] = it->second;
        auto bbox = r.at("bbox");
        condet::Detection d;
        d.box = condet::Box{(bbox[0].get<double>() + bbox[2].get<double>() / 2) / w,
                            (bbox[1].get<double>() + bbox[3].get<double>() / 2) / h,
                            bbox[2].get<double>() / w, bbox[3].get<double>() / h};
        int orig = r.at("category_id").get<int>();
        auto cit = ds.categories.to_dense.find(orig);
        if (cit == ds.categories.to_dense.end())
            throw std::runtime_error("eval: results reference unknown category id " + std::to_string(orig));
        d.category = cit->second;
        d.score = r.at("score").get<double>();
        dets[id].push_back(d);
    }
    auto rep = condet::evaluate(dets, ds.records);
    print_report(rep, ds.categories.names);
    return 0;
}

int cmd_sweep(const GlobalOpts& g, const std::string& checkpoint, const std::string& images,
              const std::string& param, const std::string& values_csv, const condet::SamplerConfig& base,
              bool use_ema, int threads, const std::string& out_csv) {
    auto ck = condet::load_checkpoint(checkpoint);
    auto& model = use_ema ? *ck.ema_model : *ck.model;
    auto ds = load_images_arg(images);
    auto values = parse_values(values_csv);

    condet::RunManifest manifest(g.out_dir, "sweep " + param, condet::config_to_json(ck.config), g.seed);
    condet::SamplerConfig cfg = base;
    cfg.seed = g.seed;
    auto rows = condet::run_sweep(ds.records, model, ck.config.schedule, cfg, param, values, threads);
    std::string csv = condet::sweep_csv(rows);
    if (out_csv.empty()) {
        std::fputs(csv.c_str(), stdout);
    } else {
        std::ofstream f(out_csv);
        if (!f) throw std::runtime_error("sweep: cannot open " + out_csv);
        f << csv;
        manifest.add_artifact(out_csv);
    }
    manifest.finalize(true);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"condet: object detection by few-step consistency denoising of boxes"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOpts g;
    app.add_option("--config", g.config_path, "JSON config file");
    app.add_option("--seed", g.seed, "global random seed");
    app.add_option("--out-dir", g.out_dir, "run output directory");
    app.add_option("--log-level", g.log_level, "quiet | info | debug");

    // schedule dump
    auto* sched_cmd = app.add_subcommand("schedule", "noise schedule utilities");
    auto* dump_cmd = sched_cmd->add_subcommand("dump", "emit CSV rows: t,sigma,c_in,c_skip,c_out");
    int dump_T = 40;
    double dump_smin = 0.002, dump_smax = 80.0, dump_rho = 7.0, dump_sdata = 0.5;
    dump_cmd->add_option("--T", dump_T, "total time steps");
    dump_cmd->add_option("--sigma-min", dump_smin, "sigma at t = T-1");
    dump_cmd->add_option("--sigma-max", dump_smax, "sigma at t = 0");
    dump_cmd->add_option("--rho", dump_rho, "schedule exponent");
    dump_cmd->add_option("--sigma-data", dump_sdata, "data standard deviation");

    // data synth
    auto* data_cmd = app.add_subcommand("data", "dataset utilities");
    auto* synth_cmd = data_cmd->add_subcommand("synth", "write a synthetic shapes dataset (COCO layout)");
    std::string synth_out = "synth_data";
    int synth_count = 100, synth_size = 64, synth_max_obj = 4, synth_classes = 3;
    synth_cmd->add_option("--out", synth_out, "output directory")->required();
    synth_cmd->add_option("--count", synth_count, "number of images");
    synth_cmd->add_option("--image-size", synth_size, "square image size in pixels");
    synth_cmd->add_option("--max-objects", synth_max_obj, "max objects per image");
    synth_cmd->add_option("--classes", synth_classes, "number of shape classes (1-3)");

    // train
    auto* train_cmd = app.add_subcommand("train", "train a detector per the config");
    int train_iterations = -1, train_threads = -1;
    double train_lr = -1;
    train_cmd->add_option("--iterations", train_iterations, "override trainer.iterations");
    train_cmd->add_option("--learning-rate", train_lr, "override trainer.learning_rate");
    train_cmd->add_option("--threads", train_threads, "override trainer.threads");

    // infer
    auto* infer_cmd = app.add_subcommand("infer", "run few-step sampling over images");
    std::string infer_ckpt, infer_images, infer_out = "results.json", infer_overlay;
    condet::SamplerConfig infer_cfg;
    bool infer_ema = false;
    int infer_threads = 1;
    infer_cmd->add_option("--checkpoint", infer_ckpt, "model checkpoint")->required();
    infer_cmd->add_option("--images", infer_images, "image directory or COCO annotation json")->required();
    infer_cmd->add_option("--steps", infer_cfg.n_ss, "sampling steps n_ss");
    infer_cmd->add_option("--proposals", infer_cfg.n_p, "proposal count n_p");
    infer_cmd->add_option("--box-renewal", infer_cfg.b_th, "renewal threshold B_th");
    infer_cmd->add_option("--nms", infer_cfg.n_th, "NMS IoU threshold N_th");
    infer_cmd->add_option("--score-floor", infer_cfg.score_floor, "drop detections below this score");
    infer_cmd->add_option("--out", infer_out, "results json path");
    infer_cmd->add_option("--overlay", infer_overlay, "write annotated images to this directory");
    infer_cmd->add_flag("--use-ema", infer_ema, "sample with the EMA parameters");
    infer_cmd->add_option("--threads", infer_threads, "images decoded in parallel");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "COCO-style AP of a results file");
    std::string eval_results, eval_ann;
    eval_cmd->add_option("--results", eval_results, "results json")->required();
    eval_cmd->add_option("--annotations", eval_ann, "ground-truth annotation json")->required();

    // sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "grid over a sampler parameter, CSV of EvalReports");
    std::string sweep_ckpt, sweep_images, sweep_param = "box-renewal", sweep_values = "0,0.9,0.98,1.0";
    std::string sweep_out;
    condet::SamplerConfig sweep_base;
    bool sweep_ema = false;
    int sweep_threads = 1;
    sweep_cmd->add_option("--checkpoint", sweep_ckpt, "model checkpoint")->required();
    sweep_cmd->add_option("--images", sweep_images, "COCO annotation json with images")->required();
    sweep_cmd->add_option("--param", sweep_param, "box-renewal | nms | steps | proposals");
    sweep_cmd->add_option("--values", sweep_values, "comma-separated values");
    sweep_cmd->add_option("--steps", sweep_base.n_ss, "base sampling steps");
    sweep_cmd->add_option("--proposals", sweep_base.n_p, "base proposal count");
    sweep_cmd->add_option("--box-renewal", sweep_base.b_th, "base renewal threshold");
    sweep_cmd->add_option("--nms", sweep_base.n_th, "base NMS threshold");
    sweep_cmd->add_flag("--use-ema", sweep_ema, "sample with the EMA parameters");
    sweep_cmd->add_option("--threads", sweep_threads, "images decoded in parallel");
    sweep_cmd->add_option("--out", sweep_out, "CSV output path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (dump_cmd->parsed()) return cmd_schedule_dump(dump_T, dump_smin, dump_smax, dump_rho, dump_sdata);
        if (synth_cmd->parsed())
            return cmd_data_synth(g, synth_out, synth_count, synth_size, synth_max_obj, synth_classes);
        if (train_cmd->parsed()) return cmd_train(g, train_iterations, train_lr, train_threads);
        if (infer_cmd->parsed())
            return cmd_infer(g, infer_ckpt, infer_images, infer_cfg, infer_ema, infer_threads, infer_out,
                             infer_overlay);
        if (eval_cmd->parsed()) return cmd_eval(eval_results, eval_ann);
        if (sweep_cmd->parsed())
            return cmd_sweep(g, sweep_ckpt, sweep_images, sweep_param, sweep_values, sweep_base, sweep_ema,
                             sweep_threads, sweep_out);
        std::fprintf(stderr, "error: missing subcommand (schedule | data | train | infer | eval | sweep)\n");
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
