// Run configuration: JSON file with sections {schedule, model, loss,
// trainer, data}. Every key has a default; unknown keys are startup errors.
#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "condet/decoder.hpp"
#include "condet/objective.hpp"
#include "condet/schedule.hpp"

namespace condet {

using json = nlohmann::json;

struct TrainerConfig {
    int iterations = 10000;
    int batch_size = 4;
    double learning_rate = 2.5e-5;
    double weight_decay = 1e-4;
    double ema_decay = 0.95;  // mu
    int n_tr = 300;
    double grad_clip = 1.0;
    int warmup_iterations = 0;
    int checkpoint_every = 1000;
    bool flip_augment = true;
    bool ema_for_earlier_step = true;   // Alg-2 pairing; false = both-theta ablation
    bool timestep_per_image = true;     // false = one t_r per batch
    bool renewal_in_training = false;
    double renewal_threshold = 0.9;
    std::string padding = "gaussian";  // or "around-gt"
    int threads = 1;

    void validate() const {
        if (iterations < 0 || batch_size < 1 || n_tr < 1) throw std::invalid_argument("trainer: bad sizes");
        if (!(learning_rate > 0)) throw std::invalid_argument("trainer: learning_rate must be positive");
        if (!(ema_decay >= 0 && ema_decay <= 1)) throw std::invalid_argument("trainer: ema_decay outside [0,1]");
        if (padding != "gaussian" && padding != "around-gt")
            throw std::invalid_argument("trainer: padding must be 'gaussian' or 'around-gt'");
        if (threads < 1) throw std::invalid_argument("trainer: threads must be >= 1");
    }
};

struct DataConfig {
    std::string source = "synthetic";  // or "coco"
    int image_size = 64;
    int max_objects = 4;
    int num_classes = 3;
    int train_count = 1000;
    int val_count = 200;
    std::string annotations;  // coco mode: training annotation json
    std::string image_root;   // coco mode: image directory

    void validate() const {
        if (source != "synthetic" && source != "coco")
            throw std::invalid_argument("data: source must be 'synthetic' or 'coco'");
        if (image_size < 16 || max_objects < 0 || num_classes < 1 || train_count < 1 || val_count < 0)
            throw std::invalid_argument("data: bad sizes");
    }
};

struct RunConfig {
    NoiseSchedule schedule;
    std::string schedule_scalings = "boundary-shifted";  // c_skip/c_out family
    ModelConfig model;
    LossWeights loss;
    TrainerConfig trainer;
    DataConfig data;

    void validate() const {
        schedule.validate();
        if (schedule_scalings != "boundary-shifted")
            throw std::invalid_argument("schedule: unknown scalings '" + schedule_scalings + "'");
        model.validate();
        loss.validate();
        trainer.validate();
        data.validate();
    }
};

namespace detail {

class SectionReader {
public:
    SectionReader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
        if (!j_.is_object()) throw std::invalid_argument("config: section '" + section_ + "' must be an object");
        for (auto it = j_.begin(); it != j_.end(); ++it) remaining_.insert(it.key());
    }

    template <class T>
    void get(const char* key, T& out) {
        if (auto it = j_.find(key); it != j_.end()) {
            try {
                out = it->get<T>();
            } catch (const json::exception&) {
                throw std::invalid_argument("config: bad value for key '" + section_ + "." + key + "'");
            }
            remaining_.erase(key);
        }
    }

    void finish() const {
        if (!remaining_.empty())
            throw std::invalid_argument("config: unknown key '" + section_ + "." + *remaining_.begin() + "'");
    }

private:
    const json& j_;
    std::string section_;
    std::set<std::string> remaining_;
};

}  // namespace detail

inline RunConfig parse_config(const json& j) {
    RunConfig cfg;
    if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& section = it.key();
        if (section == "schedule") {
            detail::SectionReader r(*it, section);
            r.get("sigma_min", cfg.schedule.sigma_min);
            r.get("sigma_max", cfg.schedule.sigma_max);
            r.get("rho", cfg.schedule.rho);
            r.get("total_steps", cfg.schedule.total_steps);
            r.get("sigma_data", cfg.schedule.sigma_data);
            r.get("scalings", cfg.schedule_scalings);
            r.finish();
        } else if (section == "model") {
            detail::SectionReader r(*it, section);
            r.get("num_classes", cfg.model.num_classes);
            r.get("d_model", cfg.model.d_model);
            r.get("stages", cfg.model.stages);
            r.get("heads", cfg.model.heads);
            r.get("roi_size", cfg.model.roi_size);
            r.get("dyn_rank", cfg.model.dyn_rank);
            r.get("ffn_dim", cfg.model.ffn_dim);
            r.get("time_dim", cfg.model.time_dim);
            r.finish();
        } else if (section == "loss") {
            detail::SectionReader r(*it, section);
            r.get("lambda_cls", cfg.loss.lambda_cls);
            r.get("lambda_l1", cfg.loss.lambda_l1);
            r.get("lambda_giou", cfg.loss.lambda_giou);
            r.finish();
        } else if (section == "trainer") {
            detail::SectionReader r(*it, section);
            r.get("iterations", cfg.trainer.iterations);
            r.get("batch_size", cfg.trainer.batch_size);
            r.get("learning_rate", cfg.trainer.learning_rate);
            r.get("weight_decay", cfg.trainer.weight_decay);
            r.get("ema_decay", cfg.trainer.ema_decay);
            r.get("n_tr", cfg.trainer.n_tr);
            r.get("grad_clip", cfg.trainer.grad_clip);
            r.get("warmup_iterations", cfg.trainer.warmup_iterations);
            r.get("checkpoint_every", cfg.trainer.checkpoint_every);
            r.get("flip_augment", cfg.trainer.flip_augment);
            r.get("ema_for_earlier_step", cfg.trainer.ema_for_earlier_step);
            r.get("timestep_per_image", cfg.trainer.timestep_per_image);
            r.get("renewal_in_training", cfg.trainer.renewal_in_training);
            r.get("renewal_threshold", cfg.trainer.renewal_threshold);
            r.get("padding", cfg.trainer.padding);
            r.get("threads", cfg.trainer.threads);
            r.finish();
        } else if (section == "data") {
            detail::SectionReader r(*it, section);
            r.get("source", cfg.data.source);
            r.get("image_size", cfg.data.image_size);
            r.get("max_objects", cfg.data.max_objects);
            r.get("num_classes", cfg.data.num_classes);
            r.get("train_count", cfg.data.train_count);
            r.get("val_count", cfg.data.val_count);
            r.get("annotations", cfg.data.annotations);
            r.get("image_root", cfg.data.image_root);
            r.finish();
        } else {
            throw std::invalid_argument("config: unknown section '" + section + "'");
        }
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config: " + path + ": " + e.what());
    }
    return parse_config(j);
}

inline json config_to_json(const RunConfig& cfg) {
    json j;
    j["schedule"] = {{"sigma_min", cfg.schedule.sigma_min}, {"sigma_max", cfg.schedule.sigma_max},
                     {"rho", cfg.schedule.rho},             {"total_steps", cfg.schedule.total_steps},
                     {"sigma_data", cfg.schedule.sigma_data}, {"scalings", cfg.schedule_scalings}};
    j["model"] = {{"num_classes", cfg.model.num_classes}, {"d_model", cfg.model.d_model},
                  {"stages", cfg.model.stages},           {"heads", cfg.model.heads},
                  {"roi_size", cfg.model.roi_size},       {"dyn_rank", cfg.model.dyn_rank},
                  {"ffn_dim", cfg.model.ffn_dim},         {"time_dim", cfg.model.time_dim}};
    j["loss"] = {{"lambda_cls", cfg.loss.lambda_cls},
                 {"lambda_l1", cfg.loss.lambda_l1},
                 {"lambda_giou", cfg.loss.lambda_giou}};
    j["trainer"] = {{"iterations", cfg.trainer.iterations},
                    {"batch_size", cfg.trainer.batch_size},
                    {"learning_rate", cfg.trainer.learning_rate},
                    {"weight_decay", cfg.trainer.weight_decay},
                    {"ema_decay", cfg.trainer.ema_decay},
                    {"n_tr", cfg.trainer.n_tr},
                    {"grad_clip", cfg.trainer.grad_clip},
                    {"warmup_iterations", cfg.trainer.warmup_iterations},
                    {"checkpoint_every", cfg.trainer.checkpoint_every},
                    {"flip_augment", cfg.trainer.flip_augment},
                    {"ema_for_earlier_step", cfg.trainer.ema_for_earlier_step},
                    {"timestep_per_image", cfg.trainer.timestep_per_image},
                    {"renewal_in_training", cfg.trainer.renewal_in_training},
                    {"renewal_threshold", cfg.trainer.renewal_threshold},
                    {"padding", cfg.trainer.padding},
                    {"threads", cfg.trainer.threads}};
    j["data"] = {{"source", cfg.data.source},         {"image_size", cfg.data.image_size},
                 {"max_objects", cfg.data.max_objects}, {"num_classes", cfg.data.num_classes},
                 {"train_count", cfg.data.train_count}, {"val_count", cfg.data.val_count},
                 {"annotations", cfg.data.annotations}, {"image_root", cfg.data.image_root}};
    return j;
}

}  // namespace condet
