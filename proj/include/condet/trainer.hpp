// Consistency training loop: random timestep pair, shared-noise corruption,
// Euler denoiser step (optional distillation teacher), dual-timestep loss,
// AdamW update and EMA target maintenance.
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "condet/checkpoint.hpp"
#include "condet/config.hpp"
#include "condet/corruption.hpp"
#include "condet/data.hpp"
#include "condet/decoder.hpp"
#include "condet/objective.hpp"

namespace condet {

// x_{t-1} = x_t + (x_t - x_0)/sigma_t * (sigma_{t-1} - sigma_t). Exact for
// trajectories affine in sigma; at sigma_{t-1} = 0 it returns x_0.
inline BoxArray euler_denoise_step(const BoxArray& x_t, const BoxArray& x_0, double sigma_t, double sigma_tm1) {
    if (!(sigma_t > 0.0)) throw std::domain_error("euler_denoise_step: sigma_t must be positive");
    if (x_t.rows() != x_0.rows()) throw std::invalid_argument("euler_denoise_step: row mismatch");
    return x_t + ((x_t - x_0) / sigma_t) * (sigma_tm1 - sigma_t);
}

// Optional distillation teacher: x_0 estimate for (x_t, sigma_t). An empty
// handle selects the no-distillation branch (x_0 := x_s).
using TeacherHandle = std::function<BoxArray(const BoxArray& x_t, double sigma_t)>;

// Reference oracle teacher: ignores the noisy input and answers with the
// GT boxes (cycled across rows). Exercises the distillation code path
// without a pretrained denoiser.
inline TeacherHandle make_oracle_teacher(std::vector<Box> gt_boxes) {
    return [gt = std::move(gt_boxes)](const BoxArray& x_t, double) -> BoxArray {
        BoxArray out(x_t.rows(), 4);
        for (int i = 0; i < x_t.rows(); ++i) {
            if (gt.empty()) {
                out.row(i).setZero();
            } else {
                auto s = to_signal_space(gt[i % gt.size()]);
                for (int c = 0; c < 4; ++c) out(i, c) = s[c];
            }
        }
        return out;
    };
}

// Decoupled-weight-decay Adam over a parameter store.
class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

    void step(nn::ParamStoreT<float>& params) {
        if (m_.empty()) {
            m_.resize(params.params.size());
            v_.resize(params.params.size());
            for (size_t i = 0; i < params.params.size(); ++i) {
                m_[i].assign(params.params[i].second.size(), 0.0f);
                v_[i].assign(params.params[i].second.size(), 0.0f);
            }
        }
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t i = 0; i < params.params.size(); ++i) {
            auto& p = params.params[i].second;
            p.impl().ensure_grad();
            float* w = p.data();
            const float* g = p.impl().g.data();
            float* m = m_[i].data();
            float* v = v_[i].data();
            for (size_t k = 0; k < p.size(); ++k) {
                m[k] = static_cast<float>(beta1_ * m[k] + (1.0 - beta1_) * g[k]);
                v[k] = static_cast<float>(beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k]);
                double mhat = m[k] / bc1;
                double vhat = v[k] / bc2;
                w[k] -= static_cast<float>(lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[k]));
            }
        }
    }

private:
    double lr_, wd_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

// theta_minus <- mu * theta_minus + (1 - mu) * theta, on raw values only
// (stopgrad: the EMA copy never joins the tape).
inline void ema_update(nn::ParamStoreT<float>& ema, const nn::ParamStoreT<float>& online, double mu) {
    if (ema.params.size() != online.params.size()) throw std::logic_error("ema_update: layout mismatch");
    for (size_t i = 0; i < ema.params.size(); ++i) {
        float* e = ema.params[i].second.data();
        const float* o = online.params[i].second.data();
        for (size_t k = 0; k < ema.params[i].second.size(); ++k)
            e[k] = static_cast<float>(mu * e[k] + (1.0 - mu) * o[k]);
    }
}

inline double global_grad_norm(nn::ParamStoreT<float>& params) {
    double acc = 0;
    for (auto& [name, p] : params.params) {
        p.impl().ensure_grad();
        for (float g : p.impl().g) acc += static_cast<double>(g) * g;
    }
    return std::sqrt(acc);
}

struct LossRecord {
    int64_t iteration = 0;
    double total = 0, cls = 0, l1 = 0, giou = 0;
    double loss_t = 0, loss_tm1 = 0;
    double grad_norm = 0;
    double learning_rate = 0;

    json to_json() const {
        return json{{"iteration", iteration}, {"total", total},   {"cls", cls},
                    {"l1", l1},               {"giou", giou},     {"loss_t", loss_t},
                    {"loss_tm1", loss_tm1},   {"grad_norm", grad_norm}, {"learning_rate", learning_rate}};
    }
};

struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Trainer {
public:
    Trainer(const RunConfig& cfg, uint64_t seed)
        : cfg_(cfg),
          seed_(seed),
          model_(std::make_shared<DetectorModel>(cfg.model, cfg.schedule, seed)),
          ema_model_(std::make_shared<DetectorModel>(cfg.model, cfg.schedule, seed)),
          opt_(cfg.trainer.learning_rate, cfg.trainer.weight_decay),
          rng_(splitmix64(seed ^ 0x7261696e)) {
        cfg_.validate();
        ema_model_->params().copy_values_from(model_->params());
        int workers = std::min(cfg_.trainer.threads, cfg_.trainer.batch_size);
        for (int w = 1; w < workers; ++w) {
            replicas_.push_back(std::make_shared<DetectorModel>(cfg.model, cfg.schedule, seed));
        }
    }

    std::shared_ptr<DetectorModel> model() { return model_; }
    std::shared_ptr<DetectorModel> ema_model() { return ema_model_; }
    int64_t iteration() const { return iteration_; }

    // One Alg-3 iteration over a batch of records. Gradients flow through
    // the theta decode of x_{t_r}; the x_{t_{r-1}} decode is the (stopgrad)
    // EMA branch. Both losses are matched and summed per image.
    LossRecord step(const std::vector<const DatasetRecord*>& batch, const TeacherHandle& teacher = {}) {
        const auto& tc = cfg_.trainer;
        int bsz = static_cast<int>(batch.size());
        if (bsz == 0) throw std::invalid_argument("step: empty batch");

        struct PerImage {
            double loss_t = 0, loss_tm1 = 0, cls = 0, l1 = 0, giou = 0;
        };
        std::vector<PerImage> results(bsz);

        // Per-image RNG streams keyed by (seed, iteration, slot): identical
        // regardless of the worker layout.
        int batch_t_r = 1 + static_cast<int>(rng_.fork(0xbeef ^ iteration_).uniform_int(0, cfg_.schedule.total_steps - 2));

        std::vector<DetectorModel*> workers = {model_.get()};
        for (auto& r : replicas_) workers.push_back(r.get());
        int n_workers = std::min<int>(static_cast<int>(workers.size()), bsz);
        for (int w = 1; w < n_workers; ++w) workers[w]->params().copy_values_from(model_->params());

        auto run_slot = [&](DetectorModel* net, int slot) {
            Rng rng = Rng(seed_).fork(0x696d67).fork(static_cast<uint64_t>(iteration_) * 1000003ULL + slot);
            const DatasetRecord& rec = *batch[slot];

            ImageU8 image = rec.image;
            std::vector<GtObject> gt = rec.gt;
            if (tc.flip_augment && rng.uniform() < 0.5) {
                image = image.hflip();
                for (auto& g : gt) g.box.cx = 1.0 - g.box.cx;
            }

            int t_r = tc.timestep_per_image
                          ? 1 + static_cast<int>(rng.uniform_int(0, cfg_.schedule.total_steps - 2))
                          : batch_t_r;
            double sigma_t = cfg_.schedule.sigma_at(t_r);
            double sigma_tm1 = cfg_.schedule.sigma_at(t_r - 1);

            std::vector<Box> gt_boxes;
            for (auto& g : gt) gt_boxes.push_back(g.box);
            PaddingMode mode = tc.padding == "around-gt" ? PaddingMode::kAroundGt : PaddingMode::kGaussian;
            ProposalSet x_s = pad_ground_truth(gt_boxes, tc.n_tr, rng, mode);
            BoxArray eps = gaussian_boxes(tc.n_tr, rng);
            ProposalSet x_t = corrupt(x_s, sigma_t, eps);

            // theta-branch features first; the tape must include them.
            auto feat = net->extract_features(image);

            // Optional training-time renewal (off by default; the normative
            // procedure has no renewal step): filter the pair by a no-grad
            // pre-decode, then refill with fresh noise rows whose trajectory
            // origin is the signal-space zero box.
            if (tc.renewal_in_training) {
                auto pre = net->decode(feat, x_t);
                auto keep = renewal_survivors(pre.row_scores(), tc.renewal_threshold);
                ProposalSet xt_kept{filter_rows(x_t.boxes, keep), sigma_t};
                ProposalSet xs_kept{filter_rows(x_s.boxes, keep), 0.0};
                x_t = supplement_proposals(xt_kept, tc.n_tr, sigma_t, rng);
                x_s = supplement_proposals(xs_kept, tc.n_tr, 0.0, rng);
            }

            BoxArray x0_for_step = teacher ? teacher(x_t.boxes, sigma_t) : x_s.boxes;
            ProposalSet x_tm1{euler_denoise_step(x_t.boxes, x0_for_step, sigma_t, sigma_tm1), sigma_tm1};

            // EMA (stopgrad) branch on the earlier timestep.
            DetectorModel* earlier_net = tc.ema_for_earlier_step ? ema_model_.get() : net;
            LossBreakdown ltm1;
            {
                ad::NoGrad ng;
                auto efeat = earlier_net->extract_features(image);
                auto out = earlier_net->decode(efeat, x_tm1);
                ltm1 = evaluate_detection_loss(out.x_box, out.cls_logits, gt, cfg_.loss);
            }

            // theta branch; loss kept on the tape, averaged over the batch.
            auto out = net->forward_train(feat, x_t);
            BoxArray pb(out.x0_value.rows(), 4);
            for (int i = 0; i < pb.rows(); ++i) {
                Box b = box_from_signal_row(out.x0_value, i);
                pb(i, 0) = b.cx;
                pb(i, 1) = b.cy;
                pb(i, 2) = b.w;
                pb(i, 3) = b.h;
            }
            MatchResult m = match(pb, out.logits_value, gt, cfg_.loss);
            auto pbn = signal_to_normalized(out.x0_signal);
            auto dl = detection_loss<float>(pbn, out.logits, gt, m, cfg_.loss);
            ad::scale(dl.total, 1.0f / bsz).backward();

            results[slot] = {dl.value, ltm1.total, dl.cls + ltm1.cls, dl.l1 + ltm1.l1, dl.giou + ltm1.giou};
        };

        if (n_workers <= 1) {
            for (int slot = 0; slot < bsz; ++slot) run_slot(model_.get(), slot);
        } else {
            std::vector<std::thread> pool;
            for (int w = 0; w < n_workers; ++w) {
                pool.emplace_back([&, w] {
                    for (int slot = w; slot < bsz; slot += n_workers) run_slot(workers[w], slot);
                });
            }
            for (auto& t : pool) t.join();
            // Fixed-order reduction keeps the update bit-deterministic.
            for (int w = 1; w < n_workers; ++w) {
                auto& main_params = model_->params().params;
                auto& rep_params = workers[w]->params().params;
                for (size_t i = 0; i < main_params.size(); ++i) {
                    main_params[i].second.impl().ensure_grad();
                    rep_params[i].second.impl().ensure_grad();
                    auto& dst = main_params[i].second.impl().g;
                    const auto& src = rep_params[i].second.impl().g;
                    for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
                }
                workers[w]->params().zero_grads();
            }
        }

        LossRecord rec;
        rec.iteration = iteration_;
        for (const auto& r : results) {
            rec.loss_t += r.loss_t / bsz;
            rec.loss_tm1 += r.loss_tm1 / bsz;
            rec.cls += r.cls / bsz;
            rec.l1 += r.l1 / bsz;
            rec.giou += r.giou / bsz;
        }
        rec.total = rec.loss_t + rec.loss_tm1;

        if (!std::isfinite(rec.total)) {
            model_->params().zero_grads();
            throw TrainingDiverged("non-finite loss at iteration " + std::to_string(iteration_));
        }

        double lr = tc.learning_rate;
        if (tc.warmup_iterations > 0 && iteration_ < tc.warmup_iterations)
            lr *= static_cast<double>(iteration_ + 1) / tc.warmup_iterations;
        opt_.set_learning_rate(lr);
        rec.learning_rate = lr;

        rec.grad_norm = global_grad_norm(model_->params());
        if (tc.grad_clip > 0 && rec.grad_norm > tc.grad_clip) {
            double s = tc.grad_clip / rec.grad_norm;
            for (auto& [name, p] : model_->params().params)
                for (auto& g : p.impl().g) g = static_cast<float>(g * s);
        }
        opt_.step(model_->params());
        model_->params().zero_grads();
        ema_update(ema_model_->params(), model_->params(), tc.ema_decay);
        ++iteration_;
        return rec;
    }

private:
    RunConfig cfg_;
    uint64_t seed_;
    std::shared_ptr<DetectorModel> model_;
    std::shared_ptr<DetectorModel> ema_model_;
    std::vector<std::shared_ptr<DetectorModel>> replicas_;
    AdamW opt_;
    Rng rng_;
    int64_t iteration_ = 0;
};

struct TrainResult {
    std::shared_ptr<DetectorModel> model;
    std::shared_ptr<DetectorModel> ema_model;
    int64_t iterations = 0;
    std::string final_checkpoint;
};

// Full training run: deterministic epoch shuffling, metrics as one JSON
// record per line, periodic + final checkpoints when out_dir is set.
inline TrainResult train(const std::vector<DatasetRecord>& dataset, const RunConfig& cfg, uint64_t seed,
                         const std::string& out_dir = "", std::ostream* metrics = nullptr,
                         const TeacherHandle& teacher = {},
                         const std::function<void(int64_t)>& progress = {}) {
    if (dataset.empty()) throw std::runtime_error("train: empty dataset");
    Trainer trainer(cfg, seed);
    Rng shuffle_rng(splitmix64(seed ^ 0x65706f63));
    std::vector<int> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();  // forces a shuffle on first use

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
    const auto& tc = cfg.trainer;
    for (int64_t k = 0; k < tc.iterations; ++k) {
        std::vector<const DatasetRecord*> batch;
        for (int b = 0; b < tc.batch_size; ++b) {
            if (cursor >= order.size()) {
                for (size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1)]);
                cursor = 0;
            }
            batch.push_back(&dataset[order[cursor++]]);
        }
        LossRecord rec = trainer.step(batch, teacher);
        if (metrics) (*metrics) << rec.to_json().dump() << "\n";
        if (!out_dir.empty() && tc.checkpoint_every > 0 && (k + 1) % tc.checkpoint_every == 0)
            save_checkpoint(out_dir + "/checkpoint_latest.ckpt", cfg, *trainer.model(), *trainer.ema_model(),
                            trainer.iteration());
        if (progress) progress(k + 1);
    }
    TrainResult res;
    res.model = trainer.model();
    res.ema_model = trainer.ema_model();
    res.iterations = trainer.iteration();
    if (!out_dir.empty()) {
        res.final_checkpoint = out_dir + "/checkpoint_final.ckpt";
        save_checkpoint(res.final_checkpoint, cfg, *trainer.model(), *trainer.ema_model(), trainer.iteration());
    }
    return res;
}

}  // namespace condet
