// Few-step inference: noise-to-box sampling with per-step box renewal and
// proposal supplementation, NMS once after the final decode.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <thread>
#include <vector>

#include "condet/corruption.hpp"
#include "condet/decoder.hpp"
#include "condet/geometry.hpp"
#include "condet/image.hpp"
#include "condet/schedule.hpp"
#include "condet/trainer.hpp"

namespace condet {

struct SamplerConfig {
    int n_ss = 1;           // sampling step count
    int n_p = 500;          // proposal count
    double b_th = 0.98;     // box-renewal threshold
    double n_th = 0.64;     // NMS IoU threshold
    double score_floor = 0.05;
    uint64_t seed = 0;

    void validate(const NoiseSchedule& schedule) const {
        if (n_ss < 1 || n_ss > schedule.total_steps)
            throw std::invalid_argument("sampler: n_ss must be in [1, T]");
        if (n_p < 1) throw std::invalid_argument("sampler: n_p must be >= 1");
        if (!(b_th >= 0.0 && b_th <= 1.0)) throw std::invalid_argument("sampler: B_th outside [0,1]");
        if (!(n_th > 0.0 && n_th <= 1.0)) throw std::invalid_argument("sampler: N_th outside (0,1]");
    }
};

struct SampleStats {
    int64_t decode_calls = 0;
    double seconds = 0.0;
    int n_r_final = 0;
};

// Algorithm: B_0 ~ N(0, sigma_max^2); for t = 0 step dt = T/n_ss while
// t < T: decode, renew by B_th, Euler-step survivors toward sigma(t+dt)
// (sigma_min on the final step), refill to n_p with fresh noise. Detections
// come from the final decode's surviving rows.
template <class Model>
std::vector<Detection> sample(const ImageU8& image, Model& model, const NoiseSchedule& schedule,
                              const SamplerConfig& cfg, SampleStats* stats = nullptr) {
    cfg.validate(schedule);
    auto start = std::chrono::steady_clock::now();
    int64_t calls_before = model.decode_calls();
    Rng rng(splitmix64(cfg.seed ^ 0x73616d70));

    auto feat = model.extract_features(image);
    double dt = static_cast<double>(schedule.total_steps) / cfg.n_ss;
    ProposalSet b{gaussian_boxes(cfg.n_p, rng, schedule.sigma_max), schedule.sigma_max};

    DetectionOutput last;
    std::vector<int> last_keep;
    for (int i = 0; i < cfg.n_ss; ++i) {
        double t = i * dt;
        double sigma_t = schedule.sigma_at(std::min(t, static_cast<double>(schedule.total_steps - 1)));
        b.sigma = sigma_t;
        DetectionOutput out = model.decode(feat, b);

        auto keep = renewal_survivors(out.row_scores(), cfg.b_th);
        double t_next = (i + 1) * dt;
        double sigma_next = t_next > schedule.total_steps - 1
                                ? schedule.sigma_min
                                : schedule.sigma_at(t_next);
        BoxArray xb_kept = filter_rows(out.xb, keep);
        BoxArray x0_kept = filter_rows(out.x0, keep);
        BoxArray stepped = euler_denoise_step(xb_kept, x0_kept, sigma_t, sigma_next);
        b = supplement_proposals(ProposalSet{stepped, sigma_next}, cfg.n_p, sigma_next, rng);

        last = std::move(out);
        last_keep = std::move(keep);
    }

    std::vector<Detection> dets;
    auto all = last.to_detections();
    for (int idx : last_keep) {
        if (all[idx].score >= cfg.score_floor) dets.push_back(all[idx]);
    }
    auto result = nms(dets, cfg.n_th);
    if (stats) {
        stats->decode_calls = model.decode_calls() - calls_before;
        stats->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        stats->n_r_final = static_cast<int>(last_keep.size());
    }
    return result;
}

struct BatchItem {
    int64_t image_id = 0;
    std::vector<Detection> detections;
    SampleStats stats;
};

// Per-image results identical to individual sample() calls: each image gets
// seed = config seed XOR a hash of its id, so batching and ordering never
// change the outcome. Images are distributed over a fixed thread partition.
template <class Model>
std::vector<BatchItem> sample_batch(const std::vector<const DatasetRecord*>& records, Model& model,
                                    const NoiseSchedule& schedule, const SamplerConfig& cfg, int threads = 1) {
    if (records.empty()) throw std::invalid_argument("sample_batch: empty image list");
    std::vector<BatchItem> items(records.size());
    auto work = [&](size_t idx) {
        SamplerConfig per = cfg;
        per.seed = cfg.seed ^ splitmix64(static_cast<uint64_t>(records[idx]->id));
        items[idx].image_id = records[idx]->id;
        items[idx].detections = sample(records[idx]->image, model, schedule, per, &items[idx].stats);
    };
    int n_workers = std::max(1, std::min<int>(threads, static_cast<int>(records.size())));
    if (n_workers == 1) {
        for (size_t i = 0; i < records.size(); ++i) work(i);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < n_workers; ++w)
            pool.emplace_back([&, w] {
                for (size_t i = w; i < records.size(); i += n_workers) work(i);
            });
        for (auto& t : pool) t.join();
    }
    return items;
}

}  // namespace condet
