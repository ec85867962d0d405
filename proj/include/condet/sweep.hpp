// Threshold / step-count sweeps producing one EvalReport per value.
#pragma once

#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "condet/evalkit.hpp"
#include "condet/sampler.hpp"

namespace condet {

struct SweepRow {
    std::string param;
    double value = 0;
    EvalReport report;
};

inline const std::vector<std::string>& sweep_params() {
    static const std::vector<std::string> p = {"box-renewal", "nms", "steps", "proposals"};
    return p;
}

template <class Model>
std::vector<SweepRow> run_sweep(const std::vector<DatasetRecord>& records, Model& model,
                                const NoiseSchedule& schedule, const SamplerConfig& base,
                                const std::string& param, const std::vector<double>& values, int threads = 1) {
    std::vector<const DatasetRecord*> ptrs;
    for (const auto& r : records) ptrs.push_back(&r);
    std::vector<SweepRow> rows;
    for (double v : values) {
        SamplerConfig cfg = base;
        if (param == "box-renewal") {
            cfg.b_th = v;
        } else if (param == "nms") {
            cfg.n_th = v;
        } else if (param == "steps") {
            cfg.n_ss = static_cast<int>(v);
        } else if (param == "proposals") {
            cfg.n_p = static_cast<int>(v);
        } else {
            throw std::invalid_argument("sweep: unknown parameter '" + param + "'");
        }
        auto items = sample_batch(ptrs, model, schedule, cfg, threads);
        std::vector<std::vector<Detection>> dets(records.size());
        for (size_t i = 0; i < items.size(); ++i) dets[i] = items[i].detections;
        rows.push_back({param, v, evaluate(dets, records)});
    }
    return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "param,value,ap,ap50,ap75,ap_small,ap_medium,ap_large\n";
    for (const auto& r : rows) {
        os << r.param << "," << r.value << "," << r.report.ap << "," << r.report.ap50 << "," << r.report.ap75
           << "," << r.report.ap_small << "," << r.report.ap_medium << "," << r.report.ap_large << "\n";
    }
    return os.str();
}

}  // namespace condet
