// Karras-family noise schedule and the consistency-model scaling functions.
#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

namespace condet {

// sigma_at(t) = (smax^(1/rho) + t/(T-1) * (smin^(1/rho) - smax^(1/rho)))^rho,
// strictly decreasing from sigma_max at t=0 to sigma_min at t=T-1.
//
// c_skip / c_out take the boundary-shifted forms
//   c_skip(s) = sd^2 / ((s - smin)^2 + sd^2)
//   c_out(s)  = sd * (s - smin) / sqrt(s^2 + sd^2)
// so that c_skip(smin) = 1 and c_out(smin) = 0 exactly.
struct NoiseSchedule {
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double rho = 7.0;
    int total_steps = 40;
    double sigma_data = 0.5;

    void validate() const {
        if (!(sigma_min > 0.0 && sigma_min < sigma_max))
            throw std::invalid_argument("schedule: need 0 < sigma_min < sigma_max");
        if (!(rho > 0.0)) throw std::invalid_argument("schedule: rho must be positive");
        if (total_steps < 2) throw std::invalid_argument("schedule: total_steps must be >= 2");
        if (!(sigma_data > 0.0)) throw std::invalid_argument("schedule: sigma_data must be positive");
    }

    // Accepts fractional t so samplers may stride by T / n_ss.
    double sigma_at(double t) const {
        if (!(t >= 0.0 && t <= total_steps - 1))
            throw std::domain_error("sigma_at: t outside [0, T-1]");
        if (t == 0.0) return sigma_max;
        if (t == static_cast<double>(total_steps - 1)) return sigma_min;
        double inv = 1.0 / rho;
        double a = std::pow(sigma_max, inv);
        double b = std::pow(sigma_min, inv);
        return std::pow(a + t / (total_steps - 1) * (b - a), rho);
    }

    double c_in(double sigma) const {
        if (sigma < 0.0) throw std::domain_error("c_in: negative sigma");
        return 1.0 / std::sqrt(sigma * sigma + sigma_data * sigma_data);
    }

    std::pair<double, double> c_skip_out(double sigma) const {
        if (sigma < sigma_min) throw std::domain_error("c_skip_out: sigma below sigma_min");
        double d = sigma - sigma_min;
        double skip = sigma_data * sigma_data / (d * d + sigma_data * sigma_data);
        double out = sigma_data * d / std::sqrt(sigma * sigma + sigma_data * sigma_data);
        return {skip, out};
    }
};

}  // namespace condet
