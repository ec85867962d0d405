// GT padding to fixed cardinality, forward noising, decoder input scaling
// and the box renewal / proposal supplement primitives.
#pragma once

#include <stdexcept>
#include <vector>

#include "condet/common.hpp"
#include "condet/geometry.hpp"
#include "condet/schedule.hpp"

namespace condet {

// Fixed-cardinality set of (possibly noisy) signal-space boxes tagged with
// the noise level they carry. sigma == 0 marks a clean (un-noised) set.
struct ProposalSet {
    BoxArray boxes;
    double sigma = 0.0;

    int count() const { return static_cast<int>(boxes.rows()); }
};

enum class PaddingMode {
    kGaussian,  // auxiliary boxes ~ N(0, I) in signal space
    kAroundGt,  // auxiliary boxes are jittered copies of random GT boxes
};

// Pads GT boxes (converted to signal space, GT rows first) up to n_tr rows.
// When |gt| > n_tr a uniformly random subset of the GT is kept instead.
inline ProposalSet pad_ground_truth(const std::vector<Box>& gt, int n_tr, Rng& rng,
                                    PaddingMode mode = PaddingMode::kGaussian) {
    if (n_tr < 1) throw std::invalid_argument("pad_ground_truth: n_tr must be >= 1");
    ProposalSet out;
    out.boxes.resize(n_tr, 4);
    int ngt = static_cast<int>(gt.size());
    if (ngt > n_tr) {
        std::vector<int> idx(ngt);
        for (int i = 0; i < ngt; ++i) idx[i] = i;
        for (int i = 0; i < n_tr; ++i) {
            int j = static_cast<int>(rng.uniform_int(i, ngt - 1));
            std::swap(idx[i], idx[j]);
        }
        for (int i = 0; i < n_tr; ++i) {
            auto s = to_signal_space(gt[idx[i]]);
            for (int c = 0; c < 4; ++c) out.boxes(i, c) = s[c];
        }
        return out;
    }
    for (int i = 0; i < ngt; ++i) {
        auto s = to_signal_space(gt[i]);
        for (int c = 0; c < 4; ++c) out.boxes(i, c) = s[c];
    }
    for (int i = ngt; i < n_tr; ++i) {
        if (mode == PaddingMode::kAroundGt && ngt > 0) {
            int j = static_cast<int>(rng.uniform_int(0, ngt - 1));
            auto s = to_signal_space(gt[j]);
            for (int c = 0; c < 4; ++c) out.boxes(i, c) = s[c] + 0.5 * rng.normal();
        } else {
            for (int c = 0; c < 4; ++c) out.boxes(i, c) = rng.normal();
        }
    }
    return out;
}

// x_t = x_s + eps * sigma_t. No clamping; noisy boxes may leave [-1,1].
inline ProposalSet corrupt(const ProposalSet& x_s, double sigma_t, const BoxArray& epsilon) {
    if (!(sigma_t >= 0.0)) throw std::domain_error("corrupt: sigma_t must be non-negative");
    if (epsilon.rows() != x_s.boxes.rows()) throw std::invalid_argument("corrupt: epsilon shape mismatch");
    ProposalSet out;
    out.boxes = x_s.boxes + epsilon * sigma_t;
    out.sigma = sigma_t;
    return out;
}

// Decoder input representation: (c_in(sigma)/2) * x_t.
inline BoxArray scale_for_decoder(const ProposalSet& x_t, const NoiseSchedule& schedule) {
    return x_t.boxes * (schedule.c_in(x_t.sigma) / 2.0);
}

// Keeps exactly the rows whose score >= b_th. Returns surviving row indices;
// callers filter the aligned box sets with filter_rows below.
inline std::vector<int> renewal_survivors(const std::vector<double>& scores, double b_th) {
    if (!(b_th >= 0.0 && b_th <= 1.0)) throw std::invalid_argument("box_renewal: B_th outside [0,1]");
    std::vector<int> keep;
    keep.reserve(scores.size());
    for (size_t i = 0; i < scores.size(); ++i)
        if (scores[i] >= b_th) keep.push_back(static_cast<int>(i));
    return keep;
}

inline BoxArray filter_rows(const BoxArray& m, const std::vector<int>& rows) {
    BoxArray out(static_cast<int>(rows.size()), 4);
    for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<int>(i)) = m.row(rows[i]);
    return out;
}

struct RenewalResult {
    ProposalSet x_b;
    ProposalSet x_0;
    int n_r = 0;
};

// Box-renewal: drop rows of (x_b, x_0) whose max class score falls below
// b_th. b_th = 0 keeps everything (renewal disabled).
inline RenewalResult box_renewal(const std::vector<double>& scores, const ProposalSet& x_b,
                                 const ProposalSet& x_0, double b_th) {
    if (static_cast<int>(scores.size()) != x_b.count() || x_b.count() != x_0.count())
        throw std::invalid_argument("box_renewal: score/box row mismatch");
    auto keep = renewal_survivors(scores, b_th);
    RenewalResult r;
    r.x_b = ProposalSet{filter_rows(x_b.boxes, keep), x_b.sigma};
    r.x_0 = ProposalSet{filter_rows(x_0.boxes, keep), x_0.sigma};
    r.n_r = static_cast<int>(keep.size());
    return r;
}

// Concatenates n_p - count fresh Gaussian * sigma_next rows.
inline ProposalSet supplement_proposals(const ProposalSet& x, int n_p, double sigma_next, Rng& rng) {
    if (x.count() > n_p) throw std::invalid_argument("supplement_proposals: set larger than n_p");
    ProposalSet out;
    out.boxes.resize(n_p, 4);
    out.boxes.topRows(x.count()) = x.boxes;
    for (int i = x.count(); i < n_p; ++i)
        for (int c = 0; c < 4; ++c) out.boxes(i, c) = rng.normal() * sigma_next;
    out.sigma = sigma_next;
    return out;
}

}  // namespace condet
