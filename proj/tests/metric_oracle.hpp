#pragma once

// Brute-force reference for the threshold metrics. Every candidate threshold
// is evaluated by summing over all samples from scratch; nothing is shared
// with the library's cumulative sweep except the documented rules:
//   accept when score >= t; thresholds are -inf, the distinct scores, +inf;
//   FPR95 takes the largest t with TPR >= target (1e-12 slack);
//   EER/EERc return the first point where fpr - fnr <= 0, exactly when it is
//   0 there, else the linear interpolation with the previous point.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "smeood/metrics.hpp"
#include "smeood/rng.hpp"
#include "smeood/scoring.hpp"

namespace oracle {

struct Row {
    double t, tpr, fpr, fnr, fnr_conf;
};

inline std::vector<Row> table(std::span<const smeood::ScoredSample> s) {
    std::vector<double> ts;
    for (const auto& x : s) ts.push_back(x.score);
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    ts.insert(ts.begin(), -std::numeric_limits<double>::infinity());
    ts.push_back(std::numeric_limits<double>::infinity());

    double w_id = 0, w_ood = 0;
    for (const auto& x : s) (x.is_ood ? w_ood : w_id) += x.weight;

    std::vector<Row> rows;
    for (double t : ts) {
        double id_acc = 0, id_ok = 0, ood_acc = 0;
        for (const auto& x : s) {
            if (x.score < t) continue;
            if (x.is_ood) {
                ood_acc += x.weight;
            } else {
                id_acc += x.weight;
                if (x.true_class && *x.true_class == x.predicted_class) id_ok += x.weight;
            }
        }
        rows.push_back({t, id_acc / w_id, ood_acc / w_ood, 1 - id_acc / w_id, 1 - id_ok / w_id});
    }
    return rows;
}

inline double fpr95(std::span<const smeood::ScoredSample> s, double target = 0.95) {
    const auto rows = table(s);
    double best_t = -std::numeric_limits<double>::infinity(), fpr = rows.front().fpr;
    for (const auto& r : rows)
        if (r.tpr >= target - 1e-12 && r.t >= best_t) {
            best_t = r.t;
            fpr = r.fpr;
        }
    return fpr;
}

template <typename F>
double crossing(const std::vector<Row>& rows, F fnr) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double d = rows[i].fpr - fnr(rows[i]);
        if (d > 0) continue;
        if (d == 0 || i == 0) return rows[i].fpr;
        const double dp = rows[i - 1].fpr - fnr(rows[i - 1]);
        const double a = dp / (dp - d);
        return (1 - a) * rows[i - 1].fpr + a * rows[i].fpr;
    }
    return rows.back().fpr;
}

inline double eer(std::span<const smeood::ScoredSample> s) {
    return crossing(table(s), [](const Row& r) { return r.fnr; });
}

inline double eerc(std::span<const smeood::ScoredSample> s) {
    return crossing(table(s), [](const Row& r) { return r.fnr_conf; });
}

/// Random class-weighted sample set of 2..max_n samples with at least one ID
/// and one OOD sample; half the sets use integer scores to force ties.
inline std::vector<smeood::ScoredSample> random_samples(smeood::Rng& rng, std::size_t max_n) {
    std::vector<smeood::ScoredSample> s;
    const std::size_t n = 2 + rng.below(max_n - 1);
    const bool coarse = rng.below(2) == 0;
    for (std::size_t i = 0; i < n; ++i) {
        smeood::ScoredSample x;
        x.sample_id = "s" + std::to_string(i);
        x.is_ood = i == 0 ? false : (i == 1 ? true : rng.below(2) == 0);
        x.score = coarse ? static_cast<double>(rng.below(6)) : rng.normal();
        if (x.is_ood) {
            x.model_name = "ood" + std::to_string(rng.below(3));
        } else {
            x.model_name = "id" + std::to_string(rng.below(4));
            x.true_class = 0;
            x.predicted_class = rng.below(4) != 0 ? 0 : 1;
        }
        s.push_back(std::move(x));
    }
    return smeood::reweight_per_class(std::move(s));
}

}  // namespace oracle
