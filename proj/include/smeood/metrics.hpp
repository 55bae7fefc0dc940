#pragma once

// Class-weighted open-set metrics: ID accuracy, FPR95, EER and EER with
// confusion (EERc). All threshold-based metrics share one sweep over the
// observed scores; a sample is accepted as ID when score >= threshold.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "smeood/error.hpp"
#include "smeood/scoring.hpp"

namespace smeood {

/// Rates compare against targets with this slack so that weight sums which
/// round a hair below an exact fraction still count as reaching it.
inline constexpr double kRateSlack = 1e-12;

struct SweepPoint {
    double threshold = 0.0;
    double tpr_id = 0.0;    ///< weighted fraction of ID with score >= threshold
    double fpr_ood = 0.0;   ///< weighted fraction of OOD with score >= threshold
    double fnr_conf = 0.0;  ///< ID rejected, or accepted but misclassified
};

/// Sweep over -inf, every distinct observed score (ascending), and +inf.
struct Sweep {
    std::vector<SweepPoint> points;
    /// False when some ID sample has no true class; fnr_conf is then NaN.
    bool has_confusion = true;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
};

inline Sweep compute_sweep(std::span<const ScoredSample> samples) {
    Sweep sw;
    for (const auto& s : samples) {
        if (!(s.weight > 0.0) || !std::isfinite(s.weight))
            throw InvalidArgument("sample '" + s.sample_id + "' has a non-positive weight");
        if (!std::isfinite(s.score))
            throw InvalidArgument("sample '" + s.sample_id + "' has a non-finite score");
        if (s.is_ood) {
            ++sw.n_ood;
        } else {
            ++sw.n_id;
            if (!s.true_class) sw.has_confusion = false;
        }
    }
    if (sw.n_id == 0 || sw.n_ood == 0)
        throw InvalidArgument("metrics need at least one ID and one OOD sample");

    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return samples[a].score > samples[b].score;
    });

    // Cumulative masses accepted at each distinct threshold, highest first.
    struct Acc {
        double threshold, id, id_correct, ood;
    };
    std::vector<Acc> desc;
    double id = 0.0, id_correct = 0.0, ood = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        const double t = samples[order[i]].score;
        for (; i < order.size() && samples[order[i]].score == t; ++i) {
            const auto& s = samples[order[i]];
            if (s.is_ood) {
                ood += s.weight;
            } else {
                id += s.weight;
                if (s.true_class && *s.true_class == s.predicted_class) id_correct += s.weight;
            }
        }
        desc.push_back({t, id, id_correct, ood});
    }
    const double total_id = id;
    const double total_ood = ood;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double inf = std::numeric_limits<double>::infinity();

    auto point = [&](double t, const Acc& a) {
        SweepPoint p;
        p.threshold = t;
        p.tpr_id = a.id / total_id;
        p.fpr_ood = a.ood / total_ood;
        p.fnr_conf = sw.has_confusion ? 1.0 - a.id_correct / total_id : nan;
        return p;
    };
    sw.points.reserve(desc.size() + 2);
    sw.points.push_back(point(-inf, desc.back()));
    for (auto it = desc.rbegin(); it != desc.rend(); ++it) sw.points.push_back(point(it->threshold, *it));
    sw.points.push_back(point(inf, Acc{inf, 0.0, 0.0, 0.0}));
    return sw;
}

namespace detail {

/// Crossing of fpr and a false-negative curve along an ascending sweep.
/// Returns the shared value at an exact crossing, else interpolates linearly
/// between the two points bracketing the sign change of (fpr - fnr).
template <typename Fnr>
double crossing(const std::vector<SweepPoint>& pts, Fnr fnr) {
    for (std::size_t j = 0; j < pts.size(); ++j) {
        const double dj = pts[j].fpr_ood - fnr(pts[j]);
        if (dj > 0.0) continue;
        if (dj == 0.0 || j == 0) return pts[j].fpr_ood;
        const double di = pts[j - 1].fpr_ood - fnr(pts[j - 1]);
        const double t = di / (di - dj);
        return pts[j - 1].fpr_ood + t * (pts[j].fpr_ood - pts[j - 1].fpr_ood);
    }
    return pts.back().fpr_ood;
}

}  // namespace detail

/// Weighted OOD false-positive rate at the largest threshold whose ID
/// true-positive rate is at least `tpr_target` (step function, no interpolation).
inline double fpr_at_tpr(const Sweep& sw, double tpr_target = 0.95) {
    for (auto it = sw.points.rbegin(); it != sw.points.rend(); ++it)
        if (it->tpr_id >= tpr_target - kRateSlack) return it->fpr_ood;
    return sw.points.front().fpr_ood;
}

inline double eer(const Sweep& sw) {
    return detail::crossing(sw.points, [](const SweepPoint& p) { return 1.0 - p.tpr_id; });
}

inline double eerc(const Sweep& sw) {
    if (!sw.has_confusion) throw InvalidArgument("eerc: an ID sample has no true class");
    return detail::crossing(sw.points, [](const SweepPoint& p) { return p.fnr_conf; });
}

inline double fpr95(std::span<const ScoredSample> samples, double tpr_target = 0.95) {
    return fpr_at_tpr(compute_sweep(samples), tpr_target);
}

inline double eer(std::span<const ScoredSample> samples) { return eer(compute_sweep(samples)); }

inline double eerc(std::span<const ScoredSample> samples) { return eerc(compute_sweep(samples)); }

/// Weighted ID accuracy; OOD samples in the input are ignored.
inline double id_accuracy(std::span<const ScoredSample> samples) {
    double correct = 0.0, total = 0.0;
    std::size_t n = 0;
    for (const auto& s : samples) {
        if (s.is_ood) continue;
        if (!s.true_class)
            throw InvalidArgument("id_accuracy: model_name '" + s.model_name +
                                  "' is not an ID class");
        ++n;
        total += s.weight;
        if (*s.true_class == s.predicted_class) correct += s.weight;
    }
    if (n == 0) throw InvalidArgument("id_accuracy: no ID samples");
    return correct / total;
}

struct WeightedMetricReport {
    double id_acc = 0.0;
    double fpr95 = 0.0;
    double eer = 0.0;
    double eerc = 0.0;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
    ScoreMethod method;
    std::vector<SweepPoint> sweep;  ///< kept only when requested
};

inline WeightedMetricReport full_report(std::span<const ScoredSample> samples,
                                        const ScoreMethod& method, bool keep_sweep = false) {
    Sweep sw = compute_sweep(samples);
    WeightedMetricReport r;
    r.id_acc = id_accuracy(samples);
    r.fpr95 = fpr_at_tpr(sw);
    r.eer = eer(sw);
    r.eerc = eerc(sw);
    r.n_id = sw.n_id;
    r.n_ood = sw.n_ood;
    r.method = method;
    if (keep_sweep) r.sweep = std::move(sw.points);
    return r;
}

// ---------------------------------------------------------------------------
// Reweighting helpers

/// Replaces every weight by 1/N_c over the given samples.
inline std::vector<ScoredSample> reweight_per_class(std::vector<ScoredSample> samples) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : samples) ++counts[s.model_name];
    for (auto& s : samples) s.weight = 1.0 / static_cast<double>(counts[s.model_name]);
    return samples;
}

inline std::vector<ScoredSample> with_unit_weights(std::vector<ScoredSample> samples) {
    for (auto& s : samples) s.weight = 1.0;
    return samples;
}

/// Keeps ID samples plus OOD samples whose model_name is listed, then
/// recomputes per-class weights on the subset.
inline std::vector<ScoredSample> ood_subset(std::span<const ScoredSample> samples,
                                            const std::set<std::string>& ood_models) {
    std::vector<ScoredSample> out;
    for (const auto& s : samples)
        if (!s.is_ood || ood_models.contains(s.model_name)) out.push_back(s);
    return reweight_per_class(std::move(out));
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {
inline nlohmann::ordered_json json_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return nullptr;
    return v;
}
}  // namespace detail

inline nlohmann::ordered_json to_json(const WeightedMetricReport& r) {
    nlohmann::ordered_json j;
    j["method"] = format_method(r.method);
    j["id_acc"] = r.id_acc;
    j["fpr95"] = r.fpr95;
    j["eer"] = r.eer;
    j["eerc"] = r.eerc;
    j["n_id"] = r.n_id;
    j["n_ood"] = r.n_ood;
    if (!r.sweep.empty()) {
        auto& rows = j["sweep"] = nlohmann::ordered_json::array();
        for (const auto& p : r.sweep)
            rows.push_back({{"threshold", detail::json_number(p.threshold)},
                            {"tpr_id", p.tpr_id},
                            {"fpr_ood", p.fpr_ood},
                            {"fnr_conf", detail::json_number(p.fnr_conf)}});
    }
    return j;
}

}  // namespace smeood
