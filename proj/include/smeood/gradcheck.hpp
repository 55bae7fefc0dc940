#pragma once

// Central finite-difference verification of the analytic loss gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "smeood/losses.hpp"
#include "smeood/model.hpp"
#include "smeood/objective.hpp"
#include "smeood/rng.hpp"

namespace smeood {

/// d f / d x by central differences, one coordinate at a time.
template <typename F>
Vec numeric_gradient(F&& f, Vec x, double step = 1e-5) {
    Vec g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + step;
        const double up = f(x);
        x[i] = orig - step;
        const double down = f(x);
        x[i] = orig;
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

struct GradTolerance {
    double step = 1e-5;
    double rtol = 1e-4;
    double atol = 1e-8;
};

/// Largest elementwise relative error; differences within atol count as 0.
inline double max_relative_error(const Vec& analytic, const Vec& numeric, double atol) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
        const double diff = std::abs(analytic[i] - numeric[i]);
        if (diff <= atol) continue;
        worst = std::max(worst, diff / std::max(std::abs(analytic[i]), std::abs(numeric[i])));
    }
    return worst;
}

inline Vec flatten(const Mat& m) { return Eigen::Map<const Vec>(m.data(), m.size()); }

inline Mat unflatten(const Vec& v, Eigen::Index rows, Eigen::Index cols) {
    return Eigen::Map<const Mat>(v.data(), rows, cols);
}

// ---------------------------------------------------------------------------
// Gradient suite

/// Test hook: corrupts one analytic gradient so the suite must fail.
enum class GradFault { none, ce_loss, lmcl_loss, sme_hinge_loss, combined_objective };

struct GradCheckEntry {
    std::string loss;
    int trials = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    /// First failing trial, when any.
    std::optional<int> failed_trial;
    double failed_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    bool passed() const {
        return std::all_of(entries.begin(), entries.end(),
                           [](const GradCheckEntry& e) { return !e.failed_trial; });
    }
};

namespace detail {

inline Vec random_vec(Rng& rng, Eigen::Index n, double scale) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
    return v;
}

inline void record(GradCheckEntry& e, int trial, const Vec& analytic, const Vec& numeric,
                   const GradTolerance& tol) {
    const double err = max_relative_error(analytic, numeric, tol.atol);
    const double rtol = tol.rtol;
    e.max_abs_error = std::max(e.max_abs_error, (analytic - numeric).cwiseAbs().maxCoeff());
    e.max_rel_error = std::max(e.max_rel_error, err);
    if (err > rtol && !e.failed_trial) {
        e.failed_trial = trial;
        e.failed_error = err;
    }
}

inline Vec flatten(const Params& p) {
    Vec v(p.proj_w.size() + p.proj_b.size() + p.head_w.size() + p.head_b.size());
    v << smeood::flatten(p.proj_w), p.proj_b, smeood::flatten(p.head_w), p.head_b;
    return v;
}

inline Params unflatten_like(const Vec& v, const Params& shape) {
    Params p = shape;
    Eigen::Index o = 0;
    auto take = [&](Eigen::Index n) {
        Vec s = v.segment(o, n);
        o += n;
        return s;
    };
    p.proj_w = smeood::unflatten(take(shape.proj_w.size()), shape.proj_w.rows(), shape.proj_w.cols());
    p.proj_b = take(shape.proj_b.size());
    p.head_w = smeood::unflatten(take(shape.head_w.size()), shape.head_w.rows(), shape.head_w.cols());
    p.head_b = take(shape.head_b.size());
    return p;
}

}  // namespace detail

/// Runs `trials` seeded random instances per loss.
inline GradCheckReport run_gradient_suite(int trials, std::uint64_t seed,
                                          GradFault fault = GradFault::none,
                                          GradTolerance tol = {}) {
    GradCheckReport report;
    const double corrupt = 1.0 + 1e-2;

    {
        GradCheckEntry e;
        e.loss = "ce_loss";
        e.trials = trials;
        Rng rng = Rng::stream(seed, "gradcheck/ce");
        for (int t = 0; t < trials; ++t) {
            const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng.below(9));
            const Vec logits = detail::random_vec(rng, k, 3.0);
            const auto target = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(k)));
            Vec g = ce_loss(logits, target).grad;
            if (fault == GradFault::ce_loss) g *= corrupt;
            const Vec n = numeric_gradient([&](const Vec& x) { return ce_loss(x, target).loss; },
                                           logits, tol.step);
            detail::record(e, t, g, n, tol);
        }
        report.entries.push_back(e);
    }

    {
        GradCheckEntry e;
        e.loss = "lmcl_loss";
        e.trials = trials;
        Rng rng = Rng::stream(seed, "gradcheck/lmcl");
        const Eigen::Index d = 8, k = 5;
        for (int t = 0; t < trials; ++t) {
            LmclHead head{unflatten(detail::random_vec(rng, k * d, 1.0), k, d), 16.0,
                          0.5 * rng.uniform()};
            const Vec z = detail::random_vec(rng, d, 1.0);
            const auto target = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(k)));
            auto a = lmcl_loss(z, head, target);
            Vec ga(d + k * d);
            ga << a.grad_embedding, flatten(a.grad_weights);
            if (fault == GradFault::lmcl_loss) ga *= corrupt;
            Vec x0(d + k * d);
            x0 << z, flatten(head.weights);
            const Vec n = numeric_gradient(
                [&](const Vec& x) {
                    LmclHead h = head;
                    h.weights = unflatten(x.tail(k * d), k, d);
                    return lmcl_loss(x.head(d), h, target).loss;
                },
                x0, tol.step);
            detail::record(e, t, ga, n, tol);
        }
        report.entries.push_back(e);
    }

    {
        GradCheckEntry e;
        e.loss = "sme_hinge_loss";
        e.trials = trials;
        Rng rng = Rng::stream(seed, "gradcheck/sme_hinge");
        const Eigen::Index k = 6;
        for (int t = 0; t < trials; ++t) {
            // Alternate the reference margins with margins drawn inside the
            // attainable range so both hinge branches are exercised.
            SmeLossConfig cfg;
            cfg.temperature = (t % 3 == 0) ? 1.0 : (t % 3 == 1 ? 0.5 : 2.0);
            std::vector<Vec> in, out;
            const int n_in = 1 + static_cast<int>(rng.below(3));
            const int n_out = 1 + static_cast<int>(rng.below(3));
            for (int i = 0; i < n_in; ++i) in.push_back(detail::random_vec(rng, k, 2.0));
            for (int i = 0; i < n_out; ++i) out.push_back(detail::random_vec(rng, k, 2.0));
            if (t % 2 == 1) {
                const auto b = sme_bounds(static_cast<std::size_t>(k), cfg.temperature);
                cfg.m_in = rng.uniform(b.lower, b.upper);
                cfg.m_out = rng.uniform(b.lower, b.upper);
            }
            // Keep every sample away from its hinge kink.
            auto away = [&](const Vec& u, double m) {
                return std::abs(sme(as_span(u), cfg.temperature) - m) > 1e-3;
            };
            bool ok = true;
            for (const auto& u : in) ok &= away(u, cfg.m_in);
            for (const auto& u : out) ok &= away(u, cfg.m_out);
            if (!ok) {
                --t;
                continue;
            }
            auto a = sme_hinge_loss(in, out, cfg);
            Vec ga(k * (n_in + n_out)), x0(k * (n_in + n_out));
            for (int i = 0; i < n_in; ++i) {
                ga.segment(i * k, k) = a.grads_in[static_cast<std::size_t>(i)];
                x0.segment(i * k, k) = in[static_cast<std::size_t>(i)];
            }
            for (int i = 0; i < n_out; ++i) {
                ga.segment((n_in + i) * k, k) = a.grads_out[static_cast<std::size_t>(i)];
                x0.segment((n_in + i) * k, k) = out[static_cast<std::size_t>(i)];
            }
            if (fault == GradFault::sme_hinge_loss) ga *= corrupt;
            const Vec n = numeric_gradient(
                [&](const Vec& x) {
                    std::vector<Vec> pi, po;
                    for (int i = 0; i < n_in; ++i) pi.push_back(x.segment(i * k, k));
                    for (int i = 0; i < n_out; ++i) po.push_back(x.segment((n_in + i) * k, k));
                    return sme_hinge_loss(pi, po, cfg).loss;
                },
                x0, tol.step);
            detail::record(e, t, ga, n, tol);
        }
        report.entries.push_back(e);
    }

    {
        GradCheckEntry e;
        e.loss = "combined_objective";
        e.trials = trials;
        Rng rng = Rng::stream(seed, "gradcheck/combined");
        for (int t = 0; t < trials; ++t) {
            const HeadKind head = t % 2 == 0 ? HeadKind::lmcl : HeadKind::plain;
            const Eigen::Index dim = 5, emb = 4, k = 4;
            ToyModel m = init_model(head, dim, emb, k, seed + static_cast<std::uint64_t>(t));
            if (head == HeadKind::plain) m.params.head_b = detail::random_vec(rng, k, 0.5);
            m.params.proj_b = detail::random_vec(rng, emb, 0.5);
            LabeledBatch batch;
            for (int i = 0; i < 3; ++i) {
                batch.inputs.push_back(detail::random_vec(rng, dim, 1.0));
                batch.labels.push_back(static_cast<std::size_t>(rng.below(k)));
            }
            std::vector<Vec> ood;
            for (int i = 0; i < 2; ++i) ood.push_back(detail::random_vec(rng, dim, 1.0));
            ObjectiveConfig cfg;
            cfg.margin = 0.3;
            const auto b = sme_bounds(static_cast<std::size_t>(k));
            cfg.sme = SmeLossConfig{0.7, rng.uniform(b.lower, b.upper), rng.uniform(b.lower, b.upper), 1.0};
            auto margin_ok = [&](const ToyModel& mm) {
                for (const auto& x : batch.inputs)
                    if (std::abs(sme(as_span(mm.inference_logits(x))) - cfg.sme->m_in) < 1e-3) return false;
                for (const auto& x : ood)
                    if (std::abs(sme(as_span(mm.inference_logits(x))) - cfg.sme->m_out) < 1e-3) return false;
                return true;
            };
            if (!margin_ok(m)) {
                --t;
                continue;
            }
            auto a = combined_objective(m, batch, ood, cfg);
            Vec ga = detail::flatten(a.grad);
            if (fault == GradFault::combined_objective) ga *= corrupt;
            const Vec n = numeric_gradient(
                [&](const Vec& x) {
                    ToyModel mm = m;
                    mm.params = detail::unflatten_like(x, m.params);
                    return combined_objective(mm, batch, ood, cfg).loss;
                },
                detail::flatten(m.params), tol.step);
            detail::record(e, t, ga, n, tol);
        }
        report.entries.push_back(e);
    }
    return report;
}

}  // namespace smeood
