#pragma once

// Training objectives with analytic gradients: softmax cross-entropy, the
// large margin cosine loss (LMCL) and the squared-hinge softmax-energy loss.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "smeood/error.hpp"
#include "smeood/scoring.hpp"

namespace smeood {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline std::span<const double> as_span(const Vec& v) {
    return {v.data(), static_cast<std::size_t>(v.size())};
}

inline Vec to_vec(std::span<const double> s) {
    return Eigen::Map<const Vec>(s.data(), static_cast<Eigen::Index>(s.size()));
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

struct LossGrad {
    double loss = 0.0;
    Vec grad;
};

/// loss = -log softmax_target(logits); grad = softmax(logits) - onehot(target).
inline LossGrad ce_loss(const Vec& logits, std::size_t target) {
    if (target >= static_cast<std::size_t>(logits.size()))
        throw InvalidArgument("ce_loss: target index out of range");
    const auto t = static_cast<Eigen::Index>(target);
    LossGrad out;
    out.loss = log_sum_exp(as_span(logits)) - logits[t];
    out.grad = to_vec(softmax(as_span(logits)));
    out.grad[t] -= 1.0;
    return out;
}

// ---------------------------------------------------------------------------
// LMCL

struct LmclHead {
    Mat weights;         ///< k x d, one row per class
    double scale = 16.0;
    double margin = 0.0;

    Eigen::Index num_classes() const { return weights.rows(); }
    Eigen::Index dim() const { return weights.cols(); }
};

/// Margin grows linearly from start to end over ramp_epochs, then holds.
struct MarginSchedule {
    double start_margin = 0.0;
    double end_margin = 0.5;
    int ramp_epochs = 40;

    double at(int epoch) const {
        if (epoch <= 0) return start_margin;
        const double frac = std::min(static_cast<double>(epoch) / ramp_epochs, 1.0);
        return start_margin + (end_margin - start_margin) * frac;
    }
};

/// Cosine between the embedding and each weight row.
inline Vec cosines(const Vec& embedding, const Mat& weights) {
    const double nz = embedding.norm();
    if (!(nz > 0.0)) throw InvalidArgument("lmcl: zero embedding has no direction");
    Vec out(weights.rows());
    for (Eigen::Index i = 0; i < weights.rows(); ++i) {
        const double nh = weights.row(i).norm();
        if (!(nh > 0.0)) throw InvalidArgument("lmcl: zero weight row");
        out[i] = weights.row(i).dot(embedding) / (nh * nz);
    }
    return out;
}

/// Gradients of sum_i dcos_i * cos_i with respect to embedding and weights.
struct CosineGrad {
    Vec embedding;
    Mat weights;
};

inline CosineGrad cosine_backward(const Vec& embedding, const Mat& weights, const Vec& cos,
                                  const Vec& dcos) {
    const double nz = embedding.norm();
    const Vec zhat = embedding / nz;
    CosineGrad g{Vec::Zero(embedding.size()), Mat::Zero(weights.rows(), weights.cols())};
    for (Eigen::Index i = 0; i < weights.rows(); ++i) {
        if (dcos[i] == 0.0) continue;
        const double nh = weights.row(i).norm();
        const Vec hhat = weights.row(i).transpose() / nh;
        g.embedding += dcos[i] * (hhat - cos[i] * zhat) / nz;
        g.weights.row(i) = (dcos[i] * (zhat - cos[i] * hhat) / nh).transpose();
    }
    return g;
}

/// Training logits s * (cos - m [i == target]); without a target, the raw
/// cosines (no scale, no margin) used for scoring.
inline Vec lmcl_logits(const Vec& embedding, const LmclHead& head,
                       std::optional<std::size_t> target = std::nullopt) {
    Vec cos = cosines(embedding, head.weights);
    if (!target) return cos;
    if (*target >= static_cast<std::size_t>(head.num_classes()))
        throw InvalidArgument("lmcl: target index out of range");
    cos[static_cast<Eigen::Index>(*target)] -= head.margin;
    return head.scale * cos;
}

struct LmclLossGrad {
    double loss = 0.0;
    Vec grad_embedding;
    Mat grad_weights;
};

/// Cross-entropy over LMCL logits with the head's margin.
inline LmclLossGrad lmcl_loss(const Vec& embedding, const LmclHead& head, std::size_t target) {
    const Vec cos = cosines(embedding, head.weights);
    if (target >= static_cast<std::size_t>(head.num_classes()))
        throw InvalidArgument("lmcl: target index out of range");
    Vec logits = cos;
    logits[static_cast<Eigen::Index>(target)] -= head.margin;
    logits *= head.scale;
    auto ce = ce_loss(logits, target);
    auto g = cosine_backward(embedding, head.weights, cos, head.scale * ce.grad);
    return {ce.loss, std::move(g.embedding), std::move(g.weights)};
}

/// As above with the margin taken from the schedule at `epoch`.
inline LmclLossGrad lmcl_loss(const Vec& embedding, LmclHead head, std::size_t target, int epoch,
                              const MarginSchedule& schedule) {
    head.margin = schedule.at(epoch);
    return lmcl_loss(embedding, head, target);
}

// ---------------------------------------------------------------------------
// Softmax-energy hinge loss

struct SmeLossConfig {
    double lambda = 1.0;
    double m_in = -3.21980;
    double m_out = -3.21976;
    double temperature = 1.0;

    void validate() const {
        // lambda == 0 is accepted and disables the term.
        if (!(lambda >= 0.0) || !std::isfinite(lambda))
            throw InvalidArgument("sme loss: lambda must be non-negative");
        if (!std::isfinite(m_in) || !std::isfinite(m_out))
            throw InvalidArgument("sme loss: margins must be finite");
        if (!(temperature > 0.0) || !std::isfinite(temperature))
            throw InvalidArgument("sme loss: temperature must be positive");
    }
};

/// sme(u, T) and its gradient: d/du_i = -p_i (q_i - q.p), p = softmax(u/T),
/// q = softmax(p).
inline LossGrad sme_with_grad(const Vec& logits, double temperature) {
    const auto p = to_vec(softmax(as_span(logits), 1.0 / temperature));
    const auto q = to_vec(softmax(as_span(p)));
    LossGrad out;
    out.loss = -temperature * log_sum_exp(as_span(p));
    const double qp = q.dot(p);
    out.grad = -(p.array() * (q.array() - qp)).matrix();
    return out;
}

struct SmeHingeResult {
    double loss = 0.0;
    std::vector<Vec> grads_in;
    std::vector<Vec> grads_out;
};

/// mean_in max(0, E_sm - m_in)^2 + mean_out max(0, m_out - E_sm)^2.
/// An empty list contributes nothing. The subgradient at the kink is 0.
inline SmeHingeResult sme_hinge_loss(std::span<const Vec> in_logits,
                                     std::span<const Vec> out_logits, const SmeLossConfig& cfg) {
    if (in_logits.empty() && out_logits.empty())
        throw InvalidArgument("sme_hinge_loss: both ID and OOD lists are empty");
    SmeHingeResult r;
    r.grads_in.reserve(in_logits.size());
    r.grads_out.reserve(out_logits.size());
    const double n_in = static_cast<double>(in_logits.size());
    const double n_out = static_cast<double>(out_logits.size());
    for (const auto& u : in_logits) {
        auto e = sme_with_grad(u, cfg.temperature);
        const double slack = std::max(0.0, e.loss - cfg.m_in);
        r.loss += slack * slack / n_in;
        r.grads_in.push_back((2.0 * slack / n_in) * e.grad);
    }
    for (const auto& u : out_logits) {
        auto e = sme_with_grad(u, cfg.temperature);
        const double slack = std::max(0.0, cfg.m_out - e.loss);
        r.loss += slack * slack / n_out;
        r.grads_out.push_back((-2.0 * slack / n_out) * e.grad);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Hinge margin calibration

struct HingeMargins {
    double m_in;
    double m_out;
};

/// Places (m_in, m_out) = (t* - eps, t* + eps) around the SME value t* where
/// the fraction of ID values above t* best balances the fraction of OOD values
/// below it. Candidates are the observed values and midpoints between
/// neighbours; t* is the centre of the range of best candidates.
inline HingeMargins calibrate_hinge_margins(std::span<const double> dev_in_sme,
                                            std::span<const double> dev_out_sme,
                                            double eps = 2e-5) {
    if (dev_in_sme.empty() || dev_out_sme.empty())
        throw InvalidArgument("calibrate_hinge_margins: empty input");
    std::vector<double> in(dev_in_sme.begin(), dev_in_sme.end());
    std::vector<double> out(dev_out_sme.begin(), dev_out_sme.end());
    std::sort(in.begin(), in.end());
    std::sort(out.begin(), out.end());

    std::vector<double> values(in);
    values.insert(values.end(), out.begin(), out.end());
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    std::vector<double> candidates;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i > 0) candidates.push_back(0.5 * (values[i - 1] + values[i]));
        candidates.push_back(values[i]);
    }

    auto imbalance = [&](double t) {
        const auto above = in.end() - std::upper_bound(in.begin(), in.end(), t);
        const auto below = std::lower_bound(out.begin(), out.end(), t) - out.begin();
        return std::abs(static_cast<double>(above) / static_cast<double>(in.size()) -
                        static_cast<double>(below) / static_cast<double>(out.size()));
    };
    double best = std::numeric_limits<double>::infinity();
    double lo = 0.0, hi = 0.0;
    for (double t : candidates) {
        const double v = imbalance(t);
        if (v < best) {
            best = v;
            lo = hi = t;
        } else if (v == best) {
            hi = t;
        }
    }
    const double center = 0.5 * (lo + hi);
    return {center - eps, center + eps};
}

}  // namespace smeood
