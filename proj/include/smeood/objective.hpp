#pragma once

// Combined training objective for the toy model:
//   mean_in L_cls + lambda * L_Esm
// where L_Esm is the softmax-energy hinge loss on the scoring logits.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "smeood/losses.hpp"
#include "smeood/model.hpp"

namespace smeood {

struct LabeledBatch {
    std::vector<Vec> inputs;
    std::vector<std::size_t> labels;
};

struct ObjectiveConfig {
    /// LMCL margin applied to the target cosine (ignored by the plain head).
    double margin = 0.0;
    /// Absent, or lambda == 0, disables the hinge term.
    std::optional<SmeLossConfig> sme;
};

struct ObjectiveResult {
    double loss = 0.0;
    double cls_loss = 0.0;  ///< mean classification loss
    double sme_loss = 0.0;  ///< unscaled L_Esm, 0 when disabled
    Params grad;
};

namespace detail {

/// Backpropagates a gradient on the scoring logits into `grad`.
inline void backprop_scoring_logits(const ToyModel& m, const Vec& x, const Vec& z, const Vec& du,
                                    Params& grad) {
    Vec dz;
    if (m.head == HeadKind::plain) {
        grad.head_w += du * z.transpose();
        grad.head_b += du;
        dz = m.params.head_w.transpose() * du;
    } else {
        const Vec cos = cosines(z, m.params.head_w);
        auto g = cosine_backward(z, m.params.head_w, cos, du);
        grad.head_w += g.weights;
        dz = std::move(g.embedding);
    }
    grad.proj_w += dz * x.transpose();
    grad.proj_b += dz;
}

}  // namespace detail

/// Classification part only: mean over the batch of CE (plain) or LMCL.
inline ObjectiveResult classification_objective(const ToyModel& m, const LabeledBatch& batch,
                                                double margin) {
    if (batch.inputs.empty()) throw InvalidArgument("objective: empty ID batch");
    if (batch.inputs.size() != batch.labels.size())
        throw InvalidArgument("objective: inputs and labels differ in length");
    ObjectiveResult r;
    r.grad = m.params.zeros_like();
    const double inv_n = 1.0 / static_cast<double>(batch.inputs.size());
    LmclHead head{m.params.head_w, m.lmcl_scale, margin};
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
        const Vec& x = batch.inputs[i];
        const Vec z = m.embed(x);
        Vec dz;
        if (m.head == HeadKind::plain) {
            const Vec logits = m.params.head_w * z + m.params.head_b;
            auto ce = ce_loss(logits, batch.labels[i]);
            r.cls_loss += ce.loss * inv_n;
            r.grad.head_w += (inv_n * ce.grad) * z.transpose();
            r.grad.head_b += inv_n * ce.grad;
            dz = m.params.head_w.transpose() * (inv_n * ce.grad);
        } else {
            auto l = lmcl_loss(z, head, batch.labels[i]);
            r.cls_loss += l.loss * inv_n;
            r.grad.head_w += inv_n * l.grad_weights;
            dz = inv_n * l.grad_embedding;
        }
        r.grad.proj_w += dz * x.transpose();
        r.grad.proj_b += dz;
    }
    r.loss = r.cls_loss;
    return r;
}

/// Full objective. `ood_inputs` may be empty; the OOD hinge term is then omitted.
inline ObjectiveResult combined_objective(const ToyModel& m, const LabeledBatch& batch_in,
                                          std::span<const Vec> ood_inputs,
                                          const ObjectiveConfig& cfg) {
    ObjectiveResult r = classification_objective(m, batch_in, cfg.margin);
    if (!cfg.sme || cfg.sme->lambda == 0.0) return r;
    const SmeLossConfig& sme = *cfg.sme;

    std::vector<Vec> z_in, u_in, z_out, u_out;
    for (const auto& x : batch_in.inputs) {
        z_in.push_back(m.embed(x));
        u_in.push_back(m.inference_logits(x));
    }
    for (const auto& x : ood_inputs) {
        z_out.push_back(m.embed(x));
        u_out.push_back(m.inference_logits(x));
    }
    auto hinge = sme_hinge_loss(u_in, u_out, sme);
    r.sme_loss = hinge.loss;
    r.loss = r.cls_loss + sme.lambda * hinge.loss;
    for (std::size_t i = 0; i < u_in.size(); ++i)
        detail::backprop_scoring_logits(m, batch_in.inputs[i], z_in[i],
                                        sme.lambda * hinge.grads_in[i], r.grad);
    for (std::size_t i = 0; i < u_out.size(); ++i)
        detail::backprop_scoring_logits(m, ood_inputs[i], z_out[i],
                                        sme.lambda * hinge.grads_out[i], r.grad);
    return r;
}

}  // namespace smeood
