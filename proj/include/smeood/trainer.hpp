#pragma once

// Mini-batch SGD training of the toy model with cosine-annealed learning
// rate, weight decay, LMCL margin ramp, optional softmax-energy hinge loss on
// auxiliary OOD data, and checkpoint selection on dev EERc.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "smeood/dataformat.hpp"
#include "smeood/error.hpp"
#include "smeood/losses.hpp"
#include "smeood/metrics.hpp"
#include "smeood/model.hpp"
#include "smeood/objective.hpp"
#include "smeood/rng.hpp"
#include "smeood/scoring.hpp"
#include "smeood/synthbench.hpp"

namespace smeood {

enum class CheckpointMetric { eerc_sme, eerc_energy, eerc_msp };

inline std::string_view to_string(CheckpointMetric c) {
    switch (c) {
        case CheckpointMetric::eerc_sme: return "eerc_sme";
        case CheckpointMetric::eerc_energy: return "eerc_energy";
        case CheckpointMetric::eerc_msp: return "eerc_msp";
    }
    return "?";
}

inline CheckpointMetric parse_checkpoint_metric(std::string_view s) {
    if (s == "eerc_sme") return CheckpointMetric::eerc_sme;
    if (s == "eerc_energy") return CheckpointMetric::eerc_energy;
    if (s == "eerc_msp") return CheckpointMetric::eerc_msp;
    throw InvalidArgument("unknown checkpoint metric '" + std::string(s) + "'");
}

struct TrainConfig {
    int epochs = 50;
    int batch_size = 40;
    double lr = 1e-3;
    double lr_floor = 0.0;
    double weight_decay = 1e-4;
    HeadKind head = HeadKind::lmcl;
    int embed_dim = 16;
    double lmcl_scale = 16.0;
    MarginSchedule margin;
    std::optional<SmeLossConfig> sme_loss;
    double ood_batch_ratio = 1.0;
    std::uint64_t seed = 1;
    CheckpointMetric checkpoint_metric = CheckpointMetric::eerc_sme;
    /// Temperature of the checkpoint score (energy and sme).
    double checkpoint_temperature = 1.0;
    /// Std of isotropic noise added to ID training inputs; 0 disables.
    double feature_noise = 0.0;

    void validate() const {
        if (epochs < 1 || batch_size < 1) throw InvalidArgument("train config: epochs and batch_size must be positive");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("train config: lr must be positive");
        if (!(lr_floor >= 0.0) || lr_floor > lr) throw InvalidArgument("train config: lr_floor must lie in [0, lr]");
        if (!(weight_decay >= 0.0)) throw InvalidArgument("train config: weight_decay must be >= 0");
        if (embed_dim < 1) throw InvalidArgument("train config: embed_dim must be positive");
        if (margin.ramp_epochs < 1) throw InvalidArgument("train config: ramp_epochs must be positive");
        if (!(ood_batch_ratio > 0.0)) throw InvalidArgument("train config: ood_batch_ratio must be positive");
        if (!(feature_noise >= 0.0)) throw InvalidArgument("train config: feature_noise must be >= 0");
        if (sme_loss) {
            if (sme_loss->lambda != 0.0) sme_loss->validate();
            else if (!(sme_loss->temperature > 0.0)) throw InvalidArgument("sme loss: temperature must be positive");
        }
    }

    ScoreMethod checkpoint_method() const {
        switch (checkpoint_metric) {
            case CheckpointMetric::eerc_sme: return {ScoreKind::sme, checkpoint_temperature};
            case CheckpointMetric::eerc_energy: return {ScoreKind::energy, checkpoint_temperature};
            case CheckpointMetric::eerc_msp: return {ScoreKind::msp, 1.0};
        }
        return {};
    }

    /// Cosine annealing from lr at epoch 0 to lr_floor at the final epoch.
    double lr_at(int epoch) const {
        if (epochs == 1) return lr;
        const double frac = static_cast<double>(epoch) / (epochs - 1);
        return lr_floor + (lr - lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
    }
};

inline void to_json(nlohmann::json& j, const SmeLossConfig& c) {
    j = nlohmann::json{{"lambda", c.lambda}, {"m_in", c.m_in}, {"m_out", c.m_out},
                       {"temperature", c.temperature}};
}

inline void from_json(const nlohmann::json& j, SmeLossConfig& c) {
    if (j.contains("lambda")) j.at("lambda").get_to(c.lambda);
    if (j.contains("m_in")) j.at("m_in").get_to(c.m_in);
    if (j.contains("m_out")) j.at("m_out").get_to(c.m_out);
    if (j.contains("temperature")) j.at("temperature").get_to(c.temperature);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"lr_floor", c.lr_floor},
                       {"weight_decay", c.weight_decay},
                       {"head", std::string(to_string(c.head))},
                       {"embed_dim", c.embed_dim},
                       {"lmcl_scale", c.lmcl_scale},
                       {"margin", {{"start", c.margin.start_margin},
                                   {"end", c.margin.end_margin},
                                   {"ramp_epochs", c.margin.ramp_epochs}}},
                       {"sme_loss", c.sme_loss ? nlohmann::json(*c.sme_loss) : nlohmann::json()},
                       {"ood_batch_ratio", c.ood_batch_ratio},
                       {"seed", c.seed},
                       {"checkpoint_metric", std::string(to_string(c.checkpoint_metric))},
                       {"checkpoint_temperature", c.checkpoint_temperature},
                       {"feature_noise", c.feature_noise}};
}

/// Missing keys keep their defaults; "sme_loss": null disables the hinge term.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("lr", c.lr);
    get("lr_floor", c.lr_floor);
    get("weight_decay", c.weight_decay);
    if (j.contains("head")) c.head = parse_head_kind(j.at("head").get<std::string>());
    get("embed_dim", c.embed_dim);
    get("lmcl_scale", c.lmcl_scale);
    if (j.contains("margin")) {
        const auto& m = j.at("margin");
        if (m.contains("start")) m.at("start").get_to(c.margin.start_margin);
        if (m.contains("end")) m.at("end").get_to(c.margin.end_margin);
        if (m.contains("ramp_epochs")) m.at("ramp_epochs").get_to(c.margin.ramp_epochs);
    }
    if (j.contains("sme_loss")) {
        if (j.at("sme_loss").is_null()) c.sme_loss.reset();
        else c.sme_loss = j.at("sme_loss").get<SmeLossConfig>();
    }
    get("ood_batch_ratio", c.ood_batch_ratio);
    get("seed", c.seed);
    if (j.contains("checkpoint_metric"))
        c.checkpoint_metric = parse_checkpoint_metric(j.at("checkpoint_metric").get<std::string>());
    get("checkpoint_temperature", c.checkpoint_temperature);
    get("feature_noise", c.feature_noise);
}

struct EpochRecord {
    int epoch = 0;
    double cls_loss = 0.0;
    double sme_loss = 0.0;
    double dev_eerc = 0.0;
    double dev_fpr95 = 0.0;
    double margin = 0.0;
    double lr = 0.0;

    bool operator==(const EpochRecord&) const = default;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    int selected_epoch = -1;

    bool operator==(const TrainLog&) const = default;
};

/// One JSON object per epoch; the checkpoint epoch carries "selected": true.
inline void write_train_log(std::ostream& out, const TrainLog& log) {
    for (const auto& e : log.epochs) {
        nlohmann::ordered_json j;
        j["epoch"] = e.epoch;
        j["cls_loss"] = e.cls_loss;
        j["sme_loss"] = e.sme_loss;
        j["dev_eerc"] = e.dev_eerc;
        j["dev_fpr95"] = e.dev_fpr95;
        j["margin"] = e.margin;
        j["lr"] = e.lr;
        j["selected"] = e.epoch == log.selected_epoch;
        out << j.dump() << '\n';
    }
}

// ---------------------------------------------------------------------------
// Inference helpers

/// Scoring logits for every record of `split` (ID and OOD), in dataset order.
inline Dataset infer_logits(const ToyModel& model, const SynthDataset& data, Split split) {
    Dataset out;
    out.class_names = data.meta.class_names;
    for (std::size_t r = 0; r < data.meta.records.size(); ++r) {
        const auto& rec = data.meta.records[r];
        if (rec.split != split) continue;
        LogitRecord lr = rec;
        const Vec u = model.inference_logits(data.features.row(static_cast<Eigen::Index>(r)).transpose());
        lr.logits.assign(u.data(), u.data() + u.size());
        out.records.push_back(std::move(lr));
    }
    return out;
}

/// Class-weighted report for one method over a logit dataset.
inline WeightedMetricReport report_for(const Dataset& logits, const ScoreMethod& method,
                                       bool keep_sweep = false) {
    if (logits.records.empty()) throw InvalidArgument("evaluate: empty split");
    const auto w = compute_class_weights(logits.records);
    const auto scored = score_dataset(logits.records, method, w, logits.class_names);
    return full_report(scored, method, keep_sweep);
}

inline std::vector<WeightedMetricReport> evaluate(const ToyModel& model, const SynthDataset& data,
                                                  std::span<const ScoreMethod> methods,
                                                  Split split = Split::eval,
                                                  bool keep_sweep = false) {
    const Dataset logits = infer_logits(model, data, split);
    std::vector<WeightedMetricReport> out;
    for (const auto& m : methods) out.push_back(report_for(logits, m, keep_sweep));
    return out;
}

struct TemperatureSweepRow {
    double temperature;
    double dev_eerc;
    double dev_fpr95;
};

struct TemperatureSweep {
    double best_temperature = 1.0;
    std::vector<TemperatureSweepRow> table;
};

/// Dev EERc for each temperature; the argmin wins, ties going to the lowest T.
inline TemperatureSweep sweep_temperature(const Dataset& dev_logits, ScoreKind kind,
                                          std::span<const double> grid) {
    if (grid.empty()) throw InvalidArgument("sweep_temperature: empty grid");
    if (dev_logits.records.empty()) throw InvalidArgument("sweep_temperature: empty dev split");
    TemperatureSweep s;
    double best = std::numeric_limits<double>::infinity();
    for (double t : grid) {
        auto r = report_for(dev_logits, {kind, t});
        s.table.push_back({t, r.eerc, r.fpr95});
        if (r.eerc < best || (r.eerc == best && t < s.best_temperature)) {
            best = r.eerc;
            s.best_temperature = t;
        }
    }
    return s;
}

inline TemperatureSweep sweep_temperature(const ToyModel& model, const SynthDataset& data,
                                          ScoreKind kind, std::span<const double> grid) {
    return sweep_temperature(infer_logits(model, data, Split::dev), kind, grid);
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
    ToyModel model;  ///< best dev checkpoint
    TrainLog log;
    ToyModel final_model;  ///< parameters after the last epoch
};

inline TrainResult train(const SynthDataset& data, const Eigen::MatrixXd* aux_ood,
                         const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.sme_loss && (aux_ood == nullptr || aux_ood->rows() == 0))
        throw InvalidArgument("train: SME loss enabled but no auxiliary OOD data given");
    const bool use_sme = cfg.sme_loss && cfg.sme_loss->lambda != 0.0;

    std::vector<std::size_t> train_rows;
    std::vector<std::size_t> train_labels;
    for (std::size_t r = 0; r < data.meta.records.size(); ++r) {
        const auto& rec = data.meta.records[r];
        if (rec.split != Split::train || rec.is_ood) continue;
        auto cls = data.meta.class_index(rec.model_name);
        if (!cls) throw InvalidArgument("train: unknown class '" + rec.model_name + "'");
        train_rows.push_back(r);
        train_labels.push_back(*cls);
    }
    if (train_rows.empty()) throw InvalidArgument("train: empty train split");
    bool has_dev = false;
    for (const auto& rec : data.meta.records) has_dev |= rec.split == Split::dev;
    if (!has_dev) throw InvalidArgument("train: empty dev split");

    ToyModel model = init_model(cfg.head, data.features.cols(), cfg.embed_dim,
                                static_cast<Eigen::Index>(data.meta.class_names.size()), cfg.seed,
                                cfg.lmcl_scale);
    const ScoreMethod ckpt_method = cfg.checkpoint_method();
    const auto ood_per_step =
        static_cast<std::size_t>(std::ceil(cfg.ood_batch_ratio * cfg.batch_size));

    TrainResult best{model, {}, {}};
    double best_metric = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> order(train_rows.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr_at(epoch);
        ObjectiveConfig ocfg;
        ocfg.margin = cfg.head == HeadKind::lmcl ? cfg.margin.at(epoch) : 0.0;
        if (use_sme) ocfg.sme = cfg.sme_loss;

        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle = Rng::stream(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.below(i)]);
        Rng aux_rng = Rng::stream(cfg.seed, "aux_draw", static_cast<std::uint64_t>(epoch));
        Rng noise_rng = Rng::stream(cfg.seed, "feature_noise", static_cast<std::uint64_t>(epoch));

        double cls_sum = 0.0, sme_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            LabeledBatch batch;
            for (std::size_t i = start; i < end; ++i) {
                const auto row = static_cast<Eigen::Index>(train_rows[order[i]]);
                Vec x = data.features.row(row).transpose();
                if (cfg.feature_noise > 0.0)
                    for (Eigen::Index d = 0; d < x.size(); ++d) x[d] += cfg.feature_noise * noise_rng.normal();
                batch.inputs.push_back(std::move(x));
                batch.labels.push_back(train_labels[order[i]]);
            }
            std::vector<Vec> ood;
            if (use_sme)
                for (std::size_t i = 0; i < ood_per_step; ++i)
                    ood.push_back(aux_ood->row(static_cast<Eigen::Index>(
                                                  aux_rng.below(static_cast<std::uint64_t>(aux_ood->rows()))))
                                      .transpose());

            auto obj = combined_objective(model, batch, ood, ocfg);
            if (!std::isfinite(obj.loss)) throw DivergenceError(epoch, "non-finite loss");
            cls_sum += obj.cls_loss;
            sme_sum += obj.sme_loss;
            ++steps;
            if (cfg.weight_decay != 0.0) obj.grad.axpy(cfg.weight_decay, model.params);
            model.params.axpy(-lr, obj.grad);
        }
        if (!model.params.all_finite()) throw DivergenceError(epoch, "non-finite parameters");

        const auto dev = report_for(infer_logits(model, data, Split::dev), ckpt_method);
        EpochRecord rec{epoch,     cls_sum / static_cast<double>(steps),
                        sme_sum / static_cast<double>(steps),
                        dev.eerc,  dev.fpr95,
                        ocfg.margin, lr};
        best.log.epochs.push_back(rec);
        if (dev.eerc < best_metric) {
            best_metric = dev.eerc;
            best.model = model;
            best.log.selected_epoch = epoch;
        }
    }
    best.final_model = std::move(model);
    return best;
}

inline TrainResult train(const SynthDataset& data, const TrainConfig& cfg) {
    return train(data, data.aux_features.rows() > 0 ? &data.aux_features : nullptr, cfg);
}

// ---------------------------------------------------------------------------
// Hinge hyper-parameter selection

/// Margins straddle the crossing of the baseline model's dev ID and dev OOD
/// SME distributions. lambda balances the classification and hinge losses
/// measured over the first epoch of a run with those margins.
inline SmeLossConfig select_sme_hyperparameters(const ToyModel& baseline, const SynthDataset& data,
                                                TrainConfig cfg, double temperature = 1.0) {
    const Dataset dev = infer_logits(baseline, data, Split::dev);
    std::vector<double> in, out;
    for (const auto& r : dev.records) (r.is_ood ? out : in).push_back(sme(r.logits, temperature));
    const auto margins = calibrate_hinge_margins(in, out);

    SmeLossConfig sme_cfg{1.0, margins.m_in, margins.m_out, temperature};
    cfg.sme_loss = sme_cfg;
    cfg.epochs = 1;
    const auto probe = train(data, cfg);
    const auto& first = probe.log.epochs.front();
    if (first.sme_loss > 0.0) sme_cfg.lambda = first.cls_loss / first.sme_loss;
    return sme_cfg;
}

}  // namespace smeood
