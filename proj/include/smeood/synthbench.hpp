#pragma once

// Seeded synthetic open-set benchmark: Gaussian ID clusters for training,
// held-out OOD clusters for dev and eval, plus a disjoint set of auxiliary
// OOD clusters for outlier-exposure style training.
//
// Stream discipline: every cluster owns two sub-streams derived from
// (seed, role, cluster index), one for its centre and one per split for its
// samples, so adding clusters never perturbs existing ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "smeood/dataformat.hpp"
#include "smeood/error.hpp"
#include "smeood/rng.hpp"

namespace smeood {

struct SynthSpec {
    int n_id_classes = 24;
    int n_ood_dev = 17;
    int n_ood_eval = 43;
    int n_ood_aux = 16;
    int dim = 32;
    /// Samples per cluster, keyed by train, dev, eval, ood_dev, ood_eval, aux.
    std::map<std::string, int> samples_per_class = {{"train", 100}, {"dev", 30},
                                                    {"eval", 30},   {"ood_dev", 30},
                                                    {"ood_eval", 30}, {"aux", 30}};
    /// Optional per-class ID counts for train/dev/eval; overrides samples_per_class.
    std::map<std::string, std::vector<int>> id_class_counts;
    double center_scale = 1.0;
    double cluster_spread = 0.9;
    double inter_cluster_min_dist = 4.0;
    /// 0 puts OOD centres at fresh random locations, 1 at the mean of a few ID centres.
    double ood_proximity = 0.5;
    int ood_anchor_classes = 3;
    int max_center_retries = 1000;
    std::uint64_t seed = 1;

    int count(const std::string& key) const {
        auto it = samples_per_class.find(key);
        if (it == samples_per_class.end())
            throw InvalidArgument("synth spec: samples_per_class lacks '" + key + "'");
        return it->second;
    }

    int id_count(const std::string& split, int cls) const {
        auto it = id_class_counts.find(split);
        if (it != id_class_counts.end()) return it->second.at(static_cast<std::size_t>(cls));
        return count(split);
    }

    void validate() const {
        if (n_id_classes < 2) throw InvalidArgument("synth spec: need at least 2 ID classes");
        if (n_ood_dev < 1 || n_ood_eval < 1 || n_ood_aux < 0 || dim < 1)
            throw InvalidArgument("synth spec: counts must be positive");
        for (const char* k : {"train", "dev", "eval", "ood_dev", "ood_eval", "aux"})
            if (count(k) < 1) throw InvalidArgument(std::string("synth spec: ") + k + " count must be positive");
        for (const auto& [split, counts] : id_class_counts) {
            if (split != "train" && split != "dev" && split != "eval")
                throw InvalidArgument("synth spec: id_class_counts key '" + split + "'");
            if (counts.size() != static_cast<std::size_t>(n_id_classes))
                throw InvalidArgument("synth spec: id_class_counts['" + split + "'] has wrong length");
            for (int c : counts)
                if (c < 1) throw InvalidArgument("synth spec: class count below 1");
        }
        if (!(cluster_spread >= 0.0) || !(center_scale > 0.0) || !(inter_cluster_min_dist >= 0.0))
            throw InvalidArgument("synth spec: spread, scale and distance must be non-negative");
        if (!(ood_proximity >= 0.0 && ood_proximity <= 1.0))
            throw InvalidArgument("synth spec: ood_proximity must lie in [0, 1]");
        if (ood_anchor_classes < 1 || ood_anchor_classes > n_id_classes)
            throw InvalidArgument("synth spec: ood_anchor_classes out of range");
    }

    bool operator==(const SynthSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
    j = nlohmann::json{{"n_id_classes", s.n_id_classes},
                       {"n_ood_dev", s.n_ood_dev},
                       {"n_ood_eval", s.n_ood_eval},
                       {"n_ood_aux", s.n_ood_aux},
                       {"dim", s.dim},
                       {"samples_per_class", s.samples_per_class},
                       {"id_class_counts", s.id_class_counts},
                       {"center_scale", s.center_scale},
                       {"cluster_spread", s.cluster_spread},
                       {"inter_cluster_min_dist", s.inter_cluster_min_dist},
                       {"ood_proximity", s.ood_proximity},
                       {"ood_anchor_classes", s.ood_anchor_classes},
                       {"max_center_retries", s.max_center_retries},
                       {"seed", s.seed}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, SynthSpec& s) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("n_id_classes", s.n_id_classes);
    get("n_ood_dev", s.n_ood_dev);
    get("n_ood_eval", s.n_ood_eval);
    get("n_ood_aux", s.n_ood_aux);
    get("dim", s.dim);
    if (j.contains("samples_per_class"))
        for (auto& [k, v] : j.at("samples_per_class").items()) s.samples_per_class[k] = v.get<int>();
    get("id_class_counts", s.id_class_counts);
    get("center_scale", s.center_scale);
    get("cluster_spread", s.cluster_spread);
    get("inter_cluster_min_dist", s.inter_cluster_min_dist);
    get("ood_proximity", s.ood_proximity);
    get("ood_anchor_classes", s.ood_anchor_classes);
    get("max_center_retries", s.max_center_retries);
    get("seed", s.seed);
}

/// Rescales ID per-class counts geometrically so the largest class has
/// `skew` times the samples of the smallest; per-split totals are kept up to
/// rounding.
inline SynthSpec class_imbalance(SynthSpec spec, double skew) {
    if (!(skew >= 1.0) || !std::isfinite(skew))
        throw InvalidArgument("class_imbalance: skew must be >= 1");
    if (skew == 1.0) return spec;
    const int n = spec.n_id_classes;
    const double ratio = std::pow(skew, 1.0 / (n - 1));
    std::vector<double> shape(static_cast<std::size_t>(n));
    double shape_sum = 0.0;
    for (int i = 0; i < n; ++i) shape_sum += shape[static_cast<std::size_t>(i)] = std::pow(ratio, i);
    for (const char* split : {"train", "dev", "eval"}) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += spec.id_count(split, i);
        std::vector<int> counts;
        for (double s : shape) {
            const int c = static_cast<int>(std::lround(total * s / shape_sum));
            if (c < 1)
                throw InvalidArgument(std::string("class_imbalance: a ") + split +
                                      " class would get fewer than 1 sample");
            counts.push_back(c);
        }
        spec.id_class_counts[split] = std::move(counts);
    }
    return spec;
}

struct SynthDataset {
    SynthSpec spec;
    /// Metadata only (no logits); model_name is the generating cluster.
    Dataset meta;
    Eigen::MatrixXd features;  ///< one row per meta record
    /// Auxiliary OOD clusters, disjoint from dev and eval OOD; split = train.
    Dataset aux_meta;
    Eigen::MatrixXd aux_features;
    Eigen::MatrixXd id_centers, ood_dev_centers, ood_eval_centers, aux_centers;
};

namespace detail {

inline std::string cluster_name(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%02d", prefix, i);
    return buf;
}

inline Eigen::VectorXd gaussian_vector(Rng& rng, int dim, double scale) {
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v[i] = scale * rng.normal();
    return v;
}

inline bool far_from(const Eigen::VectorXd& c, const Eigen::MatrixXd& centers, int used,
                     double min_dist) {
    for (int j = 0; j < used; ++j)
        if ((centers.row(j).transpose() - c).norm() < min_dist) return false;
    return true;
}

}  // namespace detail

inline SynthDataset generate(const SynthSpec& spec) {
    spec.validate();
    const int dim = spec.dim;
    SynthDataset out;
    out.spec = spec;

    out.id_centers.resize(spec.n_id_classes, dim);
    for (int i = 0; i < spec.n_id_classes; ++i) {
        Rng rng = Rng::stream(spec.seed, "id_center", static_cast<std::uint64_t>(i));
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_center_retries && !placed; ++attempt) {
            Eigen::VectorXd c = detail::gaussian_vector(rng, dim, spec.center_scale);
            if (detail::far_from(c, out.id_centers, i, spec.inter_cluster_min_dist)) {
                out.id_centers.row(i) = c.transpose();
                placed = true;
            }
        }
        if (!placed)
            throw InvalidArgument("synth: could not place ID centre " + std::to_string(i) +
                                  " within the retry budget; spec infeasible for dim " +
                                  std::to_string(dim));
    }

    // OOD centre = p * (mean of a few ID centres) + (1 - p) * (fresh point away
    // from every ID centre).
    // Orthonormal basis of the directions no ID centre uses (empty when the
    // centres span the whole space).
    Eigen::MatrixXd complement;
    if (spec.n_id_classes < dim) {
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(out.id_centers.transpose());
        const Eigen::MatrixXd q = qr.householderQ();
        complement = q.rightCols(dim - spec.n_id_classes);
    }
    auto ood_centers = [&](const char* role, int n) {
        Eigen::MatrixXd centers(n, dim);
        for (int j = 0; j < n; ++j) {
            Rng rng = Rng::stream(spec.seed, role, static_cast<std::uint64_t>(j));
            std::vector<int> pool(static_cast<std::size_t>(spec.n_id_classes));
            for (int i = 0; i < spec.n_id_classes; ++i) pool[static_cast<std::size_t>(i)] = i;
            Eigen::VectorXd anchor = Eigen::VectorXd::Zero(dim);
            for (int a = 0; a < spec.ood_anchor_classes; ++a) {
                const auto pick = a + static_cast<int>(rng.below(
                                          static_cast<std::uint64_t>(spec.n_id_classes - a)));
                std::swap(pool[static_cast<std::size_t>(a)], pool[static_cast<std::size_t>(pick)]);
                anchor += out.id_centers.row(pool[static_cast<std::size_t>(a)]).transpose();
            }
            anchor /= spec.ood_anchor_classes;
            bool placed = false;
            Eigen::VectorXd fresh;
            for (int attempt = 0; attempt < spec.max_center_retries && !placed; ++attempt) {
                fresh = detail::gaussian_vector(rng, dim, spec.center_scale);
                if (complement.cols() > 0) {
                    const double norm = fresh.norm();
                    fresh = complement * (complement.transpose() * fresh);
                    fresh *= norm / fresh.norm();
                }
                placed = detail::far_from(fresh, out.id_centers, spec.n_id_classes,
                                          spec.inter_cluster_min_dist);
            }
            if (!placed)
                throw InvalidArgument(std::string("synth: could not place ") + role + " " +
                                      std::to_string(j) + " within the retry budget");
            centers.row(j) =
                (spec.ood_proximity * anchor + (1.0 - spec.ood_proximity) * fresh).transpose();
        }
        return centers;
    };
    out.ood_dev_centers = ood_centers("ood_dev_center", spec.n_ood_dev);
    out.ood_eval_centers = ood_centers("ood_eval_center", spec.n_ood_eval);
    out.aux_centers = ood_centers("aux_center", spec.n_ood_aux);

    std::vector<Eigen::VectorXd> rows;
    auto emit = [&](Dataset& meta, std::vector<Eigen::VectorXd>& sink, const std::string& name,
                    Split split, bool is_ood, const Eigen::MatrixXd& centers, int cluster,
                    const std::string& role, int n) {
        Rng rng = Rng::stream(spec.seed, role, static_cast<std::uint64_t>(cluster));
        const Eigen::VectorXd c = centers.row(cluster).transpose();
        for (int s = 0; s < n; ++s) {
            LogitRecord r;
            r.sample_id = name + "_" + std::string(to_string(split)) + "_" + std::to_string(s);
            r.model_name = name;
            r.split = split;
            r.is_ood = is_ood;
            meta.records.push_back(std::move(r));
            sink.push_back(c + detail::gaussian_vector(rng, dim, spec.cluster_spread));
        }
    };

    for (int i = 0; i < spec.n_id_classes; ++i)
        out.meta.class_names.push_back(detail::cluster_name("id", i));
    for (Split split : {Split::train, Split::dev, Split::eval}) {
        const std::string key(to_string(split));
        for (int i = 0; i < spec.n_id_classes; ++i)
            emit(out.meta, rows, out.meta.class_names[static_cast<std::size_t>(i)], split, false,
                 out.id_centers, i, "id_samples/" + key, spec.id_count(key, i));
        if (split == Split::dev)
            for (int j = 0; j < spec.n_ood_dev; ++j)
                emit(out.meta, rows, detail::cluster_name("ood_dev", j), split, true,
                     out.ood_dev_centers, j, "ood_dev_samples", spec.count("ood_dev"));
        if (split == Split::eval)
            for (int j = 0; j < spec.n_ood_eval; ++j)
                emit(out.meta, rows, detail::cluster_name("ood_eval", j), split, true,
                     out.ood_eval_centers, j, "ood_eval_samples", spec.count("ood_eval"));
    }
    out.features.resize(static_cast<Eigen::Index>(rows.size()), dim);
    for (std::size_t r = 0; r < rows.size(); ++r)
        out.features.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();

    std::vector<Eigen::VectorXd> aux_rows;
    out.aux_meta.class_names = out.meta.class_names;
    for (int j = 0; j < spec.n_ood_aux; ++j)
        emit(out.aux_meta, aux_rows, detail::cluster_name("aux", j), Split::train, true,
             out.aux_centers, j, "aux_samples", spec.count("aux"));
    out.aux_features.resize(static_cast<Eigen::Index>(aux_rows.size()), dim);
    for (std::size_t r = 0; r < aux_rows.size(); ++r)
        out.aux_features.row(static_cast<Eigen::Index>(r)) = aux_rows[r].transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Files: dataset.csv + features.csv (main), aux_dataset.csv + aux_features.csv,
// classes.txt and spec.json.

inline void write_features_csv(const std::filesystem::path& path, const Dataset& meta,
                               const Eigen::MatrixXd& features) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << "sample_id";
    for (Eigen::Index i = 0; i < features.cols(); ++i) out << ",f_" << i;
    out << '\n';
    for (std::size_t r = 0; r < meta.records.size(); ++r) {
        out << csv::quote(meta.records[r].sample_id);
        for (Eigen::Index i = 0; i < features.cols(); ++i)
            out << ',' << format_double(features(static_cast<Eigen::Index>(r), i));
        out << '\n';
    }
}

/// Reads a features file whose rows must follow `meta`'s record order.
inline Eigen::MatrixXd read_features_csv(const std::filesystem::path& path, const Dataset& meta) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path.string(), 0, "cannot open file");
    std::vector<std::vector<double>> rows;
    std::size_t dim = 0;
    bool header = false;
    csv::for_each_line(in, [&](const std::string& line, std::size_t no) {
        auto f = csv::split_line(line);
        if (!f || f->empty()) throw FormatError(path.string(), no, "malformed row");
        if (!header) {
            if ((*f)[0] != "sample_id") throw FormatError(path.string(), no, "malformed header");
            dim = f->size() - 1;
            header = true;
            return;
        }
        if (f->size() != dim + 1) throw FormatError(path.string(), no, "wrong number of features");
        const std::size_t idx = rows.size();
        if (idx >= meta.records.size() || meta.records[idx].sample_id != (*f)[0])
            throw FormatError(path.string(), no, "sample_id does not match dataset order");
        std::vector<double> row(dim);
        for (std::size_t i = 0; i < dim; ++i) {
            auto v = parse_double((*f)[i + 1]);
            if (!v || !std::isfinite(*v)) throw FormatError(path.string(), no, "bad feature value");
            row[i] = *v;
        }
        rows.push_back(std::move(row));
    });
    if (rows.size() != meta.records.size())
        throw FormatError(path.string(), 0, "feature rows do not cover the dataset");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t i = 0; i < dim; ++i)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = rows[r][i];
    return m;
}

inline void save_synth(const std::filesystem::path& dir, const SynthDataset& d) {
    std::filesystem::create_directories(dir);
    save_dataset(dir / "dataset.csv", d.meta, DataFormat::csv);
    write_features_csv(dir / "features.csv", d.meta, d.features);
    save_dataset(dir / "aux_dataset.csv", d.aux_meta, DataFormat::csv);
    write_features_csv(dir / "aux_features.csv", d.aux_meta, d.aux_features);
    write_class_names(dir / "classes.txt", d.meta.class_names);
    std::ofstream spec(dir / "spec.json", std::ios::binary);
    spec << nlohmann::json(d.spec).dump(2) << '\n';
}

/// Loads what save_synth wrote. Cluster centres are not stored on disk.
inline SynthDataset load_synth(const std::filesystem::path& dir) {
    SynthDataset d;
    auto names = read_class_names(dir / "classes.txt");
    d.meta = load_dataset(dir / "dataset.csv", DataFormat::csv, names);
    d.features = read_features_csv(dir / "features.csv", d.meta);
    if (std::filesystem::exists(dir / "aux_dataset.csv")) {
        d.aux_meta = load_dataset(dir / "aux_dataset.csv", DataFormat::csv, names,
                                  ValidateOptions{.allow_ood_train = true});
        d.aux_features = read_features_csv(dir / "aux_features.csv", d.aux_meta);
    }
    if (std::filesystem::exists(dir / "spec.json")) {
        std::ifstream in(dir / "spec.json");
        d.spec = nlohmann::json::parse(in).get<SynthSpec>();
    }
    return d;
}

}  // namespace smeood
