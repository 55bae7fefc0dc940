#pragma once

// ID-ness scores computed from a logit vector: maximum softmax probability,
// energy, and softmax energy (SME). Every score is reported with the
// convention "higher = more in-distribution".

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smeood/dataformat.hpp"
#include "smeood/error.hpp"

namespace smeood {

namespace detail {

inline void check_logits(std::span<const double> logits) {
    if (logits.size() < 2) throw InvalidArgument("score: need at least 2 logits");
    for (double v : logits)
        if (!std::isfinite(v)) throw InvalidArgument("score: non-finite logit");
}

inline void check_temperature(double t) {
    if (!(t > 0.0) || !std::isfinite(t))
        throw InvalidArgument("temperature must be positive and finite");
}

}  // namespace detail

/// log sum_i exp(x_i * scale), evaluated with max-subtraction.
inline double log_sum_exp(std::span<const double> x, double scale = 1.0) {
    double m = x[0] * scale;
    for (double v : x) m = std::max(m, v * scale);
    double s = 0.0;
    for (double v : x) s += std::exp(v * scale - m);
    return m + std::log(s);
}

/// softmax(x * scale), computed from max-shifted values.
inline std::vector<double> softmax(std::span<const double> x, double scale = 1.0) {
    double m = x[0] * scale;
    for (double v : x) m = std::max(m, v * scale);
    std::vector<double> p(x.size());
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        p[i] = std::exp(x[i] * scale - m);
        s += p[i];
    }
    for (double& v : p) v /= s;
    return p;
}

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> x) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < x.size(); ++i)
        if (x[i] > x[best]) best = i;
    return best;
}

inline double msp(std::span<const double> logits) {
    detail::check_logits(logits);
    auto p = softmax(logits);
    return *std::max_element(p.begin(), p.end());
}

/// E(f; T) = -T log sum_i exp(f_i / T).
inline double energy(std::span<const double> logits, double temperature = 1.0) {
    detail::check_logits(logits);
    detail::check_temperature(temperature);
    return -temperature * log_sum_exp(logits, 1.0 / temperature);
}

/// Softmax energy: E_sm(f; T) = -T log sum_i exp(softmax_i(f / T)).
///
/// The softmax output lies on the simplex, so the result is bounded:
/// -T log(e + k - 1) <= E_sm <= -T log(k e^{1/k}) < 0. The lower end is
/// reached by one-hot outputs, the upper end by the uniform output.
inline double sme(std::span<const double> logits, double temperature = 1.0) {
    detail::check_logits(logits);
    detail::check_temperature(temperature);
    auto p = softmax(logits, 1.0 / temperature);
    return -temperature * log_sum_exp(p);
}

/// Closed-form range of sme() for k classes at temperature T.
struct SmeBounds {
    double lower;
    double upper;
};

inline SmeBounds sme_bounds(std::size_t k, double temperature = 1.0) {
    const double kd = static_cast<double>(k);
    return {-temperature * std::log(std::exp(1.0) + kd - 1.0),
            -temperature * (std::log(kd) + 1.0 / kd)};
}

// ---------------------------------------------------------------------------

enum class ScoreKind { msp, energy, sme };

/// A score function plus its temperature. MSP ignores the temperature.
struct ScoreMethod {
    ScoreKind kind = ScoreKind::sme;
    double temperature = 1.0;

    bool operator==(const ScoreMethod&) const = default;
};

inline std::string_view to_string(ScoreKind k) {
    switch (k) {
        case ScoreKind::msp: return "msp";
        case ScoreKind::energy: return "energy";
        case ScoreKind::sme: return "sme";
    }
    return "?";
}

inline std::optional<ScoreKind> parse_score_kind(std::string_view s) {
    if (s == "msp") return ScoreKind::msp;
    if (s == "energy") return ScoreKind::energy;
    if (s == "sme") return ScoreKind::sme;
    return std::nullopt;
}

/// Parses `name[:T]`, e.g. "energy:0.0625" or "sme".
inline ScoreMethod parse_method(std::string_view spec) {
    auto colon = spec.find(':');
    auto name = spec.substr(0, colon);
    auto kind = parse_score_kind(name);
    if (!kind) throw InvalidArgument("unknown score method '" + std::string(name) + "'");
    ScoreMethod m{*kind, 1.0};
    if (colon != std::string_view::npos) {
        auto t = parse_double(spec.substr(colon + 1));
        if (!t) throw InvalidArgument("bad temperature in '" + std::string(spec) + "'");
        m.temperature = *t;
    }
    detail::check_temperature(m.temperature);
    return m;
}

inline std::string format_method(const ScoreMethod& m) {
    std::string s(to_string(m.kind));
    if (m.temperature != 1.0) s += ":" + format_double(m.temperature);
    return s;
}

inline std::vector<ScoreMethod> parse_method_list(std::string_view list) {
    if (list.empty()) throw InvalidArgument("empty method list");
    std::vector<ScoreMethod> out;
    for (;;) {
        auto comma = list.find(',');
        auto item = list.substr(0, comma);
        if (item.empty()) throw InvalidArgument("empty entry in method list");
        out.push_back(parse_method(item));
        if (comma == std::string_view::npos) break;
        list.remove_prefix(comma + 1);
    }
    return out;
}

/// Uniform higher-is-more-ID score: msp, -energy, or -sme.
inline double id_score(std::span<const double> logits, const ScoreMethod& m) {
    switch (m.kind) {
        case ScoreKind::msp: return msp(logits);
        case ScoreKind::energy: return -energy(logits, m.temperature);
        case ScoreKind::sme: return -sme(logits, m.temperature);
    }
    return 0.0;
}

// ---------------------------------------------------------------------------

struct ScoredSample {
    std::string sample_id;
    double score = 0.0;
    std::size_t predicted_class = 0;
    bool is_ood = false;
    std::string model_name;
    double weight = 1.0;
    /// Index of model_name in the class list; empty for OOD samples.
    std::optional<std::size_t> true_class;
};

/// Scores every record. When `class_names` is given, ID samples get their
/// true class index resolved from model_name.
template <typename Range>
std::vector<ScoredSample> score_dataset(const Range& records, const ScoreMethod& m,
                                        const ClassWeights& w,
                                        std::span<const std::string> class_names = {}) {
    std::vector<ScoredSample> out;
    std::size_t k = 0;
    for (const auto& item : records) {
        const LogitRecord& r = detail::as_record(item);
        if (k == 0) k = r.logits.size();
        if (r.logits.size() != k) throw InvalidArgument("score_dataset: mixed logit lengths");
        ScoredSample s;
        s.sample_id = r.sample_id;
        s.score = id_score(r.logits, m);
        s.predicted_class = argmax(r.logits);
        s.is_ood = r.is_ood;
        s.model_name = r.model_name;
        s.weight = w.at(r.model_name);
        if (!r.is_ood && !class_names.empty()) {
            auto it = std::find(class_names.begin(), class_names.end(), r.model_name);
            if (it != class_names.end())
                s.true_class = static_cast<std::size_t>(it - class_names.begin());
        }
        out.push_back(std::move(s));
    }
    return out;
}

/// Scored-sample CSV: sample_id,model_name,is_ood,weight,score,predicted_class
inline void write_scored_csv(std::ostream& out, std::span<const ScoredSample> samples) {
    out << "sample_id,model_name,is_ood,weight,score,predicted_class\n";
    for (const auto& s : samples)
        out << csv::quote(s.sample_id) << ',' << csv::quote(s.model_name) << ','
            << (s.is_ood ? '1' : '0') << ',' << format_double(s.weight) << ','
            << format_double(s.score) << ',' << s.predicted_class << '\n';
}

inline std::vector<ScoredSample> read_scored_csv(std::istream& in, const std::string& source,
                                                 std::span<const std::string> class_names = {}) {
    std::vector<ScoredSample> out;
    bool header = false;
    csv::for_each_line(in, [&](const std::string& line, std::size_t no) {
        auto f = csv::split_line(line);
        if (!f) throw FormatError(source, no, "malformed row");
        if (!header) {
            if (line != "sample_id,model_name,is_ood,weight,score,predicted_class")
                throw FormatError(source, no, "malformed header");
            header = true;
            return;
        }
        if (f->size() != 6) throw FormatError(source, no, "expected 6 fields");
        ScoredSample s;
        s.sample_id = (*f)[0];
        s.model_name = (*f)[1];
        if ((*f)[2] != "0" && (*f)[2] != "1") throw FormatError(source, no, "bad is_ood");
        s.is_ood = (*f)[2] == "1";
        auto w = parse_double((*f)[3]);
        auto sc = parse_double((*f)[4]);
        if (!w || !(*w > 0.0)) throw FormatError(source, no, "bad weight");
        if (!sc || !std::isfinite(*sc)) throw FormatError(source, no, "bad score");
        s.weight = *w;
        s.score = *sc;
        auto pc = parse_double((*f)[5]);
        if (!pc || *pc < 0 || *pc != std::floor(*pc))
            throw FormatError(source, no, "bad predicted_class");
        s.predicted_class = static_cast<std::size_t>(*pc);
        if (!s.is_ood && !class_names.empty()) {
            auto it = std::find(class_names.begin(), class_names.end(), s.model_name);
            if (it != class_names.end())
                s.true_class = static_cast<std::size_t>(it - class_names.begin());
        }
        out.push_back(std::move(s));
    });
    if (!header) throw FormatError(source, 0, "missing header");
    return out;
}

// ---------------------------------------------------------------------------

/// Class-weighted mean of descending-sorted logits, split by ID/OOD group.
/// A group with no records yields an empty optional.
struct LogitProfile {
    std::optional<std::vector<double>> id;
    std::optional<std::vector<double>> ood;
};

template <typename Range>
LogitProfile top_k_logit_profile(const Range& records, std::size_t k_top, const ClassWeights& w) {
    if (k_top == 0) throw InvalidArgument("top_k_logit_profile: k_top must be positive");
    std::vector<double> sums[2];
    double mass[2] = {0.0, 0.0};
    std::vector<double> sorted;
    for (const auto& item : records) {
        const LogitRecord& r = detail::as_record(item);
        if (r.logits.size() < k_top)
            throw InvalidArgument("top_k_logit_profile: k_top exceeds logit length");
        const int g = r.is_ood ? 1 : 0;
        const double wt = w.at(r.model_name);
        sorted = r.logits;
        std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k_top),
                          sorted.end(), std::greater<>());
        if (sums[g].empty()) sums[g].assign(k_top, 0.0);
        for (std::size_t i = 0; i < k_top; ++i) sums[g][i] += wt * sorted[i];
        mass[g] += wt;
    }
    LogitProfile p;
    for (int g = 0; g < 2; ++g) {
        if (mass[g] <= 0.0) continue;
        for (double& v : sums[g]) v /= mass[g];
        (g == 0 ? p.id : p.ood) = std::move(sums[g]);
    }
    return p;
}

}  // namespace smeood
