#pragma once

// Logit datasets: in-memory records, CSV/JSONL interchange, class weighting
// and split views.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "smeood/error.hpp"

namespace smeood {

enum class Split { train, dev, eval };

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::dev: return "dev";
        case Split::eval: return "eval";
    }
    return "?";
}

inline std::optional<Split> parse_split(std::string_view token) {
    if (token == "train") return Split::train;
    if (token == "dev") return Split::dev;
    if (token == "eval") return Split::eval;
    return std::nullopt;
}

struct LogitRecord {
    std::string sample_id;
    std::string model_name;
    Split split = Split::train;
    bool is_ood = false;
    std::vector<double> logits;

    bool operator==(const LogitRecord&) const = default;
};

/// A non-owning filtered view over records of a Dataset.
using RecordView = std::vector<std::reference_wrapper<const LogitRecord>>;

struct Dataset {
    std::vector<LogitRecord> records;
    /// Index i names logit i.
    std::vector<std::string> class_names;

    /// Logit length shared by all scored records, 0 when none are scored.
    std::size_t num_logits() const {
        for (const auto& r : records)
            if (!r.logits.empty()) return r.logits.size();
        return 0;
    }

    std::optional<std::size_t> class_index(std::string_view name) const {
        auto it = std::find(class_names.begin(), class_names.end(), name);
        if (it == class_names.end()) return std::nullopt;
        return static_cast<std::size_t>(it - class_names.begin());
    }

    bool operator==(const Dataset&) const = default;
};

struct ValidateOptions {
    /// Auxiliary OOD datasets carry OOD rows in the train split.
    bool allow_ood_train = false;
    /// Off for external logit files read without a class list; ID samples
    /// then carry no resolvable true class.
    bool require_known_classes = true;
};

/// Throws InvalidArgument describing the first violated invariant.
inline void validate(const Dataset& d, ValidateOptions opts = {}) {
    std::set<std::string_view> seen;
    for (const auto& n : d.class_names)
        if (!seen.insert(n).second) throw InvalidArgument("duplicate class name '" + n + "'");

    const std::size_t k = d.num_logits();
    if (k == 1) throw InvalidArgument("logit length must be at least 2");
    if (k != 0 && d.class_names.size() != k)
        throw InvalidArgument("class_names has " + std::to_string(d.class_names.size()) +
                              " entries but logits have length " + std::to_string(k));
    for (std::size_t i = 0; i < d.records.size(); ++i) {
        const auto& r = d.records[i];
        const std::string where = "record " + std::to_string(i) + " ('" + r.sample_id + "')";
        if (!r.logits.empty() && r.logits.size() != k)
            throw InvalidArgument(where + ": inconsistent logit length");
        for (double v : r.logits)
            if (!std::isfinite(v)) throw InvalidArgument(where + ": non-finite logit");
        if (opts.require_known_classes && !r.is_ood && !seen.contains(r.model_name))
            throw InvalidArgument(where + ": model_name '" + r.model_name +
                                  "' is not an ID class");
        if (r.is_ood && r.split == Split::train && !opts.allow_ood_train)
            throw InvalidArgument(where + ": OOD record in the train split");
    }
}

// ---------------------------------------------------------------------------
// Number formatting. Shortest round-trip representation, so save(load(f))
// reproduces every double bit-for-bit.

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
    double v = 0.0;
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

// ---------------------------------------------------------------------------
// CSV

namespace csv {

/// Splits one line into fields; supports double-quoted fields with "" escapes.
inline std::optional<std::vector<std::string>> split_line(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    bool was_quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"' && cur.empty() && !was_quoted) {
            quoted = was_quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
            was_quoted = false;
        } else {
            cur.push_back(c);
        }
    }
    if (quoted) return std::nullopt;
    out.push_back(std::move(cur));
    return out;
}

inline std::string quote(std::string_view field) {
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

/// Reads lines, stripping a trailing '\r'. Calls fn(line, line_no) per non-empty line.
template <typename Fn>
void for_each_line(std::istream& in, Fn&& fn) {
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        fn(line, no);
    }
}

}  // namespace csv

inline std::vector<std::string> default_class_names(std::size_t k) {
    std::vector<std::string> names;
    names.reserve(k);
    for (std::size_t i = 0; i < k; ++i) names.push_back("class_" + std::to_string(i));
    return names;
}

/// Parses the dataformat CSV. When `class_names` is empty, names default to
/// class_0..class_{k-1}.
inline Dataset read_csv(std::istream& in, const std::string& source,
                        std::vector<std::string> class_names = {}, ValidateOptions opts = {}) {
    Dataset d;
    std::size_t k = 0;
    bool have_header = false;
    csv::for_each_line(in, [&](const std::string& line, std::size_t no) {
        auto fields = csv::split_line(line);
        if (!fields) throw FormatError(source, no, "malformed row: unterminated quote");
        if (!have_header) {
            static const char* expected[] = {"sample_id", "model_name", "split", "is_ood"};
            if (fields->size() < 4) throw FormatError(source, no, "malformed header");
            for (std::size_t i = 0; i < 4; ++i)
                if ((*fields)[i] != expected[i])
                    throw FormatError(source, no,
                                      "malformed header: expected column '" +
                                          std::string(expected[i]) + "'");
            k = fields->size() - 4;
            for (std::size_t i = 0; i < k; ++i)
                if ((*fields)[4 + i] != "logit_" + std::to_string(i))
                    throw FormatError(source, no,
                                      "malformed header: expected column 'logit_" +
                                          std::to_string(i) + "'");
            have_header = true;
            return;
        }
        auto& f = *fields;
        // Raw (unscored) rows may leave every logit cell empty.
        const bool unscored =
            f.size() == 4 + k && std::all_of(f.begin() + 4, f.end(),
                                             [](const std::string& s) { return s.empty(); });
        if (f.size() != 4 + k)
            throw FormatError(source, no,
                              "inconsistent logit length: expected " + std::to_string(k) +
                                  " logits, found " +
                                  std::to_string(f.size() < 4 ? 0 : f.size() - 4));
        LogitRecord r;
        r.sample_id = f[0];
        r.model_name = f[1];
        auto split = parse_split(f[2]);
        if (!split) throw FormatError(source, no, "unknown split token '" + f[2] + "'");
        r.split = *split;
        if (f[3] == "0")
            r.is_ood = false;
        else if (f[3] == "1")
            r.is_ood = true;
        else
            throw FormatError(source, no, "is_ood must be 0 or 1, got '" + f[3] + "'");
        if (!unscored) {
            r.logits.reserve(k);
            for (std::size_t i = 0; i < k; ++i) {
                auto v = parse_double(f[4 + i]);
                if (!v) throw FormatError(source, no, "malformed logit '" + f[4 + i] + "'");
                if (!std::isfinite(*v)) throw FormatError(source, no, "non-finite logit");
                r.logits.push_back(*v);
            }
        }
        d.records.push_back(std::move(r));
    });
    if (!have_header) throw FormatError(source, 0, "missing header");
    if (k == 1) throw FormatError(source, 1, "logit length must be at least 2");
    d.class_names = class_names.empty() ? default_class_names(k) : std::move(class_names);
    try {
        validate(d, opts);
    } catch (const InvalidArgument& e) {
        throw FormatError(source, 0, e.what());
    }
    return d;
}

inline void write_csv(std::ostream& out, const Dataset& d) {
    const std::size_t k = d.num_logits();
    out << "sample_id,model_name,split,is_ood";
    for (std::size_t i = 0; i < k; ++i) out << ",logit_" << i;
    out << '\n';
    for (const auto& r : d.records) {
        out << csv::quote(r.sample_id) << ',' << csv::quote(r.model_name) << ','
            << to_string(r.split) << ',' << (r.is_ood ? '1' : '0');
        if (r.logits.empty()) {
            for (std::size_t i = 0; i < k; ++i) out << ',';
        } else {
            for (double v : r.logits) out << ',' << format_double(v);
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// JSONL

inline Dataset read_jsonl(std::istream& in, const std::string& source,
                          std::vector<std::string> class_names = {},
                          ValidateOptions opts = {}) {
    Dataset d;
    std::optional<std::size_t> k;
    csv::for_each_line(in, [&](const std::string& line, std::size_t no) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(source, no, std::string("malformed row: ") + e.what());
        }
        if (!j.is_object()) throw FormatError(source, no, "malformed row: expected an object");
        LogitRecord r;
        try {
            r.sample_id = j.at("sample_id").get<std::string>();
            r.model_name = j.at("model_name").get<std::string>();
            auto tok = j.at("split").get<std::string>();
            auto split = parse_split(tok);
            if (!split) throw FormatError(source, no, "unknown split token '" + tok + "'");
            r.split = *split;
            const auto& ood = j.at("is_ood");
            if (ood.is_boolean())
                r.is_ood = ood.get<bool>();
            else if (ood.is_number_integer() && (ood == 0 || ood == 1))
                r.is_ood = ood.get<int>() == 1;
            else
                throw FormatError(source, no, "is_ood must be a boolean or 0/1");
            if (j.contains("logits") && !j["logits"].is_null()) {
                for (const auto& v : j["logits"]) {
                    if (!v.is_number()) throw FormatError(source, no, "non-numeric logit");
                    double x = v.get<double>();
                    if (!std::isfinite(x)) throw FormatError(source, no, "non-finite logit");
                    r.logits.push_back(x);
                }
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(source, no, std::string("malformed row: ") + e.what());
        }
        if (!r.logits.empty()) {
            if (!k) k = r.logits.size();
            if (*k != r.logits.size()) throw FormatError(source, no, "inconsistent logit length");
            if (*k < 2) throw FormatError(source, no, "logit length must be at least 2");
        }
        d.records.push_back(std::move(r));
    });
    d.class_names = class_names.empty() ? default_class_names(k.value_or(0)) : std::move(class_names);
    try {
        validate(d, opts);
    } catch (const InvalidArgument& e) {
        throw FormatError(source, 0, e.what());
    }
    return d;
}

inline void write_jsonl(std::ostream& out, const Dataset& d) {
    for (const auto& r : d.records) {
        nlohmann::ordered_json j;
        j["sample_id"] = r.sample_id;
        j["model_name"] = r.model_name;
        j["split"] = std::string(to_string(r.split));
        j["is_ood"] = r.is_ood;
        j["logits"] = r.logits;
        out << j.dump() << '\n';
    }
}

// ---------------------------------------------------------------------------
// Files

enum class DataFormat { csv, jsonl };

inline std::vector<std::string> read_class_names(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(path.string(), 0, "cannot open class names file");
    std::vector<std::string> names;
    csv::for_each_line(in, [&](const std::string& line, std::size_t) { names.push_back(line); });
    return names;
}

inline void write_class_names(const std::filesystem::path& path,
                              const std::vector<std::string>& names) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& n : names) out << n << '\n';
}

inline DataFormat format_from_extension(const std::filesystem::path& path) {
    return path.extension() == ".jsonl" ? DataFormat::jsonl : DataFormat::csv;
}

inline Dataset load_dataset(const std::filesystem::path& path, DataFormat format,
                            std::vector<std::string> class_names = {},
                            ValidateOptions opts = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path.string(), 0, "cannot open file");
    return format == DataFormat::csv
               ? read_csv(in, path.string(), std::move(class_names), opts)
               : read_jsonl(in, path.string(), std::move(class_names), opts);
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d, DataFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    if (format == DataFormat::csv)
        write_csv(out, d);
    else
        write_jsonl(out, d);
}

// ---------------------------------------------------------------------------
// Class weighting and views

/// Per-sample weight 1/N_c keyed by model_name, so every class (OOD systems
/// included) carries a total mass of 1.
struct ClassWeights {
    std::map<std::string, double, std::less<>> weight_of;

    double at(std::string_view model_name) const {
        auto it = weight_of.find(model_name);
        if (it == weight_of.end())
            throw InvalidArgument("no class weight for model_name '" + std::string(model_name) + "'");
        return it->second;
    }
};

namespace detail {
inline const LogitRecord& as_record(const LogitRecord& r) { return r; }
inline const LogitRecord& as_record(std::reference_wrapper<const LogitRecord> r) { return r.get(); }
inline const LogitRecord& as_record(const LogitRecord* r) { return *r; }
}  // namespace detail

template <typename Range>
ClassWeights compute_class_weights(const Range& records) {
    std::map<std::string, std::size_t, std::less<>> counts;
    for (const auto& item : records) ++counts[detail::as_record(item).model_name];
    if (counts.empty()) throw InvalidArgument("compute_class_weights: empty input");
    ClassWeights w;
    for (const auto& [name, n] : counts) w.weight_of.emplace(name, 1.0 / static_cast<double>(n));
    return w;
}

/// Weights of 1 for every model_name in `records`.
template <typename Range>
ClassWeights unit_class_weights(const Range& records) {
    ClassWeights w;
    for (const auto& item : records) w.weight_of.emplace(detail::as_record(item).model_name, 1.0);
    if (w.weight_of.empty()) throw InvalidArgument("unit_class_weights: empty input");
    return w;
}

enum class OodFilter { id_only, ood_only, all };

inline RecordView split_view(const Dataset& d, Split split, OodFilter filter) {
    RecordView out;
    for (const auto& r : d.records) {
        if (r.split != split) continue;
        if (filter == OodFilter::id_only && r.is_ood) continue;
        if (filter == OodFilter::ood_only && !r.is_ood) continue;
        out.emplace_back(r);
    }
    return out;
}

}  // namespace smeood
