#pragma once

// Desk-scale classifier: a linear embedding followed by either a plain
// linear head or an LMCL cosine head.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "smeood/error.hpp"
#include "smeood/losses.hpp"
#include "smeood/rng.hpp"

namespace smeood {

enum class HeadKind { plain, lmcl };

inline std::string_view to_string(HeadKind h) { return h == HeadKind::plain ? "plain" : "lmcl"; }

inline HeadKind parse_head_kind(std::string_view s) {
    if (s == "plain") return HeadKind::plain;
    if (s == "lmcl") return HeadKind::lmcl;
    throw InvalidArgument("unknown head kind '" + std::string(s) + "'");
}

/// Trainable tensors. Also used for gradients of the same shape.
struct Params {
    Mat proj_w;  ///< d_embed x dim
    Vec proj_b;  ///< d_embed
    Mat head_w;  ///< k x d_embed
    Vec head_b;  ///< k for the plain head, empty for LMCL

    Params zeros_like() const {
        return {Mat::Zero(proj_w.rows(), proj_w.cols()), Vec::Zero(proj_b.size()),
                Mat::Zero(head_w.rows(), head_w.cols()), Vec::Zero(head_b.size())};
    }

    /// this += a * other
    void axpy(double a, const Params& other) {
        proj_w += a * other.proj_w;
        proj_b += a * other.proj_b;
        head_w += a * other.head_w;
        head_b += a * other.head_b;
    }

    double squared_norm() const {
        return proj_w.squaredNorm() + proj_b.squaredNorm() + head_w.squaredNorm() +
               head_b.squaredNorm();
    }

    bool all_finite() const {
        return proj_w.allFinite() && proj_b.allFinite() && head_w.allFinite() &&
               head_b.allFinite();
    }

    bool operator==(const Params& o) const {
        auto same = [](const auto& a, const auto& b) {
            return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
        };
        return same(proj_w, o.proj_w) && same(proj_b, o.proj_b) && same(head_w, o.head_w) &&
               same(head_b, o.head_b);
    }
};

struct ToyModel {
    HeadKind head = HeadKind::lmcl;
    double lmcl_scale = 16.0;
    Params params;

    Eigen::Index input_dim() const { return params.proj_w.cols(); }
    Eigen::Index embed_dim() const { return params.proj_w.rows(); }
    Eigen::Index num_classes() const { return params.head_w.rows(); }

    Vec embed(const Vec& x) const { return params.proj_w * x + params.proj_b; }

    /// Scoring logits: unbounded for the plain head, raw cosines for LMCL.
    Vec inference_logits(const Vec& x) const {
        const Vec z = embed(x);
        if (head == HeadKind::plain) return params.head_w * z + params.head_b;
        return cosines(z, params.head_w);
    }
};

/// Gaussian init scaled by 1/sqrt(fan_in); biases start at zero.
inline ToyModel init_model(HeadKind head, Eigen::Index input_dim, Eigen::Index embed_dim,
                           Eigen::Index num_classes, std::uint64_t seed, double lmcl_scale = 16.0) {
    Rng rng = Rng::stream(seed, "init");
    ToyModel m;
    m.head = head;
    m.lmcl_scale = lmcl_scale;
    auto fill = [&](Mat& w, Eigen::Index rows, Eigen::Index cols) {
        w.resize(rows, cols);
        const double s = 1.0 / std::sqrt(static_cast<double>(cols));
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) w(r, c) = s * rng.normal();
    };
    fill(m.params.proj_w, embed_dim, input_dim);
    m.params.proj_b = Vec::Zero(embed_dim);
    fill(m.params.head_w, num_classes, embed_dim);
    m.params.head_b = head == HeadKind::plain ? Vec::Zero(num_classes) : Vec();
    return m;
}

// ---------------------------------------------------------------------------
// Binary format: 8-byte magic "SMEOODM1", u64 little-endian header length,
// JSON header (shape manifest), then float64 little-endian values of each
// tensor in manifest order, row-major.

namespace detail {

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

inline std::uint64_t get_u64_le(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw Error("model file truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void save_model(const std::filesystem::path& path, const ToyModel& m) {
    struct Entry {
        const char* name;
        const double* data;
        Eigen::Index rows, cols;
    };
    // Row-major copies so the on-disk layout does not depend on Eigen's storage order.
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const RowMat pw = m.params.proj_w, hw = m.params.head_w;
    std::vector<Entry> entries = {{"proj_w", pw.data(), pw.rows(), pw.cols()},
                                  {"proj_b", m.params.proj_b.data(), m.params.proj_b.size(), 1},
                                  {"head_w", hw.data(), hw.rows(), hw.cols()},
                                  {"head_b", m.params.head_b.data(), m.params.head_b.size(), 1}};
    nlohmann::ordered_json header;
    header["format"] = "smeood-toy-model";
    header["version"] = 1;
    header["endianness"] = "little";
    header["dtype"] = "float64";
    header["head"] = std::string(to_string(m.head));
    header["lmcl_scale"] = m.lmcl_scale;
    auto& tensors = header["tensors"] = nlohmann::ordered_json::array();
    for (const auto& e : entries)
        tensors.push_back({{"name", e.name},
                           {"shape", e.cols == 1 && std::string_view(e.name).ends_with("_b")
                                         ? nlohmann::ordered_json::array({e.rows})
                                         : nlohmann::ordered_json::array({e.rows, e.cols})}});
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write("SMEOODM1", 8);
    detail::put_u64_le(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : entries)
        for (Eigen::Index i = 0; i < e.rows * e.cols; ++i)
            detail::put_u64_le(out, std::bit_cast<std::uint64_t>(e.data[i]));
}

inline ToyModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path.string(), 0, "cannot open model file");
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, "SMEOODM1", 8) != 0)
        throw FormatError(path.string(), 0, "not a model file (bad magic)");
    const auto len = detail::get_u64_le(in);
    if (len > (1u << 20)) throw FormatError(path.string(), 0, "implausible header length");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len)))
        throw FormatError(path.string(), 0, "truncated header");
    ToyModel m;
    try {
        auto header = nlohmann::json::parse(text);
        if (header.at("endianness") != "little" || header.at("dtype") != "float64")
            throw FormatError(path.string(), 0, "unsupported encoding");
        m.head = parse_head_kind(header.at("head").get<std::string>());
        m.lmcl_scale = header.at("lmcl_scale").get<double>();
        for (const auto& t : header.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            const auto& shape = t.at("shape");
            const auto rows = shape.at(0).get<Eigen::Index>();
            const auto cols = shape.size() > 1 ? shape.at(1).get<Eigen::Index>() : Eigen::Index{1};
            std::vector<double> vals(static_cast<std::size_t>(rows * cols));
            for (double& v : vals) v = std::bit_cast<double>(detail::get_u64_le(in));
            Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
                view(vals.data(), rows, cols);
            if (name == "proj_w") m.params.proj_w = view;
            else if (name == "proj_b") m.params.proj_b = view;
            else if (name == "head_w") m.params.head_w = view;
            else if (name == "head_b") m.params.head_b = vals.empty() ? Vec() : Vec(view);
            else throw FormatError(path.string(), 0, "unknown tensor '" + name + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string(), 0, std::string("bad header: ") + e.what());
    } catch (const FormatError&) {
        throw;
    } catch (const Error& e) {
        throw FormatError(path.string(), 0, e.what());
    }
    if (m.params.proj_w.rows() != m.params.proj_b.size() ||
        m.params.head_w.cols() != m.params.proj_w.rows())
        throw FormatError(path.string(), 0, "inconsistent tensor shapes");
    return m;
}

}  // namespace smeood
