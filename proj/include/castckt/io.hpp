#pragma once

// Model container (CCKT binary) and flat key = value run configs.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "castckt/data.hpp"
#include "castckt/errors.hpp"
#include "castckt/model.hpp"
#include "castckt/tensor.hpp"
#include "castckt/train.hpp"

namespace castckt::io {

static_assert(std::endian::native == std::endian::little, "the model writer assumes a little-endian host");

inline constexpr char kMagic[4] = {'C', 'C', 'K', 'T'};
inline constexpr std::uint16_t kFormatVersion = 1;

struct Record {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

namespace detail {

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const char* what) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(std::string("model file truncated reading ") + what);
    return v;
}

}  // namespace detail

/// magic "CCKT", u16 version, u32 record count, then per record: u32 name
/// length, name bytes, u32 rank, u64 dims, f64 payload (all little-endian).
inline void write_records(std::ostream& out, const std::vector<Record>& recs) {
    out.write(kMagic, 4);
    detail::put<std::uint16_t>(out, kFormatVersion);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(recs.size()));
    for (const auto& r : recs) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
        out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
        for (std::size_t d : r.shape) detail::put<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(r.values.data()), static_cast<std::streamsize>(r.values.size() * sizeof(double)));
    }
}

inline std::vector<Record> read_records(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a CCKT model file");
    const auto version = detail::get<std::uint16_t>(in, "version");
    if (version != kFormatVersion) throw FormatError("unsupported model format version " + std::to_string(version));
    const auto count = detail::get<std::uint32_t>(in, "record count");
    std::vector<Record> recs;
    for (std::uint32_t i = 0; i < count; ++i) {
        Record r;
        const auto len = detail::get<std::uint32_t>(in, "name length");
        if (len > (1u << 16)) throw FormatError("implausible record name length");
        r.name.resize(len);
        if (!in.read(r.name.data(), len)) throw FormatError("model file truncated reading a name");
        const auto rank = detail::get<std::uint32_t>(in, "rank");
        if (rank > 16) throw FormatError("implausible rank for record '" + r.name + "'");
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            r.shape.push_back(detail::get<std::uint64_t>(in, "dims"));
            n *= r.shape.back();
        }
        if (n > (std::size_t{1} << 28)) throw FormatError("implausible payload size for record '" + r.name + "'");
        r.values.resize(n);
        if (!in.read(reinterpret_cast<char*>(r.values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
            throw FormatError("model file truncated in payload of '" + r.name + "'");
        }
        recs.push_back(std::move(r));
    }
    return recs;
}

struct SavedModel {
    ModelConfig config;
    ProfileNormalizer normalizer;
    ParamRegistry params;
};

inline std::vector<double> config_vector(const ModelConfig& c) {
    return {double(c.seq_len), double(c.horizon), double(c.in_features), double(c.hidden),       double(c.heads),
            double(c.depth),   double(c.embed),   double(c.out_features), double(c.head_hidden), double(c.neighbours)};
}

inline ModelConfig config_from_vector(const std::vector<double>& v) {
    if (v.size() != 10) throw FormatError("meta.config has " + std::to_string(v.size()) + " entries, expected 10");
    auto u = [&](std::size_t i) { return static_cast<std::size_t>(v[i]); };
    return {u(0), u(1), u(2), u(3), u(4), u(5), u(6), u(7), u(8), u(9)};
}

inline void save_model(std::ostream& out, const SavedModel& m) {
    std::vector<Record> recs;
    recs.push_back({"meta.config", {10}, config_vector(m.config)});
    recs.push_back({"meta.profile_mean", {nlts::kProfileDim}, {m.normalizer.mean.begin(), m.normalizer.mean.end()}});
    recs.push_back({"meta.profile_scale", {nlts::kProfileDim}, {m.normalizer.scale.begin(), m.normalizer.scale.end()}});
    for (const auto& [name, t] : m.params) recs.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
    write_records(out, recs);
}

inline void save_model(const std::string& path, const SavedModel& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write '" + path + "'");
    save_model(out, m);
    if (!out) throw FormatError("failed writing '" + path + "'");
}

inline SavedModel load_model(std::istream& in) {
    SavedModel m;
    m.normalizer = ProfileNormalizer::identity();
    bool have_config = false;
    for (auto& r : read_records(in)) {
        if (r.name == "meta.config") {
            m.config = config_from_vector(r.values);
            have_config = true;
        } else if (r.name == "meta.profile_mean" || r.name == "meta.profile_scale") {
            if (r.values.size() != nlts::kProfileDim) throw FormatError(r.name + " must have 20 entries");
            auto& dst = r.name == "meta.profile_mean" ? m.normalizer.mean : m.normalizer.scale;
            std::copy(r.values.begin(), r.values.end(), dst.begin());
        } else {
            m.params.add(r.name, Tensor::from(r.shape, std::move(r.values)));
        }
    }
    if (!have_config) throw FormatError("model file has no meta.config record");
    return m;
}

inline SavedModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    return load_model(in);
}

// -- flat configs ----------------------------------------------------------------

/// `key = value` lines; `#` starts a comment; `[section]` headers are ignored so
/// simple TOML files parse. Values may be quoted.
inline std::map<std::string, std::string> parse_key_values(std::istream& in) {
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t row = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++row;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty() || line.front() == '[') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("config line " + std::to_string(row) + ": expected 'key = value'");
        std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
        if (val.size() >= 2 && val.front() == '"' && val.back() == '"') val = val.substr(1, val.size() - 2);
        if (key.empty()) throw FormatError("config line " + std::to_string(row) + ": empty key");
        kv[key] = val;
    }
    return kv;
}

struct RunConfig {
    train::TrainConfig train;
    ModelConfig model;
    /// Name of the city (data subdirectory) used for target fine-tuning; empty = none.
    std::string target_city;
    std::size_t stride = 1;
};

/// Unknown keys and malformed values raise FormatError naming the field.
inline RunConfig parse_run_config(std::istream& in) {
    RunConfig rc;
    auto& t = rc.train;
    auto& m = rc.model;
    std::map<std::string, std::function<void(const std::string&)>> setters;
    auto real = [&](const char* key, double& dst, bool positive) {
        setters[key] = [key, &dst, positive](const std::string& v) {
            auto d = data::parse_double(v);
            if (!d || !std::isfinite(*d) || (positive ? *d <= 0.0 : *d < 0.0)) {
                throw FormatError(std::string("config field '") + key + "': invalid value '" + v + "'");
            }
            dst = *d;
        };
    };
    auto count = [&](const char* key, std::size_t& dst, bool positive) {
        setters[key] = [key, &dst, positive](const std::string& v) {
            auto d = data::parse_double(v);
            if (!d || *d < 0.0 || *d != std::floor(*d) || *d > 1e9 || (positive && *d == 0.0)) {
                throw FormatError(std::string("config field '") + key + "': invalid value '" + v + "'");
            }
            dst = static_cast<std::size_t>(*d);
        };
    };
    real("lr_source", t.lr_source, true);
    real("lr_target", t.lr_target, true);
    real("inner_lr", t.inner_lr, false);
    real("outer_lr", t.outer_lr, true);
    real("clip", t.clip, true);
    real("weight_decay", t.weight_decay, false);
    real("noise_sigma", t.noise_sigma, false);
    real("lambda1", t.lambda1, false);
    real("lambda2", t.lambda2, false);
    real("gamma", t.gamma, false);
    real("lambda_sparse", t.lambda_sparse, false);
    real("alpha", t.alpha, false);
    real("plateau_factor", t.plateau_factor, true);
    count("plateau_patience", t.plateau_patience, true);
    count("early_stop_patience", t.early_stop_patience, true);
    real("min_delta", t.min_delta, false);
    count("epochs", t.epochs, false);
    count("target_epochs", t.target_epochs, false);
    count("batch_size", t.batch_size, true);
    real("dropout", t.dropout, false);
    real("val_fraction", t.val_fraction, false);
    count("n_inner", t.n_inner, false);
    count("support_size", t.support_size, true);
    count("query_size", t.query_size, true);
    count("meta_rounds", t.meta_rounds, false);
    count("cache_capacity", t.cache_capacity, true);
    setters["cache_theta"] = [&t](const std::string& v) {
        auto d = data::parse_double(v);
        if (!d || !std::isfinite(*d)) throw FormatError("config field 'cache_theta': invalid value '" + v + "'");
        t.cache_theta = *d;
    };
    count("seq_len", m.seq_len, true);
    count("horizon", m.horizon, true);
    count("hidden", m.hidden, true);
    count("heads", m.heads, true);
    count("depth", m.depth, false);
    count("embed", m.embed, true);
    count("out_features", m.out_features, true);
    count("head_hidden", m.head_hidden, true);
    count("neighbours", m.neighbours, false);
    count("stride", rc.stride, true);
    setters["target_city"] = [&rc](const std::string& v) { rc.target_city = v; };

    for (const auto& [key, val] : parse_key_values(in)) {
        auto it = setters.find(key);
        if (it == setters.end()) throw FormatError("config field '" + key + "': unknown key");
        it->second(val);
    }
    if (t.dropout >= 1.0) throw FormatError("config field 'dropout': must be below 1");
    if (t.val_fraction >= 1.0) throw FormatError("config field 'val_fraction': must be below 1");
    if (t.plateau_factor >= 1.0) throw FormatError("config field 'plateau_factor': must be below 1");
    if (m.hidden % m.heads != 0) throw FormatError("config field 'heads': must divide hidden");
    return rc;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config '" + path + "'");
    return parse_run_config(in);
}

}  // namespace castckt::io
