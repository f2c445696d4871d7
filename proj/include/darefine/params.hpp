#ifndef DAREFINE_PARAMS_HPP
#define DAREFINE_PARAMS_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"

namespace darefine {

/// Named learnable tensors of one model, ordered by path.
template <class T>
class ParameterStore {
public:
    Var<T> add(const std::string& name, Tensor<T> init) {
        if (params_.count(name)) throw ConfigError("duplicate parameter " + name);
        Var<T> v(std::move(init), /*requires_grad=*/true);
        params_.emplace(name, v);
        return v;
    }

    const Var<T>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    std::size_t scalar_count() const {
        std::size_t total = 0;
        for (const auto& [_, v] : params_) total += v.value().size();
        return total;
    }
    std::size_t size() const { return params_.size(); }

    void zero_grad() {
        for (auto& [_, v] : params_) v.zero_grad();
    }

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }

    /// Deep copy of all parameter values, keyed by name.
    std::map<std::string, Tensor<T>> snapshot() const {
        std::map<std::string, Tensor<T>> out;
        for (const auto& [k, v] : params_) out.emplace(k, v.value());
        return out;
    }

    void restore(const std::map<std::string, Tensor<T>>& values) {
        if (values.size() != params_.size()) throw ConfigError("restore: parameter set size mismatch");
        for (auto& [k, v] : params_) {
            auto it = values.find(k);
            if (it == values.end()) throw ConfigError("restore: missing parameter " + k);
            if (!(it->second.shape() == v.value().shape())) throw ConfigError("restore: shape mismatch for " + k);
            v.mutable_value() = it->second;
        }
    }

    /// FNV-1a over names and raw value bytes.
    std::uint64_t content_hash() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* p, std::size_t n) {
            auto b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
        };
        for (const auto& [k, v] : params_) {
            mix(k.data(), k.size());
            mix(v.value().data(), v.value().size() * sizeof(T));
        }
        return h;
    }

private:
    std::map<std::string, Var<T>> params_;
};

/// Fan-in variance scaling (He normal) for a (out, in, k, k) kernel, with the
/// standard deviation multiplied by `gain`.
template <class T>
Tensor<T> he_normal(Shape s, std::mt19937_64& rng, double gain = 1.0) {
    const double fan_in = double(s.n * s.h * s.w);
    std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / fan_in));
    Tensor<T> t(s);
    for (auto& v : t.values()) v = T(dist(rng));
    return t;
}

template <class T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "float32";
    else if constexpr (std::is_same_v<T, double>) return "float64";
    else static_assert(sizeof(T) == 0, "unsupported parameter dtype");
}

// Checkpoint archive: a magic line, one line of JSON manifest, then the raw
// little-endian arrays concatenated in manifest order.
namespace checkpoint {

inline constexpr const char* kMagic = "DAREFINE-CKPT 1";

struct Entry {
    std::string name;
    Shape shape;
    std::string dtype;
};

inline nlohmann::json manifest_json(const std::vector<Entry>& entries) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : entries)
        arr.push_back({{"name", e.name}, {"shape", {e.shape.c, e.shape.n, e.shape.h, e.shape.w}}, {"dtype", e.dtype}});
    return arr;
}

template <class T>
std::vector<Entry> manifest(const ParameterStore<T>& store) {
    std::vector<Entry> out;
    for (const auto& [k, v] : store) out.push_back({k, v.value().shape(), dtype_name<T>()});
    return out;
}

template <class T>
void save(const ParameterStore<T>& store, const std::string& path, const nlohmann::json& meta = nlohmann::json::object()) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path);
    nlohmann::json header{{"meta", meta}, {"arrays", manifest_json(manifest(store))}};
    os << kMagic << "\n" << header.dump() << "\n";
    for (const auto& [k, v] : store)
        os.write(reinterpret_cast<const char*>(v.value().data()), std::streamsize(v.value().size() * sizeof(T)));
    if (!os) throw std::runtime_error("short write on checkpoint " + path);
}

struct Archive {
    nlohmann::json meta;
    std::vector<Entry> entries;
    std::map<std::string, std::vector<double>> arrays;
};

inline Archive read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path);
    std::string magic, header_line;
    std::getline(is, magic);
    if (magic != kMagic) throw std::runtime_error("not a checkpoint archive: " + path);
    std::getline(is, header_line);
    const auto header = nlohmann::json::parse(header_line);
    Archive ar;
    ar.meta = header.at("meta");
    for (const auto& e : header.at("arrays")) {
        const auto& sh = e.at("shape");
        Entry entry{e.at("name").get<std::string>(),
                    Shape{sh[0].get<std::size_t>(), sh[1].get<std::size_t>(), sh[2].get<std::size_t>(), sh[3].get<std::size_t>()},
                    e.at("dtype").get<std::string>()};
        std::vector<double> values(entry.shape.size());
        if (entry.dtype == "float32") {
            std::vector<float> raw(values.size());
            is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size() * sizeof(float)));
            std::copy(raw.begin(), raw.end(), values.begin());
        } else if (entry.dtype == "float64") {
            is.read(reinterpret_cast<char*>(values.data()), std::streamsize(values.size() * sizeof(double)));
        } else {
            throw std::runtime_error("unsupported dtype " + entry.dtype + " in " + path);
        }
        if (!is) throw std::runtime_error("truncated checkpoint " + path);
        ar.arrays.emplace(entry.name, std::move(values));
        ar.entries.push_back(std::move(entry));
    }
    return ar;
}

/// Loads every array into `store`; names and shapes must match exactly.
template <class T>
nlohmann::json load(ParameterStore<T>& store, const std::string& path) {
    Archive ar = read(path);
    if (ar.arrays.size() != store.size())
        throw ConfigError("checkpoint " + path + " has " + std::to_string(ar.arrays.size()) + " arrays, model has " +
                          std::to_string(store.size()));
    std::map<std::string, Tensor<T>> values;
    for (const auto& e : ar.entries) {
        if (!store.contains(e.name)) throw ConfigError("checkpoint array " + e.name + " not in model");
        if (!(store.get(e.name).value().shape() == e.shape)) throw ConfigError("checkpoint shape mismatch for " + e.name);
        const auto& raw = ar.arrays.at(e.name);
        values.emplace(e.name, Tensor<T>(e.shape, std::vector<T>(raw.begin(), raw.end())));
    }
    store.restore(values);
    return ar.meta;
}

}  // namespace checkpoint

}  // namespace darefine

#endif
