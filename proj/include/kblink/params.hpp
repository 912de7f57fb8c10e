#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "kblink/error.hpp"
#include "kblink/rng.hpp"
#include "kblink/tensor.hpp"

namespace kblink {

namespace detail {

inline std::uint64_t fnv1a_init() { return 0xcbf29ce484222325ULL; }

inline void fnv1a_update(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
}

template <typename T>
void write_pod(std::ostream& os, std::uint64_t& h, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
    fnv1a_update(h, &v, sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, std::uint64_t& h) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw integrity_error("checkpoint truncated");
    fnv1a_update(h, &v, sizeof(T));
    return v;
}

}  // namespace detail

// Named trainable tensors with deterministic (name-sorted) iteration order.
class ParameterStore {
public:
    Tensor& declare(const std::string& name, Shape shape, std::vector<double> values) {
        if (params_.count(name)) throw contract_error("parameter redeclared: " + name);
        auto [it, ok] = params_.emplace(name, Tensor::parameter(std::move(shape), std::move(values)));
        (void)ok;
        return it->second;
    }

    Tensor& declare_normal(const std::string& name, Shape shape, Rng& rng, double stddev) {
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = rng.normal(0.0, stddev);
        return declare(name, std::move(shape), std::move(v));
    }

    Tensor& declare_full(const std::string& name, Shape shape, double fill) {
        return declare(name, std::move(shape), std::vector<double>(shape_numel(shape), fill));
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw contract_error("unknown parameter: " + name);
        return it->second;
    }

    const Tensor& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw contract_error("unknown parameter: " + name);
        return it->second;
    }

    std::size_t size() const { return params_.size(); }

    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    // Binary checkpoint: magic, version, parameter count, then per parameter
    // the name, shape, and row-major f64 payload; trailing FNV-1a checksum of
    // everything after the magic.
    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw io_error("cannot open for write: " + path);
        os.write(kMagic, 8);
        std::uint64_t h = detail::fnv1a_init();
        detail::write_pod(os, h, kVersion);
        detail::write_pod(os, h, static_cast<std::uint64_t>(params_.size()));
        for (const auto& [name, t] : params_) {
            detail::write_pod(os, h, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::fnv1a_update(h, name.data(), name.size());
            detail::write_pod(os, h, static_cast<std::uint32_t>(t.rank()));
            for (auto d : t.shape()) detail::write_pod(os, h, static_cast<std::uint64_t>(d));
            const auto& v = t.values();
            os.write(reinterpret_cast<const char*>(v.data()),
                     static_cast<std::streamsize>(v.size() * sizeof(double)));
            detail::fnv1a_update(h, v.data(), v.size() * sizeof(double));
        }
        os.write(reinterpret_cast<const char*>(&h), sizeof(h));
        if (!os) throw io_error("write failed: " + path);
    }

    // Restores values into already-declared parameters. Set `strict` to
    // require an exact name/shape match with the current store.
    void load(const std::string& path, bool strict = true) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw io_error("cannot open for read: " + path);
        char magic[8];
        is.read(magic, 8);
        if (!is || std::memcmp(magic, kMagic, 8) != 0)
            throw integrity_error("checkpoint magic mismatch: " + path);
        std::uint64_t h = detail::fnv1a_init();
        const auto version = detail::read_pod<std::uint32_t>(is, h);
        if (version != kVersion)
            throw integrity_error("checkpoint version " + std::to_string(version) +
                                  " unsupported");
        const auto count = detail::read_pod<std::uint64_t>(is, h);
        if (strict && count != params_.size())
            throw integrity_error("checkpoint has " + std::to_string(count) +
                                  " parameters, store has " + std::to_string(params_.size()));
        for (std::uint64_t p = 0; p < count; ++p) {
            const auto name_len = detail::read_pod<std::uint32_t>(is, h);
            std::string name(name_len, '\0');
            is.read(name.data(), name_len);
            if (!is) throw integrity_error("checkpoint truncated");
            detail::fnv1a_update(h, name.data(), name.size());
            const auto rank = detail::read_pod<std::uint32_t>(is, h);
            Shape shape(rank);
            for (auto& d : shape)
                d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is, h));
            std::vector<double> values(shape_numel(shape));
            is.read(reinterpret_cast<char*>(values.data()),
                    static_cast<std::streamsize>(values.size() * sizeof(double)));
            if (!is) throw integrity_error("checkpoint truncated");
            detail::fnv1a_update(h, values.data(), values.size() * sizeof(double));
            auto it = params_.find(name);
            if (it == params_.end()) {
                if (strict) throw integrity_error("checkpoint parameter not in store: " + name);
                continue;
            }
            if (it->second.shape() != shape)
                throw integrity_error("checkpoint shape mismatch for " + name + ": " +
                                      shape_str(shape) + " vs " + shape_str(it->second.shape()));
            it->second.mutable_values() = std::move(values);
        }
        std::uint64_t stored = 0;
        is.read(reinterpret_cast<char*>(&stored), sizeof(stored));
        if (!is) throw integrity_error("checkpoint truncated");
        if (stored != h)
            throw integrity_error("checkpoint checksum mismatch: " + path);
    }

private:
    static constexpr char kMagic[9] = "KBLCKPT1";
    static constexpr std::uint32_t kVersion = 1;
    std::map<std::string, Tensor> params_;
};

}  // namespace kblink
