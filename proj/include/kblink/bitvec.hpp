#pragma once

#include <bit>
#include <cstdint>
#include <vector>

#include "kblink/error.hpp"

namespace kblink {

// Fixed-width bit vector used for relation-presence and type-membership
// vectors (width is the relation/type vocabulary size, typically <= a few
// hundred bits).
class BitVec {
public:
    BitVec() = default;
    explicit BitVec(std::size_t nbits)
        : nbits_(nbits), words_((nbits + 63) / 64, 0) {}

    std::size_t size() const { return nbits_; }

    bool test(std::size_t i) const {
        check(i);
        return (words_[i >> 6] >> (i & 63)) & 1u;
    }

    void set(std::size_t i) {
        check(i);
        words_[i >> 6] |= std::uint64_t{1} << (i & 63);
    }

    void reset(std::size_t i) {
        check(i);
        words_[i >> 6] &= ~(std::uint64_t{1} << (i & 63));
    }

    bool any() const {
        for (auto w : words_)
            if (w) return true;
        return false;
    }

    std::size_t count() const {
        std::size_t c = 0;
        for (auto w : words_) c += static_cast<std::size_t>(std::popcount(w));
        return c;
    }

    // Indices of set bits, ascending.
    std::vector<std::size_t> set_bits() const {
        std::vector<std::size_t> out;
        for (std::size_t wi = 0; wi < words_.size(); ++wi) {
            std::uint64_t w = words_[wi];
            while (w) {
                const int b = std::countr_zero(w);
                out.push_back(wi * 64 + static_cast<std::size_t>(b));
                w &= w - 1;
            }
        }
        return out;
    }

    friend bool operator==(const BitVec&, const BitVec&) = default;

private:
    void check(std::size_t i) const {
        if (i >= nbits_)
            throw range_error("BitVec: bit index " + std::to_string(i) +
                              " out of range for width " + std::to_string(nbits_));
    }

    std::size_t nbits_ = 0;
    std::vector<std::uint64_t> words_;
};

}  // namespace kblink
