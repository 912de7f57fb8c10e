#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "kblink/error.hpp"
#include "kblink/kb.hpp"

namespace kblink {

// Case-fold ASCII, collapse internal whitespace runs to one space, trim ends.
inline std::string normalize_alias(const std::string& raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (unsigned char c : raw) {
        if (std::isspace(c)) {
            if (!out.empty()) pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

struct PemEntry {
    EntityId entity;
    double prior;
    std::uint64_t count;  // raw count, kept for exact file round-trips

    friend bool operator==(const PemEntry&, const PemEntry&) = default;
};

struct Candidate {
    EntityId entity;
    double prior;
};

struct CandidateSet {
    std::size_t mention_index = 0;
    std::vector<Candidate> candidates;  // prior desc, ties by ascending EntityId
    bool gold_present = false;
};

// Alias -> per-entity prior table. Priors are count / alias total; entries are
// sorted by (prior desc, EntityId asc).
class PemTable {
public:
    void add(const std::string& alias, EntityId entity, std::uint64_t count) {
        if (count == 0) throw validation_error("alias count must be >= 1 for '" + alias + "'");
        counts_[normalize_alias(alias)][entity] += count;
        finalized_ = false;
    }

    void finalize() {
        table_.clear();
        for (const auto& [alias, per_entity] : counts_) {
            std::uint64_t total = 0;
            for (const auto& [e, c] : per_entity) total += c;
            std::vector<PemEntry> entries;
            entries.reserve(per_entity.size());
            for (const auto& [e, c] : per_entity)
                entries.push_back({e, static_cast<double>(c) / static_cast<double>(total), c});
            std::sort(entries.begin(), entries.end(), [](const PemEntry& a, const PemEntry& b) {
                if (a.prior != b.prior) return a.prior > b.prior;
                return a.entity < b.entity;
            });
            table_.emplace(alias, std::move(entries));
        }
        finalized_ = true;
    }

    const std::vector<PemEntry>* lookup(const std::string& text) const {
        require_final();
        auto it = table_.find(normalize_alias(text));
        if (it == table_.end()) return nullptr;
        return &it->second;
    }

    // Prior of a specific entity under an alias; 0 when absent.
    double prior_of(const std::string& text, EntityId e) const {
        const auto* entries = lookup(text);
        if (!entries) return 0.0;
        for (const auto& ent : *entries)
            if (ent.entity == e) return ent.prior;
        return 0.0;
    }

    std::size_t alias_count() const {
        require_final();
        return table_.size();
    }

    const std::map<std::string, std::vector<PemEntry>>& table() const {
        require_final();
        return table_;
    }

private:
    void require_final() const {
        if (!finalized_) throw contract_error("PemTable used before finalize()");
    }

    std::map<std::string, std::map<EntityId, std::uint64_t>> counts_;
    std::map<std::string, std::vector<PemEntry>> table_;
    bool finalized_ = false;
};

inline CandidateSet candidates_for(const PemTable& pem, const std::string& mention_text,
                                   std::size_t n, std::int64_t gold = -1) {
    if (n < 1) throw validation_error("candidate count must be >= 1");
    CandidateSet set;
    const auto* entries = pem.lookup(mention_text);
    if (entries) {
        for (const auto& e : *entries) {
            if (set.candidates.size() >= n) break;
            set.candidates.push_back({e.entity, e.prior});
        }
    }
    if (gold >= 0)
        for (const auto& c : set.candidates)
            if (c.entity == static_cast<EntityId>(gold)) set.gold_present = true;
    return set;
}

// pem.tsv: alias<TAB>entity_id<TAB>count
inline PemTable load_pem(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path);
    PemTable pem;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = detail::split_tabs(line);
        if (fields.size() != 3)
            throw parse_error(path + " line " + std::to_string(lineno) + ": expected 3 fields");
        if (fields[0].empty())
            throw parse_error(path + " line " + std::to_string(lineno) + ": empty alias");
        const auto entity = detail::parse_u32(fields[1], path, lineno, "entity id");
        const auto count = detail::parse_u32(fields[2], path, lineno, "count");
        if (count == 0)
            throw validation_error(path + " line " + std::to_string(lineno) + ": zero count");
        pem.add(fields[0], entity, count);
    }
    pem.finalize();
    return pem;
}

inline void save_pem(const PemTable& pem, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open for write: " + path);
    for (const auto& [alias, entries] : pem.table())
        for (const auto& e : entries) os << alias << '\t' << e.entity << '\t' << e.count << '\n';
}

}  // namespace kblink
