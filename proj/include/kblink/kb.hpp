#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kblink/bitvec.hpp"
#include "kblink/error.hpp"

namespace kblink {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

// Relation names with special handling (type pool and subclass inference).
inline constexpr const char* kRelInstanceOf = "instance_of";
inline constexpr const char* kRelSubclassOf = "subclass_of";
inline constexpr const char* kRelOccupation = "occupation";
inline constexpr const char* kRelCountry = "country";
inline constexpr const char* kRelSport = "sport";

struct Fact {
    EntityId subject;
    RelationId relation;
    EntityId object;
    auto operator<=>(const Fact&) const = default;
};

using TypePair = std::pair<RelationId, EntityId>;

struct Entity {
    EntityId id = 0;
    std::string label;
    std::string description;                // may be empty
    std::vector<TypePair> raw_types;        // sorted unique (relation, object) over outgoing facts
};

struct KnowledgeBase {
    std::vector<Entity> entities;
    std::vector<Fact> facts;                // sorted unique
    std::vector<std::string> relation_names;        // RelationId -> name
    std::map<std::string, RelationId> relation_ids; // name -> RelationId

    std::size_t n_entities() const { return entities.size(); }
    std::size_t n_relations() const { return relation_names.size(); }

    std::optional<RelationId> find_relation(const std::string& name) const {
        auto it = relation_ids.find(name);
        if (it == relation_ids.end()) return std::nullopt;
        return it->second;
    }

    RelationId intern_relation(const std::string& name) {
        auto it = relation_ids.find(name);
        if (it != relation_ids.end()) return it->second;
        const auto id = static_cast<RelationId>(relation_names.size());
        relation_names.push_back(name);
        relation_ids.emplace(name, id);
        return id;
    }

    const Entity& entity(EntityId e) const {
        if (e >= entities.size())
            throw range_error("entity id " + std::to_string(e) + " out of " +
                              std::to_string(entities.size()));
        return entities[e];
    }
};

// Puts a hand-built KnowledgeBase into the form a save/load cycle produces:
// facts sorted and unique, relation ids renumbered to first appearance in the
// sorted fact list, raw_types rebuilt. Renumbering can reorder the facts, so
// the pass repeats until it reaches a fixpoint.
inline void canonicalize_relations(KnowledgeBase& kb) {
    constexpr RelationId kUnseen = std::numeric_limits<RelationId>::max();
    std::sort(kb.facts.begin(), kb.facts.end());
    kb.facts.erase(std::unique(kb.facts.begin(), kb.facts.end()), kb.facts.end());
    for (int pass = 0; pass < 16; ++pass) {
        std::vector<RelationId> remap(kb.relation_names.size(), kUnseen);
        RelationId next = 0;
        for (const auto& f : kb.facts)
            if (remap[f.relation] == kUnseen) remap[f.relation] = next++;
        for (auto& r : remap)  // relations with no facts keep relative order
            if (r == kUnseen) r = next++;
        bool identity = true;
        for (std::size_t i = 0; i < remap.size(); ++i)
            if (remap[i] != i) identity = false;
        if (identity) {
            for (auto& e : kb.entities) e.raw_types.clear();
            for (const auto& f : kb.facts)
                kb.entities[f.subject].raw_types.emplace_back(f.relation, f.object);
            for (auto& e : kb.entities) {
                std::sort(e.raw_types.begin(), e.raw_types.end());
                e.raw_types.erase(std::unique(e.raw_types.begin(), e.raw_types.end()),
                                  e.raw_types.end());
            }
            return;
        }
        std::vector<std::string> names(kb.relation_names.size());
        for (std::size_t i = 0; i < remap.size(); ++i)
            names[remap[i]] = kb.relation_names[i];
        kb.relation_names = std::move(names);
        kb.relation_ids.clear();
        for (std::size_t i = 0; i < kb.relation_names.size(); ++i)
            kb.relation_ids.emplace(kb.relation_names[i], static_cast<RelationId>(i));
        for (auto& f : kb.facts) f.relation = remap[f.relation];
        std::sort(kb.facts.begin(), kb.facts.end());
    }
    throw contract_error("canonicalize_relations: renumbering did not converge");
}

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        const auto tab = line.find('\t', pos);
        if (tab == std::string::npos) {
            out.push_back(line.substr(pos));
            return out;
        }
        out.push_back(line.substr(pos, tab - pos));
        pos = tab + 1;
    }
}

inline std::uint32_t parse_u32(const std::string& s, const std::string& file, std::size_t lineno,
                               const char* what) {
    if (s.empty()) throw parse_error(file + " line " + std::to_string(lineno) + ": empty " + what);
    std::uint64_t v = 0;
    for (char c : s) {
        if (c < '0' || c > '9')
            throw parse_error(file + " line " + std::to_string(lineno) + ": bad " + what + " '" +
                              s + "'");
        v = v * 10 + static_cast<std::uint64_t>(c - '0');
        if (v > 0xffffffffULL)
            throw parse_error(file + " line " + std::to_string(lineno) + ": " + what +
                              " out of range '" + s + "'");
    }
    return static_cast<std::uint32_t>(v);
}

}  // namespace detail

// entities.tsv: entity_id<TAB>label<TAB>description ; facts.tsv:
// subject_id<TAB>relation_name<TAB>object_id. Relation ids are interned in
// first-appearance order; facts are deduplicated; entity ids must be dense.
inline KnowledgeBase load_kb(const std::string& entity_file, const std::string& fact_file) {
    KnowledgeBase kb;

    std::ifstream ef(entity_file);
    if (!ef) throw io_error("cannot open " + entity_file);
    std::string line;
    std::size_t lineno = 0;
    std::vector<std::pair<EntityId, Entity>> rows;
    while (std::getline(ef, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = detail::split_tabs(line);
        if (fields.size() != 2 && fields.size() != 3)
            throw parse_error(entity_file + " line " + std::to_string(lineno) + ": expected 3 " +
                              "tab-separated fields, got " + std::to_string(fields.size()));
        Entity e;
        e.id = detail::parse_u32(fields[0], entity_file, lineno, "entity id");
        e.label = fields[1];
        if (e.label.empty())
            throw parse_error(entity_file + " line " + std::to_string(lineno) + ": empty label");
        if (fields.size() == 3) e.description = fields[2];
        rows.emplace_back(e.id, std::move(e));
    }
    kb.entities.resize(rows.size());
    std::vector<bool> seen(rows.size(), false);
    for (auto& [id, e] : rows) {
        if (id >= rows.size())
            throw integrity_error(entity_file + ": entity id " + std::to_string(id) +
                                  " not dense in [0, " + std::to_string(rows.size()) + ")");
        if (seen[id])
            throw integrity_error(entity_file + ": duplicate entity id " + std::to_string(id));
        seen[id] = true;
        kb.entities[id] = std::move(e);
    }

    std::ifstream ff(fact_file);
    if (!ff) throw io_error("cannot open " + fact_file);
    lineno = 0;
    while (std::getline(ff, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = detail::split_tabs(line);
        if (fields.size() != 3)
            throw parse_error(fact_file + " line " + std::to_string(lineno) + ": expected 3 " +
                              "tab-separated fields, got " + std::to_string(fields.size()));
        Fact f;
        f.subject = detail::parse_u32(fields[0], fact_file, lineno, "subject id");
        if (fields[1].empty())
            throw parse_error(fact_file + " line " + std::to_string(lineno) +
                              ": empty relation name");
        f.object = detail::parse_u32(fields[2], fact_file, lineno, "object id");
        for (EntityId id : {f.subject, f.object})
            if (id >= kb.entities.size())
                throw integrity_error(fact_file + " line " + std::to_string(lineno) +
                                      ": fact references unknown entity id " + std::to_string(id));
        f.relation = kb.intern_relation(fields[1]);
        kb.facts.push_back(f);
    }
    std::sort(kb.facts.begin(), kb.facts.end());
    kb.facts.erase(std::unique(kb.facts.begin(), kb.facts.end()), kb.facts.end());

    for (const auto& f : kb.facts)
        kb.entities[f.subject].raw_types.emplace_back(f.relation, f.object);
    for (auto& e : kb.entities) {
        std::sort(e.raw_types.begin(), e.raw_types.end());
        e.raw_types.erase(std::unique(e.raw_types.begin(), e.raw_types.end()),
                          e.raw_types.end());
    }
    return kb;
}

inline void save_kb(const KnowledgeBase& kb, const std::string& entity_file,
                    const std::string& fact_file) {
    std::ofstream ef(entity_file, std::ios::trunc);
    if (!ef) throw io_error("cannot open for write: " + entity_file);
    for (const auto& e : kb.entities)
        ef << e.id << '\t' << e.label << '\t' << e.description << '\n';
    std::ofstream ff(fact_file, std::ios::trunc);
    if (!ff) throw io_error("cannot open for write: " + fact_file);
    for (const auto& f : kb.facts)
        ff << f.subject << '\t' << kb.relation_names[f.relation] << '\t' << f.object << '\n';
}

// Top-frequency relations as separate classes plus OTHER and SAME_AS.
struct RelationVocab {
    std::vector<RelationId> standard;  // ordered by (fact count desc, RelationId asc)
    std::size_t other_class_index = 0;
    std::size_t same_as_index = 0;
    std::size_t size = 0;
    std::vector<std::size_t> raw_to_class;  // RelationId -> class index

    std::size_t class_of(RelationId r) const {
        if (r >= raw_to_class.size())
            throw range_error("relation id " + std::to_string(r) + " out of " +
                              std::to_string(raw_to_class.size()));
        return raw_to_class[r];
    }

    std::string class_name(std::size_t cls, const KnowledgeBase& kb) const {
        if (cls < standard.size()) return kb.relation_names[standard[cls]];
        if (cls == other_class_index) return "OTHER";
        if (cls == same_as_index) return "SAME_AS";
        throw range_error("relation class " + std::to_string(cls) + " out of " +
                          std::to_string(size));
    }
};

inline RelationVocab build_relation_vocab(const KnowledgeBase& kb, std::size_t max_standard) {
    std::vector<std::size_t> counts(kb.n_relations(), 0);
    for (const auto& f : kb.facts) ++counts[f.relation];
    std::vector<RelationId> order(kb.n_relations());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<RelationId>(i);
    std::sort(order.begin(), order.end(), [&](RelationId a, RelationId b) {
        if (counts[a] != counts[b]) return counts[a] > counts[b];
        return a < b;
    });
    RelationVocab v;
    const std::size_t n_std = std::min(max_standard, order.size());
    v.standard.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_std));
    v.other_class_index = v.standard.size();
    v.same_as_index = v.standard.size() + 1;
    v.size = v.standard.size() + 2;
    v.raw_to_class.assign(kb.n_relations(), v.other_class_index);
    for (std::size_t cls = 0; cls < v.standard.size(); ++cls)
        v.raw_to_class[v.standard[cls]] = cls;
    return v;
}

// One-hot relation classes per ordered entity pair. SAME_AS is synthesized at
// lookup time; only pairs with at least one stored fact occupy memory.
class SparseFactIndex {
public:
    SparseFactIndex() = default;

    SparseFactIndex(const KnowledgeBase& kb, const RelationVocab& vocab)
        : width_(vocab.size), same_as_(vocab.same_as_index), n_entities_(kb.n_entities()) {
        for (const auto& f : kb.facts) {
            const std::uint64_t key = pack(f.subject, f.object);
            auto it = pairs_.find(key);
            if (it == pairs_.end()) it = pairs_.emplace(key, BitVec(width_)).first;
            it->second.set(vocab.class_of(f.relation));
        }
    }

    BitVec lookup(EntityId s, EntityId o) const {
        check(s);
        check(o);
        BitVec out(width_);
        auto it = pairs_.find(pack(s, o));
        if (it != pairs_.end()) out = it->second;
        if (s == o) out.set(same_as_);
        return out;
    }

    // Adds or removes one fact class bit for a pair. Used only by the
    // monotonicity probes; the production index stays immutable.
    void set_pair_bit(EntityId s, EntityId o, std::size_t cls, bool on) {
        check(s);
        check(o);
        if (cls >= width_) throw range_error("relation class " + std::to_string(cls));
        const std::uint64_t key = pack(s, o);
        auto it = pairs_.find(key);
        if (it == pairs_.end()) {
            if (!on) return;
            it = pairs_.emplace(key, BitVec(width_)).first;
        }
        if (on)
            it->second.set(cls);
        else {
            it->second.reset(cls);
            if (!it->second.any()) pairs_.erase(it);
        }
    }

    std::size_t pair_count() const { return pairs_.size(); }
    std::size_t width() const { return width_; }
    std::size_t n_entities() const { return n_entities_; }

    const std::map<std::uint64_t, BitVec>& pairs() const { return pairs_; }

    static std::uint64_t pack(EntityId s, EntityId o) {
        return (static_cast<std::uint64_t>(s) << 32) | o;
    }

private:
    void check(EntityId e) const {
        if (e >= n_entities_)
            throw range_error("entity id " + std::to_string(e) + " out of " +
                              std::to_string(n_entities_));
    }

    std::size_t width_ = 0;
    std::size_t same_as_ = 0;
    std::size_t n_entities_ = 0;
    std::map<std::uint64_t, BitVec> pairs_;
};

struct TypeVocab {
    std::vector<TypePair> types;  // greedy selection order

    std::size_t size() const { return types.size(); }
};

// Ancestors via subclass_of edges, excluding the start node. Cycle-safe BFS.
inline std::vector<EntityId> subclass_ancestors(const KnowledgeBase& kb, EntityId start) {
    auto sub = kb.find_relation(kRelSubclassOf);
    if (!sub) return {};
    std::set<EntityId> visited{start};
    std::vector<EntityId> frontier{start}, out;
    while (!frontier.empty()) {
        std::vector<EntityId> next;
        for (EntityId node : frontier) {
            for (const auto& [r, parent] : kb.entity(node).raw_types) {
                if (r != *sub) continue;
                if (visited.insert(parent).second) {
                    out.push_back(parent);
                    next.push_back(parent);
                }
            }
        }
        frontier = std::move(next);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Raw outgoing (relation, object) pairs plus (instance_of, ancestor) pairs
// inferred through the subclass hierarchy.
inline std::vector<TypePair> effective_types(const KnowledgeBase& kb, EntityId e) {
    const auto& ent = kb.entity(e);
    std::set<TypePair> out(ent.raw_types.begin(), ent.raw_types.end());
    if (auto inst = kb.find_relation(kRelInstanceOf)) {
        for (const auto& [r, o] : ent.raw_types) {
            if (r != *inst) continue;
            for (EntityId anc : subclass_ancestors(kb, o)) out.emplace(*inst, anc);
        }
    }
    return {out.begin(), out.end()};
}

struct TypeExample {
    EntityId gold;
    std::vector<EntityId> negatives;
};

// Greedy forward selection: repeatedly add the pool type that newly fully
// separates the most examples. An example is fully separated when the gold's
// restricted type vector differs from every negative's. Pool order (ascending
// (relation, object)) breaks ties; selection stops at the budget or when no
// remaining type separates a new example.
inline TypeVocab select_type_vocab(const KnowledgeBase& kb,
                                   const std::vector<TypeExample>& examples,
                                   std::size_t budget) {
    TypeVocab vocab;
    if (budget == 0) return vocab;

    std::set<std::string> pool_rel_names{kRelInstanceOf, kRelOccupation, kRelCountry, kRelSport};
    std::set<RelationId> pool_rels;
    for (const auto& name : pool_rel_names)
        if (auto r = kb.find_relation(name)) pool_rels.insert(*r);

    std::vector<std::vector<TypePair>> eff(kb.n_entities());
    for (EntityId e = 0; e < kb.n_entities(); ++e) eff[e] = effective_types(kb, e);

    std::set<TypePair> pool_set;
    for (EntityId e = 0; e < kb.n_entities(); ++e)
        for (const auto& tp : eff[e])
            if (pool_rels.count(tp.first)) pool_set.insert(tp);
    std::vector<TypePair> pool(pool_set.begin(), pool_set.end());

    auto has_type = [&](EntityId e, const TypePair& tp) {
        return std::binary_search(eff[e].begin(), eff[e].end(), tp);
    };

    std::vector<bool> separated(examples.size(), false);
    auto separates_with = [&](const TypeExample& ex, const std::vector<TypePair>& sel) {
        for (EntityId n : ex.negatives) {
            bool differs = false;
            for (const auto& tp : sel)
                if (has_type(ex.gold, tp) != has_type(n, tp)) {
                    differs = true;
                    break;
                }
            if (!differs) return false;
        }
        return !ex.negatives.empty();
    };

    std::vector<bool> used(pool.size(), false);
    while (vocab.types.size() < budget) {
        std::size_t best_gain = 0, best_idx = pool.size();
        for (std::size_t p = 0; p < pool.size(); ++p) {
            if (used[p]) continue;
            auto trial = vocab.types;
            trial.push_back(pool[p]);
            std::size_t gain = 0;
            for (std::size_t x = 0; x < examples.size(); ++x)
                if (!separated[x] && separates_with(examples[x], trial)) ++gain;
            if (gain > best_gain) {
                best_gain = gain;
                best_idx = p;
            }
        }
        if (best_gain == 0) break;
        used[best_idx] = true;
        vocab.types.push_back(pool[best_idx]);
        for (std::size_t x = 0; x < examples.size(); ++x)
            if (!separated[x] && separates_with(examples[x], vocab.types)) separated[x] = true;
    }
    return vocab;
}

inline BitVec entity_type_bits(const KnowledgeBase& kb, const TypeVocab& vocab, EntityId e) {
    const auto eff = effective_types(kb, e);
    BitVec bits(vocab.size());
    for (std::size_t p = 0; p < vocab.types.size(); ++p)
        if (std::binary_search(eff.begin(), eff.end(), vocab.types[p])) bits.set(p);
    return bits;
}

// type_vocab.tsv: rank<TAB>relation_name<TAB>object_id
inline void save_type_vocab(const TypeVocab& vocab, const KnowledgeBase& kb,
                            const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open for write: " + path);
    for (std::size_t i = 0; i < vocab.types.size(); ++i)
        os << i << '\t' << kb.relation_names[vocab.types[i].first] << '\t'
           << vocab.types[i].second << '\n';
}

inline TypeVocab load_type_vocab(const KnowledgeBase& kb, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path);
    TypeVocab vocab;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = detail::split_tabs(line);
        if (fields.size() != 3)
            throw parse_error(path + " line " + std::to_string(lineno) + ": expected 3 fields");
        const auto rank = detail::parse_u32(fields[0], path, lineno, "rank");
        if (rank != vocab.types.size())
            throw integrity_error(path + " line " + std::to_string(lineno) + ": rank " +
                                  std::to_string(rank) + " out of order");
        auto rel = kb.find_relation(fields[1]);
        if (!rel)
            throw integrity_error(path + " line " + std::to_string(lineno) +
                                  ": unknown relation '" + fields[1] + "'");
        const auto obj = detail::parse_u32(fields[2], path, lineno, "object id");
        if (obj >= kb.n_entities())
            throw integrity_error(path + " line " + std::to_string(lineno) +
                                  ": unknown entity id " + std::to_string(obj));
        vocab.types.emplace_back(*rel, obj);
    }
    return vocab;
}

}  // namespace kblink
