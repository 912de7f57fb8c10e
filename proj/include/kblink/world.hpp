#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kblink/corpus.hpp"
#include "kblink/error.hpp"
#include "kblink/kb.hpp"
#include "kblink/pem.hpp"
#include "kblink/rng.hpp"

namespace kblink {

// Synthetic benchmark generator. Entities are grouped into clusters that share
// one ambiguous alias, one type assignment, and one description, so nothing in
// the local scores separates them; a skewed alias count makes the first
// cluster member the prior favourite. A fact-dependent mention picks a
// non-favourite member as gold and plants the only resolving signal in the KB:
// either a fact from the gold to a uniquely-aliased partner entity mentioned
// nearby (with relation-specific pattern tokens in between), or a coreferent
// mention of the gold itself under its unique alias. Filler facts point at
// never-mentioned class entities so they cannot leak support into documents.
struct WorldSpec {
    std::size_t n_entities = 40;
    std::size_t n_relations = 3;  // content relations; instance_of is added on top
    std::size_t n_types = 4;      // class entities appended after the content entities
    std::size_t aliases_per_entity = 2;
    std::size_t ambiguity = 2;  // entities per shared alias
    std::size_t facts_per_entity = 2;
    std::size_t n_documents = 30;
    std::size_t mentions_per_document = 8;
    double fact_dependence_rate = 0.5;
    double coref_rate = 0.0;  // fraction of fact-dependent mentions resolved by coreference
    double shared_easy_fraction = 0.25;  // easy mentions using the shared alias
    std::uint64_t seed = 1;

    std::size_t n_clusters() const {
        return (n_entities + ambiguity - 1) / ambiguity;
    }

    // Fact-dependent mentions per document; each consumes a second mention for
    // its partner, so at most half the document can be fact-dependent.
    std::size_t fd_per_document() const {
        const auto want = static_cast<std::size_t>(
            std::llround(fact_dependence_rate * static_cast<double>(mentions_per_document)));
        return std::min(want, mentions_per_document / 2);
    }

    void validate() const {
        if (!n_entities || !n_relations || !n_types || !aliases_per_entity || !ambiguity ||
            !facts_per_entity || !mentions_per_document)
            throw validation_error("world: all size fields must be positive");
        if (n_documents < 3)
            throw validation_error("world: need at least 3 documents for train/dev/test");
        if (fact_dependence_rate < 0.0 || fact_dependence_rate > 1.0)
            throw validation_error("world: fact_dependence_rate outside [0, 1]");
        if (coref_rate < 0.0 || coref_rate > 1.0)
            throw validation_error("world: coref_rate outside [0, 1]");
        if (shared_easy_fraction < 0.0 || shared_easy_fraction > 1.0)
            throw validation_error("world: shared_easy_fraction outside [0, 1]");
        if (ambiguity > n_entities)
            throw validation_error("world: ambiguity " + std::to_string(ambiguity) +
                                   " exceeds n_entities " + std::to_string(n_entities));
        if (fact_dependence_rate > 0.0) {
            if (ambiguity < 2)
                throw validation_error("world: fact-dependent mentions need ambiguity >= 2");
            if (aliases_per_entity < 2)
                throw validation_error(
                    "world: fact-dependent mentions need a unique alias per entity "
                    "(aliases_per_entity >= 2)");
            if (n_entities < 2 * ambiguity - 1)
                throw validation_error(
                    "world: too few entities to draw resolving partners from other clusters");
        }
        // Every segment of a document draws from a distinct cluster so that no
        // accidental coreference or fact path contaminates another mention.
        const std::size_t segments = mentions_per_document - fd_per_document();
        if (n_clusters() < segments)
            throw validation_error("world: " + std::to_string(n_clusters()) +
                                   " clusters cannot host " + std::to_string(segments) +
                                   " independent segments per document");
    }
};

struct MentionRef {
    std::string doc;
    std::size_t mention = 0;

    auto operator<=>(const MentionRef&) const = default;
};

struct GeneratedWorld {
    KnowledgeBase kb;
    PemTable pem;
    TokenVocab tokens;
    std::vector<Document> train, dev, test;
    std::vector<MentionRef> fact_dependent;   // every mention with gold != prior argmax
    std::vector<MentionRef> coref_dependent;  // subset resolved via coreference
    WorldSpec spec;
};

namespace detail {

inline std::string amb_alias(std::size_t cluster) { return "amb" + std::to_string(cluster); }
inline std::string uniq_alias(std::size_t entity) { return "uniq" + std::to_string(entity); }

}  // namespace detail

inline GeneratedWorld generate_world(const WorldSpec& spec) {
    spec.validate();
    GeneratedWorld w;
    w.spec = spec;
    const std::size_t E = spec.n_entities;
    const std::size_t A = spec.ambiguity;
    const std::size_t n_clusters = spec.n_clusters();
    auto cluster_of = [&](std::size_t e) { return e / A; };
    auto cluster_start = [&](std::size_t c) { return c * A; };
    auto cluster_size = [&](std::size_t c) { return std::min(E, (c + 1) * A) - c * A; };

    // Entities: content first, then the class entities used as type targets
    // and filler-fact objects. Cluster members share label and description, so
    // candidates sharing an alias are textually indistinguishable and overshadowed
    // members stay resolvable only through the fact path.
    for (std::size_t e = 0; e < E; ++e)
        w.kb.entities.push_back({static_cast<EntityId>(e),
                                 "grp" + std::to_string(cluster_of(e)) + "m",
                                 "member of group g" + std::to_string(cluster_of(e)),
                                 {}});
    for (std::size_t t = 0; t < spec.n_types; ++t)
        w.kb.entities.push_back({static_cast<EntityId>(E + t), "class" + std::to_string(t),
                                 "category c" + std::to_string(t),
                                 {}});

    for (std::size_t r = 0; r < spec.n_relations; ++r)
        w.kb.intern_relation("rel" + std::to_string(r));
    const RelationId type_rel = w.kb.intern_relation(kRelInstanceOf);

    // One shared type per cluster.
    for (std::size_t e = 0; e < E; ++e)
        w.kb.facts.push_back({static_cast<EntityId>(e), type_rel,
                              static_cast<EntityId>(E + cluster_of(e) % spec.n_types)});

    // Resolving facts: the m-th non-favourite member of a cluster points at
    // the (m-1)-th entity outside the cluster (walking forward from the next
    // cluster), so no two members of one cluster share a partner.
    std::vector<std::int64_t> partner_of(E, -1);
    std::vector<std::size_t> rel_of(E, 0);
    // Resolving facts connect clusters; a document may only combine clusters
    // with no fact edge between them, or the fact would support a non-gold
    // candidate of one mention from a candidate of another.
    std::vector<std::set<std::size_t>> conflicts(n_clusters);
    for (std::size_t c = 0; c < n_clusters && n_clusters >= 2; ++c) {
        if (cluster_size(c) < 2) continue;
        std::size_t slot = 0;
        for (std::size_t m = 1; m < cluster_size(c); ++m) {
            const std::size_t g = cluster_start(c) + m;
            std::size_t p = (cluster_start((c + 1) % n_clusters) + slot) % E;
            while (cluster_of(p) == c) p = (p + 1) % E;
            ++slot;
            partner_of[g] = static_cast<std::int64_t>(p);
            rel_of[g] = g % spec.n_relations;
            conflicts[c].insert(cluster_of(p));
            conflicts[cluster_of(p)].insert(c);
            w.kb.facts.push_back({static_cast<EntityId>(g),
                                  static_cast<RelationId>(rel_of[g]),
                                  static_cast<EntityId>(p)});
        }
    }

    // Filler facts target class entities, which never occur in documents, so
    // they can never support or sabotage a candidate.
    for (std::size_t e = 0; e < E; ++e) {
        const std::size_t n_fill =
            spec.facts_per_entity - (partner_of[e] >= 0 ? 1 : 0);
        for (std::size_t i = 0; i < n_fill; ++i)
            w.kb.facts.push_back(
                {static_cast<EntityId>(e),
                 static_cast<RelationId>((e + i) % spec.n_relations),
                 static_cast<EntityId>(E + (e * 7 + i) % spec.n_types)});
    }
    canonicalize_relations(w.kb);

    // Alias counts: the first cluster member dwarfs the rest, so the prior
    // argmax is always member 0; unique aliases are unambiguous.
    for (std::size_t c = 0; c < n_clusters; ++c)
        for (std::size_t m = 0; m < cluster_size(c); ++m)
            w.pem.add(detail::amb_alias(c), static_cast<EntityId>(cluster_start(c) + m),
                      m == 0 ? 90 : std::max<std::uint64_t>(10 - m, 1));
    if (spec.aliases_per_entity >= 2)
        for (std::size_t e = 0; e < E; ++e)
            w.pem.add(detail::uniq_alias(e), static_cast<EntityId>(e), 100);
    for (std::size_t a = 2; a < spec.aliases_per_entity; ++a)
        for (std::size_t e = 0; e < E; ++e)
            w.pem.add("alt" + std::to_string(e) + "x" + std::to_string(a),
                      static_cast<EntityId>(e), 100);
    w.pem.finalize();

    // Stable token vocabulary: structural tokens, relation patterns, aliases,
    // then label/description words for the entity encoder.
    w.tokens.intern(".");
    w.tokens.intern("the");
    for (std::size_t r = 0; r < spec.n_relations; ++r) {
        w.tokens.intern("r" + std::to_string(r) + "a");
        w.tokens.intern("r" + std::to_string(r) + "b");
    }
    w.tokens.intern("cofa");
    w.tokens.intern("cofb");
    for (int i = 0; i < 4; ++i) w.tokens.intern("f" + std::to_string(i));
    for (std::size_t c = 0; c < n_clusters; ++c) w.tokens.intern(detail::amb_alias(c));
    if (spec.aliases_per_entity >= 2)
        for (std::size_t e = 0; e < E; ++e) w.tokens.intern(detail::uniq_alias(e));
    for (const auto& ent : w.kb.entities) {
        w.tokens.intern(ent.label);
        std::string word;
        for (char ch : ent.description + " ") {
            if (ch == ' ') {
                if (!word.empty()) w.tokens.intern(word);
                word.clear();
            } else {
                word.push_back(ch);
            }
        }
    }

    Rng rng(spec.seed);
    std::vector<std::size_t> eligible;  // clusters with at least one non-favourite
    for (std::size_t c = 0; c < n_clusters; ++c)
        if (cluster_size(c) >= 2) eligible.push_back(c);

    std::vector<Document> docs;
    for (std::size_t d = 0; d < spec.n_documents; ++d) {
        Document doc;
        doc.id = "doc" + std::to_string(d);
        std::set<std::size_t> used;
        auto push_mention = [&](const std::string& alias, std::size_t gold) {
            Mention m;
            m.start = doc.tokens.size();
            m.end = m.start + 1;
            m.surface = alias;
            m.gold = static_cast<std::int64_t>(gold);
            doc.tokens.push_back(w.tokens.intern(alias));
            doc.mentions.push_back(m);
        };
        // `used` holds every cluster already hosting a mention plus every
        // cluster with a fact edge to one, so candidate sets of distinct
        // mentions can never touch through the KB.
        auto avail = [&](std::size_t c) { return !used.count(c); };
        auto claim = [&](std::size_t c) {
            used.insert(c);
            for (std::size_t d : conflicts[c]) used.insert(d);
        };

        std::size_t n_fd = 0;
        const std::size_t fd_want = std::min(spec.fd_per_document(), eligible.size());
        for (std::size_t s = 0; s < fd_want; ++s) {
            // Find a cluster + member whose segment does not collide with
            // anything already in the document.
            std::size_t c = 0, g = 0;
            bool coref = false, found = false;
            for (int tries = 0; tries < 64 && !found; ++tries) {
                c = eligible[rng.below(eligible.size())];
                if (!avail(c)) continue;
                const std::size_t m = 1 + rng.below(cluster_size(c) - 1);
                g = cluster_start(c) + m;
                coref = rng.uniform() < spec.coref_rate;
                if (!coref && !avail(cluster_of(static_cast<std::size_t>(partner_of[g]))))
                    continue;
                found = true;
                claim(c);
                if (!coref) claim(cluster_of(static_cast<std::size_t>(partner_of[g])));
            }
            if (!found) break;
            w.fact_dependent.push_back({doc.id, doc.mentions.size()});
            if (coref) {
                w.coref_dependent.push_back({doc.id, doc.mentions.size()});
                push_mention(detail::amb_alias(c), g);
                doc.tokens.push_back(w.tokens.id_of("cofa"));
                doc.tokens.push_back(w.tokens.id_of("cofb"));
                push_mention(detail::uniq_alias(g), g);
            } else {
                const auto p = static_cast<std::size_t>(partner_of[g]);
                push_mention(detail::amb_alias(c), g);
                doc.tokens.push_back(w.tokens.id_of("r" + std::to_string(rel_of[g]) + "a"));
                doc.tokens.push_back(w.tokens.id_of("r" + std::to_string(rel_of[g]) + "b"));
                // A favourite partner keeps its cluster's shared alias: its prior
                // already resolves it, and favourite-gold ambiguous mentions keep
                // "always pick the overshadowed member" from beating the fact path.
                const std::size_t pc = cluster_of(p);
                if (p == cluster_start(pc))
                    push_mention(detail::amb_alias(pc), p);
                else
                    push_mention(detail::uniq_alias(p), p);
            }
            doc.tokens.push_back(w.tokens.id_of("."));
            ++n_fd;
        }
        const std::size_t n_easy = spec.mentions_per_document - 2 * n_fd;
        for (std::size_t s = 0; s < n_easy; ++s) {
            std::size_t c = n_clusters;
            for (int tries = 0; tries < 64 && c == n_clusters; ++tries) {
                const std::size_t cand = rng.below(n_clusters);
                if (avail(cand)) c = cand;
            }
            if (c == n_clusters) {  // deterministic fallback: first free cluster
                for (std::size_t cand = 0; cand < n_clusters && c == n_clusters; ++cand)
                    if (avail(cand)) c = cand;
                if (c == n_clusters)
                    throw contract_error("world: ran out of clusters for document " + doc.id);
            }
            claim(c);
            doc.tokens.push_back(w.tokens.id_of("the"));
            const bool shared =
                spec.aliases_per_entity < 2 || rng.uniform() < spec.shared_easy_fraction;
            if (shared) {
                push_mention(detail::amb_alias(c), cluster_start(c));
            } else {
                const std::size_t e = cluster_start(c) + rng.below(cluster_size(c));
                push_mention(detail::uniq_alias(e), e);
            }
            doc.tokens.push_back(w.tokens.id_of("f" + std::to_string(rng.below(4))));
            doc.tokens.push_back(w.tokens.id_of("."));
        }
        validate_document(doc);
        docs.push_back(std::move(doc));
    }

    const std::size_t n_test = std::max<std::size_t>(1, spec.n_documents / 10);
    const std::size_t n_dev = std::max<std::size_t>(1, spec.n_documents / 10);
    const std::size_t n_train = spec.n_documents - n_dev - n_test;
    w.train.assign(docs.begin(), docs.begin() + n_train);
    w.dev.assign(docs.begin() + n_train, docs.begin() + n_train + n_dev);
    w.test.assign(docs.begin() + n_train + n_dev, docs.end());
    return w;
}

inline nlohmann::json world_manifest(const GeneratedWorld& w) {
    nlohmann::json j;
    j["ambiguity"] = w.spec.ambiguity;
    j["coref_rate"] = w.spec.coref_rate;
    j["fact_dependence_rate"] = w.spec.fact_dependence_rate;
    j["n_clusters"] = w.spec.n_clusters();
    j["n_documents"] = w.spec.n_documents;
    j["n_entities"] = w.spec.n_entities;
    j["n_facts"] = w.kb.facts.size();
    j["n_relations"] = w.spec.n_relations;
    j["n_tokens"] = w.tokens.size();
    j["n_types"] = w.spec.n_types;
    j["seed"] = w.spec.seed;
    j["shared_easy_fraction"] = w.spec.shared_easy_fraction;
    j["splits"] = {{"dev", w.dev.size()}, {"test", w.test.size()}, {"train", w.train.size()}};
    auto refs = [](const std::vector<MentionRef>& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : v) arr.push_back({{"doc", r.doc}, {"mention", r.mention}});
        return arr;
    };
    j["fact_dependent"] = refs(w.fact_dependent);
    j["coref_dependent"] = refs(w.coref_dependent);
    return j;
}

inline void write_world(const GeneratedWorld& w, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const fs::path root(dir);
    save_kb(w.kb, (root / "entities.tsv").string(), (root / "facts.tsv").string());
    save_pem(w.pem, (root / "pem.tsv").string());
    w.tokens.save((root / "vocab.tsv").string());
    save_documents(w.train, (root / "train.jsonl").string());
    save_documents(w.dev, (root / "dev.jsonl").string());
    save_documents(w.test, (root / "test.jsonl").string());
    std::ofstream os(root / "manifest.json", std::ios::trunc);
    if (!os) throw io_error("cannot open for write: " + (root / "manifest.json").string());
    os << world_manifest(w).dump(2) << '\n';
}

}  // namespace kblink
