#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "kblink/kb.hpp"
#include "kblink/rng.hpp"
#include "test_util.hpp"

using namespace kblink;

namespace {

KnowledgeBase kb_from(const std::string& entities, const std::string& facts,
                      const std::string& tag = "kb") {
    TempDir dir(tag);
    write_file(dir.file("entities.tsv"), entities);
    write_file(dir.file("facts.tsv"), facts);
    return load_kb(dir.file("entities.tsv"), dir.file("facts.tsv"));
}

}  // namespace

TEST_CASE("load_kb: counts, dedup, raw_types") {
    auto kb = kb_from(
        "0\tAlpha\tfirst thing\n"
        "1\tBeta\t\n"
        "2\tGamma\tthird thing\n",
        "0\tlikes\t1\n"
        "0\tlikes\t1\n"
        "1\tnear\t2\n");
    REQUIRE(kb.n_entities() == 3);
    REQUIRE(kb.facts.size() == 2);  // duplicate collapsed
    REQUIRE(kb.entities[1].description.empty());
    REQUIRE(kb.entities[0].raw_types ==
            std::vector<TypePair>{{kb.relation_ids.at("likes"), 1}});
    REQUIRE(kb.entities[2].raw_types.empty());
}

TEST_CASE("load_kb: error cases") {
    SECTION("dangling entity id named in message") {
        try {
            kb_from("0\tA\t\n1\tB\t\n", "0\tr\t99\n");
            FAIL("expected integrity_error");
        } catch (const integrity_error& e) {
            REQUIRE(std::string(e.what()).find("99") != std::string::npos);
        }
    }
    SECTION("non-dense ids") {
        REQUIRE_THROWS_AS(kb_from("0\tA\t\n2\tB\t\n", ""), integrity_error);
    }
    SECTION("duplicate ids") {
        REQUIRE_THROWS_AS(kb_from("0\tA\t\n0\tB\t\n", ""), integrity_error);
    }
    SECTION("malformed entity line names line number") {
        try {
            kb_from("0\tA\t\nnot_a_number\tB\t\n", "");
            FAIL("expected parse_error");
        } catch (const parse_error& e) {
            REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
        }
    }
    SECTION("empty label") {
        REQUIRE_THROWS_AS(kb_from("0\t\tdesc\n", ""), parse_error);
    }
    SECTION("bad fact field count") {
        REQUIRE_THROWS_AS(kb_from("0\tA\t\n", "0\tr\n"), parse_error);
    }
}

TEST_CASE("relation vocab: ranking, collapse, degenerate sizes") {
    // counts: r1 x5, r2 x3, r3 x1 over a 6-entity KB
    std::string ents;
    for (int i = 0; i < 6; ++i) ents += std::to_string(i) + "\tE" + std::to_string(i) + "\t\n";
    std::string facts;
    for (int o = 1; o <= 5; ++o) facts += "0\tr1\t" + std::to_string(o) + "\n";
    for (int o = 1; o <= 3; ++o) facts += "1\tr2\t" + std::to_string(o) + "\n";
    facts += "2\tr3\t3\n";
    auto kb = kb_from(ents, facts);

    auto v = build_relation_vocab(kb, 2);
    REQUIRE(v.standard == std::vector<RelationId>{kb.relation_ids.at("r1"),
                                                  kb.relation_ids.at("r2")});
    REQUIRE(v.size == 4);
    REQUIRE(v.class_of(kb.relation_ids.at("r3")) == v.other_class_index);
    REQUIRE(v.class_name(0, kb) == "r1");
    REQUIRE(v.class_name(v.other_class_index, kb) == "OTHER");
    REQUIRE(v.class_name(v.same_as_index, kb) == "SAME_AS");

    auto v0 = build_relation_vocab(kb, 0);
    REQUIRE(v0.size == 2);
    REQUIRE(v0.standard.empty());
    REQUIRE(v0.class_of(kb.relation_ids.at("r1")) == v0.other_class_index);

    auto vbig = build_relation_vocab(kb, 128);
    REQUIRE(vbig.standard.size() == 3);
    REQUIRE(vbig.size == 5);
}

TEST_CASE("relation vocab: frequency ties break by ascending interned id") {
    auto kb = kb_from("0\tA\t\n1\tB\t\n",
                      "0\tzz_first\t1\n"
                      "1\taa_second\t0\n");
    // both relations have count 1; zz_first was interned first (id 0)
    auto v = build_relation_vocab(kb, 1);
    REQUIRE(v.standard == std::vector<RelationId>{kb.relation_ids.at("zz_first")});
}

TEST_CASE("fact index: SAME_AS synthesis, collapse, directedness") {
    auto kb = kb_from("0\tA\t\n1\tB\t\n2\tC\t\n",
                      "0\tr1\t1\n"
                      "0\tr7\t1\n"
                      "0\tr1\t2\n");
    auto v = build_relation_vocab(kb, 1);  // r1 standard (count 2), r7 -> OTHER
    SparseFactIndex idx(kb, v);
    REQUIRE(idx.pair_count() == 2);

    auto ab = idx.lookup(0, 1);
    REQUIRE(ab.set_bits() == std::vector<std::size_t>{0, v.other_class_index});

    auto ba = idx.lookup(1, 0);
    REQUIRE_FALSE(ba.any());  // directed

    auto aa = idx.lookup(0, 0);
    REQUIRE(aa.set_bits() == std::vector<std::size_t>{v.same_as_index});
    auto cc = idx.lookup(2, 2);
    REQUIRE(cc.set_bits() == std::vector<std::size_t>{v.same_as_index});

    REQUIRE_THROWS_AS(idx.lookup(3, 0), range_error);
}

TEST_CASE("fact index: empty fact list still synthesizes SAME_AS") {
    auto kb = kb_from("0\tA\t\n1\tB\t\n", "");
    auto v = build_relation_vocab(kb, 4);
    SparseFactIndex idx(kb, v);
    REQUIRE(idx.pair_count() == 0);
    REQUIRE(idx.lookup(1, 1).test(v.same_as_index));
    REQUIRE_FALSE(idx.lookup(0, 1).any());
}

TEST_CASE("fact index: all 400 lookups of a random 20-entity KB match a brute-force scan") {
    Rng rng(2024);
    const std::size_t n_ent = 20, n_rel = 7, n_facts = 60;
    std::string ents;
    for (std::size_t i = 0; i < n_ent; ++i)
        ents += std::to_string(i) + "\tE" + std::to_string(i) + "\t\n";
    // Raw triple list retained as the oracle's ground truth.
    std::vector<std::array<std::uint32_t, 3>> triples;
    std::string facts;
    for (std::size_t f = 0; f < n_facts; ++f) {
        const auto s = static_cast<std::uint32_t>(rng.below(n_ent));
        const auto r = static_cast<std::uint32_t>(rng.below(n_rel));
        const auto o = static_cast<std::uint32_t>(rng.below(n_ent));
        triples.push_back({s, r, o});
        facts += std::to_string(s) + "\trel" + std::to_string(r) + "\t" + std::to_string(o) + "\n";
    }
    auto kb = kb_from(ents, facts);
    auto vocab = build_relation_vocab(kb, 4);
    SparseFactIndex idx(kb, vocab);

    // Independent collapse: count facts per relation name over the unique
    // triple set, rank by count desc then interned id asc.
    std::set<std::array<std::uint32_t, 3>> uniq(triples.begin(), triples.end());
    std::map<std::string, std::size_t> counts;
    for (const auto& t : uniq) ++counts["rel" + std::to_string(t[1])];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return kb.relation_ids.at(a.first) < kb.relation_ids.at(b.first);
    });
    std::map<std::string, std::size_t> cls;
    for (std::size_t i = 0; i < ranked.size(); ++i)
        cls[ranked[i].first] = i < 4 ? i : 4;  // 4 = OTHER, 5 = SAME_AS

    std::size_t total_non_same_as_bits = 0;
    std::set<std::array<std::uint32_t, 3>> class_triples;
    for (std::uint32_t s = 0; s < n_ent; ++s) {
        for (std::uint32_t o = 0; o < n_ent; ++o) {
            std::vector<bool> expect(6, false);
            for (const auto& t : uniq)
                if (t[0] == s && t[2] == o) {
                    expect[cls.at("rel" + std::to_string(t[1]))] = true;
                    class_triples.insert({s, static_cast<std::uint32_t>(
                                                 cls.at("rel" + std::to_string(t[1]))),
                                          o});
                }
            if (s == o) expect[5] = true;
            auto got = idx.lookup(s, o);
            REQUIRE(got.size() == 6);
            for (std::size_t b = 0; b < 6; ++b) {
                INFO("pair (" << s << "," << o << ") bit " << b);
                REQUIRE(got.test(b) == expect[b]);
            }
            for (std::size_t b = 0; b < 5; ++b)
                if (got.test(b)) ++total_non_same_as_bits;
        }
    }
    // Popcount of non-SAME_AS bits equals the number of distinct (s, class, o).
    REQUIRE(total_non_same_as_bits == class_triples.size());
}

TEST_CASE("subclass closure: chains, diamonds, cycles") {
    auto kb = kb_from(
        "0\tx\t\n1\tcity\t\n2\tmunicipality\t\n3\tgeo_area\t\n4\tplace\t\n",
        "0\tinstance_of\t1\n"
        "1\tsubclass_of\t2\n"
        "1\tsubclass_of\t3\n"
        "2\tsubclass_of\t4\n"
        "3\tsubclass_of\t4\n"
        "4\tsubclass_of\t1\n");  // cycle back to city
    auto anc = subclass_ancestors(kb, 1);
    REQUIRE(anc == std::vector<EntityId>{2, 3, 4});  // cycle does not revisit 1

    auto eff = effective_types(kb, 0);
    const auto inst = kb.relation_ids.at("instance_of");
    REQUIRE(std::count(eff.begin(), eff.end(), TypePair{inst, 1}) == 1);
    REQUIRE(std::count(eff.begin(), eff.end(), TypePair{inst, 2}) == 1);
    REQUIRE(std::count(eff.begin(), eff.end(), TypePair{inst, 3}) == 1);
    REQUIRE(std::count(eff.begin(), eff.end(), TypePair{inst, 4}) == 1);
}

TEST_CASE("entity type bits: direct and inferred membership") {
    auto kb = kb_from(
        "0\tRome\t\n1\tcity\t\n2\tgeographical_area\t\n3\tPele\t\n4\tfootball\t\n",
        "0\tinstance_of\t1\n"
        "1\tsubclass_of\t2\n"
        "3\tsport\t4\n");
    const auto inst = kb.relation_ids.at("instance_of");
    const auto sport = kb.relation_ids.at("sport");
    TypeVocab vocab;
    vocab.types = {{inst, 1}, {inst, 2}, {sport, 4}};

    auto rome = entity_type_bits(kb, vocab, 0);
    REQUIRE(rome.set_bits() == std::vector<std::size_t>{0, 1});  // city + inferred geo area
    auto pele = entity_type_bits(kb, vocab, 3);
    REQUIRE(pele.set_bits() == std::vector<std::size_t>{2});
    auto city = entity_type_bits(kb, vocab, 4);
    REQUIRE_FALSE(city.any());
    REQUIRE_THROWS_AS(entity_type_bits(kb, vocab, 9), range_error);
}

TEST_CASE("entity type bits: 10x8 matrix equals membership-scan oracle") {
    Rng rng(31);
    std::string ents;
    for (int i = 0; i < 16; ++i) ents += std::to_string(i) + "\tE" + std::to_string(i) + "\t\n";
    std::string facts;
    std::vector<std::array<std::uint32_t, 3>> triples;
    // entities 0..9 are instances; 10..15 are classes with random subclass edges
    for (std::uint32_t e = 0; e < 10; ++e)
        for (int k = 0; k < 2; ++k) {
            const auto cls_e = static_cast<std::uint32_t>(10 + rng.below(6));
            facts += std::to_string(e) + "\tinstance_of\t" + std::to_string(cls_e) + "\n";
            triples.push_back({e, 0, cls_e});
        }
    for (std::uint32_t c = 10; c < 15; ++c) {
        const auto parent = static_cast<std::uint32_t>(c + 1 + rng.below(15 - c));
        facts += std::to_string(c) + "\tsubclass_of\t" + std::to_string(parent) + "\n";
        triples.push_back({c, 1, parent});
    }
    auto kb = kb_from(ents, facts);
    const auto inst = kb.relation_ids.at("instance_of");

    TypeVocab vocab;
    for (std::uint32_t c = 10; c < 16; ++c) vocab.types.emplace_back(inst, c);
    vocab.types.emplace_back(inst, 0);
    vocab.types.emplace_back(inst, 5);

    // Oracle: DFS over the raw triple list.
    auto oracle_has = [&](std::uint32_t e, std::uint32_t target) {
        std::set<std::uint32_t> reach;
        std::vector<std::uint32_t> stack;
        for (const auto& t : triples)
            if (t[0] == e && t[1] == 0) {
                reach.insert(t[2]);
                stack.push_back(t[2]);
            }
        while (!stack.empty()) {
            auto cur = stack.back();
            stack.pop_back();
            for (const auto& t : triples)
                if (t[0] == cur && t[1] == 1 && reach.insert(t[2]).second)
                    stack.push_back(t[2]);
        }
        return reach.count(target) != 0;
    };

    for (std::uint32_t e = 0; e < 10; ++e) {
        auto bits = entity_type_bits(kb, vocab, e);
        for (std::size_t p = 0; p < vocab.types.size(); ++p) {
            INFO("entity " << e << " type slot " << p);
            REQUIRE(bits.test(p) == oracle_has(e, vocab.types[p].second));
        }
    }
}

namespace {

// Exhaustive per-step greedy reimplementation used as the selection oracle.
std::vector<TypePair> oracle_greedy(const KnowledgeBase& kb,
                                    const std::vector<TypeExample>& examples,
                                    std::size_t budget) {
    std::set<RelationId> pool_rels;
    for (const char* n : {kRelInstanceOf, kRelOccupation, kRelCountry, kRelSport})
        if (auto r = kb.find_relation(n)) pool_rels.insert(*r);
    std::set<TypePair> pool_set;
    for (EntityId e = 0; e < kb.n_entities(); ++e)
        for (const auto& tp : effective_types(kb, e))
            if (pool_rels.count(tp.first)) pool_set.insert(tp);
    std::vector<TypePair> pool(pool_set.begin(), pool_set.end());

    auto vec_of = [&](EntityId e, const std::vector<TypePair>& sel) {
        std::string bits;
        auto eff = effective_types(kb, e);
        for (const auto& tp : sel)
            bits += std::binary_search(eff.begin(), eff.end(), tp) ? '1' : '0';
        return bits;
    };
    auto fully_sep = [&](const TypeExample& ex, const std::vector<TypePair>& sel) {
        if (ex.negatives.empty()) return false;
        auto gv = vec_of(ex.gold, sel);
        for (auto n : ex.negatives)
            if (vec_of(n, sel) == gv) return false;
        return true;
    };

    std::vector<TypePair> sel;
    std::vector<bool> done(examples.size(), false);
    while (sel.size() < budget) {
        std::size_t best = pool.size(), best_gain = 0;
        for (std::size_t p = 0; p < pool.size(); ++p) {
            if (std::find(sel.begin(), sel.end(), pool[p]) != sel.end()) continue;
            auto trial = sel;
            trial.push_back(pool[p]);
            std::size_t gain = 0;
            for (std::size_t x = 0; x < examples.size(); ++x)
                if (!done[x] && fully_sep(examples[x], trial)) ++gain;
            if (gain > best_gain) {
                best_gain = gain;
                best = p;
            }
        }
        if (best_gain == 0) break;
        sel.push_back(pool[best]);
        for (std::size_t x = 0; x < examples.size(); ++x)
            if (!done[x] && fully_sep(examples[x], sel)) done[x] = true;
    }
    return sel;
}

}  // namespace

TEST_CASE("greedy type selection: trivial cases") {
    auto kb = kb_from(
        "0\tgold\t\n1\tneg\t\n2\tpolitician\t\n3\tactor\t\n",
        "0\toccupation\t2\n1\toccupation\t3\n");
    const auto occ = kb.relation_ids.at("occupation");

    REQUIRE(select_type_vocab(kb, {{0, {1}}}, 0).types.empty());

    auto v = select_type_vocab(kb, {{0, {1}}}, 5);
    // (occupation, politician) separates; it is first in pool order
    REQUIRE(v.types.front() == TypePair{occ, 2});
    REQUIRE(v.types.size() == 1);  // one type fully separates the only example
}

TEST_CASE("greedy type selection: matches oracle on 20 random instances") {
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        Rng rng(1000 + trial);
        const std::size_t n_inst = 8, n_cls = 6;
        std::string ents;
        for (std::size_t i = 0; i < n_inst + n_cls; ++i)
            ents += std::to_string(i) + "\tE" + std::to_string(i) + "\t\n";
        std::string facts;
        const char* rels[3] = {"instance_of", "occupation", "country"};
        for (std::uint32_t e = 0; e < n_inst; ++e) {
            const auto k = 1 + rng.below(3);
            for (std::uint64_t j = 0; j < k; ++j)
                facts += std::to_string(e) + "\t" + rels[rng.below(3)] + "\t" +
                         std::to_string(n_inst + rng.below(n_cls)) + "\n";
        }
        if (rng.bernoulli(0.7))
            facts += std::to_string(n_inst) + "\tsubclass_of\t" + std::to_string(n_inst + 1) + "\n";
        auto kb = kb_from(ents, facts, "greedy" + std::to_string(trial));

        std::vector<TypeExample> examples;
        const auto n_ex = 2 + rng.below(6);
        for (std::uint64_t x = 0; x < n_ex; ++x) {
            TypeExample ex;
            ex.gold = static_cast<EntityId>(rng.below(n_inst));
            const auto n_neg = 1 + rng.below(3);
            for (std::uint64_t n = 0; n < n_neg; ++n)
                ex.negatives.push_back(static_cast<EntityId>(rng.below(n_inst)));
            examples.push_back(std::move(ex));
        }
        const auto budget = 1 + rng.below(10);

        auto got = select_type_vocab(kb, examples, budget);
        auto want = oracle_greedy(kb, examples, budget);
        INFO("trial " << trial << " budget " << budget);
        REQUIRE(got.types == want);
    }
}

TEST_CASE("greedy type selection: invariant to example permutation") {
    auto kb = kb_from(
        "0\ta\t\n1\tb\t\n2\tc\t\n3\tt1\t\n4\tt2\t\n5\tt3\t\n",
        "0\tinstance_of\t3\n"
        "0\toccupation\t4\n"
        "1\tinstance_of\t5\n"
        "2\toccupation\t4\n"
        "2\tinstance_of\t3\n");
    std::vector<TypeExample> fwd = {{0, {1}}, {1, {0, 2}}, {2, {1}}};
    std::vector<TypeExample> rev = {{2, {1}}, {1, {0, 2}}, {0, {1}}};
    REQUIRE(select_type_vocab(kb, fwd, 4).types == select_type_vocab(kb, rev, 4).types);
}

TEST_CASE("kb and type vocab files round-trip") {
    TempDir dir("roundtrip");
    auto kb = kb_from(
        "0\tAlpha\tdesc a\n1\tBeta\t\n2\tCls\t\n",
        "0\tinstance_of\t2\n1\tinstance_of\t2\n0\tlikes\t1\n");
    save_kb(kb, dir.file("e.tsv"), dir.file("f.tsv"));
    auto kb2 = load_kb(dir.file("e.tsv"), dir.file("f.tsv"));
    REQUIRE(kb2.n_entities() == kb.n_entities());
    REQUIRE(kb2.facts == kb.facts);
    REQUIRE(kb2.relation_names == kb.relation_names);
    for (std::size_t i = 0; i < kb.entities.size(); ++i) {
        REQUIRE(kb2.entities[i].label == kb.entities[i].label);
        REQUIRE(kb2.entities[i].description == kb.entities[i].description);
        REQUIRE(kb2.entities[i].raw_types == kb.entities[i].raw_types);
    }

    TypeVocab tv;
    tv.types = {{kb.relation_ids.at("instance_of"), 2}, {kb.relation_ids.at("likes"), 1}};
    save_type_vocab(tv, kb, dir.file("tv.tsv"));
    auto tv2 = load_type_vocab(kb, dir.file("tv.tsv"));
    REQUIRE(tv2.types == tv.types);
}
