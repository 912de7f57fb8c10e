#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <tuple>
#include <vector>

#include "kblink/bitvec.hpp"
#include "kblink/error.hpp"
#include "kblink/flags.hpp"
#include "kblink/kb.hpp"
#include "kblink/params.hpp"
#include "kblink/pem.hpp"
#include "kblink/relex.hpp"
#include "kblink/tensor.hpp"

namespace kblink {

struct FactEntry {
    std::size_t i, j;  // ordered mention indices, i != j
    std::size_t k, n;  // candidate indices within mentions i and j
    BitVec bits;       // relation classes holding between (e_ik, e_jn)
};

// Sparse [M, M, C, C, |R|] binary tensor: only entries with >= 1 set bit are
// stored, sorted by (i, j, k, n).
struct FactTensor {
    std::size_t n_mentions = 0;
    std::vector<std::size_t> candidate_counts;  // per mention
    std::size_t relation_width = 0;
    std::vector<FactEntry> entries;

    const BitVec* find(std::size_t i, std::size_t j, std::size_t k, std::size_t n) const {
        auto it = std::lower_bound(
            entries.begin(), entries.end(), std::array<std::size_t, 4>{i, j, k, n},
            [](const FactEntry& e, const std::array<std::size_t, 4>& key) {
                return std::tie(e.i, e.j, e.k, e.n) <
                       std::tie(key[0], key[1], key[2], key[3]);
            });
        if (it == entries.end() || it->i != i || it->j != j || it->k != k || it->n != n)
            return nullptr;
        return &it->bits;
    }
};

// Applies the relation-class ablations to a looked-up bit vector: collapse
// folds standard classes into OTHER, then OTHER and SAME_AS can be disabled.
inline BitVec apply_relation_flags(BitVec bits, const RelationVocab& vocab,
                                   const AblationFlags& flags) {
    if (flags.collapse_relations) {
        bool any_standard = false;
        for (std::size_t c = 0; c < vocab.standard.size(); ++c)
            if (bits.test(c)) {
                any_standard = true;
                bits.reset(c);
            }
        if (any_standard) bits.set(vocab.other_class_index);
    }
    if (!flags.use_other) bits.reset(vocab.other_class_index);
    if (!flags.use_same_as) bits.reset(vocab.same_as_index);
    return bits;
}

// Retrieves KB facts for every ordered mention pair and candidate pair.
inline FactTensor gather_fact_tensor(const SparseFactIndex& index, const RelationVocab& vocab,
                                     const std::vector<CandidateSet>& candidates,
                                     const AblationFlags& flags) {
    FactTensor t;
    t.n_mentions = candidates.size();
    t.relation_width = vocab.size;
    for (const auto& c : candidates) t.candidate_counts.push_back(c.candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            if (i == j) continue;
            for (std::size_t k = 0; k < candidates[i].candidates.size(); ++k) {
                for (std::size_t n = 0; n < candidates[j].candidates.size(); ++n) {
                    BitVec bits = apply_relation_flags(
                        index.lookup(candidates[i].candidates[k].entity,
                                     candidates[j].candidates[n].entity),
                        vocab, flags);
                    if (bits.any()) t.entries.push_back({i, j, k, n, std::move(bits)});
                }
            }
        }
    }
    return t;
}

// Subject/object support for every (mention, candidate): ψ_s multiplies each supporting
// fact's relation score by the *other* side's normalized score and by the own
// side's normalized score; ψ_o mirrors it with the pair direction reversed.
// Accumulation order is ascending (other mention, other candidate) per the
// sorted entry list, with relation classes ascending inside index_sum.
struct SubjectObjectScores {
    std::vector<Tensor> psi_s;  // per mention: [C_i]
    std::vector<Tensor> psi_o;  // per mention: [C_i]
};

inline SubjectObjectScores subject_object_scores(Tape& tape, const RelationScores& rel,
                                                 const FactTensor& facts,
                                                 const std::vector<Tensor>& psi_a_norm) {
    const std::size_t m = facts.n_mentions;
    if (psi_a_norm.size() != m)
        throw contract_error("subject_object_scores: " + std::to_string(psi_a_norm.size()) +
                             " normalized score vectors for " + std::to_string(m) + " mentions");
    if (rel.relation_width != facts.relation_width)
        throw contract_error("subject_object_scores: relation width mismatch " +
                             std::to_string(rel.relation_width) + " vs " +
                             std::to_string(facts.relation_width));
    for (std::size_t i = 0; i < m; ++i)
        if (psi_a_norm[i].numel() != facts.candidate_counts[i])
            throw contract_error("subject_object_scores: mention " + std::to_string(i) +
                                 " candidate count mismatch");

    std::vector<std::vector<std::vector<Tensor>>> s_terms(m), o_terms(m);
    for (std::size_t i = 0; i < m; ++i) {
        s_terms[i].resize(facts.candidate_counts[i]);
        o_terms[i].resize(facts.candidate_counts[i]);
    }
    // Entries are sorted (i, j, k, n): for a fixed subject (i, k) the terms
    // arrive with j ascending then n ascending; for a fixed object (j, n)
    // with i ascending then k ascending.
    for (const auto& e : facts.entries) {
        const Tensor* r_hat = rel.find(e.i, e.j);
        if (!r_hat) continue;  // pruned pair: exact zero contribution
        Tensor w = tape.index_sum(*r_hat, e.bits.set_bits());
        s_terms[e.i][e.k].push_back(tape.mul(w, tape.element(psi_a_norm[e.j], e.n)));
        o_terms[e.j][e.n].push_back(tape.mul(w, tape.element(psi_a_norm[e.i], e.k)));
    }

    SubjectObjectScores out;
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<Tensor> s_parts, o_parts;
        for (std::size_t k = 0; k < facts.candidate_counts[i]; ++k) {
            Tensor own = tape.element(psi_a_norm[i], k);
            s_parts.push_back(s_terms[i][k].empty()
                                  ? Tensor::scalar(0.0)
                                  : tape.mul(own, tape.add_n(s_terms[i][k])));
            o_parts.push_back(o_terms[i][k].empty()
                                  ? Tensor::scalar(0.0)
                                  : tape.mul(own, tape.add_n(o_terms[i][k])));
        }
        out.psi_s.push_back(facts.candidate_counts[i] ? tape.concat(s_parts)
                                                      : Tensor::zeros({0}));
        out.psi_o.push_back(facts.candidate_counts[i] ? tape.concat(o_parts)
                                                      : Tensor::zeros({0}));
    }
    return out;
}

inline void init_kb_score_params(ParameterStore& store) {
    store.declare_full("kb.w3", {1}, 1.0);
    store.declare_full("kb.w4", {1}, 1.0);
}

// psi_b = w3 psi_s + w4 psi_o (per-mention [C] vectors).
inline Tensor kb_combine(Tape& tape, ParameterStore& store, const Tensor& psi_s,
                         const Tensor& psi_o) {
    return tape.add(tape.mul(store.get("kb.w3"), psi_s), tape.mul(store.get("kb.w4"), psi_o));
}

// psi_f = psi_a + psi_b.
inline Tensor final_score(Tape& tape, const Tensor& psi_a, const Tensor& psi_b) {
    return tape.add(psi_a, psi_b);
}

// Interpretability surface: one row per (fact bit, candidate pair) with its
// additive contribution psi_a_norm(c_ik) * r_hat_ij[r] * psi_a_norm(c_jn).
struct WeightedFact {
    std::size_t mention_i, mention_j;
    EntityId subject, object;
    std::size_t relation_class;
    double contribution;
};

inline std::vector<WeightedFact> weighted_facts(const RelationScores& rel,
                                                const FactTensor& facts,
                                                const std::vector<CandidateSet>& candidates,
                                                const std::vector<Tensor>& psi_a_norm) {
    std::vector<WeightedFact> out;
    for (const auto& e : facts.entries) {
        const Tensor* r_hat = rel.find(e.i, e.j);
        if (!r_hat) continue;
        for (std::size_t r : e.bits.set_bits()) {
            const double c = psi_a_norm[e.i].values()[e.k] * r_hat->values()[r] *
                             psi_a_norm[e.j].values()[e.n];
            out.push_back({e.i, e.j, candidates[e.i].candidates[e.k].entity,
                           candidates[e.j].candidates[e.n].entity, r, c});
        }
    }
    return out;
}

}  // namespace kblink
