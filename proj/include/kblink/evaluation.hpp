#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kblink/corpus.hpp"
#include "kblink/error.hpp"
#include "kblink/kb_score.hpp"
#include "kblink/model.hpp"

namespace kblink {

// ---------------------------------------------------------------------------
// Predictions

struct MentionPrediction {
    std::size_t mention = 0;    // index within the document
    std::int64_t predicted = -1;  // -1 = abstain (no candidates)
    std::int64_t gold = -1;       // -1 = unlabeled
    double psi_f = 0.0;  // scores of the predicted candidate; 0 when abstaining
    double psi_a = 0.0;
    double psi_b = 0.0;
};

struct DocPrediction {
    std::string doc_id;
    std::vector<MentionPrediction> mentions;  // one per document mention
};

// Argmax over final scores with deterministic tie-breaking: ties go to the
// candidate with the larger prior, then to the smaller entity id.
inline std::size_t argmax_candidate(const CandidateSet& set,
                                    const std::vector<double>& scores) {
    if (set.candidates.empty()) throw contract_error("argmax_candidate: empty candidate set");
    if (scores.size() != set.candidates.size())
        throw contract_error("argmax_candidate: score/candidate length mismatch");
    std::size_t best = 0;
    for (std::size_t k = 1; k < set.candidates.size(); ++k) {
        if (scores[k] > scores[best]) {
            best = k;
        } else if (scores[k] == scores[best]) {
            const auto& ck = set.candidates[k];
            const auto& cb = set.candidates[best];
            if (ck.prior > cb.prior || (ck.prior == cb.prior && ck.entity < cb.entity))
                best = k;
        }
    }
    return best;
}

inline DocPrediction predict_document(const Document& doc, const DocScores& out) {
    DocPrediction pred;
    pred.doc_id = doc.id;
    pred.mentions.resize(doc.mentions.size());
    for (std::size_t m = 0; m < doc.mentions.size(); ++m) {
        pred.mentions[m].mention = m;
        pred.mentions[m].gold = doc.mentions[m].gold;
    }
    for (std::size_t s = 0; s < out.scored.size(); ++s) {
        const std::size_t k = argmax_candidate(out.cands[s], out.psi_f[s].values());
        auto& p = pred.mentions[out.scored[s]];
        p.predicted = out.cands[s].candidates[k].entity;
        p.psi_f = out.psi_f[s].values()[k];
        p.psi_a = out.psi_a[s].values()[k];
        p.psi_b = out.psi_b[s].values()[k];
    }
    return pred;
}

inline std::vector<DocPrediction> predict(Model& model, const std::vector<Document>& docs) {
    std::vector<DocPrediction> preds;
    preds.reserve(docs.size());
    for (const auto& doc : docs) {
        Tape tape;
        tape.set_recording(false);
        preds.push_back(predict_document(doc, model.forward(tape, doc, DropoutCtx{})));
    }
    return preds;
}

// ---------------------------------------------------------------------------
// Micro-averaged precision / recall / F1

// Only gold-labeled mentions enter the counts. Precision divides by the
// number of those mentions where the system committed to an entity (abstains
// hurt recall but not precision); recall divides by all gold mentions.
struct F1Result {
    std::size_t n_gold = 0;
    std::size_t n_predicted = 0;
    std::size_t n_correct = 0;

    double precision() const {
        return n_predicted ? static_cast<double>(n_correct) / n_predicted : 0.0;
    }
    double recall() const {
        return n_gold ? static_cast<double>(n_correct) / n_gold : 0.0;
    }
    double micro_f1() const {
        const double p = precision(), r = recall();
        return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    }
};

// (doc_id, mention index) — used to restrict scoring to a mention subset.
using MentionKey = std::pair<std::string, std::size_t>;

inline F1Result micro_f1(const std::vector<DocPrediction>& preds,
                         const std::set<MentionKey>* subset = nullptr) {
    F1Result r;
    for (const auto& doc : preds)
        for (const auto& m : doc.mentions) {
            if (m.gold < 0) continue;
            if (subset && !subset->count({doc.doc_id, m.mention})) continue;
            ++r.n_gold;
            if (m.predicted < 0) continue;
            ++r.n_predicted;
            if (m.predicted == m.gold) ++r.n_correct;
        }
    return r;
}

// ---------------------------------------------------------------------------
// Relation extraction diagnostics

struct RelationRow {
    std::size_t cls = 0;
    std::string name;
    std::size_t n_gold = 0;  // ordered gold-entity mention pairs carrying the class
    std::size_t n_hit = 0;   // of those, pairs whose combined score clears 0.5

    double recall() const { return n_gold ? static_cast<double>(n_hit) / n_gold : 0.0; }
};

// For every ordered pair of gold-labeled mentions, looks up the KB facts
// between the gold entities (the same-as class covers identical golds) and
// checks whether the relation module fired on the pair. Pairs pruned before
// the fine layer count as not fired. Rows come back sorted by gold support
// (descending), then class index.
inline std::vector<RelationRow> relation_analysis(Model& model,
                                                  const std::vector<Document>& docs) {
    const auto& art = model.artifacts();
    std::vector<RelationRow> rows(art.rel_vocab.size);
    for (std::size_t c = 0; c < rows.size(); ++c) {
        rows[c].cls = c;
        rows[c].name = art.rel_vocab.class_name(c, art.kb);
    }
    for (const auto& doc : docs) {
        Tape tape;
        tape.set_recording(false);
        const auto out = model.forward(tape, doc, DropoutCtx{});
        for (std::size_t si = 0; si < out.scored.size(); ++si) {
            const auto& mi = doc.mentions[out.scored[si]];
            if (!mi.has_gold()) continue;
            for (std::size_t sj = 0; sj < out.scored.size(); ++sj) {
                if (sj == si) continue;
                const auto& mj = doc.mentions[out.scored[sj]];
                if (!mj.has_gold()) continue;
                const BitVec bits = apply_relation_flags(
                    art.fact_index.lookup(static_cast<EntityId>(mi.gold),
                                          static_cast<EntityId>(mj.gold)),
                    art.rel_vocab, model.flags());
                if (!bits.any()) continue;
                const Tensor* combined = out.rel.find(si, sj);
                for (std::size_t c : bits.set_bits()) {
                    ++rows[c].n_gold;
                    if (combined && combined->values()[c] > 0.5) ++rows[c].n_hit;
                }
            }
        }
    }
    std::sort(rows.begin(), rows.end(), [](const RelationRow& a, const RelationRow& b) {
        if (a.n_gold != b.n_gold) return a.n_gold > b.n_gold;
        return a.cls < b.cls;
    });
    return rows;
}

// ---------------------------------------------------------------------------
// Report files

// One JSON object per document:
// {"doc_id": ..., "mentions": [{"span": [start, end], "gold": ..., "predicted": ...,
//  "psi_a": ..., "psi_b": ..., "psi_f": ...}, ...]}
inline void write_predictions(const std::vector<DocPrediction>& preds,
                              const std::vector<Document>& docs, const std::string& path) {
    if (preds.size() != docs.size())
        throw contract_error("write_predictions: prediction/document count mismatch");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open for write: " + path);
    for (std::size_t d = 0; d < preds.size(); ++d) {
        nlohmann::json row;
        row["doc_id"] = preds[d].doc_id;
        auto& mentions = row["mentions"];
        mentions = nlohmann::json::array();
        for (const auto& m : preds[d].mentions) {
            const auto& span = docs[d].mentions[m.mention];
            nlohmann::json jm;
            jm["span"] = {span.start, span.end};
            jm["gold"] = m.gold;
            jm["predicted"] = m.predicted;
            jm["psi_a"] = m.psi_a;
            jm["psi_b"] = m.psi_b;
            jm["psi_f"] = m.psi_f;
            mentions.push_back(std::move(jm));
        }
        os << row.dump() << '\n';
    }
    if (!os) throw io_error("write failed: " + path);
}

inline void write_relation_analysis(const std::vector<RelationRow>& rows,
                                    const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open for write: " + path);
    os << "relation\tgold\tpredicted\trecall\n";
    char buf[32];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.4f", r.recall());
        os << r.name << '\t' << r.n_gold << '\t' << r.n_hit << '\t' << buf << '\n';
    }
    if (!os) throw io_error("write failed: " + path);
}

}  // namespace kblink
