#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kblink/encoder.hpp"
#include "kblink/error.hpp"
#include "kblink/flags.hpp"
#include "kblink/params.hpp"
#include "kblink/tensor.hpp"

namespace kblink {

struct RelexConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;  // TR2 depth
    std::size_t n_heads = 4;
    std::size_t top_k = 600;
    std::size_t n_relations = 0;  // |R| = RelationVocab.size
};

using MentionPair = std::pair<std::size_t, std::size_t>;

struct RelationScores {
    Tensor coarse;  // [M, M], zero diagonal; unused in bilinear mode
    std::vector<MentionPair> kept_pairs;  // lexicographic (i, j)
    std::map<MentionPair, Tensor> combined;  // pair -> [|R|]; absent = zero vector
    std::size_t fine_pair_count = 0;  // pairs actually run through the fine layer
    std::size_t relation_width = 0;

    const Tensor* find(std::size_t i, std::size_t j) const {
        auto it = combined.find({i, j});
        return it == combined.end() ? nullptr : &it->second;
    }
};

inline void init_relex_params(ParameterStore& store, const RelexConfig& cfg, ReMode mode,
                              Rng& rng, double stddev = 0.02) {
    if (cfg.d_model % 2 != 0) throw validation_error("relex: d_model must be even for FF3");
    if (cfg.n_relations == 0) throw validation_error("relex: n_relations must be positive");
    if (mode == ReMode::coarse2fine) {
        store.declare_normal("relex.coarse.B", {cfg.d_model, cfg.d_model}, rng, stddev);
        store.declare_full("relex.coarse.b", {1}, 0.0);
        store.declare_normal("relex.pair_proj.w", {cfg.d_model, cfg.d_model / 2}, rng, stddev);
        store.declare_full("relex.pair_proj.b", {cfg.d_model / 2}, 0.0);
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            init_transformer_layer(store, "relex.tr2.l" + std::to_string(l), cfg.d_model, rng,
                                   stddev);
        store.declare_normal("relex.fine_out.w", {cfg.d_model, cfg.n_relations}, rng, stddev);
        store.declare_full("relex.fine_out.b", {cfg.n_relations}, 0.0);
    } else {
        store.declare_normal("relex.bilinear.w", {cfg.d_model, cfg.d_model * cfg.n_relations},
                             rng, stddev);
        store.declare_full("relex.bilinear.b", {cfg.n_relations}, 0.0);
    }
}

// coarse(i, j) = sigmoid(m_i^T B m_j + b), diagonal masked to exact 0.
inline Tensor coarse_scores(Tape& tape, ParameterStore& store, const Tensor& mentions) {
    const std::size_t m = mentions.shape()[0];
    Tensor s = tape.matmul(tape.matmul(mentions, store.get("relex.coarse.B")),
                           tape.transpose(mentions));
    std::vector<double> ones(m * m, 1.0), mask(m * m, 1.0);
    for (std::size_t i = 0; i < m; ++i) mask[i * m + i] = 0.0;
    Tensor bias = tape.mul(Tensor::constant({m, m}, std::move(ones)),
                           store.get("relex.coarse.b"));
    return tape.mul(tape.sigmoid(tape.add(s, bias)), Tensor::constant({m, m}, std::move(mask)));
}

// Top-K ordered off-diagonal pairs by coarse score, ties by lexicographic
// (i, j). The returned list is re-sorted lexicographically so downstream
// iteration (and therefore floating-point summation order) is independent of
// score-induced ordering.
inline std::vector<MentionPair> select_top_k(const Tensor& coarse, std::size_t k) {
    const std::size_t m = coarse.shape()[0];
    struct Scored {
        double score;
        std::size_t i, j;
    };
    std::vector<Scored> all;
    all.reserve(m * (m - 1));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            if (i != j) all.push_back({coarse.values()[i * m + j], i, j});
    std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    });
    if (all.size() > k) all.resize(k);
    std::vector<MentionPair> kept;
    kept.reserve(all.size());
    for (const auto& s : all) kept.emplace_back(s.i, s.j);
    std::sort(kept.begin(), kept.end());
    return kept;
}

// Fine scores: project mentions (FF3), concatenate per ordered pair, run TR2
// with the pair set attending to itself and to H, map to |R| logits (FF4),
// then apply the activation. Returns one [|R|] tensor per kept pair.
inline std::map<MentionPair, Tensor> fine_scores(Tape& tape, ParameterStore& store,
                                                 const RelexConfig& cfg,
                                                 const std::vector<MentionPair>& kept,
                                                 const Tensor& mentions, const Tensor& H,
                                                 bool signed_scores, const DropoutCtx& drop) {
    std::map<MentionPair, Tensor> out;
    if (kept.empty()) return out;
    Tensor proj = tape.add(tape.matmul(mentions, store.get("relex.pair_proj.w")),
                           store.get("relex.pair_proj.b"));
    std::vector<Tensor> rows;
    rows.reserve(kept.size());
    const std::size_t half = cfg.d_model / 2;
    for (const auto& [i, j] : kept)
        rows.push_back(tape.reshape(
            tape.concat({tape.row(proj, i), tape.row(proj, j)}), {1, 2 * half}));
    Tensor x = kept.size() == 1 ? rows[0] : tape.concat(rows);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        Tensor kv = tape.concat({x, H});
        x = transformer_layer(tape, store, "relex.tr2.l" + std::to_string(l), x, kv,
                              cfg.n_heads, drop);
    }
    Tensor logits = tape.add(tape.matmul(x, store.get("relex.fine_out.w")),
                             store.get("relex.fine_out.b"));
    Tensor act = signed_scores ? logits : tape.sigmoid(logits);
    for (std::size_t p = 0; p < kept.size(); ++p) out.emplace(kept[p], tape.row(act, p));
    return out;
}

// Elementwise product with the coarse gate keeps gradients flowing
// through the coarse layer; dropped pairs stay zero vectors (absent).
inline RelationScores combine_relation_scores(Tape& tape, const Tensor& coarse,
                                              std::map<MentionPair, Tensor> fine,
                                              const std::vector<MentionPair>& kept,
                                              std::size_t relation_width) {
    RelationScores rs;
    rs.coarse = coarse;
    rs.kept_pairs = kept;
    rs.fine_pair_count = fine.size();
    rs.relation_width = relation_width;
    const std::size_t m = coarse.shape()[0];
    for (const auto& [pair, vec] : fine) {
        Tensor gate = tape.element(coarse, pair.first * m + pair.second);
        rs.combined.emplace(pair, tape.mul(gate, vec));
    }
    return rs;
}

inline RelationScores coarse_to_fine_scores(Tape& tape, ParameterStore& store,
                                            const RelexConfig& cfg, const Tensor& mentions,
                                            const Tensor& H, bool signed_scores,
                                            const DropoutCtx& drop) {
    Tensor coarse = coarse_scores(tape, store, mentions);
    auto kept = select_top_k(coarse, cfg.top_k);
    auto fine = fine_scores(tape, store, cfg, kept, mentions, H, signed_scores, drop);
    return combine_relation_scores(tape, coarse, std::move(fine), kept, cfg.n_relations);
}

// Baseline variant (no pruning): every ordered pair scored by a per-relation
// bilinear map, score_r = m_i^T W_r m_j + b_r, with the same activation.
inline RelationScores bilinear_relation_scores(Tape& tape, ParameterStore& store,
                                               const RelexConfig& cfg, const Tensor& mentions,
                                               bool signed_scores) {
    const std::size_t m = mentions.shape()[0], d = cfg.d_model, R = cfg.n_relations;
    RelationScores rs;
    rs.coarse = Tensor::zeros({m, m});  // no coarse layer in this mode
    rs.relation_width = R;
    // U[i] reshaped to [R, d] holds m_i^T W_r per relation (relation-major columns).
    Tensor u = tape.matmul(mentions, store.get("relex.bilinear.w"));
    for (std::size_t i = 0; i < m; ++i) {
        Tensor ui = tape.reshape(tape.row(u, i), {R, d});
        for (std::size_t j = 0; j < m; ++j) {
            if (i == j) continue;
            Tensor mj = tape.reshape(tape.row(mentions, j), {d, 1});
            Tensor scores = tape.add(tape.reshape(tape.matmul(ui, mj), {R}),
                                     store.get("relex.bilinear.b"));
            Tensor act = signed_scores ? scores : tape.sigmoid(scores);
            rs.kept_pairs.emplace_back(i, j);
            rs.combined.emplace(MentionPair{i, j}, act);
            ++rs.fine_pair_count;
        }
    }
    return rs;
}

}  // namespace kblink
