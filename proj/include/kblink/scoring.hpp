#pragma once

#include <string>
#include <vector>

#include "kblink/bitvec.hpp"
#include "kblink/error.hpp"
#include "kblink/flags.hpp"
#include "kblink/params.hpp"
#include "kblink/tensor.hpp"

namespace kblink {

struct ScoringConfig {
    std::size_t d_model = 64;
    std::size_t task_hidden = 64;  // hidden units of the removable task heads
    std::size_t type_vocab_size = 0;
};

// FF1 (type head), FF2 (description head), and the psi_a mixing scalars.
inline void init_scoring_params(ParameterStore& store, const ScoringConfig& cfg,
                                bool use_task_hidden, Rng& rng, double stddev = 0.02) {
    const std::size_t in_dim = use_task_hidden ? cfg.task_hidden : cfg.d_model;
    if (use_task_hidden) {
        store.declare_normal("score.type_hidden.w", {cfg.d_model, cfg.task_hidden}, rng, stddev);
        store.declare_full("score.type_hidden.b", {cfg.task_hidden}, 0.0);
        store.declare_normal("score.desc_hidden.w", {cfg.d_model, cfg.task_hidden}, rng, stddev);
        store.declare_full("score.desc_hidden.b", {cfg.task_hidden}, 0.0);
    }
    store.declare_normal("score.type_out.w", {in_dim, cfg.type_vocab_size}, rng, stddev);
    store.declare_full("score.type_out.b", {cfg.type_vocab_size}, 0.0);
    store.declare_normal("score.desc_out.w", {in_dim, cfg.d_model}, rng, stddev);
    store.declare_full("score.desc_out.b", {cfg.d_model}, 0.0);
    store.declare_full("score.w1", {1}, 1.0);
    store.declare_full("score.w2", {1}, 1.0);
}

namespace detail {

// Shared task-head shape: optional tanh hidden layer, then a linear map.
inline Tensor task_head(Tape& tape, ParameterStore& store, const Tensor& m_i,
                        const std::string& hidden_prefix, const std::string& out_prefix,
                        bool use_task_hidden) {
    Tensor x = tape.reshape(m_i, {1, m_i.numel()});
    if (use_task_hidden)
        x = tape.tanh(tape.add(tape.matmul(x, store.get(hidden_prefix + ".w")),
                               store.get(hidden_prefix + ".b")));
    Tensor out = tape.add(tape.matmul(x, store.get(out_prefix + ".w")),
                          store.get(out_prefix + ".b"));
    return tape.reshape(out, {out.shape()[1]});
}

}  // namespace detail

// FF1(m_i): unnormalised per-type logits.
inline Tensor type_logits(Tape& tape, ParameterStore& store, const Tensor& m_i,
                          bool use_task_hidden) {
    return detail::task_head(tape, store, m_i, "score.type_hidden", "score.type_out",
                             use_task_hidden);
}

// FF2(m_i): mention projection matched against description embeddings.
inline Tensor desc_query(Tape& tape, ParameterStore& store, const Tensor& m_i,
                         bool use_task_hidden) {
    return detail::task_head(tape, store, m_i, "score.desc_hidden", "score.desc_out",
                             use_task_hidden);
}

// psi_t = FF1(m_i) . t_k + P(e_k | m_i), as a [1] tensor.
inline Tensor type_score(Tape& tape, const Tensor& logits, const BitVec& type_bits,
                         double prior, bool add_prior) {
    if (logits.numel() != type_bits.size())
        throw shape_error("type_score: " + std::to_string(logits.numel()) + " logits vs " +
                          std::to_string(type_bits.size()) + " type bits");
    Tensor dot = tape.index_sum(logits, type_bits.set_bits());
    if (!add_prior) return dot;
    return tape.add(dot, Tensor::scalar(prior));
}

// psi_d = FF2(m_i) . desc_emb, as a [1] tensor.
inline Tensor description_score(Tape& tape, const Tensor& query, const Tensor& desc_emb) {
    return tape.dot(query, desc_emb);
}

// psi_a = w1 psi_t + w2 psi_d. Either term may be absent under ablation.
inline Tensor initial_score(Tape& tape, ParameterStore& store, const Tensor* psi_t,
                            const Tensor* psi_d) {
    std::vector<Tensor> terms;
    if (psi_t) terms.push_back(tape.mul(store.get("score.w1"), *psi_t));
    if (psi_d) terms.push_back(tape.mul(store.get("score.w2"), *psi_d));
    if (terms.empty()) return Tensor::scalar(0.0);
    if (terms.size() == 1) return terms[0];
    return tape.add(terms[0], terms[1]);
}

// Softmax over one mention's candidate scores ([C] from C [1] tensors).
inline Tensor normalize_scores(Tape& tape, const std::vector<Tensor>& psi_a) {
    if (psi_a.empty())
        throw contract_error("normalize_scores: empty candidate set must be skipped upstream");
    return tape.softmax(tape.concat(psi_a));
}

}  // namespace kblink
