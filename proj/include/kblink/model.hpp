#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kblink/corpus.hpp"
#include "kblink/encoder.hpp"
#include "kblink/flags.hpp"
#include "kblink/kb.hpp"
#include "kblink/kb_score.hpp"
#include "kblink/pem.hpp"
#include "kblink/relex.hpp"
#include "kblink/scoring.hpp"

namespace kblink {

// Immutable data the model scores against. entity_types is precomputed once
// so that later fact-index edits (monotonicity probes) cannot disturb the
// type vectors.
struct ModelArtifacts {
    KnowledgeBase kb;
    RelationVocab rel_vocab;
    TypeVocab type_vocab;
    std::vector<BitVec> entity_types;  // per entity, over type_vocab
    SparseFactIndex fact_index;
    PemTable pem;
    TokenVocab tokens;       // corpus vocabulary
    DescTokenizer desc_tok;  // corpus vocabulary + [CLS]/[SEP]/[UNK]

    static ModelArtifacts build(KnowledgeBase kb_in, PemTable pem_in, TokenVocab tokens_in,
                                TypeVocab type_vocab_in, std::size_t max_standard_relations) {
        ModelArtifacts a;
        a.kb = std::move(kb_in);
        a.pem = std::move(pem_in);
        a.tokens = std::move(tokens_in);
        a.type_vocab = std::move(type_vocab_in);
        a.rel_vocab = build_relation_vocab(a.kb, max_standard_relations);
        a.fact_index = SparseFactIndex(a.kb, a.rel_vocab);
        a.entity_types.reserve(a.kb.n_entities());
        for (EntityId e = 0; e < a.kb.n_entities(); ++e)
            a.entity_types.push_back(entity_type_bits(a.kb, a.type_vocab, e));
        a.desc_tok = DescTokenizer::build(a.tokens);
        return a;
    }
};

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t max_seq_len = 512;
    std::size_t desc_n_layers = 2;
    std::size_t desc_max_tokens = 32;
    std::size_t task_hidden = 64;
    std::size_t relex_n_layers = 2;
    std::size_t top_k = 600;
    std::size_t n_candidates = 30;
    std::uint64_t init_seed = 0;

    EncoderConfig encoder_config(std::size_t vocab_size) const {
        EncoderConfig e;
        e.vocab_size = vocab_size;
        e.d_model = d_model;
        e.n_layers = n_layers;
        e.n_heads = n_heads;
        e.max_seq_len = max_seq_len;
        e.desc_n_layers = desc_n_layers;
        e.desc_max_tokens = desc_max_tokens;
        return e;
    }
};

// Everything the loss and the evaluator need from one document pass. Mentions
// with empty candidate sets are dropped from the scored index space entirely
// (they abstain downstream and never enter RE pairs or fact gathering).
struct DocScores {
    std::vector<std::size_t> scored;  // document mention indices that got candidates
    std::vector<CandidateSet> cands;  // parallel to scored
    Tensor H;
    Tensor mentions;  // [S, d_model]
    std::vector<Tensor> psi_t, psi_d;  // [C_i]; undefined when the term is ablated
    std::vector<Tensor> psi_a, psi_a_norm, psi_b, psi_f;
    std::vector<Tensor> psi_s, psi_o;  // zero constants when KB is off
    RelationScores rel;
    FactTensor facts;
};

class Model {
public:
    Model(std::shared_ptr<ModelArtifacts> artifacts, ModelConfig config, AblationFlags flags)
        : art_(std::move(artifacts)), cfg_(config), flags_(flags) {
        flags_.validate();
        enc_cfg_ = cfg_.encoder_config(art_->desc_tok.vocab.size());
        enc_cfg_.validate();
        relex_cfg_.d_model = cfg_.d_model;
        relex_cfg_.n_layers = cfg_.relex_n_layers;
        relex_cfg_.n_heads = cfg_.n_heads;
        relex_cfg_.top_k = cfg_.top_k;
        relex_cfg_.n_relations = art_->rel_vocab.size;
        init_params();
    }

    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    const ModelArtifacts& artifacts() const { return *art_; }
    std::shared_ptr<ModelArtifacts> artifacts_ptr() const { return art_; }
    const ModelConfig& config() const { return cfg_; }
    const RelexConfig& relex_config() const { return relex_cfg_; }
    const AblationFlags& flags() const { return flags_; }

    // Runtime flags may change between passes; shape-bearing choices may not.
    void set_flags(const AblationFlags& flags) {
        if (flags.use_task_hidden != flags_.use_task_hidden ||
            flags.re_mode != flags_.re_mode)
            throw contract_error(
                "set_flags: use_task_hidden and re_mode are fixed at construction");
        flags.validate();
        flags_ = flags;
    }

    std::vector<CandidateSet> make_candidates(const Document& doc) const {
        std::vector<CandidateSet> sets;
        sets.reserve(doc.mentions.size());
        for (std::size_t i = 0; i < doc.mentions.size(); ++i) {
            auto set = candidates_for(art_->pem, doc.mentions[i].surface, cfg_.n_candidates,
                                      doc.mentions[i].gold);
            set.mention_index = i;
            sets.push_back(std::move(set));
        }
        return sets;
    }

    // Full differentiable pass over one document. `preset` (parallel to
    // doc.mentions) overrides candidate generation, e.g. for training
    // subsamples; mentions with empty sets are skipped.
    DocScores forward(Tape& tape, const Document& doc, const DropoutCtx& drop,
                      const std::vector<CandidateSet>* preset = nullptr) {
        validate_document(doc);
        DocScores out;
        auto all_sets = preset ? *preset : make_candidates(doc);
        if (preset && preset->size() != doc.mentions.size())
            throw contract_error("forward: preset candidate sets do not match mention count");
        for (std::size_t i = 0; i < all_sets.size(); ++i) {
            if (all_sets[i].candidates.empty()) continue;
            out.scored.push_back(i);
            out.cands.push_back(all_sets[i]);
        }
        if (out.scored.empty()) return out;

        auto& store = params_;
        out.H = encode_document(tape, store, enc_cfg_, "enc", doc.tokens, drop, cfg_.n_layers);

        std::vector<Tensor> mention_rows;
        for (std::size_t s = 0; s < out.scored.size(); ++s) {
            const auto& m = doc.mentions[out.scored[s]];
            Tensor pooled = pool_mention(tape, out.H, m.start, m.end);
            mention_rows.push_back(tape.reshape(pooled, {1, cfg_.d_model}));
        }
        out.mentions = mention_rows.size() == 1 ? mention_rows[0] : tape.concat(mention_rows);

        // Description embeddings: one encode per distinct candidate entity.
        std::map<EntityId, Tensor> desc_cache;
        if (flags_.use_descriptions) {
            for (const auto& set : out.cands)
                for (const auto& c : set.candidates)
                    if (!desc_cache.count(c.entity)) {
                        const auto& ent = art_->kb.entity(c.entity);
                        desc_cache.emplace(
                            c.entity,
                            encode_description(tape, store, enc_cfg_, "desc", art_->desc_tok,
                                               ent.label, ent.description, drop));
                    }
        }

        const bool types_active =
            flags_.use_types && art_->type_vocab.size() > 0;
        for (std::size_t s = 0; s < out.scored.size(); ++s) {
            Tensor m_i = tape.row(out.mentions, s);
            Tensor logits, query;
            if (types_active)
                logits = type_logits(tape, store, m_i, flags_.use_task_hidden);
            if (flags_.use_descriptions)
                query = desc_query(tape, store, m_i, flags_.use_task_hidden);

            std::vector<Tensor> t_parts, d_parts, a_parts;
            for (const auto& c : out.cands[s].candidates) {
                Tensor psi_t_ik;
                if (flags_.use_types || flags_.use_prior) {
                    if (types_active) {
                        psi_t_ik = type_score(tape, logits, art_->entity_types[c.entity],
                                              c.prior, flags_.use_prior);
                    } else {
                        psi_t_ik = Tensor::scalar(flags_.use_prior ? c.prior : 0.0);
                    }
                }
                Tensor psi_d_ik;
                if (flags_.use_descriptions)
                    psi_d_ik = description_score(tape, query, desc_cache.at(c.entity));
                if (psi_t_ik.defined()) t_parts.push_back(psi_t_ik);
                if (psi_d_ik.defined()) d_parts.push_back(psi_d_ik);
                a_parts.push_back(initial_score(tape, store,
                                                psi_t_ik.defined() ? &psi_t_ik : nullptr,
                                                psi_d_ik.defined() ? &psi_d_ik : nullptr));
            }
            if (!t_parts.empty()) out.psi_t.push_back(tape.concat(t_parts));
            else out.psi_t.emplace_back();
            if (!d_parts.empty()) out.psi_d.push_back(tape.concat(d_parts));
            else out.psi_d.emplace_back();
            out.psi_a.push_back(tape.concat(a_parts));
            out.psi_a_norm.push_back(tape.softmax(out.psi_a.back()));
        }

        if (flags_.use_kb) {
            out.rel = flags_.re_mode == ReMode::coarse2fine
                          ? coarse_to_fine_scores(tape, store, relex_cfg_, out.mentions, out.H,
                                                  flags_.signed_relation_scores, drop)
                          : bilinear_relation_scores(tape, store, relex_cfg_, out.mentions,
                                                     flags_.signed_relation_scores);
            out.facts = gather_fact_tensor(art_->fact_index, art_->rel_vocab, out.cands, flags_);
            auto so = subject_object_scores(tape, out.rel, out.facts, out.psi_a_norm);
            out.psi_s = std::move(so.psi_s);
            out.psi_o = std::move(so.psi_o);
            for (std::size_t s = 0; s < out.scored.size(); ++s)
                out.psi_b.push_back(kb_combine(tape, store, out.psi_s[s], out.psi_o[s]));
        } else {
            for (std::size_t s = 0; s < out.scored.size(); ++s) {
                const auto c = out.cands[s].candidates.size();
                out.psi_s.push_back(Tensor::zeros({c}));
                out.psi_o.push_back(Tensor::zeros({c}));
                out.psi_b.push_back(Tensor::zeros({c}));
            }
        }
        for (std::size_t s = 0; s < out.scored.size(); ++s)
            out.psi_f.push_back(final_score(tape, out.psi_a[s], out.psi_b[s]));
        return out;
    }

private:
    void init_params() {
        Rng rng(cfg_.init_seed);
        init_encoder_params(params_, "enc", enc_cfg_, cfg_.n_layers, rng);
        init_encoder_params(params_, "desc", enc_cfg_, cfg_.desc_n_layers, rng);
        ScoringConfig sc;
        sc.d_model = cfg_.d_model;
        sc.task_hidden = cfg_.task_hidden;
        sc.type_vocab_size = art_->type_vocab.size();
        init_scoring_params(params_, sc, flags_.use_task_hidden, rng);
        init_relex_params(params_, relex_cfg_, flags_.re_mode, rng);
        init_kb_score_params(params_);
    }

    std::shared_ptr<ModelArtifacts> art_;
    ModelConfig cfg_;
    AblationFlags flags_;
    EncoderConfig enc_cfg_;
    RelexConfig relex_cfg_;
    ParameterStore params_;
};

}  // namespace kblink
