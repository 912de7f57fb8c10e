#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "kblink/corpus.hpp"
#include "kblink/error.hpp"
#include "kblink/params.hpp"
#include "kblink/tensor.hpp"

namespace kblink {

struct EncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t max_seq_len = 512;
    std::size_t desc_n_layers = 2;
    std::size_t desc_max_tokens = 32;

    void validate() const {
        if (vocab_size == 0) throw validation_error("encoder: vocab_size must be positive");
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
            throw validation_error("encoder: d_model " + std::to_string(d_model) +
                                   " not divisible by n_heads " + std::to_string(n_heads));
        if (max_seq_len == 0) throw validation_error("encoder: max_seq_len must be positive");
    }
};

// Column-wise concatenation of rank-2 tensors, built from row ops.
inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.size() == 1) return parts[0];
    std::vector<Tensor> transposed;
    transposed.reserve(parts.size());
    for (const auto& p : parts) transposed.push_back(tape.transpose(p));
    return tape.transpose(tape.concat(transposed));
}

inline void init_transformer_layer(ParameterStore& store, const std::string& prefix,
                                   std::size_t d_model, Rng& rng, double stddev) {
    const std::size_t ff = 4 * d_model;
    for (const char* w : {"wq", "wk", "wv", "wo"})
        store.declare_normal(prefix + "." + w, {d_model, d_model}, rng, stddev);
    for (const char* b : {"bq", "bk", "bv", "bo"})
        store.declare_full(prefix + "." + b, {d_model}, 0.0);
    store.declare_normal(prefix + ".w1", {d_model, ff}, rng, stddev);
    store.declare_full(prefix + ".b1", {ff}, 0.0);
    store.declare_normal(prefix + ".w2", {ff, d_model}, rng, stddev);
    store.declare_full(prefix + ".b2", {d_model}, 0.0);
    store.declare_full(prefix + ".ln1_g", {d_model}, 1.0);
    store.declare_full(prefix + ".ln1_b", {d_model}, 0.0);
    store.declare_full(prefix + ".ln2_g", {d_model}, 1.0);
    store.declare_full(prefix + ".ln2_b", {d_model}, 0.0);
}

inline void init_encoder_params(ParameterStore& store, const std::string& prefix,
                                const EncoderConfig& cfg, std::size_t n_layers, Rng& rng,
                                double stddev = 0.02) {
    cfg.validate();
    store.declare_normal(prefix + ".tok_emb", {cfg.vocab_size, cfg.d_model}, rng, stddev);
    store.declare_normal(prefix + ".pos_emb", {cfg.max_seq_len, cfg.d_model}, rng, stddev);
    for (std::size_t l = 0; l < n_layers; ++l)
        init_transformer_layer(store, prefix + ".l" + std::to_string(l), cfg.d_model, rng,
                               stddev);
}

// One post-LN block. Queries come from x, keys/values from kv, so the same
// code serves self-attention (kv = x) and cross-attention.
inline Tensor transformer_layer(Tape& tape, ParameterStore& store, const std::string& prefix,
                                const Tensor& x, const Tensor& kv, std::size_t n_heads,
                                const DropoutCtx& drop) {
    const std::size_t d_model = x.shape()[1];
    const std::size_t dh = d_model / n_heads;
    Tensor q = tape.add(tape.matmul(x, store.get(prefix + ".wq")), store.get(prefix + ".bq"));
    Tensor k = tape.add(tape.matmul(kv, store.get(prefix + ".wk")), store.get(prefix + ".bk"));
    Tensor v = tape.add(tape.matmul(kv, store.get(prefix + ".wv")), store.get(prefix + ".bv"));

    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
        Tensor attn = tape.softmax(tape.scale(tape.matmul(qh, tape.transpose(kh)), scale));
        heads.push_back(tape.matmul(tape.dropout(attn, drop), vh));
    }
    Tensor o = tape.add(tape.matmul(concat_cols(tape, heads), store.get(prefix + ".wo")),
                        store.get(prefix + ".bo"));
    Tensor x1 = tape.layer_norm(tape.add(x, tape.dropout(o, drop)),
                                store.get(prefix + ".ln1_g"), store.get(prefix + ".ln1_b"));

    Tensor f = tape.add(
        tape.matmul(tape.gelu(tape.add(tape.matmul(x1, store.get(prefix + ".w1")),
                                       store.get(prefix + ".b1"))),
                    store.get(prefix + ".w2")),
        store.get(prefix + ".b2"));
    return tape.layer_norm(tape.add(x1, tape.dropout(f, drop)), store.get(prefix + ".ln2_g"),
                           store.get(prefix + ".ln2_b"));
}

inline Tensor run_transformer(Tape& tape, ParameterStore& store, const std::string& prefix,
                              std::size_t n_layers, std::size_t n_heads, const Tensor& x0,
                              const DropoutCtx& drop) {
    Tensor x = x0;
    for (std::size_t l = 0; l < n_layers; ++l)
        x = transformer_layer(tape, store, prefix + ".l" + std::to_string(l), x, x, n_heads,
                              drop);
    return x;
}

// Contextual token embeddings H for one document: token + learned position
// embeddings through the self-attention stack.
inline Tensor encode_document(Tape& tape, ParameterStore& store, const EncoderConfig& cfg,
                              const std::string& prefix, const std::vector<std::uint32_t>& ids,
                              const DropoutCtx& drop, std::size_t n_layers) {
    if (ids.empty()) throw length_error("encode_document: empty token sequence");
    if (ids.size() > cfg.max_seq_len)
        throw length_error("encode_document: " + std::to_string(ids.size()) +
                           " tokens exceed max_seq_len " + std::to_string(cfg.max_seq_len));
    Tensor x = tape.add(tape.embedding(store.get(prefix + ".tok_emb"), ids),
                        tape.slice_rows(store.get(prefix + ".pos_emb"), 0, ids.size()));
    return run_transformer(tape, store, prefix, n_layers, cfg.n_heads, tape.dropout(x, drop),
                           drop);
}

// Mention embedding m_i: arithmetic mean of the span's contextual rows.
inline Tensor pool_mention(Tape& tape, const Tensor& H, std::size_t start, std::size_t end) {
    if (start >= end || end > H.shape()[0])
        throw span_error("pool_mention: span [" + std::to_string(start) + ", " +
                         std::to_string(end) + ") out of " + std::to_string(H.shape()[0]) +
                         " rows");
    return tape.mean_rows(tape.slice_rows(H, start, end));
}

// Maps label/description text onto token ids with CLS/SEP/UNK specials for
// the description bi-encoder.
struct DescTokenizer {
    TokenVocab vocab;  // extended copy: base vocabulary plus specials
    std::uint32_t cls_id = 0;
    std::uint32_t sep_id = 0;
    std::uint32_t unk_id = 0;

    static DescTokenizer build(const TokenVocab& base) {
        DescTokenizer t;
        t.vocab = base;
        t.cls_id = t.vocab.intern("[CLS]");
        t.sep_id = t.vocab.intern("[SEP]");
        t.unk_id = t.vocab.intern("[UNK]");
        return t;
    }

    std::uint32_t id_or_unk(const std::string& token) const {
        try {
            return vocab.id_of(token);
        } catch (const contract_error&) {
            return unk_id;
        }
    }

    // [CLS] label [SEP] description [SEP], whitespace-tokenized, truncated.
    std::vector<std::uint32_t> encode(const std::string& label, const std::string& description,
                                      std::size_t max_tokens) const {
        std::vector<std::uint32_t> ids{cls_id};
        std::istringstream ls(label);
        std::string tok;
        while (ls >> tok) ids.push_back(id_or_unk(tok));
        ids.push_back(sep_id);
        std::istringstream ds(description);
        while (ds >> tok) ids.push_back(id_or_unk(tok));
        ids.push_back(sep_id);
        if (ids.size() > max_tokens) ids.resize(max_tokens);
        return ids;
    }
};

// TR1: description bi-encoder; returns the first-position ([CLS]) embedding.
inline Tensor encode_description(Tape& tape, ParameterStore& store, const EncoderConfig& cfg,
                                 const std::string& prefix, const DescTokenizer& tok,
                                 const std::string& label, const std::string& description,
                                 const DropoutCtx& drop) {
    const auto ids = tok.encode(label, description, cfg.desc_max_tokens);
    Tensor h = encode_document(tape, store, cfg, prefix, ids, drop, cfg.desc_n_layers);
    return tape.row(h, 0);
}

}  // namespace kblink
