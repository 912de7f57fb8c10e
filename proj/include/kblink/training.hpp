#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kblink/error.hpp"
#include "kblink/evaluation.hpp"
#include "kblink/model.hpp"
#include "kblink/rng.hpp"

namespace kblink {

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 8;
    std::size_t max_steps = 500;
    double dropout = 0.05;
    std::size_t max_mentions = 30;   // per-document mention cap during training
    std::size_t max_candidates = 5;  // per-mention candidate cap (gold kept)
    std::size_t eval_every = 50;     // dev-set cadence in steps; 0 disables
    std::uint64_t seed = 1;

    void validate() const {
        if (!(lr > 0.0)) throw validation_error("train: lr must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw validation_error("train: adam betas must lie in [0, 1)");
        if (!(adam_eps > 0.0)) throw validation_error("train: adam_eps must be positive");
        if (batch_size == 0) throw validation_error("train: batch_size must be positive");
        if (dropout < 0.0 || dropout >= 1.0)
            throw validation_error("train: dropout outside [0, 1)");
        if (max_mentions == 0) throw validation_error("train: max_mentions must be positive");
        if (max_candidates == 0)
            throw validation_error("train: max_candidates must be positive");
    }
};

inline nlohmann::json train_config_json(const TrainConfig& c) {
    nlohmann::json j;
    j["lr"] = c.lr;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["batch_size"] = c.batch_size;
    j["max_steps"] = c.max_steps;
    j["dropout"] = c.dropout;
    j["max_mentions"] = c.max_mentions;
    j["max_candidates"] = c.max_candidates;
    j["eval_every"] = c.eval_every;
    j["seed"] = c.seed;
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "lr") c.lr = value.get<double>();
        else if (key == "beta1") c.beta1 = value.get<double>();
        else if (key == "beta2") c.beta2 = value.get<double>();
        else if (key == "adam_eps") c.adam_eps = value.get<double>();
        else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
        else if (key == "max_steps") c.max_steps = value.get<std::size_t>();
        else if (key == "dropout") c.dropout = value.get<double>();
        else if (key == "max_mentions") c.max_mentions = value.get<std::size_t>();
        else if (key == "max_candidates") c.max_candidates = value.get<std::size_t>();
        else if (key == "eval_every") c.eval_every = value.get<std::size_t>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else throw validation_error("train config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

inline void save_train_config(const TrainConfig& c, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open for write: " + path);
    os << train_config_json(c).dump(2) << '\n';
    if (!os) throw io_error("write failed: " + path);
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open for read: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(path + ": " + e.what());
    }
    return train_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Optimizer

// Adam with bias correction. State lives in name-keyed maps so the update
// order (and therefore the trained model) is independent of insertion order.
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    std::size_t steps_taken() const { return t_; }

    void step(ParameterStore& params, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& [name, tensor] : params) {
            const auto& g = tensor.grad();
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(g.size(), 0.0);
                v.assign(g.size(), 0.0);
            }
            auto& x = tensor.mutable_values();
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                x[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            }
        }
    }

private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Document subsampling

// Builds preset candidate sets honoring the training caps. At most
// max_mentions mentions keep their candidates (uniform sample without
// replacement, ascending order); the rest get empty sets and drop out of the
// forward pass. Candidate lists are cut to max_candidates, always retaining
// the gold entity when the full list had it and otherwise keeping the
// highest-prior candidates in their original order.
inline std::vector<CandidateSet> subsample_document(Model& model, const Document& doc,
                                                    std::size_t max_mentions,
                                                    std::size_t max_candidates, Rng& rng) {
    auto sets = model.make_candidates(doc);
    if (doc.mentions.size() > max_mentions) {
        const auto keep = rng.sample_indices(doc.mentions.size(), max_mentions);
        std::vector<bool> kept(doc.mentions.size(), false);
        for (auto i : keep) kept[i] = true;
        for (std::size_t i = 0; i < sets.size(); ++i)
            if (!kept[i]) sets[i].candidates.clear();
    }
    for (std::size_t i = 0; i < sets.size(); ++i) {
        auto& set = sets[i];
        if (set.candidates.size() <= max_candidates) continue;
        const auto gold = doc.mentions[i].gold;
        std::size_t gold_at = set.candidates.size();
        if (set.gold_present)
            for (std::size_t k = 0; k < set.candidates.size(); ++k)
                if (set.candidates[k].entity == static_cast<EntityId>(gold)) gold_at = k;
        std::vector<Candidate> cut;
        cut.reserve(max_candidates);
        if (gold_at < set.candidates.size() && gold_at >= max_candidates) {
            for (std::size_t k = 0; k + 1 < max_candidates; ++k)
                cut.push_back(set.candidates[k]);
            cut.push_back(set.candidates[gold_at]);
        } else {
            for (std::size_t k = 0; k < max_candidates; ++k)
                cut.push_back(set.candidates[k]);
        }
        set.candidates = std::move(cut);
    }
    return sets;
}

// ---------------------------------------------------------------------------
// Loss

struct DocLoss {
    Tensor loss;              // scalar; constant zero when nothing was scored
    std::size_t n_terms = 0;  // gold-supervised mentions that contributed
};

// Mean cross-entropy of the final scores over mentions whose candidate set
// contains the gold entity. Mentions without gold coverage contribute nothing.
inline DocLoss ed_loss(Tape& tape, const DocScores& out, const Document& doc) {
    std::vector<Tensor> terms;
    for (std::size_t s = 0; s < out.scored.size(); ++s) {
        const auto& m = doc.mentions[out.scored[s]];
        if (!m.has_gold() || !out.cands[s].gold_present) continue;
        const auto& cands = out.cands[s].candidates;
        std::size_t gold_idx = cands.size();
        for (std::size_t k = 0; k < cands.size(); ++k)
            if (cands[k].entity == static_cast<EntityId>(m.gold)) gold_idx = k;
        if (gold_idx == cands.size())
            throw contract_error("ed_loss: gold_present set but gold missing in document " +
                                 doc.id);
        terms.push_back(tape.cross_entropy(out.psi_f[s], gold_idx));
    }
    DocLoss result;
    result.n_terms = terms.size();
    if (terms.empty())
        result.loss = Tensor::scalar(0.0);
    else
        result.loss = tape.scale(tape.add_n(terms), 1.0 / static_cast<double>(terms.size()));
    return result;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    std::size_t steps = 0;
    double final_loss = 0.0;
    double final_dev_f1 = 0.0;
    std::string checkpoint_path;
};

// Runs up to cfg.max_steps optimizer updates (one per document batch) with a
// linearly decaying learning rate and writes three artifacts into out_dir:
// config.json, metrics.jsonl (one record per step, dev F1 on eval steps), and
// model.ckpt. All randomness (epoch shuffles, subsampling, dropout) draws
// from one generator seeded with cfg.seed.
inline TrainResult train(Model& model, const std::vector<Document>& train_docs,
                         const std::vector<Document>& dev_docs, const TrainConfig& cfg,
                         const std::string& out_dir) {
    cfg.validate();
    if (train_docs.empty()) throw validation_error("train: no training documents");
    std::filesystem::create_directories(out_dir);
    save_train_config(cfg, out_dir + "/config.json");
    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::trunc);
    if (!metrics) throw io_error("cannot open for write: " + out_dir + "/metrics.jsonl");

    // A model with the KB pathway ablated never touches the mixing weights,
    // so their gradients stay zero; clearing them keeps the checkpoint free
    // of dead initializer values.
    if (!model.flags().use_kb) {
        model.params().get("kb.w3").mutable_values()[0] = 0.0;
        model.params().get("kb.w4").mutable_values()[0] = 0.0;
    }

    Rng rng(cfg.seed);
    Adam opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
    TrainResult result;
    result.checkpoint_path = out_dir + "/model.ckpt";

    auto evaluate_dev = [&]() {
        if (dev_docs.empty()) return 0.0;
        return micro_f1(predict(model, dev_docs)).micro_f1();
    };

    std::vector<std::size_t> order(train_docs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();  // forces a shuffle on first use

    for (std::size_t step = 0; step < cfg.max_steps; ++step) {
        std::vector<Tensor> batch_terms;
        Tape tape;
        DropoutCtx drop{cfg.dropout, cfg.dropout > 0.0, &rng};
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            const auto& doc = train_docs[order[cursor++]];
            const auto presets =
                subsample_document(model, doc, cfg.max_mentions, cfg.max_candidates, rng);
            const auto out = model.forward(tape, doc, drop, &presets);
            const auto dl = ed_loss(tape, out, doc);
            if (!std::isfinite(dl.loss.scalar_value()))
                throw numeric_error("non-finite loss on document " + doc.id + " at step " +
                                    std::to_string(step));
            if (dl.n_terms > 0) batch_terms.push_back(dl.loss);
        }
        double loss_value = 0.0;
        const double lr =
            cfg.lr * static_cast<double>(cfg.max_steps - step) / static_cast<double>(cfg.max_steps);
        if (!batch_terms.empty()) {
            const Tensor loss = tape.scale(tape.add_n(batch_terms),
                                           1.0 / static_cast<double>(batch_terms.size()));
            loss_value = loss.scalar_value();
            tape.backward(loss);
            opt.step(model.params(), lr);
            model.params().zero_grads();
        }
        result.steps = step + 1;
        result.final_loss = loss_value;

        nlohmann::json rec;
        rec["step"] = step;
        rec["loss"] = loss_value;
        rec["lr"] = lr;
        const bool eval_now =
            cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps);
        if (eval_now) {
            result.final_dev_f1 = evaluate_dev();
            rec["dev_f1"] = result.final_dev_f1;
        }
        metrics << rec.dump() << '\n';
    }
    if (cfg.max_steps == 0 || cfg.eval_every == 0) result.final_dev_f1 = evaluate_dev();

    metrics.flush();
    if (!metrics) throw io_error("write failed: " + out_dir + "/metrics.jsonl");
    model.params().save(result.checkpoint_path);
    return result;
}

}  // namespace kblink
