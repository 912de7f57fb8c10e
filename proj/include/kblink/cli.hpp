#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kblink/error.hpp"
#include "kblink/evaluation.hpp"
#include "kblink/gradcheck.hpp"
#include "kblink/model.hpp"
#include "kblink/run_config.hpp"
#include "kblink/training.hpp"
#include "kblink/world.hpp"

namespace kblink {
namespace cli {

// ---------------------------------------------------------------------------
// Shared plumbing

struct WorldData {
    KnowledgeBase kb;
    PemTable pem;
    TokenVocab tokens;
    std::vector<Document> train, dev, test;
    nlohmann::json manifest;
};

inline WorldData load_world_dir(const std::string& dir) {
    WorldData w;
    w.kb = load_kb(dir + "/entities.tsv", dir + "/facts.tsv");
    w.pem = load_pem(dir + "/pem.tsv");
    w.tokens = TokenVocab::load(dir + "/vocab.tsv");
    w.train = load_documents(dir + "/train.jsonl");
    w.dev = load_documents(dir + "/dev.jsonl");
    w.test = load_documents(dir + "/test.jsonl");
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw io_error("cannot open for read: " + dir + "/manifest.json");
    try {
        is >> w.manifest;
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(dir + "/manifest.json: " + e.what());
    }
    return w;
}

inline const std::vector<Document>& pick_split(const WorldData& w, const std::string& split) {
    if (split == "train") return w.train;
    if (split == "dev") return w.dev;
    if (split == "test") return w.test;
    throw validation_error("unknown split '" + split + "' (expected train, dev, or test)");
}

inline std::vector<Document> all_documents(const WorldData& w) {
    std::vector<Document> all;
    for (const auto* s : {&w.train, &w.dev, &w.test}) all.insert(all.end(), s->begin(), s->end());
    return all;
}

// Mention refs from the manifest ("fact_dependent" / "coref_dependent").
inline std::set<MentionKey> manifest_subset(const nlohmann::json& manifest,
                                            const std::string& key) {
    if (!manifest.contains(key))
        throw validation_error("manifest has no '" + key + "' mention list");
    std::set<MentionKey> out;
    for (const auto& ref : manifest.at(key))
        out.insert({ref.at("doc").get<std::string>(), ref.at("mention").get<std::size_t>()});
    return out;
}

// Type examples for greedy vocabulary selection: each supervised training
// mention with an ambiguous candidate set contributes its gold entity and the
// competing candidates.
inline std::vector<TypeExample> type_examples(const PemTable& pem,
                                              const std::vector<Document>& docs,
                                              std::size_t n_candidates) {
    std::vector<TypeExample> examples;
    for (const auto& doc : docs)
        for (const auto& m : doc.mentions) {
            if (!m.has_gold()) continue;
            const auto set = candidates_for(pem, m.surface, n_candidates, m.gold);
            if (set.candidates.size() < 2 || !set.gold_present) continue;
            TypeExample ex;
            ex.gold = static_cast<EntityId>(m.gold);
            for (const auto& c : set.candidates)
                if (c.entity != ex.gold) ex.negatives.push_back(c.entity);
            examples.push_back(std::move(ex));
        }
    return examples;
}

// ---------------------------------------------------------------------------
// gen-world

inline int cmd_gen_world(const WorldSpec& spec, const std::string& out, std::ostream& os) {
    const auto world = generate_world(spec);
    write_world(world, out);
    nlohmann::json j;
    j["out"] = out;
    j["documents"] = spec.n_documents;
    j["entities"] = spec.n_entities;
    j["facts"] = world.kb.facts.size();
    j["fact_dependent_mentions"] = world.fact_dependent.size();
    j["coref_dependent_mentions"] = world.coref_dependent.size();
    os << j.dump() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// build-kb / build-pem / dump-facts

inline int cmd_build_kb(const std::string& entities, const std::string& facts,
                        const std::string& out, std::ostream& os) {
    auto kb = load_kb(entities, facts);
    canonicalize_relations(kb);
    std::filesystem::create_directories(out);
    save_kb(kb, out + "/entities.tsv", out + "/facts.tsv");
    nlohmann::json j;
    j["out"] = out;
    j["entities"] = kb.n_entities();
    j["facts"] = kb.facts.size();
    j["relations"] = kb.n_relations();
    os << j.dump() << '\n';
    return 0;
}

inline int cmd_build_pem(const std::string& aliases, const std::string& out,
                         std::ostream& os) {
    const auto pem = load_pem(aliases);
    if (const auto parent = std::filesystem::path(out).parent_path(); !parent.empty())
        std::filesystem::create_directories(parent);
    save_pem(pem, out);
    nlohmann::json j;
    j["out"] = out;
    j["aliases"] = pem.alias_count();
    os << j.dump() << '\n';
    return 0;
}

inline int cmd_dump_facts(const std::string& world_dir, std::int64_t subject,
                          std::int64_t object, std::size_t max_relations, std::ostream& os) {
    const auto kb = load_kb(world_dir + "/entities.tsv", world_dir + "/facts.tsv");
    const auto vocab = build_relation_vocab(kb, max_relations);
    if (subject < 0 || static_cast<std::size_t>(subject) >= kb.n_entities())
        throw range_error("entity id " + std::to_string(subject) + " out of " +
                          std::to_string(kb.n_entities()));
    const auto s = static_cast<EntityId>(subject);
    if (object >= 0) {
        if (static_cast<std::size_t>(object) >= kb.n_entities())
            throw range_error("entity id " + std::to_string(object) + " out of " +
                              std::to_string(kb.n_entities()));
        const SparseFactIndex index(kb, vocab);
        const auto bits = index.lookup(s, static_cast<EntityId>(object));
        nlohmann::json j;
        j["subject"] = subject;
        j["object"] = object;
        auto classes = nlohmann::json::array();
        for (auto c : bits.set_bits()) classes.push_back(vocab.class_name(c, kb));
        j["classes"] = std::move(classes);
        os << j.dump() << '\n';
        return 0;
    }
    for (const auto& f : kb.facts) {
        if (f.subject != s) continue;
        nlohmann::json j;
        j["subject"] = f.subject;
        j["relation"] = kb.relation_names[f.relation];
        j["class"] = vocab.class_name(vocab.class_of(f.relation), kb);
        j["object"] = f.object;
        os << j.dump() << '\n';
    }
    return 0;
}

// ---------------------------------------------------------------------------
// candidate-recall

inline int cmd_candidate_recall(const std::string& world_dir, const std::string& split,
                                std::size_t n, std::ostream& os) {
    const auto w = load_world_dir(world_dir);
    const auto docs = split == "all" ? all_documents(w) : pick_split(w, split);
    const double recall = candidate_recall(w.pem, docs, n);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", recall);
    os << buf << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// train

inline std::shared_ptr<ModelArtifacts> build_artifacts(const WorldData& w, TypeVocab vocab,
                                                       std::size_t max_relations) {
    return std::make_shared<ModelArtifacts>(
        ModelArtifacts::build(w.kb, w.pem, w.tokens, std::move(vocab), max_relations));
}

inline int cmd_train(const std::string& world_dir, const std::string& out,
                     const TrainConfig& tcfg, const RunConfig& rc, std::ostream& os) {
    const auto w = load_world_dir(world_dir);
    const auto vocab = select_type_vocab(
        w.kb, type_examples(w.pem, w.train, rc.model.n_candidates), rc.type_budget);
    auto art = build_artifacts(w, vocab, rc.max_standard_relations);

    Model model(art, rc.model, rc.flags);
    const auto result = train(model, w.train, w.dev, tcfg, out);
    save_run_config(rc, out + "/run.json");
    save_type_vocab(vocab, art->kb, out + "/type_vocab.tsv");

    nlohmann::json j;
    j["out"] = out;
    j["steps"] = result.steps;
    j["final_loss"] = result.final_loss;
    j["dev_f1"] = result.final_dev_f1;
    j["checkpoint"] = result.checkpoint_path;
    j["type_vocab_size"] = vocab.size();
    os << j.dump() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// eval / analyze-relations

inline Model load_run_model(const WorldData& w, const std::string& run_dir,
                            const std::vector<std::string>& ablations,
                            std::shared_ptr<ModelArtifacts>* artifacts_out = nullptr) {
    const auto rc = load_run_config(run_dir + "/run.json");
    auto art = build_artifacts(w, load_type_vocab(w.kb, run_dir + "/type_vocab.tsv"),
                               rc.max_standard_relations);
    if (artifacts_out) *artifacts_out = art;
    Model model(art, rc.model, rc.flags);
    model.params().load(run_dir + "/model.ckpt");
    if (!ablations.empty()) {
        AblationFlags flags = rc.flags;
        for (const auto& name : ablations) apply_ablation(flags, name);
        model.set_flags(flags);
    }
    return model;
}

inline int cmd_eval(const std::string& world_dir, const std::string& run_dir,
                    const std::string& split, const std::string& out_dir,
                    const std::string& subset, const std::vector<std::string>& ablations,
                    std::ostream& os) {
    const auto w = load_world_dir(world_dir);
    Model model = load_run_model(w, run_dir, ablations);
    const auto& docs = pick_split(w, split);
    const auto preds = predict(model, docs);

    std::filesystem::create_directories(out_dir);
    write_predictions(preds, docs, out_dir + "/predictions.jsonl");

    const auto overall = micro_f1(preds);
    nlohmann::json j;
    j["split"] = split;
    j["n_gold"] = overall.n_gold;
    j["n_predicted"] = overall.n_predicted;
    j["n_correct"] = overall.n_correct;
    j["precision"] = overall.precision();
    j["recall"] = overall.recall();
    j["micro_f1"] = overall.micro_f1();
    j["predictions"] = out_dir + "/predictions.jsonl";
    if (!subset.empty()) {
        const auto keys = manifest_subset(w.manifest, subset);
        const auto sub = micro_f1(preds, &keys);
        nlohmann::json sj;
        sj["name"] = subset;
        sj["n_gold"] = sub.n_gold;
        sj["n_correct"] = sub.n_correct;
        sj["micro_f1"] = sub.micro_f1();
        j["subset"] = std::move(sj);
    }
    os << j.dump() << '\n';
    return 0;
}

inline int cmd_analyze_relations(const std::string& world_dir, const std::string& run_dir,
                                 const std::string& split, const std::string& out_file,
                                 const std::vector<std::string>& ablations, std::ostream& os) {
    const auto w = load_world_dir(world_dir);
    Model model = load_run_model(w, run_dir, ablations);
    const auto rows = relation_analysis(model, pick_split(w, split));
    if (!out_file.empty()) write_relation_analysis(rows, out_file);
    os << "relation\tgold\tpredicted\trecall\n";
    char buf[32];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.4f", r.recall());
        os << r.name << '\t' << r.n_gold << '\t' << r.n_hit << '\t' << buf << '\n';
    }
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck fixtures, one per module

inline GradCheckReport gradcheck_tensor(std::uint64_t seed, std::size_t coords) {
    ParameterStore store;
    Rng rng(seed);
    store.declare_normal("a", {3, 4}, rng, 0.5);
    store.declare_normal("b", {4, 2}, rng, 0.5);
    store.declare_full("ln_g", {2}, 1.0);
    store.declare_full("ln_b", {2}, 0.0);
    auto loss_fn = [&](bool want_grad) {
        Tape tape;
        Tensor x = tape.matmul(store.get("a"), store.get("b"));
        Tensor ln = tape.layer_norm(x, store.get("ln_g"), store.get("ln_b"));
        Tensor loss = tape.cross_entropy(tape.reshape(ln, {6}), 1);
        if (want_grad) tape.backward(loss);
        return loss.scalar_value();
    };
    return finite_diff_check(loss_fn, store, seed + 1, coords);
}

inline GradCheckReport gradcheck_encoder(std::uint64_t seed, std::size_t coords) {
    ParameterStore store;
    Rng rng(seed);
    EncoderConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 16;
    cfg.desc_n_layers = 1;
    cfg.desc_max_tokens = 6;
    init_encoder_params(store, "enc", cfg, cfg.n_layers, rng);
    const std::vector<std::uint32_t> ids{1, 3, 5, 2};
    auto loss_fn = [&](bool want_grad) {
        Tape tape;
        Tensor h = encode_document(tape, store, cfg, "enc", ids, DropoutCtx{}, cfg.n_layers);
        Tensor loss = tape.cross_entropy(tape.reshape(h, {ids.size() * cfg.d_model}), 3);
        if (want_grad) tape.backward(loss);
        return loss.scalar_value();
    };
    return finite_diff_check(loss_fn, store, seed + 1, coords);
}

inline GradCheckReport gradcheck_scoring(std::uint64_t seed, std::size_t coords) {
    ParameterStore store;
    Rng rng(seed);
    ScoringConfig cfg;
    cfg.d_model = 6;
    cfg.task_hidden = 4;
    cfg.type_vocab_size = 5;
    init_scoring_params(store, cfg, true, rng);
    store.declare_normal("fx.m", {6}, rng, 0.5);
    store.declare_normal("fx.desc1", {6}, rng, 0.5);
    store.declare_normal("fx.desc2", {6}, rng, 0.5);
    BitVec bits1(5), bits2(5);
    bits1.set(0);
    bits1.set(3);
    bits2.set(2);
    auto loss_fn = [&](bool want_grad) {
        Tape tape;
        const Tensor& m = store.get("fx.m");
        Tensor logits = type_logits(tape, store, m, true);
        Tensor query = desc_query(tape, store, m, true);
        Tensor t1 = type_score(tape, logits, bits1, 0.25, true);
        Tensor t2 = type_score(tape, logits, bits2, 0.75, true);
        Tensor d1 = description_score(tape, query, store.get("fx.desc1"));
        Tensor d2 = description_score(tape, query, store.get("fx.desc2"));
        Tensor a1 = initial_score(tape, store, &t1, &d1);
        Tensor a2 = initial_score(tape, store, &t2, &d2);
        Tensor loss = tape.cross_entropy(tape.concat({a1, a2}), 0);
        if (want_grad) tape.backward(loss);
        return loss.scalar_value();
    };
    return finite_diff_check(loss_fn, store, seed + 1, coords);
}

inline GradCheckReport gradcheck_relex(std::uint64_t seed, std::size_t coords) {
    ParameterStore store;
    Rng rng(seed);
    RelexConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.top_k = 600;
    cfg.n_relations = 4;
    init_relex_params(store, cfg, ReMode::coarse2fine, rng);
    store.declare_normal("fx.mentions", {3, 8}, rng, 0.5);
    store.declare_normal("fx.H", {5, 8}, rng, 0.5);
    const std::vector<std::size_t> all_classes{0, 1, 2, 3};
    auto loss_fn = [&](bool want_grad) {
        Tape tape;
        const auto rs = coarse_to_fine_scores(tape, store, cfg, store.get("fx.mentions"),
                                              store.get("fx.H"), false, DropoutCtx{});
        std::vector<Tensor> terms;
        for (const auto& [pair, vec] : rs.combined)
            terms.push_back(tape.index_sum(vec, all_classes));
        Tensor loss = tape.add_n(terms);
        if (want_grad) tape.backward(loss);
        return loss.scalar_value();
    };
    return finite_diff_check(loss_fn, store, seed + 1, coords);
}

inline GradCheckReport gradcheck_kb_score(std::uint64_t seed, std::size_t coords) {
    ParameterStore store;
    Rng rng(seed);
    init_kb_score_params(store);
    for (const char* name : {"fx.rel.0.1", "fx.rel.1.2", "fx.rel.2.0"})
        store.declare_normal(name, {3}, rng, 0.5);
    for (const char* name : {"fx.psi.0", "fx.psi.1", "fx.psi.2"})
        store.declare_normal(name, {2}, rng, 0.5);

    FactTensor facts;
    facts.n_mentions = 3;
    facts.candidate_counts = {2, 2, 2};
    facts.relation_width = 3;
    auto bv = [](std::initializer_list<std::size_t> on) {
        BitVec b(3);
        for (auto c : on) b.set(c);
        return b;
    };
    facts.entries.push_back({0, 1, 0, 1, bv({0})});
    facts.entries.push_back({0, 1, 1, 0, bv({1, 2})});
    facts.entries.push_back({1, 2, 0, 0, bv({2})});
    facts.entries.push_back({2, 0, 1, 1, bv({0, 1})});

    const std::vector<std::size_t> all_classes{0, 1};
    auto loss_fn = [&](bool want_grad) {
        Tape tape;
        RelationScores rel;
        rel.coarse = Tensor::zeros({3, 3});
        rel.relation_width = 3;
        for (const auto& [i, j] : {std::pair<std::size_t, std::size_t>{0, 1}, {1, 2}, {2, 0}}) {
            const std::string name =
                "fx.rel." + std::to_string(i) + "." + std::to_string(j);
            rel.kept_pairs.emplace_back(i, j);
            rel.combined.emplace(MentionPair{i, j}, tape.sigmoid(store.get(name)));
        }
        std::vector<Tensor> psi;
        for (std::size_t i = 0; i < 3; ++i)
            psi.push_back(tape.softmax(store.get("fx.psi." + std::to_string(i))));
        const auto so = subject_object_scores(tape, rel, facts, psi);
        std::vector<Tensor> terms;
        for (std::size_t i = 0; i < 3; ++i)
            terms.push_back(
                tape.index_sum(kb_combine(tape, store, so.psi_s[i], so.psi_o[i]), all_classes));
        Tensor loss = tape.add_n(terms);
        if (want_grad) tape.backward(loss);
        return loss.scalar_value();
    };
    return finite_diff_check(loss_fn, store, seed + 1, coords);
}

inline GradCheckReport gradcheck_model(std::uint64_t seed, std::size_t coords) {
    WorldSpec spec;
    spec.n_entities = 12;
    spec.n_relations = 2;
    spec.n_types = 2;
    spec.ambiguity = 2;
    spec.facts_per_entity = 1;
    spec.n_documents = 3;
    spec.mentions_per_document = 4;
    spec.fact_dependence_rate = 0.5;
    spec.seed = seed;
    const auto w = generate_world(spec);
    auto art = std::make_shared<ModelArtifacts>(
        ModelArtifacts::build(w.kb, w.pem, w.tokens, TypeVocab{}, 8));

    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.desc_n_layers = 1;
    cfg.desc_max_tokens = 6;
    cfg.task_hidden = 4;
    cfg.relex_n_layers = 1;
    cfg.top_k = 600;
    cfg.n_candidates = 5;
    cfg.init_seed = seed + 1;
    Model model(art, cfg, AblationFlags{});
    const Document& doc = w.train.front();

    auto loss_fn = [&](bool want_grad) {
        Tape tape;
        const auto out = model.forward(tape, doc, DropoutCtx{});
        const auto dl = ed_loss(tape, out, doc);
        if (dl.n_terms == 0) throw contract_error("gradcheck model: no supervised mentions");
        if (want_grad) tape.backward(dl.loss);
        return dl.loss.scalar_value();
    };
    return finite_diff_check(loss_fn, model.params(), seed + 2, coords);
}

inline int cmd_gradcheck(const std::string& module, std::uint64_t seed, std::size_t coords,
                         double threshold, std::ostream& os) {
    struct Entry {
        const char* name;
        GradCheckReport (*run)(std::uint64_t, std::size_t);
    };
    const Entry entries[] = {
        {"tensor", gradcheck_tensor},     {"encoder", gradcheck_encoder},
        {"scoring", gradcheck_scoring},   {"relex", gradcheck_relex},
        {"kb-score", gradcheck_kb_score}, {"model", gradcheck_model},
    };
    bool found = false;
    bool all_pass = true;
    double overall = 0.0;
    for (const auto& e : entries) {
        if (module != "all" && module != e.name) continue;
        found = true;
        const auto report = e.run(seed, coords);
        const bool pass = report.max_rel_error < threshold;
        all_pass = all_pass && pass;
        overall = std::max(overall, report.max_rel_error);
        nlohmann::json j;
        j["module"] = e.name;
        j["max_rel_error"] = report.max_rel_error;
        j["worst_param"] = report.worst_param;
        j["coords_checked"] = report.coords_checked;
        j["pass"] = pass;
        os << j.dump() << '\n';
    }
    if (!found)
        throw validation_error("unknown module '" + module +
                               "' (expected tensor, encoder, scoring, relex, kb-score, "
                               "model, or all)");
    nlohmann::json j;
    j["overall_max_rel_error"] = overall;
    j["threshold"] = threshold;
    j["pass"] = all_pass;
    os << j.dump() << '\n';
    return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// Argument wiring

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"entity disambiguation over a symbolic knowledge base"};
    app.require_subcommand(1);
    std::uint64_t seed = 1;
    app.add_option("--seed", seed, "master random seed")->capture_default_str();

    // gen-world
    auto* gen = app.add_subcommand("gen-world", "generate a synthetic benchmark world");
    WorldSpec spec;
    std::string gen_out;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--entities", spec.n_entities, "content entities")->capture_default_str();
    gen->add_option("--relations", spec.n_relations, "standard relations")
        ->capture_default_str();
    gen->add_option("--types", spec.n_types, "type classes")->capture_default_str();
    gen->add_option("--aliases", spec.aliases_per_entity, "aliases per entity")
        ->capture_default_str();
    gen->add_option("--ambiguity", spec.ambiguity, "entities per shared alias")
        ->capture_default_str();
    gen->add_option("--facts-per-entity", spec.facts_per_entity, "filler facts per entity")
        ->capture_default_str();
    gen->add_option("--documents", spec.n_documents, "document count")->capture_default_str();
    gen->add_option("--mentions", spec.mentions_per_document, "mentions per document")
        ->capture_default_str();
    gen->add_option("--fact-rate", spec.fact_dependence_rate,
                    "fraction of mentions needing a KB fact")
        ->capture_default_str();
    gen->add_option("--coref-rate", spec.coref_rate,
                    "fraction of fact-dependent mentions resolved via coreference")
        ->capture_default_str();
    gen->add_option("--shared-easy", spec.shared_easy_fraction,
                    "fraction of easy mentions using the shared alias")
        ->capture_default_str();

    // build-kb
    auto* bkb = app.add_subcommand("build-kb", "canonicalize a knowledge base");
    std::string bkb_entities, bkb_facts, bkb_out;
    bkb->add_option("--entities", bkb_entities, "entities.tsv input")->required();
    bkb->add_option("--facts", bkb_facts, "facts.tsv input")->required();
    bkb->add_option("--out", bkb_out, "output directory")->required();

    // build-pem
    auto* bpem = app.add_subcommand("build-pem", "validate and normalize an alias table");
    std::string bpem_in, bpem_out;
    bpem->add_option("--aliases", bpem_in, "alias<TAB>entity<TAB>count input")->required();
    bpem->add_option("--out", bpem_out, "normalized pem.tsv output")->required();

    // dump-facts
    auto* dump = app.add_subcommand("dump-facts", "inspect KB facts for an entity or pair");
    std::string dump_world;
    std::int64_t dump_subject = -1, dump_object = -1;
    std::size_t dump_max_rel = 8;
    dump->add_option("--world", dump_world, "world directory")->required();
    dump->add_option("--subject", dump_subject, "subject entity id")->required();
    dump->add_option("--object", dump_object, "object entity id (pair lookup)");
    dump->add_option("--max-relations", dump_max_rel, "standard relation budget")
        ->capture_default_str();

    // candidate-recall
    auto* crec = app.add_subcommand("candidate-recall",
                                    "candidate coverage of gold entities, in percent");
    std::string crec_world, crec_split = "test";
    std::size_t crec_n = 30;
    crec->add_option("--world", crec_world, "world directory")->required();
    crec->add_option("--split", crec_split, "train, dev, test, or all")
        ->capture_default_str();
    crec->add_option("--n", crec_n, "candidates per mention")->capture_default_str();

    // train
    auto* tr = app.add_subcommand("train", "train a model on a world");
    std::string tr_world, tr_out, tr_config, tr_re_mode = "coarse2fine";
    std::vector<std::string> tr_ablate;
    TrainConfig tcfg;
    RunConfig rc;
    tr->add_option("--world", tr_world, "world directory")->required();
    tr->add_option("--out", tr_out, "run output directory")->required();
    tr->add_option("--config", tr_config, "training config JSON (overridden by flags)");
    auto* tr_lr = tr->add_option("--lr", tcfg.lr, "peak learning rate");
    auto* tr_steps = tr->add_option("--steps", tcfg.max_steps, "optimizer updates");
    auto* tr_batch = tr->add_option("--batch", tcfg.batch_size, "documents per update");
    auto* tr_dropout = tr->add_option("--dropout", tcfg.dropout, "dropout probability");
    auto* tr_mm = tr->add_option("--max-mentions", tcfg.max_mentions,
                                 "mention cap per training document");
    auto* tr_mc = tr->add_option("--max-candidates", tcfg.max_candidates,
                                 "candidate cap per training mention");
    auto* tr_ee = tr->add_option("--eval-every", tcfg.eval_every, "dev-F1 cadence in steps");
    tr->add_option("--d-model", rc.model.d_model, "model width");
    tr->add_option("--enc-layers", rc.model.n_layers, "document encoder layers");
    tr->add_option("--heads", rc.model.n_heads, "attention heads");
    tr->add_option("--max-seq", rc.model.max_seq_len, "maximum document length");
    tr->add_option("--desc-layers", rc.model.desc_n_layers, "description encoder layers");
    tr->add_option("--desc-tokens", rc.model.desc_max_tokens, "description token cap");
    tr->add_option("--task-hidden", rc.model.task_hidden, "task head hidden units");
    tr->add_option("--relex-layers", rc.model.relex_n_layers, "relation transformer layers");
    tr->add_option("--top-k", rc.model.top_k, "mention pairs kept for the fine layer");
    tr->add_option("--candidates", rc.model.n_candidates, "candidates per mention");
    tr->add_option("--init-seed", rc.model.init_seed, "parameter init seed");
    tr->add_option("--type-budget", rc.type_budget, "greedy type vocabulary budget");
    tr->add_option("--max-relations", rc.max_standard_relations,
                   "standard relation classes before OTHER");
    tr->add_option("--ablate", tr_ablate, "ablation switches (repeatable)");
    tr->add_option("--re-mode", tr_re_mode, "coarse2fine or bilinear");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a trained run");
    std::string ev_world, ev_run, ev_split = "test", ev_out, ev_subset;
    std::vector<std::string> ev_ablate;
    ev->add_option("--world", ev_world, "world directory")->required();
    ev->add_option("--run", ev_run, "run directory from train")->required();
    ev->add_option("--split", ev_split, "train, dev, or test")->capture_default_str();
    ev->add_option("--out", ev_out, "report directory (default: run directory)");
    ev->add_option("--subset", ev_subset,
                   "also score a manifest mention subset: fact_dependent or coref_dependent");
    ev->add_option("--ablate", ev_ablate, "evaluation-time ablation switches (repeatable)");

    // analyze-relations
    auto* ar = app.add_subcommand("analyze-relations",
                                  "relation recall against gold KB facts");
    std::string ar_world, ar_run, ar_split = "test", ar_out;
    std::vector<std::string> ar_ablate;
    ar->add_option("--world", ar_world, "world directory")->required();
    ar->add_option("--run", ar_run, "run directory from train")->required();
    ar->add_option("--split", ar_split, "train, dev, or test")->capture_default_str();
    ar->add_option("--out", ar_out, "also write the table to this TSV file");
    ar->add_option("--ablate", ar_ablate, "evaluation-time ablation switches (repeatable)");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    std::string gc_module = "all";
    std::size_t gc_coords = 8;
    double gc_threshold = 1e-4;
    gc->add_option("--module", gc_module,
                   "tensor, encoder, scoring, relex, kb-score, model, or all")
        ->capture_default_str();
    gc->add_option("--coords", gc_coords, "coordinates probed per parameter")
        ->capture_default_str();
    gc->add_option("--threshold", gc_threshold, "max relative error allowed")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        nlohmann::json j;
        j["error"] = "usage";
        j["message"] = e.what();
        err << j.dump() << '\n';
        return 2;
    }

    try {
        if (gen->parsed()) {
            spec.seed = seed;
            return cmd_gen_world(spec, gen_out, out);
        }
        if (bkb->parsed()) return cmd_build_kb(bkb_entities, bkb_facts, bkb_out, out);
        if (bpem->parsed()) return cmd_build_pem(bpem_in, bpem_out, out);
        if (dump->parsed())
            return cmd_dump_facts(dump_world, dump_subject, dump_object, dump_max_rel, out);
        if (crec->parsed()) return cmd_candidate_recall(crec_world, crec_split, crec_n, out);
        if (tr->parsed()) {
            TrainConfig base;
            if (!tr_config.empty()) base = load_train_config(tr_config);
            if (tr_lr->count() == 0) tcfg.lr = base.lr;
            if (tr_steps->count() == 0) tcfg.max_steps = base.max_steps;
            if (tr_batch->count() == 0) tcfg.batch_size = base.batch_size;
            if (tr_dropout->count() == 0) tcfg.dropout = base.dropout;
            if (tr_mm->count() == 0) tcfg.max_mentions = base.max_mentions;
            if (tr_mc->count() == 0) tcfg.max_candidates = base.max_candidates;
            if (tr_ee->count() == 0) tcfg.eval_every = base.eval_every;
            tcfg.seed = seed;
            rc.flags.re_mode = re_mode_from_string(tr_re_mode);
            for (const auto& name : tr_ablate) apply_ablation(rc.flags, name);
            return cmd_train(tr_world, tr_out, tcfg, rc, out);
        }
        if (ev->parsed())
            return cmd_eval(ev_world, ev_run, ev_split, ev_out.empty() ? ev_run : ev_out,
                            ev_subset, ev_ablate, out);
        if (ar->parsed())
            return cmd_analyze_relations(ar_world, ar_run, ar_split, ar_out, ar_ablate, out);
        if (gc->parsed()) return cmd_gradcheck(gc_module, seed, gc_coords, gc_threshold, out);
        throw contract_error("no subcommand dispatched");
    } catch (const error& e) {
        nlohmann::json j;
        j["error"] = e.kind();
        j["message"] = e.what();
        err << j.dump() << '\n';
        return 3;
    } catch (const std::exception& e) {
        nlohmann::json j;
        j["error"] = "internal";
        j["message"] = e.what();
        err << j.dump() << '\n';
        return 3;
    }
}

}  // namespace cli
}  // namespace kblink
