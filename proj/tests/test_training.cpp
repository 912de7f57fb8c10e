#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kblink/training.hpp"
#include "kblink/world.hpp"

using namespace kblink;

namespace {

WorldSpec train_world_spec() {
    WorldSpec spec;
    spec.n_entities = 60;
    spec.n_relations = 3;
    spec.n_types = 4;
    spec.aliases_per_entity = 2;
    spec.ambiguity = 2;
    spec.facts_per_entity = 2;
    spec.n_documents = 8;
    spec.mentions_per_document = 4;
    spec.fact_dependence_rate = 0.5;
    spec.seed = 7;
    return spec;
}

std::shared_ptr<ModelArtifacts> make_artifacts(const GeneratedWorld& w) {
    const auto inst = w.kb.find_relation(kRelInstanceOf);
    REQUIRE(inst.has_value());
    TypeVocab vocab;
    std::set<TypePair> pool;
    for (EntityId e = 0; e < w.kb.n_entities(); ++e)
        for (const auto& tp : effective_types(w.kb, e))
            if (tp.first == *inst) pool.insert(tp);
    vocab.types.assign(pool.begin(), pool.end());
    return std::make_shared<ModelArtifacts>(
        ModelArtifacts::build(w.kb, w.pem, w.tokens, vocab, 8));
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.desc_n_layers = 1;
    cfg.desc_max_tokens = 8;
    cfg.task_hidden = 8;
    cfg.relex_n_layers = 1;
    cfg.top_k = 600;
    cfg.n_candidates = 5;
    cfg.init_seed = 3;
    return cfg;
}

std::string scratch_dir(const std::string& leaf) {
    const auto dir = std::filesystem::temp_directory_path() / "kblink_train_tests" / leaf;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is);
    std::vector<nlohmann::json> out;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    return out;
}

}  // namespace

TEST_CASE("train config round-trips through JSON and rejects bad input") {
    TrainConfig cfg;
    cfg.lr = 2.5e-3;
    cfg.batch_size = 4;
    cfg.max_steps = 123;
    cfg.dropout = 0.1;
    cfg.max_mentions = 12;
    cfg.max_candidates = 3;
    cfg.eval_every = 7;
    cfg.seed = 99;

    const auto dir = scratch_dir("config");
    save_train_config(cfg, dir + "/config.json");
    const auto back = load_train_config(dir + "/config.json");
    CHECK(back.lr == cfg.lr);
    CHECK(back.beta1 == cfg.beta1);
    CHECK(back.beta2 == cfg.beta2);
    CHECK(back.adam_eps == cfg.adam_eps);
    CHECK(back.batch_size == cfg.batch_size);
    CHECK(back.max_steps == cfg.max_steps);
    CHECK(back.dropout == cfg.dropout);
    CHECK(back.max_mentions == cfg.max_mentions);
    CHECK(back.max_candidates == cfg.max_candidates);
    CHECK(back.eval_every == cfg.eval_every);
    CHECK(back.seed == cfg.seed);

    SECTION("unknown keys are rejected") {
        auto j = train_config_json(cfg);
        j["learning_rate"] = 0.1;
        CHECK_THROWS_AS(train_config_from_json(j), validation_error);
    }
    SECTION("invalid values are rejected") {
        auto j = train_config_json(cfg);
        j["lr"] = 0.0;
        CHECK_THROWS_AS(train_config_from_json(j), validation_error);
        j = train_config_json(cfg);
        j["dropout"] = 1.0;
        CHECK_THROWS_AS(train_config_from_json(j), validation_error);
        j = train_config_json(cfg);
        j["batch_size"] = 0;
        CHECK_THROWS_AS(train_config_from_json(j), validation_error);
    }
    SECTION("malformed JSON is a parse error") {
        std::ofstream os(dir + "/bad.json");
        os << "{ not json";
        os.close();
        CHECK_THROWS_AS(load_train_config(dir + "/bad.json"), parse_error);
    }
}

TEST_CASE("adam minimizes a quadratic") {
    ParameterStore params;
    params.declare("x", {4}, {5.0, -3.0, 0.5, 8.0});
    const std::vector<double> target{1.0, 2.0, -1.0, 0.0};
    Adam opt;
    for (int it = 0; it < 1000; ++it) {
        Tape tape;
        Tensor diff = tape.add(params.get("x"),
                               tape.scale(Tensor::constant({4}, target), -1.0));
        Tensor loss = tape.dot(diff, diff);
        tape.backward(loss);
        opt.step(params, 0.05);
        params.zero_grads();
    }
    CHECK(opt.steps_taken() == 1000);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK_THAT(params.get("x").values()[i], Catch::Matchers::WithinAbs(target[i], 1e-3));
}

TEST_CASE("document subsampling honors caps and keeps gold") {
    const auto w = generate_world(train_world_spec());
    auto art = make_artifacts(w);
    Model model(art, small_config(), AblationFlags{});
    const auto& doc = w.train.front();
    Rng rng(5);

    SECTION("no caps hit leaves the sets unchanged") {
        const auto base = model.make_candidates(doc);
        const auto sets = subsample_document(model, doc, 30, 5, rng);
        REQUIRE(sets.size() == base.size());
        for (std::size_t i = 0; i < sets.size(); ++i) {
            CHECK(sets[i].candidates.size() == base[i].candidates.size());
            CHECK(sets[i].gold_present == base[i].gold_present);
        }
    }
    SECTION("mention cap empties the dropped sets") {
        const auto sets = subsample_document(model, doc, 2, 5, rng);
        REQUIRE(sets.size() == doc.mentions.size());
        std::size_t kept = 0;
        for (const auto& s : sets)
            if (!s.candidates.empty()) ++kept;
        CHECK(kept == 2);
    }
    SECTION("candidate cap keeps the gold entity and the prior order") {
        const auto base = model.make_candidates(doc);
        const auto sets = subsample_document(model, doc, 30, 1, rng);
        for (std::size_t i = 0; i < sets.size(); ++i) {
            REQUIRE(sets[i].candidates.size() == 1);
            if (base[i].gold_present)
                CHECK(sets[i].candidates[0].entity ==
                      static_cast<EntityId>(doc.mentions[i].gold));
            else
                CHECK(sets[i].candidates[0].entity == base[i].candidates[0].entity);
        }
        // Cap of 2 on an ambiguous mention: top prior first, gold still in.
        const auto two = subsample_document(model, doc, 30, 2, rng);
        for (std::size_t i = 0; i < two.size(); ++i) {
            if (base[i].candidates.size() < 2) continue;
            REQUIRE(two[i].candidates.size() == 2);
            CHECK(two[i].candidates[0].prior >= two[i].candidates[1].prior);
            if (base[i].gold_present) {
                bool has_gold = false;
                for (const auto& c : two[i].candidates)
                    if (c.entity == static_cast<EntityId>(doc.mentions[i].gold))
                        has_gold = true;
                CHECK(has_gold);
            }
        }
    }
}

TEST_CASE("ed_loss matches a hand recomputation") {
    const auto w = generate_world(train_world_spec());
    auto art = make_artifacts(w);
    Model model(art, small_config(), AblationFlags{});
    const auto& doc = w.train.front();

    Tape tape;
    const auto out = model.forward(tape, doc, DropoutCtx{});
    const auto dl = ed_loss(tape, out, doc);
    REQUIRE(dl.n_terms > 0);

    double expected = 0.0;
    std::size_t terms = 0;
    for (std::size_t s = 0; s < out.scored.size(); ++s) {
        const auto& m = doc.mentions[out.scored[s]];
        if (!m.has_gold() || !out.cands[s].gold_present) continue;
        const auto& v = out.psi_f[s].values();
        double mx = v[0];
        for (double x : v) mx = std::max(mx, x);
        double lse = 0.0;
        for (double x : v) lse += std::exp(x - mx);
        lse = mx + std::log(lse);
        std::size_t gold_idx = 0;
        for (std::size_t k = 0; k < out.cands[s].candidates.size(); ++k)
            if (out.cands[s].candidates[k].entity == static_cast<EntityId>(m.gold))
                gold_idx = k;
        expected += lse - v[gold_idx];
        ++terms;
    }
    expected /= static_cast<double>(terms);
    CHECK(dl.n_terms == terms);
    CHECK_THAT(dl.loss.scalar_value(), Catch::Matchers::WithinRel(expected, 1e-12));

    SECTION("mentions without candidates contribute nothing") {
        auto presets = model.make_candidates(doc);
        for (auto& p : presets) p.candidates.clear();
        Tape t2;
        const auto empty = model.forward(t2, doc, DropoutCtx{}, &presets);
        const auto zero = ed_loss(t2, empty, doc);
        CHECK(zero.n_terms == 0);
        CHECK(zero.loss.scalar_value() == 0.0);
    }
    SECTION("gold-free candidate sets are skipped") {
        auto presets = model.make_candidates(doc);
        std::size_t golden = 0;
        for (std::size_t i = 0; i < presets.size(); ++i)
            if (presets[i].gold_present) ++golden;
        REQUIRE(golden >= 2);
        // Drop the gold from the first supervised mention.
        for (std::size_t i = 0; i < presets.size(); ++i) {
            if (!presets[i].gold_present) continue;
            std::vector<Candidate> rest;
            for (const auto& c : presets[i].candidates)
                if (c.entity != static_cast<EntityId>(doc.mentions[i].gold))
                    rest.push_back(c);
            if (rest.empty()) continue;  // singleton set; removing gold empties it
            presets[i].candidates = std::move(rest);
            presets[i].gold_present = false;
            break;
        }
        std::size_t still_golden = 0;
        for (const auto& p : presets)
            if (p.gold_present) ++still_golden;
        Tape t2;
        const auto out2 = model.forward(t2, doc, DropoutCtx{}, &presets);
        const auto dl2 = ed_loss(t2, out2, doc);
        CHECK(dl2.n_terms == still_golden);
    }
}

TEST_CASE("training writes artifacts and reduces the loss") {
    const auto w = generate_world(train_world_spec());
    auto art = make_artifacts(w);
    Model model(art, small_config(), AblationFlags{});

    TrainConfig cfg;
    cfg.lr = 5e-3;
    cfg.batch_size = 4;
    cfg.max_steps = 40;
    cfg.dropout = 0.05;
    cfg.eval_every = 10;
    cfg.seed = 3;
    const auto dir = scratch_dir("artifacts");
    const auto result = train(model, w.train, w.dev, cfg, dir);

    CHECK(result.steps == 40);
    CHECK(std::isfinite(result.final_loss));
    CHECK(result.checkpoint_path == dir + "/model.ckpt");
    CHECK(std::filesystem::exists(dir + "/model.ckpt"));
    CHECK(std::filesystem::exists(dir + "/config.json"));

    const auto saved_cfg = load_train_config(dir + "/config.json");
    CHECK(saved_cfg.lr == cfg.lr);
    CHECK(saved_cfg.max_steps == cfg.max_steps);
    CHECK(saved_cfg.seed == cfg.seed);

    const auto rows = read_jsonl(dir + "/metrics.jsonl");
    REQUIRE(rows.size() == 40);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].at("step").get<std::size_t>() == i);
        CHECK(std::isfinite(rows[i].at("loss").get<double>()));
        CHECK(rows[i].at("lr").get<double>() > 0.0);
    }
    CHECK(rows[0].at("lr").get<double>() == cfg.lr);
    CHECK_THAT(rows[39].at("lr").get<double>(),
               Catch::Matchers::WithinRel(cfg.lr / 40.0, 1e-12));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const bool expect_eval = (i + 1) % 10 == 0 || i + 1 == 40;
        CHECK(rows[i].contains("dev_f1") == expect_eval);
    }

    double early = 0.0, late = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        early += rows[i].at("loss").get<double>();
        late += rows[rows.size() - 1 - i].at("loss").get<double>();
    }
    CHECK(late < early);

    // The checkpoint restores into a freshly built model.
    Model fresh(art, small_config(), AblationFlags{});
    fresh.params().load(dir + "/model.ckpt");
    for (const auto& [name, t] : model.params())
        CHECK(fresh.params().get(name).values() == t.values());
}

TEST_CASE("identical seeds give bitwise-identical training runs") {
    const auto w = generate_world(train_world_spec());
    auto art = make_artifacts(w);

    TrainConfig cfg;
    cfg.lr = 5e-3;
    cfg.batch_size = 4;
    cfg.max_steps = 15;
    cfg.dropout = 0.05;
    cfg.eval_every = 5;
    cfg.seed = 11;

    const auto dir_a = scratch_dir("det_a");
    const auto dir_b = scratch_dir("det_b");
    Model ma(art, small_config(), AblationFlags{});
    Model mb(art, small_config(), AblationFlags{});
    train(ma, w.train, w.dev, cfg, dir_a);
    train(mb, w.train, w.dev, cfg, dir_b);

    CHECK(slurp(dir_a + "/model.ckpt") == slurp(dir_b + "/model.ckpt"));
    CHECK(slurp(dir_a + "/metrics.jsonl") == slurp(dir_b + "/metrics.jsonl"));
    CHECK(slurp(dir_a + "/config.json") == slurp(dir_b + "/config.json"));

    const auto pa = predict(ma, w.test);
    const auto pb = predict(mb, w.test);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t d = 0; d < pa.size(); ++d)
        for (std::size_t m = 0; m < pa[d].mentions.size(); ++m) {
            CHECK(pa[d].mentions[m].predicted == pb[d].mentions[m].predicted);
            CHECK(pa[d].mentions[m].psi_f == pb[d].mentions[m].psi_f);
        }
}

TEST_CASE("zero steps leaves the initialization untouched") {
    const auto w = generate_world(train_world_spec());
    auto art = make_artifacts(w);
    Model trained(art, small_config(), AblationFlags{});
    Model reference(art, small_config(), AblationFlags{});

    TrainConfig cfg;
    cfg.max_steps = 0;
    const auto dir = scratch_dir("zero");
    const auto result = train(trained, w.train, w.dev, cfg, dir);
    CHECK(result.steps == 0);

    const auto ref_path = dir + "/reference.ckpt";
    reference.params().save(ref_path);
    CHECK(slurp(dir + "/model.ckpt") == slurp(ref_path));
}

TEST_CASE("non-finite losses raise a numeric error naming the document") {
    const auto w = generate_world(train_world_spec());
    auto art = make_artifacts(w);
    Model model(art, small_config(), AblationFlags{});
    model.params().get("kb.w3").mutable_values()[0] =
        std::numeric_limits<double>::quiet_NaN();

    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.max_steps = 3;
    const auto dir = scratch_dir("nan");
    try {
        train(model, w.train, w.dev, cfg, dir);
        FAIL("expected numeric_error");
    } catch (const numeric_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("non-finite loss on document doc") != std::string::npos);
    }
}
