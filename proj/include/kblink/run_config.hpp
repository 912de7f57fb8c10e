#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "kblink/error.hpp"
#include "kblink/flags.hpp"
#include "kblink/model.hpp"

namespace kblink {

// Everything needed to rebuild a trained model from a run directory: the
// architecture, the ablation flags it was trained with, and the artifact
// construction knobs. Stored as run.json next to the checkpoint.
struct RunConfig {
    ModelConfig model;
    AblationFlags flags;
    std::size_t max_standard_relations = 8;
    std::size_t type_budget = 16;
};

inline nlohmann::json run_config_json(const RunConfig& rc) {
    nlohmann::json m;
    m["d_model"] = rc.model.d_model;
    m["n_layers"] = rc.model.n_layers;
    m["n_heads"] = rc.model.n_heads;
    m["max_seq_len"] = rc.model.max_seq_len;
    m["desc_n_layers"] = rc.model.desc_n_layers;
    m["desc_max_tokens"] = rc.model.desc_max_tokens;
    m["task_hidden"] = rc.model.task_hidden;
    m["relex_n_layers"] = rc.model.relex_n_layers;
    m["top_k"] = rc.model.top_k;
    m["n_candidates"] = rc.model.n_candidates;
    m["init_seed"] = rc.model.init_seed;

    nlohmann::json f;
    f["use_kb"] = rc.flags.use_kb;
    f["use_types"] = rc.flags.use_types;
    f["use_descriptions"] = rc.flags.use_descriptions;
    f["use_prior"] = rc.flags.use_prior;
    f["re_mode"] = to_string(rc.flags.re_mode);
    f["use_same_as"] = rc.flags.use_same_as;
    f["use_other"] = rc.flags.use_other;
    f["collapse_relations"] = rc.flags.collapse_relations;
    f["use_task_hidden"] = rc.flags.use_task_hidden;
    f["signed_relation_scores"] = rc.flags.signed_relation_scores;

    nlohmann::json j;
    j["model"] = std::move(m);
    j["flags"] = std::move(f);
    j["max_standard_relations"] = rc.max_standard_relations;
    j["type_budget"] = rc.type_budget;
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig rc;
    const auto& m = j.at("model");
    rc.model.d_model = m.at("d_model").get<std::size_t>();
    rc.model.n_layers = m.at("n_layers").get<std::size_t>();
    rc.model.n_heads = m.at("n_heads").get<std::size_t>();
    rc.model.max_seq_len = m.at("max_seq_len").get<std::size_t>();
    rc.model.desc_n_layers = m.at("desc_n_layers").get<std::size_t>();
    rc.model.desc_max_tokens = m.at("desc_max_tokens").get<std::size_t>();
    rc.model.task_hidden = m.at("task_hidden").get<std::size_t>();
    rc.model.relex_n_layers = m.at("relex_n_layers").get<std::size_t>();
    rc.model.top_k = m.at("top_k").get<std::size_t>();
    rc.model.n_candidates = m.at("n_candidates").get<std::size_t>();
    rc.model.init_seed = m.at("init_seed").get<std::uint64_t>();

    const auto& f = j.at("flags");
    rc.flags.use_kb = f.at("use_kb").get<bool>();
    rc.flags.use_types = f.at("use_types").get<bool>();
    rc.flags.use_descriptions = f.at("use_descriptions").get<bool>();
    rc.flags.use_prior = f.at("use_prior").get<bool>();
    rc.flags.re_mode = re_mode_from_string(f.at("re_mode").get<std::string>());
    rc.flags.use_same_as = f.at("use_same_as").get<bool>();
    rc.flags.use_other = f.at("use_other").get<bool>();
    rc.flags.collapse_relations = f.at("collapse_relations").get<bool>();
    rc.flags.use_task_hidden = f.at("use_task_hidden").get<bool>();
    rc.flags.signed_relation_scores = f.at("signed_relation_scores").get<bool>();

    rc.max_standard_relations = j.at("max_standard_relations").get<std::size_t>();
    rc.type_budget = j.at("type_budget").get<std::size_t>();
    return rc;
}

inline void save_run_config(const RunConfig& rc, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open for write: " + path);
    os << run_config_json(rc).dump(2) << '\n';
    if (!os) throw io_error("write failed: " + path);
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open for read: " + path);
    nlohmann::json j;
    try {
        is >> j;
        return run_config_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(path + ": " + e.what());
    }
}

}  // namespace kblink
