#pragma once

#include <string>

#include "kblink/error.hpp"

namespace kblink {

enum class ReMode { coarse2fine, bilinear };

inline std::string to_string(ReMode m) {
    return m == ReMode::coarse2fine ? "coarse2fine" : "bilinear";
}

inline ReMode re_mode_from_string(const std::string& s) {
    if (s == "coarse2fine") return ReMode::coarse2fine;
    if (s == "bilinear") return ReMode::bilinear;
    throw validation_error("unknown re_mode '" + s + "'");
}

// Ablation switches. use_task_hidden and re_mode change parameter shapes and
// are fixed at model construction; the rest can be toggled per forward pass.
struct AblationFlags {
    bool use_kb = true;
    bool use_types = true;
    bool use_descriptions = true;
    bool use_prior = true;
    ReMode re_mode = ReMode::coarse2fine;
    bool use_same_as = true;
    bool use_other = true;
    bool collapse_relations = false;  // fold standard relation classes into OTHER
    bool use_task_hidden = true;
    bool signed_relation_scores = false;  // identity instead of sigmoid on fine logits

    void validate() const {
        if (!use_types && !use_descriptions && !use_kb)
            throw validation_error(
                "ablation flags: at least one of use_types/use_descriptions/use_kb required");
    }
};

// Maps the user-facing --ablate names onto flag changes.
inline void apply_ablation(AblationFlags& flags, const std::string& name) {
    if (name == "no-kb") flags.use_kb = false;
    else if (name == "no-types") flags.use_types = false;
    else if (name == "no-descriptions") flags.use_descriptions = false;
    else if (name == "no-prior") flags.use_prior = false;
    else if (name == "no-same-as") flags.use_same_as = false;
    else if (name == "no-other") flags.use_other = false;
    else if (name == "collapse-relations") flags.collapse_relations = true;
    else if (name == "no-task-hidden") flags.use_task_hidden = false;
    else if (name == "signed-scores") flags.signed_relation_scores = true;
    else
        throw validation_error("unknown ablation '" + name +
                               "' (expected no-kb, no-types, no-descriptions, no-prior, "
                               "no-same-as, no-other, collapse-relations, no-task-hidden, "
                               "or signed-scores)");
}

}  // namespace kblink
