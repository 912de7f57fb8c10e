#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "kblink/error.hpp"
#include "kblink/kb.hpp"
#include "kblink/pem.hpp"

namespace kblink {

struct Mention {
    std::size_t start = 0;  // token index, inclusive
    std::size_t end = 0;    // token index, exclusive
    std::string surface;
    std::int64_t gold = -1;  // -1 = unlabeled

    bool has_gold() const { return gold >= 0; }
};

struct Document {
    std::string id;
    std::vector<std::uint32_t> tokens;
    std::vector<Mention> mentions;
};

// vocab.tsv: token<TAB>id ; ids must be dense from 0.
class TokenVocab {
public:
    std::uint32_t intern(const std::string& token) {
        auto it = ids_.find(token);
        if (it != ids_.end()) return it->second;
        const auto id = static_cast<std::uint32_t>(tokens_.size());
        tokens_.push_back(token);
        ids_.emplace(token, id);
        return id;
    }

    std::uint32_t id_of(const std::string& token) const {
        auto it = ids_.find(token);
        if (it == ids_.end()) throw contract_error("unknown token '" + token + "'");
        return it->second;
    }

    const std::string& token(std::uint32_t id) const {
        if (id >= tokens_.size())
            throw range_error("token id " + std::to_string(id) + " out of " +
                              std::to_string(tokens_.size()));
        return tokens_[id];
    }

    std::size_t size() const { return tokens_.size(); }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw io_error("cannot open for write: " + path);
        for (std::size_t i = 0; i < tokens_.size(); ++i) os << tokens_[i] << '\t' << i << '\n';
    }

    static TokenVocab load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw io_error("cannot open " + path);
        TokenVocab v;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            auto fields = detail::split_tabs(line);
            if (fields.size() != 2)
                throw parse_error(path + " line " + std::to_string(lineno) +
                                  ": expected 2 fields");
            const auto id = detail::parse_u32(fields[1], path, lineno, "token id");
            if (id != v.tokens_.size())
                throw integrity_error(path + " line " + std::to_string(lineno) + ": token id " +
                                      std::to_string(id) + " not dense");
            v.tokens_.push_back(fields[0]);
            v.ids_.emplace(fields[0], id);
        }
        return v;
    }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, std::uint32_t> ids_;
};

inline void validate_document(const Document& doc) {
    std::size_t prev_end = 0;
    for (const auto& m : doc.mentions) {
        if (m.end <= m.start)
            throw span_error("document " + doc.id + ": mention span [" +
                             std::to_string(m.start) + ", " + std::to_string(m.end) +
                             ") is empty");
        if (m.end > doc.tokens.size())
            throw span_error("document " + doc.id + ": mention span end " +
                             std::to_string(m.end) + " exceeds " +
                             std::to_string(doc.tokens.size()) + " tokens");
        if (m.start < prev_end)
            throw span_error("document " + doc.id + ": overlapping mention at " +
                             std::to_string(m.start));
        prev_end = m.end;
    }
}

// documents.jsonl: {"id", "tokens":[ids], "mentions":[{"start","end","surface","gold"}]}
inline std::vector<Document> load_documents(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path);
    std::vector<Document> docs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
        try {
            Document doc;
            doc.id = j.at("id").get<std::string>();
            doc.tokens = j.at("tokens").get<std::vector<std::uint32_t>>();
            for (const auto& jm : j.at("mentions")) {
                Mention m;
                m.start = jm.at("start").get<std::size_t>();
                m.end = jm.at("end").get<std::size_t>();
                m.surface = jm.at("surface").get<std::string>();
                if (jm.contains("gold") && !jm["gold"].is_null())
                    m.gold = jm["gold"].get<std::int64_t>();
                doc.mentions.push_back(std::move(m));
            }
            validate_document(doc);
            docs.push_back(std::move(doc));
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return docs;
}

inline void save_documents(const std::vector<Document>& docs, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open for write: " + path);
    for (const auto& doc : docs) {
        nlohmann::json j;
        j["id"] = doc.id;
        j["tokens"] = doc.tokens;
        auto& jms = j["mentions"] = nlohmann::json::array();
        for (const auto& m : doc.mentions) {
            nlohmann::json jm;
            jm["start"] = m.start;
            jm["end"] = m.end;
            jm["surface"] = m.surface;
            if (m.has_gold()) jm["gold"] = m.gold;
            jms.push_back(std::move(jm));
        }
        os << j.dump() << '\n';
    }
}

// Percentage of gold mentions whose gold entity appears in the top-n
// candidates for the mention surface.
inline double candidate_recall(const PemTable& pem, const std::vector<Document>& docs,
                               std::size_t n) {
    std::size_t total = 0, hit = 0;
    for (const auto& doc : docs) {
        for (const auto& m : doc.mentions) {
            if (!m.has_gold()) continue;
            ++total;
            if (candidates_for(pem, m.surface, n, m.gold).gold_present) ++hit;
        }
    }
    if (total == 0) throw validation_error("candidate_recall: no gold mentions in dataset");
    return 100.0 * static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace kblink
