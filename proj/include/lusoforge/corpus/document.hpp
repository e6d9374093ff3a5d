#pragma once

#include <array>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "lusoforge/core/error.hpp"

namespace lusoforge::corpus {

enum class Source { oscar, dcep, europarl, parlamento_pt, other };

inline constexpr std::array<Source, 5> all_sources{Source::oscar, Source::dcep, Source::europarl, Source::parlamento_pt,
                                                   Source::other};

inline std::string_view source_name(Source s) {
  switch (s) {
    case Source::oscar: return "OSCAR";
    case Source::dcep: return "DCEP";
    case Source::europarl: return "Europarl";
    case Source::parlamento_pt: return "ParlamentoPT";
    case Source::other: return "OTHER";
  }
  return "OTHER";
}

inline std::optional<Source> parse_source(std::string_view name) {
  for (Source s : all_sources) {
    if (source_name(s) == name) return s;
  }
  return std::nullopt;
}

/// One corpus record. `fields` keeps the full JSON object, including fields this
/// library does not know about, in input order.
struct Document {
  std::string id;
  std::string text;
  Source source = Source::other;
  std::optional<std::string> url;
  std::optional<std::string> tld;
  nlohmann::ordered_json fields = nlohmann::ordered_json::object();

  static Document from_json(const nlohmann::ordered_json& j) {
    if (!j.is_object()) throw data_error("document is not a JSON object");
    Document d;
    auto str = [&](const char* key) -> std::optional<std::string> {
      if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
      if (!j.at(key).is_string()) throw data_error(std::string("document field '") + key + "' must be a string");
      return j.at(key).get<std::string>();
    };
    auto id = str("id");
    if (!id) throw data_error("document without an id");
    auto text = str("text");
    if (!text) throw data_error("document '" + *id + "' has no text");
    d.id = *id;
    d.text = *text;
    if (auto s = str("source")) {
      auto parsed = parse_source(*s);
      if (!parsed) {
        throw data_error("document '" + d.id + "' has unknown source '" + *s +
                         "' (expected OSCAR, DCEP, Europarl, ParlamentoPT or OTHER)");
      }
      d.source = *parsed;
    }
    d.url = str("url");
    d.tld = str("tld");
    d.fields = j;
    return d;
  }

  nlohmann::ordered_json to_json() const {
    auto j = fields;
    j["id"] = id;
    j["text"] = text;
    j["source"] = source_name(source);
    if (url) j["url"] = *url;
    if (tld) j["tld"] = *tld;
    return j;
  }
};

/// Reads JSON Lines. Blank lines are skipped; ids must be unique.
inline std::vector<Document> read_jsonl(std::istream& in, std::string_view origin = "<input>") {
  std::vector<Document> docs;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = std::string(origin) + ":" + std::to_string(lineno);
    try {
      docs.push_back(Document::from_json(nlohmann::ordered_json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw data_error(where + ": malformed JSON: " + e.what());
    } catch (const data_error& e) {
      throw data_error(where + ": " + e.what());
    }
    if (!seen.insert(docs.back().id).second) throw data_error(where + ": duplicate document id '" + docs.back().id + "'");
  }
  return docs;
}

inline void write_jsonl(std::ostream& out, const std::vector<Document>& docs) {
  for (const auto& d : docs) out << d.to_json().dump() << '\n';
}

}  // namespace lusoforge::corpus
