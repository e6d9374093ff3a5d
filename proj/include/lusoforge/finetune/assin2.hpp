#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include "lusoforge/core/error.hpp"
#include "lusoforge/finetune/task.hpp"

namespace lusoforge::finetune {

enum class Assin2Split { train, dev, test };

inline std::size_t assin2_expected_size(Assin2Split s) {
  switch (s) {
    case Assin2Split::train: return 6500;
    case Assin2Split::dev: return 500;
    case Assin2Split::test: return 2448;
  }
  return 0;
}

/// Message when a split does not have the published ASSIN 2 size.
inline std::optional<std::string> assin2_size_warning(Assin2Split s, std::size_t n) {
  const auto want = assin2_expected_size(s);
  if (n == want) return std::nullopt;
  return "ASSIN 2 split has " + std::to_string(n) + " pairs, expected " + std::to_string(want);
}

/// Reads <pair entailment=".." similarity=".."><t>..</t><h>..</h></pair> records.
/// `sts` takes the similarity score, `rte` maps Entailment to 1 and None to 0.
inline std::vector<TaskExample> read_assin2_xml(std::istream& in, const TaskSpec& spec) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_xml(in, tree);
  } catch (const pt::xml_parser_error& e) {
    throw data_error(std::string("malformed ASSIN 2 XML: ") + e.what());
  }
  std::vector<TaskExample> out;
  const auto& root = tree.front().second;
  for (const auto& [tag, node] : root) {
    if (tag != "pair") continue;
    const auto id = node.get<std::string>("<xmlattr>.id", "?");
    TaskExample x;
    try {
      x.sentence_a = node.get<std::string>("t");
      x.sentence_b = node.get<std::string>("h");
      if (spec.head == HeadType::regression) {
        x.label = node.get<double>("<xmlattr>.similarity");
      } else {
        const auto e = node.get<std::string>("<xmlattr>.entailment");
        if (e == "Entailment") x.label = 1;
        else if (e == "None") x.label = 0;
        else throw data_error("pair " + id + ": unknown entailment value '" + e + "'");
      }
    } catch (const pt::ptree_error& e) {
      throw data_error("pair " + id + ": " + e.what());
    }
    check_label(spec, x.label, "pair " + id);
    out.push_back(std::move(x));
  }
  if (out.empty()) throw data_error("ASSIN 2 XML contains no pairs");
  return out;
}

}  // namespace lusoforge::finetune
