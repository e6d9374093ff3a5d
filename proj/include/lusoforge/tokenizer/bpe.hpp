#pragma once

// Byte-pair-encoding subword tokenizer over whitespace-boundary-marked text.
// Word starts carry a marker glyph (U+2581) as their own base symbol; merges
// are learned greedily by pair frequency with lexicographic tie-breaking.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ranges>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lusoforge/core/error.hpp"
#include "lusoforge/core/io.hpp"
#include "lusoforge/core/random.hpp"
#include "lusoforge/tokenizer/normalize.hpp"

namespace lusoforge::tokenizer {

inline constexpr std::string_view default_marker = "▁";
inline constexpr int vocab_format_version = 1;

/// Reserved ids at the low end of every vocabulary.
struct SpecialIds {
  static constexpr std::int32_t pad = 0;
  static constexpr std::int32_t unk = 1;
  static constexpr std::int32_t cls = 2;
  static constexpr std::int32_t sep = 3;
  static constexpr std::int32_t mask = 4;
  static constexpr std::int32_t count = 5;
};

inline constexpr std::string_view special_names[SpecialIds::count] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> segments;  // 0 for the first segment, 1 for the second
};

using Merge = std::pair<std::string, std::string>;

class TokenizerModel {
 public:
  TokenizerModel() = default;

  /// `tokens` is indexed by id and must start with the five special tokens.
  TokenizerModel(std::vector<std::string> tokens, std::vector<Merge> merges,
                 std::string marker = std::string(default_marker))
      : tokens_(std::move(tokens)), merges_(std::move(merges)), marker_(std::move(marker)) {
    if (tokens_.size() < static_cast<std::size_t>(SpecialIds::count)) throw data_error("vocabulary lacks special tokens");
    for (std::int32_t i = 0; i < SpecialIds::count; ++i) {
      if (tokens_[static_cast<std::size_t>(i)] != special_names[i]) {
        throw data_error("vocabulary id " + std::to_string(i) + " must be " + std::string(special_names[i]));
      }
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
        throw data_error("duplicate vocabulary token '" + tokens_[i] + "'");
      }
    }
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [l, rgt] = merges_[r];
      auto li = ids_.find(l), ri = ids_.find(rgt), oi = ids_.find(l + rgt);
      if (li == ids_.end() || ri == ids_.end() || oi == ids_.end()) {
        throw data_error("merge '" + l + "' + '" + rgt + "' refers to tokens outside the vocabulary");
      }
      merge_rank_.emplace(pair_key(li->second, ri->second), std::make_pair(static_cast<std::int32_t>(r), oi->second));
    }
  }

  std::size_t vocab_size() const noexcept { return tokens_.size(); }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::optional<std::int32_t> id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  const std::vector<Merge>& merges() const noexcept { return merges_; }
  const std::string& marker() const noexcept { return marker_; }
  static bool is_special(std::int32_t id) noexcept { return id >= 0 && id < SpecialIds::count; }

  /// Subword ids of normalised `text`, without specials or truncation.
  std::vector<std::int32_t> encode_words(std::string_view text) const {
    std::vector<std::int32_t> out;
    const std::string norm = text::normalize(text);
    for (auto word : text::split_words(norm)) encode_word(word, out);
    return out;
  }

  /// With add_specials: [CLS] tokens [SEP], truncated to at most max_len with SEP kept last.
  /// max_len == 0 disables truncation.
  TokenSequence encode(std::string_view text, std::size_t max_len, bool add_specials) const {
    if (add_specials && max_len != 0 && max_len < 2) throw contract_error("max_len must be >= 2 to hold CLS and SEP");
    auto body = encode_words(text);
    TokenSequence seq;
    if (add_specials) {
      if (max_len != 0 && body.size() > max_len - 2) body.resize(max_len - 2);
      seq.ids.reserve(body.size() + 2);
      seq.ids.push_back(SpecialIds::cls);
      seq.ids.insert(seq.ids.end(), body.begin(), body.end());
      seq.ids.push_back(SpecialIds::sep);
    } else {
      if (max_len != 0 && body.size() > max_len) body.resize(max_len);
      seq.ids = std::move(body);
    }
    seq.segments.assign(seq.ids.size(), 0);
    return seq;
  }

  /// [CLS] a [SEP] b [SEP] with longest-first truncation until the budget fits.
  TokenSequence encode_pair(std::string_view a, std::string_view b, std::size_t max_len) const {
    if (max_len < 3) throw contract_error("max_len must be >= 3 for a sentence pair");
    auto ta = encode_words(a);
    auto tb = encode_words(b);
    while (ta.size() + tb.size() + 3 > max_len) {
      if (ta.size() > tb.size()) {
        ta.pop_back();
      } else {
        tb.pop_back();
      }
    }
    TokenSequence seq;
    seq.ids.push_back(SpecialIds::cls);
    seq.ids.insert(seq.ids.end(), ta.begin(), ta.end());
    seq.ids.push_back(SpecialIds::sep);
    seq.segments.assign(seq.ids.size(), 0);
    seq.ids.insert(seq.ids.end(), tb.begin(), tb.end());
    seq.ids.push_back(SpecialIds::sep);
    seq.segments.resize(seq.ids.size(), 1);
    return seq;
  }

  /// Drops specials and turns word markers back into spaces.
  std::string decode(std::span<const std::int32_t> ids) const {
    std::string joined;
    for (auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw contract_error("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
      }
      if (is_special(id)) continue;
      joined += tokens_[static_cast<std::size_t>(id)];
    }
    std::string out;
    out.reserve(joined.size());
    for (std::size_t i = 0; i < joined.size();) {
      if (!marker_.empty() && joined.compare(i, marker_.size(), marker_) == 0) {
        out += ' ';
        i += marker_.size();
      } else {
        out += joined[i++];
      }
    }
    if (!out.empty() && out.front() == ' ') out.erase(0, 1);
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["version"] = vocab_format_version;
    auto& vocab = j["vocab"] = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < tokens_.size(); ++i) vocab[tokens_[i]] = i;
    auto& merges = j["merges"] = nlohmann::ordered_json::array();
    for (const auto& [l, r] : merges_) merges.push_back({l, r});
    j["specials"] = {{"pad", SpecialIds::pad}, {"unk", SpecialIds::unk}, {"cls", SpecialIds::cls},
                     {"sep", SpecialIds::sep}, {"mask", SpecialIds::mask}};
    j["marker"] = marker_;
    return j;
  }

  static TokenizerModel from_json(const nlohmann::json& j) {
    try {
      if (j.at("version").get<int>() != vocab_format_version) {
        throw data_error("unsupported vocabulary version " + j.at("version").dump());
      }
      const auto& vocab = j.at("vocab");
      std::vector<std::string> tokens(vocab.size());
      std::vector<bool> seen(vocab.size(), false);
      for (auto it = vocab.begin(); it != vocab.end(); ++it) {
        const auto id = it.value().get<std::int64_t>();
        if (id < 0 || static_cast<std::size_t>(id) >= tokens.size() || seen[static_cast<std::size_t>(id)]) {
          throw data_error("vocabulary ids must be dense in [0, vocab_size)");
        }
        seen[static_cast<std::size_t>(id)] = true;
        tokens[static_cast<std::size_t>(id)] = it.key();
      }
      const auto& sp = j.at("specials");
      if (sp.at("pad") != SpecialIds::pad || sp.at("unk") != SpecialIds::unk || sp.at("cls") != SpecialIds::cls ||
          sp.at("sep") != SpecialIds::sep || sp.at("mask") != SpecialIds::mask) {
        throw data_error("special token ids must be pad=0 unk=1 cls=2 sep=3 mask=4");
      }
      std::vector<Merge> merges;
      for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
      return TokenizerModel(std::move(tokens), std::move(merges), j.at("marker").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw data_error(std::string("malformed vocabulary file: ") + e.what());
    }
  }

  std::string serialize() const { return to_json().dump(1) + "\n"; }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

  static TokenizerModel load(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    try {
      return from_json(nlohmann::json::parse(bytes));
    } catch (const nlohmann::json::parse_error& e) {
      throw data_error("malformed vocabulary file " + path.string() + ": " + e.what());
    }
  }


 private:
  static std::uint64_t pair_key(std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }

  void encode_word(std::string_view word, std::vector<std::int32_t>& out) const {
    std::vector<std::int32_t> syms;
    auto lookup = [&](const std::string& s) {
      auto it = ids_.find(s);
      return it == ids_.end() ? SpecialIds::unk : it->second;
    };
    syms.push_back(lookup(marker_));
    for (const auto& ch : text::utf8_chars(word)) syms.push_back(lookup(ch));
    while (syms.size() > 1) {
      std::int32_t best_rank = -1, best_out = -1;
      std::uint64_t best_key = 0;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = merge_rank_.find(pair_key(syms[i], syms[i + 1]));
        if (it != merge_rank_.end() && (best_rank < 0 || it->second.first < best_rank)) {
          best_rank = it->second.first;
          best_out = it->second.second;
          best_key = it->first;
        }
      }
      if (best_rank < 0) break;
      std::vector<std::int32_t> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && pair_key(syms[i], syms[i + 1]) == best_key) {
          next.push_back(best_out);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms.swap(next);
    }
    out.insert(out.end(), syms.begin(), syms.end());
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, std::pair<std::int32_t, std::int32_t>> merge_rank_;  // -> (rank, output id)
  std::string marker_;
};

struct TrainOptions {
  std::size_t vocab_size = 8192;
  std::uint64_t seed = 0;
  std::size_t min_frequency = 2;  // pairs seen fewer times are never merged
  std::size_t max_documents = 0;  // > 0: seeded reservoir sample of the input
};

namespace detail {

class BpeTrainer {
 public:
  explicit BpeTrainer(const TrainOptions& opts) : opts_(opts), queue_(QueueOrder{&symbols_}) {}

  void add_text(std::string_view raw) {
    const std::string norm = text::normalize(raw);
    for (auto word : text::split_words(norm)) {
      auto [it, inserted] = word_index_.try_emplace(std::string(word), words_.size());
      if (inserted) words_.push_back({std::string(word), {}, 0});
      words_[it->second].count += 1;
    }
  }

  TokenizerModel train() {
    if (words_.empty()) throw data_error("cannot train a tokenizer on an empty corpus");
    // Base alphabet: marker plus every code point, sorted bytewise.
    std::set<std::string> alphabet{std::string(default_marker)};
    for (const auto& w : words_) {
      for (auto& ch : text::utf8_chars(w.text)) alphabet.insert(std::move(ch));
    }
    const std::size_t minimum = SpecialIds::count + alphabet.size() + 1;
    if (opts_.vocab_size < minimum) {
      throw contract_error("vocab_size " + std::to_string(opts_.vocab_size) + " is too small for the " +
                           std::to_string(alphabet.size()) + "-symbol base alphabet; required minimum is " +
                           std::to_string(minimum));
    }
    for (const auto& s : alphabet) intern(s);
    for (auto& w : words_) {
      w.symbols.push_back(symbol_ids_.at(std::string(default_marker)));
      for (const auto& ch : text::utf8_chars(w.text)) w.symbols.push_back(symbol_ids_.at(ch));
    }
    for (std::uint32_t wi = 0; wi < words_.size(); ++wi) {
      const auto& w = words_[wi];
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) {
        const auto key = pair_key(w.symbols[i], w.symbols[i + 1]);
        pair_count_[key] += static_cast<std::int64_t>(w.count);
        pair_words_[key].push_back(wi);
      }
    }
    for (const auto& [key, count] : pair_count_) queue_.insert({count, first(key), second(key)});

    std::vector<Merge> merges;
    std::size_t vocab = SpecialIds::count + alphabet.size();
    while (vocab < opts_.vocab_size && !queue_.empty()) {
      const Entry best = *queue_.begin();
      if (best.count < static_cast<std::int64_t>(std::max<std::size_t>(opts_.min_frequency, 1))) break;
      const std::string merged = symbols_[static_cast<std::size_t>(best.left)] + symbols_[static_cast<std::size_t>(best.right)];
      const bool fresh = !symbol_ids_.contains(merged);
      const std::int32_t out = intern(merged);
      if (fresh) {
        ++vocab;
        learned_.push_back(merged);
      }
      merges.emplace_back(symbols_[static_cast<std::size_t>(best.left)], symbols_[static_cast<std::size_t>(best.right)]);
      apply_merge(best.left, best.right, out);
    }

    std::vector<std::string> tokens;
    for (auto name : special_names) tokens.emplace_back(name);
    tokens.insert(tokens.end(), alphabet.begin(), alphabet.end());
    tokens.insert(tokens.end(), learned_.begin(), learned_.end());
    return TokenizerModel(std::move(tokens), std::move(merges));
  }

 private:
  struct Word {
    std::string text;
    std::vector<std::int32_t> symbols;
    std::size_t count;
  };
  struct Entry {
    std::int64_t count;
    std::int32_t left, right;
  };
  // Highest count first, then bytewise smallest (left, right).
  struct QueueOrder {
    const std::vector<std::string>* symbols;
    bool operator()(const Entry& x, const Entry& y) const {
      if (x.count != y.count) return x.count > y.count;
      const auto& sx = *symbols;
      if (x.left != y.left) return sx[static_cast<std::size_t>(x.left)] < sx[static_cast<std::size_t>(y.left)];
      return sx[static_cast<std::size_t>(x.right)] < sx[static_cast<std::size_t>(y.right)];
    }
  };

  static std::uint64_t pair_key(std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }
  static std::int32_t first(std::uint64_t k) { return static_cast<std::int32_t>(k >> 32); }
  static std::int32_t second(std::uint64_t k) { return static_cast<std::int32_t>(k & 0xffffffffu); }

  std::int32_t intern(const std::string& s) {
    auto [it, inserted] = symbol_ids_.try_emplace(s, static_cast<std::int32_t>(symbols_.size()));
    if (inserted) symbols_.push_back(s);
    return it->second;
  }

  void apply_merge(std::int32_t a, std::int32_t b, std::int32_t out) {
    const auto key = pair_key(a, b);
    auto words = std::move(pair_words_[key]);
    pair_words_.erase(key);
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    std::unordered_map<std::uint64_t, std::int64_t> delta;
    for (auto wi : words) {
      auto& w = words_[wi];
      auto& syms = w.symbols;
      bool present = false;
      for (std::size_t i = 0; i + 1 < syms.size() && !present; ++i) present = syms[i] == a && syms[i + 1] == b;
      if (!present) continue;
      const auto c = static_cast<std::int64_t>(w.count);
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) delta[pair_key(syms[i], syms[i + 1])] -= c;
      std::vector<std::int32_t> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
          next.push_back(out);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms.swap(next);
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        const auto k = pair_key(syms[i], syms[i + 1]);
        delta[k] += c;
        if (syms[i] == out || syms[i + 1] == out) pair_words_[k].push_back(wi);
      }
    }
    for (const auto& [k, d] : delta) {
      if (d == 0) continue;
      auto it = pair_count_.find(k);
      const std::int64_t old = it == pair_count_.end() ? 0 : it->second;
      if (old > 0) queue_.erase({old, first(k), second(k)});
      const std::int64_t now = old + d;
      if (now > 0) {
        pair_count_[k] = now;
        queue_.insert({now, first(k), second(k)});
      } else if (it != pair_count_.end()) {
        pair_count_.erase(it);
      }
    }
  }

  TrainOptions opts_;
  std::vector<Word> words_;
  std::unordered_map<std::string, std::size_t> word_index_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, std::int32_t> symbol_ids_;
  std::vector<std::string> learned_;
  std::unordered_map<std::uint64_t, std::int64_t> pair_count_;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> pair_words_;
  std::set<Entry, QueueOrder> queue_;
};

}  // namespace detail

/// Learns a BPE vocabulary from a range of texts. Deterministic for a fixed
/// input order and seed; the seed only matters when max_documents subsamples.
template <std::ranges::input_range R>
  requires std::convertible_to<std::ranges::range_reference_t<R>, std::string_view>
TokenizerModel train_tokenizer(R&& texts, const TrainOptions& options) {
  detail::BpeTrainer trainer(options);
  if (options.max_documents == 0) {
    for (auto&& t : texts) trainer.add_text(std::string_view(t));
    return trainer.train();
  }
  std::vector<std::string> reservoir;
  Rng rng = Rng(options.seed).split("tokenizer-sample");
  std::uint64_t seen = 0;
  for (auto&& t : texts) {
    if (reservoir.size() < options.max_documents) {
      reservoir.emplace_back(std::string_view(t));
    } else {
      const auto j = rng.below(seen + 1);
      if (j < options.max_documents) reservoir[j] = std::string(std::string_view(t));
    }
    ++seen;
  }
  for (const auto& t : reservoir) trainer.add_text(t);
  return trainer.train();
}

}  // namespace lusoforge::tokenizer
