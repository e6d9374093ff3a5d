#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>
#include <unicode/uchar.h>

#include "lusoforge/core/error.hpp"
#include "lusoforge/core/parallel.hpp"
#include "lusoforge/core/random.hpp"
#include "lusoforge/corpus/document.hpp"
#include "lusoforge/tokenizer/bpe.hpp"
#include "lusoforge/tokenizer/normalize.hpp"

namespace lusoforge::corpus {

// ---------------------------------------------------------------------------
// Country-code TLD filter

/// Lower-cased host of a URL, without userinfo, port or trailing dot.
inline std::optional<std::string> url_hostname(std::string_view url) {
  while (!url.empty() && (url.front() == ' ' || url.front() == '\t')) url.remove_prefix(1);
  while (!url.empty() && (url.back() == ' ' || url.back() == '\t')) url.remove_suffix(1);
  if (const auto p = url.find("://"); p != std::string_view::npos) {
    url.remove_prefix(p + 3);
  } else if (url.starts_with("//")) {
    url.remove_prefix(2);
  }
  auto authority = url.substr(0, url.find_first_of("/?#"));
  if (const auto at = authority.rfind('@'); at != std::string_view::npos) authority.remove_prefix(at + 1);
  std::string host;
  if (authority.starts_with('[')) {
    host = std::string(authority.substr(1, authority.find(']') - 1));
  } else {
    host = std::string(authority.substr(0, authority.find(':')));
  }
  for (auto& c : host) c = static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c);
  while (!host.empty() && host.back() == '.') host.pop_back();
  if (host.empty()) return std::nullopt;
  return host;
}

inline std::string normalize_country_code(std::string_view cc) {
  auto ascii_letter = [](char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); };
  if (cc.size() != 2 || !ascii_letter(cc[0]) || !ascii_letter(cc[1])) {
    throw contract_error("country code must be two ASCII letters, got '" + std::string(cc) + "'");
  }
  std::string out(cc);
  for (auto& c : out) c = static_cast<char>(c | 0x20);
  return out;
}

/// Reject reason under the TLD filter, or nullopt to keep.
inline std::optional<std::string> tld_rejection(const Document& d, std::string_view country_code) {
  if (!d.url || d.url->find_first_not_of(" \t") == std::string::npos) return "no-url";
  const auto host = url_hostname(*d.url);
  if (!host) return "bad-url";
  const std::string suffix = "." + normalize_country_code(country_code);
  if (host->size() <= suffix.size() || !host->ends_with(suffix)) return "tld-mismatch";
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Quality filter

struct QualityThresholds {
  std::size_t min_chars = 200;
  std::size_t min_words = 40;
  std::size_t char_ngram = 10;
  double max_char_repetition = 0.106;
  std::size_t word_ngram = 5;
  double max_word_repetition = 0.19;
  double max_non_alpha = 0.4;
  double max_url_ratio = 0.2;
};

struct QualityMetrics {
  std::size_t chars = 0;
  std::size_t words = 0;
  double char_repetition = 0.0;
  double word_repetition = 0.0;
  double non_alpha = 0.0;
  double url_ratio = 0.0;
};

namespace detail {

inline bool looks_like_url(std::string_view w) {
  return w.starts_with("http://") || w.starts_with("https://") || w.starts_with("www.") ||
         w.find("://") != std::string_view::npos;
}

/// Lower-cased words with leading/trailing punctuation removed.
inline std::vector<std::u32string> repetition_words(const std::vector<char32_t>& cps) {
  std::vector<std::u32string> words;
  std::u32string cur;
  auto flush = [&] {
    std::size_t b = 0, e = cur.size();
    while (b < e && u_ispunct(static_cast<UChar32>(cur[b]))) ++b;
    while (e > b && u_ispunct(static_cast<UChar32>(cur[e - 1]))) --e;
    if (e > b) words.push_back(cur.substr(b, e - b));
    cur.clear();
  };
  for (char32_t c : cps) {
    if (text::is_space(c)) {
      flush();
    } else {
      cur.push_back(static_cast<char32_t>(u_tolower(static_cast<UChar32>(c))));
    }
  }
  flush();
  return words;
}

}  // namespace detail

/// Share of character n-gram occurrences taken by the sqrt(#distinct) most
/// frequent n-grams (counting only n-grams that repeat).
inline double char_repetition_ratio(const std::vector<char32_t>& cps, std::size_t n) {
  if (n == 0 || cps.size() < n) return 0.0;
  std::unordered_map<std::u32string, std::size_t> freq;
  for (std::size_t i = 0; i + n <= cps.size(); ++i) ++freq[std::u32string(cps.begin() + i, cps.begin() + i + n)];
  std::vector<std::size_t> counts;
  counts.reserve(freq.size());
  std::size_t total = 0, singletons = 0;
  for (const auto& [g, c] : freq) {
    counts.push_back(c);
    total += c;
    singletons += c == 1;
  }
  std::sort(counts.rbegin(), counts.rend());
  const auto top = std::min(static_cast<std::size_t>(std::sqrt(static_cast<double>(counts.size()))),
                            counts.size() - singletons);
  std::size_t rep = 0;
  for (std::size_t i = 0; i < top; ++i) rep += counts[i];
  return static_cast<double>(rep) / static_cast<double>(total);
}

/// Share of word n-gram occurrences whose n-gram occurs more than once.
inline double word_repetition_ratio(const std::vector<std::u32string>& words, std::size_t n) {
  if (n == 0 || words.size() < n) return 0.0;
  std::unordered_map<std::u32string, std::size_t> freq;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    std::u32string key;
    for (std::size_t k = 0; k < n; ++k) {
      if (k) key.push_back(U' ');
      key += words[i + k];
    }
    ++freq[key];
  }
  std::size_t total = 0, rep = 0;
  for (const auto& [g, c] : freq) {
    total += c;
    if (c > 1) rep += c;
  }
  return static_cast<double>(rep) / static_cast<double>(total);
}

inline QualityMetrics quality_metrics(std::string_view text_in, const QualityThresholds& t = {}) {
  QualityMetrics m;
  const auto cps = text::code_points(text_in);
  m.chars = cps.size();
  std::size_t non_space = 0, non_alpha = 0;
  for (char32_t c : cps) {
    if (text::is_space(c)) continue;
    ++non_space;
    non_alpha += !text::is_letter(c);
  }
  m.non_alpha = non_space ? static_cast<double>(non_alpha) / static_cast<double>(non_space) : 0.0;
  const auto tokens = text::split_words(text::collapse_whitespace(text_in));
  m.words = tokens.size();
  std::size_t urls = 0;
  for (auto w : tokens) urls += detail::looks_like_url(w);
  m.url_ratio = tokens.empty() ? 0.0 : static_cast<double>(urls) / static_cast<double>(tokens.size());
  m.char_repetition = char_repetition_ratio(cps, t.char_ngram);
  m.word_repetition = word_repetition_ratio(detail::repetition_words(cps), t.word_ngram);
  return m;
}

/// First failing quality stage, or nullopt to keep. Word repetition is checked
/// before character repetition.
inline std::optional<std::string> quality_rejection(std::string_view text_in, const QualityThresholds& t = {}) {
  const auto m = quality_metrics(text_in, t);
  if (m.chars < t.min_chars) return "min-length";
  if (m.words < t.min_words) return "min-words";
  if (m.word_repetition > t.max_word_repetition) return "word-repetition";
  if (m.char_repetition > t.max_char_repetition) return "char-repetition";
  if (m.non_alpha > t.max_non_alpha) return "non-alpha";
  if (m.url_ratio > t.max_url_ratio) return "url-ratio";
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Deduplication

inline std::uint64_t content_hash(std::string_view text_in) { return fnv1a64(text::collapse_whitespace(text_in)); }

namespace detail {

inline std::vector<std::uint64_t> shingles(std::string_view text_in, std::size_t n) {
  const std::string collapsed = text::collapse_whitespace(text_in);
  const auto words = text::split_words(collapsed);
  std::vector<std::uint64_t> out;
  if (words.size() < n) {
    out.push_back(fnv1a64(collapsed));
  } else {
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      std::uint64_t h = 0xcbf29ce484222325ULL;
      for (std::size_t k = 0; k < n; ++k) h = fnv1a64(" ", fnv1a64(words[i + k], h));
      out.push_back(h);
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline double jaccard(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter, ++i, ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

}  // namespace detail

struct Rejection {
  std::string id;
  std::string stage;
  std::string reason;
};

struct StageResult {
  std::vector<Document> kept;
  std::vector<Rejection> rejected;
};

inline StageResult filter_by_tld(const std::vector<Document>& docs, std::string_view country_code) {
  normalize_country_code(country_code);
  StageResult r;
  for (const auto& d : docs) {
    if (auto why = tld_rejection(d, country_code)) {
      r.rejected.push_back({d.id, "tld", *why});
    } else {
      r.kept.push_back(d);
    }
  }
  return r;
}

/// Exact duplicates by 64-bit hash of whitespace-collapsed text; first occurrence wins.
inline StageResult deduplicate(const std::vector<Document>& docs) {
  StageResult r;
  std::unordered_set<std::uint64_t> seen;
  for (const auto& d : docs) {
    if (seen.insert(content_hash(d.text)).second) {
      r.kept.push_back(d);
    } else {
      r.rejected.push_back({d.id, "dedup", "duplicate"});
    }
  }
  return r;
}

/// Drops documents whose word-shingle Jaccard similarity to an earlier kept
/// document reaches `threshold`. Quadratic in the number of kept documents.
inline StageResult near_deduplicate(const std::vector<Document>& docs, double threshold = 0.8,
                                    std::size_t shingle_size = 5) {
  StageResult r;
  std::vector<std::vector<std::uint64_t>> kept_shingles;
  for (const auto& d : docs) {
    auto s = detail::shingles(d.text, shingle_size);
    bool dup = false;
    for (const auto& k : kept_shingles) {
      if (detail::jaccard(s, k) >= threshold) {
        dup = true;
        break;
      }
    }
    if (dup) {
      r.rejected.push_back({d.id, "near-dedup", "near-duplicate"});
    } else {
      kept_shingles.push_back(std::move(s));
      r.kept.push_back(d);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Statistics and the full pipeline

struct SourceStats {
  std::size_t documents = 0;
  std::size_t tokens = 0;
  double document_share = 0.0;
  double token_share = 0.0;
};

struct StageCount {
  std::string stage;
  std::size_t input = 0;
  std::size_t kept = 0;
  std::size_t rejected = 0;
};

struct FilterReport {
  std::vector<StageCount> stages;
  std::map<std::string, std::size_t> reasons;
  std::map<Source, SourceStats> sources;
  std::size_t documents = 0;
  std::size_t tokens = 0;
  std::string token_unit = "whitespace";

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["documents"] = documents;
    j["tokens"] = tokens;
    j["token_unit"] = token_unit;
    auto st = nlohmann::ordered_json::array();
    for (const auto& s : stages) {
      st.push_back({{"stage", s.stage}, {"input", s.input}, {"kept", s.kept}, {"rejected", s.rejected}});
    }
    j["stages"] = st;
    j["rejection_reasons"] = nlohmann::ordered_json::object();
    for (const auto& [r, n] : reasons) j["rejection_reasons"][r] = n;
    j["sources"] = nlohmann::ordered_json::object();
    for (Source s : all_sources) {
      const auto it = sources.find(s);
      const SourceStats v = it == sources.end() ? SourceStats{} : it->second;
      j["sources"][std::string(source_name(s))] = {{"documents", v.documents},
                                                   {"document_share", v.document_share},
                                                   {"tokens", v.tokens},
                                                   {"token_share", v.token_share}};
    }
    return j;
  }
};

/// Per-source document and token counts with their shares. Tokens are
/// whitespace-separated words, or subwords when a tokenizer is given.
inline FilterReport corpus_stats(const std::vector<Document>& docs,
                                 const tokenizer::TokenizerModel* tok = nullptr) {
  FilterReport r;
  if (tok) r.token_unit = "subword";
  for (Source s : all_sources) r.sources[s] = {};
  for (const auto& d : docs) {
    const std::size_t n = tok ? tok->encode_words(d.text).size()
                              : text::split_words(text::collapse_whitespace(d.text)).size();
    auto& s = r.sources[d.source];
    ++s.documents;
    s.tokens += n;
    ++r.documents;
    r.tokens += n;
  }
  for (auto& [src, s] : r.sources) {
    if (r.documents) s.document_share = static_cast<double>(s.documents) / static_cast<double>(r.documents);
    if (r.tokens) s.token_share = static_cast<double>(s.tokens) / static_cast<double>(r.tokens);
  }
  return r;
}

struct PipelineOptions {
  std::optional<std::string> country_code;         // no TLD filtering when unset
  std::vector<Source> tld_sources{Source::oscar};  // empty: every source
  bool quality = true;
  QualityThresholds thresholds;
  bool dedup = true;
  bool near_dedup = false;
  double near_threshold = 0.8;
  std::size_t shingle_size = 5;
  std::size_t threads = 1;
};

struct PipelineResult {
  std::vector<Document> kept;
  std::vector<Rejection> rejected;
  FilterReport report;
};

/// TLD and quality filters (per document, parallel), then the sequential dedup
/// stages. Kept documents stay in input order.
inline PipelineResult run_pipeline(const std::vector<Document>& docs, const PipelineOptions& opt = {},
                                   const tokenizer::TokenizerModel* tok = nullptr) {
  if (opt.country_code) normalize_country_code(*opt.country_code);
  auto tld_applies = [&](const Document& d) {
    return opt.tld_sources.empty() ||
           std::find(opt.tld_sources.begin(), opt.tld_sources.end(), d.source) != opt.tld_sources.end();
  };
  struct Verdict {
    std::string stage, reason;
  };
  const auto verdicts = parallel_map<Verdict>(docs.size(), opt.threads, [&](std::size_t i) -> Verdict {
    const auto& d = docs[i];
    if (opt.country_code && tld_applies(d)) {
      if (auto why = tld_rejection(d, *opt.country_code)) return {"tld", *why};
    }
    if (opt.quality) {
      if (auto why = quality_rejection(d.text, opt.thresholds)) return {"quality", *why};
    }
    return {};
  });

  PipelineResult out;
  StageCount tld{"tld", docs.size(), 0, 0}, quality{"quality", 0, 0, 0};
  std::vector<Document> current;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto& v = verdicts[i];
    if (v.stage == "tld") {
      ++tld.rejected;
      out.rejected.push_back({docs[i].id, v.stage, v.reason});
      continue;
    }
    ++tld.kept;
    ++quality.input;
    if (v.stage == "quality") {
      ++quality.rejected;
      out.rejected.push_back({docs[i].id, v.stage, v.reason});
      continue;
    }
    ++quality.kept;
    current.push_back(docs[i]);
  }
  std::vector<StageCount> stages{tld, quality};

  auto run_stage = [&](const std::string& name, auto&& fn) {
    StageCount c{name, current.size(), 0, 0};
    auto r = fn(current);
    c.kept = r.kept.size();
    c.rejected = r.rejected.size();
    for (auto& rej : r.rejected) out.rejected.push_back(std::move(rej));
    current = std::move(r.kept);
    stages.push_back(c);
  };
  if (opt.dedup) run_stage("dedup", [](const auto& d) { return deduplicate(d); });
  if (opt.near_dedup) {
    run_stage("near-dedup", [&](const auto& d) { return near_deduplicate(d, opt.near_threshold, opt.shingle_size); });
  }

  out.report = corpus_stats(current, tok);
  out.report.stages = std::move(stages);
  for (const auto& r : out.rejected) ++out.report.reasons[r.reason];
  out.kept = std::move(current);
  return out;
}

}  // namespace lusoforge::corpus
