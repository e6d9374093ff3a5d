#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "lusoforge/core/error.hpp"
#include "lusoforge/core/random.hpp"
#include "lusoforge/corpus/document.hpp"
#include "lusoforge/encoder/model.hpp"
#include "lusoforge/tokenizer/bpe.hpp"

namespace lusoforge::pretrain {

using Sequence = std::vector<std::int32_t>;

/// One sequence per document: [CLS] tokens [SEP], truncated to seq_len.
/// Documents with fewer than `min_tokens` content tokens are dropped.
inline std::vector<Sequence> prepare_sequences(const std::vector<corpus::Document>& docs,
                                               const tokenizer::TokenizerModel& tok, std::size_t seq_len,
                                               std::size_t min_tokens = 8) {
  std::vector<Sequence> out;
  for (const auto& d : docs) {
    auto seq = tok.encode(d.text, seq_len, true);
    if (seq.ids.size() < min_tokens + 2) continue;
    out.push_back(std::move(seq.ids));
  }
  return out;
}

/// Sequence indices of each micro-batch for one epoch. The shuffle depends only
/// on (seed, epoch, corpus size); the last batch may be short.
inline std::vector<std::vector<std::size_t>> epoch_order(std::size_t n, std::size_t micro_batch, std::uint64_t seed,
                                                         std::uint64_t epoch) {
  if (n == 0) throw data_error("empty training corpus");
  if (micro_batch == 0) throw contract_error("micro_batch_size must be > 0");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = Rng(seed).split("shuffle", {epoch});
  rng.shuffle(perm.begin(), perm.end());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += micro_batch) {
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                         perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + micro_batch)));
  }
  return batches;
}

/// Rows padded to the longest member (never beyond seq_len); mask marks real tokens.
inline encoder::EncoderInput pad_rows(const std::vector<std::vector<std::int64_t>>& rows, std::size_t seq_len) {
  std::vector<std::vector<std::int64_t>> cut;
  cut.reserve(rows.size());
  for (const auto& r : rows) cut.emplace_back(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(std::min(r.size(), seq_len)));
  return encoder::EncoderInput::pad(cut, {}, tokenizer::SpecialIds::pad);
}

struct MicroBatch {
  std::vector<std::size_t> indices;
  encoder::EncoderInput input;
};

/// Unmasked padded batches for one epoch.
inline std::vector<MicroBatch> make_batches(const std::vector<Sequence>& seqs, std::size_t micro_batch,
                                            std::size_t seq_len, std::uint64_t seed, std::uint64_t epoch = 0) {
  std::vector<MicroBatch> out;
  for (auto& idx : epoch_order(seqs.size(), micro_batch, seed, epoch)) {
    std::vector<std::vector<std::int64_t>> rows;
    for (auto i : idx) rows.emplace_back(seqs[i].begin(), seqs[i].end());
    out.push_back({std::move(idx), pad_rows(rows, seq_len)});
  }
  return out;
}

}  // namespace lusoforge::pretrain
