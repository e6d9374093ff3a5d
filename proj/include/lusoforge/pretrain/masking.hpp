#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lusoforge/core/error.hpp"
#include "lusoforge/core/ops.hpp"
#include "lusoforge/core/random.hpp"
#include "lusoforge/tokenizer/bpe.hpp"

namespace lusoforge::pretrain {

enum class MaskAction : std::uint8_t { none, mask, random, keep };

struct MaskingVocab {
  std::size_t vocab_size = 0;
  std::int64_t mask_id = tokenizer::SpecialIds::mask;
  // ids below this are specials: never selected, never drawn as replacements
  std::int64_t first_regular = tokenizer::SpecialIds::count;
};

struct MaskedSequence {
  std::vector<std::int64_t> input_ids;
  std::vector<std::int64_t> labels;  // original id where selected, ignore_label elsewhere
  std::vector<MaskAction> actions;
};

/// BERT masking: each regular position is selected with probability `mask_rate`;
/// a selected one becomes MASK (80%), a random regular id (10%) or stays (10%).
template <class Id>
MaskedSequence apply_mlm_masking(std::span<const Id> ids, const MaskingVocab& vocab, double mask_rate, Rng& rng) {
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw contract_error("mask_rate must lie in [0, 1]");
  if (vocab.first_regular < 0 || static_cast<std::size_t>(vocab.first_regular) >= vocab.vocab_size) {
    throw contract_error("masking vocabulary has no regular tokens");
  }
  const auto regular = vocab.vocab_size - static_cast<std::size_t>(vocab.first_regular);
  MaskedSequence out;
  out.input_ids.reserve(ids.size());
  out.labels.assign(ids.size(), ad::ignore_label);
  out.actions.assign(ids.size(), MaskAction::none);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = static_cast<std::int64_t>(ids[i]);
    out.input_ids.push_back(id);
    if (id < vocab.first_regular) continue;
    if (!(rng.uniform() < mask_rate)) continue;
    out.labels[i] = id;
    const double u = rng.uniform();
    if (u < 0.8) {
      out.input_ids[i] = vocab.mask_id;
      out.actions[i] = MaskAction::mask;
    } else if (u < 0.9) {
      out.input_ids[i] = vocab.first_regular + static_cast<std::int64_t>(rng.below(regular));
      out.actions[i] = MaskAction::random;
    } else {
      out.actions[i] = MaskAction::keep;
    }
  }
  return out;
}

}  // namespace lusoforge::pretrain
