#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "pia/model.hpp"

namespace pia {

// Add-one-smoothed bigram next-token scorer. Stands in for the auxiliary
// language model that ranks semantically plausible continuations.
class OracleLM {
 public:
  OracleLM() = default;

  static OracleLM train(const std::vector<TokenSequence>& docs, std::size_t vocab) {
    detail::require(vocab >= 1, "oracle: vocabulary must be non-empty");
    OracleLM lm;
    lm.vocab_ = vocab;
    lm.bigram_.assign(vocab * vocab, 0);
    lm.prefix_total_.assign(vocab, 0);
    for (const TokenSequence& doc : docs) {
      for (std::size_t i = 0; i + 1 < doc.size(); ++i) {
        const auto prev = static_cast<std::size_t>(doc.ids[i]);
        const auto next = static_cast<std::size_t>(doc.ids[i + 1]);
        detail::require(prev < vocab && next < vocab, "oracle: token id out of range");
        lm.bigram_[prev * vocab + next] += 1;
        lm.prefix_total_[prev] += 1;
      }
    }
    return lm;
  }

  std::size_t vocab() const { return vocab_; }

  // P(next | prev) = (count(prev, next) + 1) / (count(prev, .) + |V|).
  double score(std::int32_t prev, std::int32_t next) const {
    const auto p = static_cast<std::size_t>(prev);
    const auto n = static_cast<std::size_t>(next);
    detail::require(p < vocab_ && n < vocab_, "oracle: token id out of range");
    const double num = static_cast<double>(bigram_[p * vocab_ + n]) + 1.0;
    const double den =
        static_cast<double>(prefix_total_[p]) + static_cast<double>(vocab_);
    return num / den;
  }

  // Top-y tokens by score given the previous token; ties toward smaller id.
  std::vector<std::int32_t> top_next(std::int32_t prev, std::size_t y) const {
    const std::size_t take = std::min(y, vocab_);
    std::vector<std::int32_t> order(vocab_);
    for (std::size_t t = 0; t < vocab_; ++t) order[t] = static_cast<std::int32_t>(t);
    std::stable_sort(order.begin(), order.end(),
                     [this, prev](std::int32_t a, std::int32_t b) {
                       return score(prev, a) > score(prev, b);
                     });
    order.resize(take);
    return order;
  }

 private:
  std::size_t vocab_ = 0;
  std::vector<std::uint32_t> bigram_;        // vocab x vocab counts
  std::vector<std::uint32_t> prefix_total_;  // row sums
};

// Semantic candidate set for the position after `prefix`; empty when the
// prefix is empty or y is zero.
inline std::vector<std::int32_t> semantic_candidates(const OracleLM& oracle,
                                                     const TokenSequence& prefix,
                                                     std::size_t y) {
  if (y == 0 || prefix.ids.empty()) return {};
  return oracle.top_next(prefix.ids.back(), y);
}

}  // namespace pia
