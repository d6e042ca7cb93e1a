#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace htr::metrics {

/// Edit operations turning the prediction into the reference, taken from one
/// optimal alignment.
struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;  // reference elements missing from the prediction
  std::size_t deletions = 0;   // prediction elements absent from the reference
  std::size_t reference_length = 0;

  std::size_t distance() const { return substitutions + insertions + deletions; }
};

/// Unit-cost Levenshtein alignment. Backtracking prefers the diagonal
/// (match/substitution), then deletion, then insertion.
template <typename Seq>
EditCounts levenshtein(const Seq& pred, const Seq& gt) {
  const std::size_t n = pred.size(), m = gt.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (pred[i - 1] == gt[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  EditCounts c;
  c.reference_length = m;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = pred[i - 1] == gt[j - 1];
      if (at(i, j) == at(i - 1, j - 1) + (same ? 0 : 1)) {
        if (!same) ++c.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

std::vector<std::string> split_words(std::string_view text);

EditCounts char_edits(std::string_view pred, std::string_view gt);
EditCounts word_edits(std::string_view pred, std::string_view gt);

/// Character error rate over Unicode scalar values. Rejects an empty reference.
double cer(std::string_view pred, std::string_view gt);
/// Word error rate over whitespace-delimited tokens. Rejects a reference
/// without words.
double wer(std::string_view pred, std::string_view gt);

struct CorpusRates {
  double cer = 0.0;
  double wer = 0.0;
  std::size_t char_edits = 0, char_total = 0;
  std::size_t word_edits = 0, word_total = 0;
};

/// Micro-averaged rates: summed edits over summed reference lengths.
CorpusRates corpus_rates(const std::vector<std::pair<std::string, std::string>>& pred_gt);

}  // namespace htr::metrics
