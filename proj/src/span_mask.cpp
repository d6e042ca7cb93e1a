#include "htrvt/span_mask.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "htrvt/ops.hpp"

namespace htr {

void MaskConfig::validate() const {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in [0, 1)");
  if (ratio > 0.0 && span == 0) throw std::invalid_argument("mask span must be at least 1");
}

std::size_t SpanMask::popcount() const {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
}

SpanMask sample_span_mask(std::size_t length, const MaskConfig& cfg, Rng& rng) {
  cfg.validate();
  SpanMask m;
  m.flags.assign(length, false);
  m.target_count = static_cast<std::size_t>(std::floor(cfg.ratio * static_cast<double>(length)));
  if (m.target_count == 0) return m;

  const std::size_t span = std::min(cfg.span, length);
  std::size_t count = 0;
  std::size_t last_start = 0;
  std::vector<bool> newly(length, false);
  while (count < m.target_count) {
    last_start = static_cast<std::size_t>(rng.uniform_int(0, length - span));
    std::fill(newly.begin(), newly.end(), false);
    for (std::size_t i = last_start; i < last_start + span; ++i) {
      if (!m.flags[i]) {
        m.flags[i] = true;
        newly[i] = true;
        ++count;
      }
    }
    m.starts.push_back(last_start);
    ++m.draws;
  }
  // Trim the surplus from the tail of the final span; only positions that
  // span newly set are eligible, so earlier spans stay intact.
  for (std::size_t i = last_start + span; count > m.target_count && i-- > last_start;) {
    if (newly[i]) {
      m.flags[i] = false;
      --count;
    }
  }
  return m;
}

template <typename T>
Var<T> apply_span_mask(Var<T> tokens, const std::vector<SpanMask>& masks, Var<T> mask_token) {
  const auto& tv = tokens.value();
  if (tv.rank() != 3) throw std::invalid_argument("apply_span_mask: expected tokens [N,L,C], got " + shape_str(tv.shape()));
  if (masks.empty()) return tokens;
  const std::size_t n = tv.dim(0), len = tv.dim(1), c = tv.dim(2);
  if (masks.size() != n) {
    throw std::invalid_argument("apply_span_mask: " + std::to_string(masks.size()) + " masks for batch of " +
                                std::to_string(n));
  }
  if (mask_token.value().numel() != c) {
    throw std::invalid_argument("apply_span_mask: mask token width " + std::to_string(mask_token.value().numel()) +
                                " != token width " + std::to_string(c));
  }
  std::vector<std::size_t> rows(n * len);
  const std::size_t token_row = n * len;
  for (std::size_t b = 0; b < n; ++b) {
    if (masks[b].flags.size() != len) {
      throw std::invalid_argument("apply_span_mask: mask length " + std::to_string(masks[b].flags.size()) +
                                  " != token count " + std::to_string(len));
    }
    for (std::size_t i = 0; i < len; ++i) rows[b * len + i] = masks[b].flags[i] ? token_row : b * len + i;
  }
  auto table = ad::concat<T>({ad::reshape(tokens, {n * len, c}), ad::reshape(mask_token, {1, c})}, 0);
  return ad::reshape(ad::gather_rows(table, rows), {n, len, c});
}

template Var<float> apply_span_mask(Var<float>, const std::vector<SpanMask>&, Var<float>);
template Var<double> apply_span_mask(Var<double>, const std::vector<SpanMask>&, Var<double>);

}  // namespace htr
