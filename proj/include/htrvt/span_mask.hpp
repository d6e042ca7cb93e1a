#pragma once

#include <cstddef>
#include <vector>

#include "htrvt/autodiff.hpp"
#include "htrvt/random.hpp"

namespace htr {

struct MaskConfig {
  double ratio = 0.4;    // fraction of tokens replaced
  std::size_t span = 8;  // tokens per drawn span

  void validate() const;
};

struct SpanMask {
  std::vector<bool> flags;
  std::size_t target_count = 0;
  /// Number of spans drawn to reach the target.
  std::size_t draws = 0;
  /// Start of every drawn span, in draw order.
  std::vector<std::size_t> starts;

  std::size_t popcount() const;
};

/// Draws spans of cfg.span consecutive tokens with starts uniform in
/// [0, L - span] until at least floor(ratio * L) tokens are flagged, then
/// unflags the surplus from the tail of the last drawn span so exactly
/// floor(ratio * L) remain. Ratio 0 draws nothing. A span longer than L is
/// clamped to L.
SpanMask sample_span_mask(std::size_t length, const MaskConfig& cfg, Rng& rng);

/// tokens[N, L, C] with every flagged row of sample n replaced by the mask
/// token. masks has one entry per sample; an empty vector means no masking.
/// Implemented as a row gather over [tokens; mask_token], so the mask token
/// receives the summed adjoint of every slot it fills.
template <typename T>
Var<T> apply_span_mask(Var<T> tokens, const std::vector<SpanMask>& masks, Var<T> mask_token);

}  // namespace htr
