#include "htrvt/metrics.hpp"

#include <stdexcept>

#include "htrvt/charset.hpp"

namespace htr::metrics {
namespace {

bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\v' || c == U'\f' || c == 0x85 ||
         c == 0xA0 || c == 0x1680 || (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 ||
         c == 0x202F || c == 0x205F || c == 0x3000;
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::u32string cur;
  for (char32_t c : utf8_decode(text)) {
    if (is_space(c)) {
      if (!cur.empty()) words.push_back(utf8_encode(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(utf8_encode(cur));
  return words;
}

EditCounts char_edits(std::string_view pred, std::string_view gt) {
  const auto g = utf8_decode(gt);
  if (g.empty()) throw std::invalid_argument("CER undefined for an empty reference");
  return levenshtein(utf8_decode(pred), g);
}

EditCounts word_edits(std::string_view pred, std::string_view gt) {
  const auto g = split_words(gt);
  if (g.empty()) throw std::invalid_argument("WER undefined for a reference without words");
  return levenshtein(split_words(pred), g);
}

double cer(std::string_view pred, std::string_view gt) {
  const auto c = char_edits(pred, gt);
  return static_cast<double>(c.distance()) / static_cast<double>(c.reference_length);
}

double wer(std::string_view pred, std::string_view gt) {
  const auto c = word_edits(pred, gt);
  return static_cast<double>(c.distance()) / static_cast<double>(c.reference_length);
}

CorpusRates corpus_rates(const std::vector<std::pair<std::string, std::string>>& pred_gt) {
  CorpusRates r;
  for (const auto& [pred, gt] : pred_gt) {
    const auto c = char_edits(pred, gt);
    const auto w = word_edits(pred, gt);
    r.char_edits += c.distance();
    r.char_total += c.reference_length;
    r.word_edits += w.distance();
    r.word_total += w.reference_length;
  }
  if (r.char_total == 0) throw std::invalid_argument("corpus_rates: no reference text");
  r.cer = static_cast<double>(r.char_edits) / static_cast<double>(r.char_total);
  r.wer = static_cast<double>(r.word_edits) / static_cast<double>(r.word_total);
  return r;
}

}  // namespace htr::metrics
