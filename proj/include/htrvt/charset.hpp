#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace htr {

/// Decodes UTF-8 into Unicode scalar values; throws on malformed input.
std::u32string utf8_decode(std::string_view s);
std::string utf8_encode(std::u32string_view s);
std::string utf8_encode(char32_t c);

/// Ordered character inventory. Id 0 is the CTC blank; characters occupy
/// ids 1..K in ascending scalar-value order.
class Charset {
 public:
  static constexpr int kBlank = 0;

  Charset() = default;
  /// Builds from any characters; duplicates are merged and order normalised.
  explicit Charset(std::u32string chars);
  /// Union of the characters of every transcript. Throws when the list is empty.
  static Charset from_transcripts(const std::vector<std::string>& transcripts);

  /// K, not counting the blank.
  std::size_t size() const { return chars_.size(); }
  std::size_t num_classes() const { return chars_.size() + 1; }
  const std::u32string& chars() const { return chars_; }

  std::optional<int> id(char32_t c) const;
  char32_t character(int id) const;

  struct Encoded {
    std::vector<int> ids;
    /// Characters absent from the charset, in order of appearance.
    std::u32string unknown;
  };
  /// Unknown characters are reported rather than thrown; their ids are omitted.
  Encoded encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

  /// UTF-8 serialisation of the ordered characters.
  std::string to_utf8() const { return utf8_encode(chars_); }
  static Charset from_utf8(std::string_view s) { return Charset(utf8_decode(s)); }

  bool operator==(const Charset& other) const { return chars_ == other.chars_; }

 private:
  std::u32string chars_;
  std::unordered_map<char32_t, int> ids_;
};

}  // namespace htr
