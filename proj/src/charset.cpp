#include "htrvt/charset.hpp"

#include <algorithm>
#include <stdexcept>

namespace htr {

std::u32string utf8_decode(std::string_view s) {
  std::u32string out;
  std::size_t i = 0;
  auto fail = [&i]() -> void {
    throw std::invalid_argument("malformed UTF-8 at byte " + std::to_string(i));
  };
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len;
    char32_t cp;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      fail();
      return out;
    }
    if (i + len > s.size()) fail();
    for (std::size_t k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) fail();
      cp = (cp << 6) | (b & 0x3F);
    }
    static constexpr char32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) fail();
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string utf8_encode(char32_t c) {
  std::string out;
  if (c < 0x80) {
    out.push_back(static_cast<char>(c));
  } else if (c < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (c >> 6)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else if (c < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (c >> 12)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (c >> 18)));
    out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  }
  return out;
}

std::string utf8_encode(std::u32string_view s) {
  std::string out;
  for (char32_t c : s) out += utf8_encode(c);
  return out;
}

Charset::Charset(std::u32string chars) : chars_(std::move(chars)) {
  std::sort(chars_.begin(), chars_.end());
  chars_.erase(std::unique(chars_.begin(), chars_.end()), chars_.end());
  for (std::size_t i = 0; i < chars_.size(); ++i) ids_.emplace(chars_[i], static_cast<int>(i) + 1);
}

Charset Charset::from_transcripts(const std::vector<std::string>& transcripts) {
  if (transcripts.empty()) throw std::invalid_argument("cannot build a charset from an empty manifest");
  std::u32string all;
  for (const auto& t : transcripts) all += utf8_decode(t);
  return Charset(std::move(all));
}

std::optional<int> Charset::id(char32_t c) const {
  if (auto it = ids_.find(c); it != ids_.end()) return it->second;
  return std::nullopt;
}

char32_t Charset::character(int id) const {
  if (id < 1 || static_cast<std::size_t>(id) > chars_.size()) {
    throw std::out_of_range("character id " + std::to_string(id) + " outside 1.." + std::to_string(chars_.size()));
  }
  return chars_[static_cast<std::size_t>(id) - 1];
}

Charset::Encoded Charset::encode(std::string_view text) const {
  Encoded out;
  for (char32_t c : utf8_decode(text)) {
    if (auto i = id(c)) {
      out.ids.push_back(*i);
    } else {
      out.unknown.push_back(c);
    }
  }
  return out;
}

std::string Charset::decode(const std::vector<int>& ids) const {
  std::u32string s;
  for (int i : ids) s.push_back(character(i));
  return utf8_encode(s);
}

}  // namespace htr
