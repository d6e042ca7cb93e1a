#include "htrvt/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <stdexcept>

namespace htr {

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(lineno) + ": ";
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error(where + "missing TAB separator");
    ManifestEntry e{line.substr(0, tab), line.substr(tab + 1)};
    if (e.path.empty()) throw std::runtime_error(where + "empty image path");
    if (e.text.empty()) throw std::runtime_error(where + "empty transcription");
    utf8_decode(e.text);
    if (!std::filesystem::exists(m.resolve(e))) throw std::runtime_error(where + "image not found: " + e.path);
    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& e : m.entries) out << e.path << '\t' << e.text << '\n';
}

Charset build_charset(const Manifest& m) {
  if (m.entries.empty()) throw std::invalid_argument("build_charset: empty manifest");
  std::vector<std::string> texts;
  for (const auto& e : m.entries) texts.push_back(e.text);
  return Charset::from_transcripts(texts);
}

std::vector<Sample> load_samples(const Manifest& m) {
  std::vector<Sample> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) out.push_back({load_pgm(m.resolve(e)), e.text, e.path});
  return out;
}

Batch make_batch(const std::vector<const Sample*>& samples, const std::vector<std::uint64_t>& seeds,
                 const Charset& charset, Mode mode, const BatchOptions& opt) {
  if (samples.empty()) throw std::invalid_argument("make_batch: no samples");
  if (mode == Mode::Train && seeds.size() != samples.size()) {
    throw std::invalid_argument("make_batch: one seed per training sample required");
  }
  Batch b;
  std::vector<Image> images;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = *samples[i];
    auto enc = charset.encode(s.text);
    if (mode == Mode::Train && !enc.unknown.empty()) {
      std::cerr << "warning: skipping training sample " << s.path << ": characters outside charset \""
                << utf8_encode(enc.unknown) << "\"\n";
      continue;
    }
    Image img = prepare(s.image, opt.height, opt.width);
    if (mode == Mode::Train) {
      Rng rng(seeds[i]);
      img = augment(img, opt.augment, rng);
    }
    images.push_back(std::move(img));
    b.labels.push_back(std::move(enc.ids));
    b.texts.push_back(s.text);
    b.source.push_back(i);
    b.unknown.push_back(std::move(enc.unknown));
  }
  if (images.empty()) throw std::runtime_error("make_batch: every sample was skipped");
  const std::size_t plane = opt.height * opt.width;
  b.images = Tensor<float>({images.size(), 1, opt.height, opt.width});
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::copy(images[i].pixels.begin(), images[i].pixels.end(), b.images.ptr() + i * plane);
  }
  return b;
}

}  // namespace htr
