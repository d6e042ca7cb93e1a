#include "htrvt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace htr {
namespace {

constexpr char kMagic[8] = {'H', 'T', 'R', 'V', 'T', '0', '0', '1'};

class Writer {
 public:
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  std::vector<std::uint8_t> out;

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw std::runtime_error(std::string("checkpoint truncated reading ") + what + " at byte " + std::to_string(pos_));
    }
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n), "integer");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += n;
    return v;
  }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

const std::string& Checkpoint::state_value(const std::string& key) const {
  for (const auto& [k, v] : state) {
    if (k == key) return v;
  }
  throw std::runtime_error("checkpoint: missing state entry '" + key + "'");
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.out.insert(w.out.end(), std::begin(kMagic), std::end(kMagic));
  w.u32(c.version);
  w.str(c.charset);
  w.str(c.config);
  w.u64(c.iteration);
  w.u32(static_cast<std::uint32_t>(c.state.size()));
  for (const auto& [k, v] : c.state) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.u64(e);
    for (float v : t.data()) w.f32(v);
  }
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint: bad magic (expected HTRVT001)");
  }
  Reader r(bytes.subspan(8));
  Checkpoint c;
  c.version = r.u32();
  if (c.version != Checkpoint::kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(c.version));
  }
  c.charset = r.str();
  c.config = r.str();
  c.iteration = r.u64();
  const std::uint32_t n_state = r.u32();
  for (std::uint32_t i = 0; i < n_state; ++i) {
    auto k = r.str();
    auto v = r.str();
    c.state.emplace_back(std::move(k), std::move(v));
  }
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw std::runtime_error("checkpoint tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& e : shape) {
      e = r.u64();
      if (e == 0 || e > (std::size_t{1} << 32)) throw std::runtime_error("checkpoint tensor '" + name + "' has bad extent");
      numel *= e;
    }
    r.need(numel * 4, "tensor data");
    std::vector<float> data(numel);
    for (auto& v : data) v = r.f32();
    c.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw std::runtime_error("checkpoint has trailing bytes at " + std::to_string(r.pos() + 8));
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(c);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace htr
