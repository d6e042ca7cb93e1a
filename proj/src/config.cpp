#include "htrvt/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace htr {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected a non-negative integer");
  return out;
}

double parse_double(const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("expected a number");
  }
  if (used != v.size()) throw std::invalid_argument("expected a number");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("expected true or false");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string fmt(bool v) { return v ? "true" : "false"; }

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define HTR_UINT(expr)                                                                                   \
  Field {                                                                                                \
    [](TrainConfig& c, const std::string& v) { expr = static_cast<std::remove_reference_t<decltype(expr)>>(parse_uint(v)); }, \
        [](const TrainConfig& c) { return std::to_string(expr); }                                        \
  }
#define HTR_DOUBLE(expr)                                                  \
  Field {                                                                 \
    [](TrainConfig& c, const std::string& v) { expr = parse_double(v); }, \
        [](const TrainConfig& c) { return fmt(expr); }                    \
  }
#define HTR_BOOL(expr)                                                  \
  Field {                                                               \
    [](TrainConfig& c, const std::string& v) { expr = parse_bool(v); }, \
        [](const TrainConfig& c) { return fmt(static_cast<bool>(expr)); } \
  }
#define HTR_STRING(expr)                                     \
  Field {                                                    \
    [](TrainConfig& c, const std::string& v) { expr = v; }, \
        [](const TrainConfig& c) { return expr; }            \
  }

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> f = {
      {"profile", HTR_STRING(c.profile)},
      {"seed", HTR_UINT(c.seed)},
      {"train_manifest", HTR_STRING(c.train_manifest)},
      {"val_manifest", HTR_STRING(c.val_manifest)},
      {"out_dir", HTR_STRING(c.out_dir)},
      {"input_h", HTR_UINT(c.extractor.input_h)},
      {"input_w", HTR_UINT(c.extractor.input_w)},
      {"cnn_stem", HTR_UINT(c.extractor.stem)},
      {"cnn_widths",
       Field{[](TrainConfig& c, const std::string& v) {
               std::vector<std::size_t> w;
               std::stringstream ss(v);
               std::string part;
               while (std::getline(ss, part, ',')) w.push_back(parse_uint(trim(part)));
               if (w.size() != 3) throw std::invalid_argument("expected three comma-separated widths");
               c.extractor.widths = {w[0], w[1], w[2]};
             },
             [](const TrainConfig& c) {
               const auto& w = c.extractor.widths;
               return std::to_string(w[0]) + "," + std::to_string(w[1]) + "," + std::to_string(w[2]);
             }}},
      {"cnn_blocks", HTR_UINT(c.extractor.blocks_per_stage)},
      {"dim", HTR_UINT(c.encoder.dim)},
      {"heads", HTR_UINT(c.encoder.heads)},
      {"blocks", HTR_UINT(c.encoder.blocks)},
      {"ffn", HTR_UINT(c.encoder.ffn)},
      {"mask_ratio", HTR_DOUBLE(c.mask.ratio)},
      {"mask_span", HTR_UINT(c.mask.span)},
      {"max_lr", HTR_DOUBLE(c.schedule.max_lr)},
      {"floor_lr", HTR_DOUBLE(c.schedule.floor_lr)},
      {"warmup_iters", HTR_UINT(c.schedule.warmup_iters)},
      {"total_iters", HTR_UINT(c.schedule.total_iters)},
      {"weight_decay", HTR_DOUBLE(c.adamw.weight_decay)},
      {"exempt_1d_decay", HTR_BOOL(c.adamw.exempt_1d)},
      {"beta1", HTR_DOUBLE(c.adamw.beta1)},
      {"beta2", HTR_DOUBLE(c.adamw.beta2)},
      {"adam_eps", HTR_DOUBLE(c.adamw.eps)},
      {"sam_rho", HTR_DOUBLE(c.sam.rho)},
      {"ema_decay", HTR_DOUBLE(c.ema_decay)},
      {"batch_size", HTR_UINT(c.batch_size)},
      {"val_every", HTR_UINT(c.val_every)},
      {"checkpoint_every", HTR_UINT(c.checkpoint_every)},
      {"keep_snapshots", HTR_BOOL(c.keep_snapshots)},
      {"log_every", HTR_UINT(c.log_every)},
      {"augment", HTR_BOOL(c.augment.enabled)},
      {"aug_probability", HTR_DOUBLE(c.augment.probability)},
      {"aug_rotation_deg", HTR_DOUBLE(c.augment.rotation_deg)},
      {"aug_shear_deg", HTR_DOUBLE(c.augment.shear_deg)},
      {"aug_scale_min", HTR_DOUBLE(c.augment.scale_min)},
      {"aug_scale_max", HTR_DOUBLE(c.augment.scale_max)},
      {"aug_translate", HTR_DOUBLE(c.augment.translate)},
      {"aug_brightness_min", HTR_DOUBLE(c.augment.brightness_min)},
      {"aug_brightness_max", HTR_DOUBLE(c.augment.brightness_max)},
      {"aug_contrast_min", HTR_DOUBLE(c.augment.contrast_min)},
      {"aug_contrast_max", HTR_DOUBLE(c.augment.contrast_max)},
      {"aug_elastic_alpha", HTR_DOUBLE(c.augment.elastic_alpha)},
      {"aug_elastic_sigma", HTR_DOUBLE(c.augment.elastic_sigma)},
  };
  return f;
}

const Field* find_field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return &f;
  }
  return nullptr;
}

}  // namespace

TrainConfig TrainConfig::full() { return TrainConfig{}; }

TrainConfig TrainConfig::tiny() {
  TrainConfig c;
  c.profile = "tiny";
  c.extractor.input_h = 32;
  c.extractor.input_w = 128;
  c.extractor.stem = 8;
  c.extractor.widths = {8, 16, 32};
  c.extractor.blocks_per_stage = 1;
  c.extractor.dim = 32;
  c.encoder.dim = 32;
  c.encoder.heads = 2;
  c.encoder.blocks = 1;
  c.encoder.ffn = 128;
  // 32 tokens instead of 128: keep each span the same fraction of the line.
  c.mask.span = 2;
  c.schedule.warmup_iters = 100;
  c.schedule.total_iters = 2000;
  c.ema_decay = 0.99;
  c.batch_size = 8;
  c.val_every = 200;
  c.checkpoint_every = 500;
  return c;
}

TrainConfig TrainConfig::parse(const std::string& text, const std::filesystem::path& base_dir) {
  struct Line {
    std::size_t no;
    std::string key, value;
  };
  std::vector<Line> lines;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t no = 0;
  std::string profile = "full";
  while (std::getline(in, raw)) {
    ++no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(no) + ": expected key = value");
    Line l{no, trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    if (!find_field(l.key)) throw std::invalid_argument("config line " + std::to_string(no) + ": unknown key '" + l.key + "'");
    if (!seen.insert(l.key).second) {
      throw std::invalid_argument("config line " + std::to_string(no) + ": key '" + l.key + "' given twice");
    }
    if (l.key == "profile") profile = l.value;
    lines.push_back(std::move(l));
  }
  TrainConfig c;
  if (profile == "tiny") {
    c = tiny();
  } else if (profile != "full") {
    throw std::invalid_argument("config: profile must be 'full' or 'tiny', got '" + profile + "'");
  }
  for (const auto& l : lines) {
    try {
      find_field(l.key)->set(c, l.value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(l.no) + ": key '" + l.key + "': " + e.what() +
                                  ", got '" + l.value + "'");
    }
  }
  auto resolve = [&base_dir](std::string& p) {
    if (!p.empty() && !base_dir.empty() && std::filesystem::path(p).is_relative()) p = (base_dir / p).lexically_normal().string();
  };
  resolve(c.train_manifest);
  resolve(c.val_manifest);
  resolve(c.out_dir);
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str(), path.parent_path());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

ModelConfig TrainConfig::model(std::size_t num_classes) const {
  ModelConfig m;
  m.extractor = extractor;
  m.encoder = encoder;
  m.num_classes = num_classes;
  return m;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("config: key '" + key + "': " + why);
  };
  if (extractor.dim != encoder.dim) fail("dim", "extractor and encoder widths differ");
  try {
    extractor.validate();
  } catch (const std::invalid_argument& e) {
    fail("input_h/input_w/cnn_*", e.what());
  }
  try {
    encoder.validate();
  } catch (const std::invalid_argument& e) {
    fail("dim/heads/blocks/ffn", e.what());
  }
  try {
    mask.validate();
  } catch (const std::invalid_argument& e) {
    fail("mask_ratio/mask_span", e.what());
  }
  try {
    schedule.validate();
  } catch (const std::invalid_argument& e) {
    fail("warmup_iters/total_iters/max_lr/floor_lr", e.what());
  }
  try {
    sam.validate();
  } catch (const std::invalid_argument& e) {
    fail("sam_rho", e.what());
  }
  try {
    augment.validate();
  } catch (const std::invalid_argument& e) {
    fail("aug_*", e.what());
  }
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) fail("ema_decay", "must lie in [0, 1]");
  if (batch_size == 0) fail("batch_size", "must be positive");
  if (val_every == 0) fail("val_every", "must be positive");
  if (checkpoint_every == 0) fail("checkpoint_every", "must be positive");
  if (log_every == 0) fail("log_every", "must be positive");
  if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0)) fail("beta1", "must lie in [0, 1)");
  if (!(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0)) fail("beta2", "must lie in [0, 1)");
  if (!(adamw.eps > 0.0)) fail("adam_eps", "must be positive");
  if (!(adamw.weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
}

}  // namespace htr
