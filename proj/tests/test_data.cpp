#include <gtest/gtest.h>

#include <fstream>

#include "htrvt/augment.hpp"
#include "htrvt/dataset.hpp"
#include "htrvt/image.hpp"

using namespace htr;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> bytes(const std::string& header, std::vector<std::uint8_t> payload) {
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("htrvt_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
  return img;
}

std::string error_of(const std::vector<std::uint8_t>& b) {
  try {
    decode_pgm(b);
  } catch (const std::runtime_error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Pgm, HandBuiltTwoByTwo) {
  const auto img = decode_pgm(bytes("P5\n2 2\n255\n", {0, 255, 128, 64}));
  ASSERT_EQ(img.height, 2u);
  ASSERT_EQ(img.width, 2u);
  EXPECT_EQ(img.at(0, 0), 0.0f);
  EXPECT_EQ(img.at(0, 1), 1.0f);
  EXPECT_NEAR(img.at(1, 0), 0.50196, 1e-5);
  EXPECT_NEAR(img.at(1, 1), 0.25098, 1e-5);
}

TEST(Pgm, SingleWhitePixel) {
  const auto img = decode_pgm(bytes("P5 1 1 255\n", {255}));
  EXPECT_EQ(img.pixels, std::vector<float>{1.0f});
}

TEST(Pgm, RejectsAsciiVariantAndBadMaxval) {
  EXPECT_NE(error_of(bytes("P2\n1 1\n255\n", {'0'})).find("magic"), std::string::npos);
  EXPECT_NE(error_of(bytes("P5\n1 1\n65535\n", {0, 0})).find("maxval"), std::string::npos);
}

TEST(Pgm, TruncatedPayloadReportsOffset) {
  const auto msg = error_of(bytes("P5\n3 2\n255\n", {1, 2, 3}));
  EXPECT_NE(msg.find("truncated"), std::string::npos);
  EXPECT_NE(msg.find("byte 14"), std::string::npos) << msg;
}

TEST(Pgm, RoundTripIsBitExact) {
  const auto dir = scratch("pgm");
  const Image img = random_image(7, 13, 1);
  save_pgm(img, dir / "a.pgm");
  const Image back = load_pgm(dir / "a.pgm");
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_EQ(encode_pgm(back), encode_pgm(img));
}

TEST(Prepare, TargetSizeIsIdentity) {
  const Image img = random_image(64, 512, 2);
  const Image out = prepare(img, 64, 512);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) ASSERT_NEAR(out.pixels[i], img.pixels[i], 1e-6);
}

TEST(Prepare, TallInputIsScaledThenPadded) {
  const Image img = random_image(128, 512, 3);
  const Image out = prepare(img, 64, 512);
  ASSERT_EQ(out.height, 64u);
  ASSERT_EQ(out.width, 512u);
  for (std::size_t r = 0; r < 64; ++r) {
    for (std::size_t c = 256; c < 512; ++c) ASSERT_EQ(out.at(r, c), 1.0f);
  }
  // A 2x downscale with half-pixel centres averages each 2x2 block.
  const float expect = (img.at(0, 0) + img.at(0, 1) + img.at(1, 0) + img.at(1, 1)) / 4.0f;
  EXPECT_NEAR(out.at(0, 0), expect, 1e-6);
}

TEST(Prepare, WideInputIsSqueezed) {
  const Image out = prepare(random_image(64, 2000, 4), 64, 512);
  EXPECT_EQ(out.height, 64u);
  EXPECT_EQ(out.width, 512u);
}

TEST(Augment, AllOffIsIdentity) {
  const Image img = random_image(16, 48, 5);
  AugmentConfig cfg;
  cfg.probability = 0.0;
  Rng rng(1);
  AugmentTrace t;
  EXPECT_EQ(augment(img, cfg, rng, &t).pixels, img.pixels);
  EXPECT_FALSE(t.affine || t.erode || t.dilate || t.jitter || t.elastic);
}

TEST(Augment, DilationSpreadsSingleInkPixel) {
  Image img(5, 5, 1.0f);
  img.at(2, 2) = 0.0f;
  const Image out = dilate_ink(img);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      const bool inside = r >= 1 && r <= 3 && c >= 1 && c <= 3;
      EXPECT_EQ(out.at(r, c), inside ? 0.0f : 1.0f) << r << "," << c;
    }
  }
  EXPECT_EQ(erode_ink(img).pixels, std::vector<float>(25, 1.0f));
}

TEST(Augment, ErosionThinsInk) {
  Image img(5, 5, 0.0f);
  img.at(0, 0) = 1.0f;
  const Image out = erode_ink(img);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(out.at(r, c), (r <= 1 && c <= 1) ? 1.0f : 0.0f);
  }
}

TEST(Augment, ZeroRangeJitterIsIdentity) {
  const Image img = random_image(8, 8, 6);
  EXPECT_EQ(color_jitter(img, 1.0, 1.0).pixels, img.pixels);
  AugmentConfig cfg;
  cfg.probability = 1.0;
  cfg.rotation_deg = cfg.shear_deg = cfg.translate = 0.0;
  cfg.scale_min = cfg.scale_max = 1.0;
  cfg.brightness_min = cfg.brightness_max = 1.0;
  cfg.contrast_min = cfg.contrast_max = 1.0;
  cfg.elastic_alpha = 0.0;
  Rng rng(2);
  AugmentTrace t;
  const Image out = augment(img, cfg, rng, &t);
  EXPECT_TRUE(t.erode && !t.dilate);  // erosion wins
  EXPECT_EQ(out.pixels, erode_ink(img).pixels);
}

TEST(Augment, IdentityAffineIsExact) {
  const Image img = random_image(9, 21, 7);
  EXPECT_EQ(affine_warp(img, AffineParams{}).pixels, img.pixels);
}

TEST(Augment, IntegerTranslationShiftsAndFillsWhite) {
  const Image img = random_image(4, 6, 8);
  AffineParams p;
  p.translate_x = 2.0;
  const Image out = affine_warp(img, p);
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_EQ(out.at(r, 0), 1.0f);
    EXPECT_EQ(out.at(r, 1), 1.0f);
    for (std::size_t c = 2; c < 6; ++c) EXPECT_NEAR(out.at(r, c), img.at(r, c - 2), 1e-6);
  }
}

TEST(Augment, SameSeedBitIdenticalAndClamped) {
  const Image img = random_image(32, 128, 9);
  AugmentConfig cfg;
  cfg.probability = 1.0;
  Rng a(42), b(42), c(43);
  const Image x = augment(img, cfg, a), y = augment(img, cfg, b), z = augment(img, cfg, c);
  EXPECT_EQ(x.pixels, y.pixels);
  EXPECT_NE(x.pixels, z.pixels);
  for (float v : x.pixels) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Augment, ElasticPeakDisplacementIsAlpha) {
  // A horizontal ramp turns displacement into an intensity change we can bound.
  Image img(32, 64);
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t c = 0; c < 64; ++c) img.at(r, c) = static_cast<float>(c) / 256.0f;
  }
  Rng rng(3);
  const Image out = elastic_distort(img, 4.0, 6.0, rng);
  double worst = 0.0;
  for (std::size_t r = 8; r < 24; ++r) {
    for (std::size_t c = 8; c < 56; ++c) worst = std::max(worst, std::abs(out.at(r, c) - img.at(r, c)) * 256.0);
  }
  EXPECT_LE(worst, 4.0 + 1e-3);
  EXPECT_GT(worst, 0.1);
}

TEST(Manifest, ParsesAndBuildsCharset) {
  const auto dir = scratch("manifest");
  save_pgm(Image(2, 3), dir / "a.pgm");
  fs::create_directories(dir / "sub");
  save_pgm(Image(2, 3, 0.0f), dir / "sub" / "b.pgm");
  std::ofstream(dir / "m.tsv") << "a.pgm\tab\nsub/b.pgm\tba c\n";
  const auto m = load_manifest(dir / "m.tsv");
  ASSERT_EQ(m.entries.size(), 2u);
  EXPECT_EQ(m.entries[1].text, "ba c");
  const auto cs = build_charset(m);
  EXPECT_EQ(cs.size(), 4u);
  EXPECT_EQ(cs.to_utf8(), " abc");
  const auto samples = load_samples(m);
  EXPECT_EQ(samples[1].image.pixels, std::vector<float>(6, 0.0f));
}

TEST(Manifest, RejectsMalformedLines) {
  const auto dir = scratch("manifest_bad");
  save_pgm(Image(2, 3), dir / "a.pgm");
  std::ofstream(dir / "notab.tsv") << "a.pgm ab\n";
  std::ofstream(dir / "empty.tsv") << "a.pgm\t\n";
  std::ofstream(dir / "missing.tsv") << "zz.pgm\tab\n";
  EXPECT_THROW(load_manifest(dir / "notab.tsv"), std::runtime_error);
  EXPECT_THROW(load_manifest(dir / "empty.tsv"), std::runtime_error);
  EXPECT_THROW(load_manifest(dir / "missing.tsv"), std::runtime_error);
  EXPECT_THROW(build_charset(Manifest{}), std::invalid_argument);
}

TEST(Batch, StacksAndSkipsUnencodableTrainingSamples) {
  const Charset cs = Charset::from_transcripts({"ab"});
  Sample good{random_image(32, 100, 1), "ab", "good"};
  Sample bad{random_image(32, 100, 2), "abz", "bad"};
  BatchOptions opt;
  opt.height = 16;
  opt.width = 64;
  const auto one = make_batch({&good}, {1}, cs, Mode::Train, opt);
  EXPECT_EQ(one.images.shape(), (Shape{1, 1, 16, 64}));
  const auto train = make_batch({&bad, &good}, {1, 2}, cs, Mode::Train, opt);
  EXPECT_EQ(train.labels.size(), 1u);
  EXPECT_EQ(train.source, std::vector<std::size_t>{1});
  EXPECT_EQ(train.labels[0], (std::vector<int>{1, 2}));
  const auto eval = make_batch({&bad, &good}, {}, cs, Mode::Eval, opt);
  EXPECT_EQ(eval.labels.size(), 2u);
  EXPECT_EQ(eval.unknown[0], U"z");
  EXPECT_EQ(cs.decode(eval.labels[1]), "ab");
  EXPECT_THROW(make_batch({&bad}, {1}, cs, Mode::Train, opt), std::runtime_error);
}

TEST(Batch, TrainModeIsReproducible) {
  const Charset cs = Charset::from_transcripts({"ab"});
  Sample s{random_image(32, 100, 3), "ab", "s"};
  BatchOptions opt;
  opt.height = 32;
  opt.width = 128;
  opt.augment.probability = 1.0;
  const auto a = make_batch({&s, &s}, {7, 8}, cs, Mode::Train, opt);
  const auto b = make_batch({&s, &s}, {7, 8}, cs, Mode::Train, opt);
  EXPECT_EQ(a.images.storage(), b.images.storage());
}
