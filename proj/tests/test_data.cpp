#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "gloss/data.hpp"
#include "support.hpp"

using namespace gloss;
using testing_support::scratch_dir;

namespace {

Tensor<double> square(std::vector<double> v) {
  const auto n = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(v.size()))));
  return Tensor<double>({1, n, n}, std::move(v));
}

PatchSet numbered_set(std::size_t count) {
  PatchSet s;
  s.pixels.resize(count * kPatchSide * kPatchSide);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t p = 0; p < kPatchSide * kPatchSide; ++p) {
      s.pixels[i * kPatchSide * kPatchSide + p] = static_cast<std::uint8_t>((i * 37 + p * 11) % 251);
    }
    s.class_ids.push_back(static_cast<std::int64_t>(i / 3));
  }
  return s;
}

}  // namespace

TEST(Augment, RotationExampleAndGroupStructure) {
  const auto x = square({1, 2, 3, 4});
  EXPECT_EQ(augment(x, 1).vec(), (std::vector<double>{3, 1, 4, 2}));
  EXPECT_EQ(augment(augment(x, 2), 2).vec(), x.vec());
  EXPECT_EQ(augment(augment(x, 4), 4).vec(), x.vec());
  EXPECT_EQ(augment(augment(x, 5), 5).vec(), x.vec());
  std::mt19937_64 rng(1);
  const auto y = testing_support::random_tensor({1, 5, 5}, rng);
  std::set<std::vector<double>> distinct;
  for (int k = 0; k < kNumAugmentations; ++k) {
    EXPECT_EQ(augment(augment(y, k), augment_inverse(k)).vec(), y.vec()) << k;
    distinct.insert(augment(y, k).vec());
  }
  EXPECT_LE(distinct.size(), 6u);
  EXPECT_EQ(augment(augment(augment(x, 1), 1), 1).vec(), augment(x, 3).vec());
  EXPECT_THROW(augment(x, 6), UsageError);
}

TEST(Preprocess, AffineEndpoints) {
  EXPECT_DOUBLE_EQ(preprocess_value<double>(0), -0.8);
  EXPECT_DOUBLE_EQ(preprocess_value<double>(255), 0.79375);
  EXPECT_EQ(preprocess_value<double>(128), 0.0);
  for (int v = 0; v < 256; ++v) {
    EXPECT_NEAR(preprocess_value<double>(static_cast<std::uint8_t>(v)) * 160.0 + 128.0, v, 1e-12);
  }
}

TEST(CentralSurround, ConstantCropAndCheckerboard) {
  const auto c = central_surround_split(Tensor<double>({1, 1, 64, 64}, 0.25));
  for (double v : c.central.values()) EXPECT_EQ(v, 0.25);
  for (double v : c.surround.values()) EXPECT_EQ(v, 0.25);

  Tensor<double> board({1, 1, 64, 64});
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t q = 0; q < 64; ++q) board.at(0, 0, r, q) = static_cast<double>((r + q) % 2);
  for (double v : central_surround_split(board).surround.values()) EXPECT_EQ(v, 0.5);

  Tensor<double> block({1, 1, 64, 64});
  for (std::size_t r = 16; r < 48; ++r)
    for (std::size_t q = 16; q < 48; ++q) block.at(0, 0, r, q) = static_cast<double>(r * 64 + q);
  const auto cb = central_surround_split(block);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t q = 0; q < 32; ++q) EXPECT_EQ(cb.central.at(0, 0, r, q), (r + 16) * 64.0 + q + 16);
  EXPECT_THROW(central_surround_split(Tensor<double>({1, 1, 32, 32})), DimensionError);
}

TEST(Ubc, MosaicIndexingAndRoundTrip) {
  const auto dir = scratch_dir("ubc");
  GrayImage mosaic{kMosaicSide, kMosaicSide, std::vector<std::uint8_t>(kMosaicSide * kMosaicSide, 0)};
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 64; c < 128; ++c) mosaic.pixels[r * kMosaicSide + c] = 7;
  write_bmp_gray(dir / "patches0000.bmp", mosaic);
  std::ofstream(dir / "info.txt") << "10 0\n10 0\n11 0\n";
  const auto set = load_ubc(dir, "liberty");
  ASSERT_EQ(set.size(), 3u);
  for (auto v : set.patch(1)) EXPECT_EQ(v, 7);
  for (auto v : set.patch(0)) EXPECT_EQ(v, 0);
  EXPECT_EQ(set.class_ids, (std::vector<std::int64_t>{10, 10, 11}));

  const auto dir2 = scratch_dir("ubc_roundtrip");
  const auto big = numbered_set(300);  // spans two mosaics
  save_ubc(dir2, big);
  const auto back = load_ubc(dir2, "liberty");
  EXPECT_EQ(back.pixels, big.pixels);
  EXPECT_EQ(back.class_ids, big.class_ids);
  // re-assembling the extracted patches reproduces the mosaic bytes
  const auto m0 = read_bmp_gray(dir2 / "patches0000.bmp");
  for (std::size_t i = 0; i < kPatchesPerMosaic; ++i) {
    const std::size_t row = i / kPatchesPerRow, col = i % kPatchesPerRow;
    for (std::size_t r = 0; r < kPatchSide; ++r)
      for (std::size_t c = 0; c < kPatchSide; ++c)
        ASSERT_EQ(m0.pixels[(row * kPatchSide + r) * kMosaicSide + col * kPatchSide + c],
                  back.patch(i)[r * kPatchSide + c]);
  }
}

TEST(Ubc, IngestionErrors) {
  const auto dir = scratch_dir("ubc_bad");
  EXPECT_THROW(load_ubc(dir, "liberty"), IngestionError);  // no info file
  std::string info;
  for (int i = 0; i < 257; ++i) info += "1 0\n";
  std::ofstream(dir / "info.txt") << info;
  write_bmp_gray(dir / "patches0000.bmp",
                 {kMosaicSide, kMosaicSide, std::vector<std::uint8_t>(kMosaicSide * kMosaicSide, 3)});
  try {
    load_ubc(dir, "liberty");
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("patches0001.bmp"), std::string::npos) << e.what();
  }
  write_bmp_gray(dir / "patches0001.bmp", {512, 512, std::vector<std::uint8_t>(512 * 512, 3)});
  EXPECT_THROW(load_ubc(dir, "liberty"), IngestionError);
  std::ofstream(dir / "info.txt") << "1 0\nx 0\n";
  try {
    load_ubc(dir, "liberty");
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  std::ofstream(dir / "patches0000.bmp") << "BMtruncated";
  std::ofstream(dir / "info.txt") << "1 0\n";
  EXPECT_THROW(load_ubc(dir, "liberty"), IngestionError);
}

TEST(Pairs, ParsingAndLabels) {
  const auto dir = scratch_dir("pairs");
  std::ofstream(dir / "m50_2_2_0.txt") << "0 0 0 1 0 0 0\n0 0 0 5 3 0 0\n";
  const auto p = load_eval_pairs(dir, "m50_2_2_0.txt");
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p.first[0], 0u);
  EXPECT_EQ(p.second[0], 1u);
  EXPECT_TRUE(p.matching[0]);
  EXPECT_FALSE(p.matching[1]);

  std::ofstream os(dir / "ten.txt");
  for (int i = 0; i < 10; ++i) os << 2 * i << ' ' << i << " 0 " << 2 * i + 1 << ' ' << (i % 2 ? i : i + 100) << " 0 0\n";
  os.close();
  const auto t = load_eval_pairs(dir, "ten.txt");
  EXPECT_EQ(t.size(), 10u);
  EXPECT_EQ(std::count(t.matching.begin(), t.matching.end(), true), 5);

  std::ofstream(dir / "bad.txt") << "0 0 0 1 0 0 0\n0 0 0 1\n";
  try {
    load_eval_pairs(dir, "bad.txt");
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}

TEST(Triplets, ForcedStructureAndEmpty) {
  const std::vector<std::int64_t> ids = {5, 5, 9};
  const auto t = sample_triplets(ids, 50, 3);
  ASSERT_EQ(t.size(), 50u);
  for (const auto& x : t) {
    EXPECT_EQ(x.negative, 2u);
    EXPECT_NE(x.anchor, x.positive);
    EXPECT_LT(x.anchor, 2u);
    EXPECT_LT(x.positive, 2u);
  }
  EXPECT_TRUE(sample_triplets(ids, 0, 3).empty());
  EXPECT_THROW(sample_triplets(std::vector<std::int64_t>{1, 2, 3}, 5, 0), UsageError);
  EXPECT_THROW(sample_triplets(std::vector<std::int64_t>{1, 1}, 5, 0), UsageError);
  EXPECT_EQ(sample_triplets(ids, 20, 11), sample_triplets(ids, 20, 11));
}

TEST(Triplets, ClassConstraintAndUniformity) {
  std::vector<std::int64_t> ids;
  for (int c = 0; c < 10; ++c)
    for (int k = 0; k < 3 + c % 3; ++k) ids.push_back(c);
  const auto t = sample_triplets(ids, 1000, 2024);
  std::map<std::pair<std::int64_t, std::int64_t>, int> cells;
  for (const auto& x : t) {
    ASSERT_EQ(ids[x.anchor], ids[x.positive]);
    ASSERT_NE(x.anchor, x.positive);
    ASSERT_NE(ids[x.anchor], ids[x.negative]);
    ++cells[{ids[x.anchor], ids[x.negative]}];
  }
  // every (anchor class, negative class) cell has probability 1/90
  const double expected = 1000.0 / 90.0;
  double chi2 = 0;
  for (int a = 0; a < 10; ++a)
    for (int b = 0; b < 10; ++b)
      if (a != b) chi2 += std::pow(cells[{a, b}] - expected, 2) / expected;
  EXPECT_LT(chi2, 135.98);  // 0.999 quantile of chi-square with 89 degrees of freedom
}

TEST(Triplets, FromPairProtocol) {
  const std::vector<std::int64_t> ids = {0, 0, 1, 1, 2};
  PairList pairs;
  pairs.add(0, 1, true);
  pairs.add(2, 3, true);
  pairs.add(0, 4, false);
  const auto t = sample_triplets_from_pairs(ids, pairs, 40, 1);
  ASSERT_EQ(t.size(), 40u);
  for (const auto& x : t) {
    EXPECT_EQ(ids[x.anchor], ids[x.positive]);
    EXPECT_NE(ids[x.anchor], ids[x.negative]);
  }
}

TEST(Batches, AugmentationIsSharedAcrossTriplet) {
  Tensor<double> items({3, 1, 4, 4});
  for (std::size_t i = 0; i < items.size(); ++i) items[i] = static_cast<double>(i % 16);  // identical items
  const TripletDataset<double> d(items, {{0, 1, 2}, {1, 0, 2}}, true);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::vector<std::size_t> idx = {0, 1};
    const auto b = d.batch(idx, rng);
    EXPECT_EQ(b.anchors.vec(), b.positives.vec());
    EXPECT_EQ(b.anchors.vec(), b.negatives.vec());
  }
  EXPECT_THROW(TripletDataset<double>(items, {{0, 1, 3}}, false), UsageError);
}

TEST(Toy, FlipsAndDeterminism) {
  const auto a = make_toy_set(17);
  EXPECT_EQ(a.size(), 80u);
  EXPECT_EQ(a.flipped_indices.size(), 4u);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < a.size(); ++i) changed += a.labels[i] != a.true_labels[i];
  EXPECT_EQ(changed, 4u);
  const auto b = make_toy_set(17);
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(toy_set_csv(a), toy_set_csv(b));
  EXPECT_EQ(toy_set_csv(a).substr(0, 17), "x,y,label,flipped");
}

TEST(Toy, ClassMeansWithinThreeSigma) {
  const ToyOptions o;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = make_toy_set(seed, o);
    for (int cls = 0; cls < 2; ++cls) {
      double mx = 0, my = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.true_labels[i] != cls) continue;
        mx += s.points[i][0] / 40;
        my += s.points[i][1] / 40;
      }
      const auto& m = cls ? o.mean1 : o.mean0;
      EXPECT_LT(std::abs(mx - m[0]), 3 * o.sigma / std::sqrt(40.0));
      EXPECT_LT(std::abs(my - m[1]), 3 * o.sigma / std::sqrt(40.0));
    }
  }
}

TEST(Synthetic, FixtureShapeAndBalancedPairs) {
  SyntheticOptions o;
  o.classes = 20;
  const auto s = make_synthetic_patches(3, o);
  EXPECT_EQ(s.size(), 80u);
  EXPECT_EQ(s.pixels.size(), 80u * kPatchSide * kPatchSide);
  const auto p = make_balanced_pairs(s, 100, 4);
  EXPECT_EQ(p.size(), 100u);
  EXPECT_EQ(std::count(p.matching.begin(), p.matching.end(), true), 50);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(p.matching[i], s.class_ids[p.first[i]] == s.class_ids[p.second[i]]);
    EXPECT_NE(p.first[i], p.second[i]);
  }
  const auto again = make_synthetic_patches(3, o);
  EXPECT_EQ(again.pixels, s.pixels);
}
