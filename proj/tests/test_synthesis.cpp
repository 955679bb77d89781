#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "pgl/data.hpp"
#include "pgl/synthesis.hpp"

using namespace pgl;

namespace {

std::vector<double> one_hot(std::size_t n, std::size_t k) {
  std::vector<double> y(n, 0.0);
  y[k] = 1.0;
  return y;
}

Tensor square_mask(std::size_t h, std::size_t w, std::size_t r0, std::size_t c0, std::size_t side) {
  std::vector<double> m(h * w, 0.0);
  for (std::size_t r = r0; r < r0 + side; ++r)
    for (std::size_t c = c0; c < c0 + side; ++c) m[r * w + c] = 1.0;
  return Tensor({h, w}, std::move(m));
}

double mask_iou(const Tensor& a, const Tensor& b) {
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    inter += a[i] == 1.0 && b[i] == 1.0;
    uni += a[i] == 1.0 || b[i] == 1.0;
  }
  return uni == 0 ? 1.0 : inter / uni;
}

}  // namespace

TEST(Cutmix, FourByFourCornerCut) {
  Rng rng(1);
  Tensor a = oracle::random_tensor({4, 4, 2}, rng), b = oracle::random_tensor({4, 4, 2}, rng);
  SyntheticSample s = cutmix_with_box(a, one_hot(3, 0), b, one_hot(3, 2), Box{0, 0, 2, 2});
  std::size_t from_b = 0;
  for (std::size_t p = 0; p < 16; ++p) {
    const bool in_cut = p / 4 < 2 && p % 4 < 2;
    from_b += in_cut;
    for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(s.x_tilde[p * 2 + k], (in_cut ? b : a)[p * 2 + k]);
  }
  EXPECT_EQ(from_b, 4u);
  EXPECT_DOUBLE_EQ(*s.lambda, 0.75);
  EXPECT_DOUBLE_EQ(s.y_tilde[0], 0.75);
  EXPECT_DOUBLE_EQ(s.y_tilde[1], 0.0);
  EXPECT_DOUBLE_EQ(s.y_tilde[2], 0.25);
  EXPECT_EQ(s.masks.size(), 2u);
  EXPECT_EQ(s.masks[0].count_ones(), 12u);
  EXPECT_EQ(s.class_a, 0u);
  EXPECT_EQ(s.class_b, 2u);
}

TEST(Cutmix, EmptyRectangleKeepsA) {
  Rng rng(2);
  Tensor a = oracle::random_tensor({5, 5, 1}, rng), b = oracle::random_tensor({5, 5, 1}, rng);
  SyntheticSample s = cutmix_with_box(a, one_hot(2, 0), b, one_hot(2, 1), Box{2, 2, 2, 2});
  EXPECT_EQ(s.x_tilde.values(), a.values());
  EXPECT_EQ(s.y_tilde, one_hot(2, 0));
  EXPECT_DOUBLE_EQ(*s.lambda, 1.0);
}

TEST(Cutmix, FullRectangleGivesB) {
  Rng rng(3);
  Tensor a = oracle::random_tensor({5, 5, 3}, rng), b = oracle::random_tensor({5, 5, 3}, rng);
  SyntheticSample s = cutmix_with_box(a, one_hot(2, 0), b, one_hot(2, 1), Box{0, 0, 5, 5});
  EXPECT_EQ(s.x_tilde.values(), b.values());
  EXPECT_EQ(s.y_tilde, one_hot(2, 1));
  EXPECT_DOUBLE_EQ(*s.lambda, 0.0);
}

TEST(Cutmix, ProvenanceIsPixelExactOverRandomCases) {
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = 2 + rng.below(15), w = 2 + rng.below(15), c = 1 + rng.below(3), n = 2 + rng.below(4);
    Tensor a = oracle::random_tensor({h, w, c}, rng);
    std::vector<double> bv = oracle::random_tensor({h, w, c}, rng).values();
    // Some pixels agree in both sources.
    for (std::size_t i = 0; i < bv.size(); ++i) {
      if (rng.bernoulli(0.1)) bv[i] = a[i];
    }
    Tensor b({h, w, c}, bv);
    const std::size_t ya = rng.below(n), yb = rng.below(n);
    SyntheticSample s = cutmix(a, one_hot(n, ya), b, one_hot(n, yb), rng);
    const Tensor& ia = s.masks[0].values();
    const Tensor& ib = s.masks[1].values();
    std::size_t ones = 0;
    for (std::size_t p = 0; p < h * w; ++p) {
      ASSERT_EQ(ia[p] + ib[p], 1.0);
      ones += ia[p] == 1.0;
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = p * c + k;
        if (a[i] == b[i]) continue;
        ASSERT_EQ(s.x_tilde[i] == a[i], ia[p] == 1.0) << "trial " << trial;
        ASSERT_EQ(s.x_tilde[i] == b[i], ib[p] == 1.0) << "trial " << trial;
      }
    }
    ASSERT_DOUBLE_EQ(*s.lambda, static_cast<double>(ones) / static_cast<double>(h * w));
    double total = 0.0;
    for (double v : s.y_tilde) total += v;
    ASSERT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Cutmix, RejectsMismatchedShapesAndBadLabels) {
  Rng rng(5);
  Tensor a = Tensor::zeros({4, 4, 1}), b = Tensor::zeros({4, 5, 1});
  EXPECT_THROW(cutmix(a, one_hot(2, 0), b, one_hot(2, 1), rng), ShapeError);
  EXPECT_THROW(cutmix(a, {0.5, 0.5}, a, one_hot(2, 1), rng), Error);
  EXPECT_THROW(cutmix(a, one_hot(2, 0), a, one_hot(3, 1), rng), Error);
}

TEST(SkeletonMix, SingleGroupTakesEverythingFromB) {
  Rng rng(6);
  Tensor fa = oracle::random_tensor({3, 2, 4}, rng, 0.0, 1.0), fb = oracle::random_tensor({3, 2, 4}, rng, 0.0, 1.0);
  SyntheticSample s = skeleton_feature_mix(fa, one_hot(2, 0), fb, one_hot(2, 1), 1);
  EXPECT_EQ(s.masks[0].count_ones(), 0u);
  EXPECT_EQ(s.x_tilde.values(), fb.values());
  EXPECT_EQ(s.y_tilde, one_hot(2, 1));
}

TEST(SkeletonMix, TwoSkeletonsSplitBetweenSources) {
  Rng rng(7);
  Tensor fa = oracle::random_tensor({2, 3, 2}, rng, 0.0, 1.0), fb = oracle::random_tensor({2, 3, 2}, rng, 0.0, 1.0);
  SyntheticSample s = skeleton_feature_mix(fa, one_hot(2, 0), fb, one_hot(2, 1), 2);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(s.x_tilde[i], i < 6 ? fb[i] : fa[i]);
  EXPECT_DOUBLE_EQ(*s.lambda, 0.5);
}

TEST(SkeletonMix, MatchesHandAssembledTensor) {
  Rng rng(8);
  Tensor fa = oracle::random_tensor({4, 2, 3}, rng, 0.0, 2.0), fb = oracle::random_tensor({4, 2, 3}, rng, 0.0, 2.0);
  SyntheticSample s = skeleton_feature_mix(fa, one_hot(3, 1), fb, one_hot(3, 2), 2);
  std::vector<double> expected;
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t i = 0; i < 6; ++i) {
      const double keep_a = p >= 2 ? fa[p * 6 + i] : 0.0;
      const double keep_b = p < 2 ? fb[p * 6 + i] : 0.0;
      expected.push_back(std::max(keep_a, keep_b));
    }
  EXPECT_EQ(s.x_tilde.values(), expected);
  EXPECT_DOUBLE_EQ(*s.lambda, 0.5);
  EXPECT_DOUBLE_EQ(s.y_tilde[1], 0.5);
  EXPECT_DOUBLE_EQ(s.y_tilde[2], 0.5);
}

TEST(SkeletonMix, RejectsIndivisibleGroupCount) {
  Tensor f = Tensor::ones({3, 2, 2});
  EXPECT_THROW(skeleton_feature_mix(f, one_hot(2, 0), f, one_hot(2, 1), 2), Error);
  EXPECT_THROW(skeleton_feature_mix(f, one_hot(2, 0), Tensor::ones({3, 2, 3}), one_hot(2, 1), 1), ShapeError);
}

TEST(SkeletonMix, GradientReachesBothSources) {
  TapeScope scope;
  Tensor fa({2, 1, 1}, {1.0, 2.0}, true), fb({2, 1, 1}, {3.0, 4.0}, true);
  Tensor mixed = mix_features(fa, fb, skeleton_mask(2, 1, 1, 2).values());
  auto g = grad(sum(mixed), {fa, fb});
  EXPECT_EQ(g[0].values(), (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(g[1].values(), (std::vector<double>{1.0, 0.0}));
}

TEST(SimulatedEdit, ZeroAmplitudeIsIdentity) {
  Rng rng(9);
  Tensor x = oracle::random_tensor({8, 8, 3}, rng);
  Tensor target = square_mask(8, 8, 2, 2, 3);
  EditResult e = simulated_edit(x, target, 0.0, rng);
  EXPECT_EQ(e.x_edited.values(), x.values());
  for (std::size_t p = 0; p < 64; ++p) EXPECT_EQ(e.true_edit_region[p], 1.0 - target[p]);
}

TEST(SimulatedEdit, ChangesEveryNonTargetPixelOnly) {
  Rng rng(10);
  Tensor x = oracle::random_tensor({8, 8, 2}, rng);
  Tensor target = square_mask(8, 8, 1, 4, 4);
  EditResult e = simulated_edit(x, target, 0.7, rng);
  for (std::size_t p = 0; p < 64; ++p)
    for (std::size_t k = 0; k < 2; ++k) {
      if (target[p] == 1.0) {
        EXPECT_EQ(e.x_edited[p * 2 + k], x[p * 2 + k]);
      } else {
        EXPECT_GE(std::fabs(e.x_edited[p * 2 + k] - x[p * 2 + k]), 0.35 - 1e-12);
      }
    }
}

TEST(SimulatedEdit, RejectsMisalignedTarget) {
  Rng rng(11);
  EXPECT_THROW(simulated_edit(Tensor::zeros({4, 4, 1}), Tensor::zeros({4, 5}), 0.5, rng), ShapeError);
  EXPECT_THROW(simulated_edit(Tensor::zeros({4, 4, 1}), Tensor::zeros({4, 4}), -1.0, rng), Error);
}

TEST(DiffMask, IdenticalImagesGiveAllOnes) {
  Rng rng(12);
  Tensor x = oracle::random_tensor({6, 6, 3}, rng);
  DiffMaskResult r = diff_mask(x, x);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.mask.count_ones(), 36u);
  EXPECT_EQ(r.mask.role(), MaskRole::edit_target);
}

TEST(DiffMask, BimodalDifferenceSeparatesHalves) {
  Rng rng(13);
  Tensor x = oracle::random_tensor({4, 6, 2}, rng);
  std::vector<double> y = x.values();
  for (std::size_t p = 12; p < 24; ++p)
    for (std::size_t k = 0; k < 2; ++k) y[p * 2 + k] += (k == 0 ? 1.0 : -1.0);
  DiffMaskResult r = diff_mask(x, Tensor(x.shape(), y));
  EXPECT_FALSE(r.degenerate);
  for (std::size_t p = 0; p < 24; ++p) EXPECT_EQ(r.mask.values()[p], p < 12 ? 1.0 : 0.0);
}

TEST(DiffMask, RecoversToyEditsAtHalfAmplitude) {
  ToyDatasetSpec spec;
  spec.n_train = 100;
  spec.n_test = 1;
  Dataset d = generate_image_dataset(spec).train;
  Rng rng(14);
  double total = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    EditResult e = simulated_edit(d.sample(i), d.target_mask(i), 0.5, rng);
    total += mask_iou(diff_mask(d.sample(i), e.x_edited).mask.complement().values(), e.true_edit_region);
  }
  EXPECT_GE(total / static_cast<double>(d.size()), 0.95);
}

TEST(Otsu, TwoEqualClustersCutAtFirstEdge) {
  std::vector<double> v(50, 0.0);
  v.insert(v.end(), 50, 1.0);
  const double t = otsu_threshold(v);
  EXPECT_DOUBLE_EQ(t, 1.0 / 256.0);
  EXPECT_DOUBLE_EQ(t, oracle::otsu_bruteforce(v));
}

TEST(Otsu, ImbalanceDoesNotMoveTheCut) {
  std::vector<double> v(90, 0.0);
  v.insert(v.end(), 10, 1.0);
  const double t = otsu_threshold(v);
  EXPECT_GT(t, 0.0);
  EXPECT_LT(t, 1.0);
  EXPECT_DOUBLE_EQ(t, oracle::otsu_bruteforce(v));
}

TEST(Otsu, ThreeClustersMatchBruteForce) {
  std::vector<double> v;
  for (double c : {0.0, 0.5, 1.0}) v.insert(v.end(), 20, c);
  EXPECT_DOUBLE_EQ(otsu_threshold(v), oracle::otsu_bruteforce(v));
}

TEST(Otsu, RandomHistogramsMatchBruteForce) {
  Rng rng(15);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v;
    const std::size_t clusters = 1 + rng.below(4);
    for (std::size_t c = 0; c < clusters; ++c) {
      const double centre = rng.uniform(-2.0, 2.0), spread = rng.uniform(0.0, 0.5);
      const std::size_t count = 1 + rng.below(80);
      for (std::size_t i = 0; i < count; ++i) v.push_back(centre + spread * rng.normal());
    }
    if (trial % 4 == 0) {
      for (auto& x : v) x = std::round(x * 20.0);
    }
    v.push_back(v.front() + 1.0);
    const std::size_t bins = trial % 5 == 0 ? 2 + rng.below(30) : 256;
    ASSERT_EQ(otsu_threshold(v, bins), oracle::otsu_bruteforce(v, bins)) << "trial " << trial;
  }
}

TEST(Otsu, RejectsDegenerateInput) {
  EXPECT_THROW(otsu_threshold(std::vector<double>(5, 2.0)), Error);
  EXPECT_THROW(otsu_threshold(std::vector<double>{}), Error);
  EXPECT_THROW(otsu_threshold(std::vector<double>{0.0, 1.0}, 1), Error);
}

TEST(PerturbMask, ZeroDeltaIsIdentity) {
  ProvenanceMask m(square_mask(8, 8, 2, 2, 3), MaskRole::edit_target);
  PerturbResult r = perturb_mask(m, Morphology::dilate, 0.0);
  EXPECT_EQ(r.mask.values().values(), m.values().values());
  EXPECT_EQ(r.iterations, 0u);
  EXPECT_EQ(r.realized_delta, 0.0);
}

TEST(PerturbMask, CentredSquareDilatesOnceWithOvershoot) {
  ProvenanceMask m(square_mask(16, 16, 6, 6, 4), MaskRole::edit_target);
  PerturbResult r = perturb_mask(m, Morphology::dilate, 0.10);
  // A cross element adds one pixel-wide band on each of the four sides.
  EXPECT_EQ(r.mask.count_ones(), 32u);
  EXPECT_EQ(r.iterations, 1u);
  EXPECT_DOUBLE_EQ(r.realized_delta, 1.0);
  EXPECT_TRUE(r.overshoot);
  EXPECT_EQ(r.mask.role(), MaskRole::edit_target);
}

TEST(PerturbMask, StripErosionMatchesPixelCount) {
  // Two-pixel strip along the top border: the outer row survives because
  // out-of-image neighbours are ignored.
  std::vector<double> v(8 * 8, 0.0);
  for (std::size_t c = 0; c < 8; ++c) v[c] = v[8 + c] = 1.0;
  ProvenanceMask m(Tensor({8, 8}, v), MaskRole::edit_target);
  PerturbResult r = perturb_mask(m, Morphology::erode, 0.30);
  std::size_t row0 = 0, row1 = 0;
  for (std::size_t c = 0; c < 8; ++c) {
    row0 += r.mask.values()[c] == 1.0;
    row1 += r.mask.values()[8 + c] == 1.0;
  }
  EXPECT_EQ(row0, 8u);
  EXPECT_EQ(row1, 0u);
  EXPECT_DOUBLE_EQ(r.realized_delta, (static_cast<double>(r.mask.count_ones()) - 16.0) / 16.0);
  EXPECT_DOUBLE_EQ(r.realized_delta, -0.5);
}

TEST(PerturbMask, InteriorStripErodesCompletely) {
  std::vector<double> v(8 * 8, 0.0);
  for (std::size_t c = 0; c < 8; ++c) v[3 * 8 + c] = v[4 * 8 + c] = 1.0;
  PerturbResult r = perturb_mask(ProvenanceMask(Tensor({8, 8}, v), MaskRole::edit_target), Morphology::erode, 0.30);
  EXPECT_EQ(r.mask.count_ones(), 0u);
  EXPECT_DOUBLE_EQ(r.realized_delta, -1.0);
}

TEST(PerturbMask, DilateGrowsAndErodeShrinksStrictly) {
  Rng rng(16);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t side = 2 + rng.below(4);
    ProvenanceMask m(square_mask(12, 12, rng.below(12 - side), rng.below(12 - side), side), MaskRole::edit_target);
    for (double delta : {0.1, 0.3}) {
      PerturbResult up = perturb_mask(m, Morphology::dilate, delta);
      PerturbResult down = perturb_mask(m, Morphology::erode, delta);
      EXPECT_GE(up.realized_delta, delta);
      EXPECT_LE(down.realized_delta, -delta);
      for (std::size_t p = 0; p < 144; ++p) {
        if (m.values()[p] == 1.0) EXPECT_EQ(up.mask.values()[p], 1.0);
        if (m.values()[p] == 0.0) EXPECT_EQ(down.mask.values()[p], 0.0);
      }
    }
  }
}

TEST(PerturbMask, ReportsSaturationAndBadInput) {
  ProvenanceMask m(square_mask(4, 4, 1, 1, 2), MaskRole::edit_target);
  try {
    perturb_mask(m, Morphology::dilate, 100.0);
    FAIL() << "expected saturation error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("realized delta"), std::string::npos);
  }
  EXPECT_THROW(perturb_mask(ProvenanceMask(Tensor::zeros({4, 4}), MaskRole::edit_target), Morphology::dilate, 0.1), Error);
  EXPECT_THROW(perturb_mask(ProvenanceMask(Tensor::ones({4, 4}), MaskRole::edit_target), Morphology::erode, 0.1), Error);
  EXPECT_THROW(perturb_mask(m, Morphology::erode, -0.1), Error);
}

TEST(ProvenanceMask, RejectsNonBinaryValues) {
  EXPECT_THROW(ProvenanceMask(Tensor::vector({0.0, 0.5}), MaskRole::mix_origin), Error);
}

TEST(Pgm, MaskRoundTripsThroughFile) {
  const auto path = std::filesystem::temp_directory_path() / "pgl_test_mask.pgm";
  ProvenanceMask m(square_mask(3, 5, 0, 1, 2), MaskRole::mix_origin);
  write_mask_pgm(path.string(), m);
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  const std::string header = "P5\n5 3\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 15);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  for (std::size_t p = 0; p < 15; ++p) {
    EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + p]), m.values()[p] == 1.0 ? 255 : 0);
  }
  std::filesystem::remove(path);
}
