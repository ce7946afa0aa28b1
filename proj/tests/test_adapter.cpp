#include <gtest/gtest.h>

#include "nrvit/adapter.hpp"

using namespace nrvit;

TEST(PixelUnshuffle, ShapeArithmetic) {
  Mat<double> tokens = Mat<double>::Random(2 * 4, 8);
  const auto out = pixel_unshuffle_width(tokens, 2, 4);
  EXPECT_EQ(out.rows(), 4);
  EXPECT_EQ(out.cols(), 16);
}

TEST(PixelUnshuffle, InverseRestoresBitExactly) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 1 + static_cast<int>(rng.uniform_int(5));
    const int w = 2 * (1 + static_cast<int>(rng.uniform_int(5)));
    const int d = 1 + static_cast<int>(rng.uniform_int(12));
    Mat<double> tokens(static_cast<long>(h) * w, d);
    for (long i = 0; i < tokens.size(); ++i) tokens.data()[i] = rng.normal();
    const auto merged = pixel_unshuffle_width(tokens, h, w);
    EXPECT_EQ(merged.rows(), static_cast<long>(h) * w / 2);
    const auto back = pixel_shuffle_width(merged, h, w / 2);
    EXPECT_TRUE(back == tokens);
  }
}

TEST(PixelUnshuffle, ConstantInputDuplicatesHalves) {
  Mat<double> tokens = Mat<double>::Constant(8, 3, 0.75);
  const auto out = pixel_unshuffle_width(tokens, 2, 4);
  for (long i = 0; i < out.rows(); ++i) {
    EXPECT_TRUE(out.row(i).segment(0, 3) == out.row(i).segment(3, 3));
    EXPECT_DOUBLE_EQ(out(i, 0), 0.75);
  }
}

TEST(PixelUnshuffle, OddWidthRejected) {
  Mat<double> tokens = Mat<double>::Zero(6, 4);
  EXPECT_THROW(pixel_unshuffle_width(tokens, 2, 3), std::invalid_argument);
}

TEST(ArrangeWithMarkers, MatchesInstantiatedPattern) {
  const auto seq = arrange_with_markers(2, 3);
  ASSERT_EQ(seq.size(), 10);  // 2*3 + 2 + 2
  const std::vector<ArrangedElement> expected{
      Marker{"<image_start>"}, VisionToken{1, 1}, VisionToken{1, 2},
      VisionToken{1, 3},       Marker{"<line-1>"}, VisionToken{2, 1},
      VisionToken{2, 2},       VisionToken{2, 3}, Marker{"<line-2>"},
      Marker{"<image_end>"}};
  for (std::size_t i = 0; i < expected.size(); ++i)
    EXPECT_TRUE(seq.elements[i] == expected[i]) << "element " << i;
}

TEST(ArrangeWithMarkers, MinimalGrid) {
  const auto seq = arrange_with_markers(1, 1);
  ASSERT_EQ(seq.size(), 4);
  EXPECT_TRUE(seq.elements[0] == ArrangedElement(Marker{"<image_start>"}));
  EXPECT_TRUE(seq.elements[1] == ArrangedElement(VisionToken{1, 1}));
  EXPECT_TRUE(seq.elements[2] == ArrangedElement(Marker{"<line-1>"}));
  EXPECT_TRUE(seq.elements[3] == ArrangedElement(Marker{"<image_end>"}));
}

TEST(ArrangeWithMarkers, LengthLawOnRandomGrids) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 1 + static_cast<int>(rng.uniform_int(12));
    const int w = 1 + static_cast<int>(rng.uniform_int(12));
    const auto seq = arrange_with_markers(h, w);
    EXPECT_EQ(seq.size(), static_cast<long>(h) * w + h + 2);
  }
  EXPECT_THROW(arrange_with_markers(0, 3), std::invalid_argument);
}

TEST(ArrangeWithMarkers, StripIsIdentityOnTokenSubsequence) {
  const auto seq = arrange_with_markers(3, 4);
  const auto tokens = strip_markers(seq);
  ASSERT_EQ(tokens.size(), 12u);
  std::size_t i = 0;
  for (int r = 1; r <= 3; ++r)
    for (int c = 1; c <= 4; ++c, ++i)
      EXPECT_TRUE(tokens[i] == (VisionToken{r, c}));
}

TEST(ArrangeWithMarkers, JsonRoundTrip) {
  const auto seq = arrange_with_markers(2, 2);
  const auto j = arranged_to_json(seq);
  EXPECT_EQ(j[0], "<image_start>");
  EXPECT_TRUE(j[1].is_array());
  const auto back = arranged_from_json(j);
  ASSERT_EQ(back.size(), seq.size());
  for (long i = 0; i < seq.size(); ++i)
    EXPECT_TRUE(back.elements[static_cast<std::size_t>(i)] ==
                seq.elements[static_cast<std::size_t>(i)]);
}

TEST(MllmResize, NearestMultiplesOf28) {
  auto img = make_sample<double>(1, 3, 300, 200, Modality::Image, "m", 0.5);
  const auto out = mllm_resize(img);
  EXPECT_EQ(out.height, 308);  // 300 -> 11 * 28
  EXPECT_EQ(out.width, 196);   // 200 -> 7 * 28

  auto exact = make_sample<double>(1, 3, 28, 28, Modality::Image, "e", 0.5);
  const auto same = mllm_resize(exact);
  EXPECT_EQ(same.height, 28);
  EXPECT_EQ(same.width, 28);
  EXPECT_EQ(same.data, exact.data);

  auto tiny = make_sample<double>(1, 3, 14, 14, Modality::Image, "t", 0.5);
  EXPECT_THROW(mllm_resize(tiny), std::invalid_argument);
}

TEST(MllmResize, TiesRoundDown) {
  EXPECT_EQ(round_to_28(42), 28);   // exactly half way between 28 and 56
  EXPECT_EQ(round_to_28(43), 56);
  EXPECT_EQ(round_to_28(41), 28);
  EXPECT_EQ(round_to_28(29), 28);
  EXPECT_EQ(round_to_28(28), 28);
  EXPECT_EQ(round_to_28(98), 84);   // 98 = 84 + 14, tie -> down
}

TEST(Projector, ShapesFlowThroughThreeLayers) {
  Rng rng(3);
  auto proj = init_projector<double>(16, 24, 8, rng);
  Mat<double> tokens = Mat<double>::Random(5, 16);
  const auto out = project_tokens(tokens, proj);
  EXPECT_EQ(out.rows(), 5);
  EXPECT_EQ(out.cols(), 8);
  EXPECT_TRUE(out.allFinite());
}

TEST(Adapter, UnshuffleHalvesTokenCountExactly) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 1 + static_cast<int>(rng.uniform_int(6));
    const int w = 2 * (1 + static_cast<int>(rng.uniform_int(6)));
    Mat<double> tokens = Mat<double>::Random(static_cast<long>(h) * w, 4);
    const auto merged = pixel_unshuffle_width(tokens, h, w);
    EXPECT_EQ(merged.rows() * 2, tokens.rows());
  }
}
