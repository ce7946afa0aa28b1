#include <gtest/gtest.h>

#include <cmath>

#include "nrvit/objectives.hpp"
#include "support/grad_check.hpp"

using namespace nrvit;

namespace {

// Scalar-by-scalar reference: no matrix ops, no softplus rearrangement.
double brute_force_sigmoid_loss(const Mat<double>& x, const Mat<double>& y,
                                double t, double b) {
  const long n = x.rows();
  double total = 0.0;
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < n; ++j) {
      double dot = 0.0;
      for (long d = 0; d < x.cols(); ++d) dot += x(i, d) * y(j, d);
      const double z = (i == j) ? 1.0 : -1.0;
      const double a = z * (t * dot + b);
      total += -std::log(1.0 / (1.0 + std::exp(-a)));
    }
  }
  return total / static_cast<double>(n);
}

Mat<double> random_unit_rows(long n, long d, Rng& rng) {
  Mat<double> m(n, d);
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < d; ++j) m(i, j) = rng.normal();
    m.row(i) /= m.row(i).norm();
  }
  return m;
}

}  // namespace

TEST(SigmoidLoss, SinglePairAtZeroSimilarityIsLn2) {
  Mat<double> x(1, 4), y(1, 4);
  x << 1, 0, 0, 0;
  y << 0, 1, 0, 0;
  const double loss = sigmoid_contrastive_loss<double>(x, y, 1.0, 0.0);
  EXPECT_NEAR(loss, std::log(2.0), 1e-12);
  EXPECT_NEAR(loss, 0.693147, 5e-7);
}

TEST(SigmoidLoss, TwoOrthonormalMatchedPairs) {
  Mat<double> x(2, 4), y(2, 4);
  x << 1, 0, 0, 0, 0, 1, 0, 0;
  y = x;
  const double loss = sigmoid_contrastive_loss<double>(x, y, 1.0, 0.0);
  // Direct evaluation of the double sum: (2*ln(1+e^-1) + 2*ln 2) / 2,
  // which is 1.0064089 (1.006409 to six decimals).
  const double expected = (2.0 * std::log(1.0 + std::exp(-1.0)) +
                           2.0 * std::log(2.0)) / 2.0;
  EXPECT_NEAR(loss, expected, 1e-12);
  EXPECT_NEAR(loss, 1.006409, 5e-7);
}

TEST(SigmoidLoss, MatchesBruteForceOracleOnRandomBatches) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const long b = 1 + rng.uniform_int(8);
    auto x = random_unit_rows(b, 6, rng);
    auto y = random_unit_rows(b, 6, rng);
    const double t = rng.uniform(0.5, 12.0);
    const double bias = rng.uniform(-12.0, 2.0);
    const double fast = sigmoid_contrastive_loss<double>(x, y, t, bias);
    const double slow = brute_force_sigmoid_loss(x, y, t, bias);
    EXPECT_NEAR(fast, slow, 1e-12);
  }
}

TEST(SigmoidLoss, SymmetricUnderTowerSwap) {
  Rng rng(2);
  auto x = random_unit_rows(5, 8, rng);
  auto y = random_unit_rows(5, 8, rng);
  // Swapping towers transposes the pair-label matrix, which is itself
  // symmetric, so the loss is unchanged.
  EXPECT_NEAR(sigmoid_contrastive_loss<double>(x, y, 7.0, -3.0),
              sigmoid_contrastive_loss<double>(y, x, 7.0, -3.0), 1e-12);
}

TEST(SigmoidLoss, StrictlyDecreasingInTemperatureAtPerfectAlignment) {
  Mat<double> x = Mat<double>::Identity(4, 4);
  double prev = sigmoid_contrastive_loss<double>(x, x, 0.25, 0.0);
  for (double t : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0}) {
    const double cur = sigmoid_contrastive_loss<double>(x, x, t, 0.0);
    EXPECT_LT(cur, prev) << "t = " << t;
    prev = cur;
  }
}

TEST(SigmoidLoss, RejectsBadInputs) {
  Rng rng(3);
  auto x = random_unit_rows(2, 4, rng);
  Mat<double> y = x * 1.01;  // rows off unit norm by 1e-2
  EXPECT_THROW(sigmoid_contrastive_loss<double>(x, y, 1.0, 0.0),
               std::invalid_argument);
  Mat<double> empty(0, 4);
  EXPECT_THROW(sigmoid_contrastive_loss<double>(empty, empty, 1.0, 0.0),
               std::invalid_argument);
}

TEST(SigmoidLoss, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  const long b = 5, d = 6;
  Mat<double> x_raw(b, d), y_raw(b, d);
  for (long i = 0; i < b; ++i)
    for (long j = 0; j < d; ++j) {
      x_raw(i, j) = rng.normal();
      y_raw(i, j) = rng.normal();
    }
  double t = 4.0, bias = -2.0;

  // Loss as a function of the raw (pre-normalization) embeddings, matching
  // how training composes it.
  auto loss_fn = [&] {
    const auto xn = normalize_rows(x_raw);
    const auto yn = normalize_rows(y_raw);
    return sigmoid_contrastive_loss<double>(xn.normalized, yn.normalized, t,
                                            bias);
  };
  const auto xn = normalize_rows(x_raw);
  const auto yn = normalize_rows(y_raw);
  SigmoidLossGrads<double> g;
  sigmoid_contrastive_loss<double>(xn.normalized, yn.normalized, t, bias, &g);
  const Mat<double> dx = normalize_rows_backward(xn, g.d_img);
  const Mat<double> dy = normalize_rows_backward(yn, g.d_txt);

  for (long i = 0; i < b; ++i)
    for (long j = 0; j < d; ++j) {
      const double fd_x =
          nrvit::testing::fd_gradient(loss_fn, &x_raw(i, j), 1e-6);
      EXPECT_NEAR(dx(i, j), fd_x, 1e-6 + 1e-4 * std::abs(fd_x));
      const double fd_y =
          nrvit::testing::fd_gradient(loss_fn, &y_raw(i, j), 1e-6);
      EXPECT_NEAR(dy(i, j), fd_y, 1e-6 + 1e-4 * std::abs(fd_y));
    }
  const double fd_t = nrvit::testing::fd_gradient(loss_fn, &t, 1e-6);
  EXPECT_NEAR(g.d_temp, fd_t, 1e-6 + 1e-4 * std::abs(fd_t));
  const double fd_b = nrvit::testing::fd_gradient(loss_fn, &bias, 1e-6);
  EXPECT_NEAR(g.d_bias, fd_b, 1e-6 + 1e-4 * std::abs(fd_b));
}

TEST(KlLoss, ZeroWhenDistributionsMatch) {
  Rng rng(5);
  Mat<double> s(3, 6);
  for (long i = 0; i < s.size(); ++i) s.data()[i] = rng.normal();
  EXPECT_NEAR(kl_distillation_loss<double>(s, s, 1.0), 0.0, 1e-14);
}

TEST(KlLoss, NonNegativeOnRandomInputs) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    Mat<double> s(2, 8), t(2, 8);
    for (long i = 0; i < s.size(); ++i) {
      s.data()[i] = rng.normal() * 3;
      t.data()[i] = rng.normal() * 3;
    }
    EXPECT_GE(kl_distillation_loss<double>(s, t, rng.uniform(0.2, 4.0)),
              -1e-14);
  }
}

TEST(KlLoss, HandComputedTwoDimCase) {
  Mat<double> teacher(1, 2), student(1, 2);
  teacher << 0.0, std::log(3.0);
  student << 0.0, 0.0;
  const double kl = kl_distillation_loss<double>(student, teacher, 1.0);
  const double expected =
      0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
  EXPECT_NEAR(kl, expected, 1e-12);
  EXPECT_NEAR(kl, 0.130812, 5e-7);
}

TEST(KlLoss, InvariantToLogitShiftsOfEitherTower) {
  Rng rng(7);
  Mat<double> s(2, 5), t(2, 5);
  for (long i = 0; i < s.size(); ++i) {
    s.data()[i] = rng.normal();
    t.data()[i] = rng.normal();
  }
  const double base = kl_distillation_loss<double>(s, t, 1.7);
  Mat<double> s2 = s;
  s2.array() += 11.0;
  Mat<double> t2 = t;
  t2.array() -= 4.5;
  EXPECT_NEAR(kl_distillation_loss<double>(s2, t, 1.7), base, 1e-10);
  EXPECT_NEAR(kl_distillation_loss<double>(s, t2, 1.7), base, 1e-10);
}

TEST(KlLoss, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  Mat<double> s(3, 5), t(3, 5);
  for (long i = 0; i < s.size(); ++i) {
    s.data()[i] = rng.normal();
    t.data()[i] = rng.normal();
  }
  Mat<double> ds;
  kl_distillation_loss<double>(s, t, 1.3, &ds);
  auto loss_fn = [&] { return kl_distillation_loss<double>(s, t, 1.3); };
  for (long i = 0; i < s.rows(); ++i)
    for (long j = 0; j < s.cols(); ++j) {
      const double fd = nrvit::testing::fd_gradient(loss_fn, &s(i, j), 1e-6);
      EXPECT_NEAR(ds(i, j), fd, 1e-7 + 1e-4 * std::abs(fd));
    }
}

TEST(KlLoss, RejectsNonPositiveTemperature) {
  Mat<double> s = Mat<double>::Zero(1, 3);
  EXPECT_THROW(kl_distillation_loss<double>(s, s, 0.0), std::invalid_argument);
  EXPECT_THROW(kl_distillation_loss<double>(s, s, -1.0), std::invalid_argument);
}

TEST(HybridLoss, ExactComposition) {
  EXPECT_DOUBLE_EQ(hybrid_loss(0.4, 9.0, 0.0), 0.4);
  EXPECT_DOUBLE_EQ(hybrid_loss(0.5, 0.5, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(hybrid_loss(1.0, 2.0, 0.25), 1.5);
  EXPECT_THROW(hybrid_loss(1.0, 1.0, -0.1), std::invalid_argument);
}

TEST(LambdaSchedule, StepFunction) {
  EXPECT_DOUBLE_EQ(lambda_schedule(0, 8000, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(lambda_schedule(7999, 8000, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(lambda_schedule(8000, 8000, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(lambda_schedule(1000000, 8000, 1.0), 0.0);
  EXPECT_THROW(lambda_schedule(0, 0, 1.0), std::invalid_argument);
}

TEST(EncodeText, SingleTokenCaptionUsesEosState) {
  Rng rng(9);
  auto tower = init_text_tower<double>(12, 11, 16, 24, 2, 2, 8, rng);
  const auto f = encode_text<double>({{11}}, tower);
  EXPECT_EQ(f.rows(), 1);
  EXPECT_EQ(f.cols(), 16);
  EXPECT_GT(f.cwiseAbs().maxCoeff(), 0.0);
}

TEST(EncodeText, DeterministicAndPermutationConsistent) {
  Rng rng(10);
  auto tower = init_text_tower<double>(12, 11, 16, 24, 2, 2, 8, rng);
  std::vector<std::vector<int>> caps{{1, 2, 3, 11}, {4, 5, 11}, {1, 2, 3, 11}};
  const auto f = encode_text(caps, tower);
  EXPECT_TRUE(f.row(0) == f.row(2));  // identical captions, identical rows

  std::vector<std::vector<int>> swapped{caps[1], caps[0], caps[2]};
  const auto g = encode_text(swapped, tower);
  EXPECT_TRUE(g.row(0) == f.row(1));
  EXPECT_TRUE(g.row(1) == f.row(0));
}

TEST(EncodeText, RejectsMissingEos) {
  Rng rng(11);
  auto tower = init_text_tower<double>(12, 11, 16, 24, 2, 2, 8, rng);
  EXPECT_THROW(encode_text<double>({{1, 2, 3}}, tower), std::invalid_argument);
  EXPECT_THROW(encode_text<double>({{}}, tower), std::invalid_argument);
  EXPECT_THROW(encode_text<double>({{25, 11}}, tower), std::invalid_argument);
}

TEST(EncodeText, CausalityHoldsAtEveryPrefix) {
  // Extending a caption after position i must not change the hidden state the
  // shorter caption produced at its own final position... i.e. the feature of
  // "a b <eos>" equals row boundary-1 of "a b <eos> c <eos>" truncated run.
  Rng rng(12);
  auto tower = init_text_tower<double>(12, 11, 16, 24, 2, 2, 8, rng);
  const auto short_f = encode_text<double>({{3, 7, 11}}, tower);
  TextCache<double> cache;
  encode_text<double>({{3, 7, 11, 5, 11}}, tower, &cache);
  // Recompute the long run's per-token features and compare position 2.
  const Mat<double>& normed = cache.stack.normed;
  EXPECT_LT((normed.row(2) - short_f.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TeacherStub, FrozenAndDeterministic) {
  Rng rng(13);
  EncoderConfig cfg;
  cfg.hidden = 16;
  cfg.intermediate = 24;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.head_dim = 8;
  cfg.patch = 2;
  auto teacher = init_teacher<double>(cfg, 10, rng);
  PatchGrid g;
  g.t_patches = 1;
  g.rows = 2;
  g.cols = 2;
  g.patch = 2;
  g.temporal_patch = 2;
  g.sample_id = "x";
  Mat<double> m(4, cfg.patch_vector_size());
  Rng data(3);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = data.normal();
  auto batch = pack<double>({TokenSequence<double>(g, m)});
  const auto f1 = teacher_features(batch, teacher);
  const auto f2 = teacher_features(batch, teacher);
  EXPECT_TRUE(f1 == f2);
  EXPECT_EQ(f1.cols(), 10);
}
