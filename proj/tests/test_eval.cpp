#include <gtest/gtest.h>

#include <cstring>

#include "nrvit/eval.hpp"
#include "nrvit/synthetic.hpp"

using namespace nrvit;

namespace {

std::vector<ClassPromptSet<double>> classes_from_rows(const Mat<double>& rows) {
  std::vector<ClassPromptSet<double>> out;
  for (long i = 0; i < rows.rows(); ++i) {
    ClassPromptSet<double> c;
    c.name = "class" + std::to_string(i);
    c.embedding = rows.row(i).transpose().normalized();
    out.push_back(std::move(c));
  }
  return out;
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

TEST(ZeroShot, ExactClassEmbeddingPredictsThatClass) {
  Mat<double> classes = Mat<double>::Identity(4, 4);
  auto cps = classes_from_rows(classes);
  Mat<double> img(1, 4);
  img << 0, 0, 1, 0;
  const auto res = zero_shot_classify(img, cps, {2});
  EXPECT_EQ(res.predicted[0], 2);
  EXPECT_DOUBLE_EQ(res.accuracy, 1.0);
}

TEST(ZeroShot, TieBreaksToLowestIndex) {
  Mat<double> classes = Mat<double>::Identity(3, 3);
  auto cps = classes_from_rows(classes);
  Mat<double> img(1, 3);
  img << 1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0), 0.0;
  const auto res = zero_shot_classify(img, cps);
  EXPECT_EQ(res.predicted[0], 0);
}

TEST(ZeroShot, RandomLabelsHoverAtChance) {
  Rng rng(1);
  const long m = 4000;
  auto imgs = random_unit_rows(m, 16, rng);
  auto cls = classes_from_rows(random_unit_rows(2, 16, rng));
  std::vector<long> labels;
  for (long i = 0; i < m; ++i) labels.push_back(rng.uniform_int(2));
  const auto res = zero_shot_classify(imgs, cls, labels);
  EXPECT_NEAR(res.accuracy, 0.5, 0.1);
}

TEST(ZeroShot, InvariantToPositiveRescaling) {
  Rng rng(2);
  auto imgs = random_unit_rows(50, 8, rng);
  auto cls = classes_from_rows(random_unit_rows(5, 8, rng));
  const auto base = zero_shot_classify(imgs, cls);
  Mat<double> scaled = imgs;
  for (long i = 0; i < scaled.rows(); ++i)
    scaled.row(i) *= rng.uniform(0.01, 100.0);
  const auto res = zero_shot_classify(scaled, cls);
  EXPECT_EQ(res.predicted, base.predicted);
}

TEST(ZeroShot, EmptyClassListRejected) {
  Mat<double> img = Mat<double>::Ones(1, 4);
  EXPECT_THROW(zero_shot_classify(img, {}), std::invalid_argument);
}

TEST(Retrieval, PerfectPairsGiveUnitRecall) {
  Rng rng(3);
  auto embs = random_unit_rows(10, 8, rng);
  const auto r = retrieval_recall_at_1(embs, embs);
  EXPECT_DOUBLE_EQ(r.text_to_image, 1.0);
  EXPECT_DOUBLE_EQ(r.image_to_text, 1.0);
}

TEST(Retrieval, SwappedRowsLoseExactlyTwo) {
  const long m = 8;
  Mat<double> txt = Mat<double>::Identity(m, m);
  Mat<double> img = txt;
  img.row(0).swap(img.row(1));
  const auto r = retrieval_recall_at_1(img, txt);
  EXPECT_DOUBLE_EQ(r.text_to_image, (m - 2.0) / m);
  EXPECT_DOUBLE_EQ(r.image_to_text, (m - 2.0) / m);
}

TEST(Retrieval, SinglePairAndEmptyError) {
  Mat<double> one = Mat<double>::Ones(1, 4) / 2.0;
  const auto r = retrieval_recall_at_1(one, one);
  EXPECT_DOUBLE_EQ(r.text_to_image, 1.0);
  EXPECT_DOUBLE_EQ(r.image_to_text, 1.0);
  Mat<double> none(0, 4);
  EXPECT_THROW(retrieval_recall_at_1(none, none), std::invalid_argument);
}

TEST(Retrieval, InvariantUnderSimultaneousPermutation) {
  Rng rng(4);
  const long m = 12;
  auto img = random_unit_rows(m, 6, rng);
  auto txt = random_unit_rows(m, 6, rng);
  const auto base = retrieval_recall_at_1(img, txt);
  std::vector<long> perm(m);
  for (long i = 0; i < m; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng shuffler(5);
  shuffler.shuffle(perm);
  Mat<double> img2(m, 6), txt2(m, 6);
  for (long i = 0; i < m; ++i) {
    img2.row(i) = img.row(perm[static_cast<std::size_t>(i)]);
    txt2.row(i) = txt.row(perm[static_cast<std::size_t>(i)]);
  }
  const auto permuted = retrieval_recall_at_1(img2, txt2);
  EXPECT_DOUBLE_EQ(permuted.text_to_image, base.text_to_image);
  EXPECT_DOUBLE_EQ(permuted.image_to_text, base.image_to_text);
}

TEST(LinearProbe, SeparableDataReachesPerfectAccuracy) {
  Rng rng(6);
  const long m = 60;
  Mat<double> feats(m, 4);
  std::vector<long> labels;
  for (long i = 0; i < m; ++i) {
    const long y = i % 2;
    labels.push_back(y);
    for (long j = 0; j < 4; ++j) feats(i, j) = rng.normal() * 0.1;
    feats(i, 0) += y == 0 ? 2.0 : -2.0;
  }
  const auto probe = train_linear_probe(feats, labels, 2, 200, 0.1);
  EXPECT_DOUBLE_EQ(probe.accuracy(feats, labels), 1.0);
}

TEST(LinearProbe, ZeroEpochBaselineAndPermutationInvariance) {
  Rng rng(7);
  const long m = 40;
  Mat<double> feats(m, 6);
  std::vector<long> labels;
  for (long i = 0; i < m; ++i) {
    labels.push_back(rng.uniform_int(3));
    for (long j = 0; j < 6; ++j) feats(i, j) = rng.normal();
  }
  const auto untrained = train_linear_probe(feats, labels, 3, 0, 0.1);
  const double base_acc = untrained.accuracy(feats, labels);
  EXPECT_GE(base_acc, 0.0);
  EXPECT_LE(base_acc, 1.0);

  // Permuting rows together with labels leaves the trained accuracy unchanged
  // (full-batch training sums over samples).
  const auto probe = train_linear_probe(feats, labels, 3, 50, 0.05);
  std::vector<long> perm(m);
  for (long i = 0; i < m; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng shuffler(8);
  shuffler.shuffle(perm);
  Mat<double> feats2(m, 6);
  std::vector<long> labels2(m);
  for (long i = 0; i < m; ++i) {
    feats2.row(i) = feats.row(perm[static_cast<std::size_t>(i)]);
    labels2[static_cast<std::size_t>(i)] =
        labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const auto probe2 = train_linear_probe(feats2, labels2, 3, 50, 0.05);
  EXPECT_DOUBLE_EQ(probe.accuracy(feats, labels),
                   probe2.accuracy(feats2, labels2));
}

TEST(LinearProbe, LabelOutOfRangeRejected) {
  Mat<double> feats = Mat<double>::Ones(3, 2);
  EXPECT_THROW(train_linear_probe<double>(feats, {0, 1, 2}, 2, 10, 0.1),
               std::invalid_argument);
}

TEST(AttentiveProbe, SingleTokenSamplesBehaveLikeLinearProbe) {
  Rng rng(9);
  const long m = 60;
  std::vector<Mat<double>> samples;
  std::vector<long> labels;
  for (long i = 0; i < m; ++i) {
    const long y = i % 2;
    labels.push_back(y);
    Mat<double> tok(1, 4);
    for (long j = 0; j < 4; ++j) tok(0, j) = rng.normal() * 0.1;
    tok(0, 0) += y == 0 ? 2.0 : -2.0;
    samples.push_back(tok);
  }
  const auto probe = train_attentive_probe(samples, labels, 2, 200, 0.1);
  EXPECT_DOUBLE_EQ(probe.accuracy(samples, labels), 1.0);
}

TEST(AttentiveProbe, TracksLinearProbeOnPooledSyntheticSuite) {
  Rng rng(10);
  const long m = 90, d = 8;
  std::vector<Mat<double>> samples;
  std::vector<long> labels;
  Mat<double> pooled(m, d);
  for (long i = 0; i < m; ++i) {
    const long y = i % 3;
    labels.push_back(y);
    const long n_tok = 2 + rng.uniform_int(5);
    Mat<double> toks(n_tok, d);
    for (long t = 0; t < n_tok; ++t) {
      for (long j = 0; j < d; ++j) toks(t, j) = rng.normal() * 0.3;
      toks(t, y) += 1.5;  // class-informative direction
    }
    pooled.row(i) = toks.colwise().mean();
    samples.push_back(toks);
  }
  const auto lin = train_linear_probe(pooled, labels, 3, 300, 0.05);
  const auto att = train_attentive_probe(samples, labels, 3, 300, 0.05);
  EXPECT_GE(att.accuracy(samples, labels),
            lin.accuracy(pooled, labels) - 0.02);
}

TEST(AttentiveProbe, DeterministicUnderFixedSeed) {
  Rng rng(11);
  std::vector<Mat<double>> samples;
  std::vector<long> labels;
  for (long i = 0; i < 20; ++i) {
    Mat<double> toks(3, 4);
    for (long t = 0; t < toks.size(); ++t) toks.data()[t] = rng.normal();
    samples.push_back(toks);
    labels.push_back(i % 2);
  }
  const auto a = train_attentive_probe(samples, labels, 2, 40, 0.05, 1, 123);
  const auto b = train_attentive_probe(samples, labels, 2, 40, 0.05, 1, 123);
  EXPECT_TRUE(a.queries == b.queries);
  EXPECT_TRUE(a.w == b.w);
}

TEST(AttentiveProbe, RejectsEmptyTokenSets) {
  std::vector<Mat<double>> samples{Mat<double>(0, 4)};
  EXPECT_THROW(train_attentive_probe<double>(samples, {0}, 2, 10, 0.1),
               std::invalid_argument);
}

TEST(EvalOps, LeaveModelStateBitIdentical) {
  EncoderConfig cfg;
  cfg.hidden = 16;
  cfg.intermediate = 24;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.head_dim = 8;
  cfg.patch = 14;
  Rng rng(12);
  ModelState<double> model;
  model.vision = init_encoder<double>(cfg, rng);
  SyntheticCorpus<double> corpus({8, 4, 2, 99});
  model.text = init_text_tower<double>(corpus.vocab().size(),
                                       corpus.vocab().eos_id(), 16, 24, 1, 2,
                                       8, rng);
  model.head = init_alignment_head<double>(16, 16, 12, rng);

  auto params = collect_params(model);
  std::vector<std::vector<double>> before;
  for (const auto& p : params)
    before.emplace_back(p.data, p.data + p.size);

  std::vector<VisualSample<double>> images;
  std::vector<long> labels;
  for (long i = 0; i < 4; ++i) {
    images.push_back(corpus.holdout_image(i));
    labels.push_back(corpus.holdout_combo(i).shape);
  }
  EvalPreprocess<double> pre;
  pre.mode = ResizeFixed{28};
  const auto embs = embed_images(model, images, pre);
  const auto cls = build_class_prompts<double>(synthetic::shape_names(), model,
                                               corpus.vocab());
  zero_shot_classify(embs, cls, labels);
  retrieval_recall_at_1(embs, embs);

  for (std::size_t i = 0; i < params.size(); ++i)
    EXPECT_EQ(std::memcmp(params[i].data, before[i].data(),
                          static_cast<std::size_t>(params[i].size) *
                              sizeof(double)),
              0)
        << params[i].name;
}
