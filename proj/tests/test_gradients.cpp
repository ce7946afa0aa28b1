#include <gtest/gtest.h>

#include "nrvit/pipeline.hpp"
#include "support/grad_check.hpp"

using namespace nrvit;

namespace {

// A model small enough that every scalar can be finite-differenced quickly,
// but exercising every structural feature: multiple heads, two layers,
// temporal patches, variable segment lengths, captions of mixed length.
struct AuditFixture {
  EncoderConfig cfg;
  ModelState<double> model;
  PackedBatch<double> batch;
  std::vector<std::vector<int>> captions;
  double lambda = 0.7;
  double tau = 1.3;

  AuditFixture() {
    cfg.hidden = 16;
    cfg.intermediate = 24;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.patch = 2;
    cfg.temporal_patch = 2;
    cfg.layerscale_init = 0.5;
    Rng rng(42);
    model.vision = init_encoder<double>(cfg, rng);
    model.text = init_text_tower<double>(11, 10, 16, 24, 2, 2, 8, rng);
    model.head = init_alignment_head<double>(16, 16, 12, rng);
    // Saturated defaults flatten the loss surface; audit at moderate values.
    model.head.log_temp = std::log(3.0);
    model.head.bias = -0.5;
    EncoderConfig tcfg = cfg;
    Rng trng(77);
    model.teacher = init_teacher<double>(tcfg, cfg.hidden, trng);

    std::vector<TokenSequence<double>> seqs;
    Rng data(5);
    const int dims[3][3] = {{1, 2, 2}, {1, 1, 3}, {2, 2, 1}};
    for (int s = 0; s < 3; ++s) {
      PatchGrid g;
      g.t_patches = dims[s][0];
      g.rows = dims[s][1];
      g.cols = dims[s][2];
      g.patch = cfg.patch;
      g.temporal_patch = cfg.temporal_patch;
      g.sample_id = "s" + std::to_string(s);
      Mat<double> m(g.token_count(), cfg.patch_vector_size());
      for (long i = 0; i < m.rows(); ++i)
        for (long j = 0; j < m.cols(); ++j) m(i, j) = data.normal() * 0.5;
      seqs.emplace_back(g, std::move(m));
    }
    batch = pack(seqs);
    captions = {{3, 1, 10}, {7, 10}, {2, 4, 6, 8, 10}};
  }

  double loss() {
    const auto l = compute_losses_and_grads<double>(
        model, batch, captions, lambda, tau, nullptr);
    return l.contrastive + lambda * l.distill;
  }
};

}  // namespace

TEST(GradientAudit, EveryTrainableGroupMatchesFiniteDifferences) {
  AuditFixture f;
  ModelGrads<double> grads(f.model);
  compute_losses_and_grads(f.model, f.batch, f.captions, f.lambda, f.tau,
                           &grads);
  auto params = collect_params(f.model);
  auto gviews = collect_grads(grads);
  std::map<std::string, ParamView<double>> by_name;
  for (auto& p : params) by_name[p.name] = p;

  auto loss_fn = [&f] { return f.loss(); };
  for (const auto& g : gviews) {
    const auto& p = by_name.at(g.name);
    // Full coverage for small groups, strided for the large matrices.
    const long stride = p.size > 200 ? 7 : 1;
    const auto report =
        nrvit::testing::check_group(loss_fn, p, g, 1e-5, stride);
    EXPECT_LT(report.max_rel_err, 1e-4) << "group " << g.name;
    EXPECT_GT(report.checked, 0) << "group " << g.name;
  }
}

TEST(GradientAudit, TeacherReceivesNoGradients) {
  AuditFixture f;
  ModelGrads<double> grads(f.model);
  compute_losses_and_grads(f.model, f.batch, f.captions, f.lambda, f.tau,
                           &grads);
  for (const auto& g : collect_grads(grads))
    EXPECT_EQ(g.name.rfind("teacher.", 0), std::string::npos);
}

TEST(GradientAudit, FrozenTextMeansZeroUpdatesNotZeroGrads) {
  // Gradients flow to the text tower; freezing is the optimizer's decision.
  AuditFixture f;
  ModelGrads<double> grads(f.model);
  compute_losses_and_grads(f.model, f.batch, f.captions, 0.0, f.tau, &grads);
  EXPECT_GT(grads.text.embed.cwiseAbs().maxCoeff(), 0.0);
}

TEST(AdamW, MovesParametersAndClipRespectsNorm) {
  Rng rng(3);
  Mat<double> w(2, 3);
  for (long i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  Mat<double> g = Mat<double>::Constant(2, 3, 4.0);
  std::vector<ParamView<double>> params{{"w", w.data(), 6, {2, 3}}};
  std::vector<ParamView<double>> grads{{"w", g.data(), 6, {2, 3}}};

  const double norm = clip_global_norm(grads, 1.0);
  EXPECT_NEAR(norm, std::sqrt(16.0 * 6), 1e-12);
  EXPECT_NEAR(g.norm(), 1.0, 1e-12);

  Mat<double> before = w;
  AdamW<double> opt;
  opt.step(params, grads, 1e-2);
  EXPECT_GT((w - before).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(opt.steps_taken(), 1);
}
