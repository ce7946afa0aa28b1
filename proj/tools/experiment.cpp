// Scratch convergence experiment (not installed). Runs the desk-scale staged
// recipe on the synthetic corpus and reports EMA loss and retrieval R@1.
#include <chrono>
#include <cstdio>

#include "nrvit/eval.hpp"
#include "nrvit/runner.hpp"

using namespace nrvit;

int main(int argc, char** argv) {
  RunConfig cfg;
  cfg.encoder = encoder_config_tiny();
  cfg.scale = 1e-6;
  cfg.global_batch_override = 64;
  cfg.video_batch_override = 8;
  cfg.synthetic.n_train_images = 2000;
  cfg.synthetic.n_holdout = 200;
  cfg.synthetic.n_videos = 16;
  cfg.seed = 1234;

  // Optional overrides from the command line: key=value pairs.
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    const auto eq = arg.find('=');
    const std::string key = arg.substr(0, eq);
    const std::string val = arg.substr(eq + 1);
    if (key == "lr")
      cfg.stage_overrides.push_back({{"stage", 1}, {"peak_lr", std::stod(val)}});
    else if (key == "ls")
      cfg.encoder.layerscale_init = std::stod(val);
    else if (key == "batch")
      cfg.global_batch_override = std::stol(val);
    else if (key == "seed")
      cfg.seed = std::stoul(val);
    else if (key == "dropout")
      cfg.stage_overrides.push_back({{"stage", 1}, {"patch_dropout", std::stod(val)}});
    else if (key == "stages")
      ;  // handled below
    else
      std::fprintf(stderr, "unknown key %s\n", key.c_str());
  }
  std::vector<int> stages{1, 2, 3};

  const auto t0 = std::chrono::steady_clock::now();
  const auto metrics = run_training<float>(cfg, stages, "/tmp/nrvit_exp");
  const auto t1 = std::chrono::steady_clock::now();
  const double secs =
      std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count() /
      1000.0;

  // EMA (window 50) of the stage-1 contrastive loss.
  const double alpha = 2.0 / 51.0;
  double ema = 0.0;
  double ema0 = 0.0;
  bool first = true;
  long stage1_rows = 0;
  for (const auto& m : metrics) {
    if (m.stage != 1) continue;
    ++stage1_rows;
    if (first) {
      ema = m.loss_contrastive;
      ema0 = ema;
      first = false;
    } else {
      ema = (1 - alpha) * ema + alpha * m.loss_contrastive;
    }
  }
  std::printf("stage1 steps=%ld ema0=%.4f ema_end=%.4f ratio=%.3f\n",
              stage1_rows, ema0, ema, ema / ema0);

  // Retrieval on the holdout pairs.
  std::vector<std::string> errors;
  SyntheticCorpus<float> corpus(cfg.synthetic);
  ModelState<float> model = build_model<float>(cfg, corpus.vocab(), false);
  load_model(stage_checkpoint_path("/tmp/nrvit_exp", stages.back()), model);

  EvalData<float> data = holdout_data<float>(cfg, corpus.vocab());
  for (const char* mode : {"native", "fixed:224", "aspect:256"}) {
    EvalPreprocess<float> pre;
    pre.mode = parse_resize_mode(mode);
    const auto img = embed_images(model, data.images, pre);
    const auto txt = embed_texts(model, data.captions);
    const auto r = retrieval_recall_at_1(img, txt);
    std::printf("mode=%-10s R@1 t2i=%.3f i2t=%.3f\n", mode, r.text_to_image,
                r.image_to_text);
  }
  std::printf("train time: %.1f s\n", secs);
  return 0;
}
