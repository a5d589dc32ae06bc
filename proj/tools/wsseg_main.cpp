#include <iostream>

#include "CLI11.hpp"
#include "wsseg/app.hpp"

namespace {

void common_flags(CLI::App* sub, wsseg::CommandOptions& o) {
  sub->add_option("--config", o.config_path, "JSON configuration file");
  sub->add_option("--set", o.overrides, "override a key, e.g. --set train.epochs=5")->take_all();
  sub->add_option_function<uint64_t>("--seed", [&o](const uint64_t& s) { o.seed = s; }, "global seed");
  sub->add_option("--out", o.out, "output path");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised tissue segmentation from image-level labels"};
  app.require_subcommand(1);
  wsseg::CommandOptions o;
  wsseg::SynthConfig synth;

  auto* train = app.add_subcommand("train", "fit a model and save a checkpoint");
  common_flags(train, o);
  train->add_option("--resume", o.resume, "continue from a checkpoint");
  train->add_option("--sweep", o.sweeps, "grid over a key, e.g. --sweep model.n_ctx=4,8,16")->take_all();

  auto* infer = app.add_subcommand("infer", "write pseudo-masks for images");
  common_flags(infer, o);
  infer->add_option("--ckpt", o.ckpt, "checkpoint")->required();
  infer->add_option("--input", o.input, "image file or directory (default: <data.root>/<split>/img)");
  infer->add_option("--split", o.split, "split used when --input is absent");
  infer->add_flag_function("--crf,!--no-crf", [&o](int64_t n) { o.crf = n > 0; }, "dense CRF refinement");
  infer->add_flag("--save-scores", o.save_scores, "also write class score maps as .npy");

  auto* eval = app.add_subcommand("eval", "score predicted masks against ground truth");
  common_flags(eval, o);
  eval->add_option("--pred", o.pred_dir, "prediction directory")->required();
  eval->add_option("--gt", o.gt_dir, "ground-truth directory (default: <data.root>/<split>/mask)");
  eval->add_option("--split", o.split, "split used when --gt is absent");

  auto* diagnose = app.add_subcommand("diagnose", "zero-shot description/image AUC per class");
  common_flags(diagnose, o);
  diagnose->add_option("--split", o.split, "split to score");
  diagnose->add_option("--pred", o.pred_dir, "predictions for the (AUC, IoU) scatter file");

  auto* vis = app.add_subcommand("visualize", "overlay and per-modality heatmaps for one image");
  common_flags(vis, o);
  vis->add_option("--ckpt", o.ckpt, "checkpoint")->required();
  vis->add_option("--input", o.input, "image file")->required();

  auto* syn = app.add_subcommand("synth", "generate the synthetic blob dataset");
  syn->add_option("--out", o.out, "dataset root")->required();
  syn->add_option("--train", synth.train, "train images");
  syn->add_option("--val", synth.val, "val images");
  syn->add_option("--test", synth.test, "test images");
  syn->add_option("--side", synth.side, "image side");
  syn->add_option("--seed", synth.seed, "generator seed");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return wsseg::cmd_train(o, std::cout);
    if (*infer) return wsseg::cmd_infer(o, std::cout);
    if (*eval) return wsseg::cmd_eval(o, std::cout);
    if (*diagnose) return wsseg::cmd_diagnose(o, std::cout);
    if (*vis) return wsseg::cmd_visualize(o, std::cout);
    if (*syn) return wsseg::cmd_synth(o, synth, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
