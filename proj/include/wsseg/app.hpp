#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "wsseg/config.hpp"

namespace wsseg {

struct CommandOptions {
  std::string config_path;             // optional JSON file
  std::vector<std::string> overrides;  // key.path=value
  std::optional<uint64_t> seed;
  std::optional<bool> crf;
  std::string out;
  std::string ckpt;
  std::string input;  // image file or directory
  std::string pred_dir;
  std::string gt_dir;
  std::string split = "test";
  std::string resume;
  std::vector<std::string> sweeps;  // key.path=v1,v2,...
  bool save_scores = false;
};

/// Explicit user settings only (file, then --set, then --seed/--crf), without defaults.
Json user_layer(const CommandOptions& opt);
/// Defaults merged with the user layer.
Json resolve_config(const CommandOptions& opt);

/// Per-class maps from one modality's channels of a fused CAM [B, K, H, W];
/// `present[c]` is false (and the map zero) for classes with no channel of that modality.
Tensor modality_class_maps(const Tensor& fused, const CombinedBank& bank, Modality modality, ag::Reduction reduction,
                           std::vector<bool>* present = nullptr);

int cmd_train(const CommandOptions& opt, std::ostream& out);
int cmd_infer(const CommandOptions& opt, std::ostream& out);
int cmd_eval(const CommandOptions& opt, std::ostream& out);
int cmd_diagnose(const CommandOptions& opt, std::ostream& out);
int cmd_visualize(const CommandOptions& opt, std::ostream& out);
int cmd_synth(const CommandOptions& opt, const SynthConfig& synth, std::ostream& out);

}  // namespace wsseg
