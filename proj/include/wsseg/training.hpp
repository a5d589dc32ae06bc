#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "wsseg/losses.hpp"
#include "wsseg/metrics.hpp"
#include "wsseg/pipeline.hpp"

namespace wsseg {

/// Raised when a training step produces a non-finite loss; the message carries the per-term breakdown.
class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a checkpoint file fails its format or checksum verification.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sample {
  std::string id;
  Tensor image;                // [3, H, W], normalized
  std::vector<double> label;   // multi-hot, length C
  std::optional<Mask> mask;    // internal class ids, ignored pixels = ignore_index
};

struct TrainConfig {
  double lr = 1e-5;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t batch_size = 8;
  int64_t epochs = 20;
  LossConfig loss;
  uint64_t seed = 0;
  int32_t ignore_index = -1;  // ground-truth label excluded from validation mIoU

  void validate() const;
};

struct AdamState {
  int64_t step = 0;
  std::map<std::string, Tensor> m, v;
};

/// Decoupled weight decay Adam: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
/// Parameters without a gradient buffer are skipped entirely.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}
  void step(const ParamSet& params);
  const AdamState& state() const { return state_; }
  /// Replaces the moments after checking them against `params`.
  void load_state(const AdamState& s, const ParamSet& params);

 private:
  TrainConfig cfg_;
  AdamState state_;
};

struct Checkpoint {
  static constexpr uint32_t kFormatVersion = 1;

  std::map<std::string, Tensor> params;       // values after the last completed epoch
  std::map<std::string, Tensor> best_params;  // values at the best validation epoch
  AdamState optimizer;
  int64_t epoch = 0;  // completed epochs
  double best_metric = -1.0;
  int64_t best_epoch = -1;
  std::string config_json;
  std::string rng_state;
  std::vector<std::string> class_names;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Overwrites the model's trainable state (best or last values); nothing changes on a mismatch.
void apply_checkpoint(const Model& model, const Checkpoint& ckpt, bool use_best = true);

struct EpochRecord {
  int64_t epoch = 0;
  int64_t steps = 0;
  double total = 0.0;
  std::array<double, 4> level{};
  double align = 0.0;
  double diversity = 0.0;
  double val_miou = 0.0;
  double val_mdice = 0.0;
};

struct FitOptions {
  std::ostream* log = nullptr;         // one JSON record per line
  const Checkpoint* resume = nullptr;  // continue from this state
  int64_t stop_after_epoch = -1;       // return early once this many epochs are complete
  std::string config_json;             // stored in the checkpoint verbatim
};

struct FitResult {
  Checkpoint checkpoint;
  std::vector<double> step_losses;
  std::vector<EpochRecord> history;
};

/// AdamW on every trainable parameter; val mIoU of pre-CRF pseudo-masks after each epoch selects the best state.
FitResult fit(const Model& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& cfg, const FitOptions& opt = {});

/// [B, 3, H, W] from samples idx[0..].
Tensor stack_images(const std::vector<Sample>& samples, const std::vector<size_t>& idx);
Tensor stack_labels(const std::vector<Sample>& samples, const std::vector<size_t>& idx);

/// Pseudo-mask confusion counts over samples that carry masks.
ConfusionCounts evaluate_pseudo_masks(const Model& model, const std::vector<Sample>& samples, int64_t batch_size,
                                      int32_t ignore_index);

struct ImageLevelAccuracy {
  double elementwise = 0.0;  // fraction of (image, class) decisions that are correct
  double exact = 0.0;        // fraction of images whose whole label vector is correct
};

/// Thresholds sigmoid of the mean of the four level logits at 0.5.
ImageLevelAccuracy image_level_accuracy(const Model& model, const std::vector<Sample>& samples, int64_t batch_size,
                                        const LossConfig& loss = {});

}  // namespace wsseg
