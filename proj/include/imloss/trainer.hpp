#pragma once

// Training protocol: plain SGD with batch size 2, reduce-on-plateau learning
// rate schedule, early stopping on validation loss, best-validation model
// evaluated on the test split.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "imloss/loss_spec.hpp"
#include "imloss/metrics.hpp"
#include "imloss/synth.hpp"
#include "imloss/tiny_seg_net.hpp"

namespace imloss {

struct TrainConfig {
  double learning_rate = 0.1;
  int batch_size = 2;
  double plateau_factor = 0.1;
  int plateau_patience = 10;
  int early_stop_patience = 20;
  int max_epochs = 200;
  /// A validation loss counts as an improvement when it beats the best so far
  /// by more than this.
  double min_delta = 1e-6;
  std::uint64_t seed = 0;
  std::string loss_name = "dice";
  LossSpec loss = LossSpec::dice();
};

void validate(const TrainConfig& config);
nlohmann::json to_json(const TrainConfig& config);
/// "loss" may be a preset name or a LossSpec object.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double learning_rate = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_loss = 0;
  /// Per-class mean over test images of the per-image metrics.
  SegMetrics test_metrics;
  std::vector<Index> test_images;
  std::vector<SegMetrics> per_image_test;
  double wall_clock_seconds = 0;
  bool diverged = false;
  bool cancelled = false;
  std::string failure;
  TinySegNet<float> model;
};

/// Mean loss over consecutive batches of `indices` (in the given order).
double dataset_loss(const TinySegNet<float>& net, const Dataset& data, const std::vector<Index>& indices,
                    const LossSpec& spec, int batch_size);

/// Argmax predictions of `net` for the listed images, metrics per image.
std::vector<SegMetrics> evaluate_images(const TinySegNet<float>& net, const Dataset& data,
                                        const std::vector<Index>& indices);

SegMetrics mean_metrics(const std::vector<SegMetrics>& per_image);

TrainReport train(const TrainConfig& config, const Dataset& data, const std::atomic<bool>* cancel = nullptr);

/// Batch of images (k x H x W x 1) and one-hot truth (k x H x W x C).
std::pair<Tensor<float>, OneHotMask<double>> gather_batch(const Dataset& data, const std::vector<Index>& indices);

nlohmann::json to_json(const TrainReport& report);
std::string epochs_csv(const TrainReport& report);

void save_checkpoint(const TinySegNet<float>& net, const std::filesystem::path& dir);
TinySegNet<float> load_checkpoint(const std::filesystem::path& dir);

}  // namespace imloss
