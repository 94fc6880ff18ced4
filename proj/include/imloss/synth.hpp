#pragma once

// Synthetic class-imbalanced segmentation scenes. Each image holds one
// foreground shape per rare class, scaled so its pixel count hits the target
// fraction, on a noisy piecewise-constant intensity background.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "imloss/numerics.hpp"

namespace imloss {

enum class BlobKind { Ellipse, Blob };

struct SceneConfig {
  std::string name = "custom";
  int height = 64;
  int width = 64;
  int num_classes = 2;
  /// Per rare class. In nested mode this is the class-1 (organ) fraction.
  double target_foreground_fraction = 0.093;
  /// Nested mode only: class-2 (lesion) fraction, placed inside class 1.
  double nested_fraction = 0.0;
  double noise_sigma = 0.15;
  BlobKind blob_kind = BlobKind::Ellipse;
  bool nesting = false;
  int count = 312;
  std::uint64_t seed = 0;

  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

/// Mean intensity per class before noise.
inline constexpr std::array<double, 3> kClassIntensity = {0.2, 0.7, 0.5};

/// Throws ValidationError (with the achievable bound) for unachievable configs.
void validate(const SceneConfig& config);

/// Named presets: easy (0.25), moderate (0.093), low (0.048), severe (0.002),
/// nested (0.008 organ / 0.002 lesion, three classes).
SceneConfig scene_preset(const std::string& name);
std::vector<std::string> scene_preset_names();

nlohmann::json to_json(const SceneConfig& config);
SceneConfig scene_config_from_json(const nlohmann::json& j);

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

struct SplitIndices {
  std::vector<Index> train;
  std::vector<Index> val;
  std::vector<Index> test;
};

struct Dataset {
  SceneConfig config;
  /// count x H x W x 1 intensities in [0,1].
  Tensor<float> images;
  /// count x H x W class labels.
  Tensor<std::uint8_t> labels;
  std::vector<Split> splits;

  Index count() const { return images.empty() ? 0 : images.shape()[0]; }
  Index pixels_per_image() const { return images.empty() ? 0 : images.size() / count(); }
  int num_classes() const { return config.num_classes; }
  std::vector<Index> indices(Split which) const;
  /// One-hot ground truth (count x H x W x C).
  OneHotMask<double> masks() const;
};

/// Deterministic in config.seed; image i draws from its own stream derived
/// from (seed, i). Splits follow the 64/16/20 protocol.
Dataset generate(const SceneConfig& config);

/// Train/val/test partition with val = round(r_val * n), test = round(r_test * n)
/// and train the rest, after a seeded shuffle.
SplitIndices split(Index count, const std::array<double, 3>& ratios, std::uint64_t seed);
/// 80% development / 20% test, development split 80% train / 20% validation.
inline constexpr std::array<double, 3> kProtocolRatios = {0.64, 0.16, 0.20};

/// Mean over images of the per-image class fraction, for every class.
std::vector<double> imbalance_stats(const Dataset& dataset);

/// Directory of SEGT files plus manifest.json.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace imloss
