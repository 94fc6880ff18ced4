#include "imloss/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "imloss/io_util.hpp"
#include "imloss/segt.hpp"

namespace imloss {
namespace {

constexpr int kMinRarePixels = 4;

std::mt19937_64 image_stream(std::uint64_t seed, Index image) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(image), 0x5eedu};
  return std::mt19937_64(seq);
}

/// Star-shaped region around a center: a rotated ellipse, optionally with a
/// harmonic boundary perturbation.
struct Shape2D {
  double cx = 0;
  double cy = 0;
  double aspect = 1;  // minor / major
  double theta = 0;
  double wobble3 = 0;
  double phase3 = 0;
  double wobble5 = 0;
  double phase5 = 0;

  bool contains(double x, double y, double scale) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double u = (c * dx + s * dy) / scale;
    const double v = (-s * dx + c * dy) / (scale * aspect);
    const double r = std::sqrt(u * u + v * v);
    const double phi = std::atan2(v, u);
    const double boundary = 1.0 + wobble3 * std::sin(3 * phi + phase3) + wobble5 * std::sin(5 * phi + phase5);
    return r <= boundary;
  }
};

Shape2D random_shape(std::mt19937_64& rng, BlobKind kind, double cx, double cy) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Shape2D s;
  s.cx = cx;
  s.cy = cy;
  s.aspect = 0.6 + 0.4 * unit(rng);
  s.theta = std::numbers::pi * unit(rng);
  if (kind == BlobKind::Blob) {
    s.wobble3 = 0.15 * unit(rng);
    s.phase3 = 2 * std::numbers::pi * unit(rng);
    s.wobble5 = 0.08 * unit(rng);
    s.phase5 = 2 * std::numbers::pi * unit(rng);
  }
  return s;
}

/// Rasterizes shape at the scale whose pixel count is closest to target,
/// restricted to `allowed` pixels when given.
std::vector<bool> fit_shape(const Shape2D& shape, int height, int width, Index target,
                            const std::vector<bool>* allowed) {
  auto raster = [&](double scale, Index* count) {
    std::vector<bool> mask(static_cast<std::size_t>(height) * width, false);
    Index n = 0;
    // Only scan the bounding box of the largest possible extent.
    const double reach = scale * 1.3 + 1.0;
    const int y0 = std::max(0, static_cast<int>(std::floor(shape.cy - reach)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(shape.cy + reach)));
    const int x0 = std::max(0, static_cast<int>(std::floor(shape.cx - reach)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(shape.cx + reach)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const std::size_t k = static_cast<std::size_t>(y) * width + x;
        if (allowed && !(*allowed)[k]) continue;
        if (shape.contains(x + 0.5, y + 0.5, scale)) {
          mask[k] = true;
          ++n;
        }
      }
    }
    *count = n;
    return mask;
  };

  double lo = 0.0;
  double hi = static_cast<double>(std::max(height, width));
  for (int it = 0; it < 50; ++it) {
    const double mid = 0.5 * (lo + hi);
    Index n = 0;
    raster(mid, &n);
    if (n < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  Index n_lo = 0;
  Index n_hi = 0;
  auto m_lo = raster(lo, &n_lo);
  auto m_hi = raster(hi, &n_hi);
  return (target - n_lo <= n_hi - target && n_lo > 0) ? m_lo : m_hi;
}

void fill_image(const SceneConfig& cfg, Index image, float* pixels, std::uint8_t* labels) {
  auto rng = image_stream(cfg.seed, image);
  const int h = cfg.height;
  const int w = cfg.width;
  const Index area = static_cast<Index>(h) * w;
  std::fill(labels, labels + area, std::uint8_t{0});
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto place_center = [&](Index target_pixels) {
    const double radius = std::sqrt(static_cast<double>(target_pixels) / (std::numbers::pi * 0.6)) * 1.25;
    const double mx = std::min(radius + 1.0, w / 2.0);
    const double my = std::min(radius + 1.0, h / 2.0);
    return std::pair{mx + (w - 2 * mx) * unit(rng), my + (h - 2 * my) * unit(rng)};
  };

  const auto frac_pixels = [&](double f) { return std::max<Index>(1, std::llround(f * static_cast<double>(area))); };

  if (cfg.nesting) {
    const Index outer_target = frac_pixels(cfg.target_foreground_fraction + cfg.nested_fraction);
    const Index inner_target = frac_pixels(cfg.nested_fraction);
    const auto [cx, cy] = place_center(outer_target);
    const auto outer_shape = random_shape(rng, cfg.blob_kind, cx, cy);
    const auto outer = fit_shape(outer_shape, h, w, outer_target, nullptr);
    const auto inner_shape = random_shape(rng, BlobKind::Ellipse, cx, cy);
    const auto inner = fit_shape(inner_shape, h, w, inner_target, &outer);
    for (Index k = 0; k < area; ++k) {
      if (inner[k]) {
        labels[k] = 2;
      } else if (outer[k]) {
        labels[k] = 1;
      }
    }
  } else {
    for (int cls = 1; cls < cfg.num_classes; ++cls) {
      const Index target = frac_pixels(cfg.target_foreground_fraction);
      std::vector<bool> free(static_cast<std::size_t>(area));
      for (Index k = 0; k < area; ++k) free[k] = labels[k] == 0;
      const auto [cx, cy] = place_center(target);
      const auto shape = random_shape(rng, cfg.blob_kind, cx, cy);
      const auto mask = fit_shape(shape, h, w, target, cls == 1 ? nullptr : &free);
      for (Index k = 0; k < area; ++k) {
        if (mask[k]) labels[k] = static_cast<std::uint8_t>(cls);
      }
    }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  for (Index k = 0; k < area; ++k) {
    double v = kClassIntensity[labels[k]];
    if (cfg.noise_sigma > 0) v += cfg.noise_sigma * noise(rng);
    pixels[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
}

const char* kind_name(BlobKind k) { return k == BlobKind::Ellipse ? "ellipse" : "blob"; }

}  // namespace

void validate(const SceneConfig& c) {
  if (c.height < 4 || c.width < 4) throw ValidationError("scene: height and width must be at least 4");
  if (c.num_classes != 2 && c.num_classes != 3) throw ValidationError("scene: num_classes must be 2 or 3");
  if (c.count < 3) throw ValidationError("scene: count must be at least 3 (one image per split)");
  if (!(c.noise_sigma >= 0)) throw ValidationError("scene: noise_sigma must be >= 0");
  if (c.nesting && c.num_classes != 3) throw ValidationError("scene: nesting requires num_classes = 3");
  const double area = static_cast<double>(c.height) * c.width;
  const double min_fraction = kMinRarePixels / area;
  auto check = [&](const char* field, double f) {
    if (!(f > 0 && f < 0.5)) throw ValidationError(std::string("scene: ") + field + " must lie in (0, 0.5)");
    if (f < min_fraction) {
      throw ValidationError(std::string("scene: ") + field + " " + std::to_string(f) + " is unachievable on " +
                            std::to_string(c.height) + "x" + std::to_string(c.width) +
                            " images; minimum is " + std::to_string(min_fraction));
    }
  };
  check("target_foreground_fraction", c.target_foreground_fraction);
  if (c.nesting) {
    check("nested_fraction", c.nested_fraction);
    if (c.target_foreground_fraction + c.nested_fraction >= 0.5) {
      throw ValidationError("scene: nested fractions must sum below 0.5");
    }
  } else if (c.target_foreground_fraction * (c.num_classes - 1) >= 0.5) {
    throw ValidationError("scene: total foreground fraction must stay below 0.5");
  }
}

std::vector<std::string> scene_preset_names() { return {"easy", "moderate", "low", "severe", "nested"}; }

SceneConfig scene_preset(const std::string& name) {
  SceneConfig c;
  c.name = name;
  if (name == "easy") {
    c.target_foreground_fraction = 0.25;
    c.count = 100;
  } else if (name == "moderate") {
    c.target_foreground_fraction = 0.093;
    c.count = 312;
  } else if (name == "low") {
    c.target_foreground_fraction = 0.048;
    c.count = 100;
  } else if (name == "severe") {
    c.target_foreground_fraction = 0.002;
    c.count = 100;
  } else if (name == "nested") {
    c.num_classes = 3;
    c.nesting = true;
    c.target_foreground_fraction = 0.008;
    c.nested_fraction = 0.002;
    c.blob_kind = BlobKind::Blob;
    c.count = 100;
  } else {
    throw ValidationError("unknown scene preset '" + name + "'");
  }
  return c;
}

nlohmann::json to_json(const SceneConfig& c) {
  nlohmann::json j = {{"name", c.name},
                      {"height", c.height},
                      {"width", c.width},
                      {"num_classes", c.num_classes},
                      {"target_foreground_fraction", c.target_foreground_fraction},
                      {"noise_sigma", c.noise_sigma},
                      {"blob_kind", kind_name(c.blob_kind)},
                      {"nesting", c.nesting},
                      {"count", c.count},
                      {"seed", c.seed}};
  if (c.nesting) j["nested_fraction"] = c.nested_fraction;
  return j;
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("scene config must be a JSON object");
  SceneConfig c;
  if (j.contains("preset")) c = scene_preset(j.at("preset").get<std::string>());
  static const std::vector<std::string> known = {
      "preset", "name", "height", "width", "num_classes", "target_foreground_fraction", "nested_fraction",
      "noise_sigma", "blob_kind", "nesting", "count", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ValidationError("scene config field '" + key + "' is not recognised");
    }
  }
  try {
    c.name = j.value("name", c.name);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.target_foreground_fraction = j.value("target_foreground_fraction", c.target_foreground_fraction);
    c.nested_fraction = j.value("nested_fraction", c.nested_fraction);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.nesting = j.value("nesting", c.nesting);
    c.count = j.value("count", c.count);
    c.seed = j.value("seed", c.seed);
    const std::string kind = j.value("blob_kind", std::string(kind_name(c.blob_kind)));
    if (kind == "ellipse") {
      c.blob_kind = BlobKind::Ellipse;
    } else if (kind == "blob") {
      c.blob_kind = BlobKind::Blob;
    } else {
      throw ValidationError("scene config field 'blob_kind' must be \"ellipse\" or \"blob\"");
    }
  } catch (const nlohmann::json::type_error& e) {
    throw ValidationError(std::string("scene config: ") + e.what());
  }
  validate(c);
  return c;
}

std::vector<Index> Dataset::indices(Split which) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == which) out.push_back(static_cast<Index>(i));
  }
  return out;
}

OneHotMask<double> Dataset::masks() const { return one_hot<double>(labels, config.num_classes); }

SplitIndices split(Index count, const std::array<double, 3>& ratios, std::uint64_t seed) {
  for (double r : ratios) {
    if (!(r >= 0)) throw ValidationError("split: ratios must be nonnegative");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ValidationError("split: ratios must sum to 1");
  const Index n_val = std::llround(ratios[1] * static_cast<double>(count));
  const Index n_test = std::llround(ratios[2] * static_cast<double>(count));
  const Index n_train = count - n_val - n_test;
  if (n_train <= 0 || n_val <= 0 || n_test <= 0) {
    throw ValidationError("split: ratios leave an empty split for " + std::to_string(count) + " images");
  }
  std::vector<Index> order(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(order.begin(), order.end(), rng);
  SplitIndices out;
  out.train.assign(order.begin(), order.begin() + n_train);
  out.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  out.test.assign(order.begin() + n_train + n_val, order.end());
  for (auto* v : {&out.train, &out.val, &out.test}) std::sort(v->begin(), v->end());
  return out;
}

Dataset generate(const SceneConfig& config) {
  validate(config);
  Dataset ds;
  ds.config = config;
  const Index area = static_cast<Index>(config.height) * config.width;
  ds.images = Tensor<float>({config.count, config.height, config.width, 1});
  ds.labels = Tensor<std::uint8_t>({config.count, config.height, config.width});
  for (Index i = 0; i < config.count; ++i) {
    fill_image(config, i, ds.images.data().data() + i * area, ds.labels.data().data() + i * area);
  }
  const auto parts = split(config.count, kProtocolRatios, config.seed);
  ds.splits.assign(static_cast<std::size_t>(config.count), Split::Train);
  for (Index i : parts.val) ds.splits[i] = Split::Val;
  for (Index i : parts.test) ds.splits[i] = Split::Test;
  return ds;
}

std::vector<double> imbalance_stats(const Dataset& ds) {
  if (ds.count() == 0) throw ValidationError("imbalance_stats: empty dataset");
  const Index area = ds.pixels_per_image();
  std::vector<double> mean(static_cast<std::size_t>(ds.num_classes()), 0.0);
  for (Index i = 0; i < ds.count(); ++i) {
    std::vector<Index> hist(mean.size(), 0);
    for (Index k = 0; k < area; ++k) hist[ds.labels.data()[i * area + k]]++;
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += static_cast<double>(hist[c]) / area;
  }
  for (auto& m : mean) m /= static_cast<double>(ds.count());
  return mean;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto masks = ds.masks().tensor().cast<std::uint8_t>();
  write_segt(dir / "images.segt", ds.images);
  write_segt(dir / "masks.segt", masks);
  nlohmann::json manifest;
  manifest["files"] = {{"images", "images.segt"}, {"masks", "masks.segt"}};
  manifest["config"] = to_json(ds.config);
  manifest["count"] = ds.count();
  manifest["splits"] = {{"train", ds.indices(Split::Train)},
                        {"val", ds.indices(Split::Val)},
                        {"test", ds.indices(Split::Test)}};
  manifest["realized_fractions"] = imbalance_stats(ds);
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw ValidationError("dataset manifest not found: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("dataset manifest: ") + e.what());
  }
  Dataset ds;
  ds.config = scene_config_from_json(manifest.at("config"));
  ds.images = read_segt_as<float>(dir / manifest["files"]["images"].get<std::string>());
  const auto masks = read_segt_as<double>(dir / manifest["files"]["masks"].get<std::string>());
  ds.labels = argmax(OneHotMask<double>(masks).tensor()).cast<std::uint8_t>();
  ds.splits.assign(static_cast<std::size_t>(ds.count()), Split::Train);
  for (Index i : manifest["splits"]["val"].get<std::vector<Index>>()) ds.splits.at(i) = Split::Val;
  for (Index i : manifest["splits"]["test"].get<std::vector<Index>>()) ds.splits.at(i) = Split::Test;
  return ds;
}

}  // namespace imloss
