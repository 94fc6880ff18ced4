#include "imloss/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "imloss/io_util.hpp"
#include "imloss/segt.hpp"

namespace imloss {

void validate(const TrainConfig& c) {
  if (!(c.learning_rate > 0)) throw ValidationError("train config field 'learning_rate' must be positive");
  if (c.batch_size < 1) throw ValidationError("train config field 'batch_size' must be positive");
  if (!(c.plateau_factor > 0 && c.plateau_factor < 1)) {
    throw ValidationError("train config field 'plateau_factor' must lie in (0,1)");
  }
  if (c.plateau_patience < 1) throw ValidationError("train config field 'plateau_patience' must be positive");
  if (c.early_stop_patience < 1) throw ValidationError("train config field 'early_stop_patience' must be positive");
  if (c.plateau_patience >= c.early_stop_patience) {
    throw ValidationError("train config: plateau_patience must be smaller than early_stop_patience");
  }
  if (c.max_epochs < 1) throw ValidationError("train config field 'max_epochs' must be positive");
  if (!(c.min_delta >= 0)) throw ValidationError("train config field 'min_delta' must be >= 0");
  validate(c.loss);
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"plateau_factor", c.plateau_factor},
          {"plateau_patience", c.plateau_patience},
          {"early_stop_patience", c.early_stop_patience},
          {"max_epochs", c.max_epochs},
          {"min_delta", c.min_delta},
          {"seed", c.seed},
          {"loss_name", c.loss_name},
          {"loss", to_json(c.loss)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("train config must be a JSON object");
  static const std::vector<std::string> known = {"learning_rate", "batch_size", "plateau_factor",
                                                 "plateau_patience", "early_stop_patience", "max_epochs",
                                                 "min_delta", "seed", "loss", "loss_name"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ValidationError("train config field '" + key + "' is not recognised");
    }
  }
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.min_delta = j.value("min_delta", c.min_delta);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::type_error& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  if (j.contains("loss")) {
    const auto& loss = j["loss"];
    if (loss.is_string()) {
      c.loss_name = loss.get<std::string>();
      c.loss = preset(c.loss_name);
    } else {
      c.loss = loss_spec_from_json(loss);
      c.loss_name = std::string(family_name(c.loss.family));
    }
  }
  if (j.contains("loss_name")) c.loss_name = j["loss_name"].get<std::string>();
  validate(c);
  return c;
}

std::pair<Tensor<float>, OneHotMask<double>> gather_batch(const Dataset& data, const std::vector<Index>& indices) {
  const Index h = data.config.height;
  const Index w = data.config.width;
  const Index area = h * w;
  const Index k = static_cast<Index>(indices.size());
  Tensor<float> images({k, h, w, 1});
  Tensor<std::uint8_t> labels({k, h, w});
  for (Index b = 0; b < k; ++b) {
    const Index src = indices[b];
    images.data().segment(b * area, area) = data.images.data().segment(src * area, area);
    labels.data().segment(b * area, area) = data.labels.data().segment(src * area, area);
  }
  return {std::move(images), one_hot<double>(labels, data.num_classes())};
}

double dataset_loss(const TinySegNet<float>& net, const Dataset& data, const std::vector<Index>& indices,
                    const LossSpec& spec, int batch_size) {
  double total = 0;
  int batches = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::vector<Index> chunk(indices.begin() + start,
                                   indices.begin() + std::min(indices.size(), start + batch_size));
    const auto [images, truth] = gather_batch(data, chunk);
    const auto logits = forward(net, images).cast<double>();
    if (!logits.all_finite()) return std::numeric_limits<double>::quiet_NaN();
    total += loss_from_logits(spec, logits, truth);
    ++batches;
  }
  return batches ? total / batches : 0.0;
}

std::vector<SegMetrics> evaluate_images(const TinySegNet<float>& net, const Dataset& data,
                                        const std::vector<Index>& indices) {
  std::vector<SegMetrics> out;
  out.reserve(indices.size());
  const Index area = data.pixels_per_image();
  constexpr std::size_t kChunk = 8;
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const std::vector<Index> chunk(indices.begin() + start, indices.begin() + std::min(indices.size(), start + kChunk));
    const auto [images, truth] = gather_batch(data, chunk);
    const auto pred = argmax(forward(net, images));
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::vector<int> truth_labels(static_cast<std::size_t>(area));
      for (Index k = 0; k < area; ++k) truth_labels[k] = data.labels.data()[chunk[b] * area + k];
      const auto counts = confusion_from_labels(
          {pred.data().data() + static_cast<Index>(b) * area, static_cast<std::size_t>(area)}, truth_labels,
          data.num_classes());
      out.push_back(compute_metrics(counts));
    }
  }
  return out;
}

SegMetrics mean_metrics(const std::vector<SegMetrics>& per_image) {
  SegMetrics m;
  if (per_image.empty()) return m;
  const std::size_t classes = per_image.front().per_class.size();
  m.per_class.assign(classes, {});
  for (const auto& img : per_image) {
    for (std::size_t c = 0; c < classes; ++c) {
      m.per_class[c].dsc += img.per_class[c].dsc;
      m.per_class[c].iou += img.per_class[c].iou;
      m.per_class[c].precision += img.per_class[c].precision;
      m.per_class[c].recall += img.per_class[c].recall;
    }
  }
  const double n = static_cast<double>(per_image.size());
  for (auto& c : m.per_class) {
    c.dsc /= n;
    c.iou /= n;
    c.precision /= n;
    c.recall /= n;
  }
  return m;
}

namespace {

bool finite_gradients(const NetGradients<float>& g) {
  for (std::size_t i = 0; i < g.weight.size(); ++i) {
    if (!g.weight[i].allFinite() || !g.bias[i].allFinite()) return false;
  }
  return true;
}

}  // namespace

TrainReport train(const TrainConfig& config, const Dataset& data, const std::atomic<bool>* cancel) {
  validate(config);
  validate(config.loss, data.num_classes());
  const auto train_idx = data.indices(Split::Train);
  const auto val_idx = data.indices(Split::Val);
  const auto test_idx = data.indices(Split::Test);
  if (train_idx.empty() || val_idx.empty() || test_idx.empty()) {
    throw ValidationError("train: dataset needs nonempty train, val and test splits");
  }

  const auto started = std::chrono::steady_clock::now();
  TrainReport report;
  TinySegNet<float> net = init_xavier(TinySegNet<float>(data.num_classes()), config.seed);
  TinySegNet<float> best = net;
  std::mt19937_64 rng(config.seed ^ 0xa5a5a5a5deadbeefULL);

  double lr = config.learning_rate;
  double best_val = std::numeric_limits<double>::infinity();
  double schedule_best = best_val;
  int plateau_wait = 0;
  int stop_wait = 0;

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    if (cancel && cancel->load()) {
      report.cancelled = true;
      break;
    }
    std::vector<Index> order = train_idx;
    std::shuffle(order.begin(), order.end(), rng);
    double train_total = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size() && !report.diverged; start += config.batch_size) {
      const std::vector<Index> chunk(order.begin() + start,
                                     order.begin() + std::min(order.size(), start + config.batch_size));
      const auto [images, truth] = gather_batch(data, chunk);
      const auto step = backward(net, images, truth, config.loss);
      if (!std::isfinite(step.loss) || !finite_gradients(step.grads)) {
        report.diverged = true;
        report.failure = "non-finite loss or gradient in epoch " + std::to_string(epoch);
        break;
      }
      sgd_step(net, step.grads, lr);
      train_total += step.loss;
      ++batches;
    }
    if (report.diverged) break;

    const double val_loss = dataset_loss(net, data, val_idx, config.loss, config.batch_size);
    if (!std::isfinite(val_loss)) {
      report.diverged = true;
      report.failure = "non-finite validation loss in epoch " + std::to_string(epoch);
      break;
    }
    report.epochs.push_back({epoch, train_total / batches, val_loss, lr});

    // The snapshot tracks the exact minimum; the schedule counts only
    // improvements larger than min_delta.
    if (val_loss < best_val) {
      best_val = val_loss;
      report.best_epoch = epoch;
      best = net;
    }
    if (val_loss < schedule_best - config.min_delta) {
      schedule_best = val_loss;
      plateau_wait = 0;
      stop_wait = 0;
    } else {
      ++plateau_wait;
      ++stop_wait;
      if (plateau_wait >= config.plateau_patience) {
        lr *= config.plateau_factor;
        plateau_wait = 0;
      }
      if (stop_wait >= config.early_stop_patience) break;
    }
  }

  report.best_val_loss = best_val;
  report.model = best;
  report.test_images = test_idx;
  report.per_image_test = evaluate_images(best, data, test_idx);
  report.test_metrics = mean_metrics(report.per_image_test);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

namespace {

nlohmann::json metrics_json(const SegMetrics& m) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t c = 0; c < m.per_class.size(); ++c) {
    const auto& x = m.per_class[c];
    arr.push_back({{"class", c}, {"dsc", x.dsc}, {"iou", x.iou}, {"precision", x.precision}, {"recall", x.recall}});
  }
  return arr;
}

}  // namespace

nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                      {"learning_rate", e.learning_rate}});
  }
  nlohmann::json per_image = nlohmann::json::array();
  for (std::size_t i = 0; i < r.per_image_test.size(); ++i) {
    per_image.push_back({{"image", r.test_images[i]}, {"metrics", metrics_json(r.per_image_test[i])}});
  }
  return {{"epochs", epochs},
          {"best_epoch", r.best_epoch},
          {"best_val_loss", r.best_val_loss},
          {"test_metrics", metrics_json(r.test_metrics)},
          {"per_image_test", per_image},
          {"wall_clock_seconds", r.wall_clock_seconds},
          {"diverged", r.diverged},
          {"cancelled", r.cancelled},
          {"failure", r.failure}};
}

std::string epochs_csv(const TrainReport& r) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,learning_rate\n";
  for (const auto& e : r.epochs) {
    os << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.val_loss) << ','
       << format_double(e.learning_rate) << '\n';
  }
  return os.str();
}

void save_checkpoint(const TinySegNet<float>& net, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["architecture"] = "TinySegNet";
  manifest["num_classes"] = net.num_classes();
  manifest["layers"] = nlohmann::json::array();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    const std::string w = "layer" + std::to_string(i + 1) + "_weight.segt";
    const std::string b = "layer" + std::to_string(i + 1) + "_bias.segt";
    write_segt(dir / w, Tensor<float>::from_matrix({l.weight.rows(), l.weight.cols()}, l.weight));
    write_segt(dir / b, Tensor<float>({l.bias.size()}, l.bias));
    manifest["layers"].push_back({{"kernel", l.kernel},
                                  {"in_channels", l.in_channels},
                                  {"out_channels", l.out_channels},
                                  {"weight", w},
                                  {"bias", b}});
  }
  write_file_atomic(dir / "checkpoint.json", manifest.dump(2) + "\n");
}

TinySegNet<float> load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(read_file(dir / "checkpoint.json"));
  TinySegNet<float> net(manifest.at("num_classes").get<int>());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& entry = manifest.at("layers").at(i);
    auto& l = net.layers[i];
    const auto w = read_segt_as<float>(dir / entry.at("weight").get<std::string>());
    const auto b = read_segt_as<float>(dir / entry.at("bias").get<std::string>());
    if (w.shape() != Shape{l.weight.rows(), l.weight.cols()} || b.size() != l.bias.size()) {
      throw ValidationError("checkpoint: layer " + std::to_string(i + 1) + " has unexpected shape");
    }
    l.weight = w.matrix();
    l.bias = b.data();
  }
  return net;
}

}  // namespace imloss
