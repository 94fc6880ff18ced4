#pragma once

// Three-layer fully convolutional segmentation model:
//   3x3 conv 1 -> 8, ReLU; 3x3 conv 8 -> 8, ReLU; 1x1 conv 8 -> C.
// Same padding throughout, channels-last activations viewed as
// (batch * H * W) x channels matrices. Convolutions are im2col + GEMM.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "imloss/losses.hpp"
#include "imloss/numerics.hpp"

namespace imloss {

template <typename Scalar>
struct ConvLayer {
  int kernel = 3;
  int in_channels = 1;
  int out_channels = 8;
  /// Row (dy * kernel + dx) * in_channels + ci, column co.
  RowMatrix<Scalar> weight;
  Vector<Scalar> bias;

  ConvLayer() = default;
  ConvLayer(int k, int cin, int cout)
      : kernel(k),
        in_channels(cin),
        out_channels(cout),
        weight(RowMatrix<Scalar>::Zero(k * k * cin, cout)),
        bias(Vector<Scalar>::Zero(cout)) {}

  Index parameter_count() const { return weight.size() + bias.size(); }
  int fan_in() const { return kernel * kernel * in_channels; }
  int fan_out() const { return kernel * kernel * out_channels; }
  double xavier_bound() const { return std::sqrt(6.0 / (fan_in() + fan_out())); }

  friend bool operator==(const ConvLayer& a, const ConvLayer& b) {
    return a.kernel == b.kernel && a.in_channels == b.in_channels && a.out_channels == b.out_channels &&
           a.weight == b.weight && a.bias == b.bias;
  }
};

template <typename Scalar>
struct TinySegNet {
  static constexpr int kHidden = 8;
  std::array<ConvLayer<Scalar>, 3> layers;

  explicit TinySegNet(int num_classes = 2)
      : layers{ConvLayer<Scalar>(3, 1, kHidden), ConvLayer<Scalar>(3, kHidden, kHidden),
               ConvLayer<Scalar>(1, kHidden, num_classes)} {}

  int num_classes() const { return layers[2].out_channels; }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }

  template <typename Other>
  TinySegNet<Other> cast() const {
    TinySegNet<Other> out(num_classes());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.layers[i].weight = layers[i].weight.template cast<Other>();
      out.layers[i].bias = layers[i].bias.template cast<Other>();
    }
    return out;
  }

  friend bool operator==(const TinySegNet&, const TinySegNet&) = default;
};

template <typename Scalar>
struct NetGradients {
  std::array<RowMatrix<Scalar>, 3> weight;
  std::array<Vector<Scalar>, 3> bias;
};

/// Weights uniform in +-sqrt(6 / (fan_in + fan_out)) with fan_in = k*k*C_in and
/// fan_out = k*k*C_out; biases zero.
template <typename Scalar>
TinySegNet<Scalar> init_xavier(TinySegNet<Scalar> net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& layer : net.layers) {
    std::uniform_real_distribution<double> dist(-layer.xavier_bound(), layer.xavier_bound());
    for (Index k = 0; k < layer.weight.size(); ++k) layer.weight.data()[k] = static_cast<Scalar>(dist(rng));
    layer.bias.setZero();
  }
  return net;
}

/// Patch matrix of a same-padded k x k convolution: row per output pixel,
/// column (dy * k + dx) * channels + ci.
template <typename Scalar>
RowMatrix<Scalar> im2col(const RowMatrix<Scalar>& input, Index batch, Index height, Index width, int k) {
  const Index channels = input.cols();
  if (k == 1) return input;
  const int pad = k / 2;
  RowMatrix<Scalar> cols = RowMatrix<Scalar>::Zero(batch * height * width, k * k * channels);
  for (Index b = 0; b < batch; ++b) {
    for (Index y = 0; y < height; ++y) {
      for (Index x = 0; x < width; ++x) {
        const Index row = (b * height + y) * width + x;
        for (int dy = 0; dy < k; ++dy) {
          const Index sy = y + dy - pad;
          if (sy < 0 || sy >= height) continue;
          for (int dx = 0; dx < k; ++dx) {
            const Index sx = x + dx - pad;
            if (sx < 0 || sx >= width) continue;
            cols.row(row).segment((dy * k + dx) * channels, channels) = input.row((b * height + sy) * width + sx);
          }
        }
      }
    }
  }
  return cols;
}

/// Adjoint of im2col: scatters patch-matrix gradients back onto the input.
template <typename Scalar>
RowMatrix<Scalar> col2im(const RowMatrix<Scalar>& cols, Index batch, Index height, Index width, int k,
                         Index channels) {
  if (k == 1) return cols;
  const int pad = k / 2;
  RowMatrix<Scalar> out = RowMatrix<Scalar>::Zero(batch * height * width, channels);
  // Gathered per input pixel so every output row has a single writer.
  for (Index b = 0; b < batch; ++b) {
    for (Index sy = 0; sy < height; ++sy) {
      for (Index sx = 0; sx < width; ++sx) {
        auto dst = out.row((b * height + sy) * width + sx);
        for (int dy = 0; dy < k; ++dy) {
          const Index y = sy - dy + pad;
          if (y < 0 || y >= height) continue;
          for (int dx = 0; dx < k; ++dx) {
            const Index x = sx - dx + pad;
            if (x < 0 || x >= width) continue;
            dst += cols.row((b * height + y) * width + x).segment((dy * k + dx) * channels, channels);
          }
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
struct ForwardPass {
  Index batch = 0;
  Index height = 0;
  Index width = 0;
  RowMatrix<Scalar> cols1;
  RowMatrix<Scalar> act1;
  RowMatrix<Scalar> cols2;
  RowMatrix<Scalar> act2;
  RowMatrix<Scalar> logits;
};

template <typename Scalar>
ForwardPass<Scalar> forward_pass(const TinySegNet<Scalar>& net, const Tensor<Scalar>& images) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[3] != 1) {
    throw ValidationError("forward: images must have shape (batch, H, W, 1), got " + shape_string(s));
  }
  ForwardPass<Scalar> f;
  f.batch = s[0];
  f.height = s[1];
  f.width = s[2];
  const auto& l1 = net.layers[0];
  const auto& l2 = net.layers[1];
  const auto& l3 = net.layers[2];

  const RowMatrix<Scalar> input = images.matrix();
  f.cols1 = im2col(input, f.batch, f.height, f.width, l1.kernel);
  f.act1 = ((f.cols1 * l1.weight).rowwise() + l1.bias.transpose()).cwiseMax(Scalar(0));
  f.cols2 = im2col(f.act1, f.batch, f.height, f.width, l2.kernel);
  f.act2 = ((f.cols2 * l2.weight).rowwise() + l2.bias.transpose()).cwiseMax(Scalar(0));
  f.logits = (f.act2 * l3.weight).rowwise() + l3.bias.transpose();
  return f;
}

/// Logits of shape (batch, H, W, C).
template <typename Scalar>
Tensor<Scalar> forward(const TinySegNet<Scalar>& net, const Tensor<Scalar>& images) {
  auto f = forward_pass(net, images);
  return Tensor<Scalar>::from_matrix({f.batch, f.height, f.width, net.num_classes()}, f.logits);
}

template <typename Scalar>
struct BackwardResult {
  double loss = 0;
  NetGradients<Scalar> grads;
};

/// Loss of the batch and gradients of every parameter. The loss itself is
/// always evaluated in double precision.
template <typename Scalar>
BackwardResult<Scalar> backward(const TinySegNet<Scalar>& net, const Tensor<Scalar>& images,
                                const OneHotMask<double>& truth, const LossSpec& spec) {
  const auto f = forward_pass(net, images);
  const Shape logit_shape{f.batch, f.height, f.width, net.num_classes()};
  if (truth.shape() != logit_shape) {
    throw ValidationError("backward: truth shape " + shape_string(truth.shape()) + " does not match logits " +
                          shape_string(logit_shape));
  }
  BackwardResult<Scalar> r;
  if (!f.logits.allFinite()) {
    // Diverged parameters: report a non-finite loss instead of throwing.
    r.loss = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  const auto out = evaluate(spec, Tensor<double>::from_matrix(logit_shape, f.logits), truth);

  r.loss = out.value;
  const RowMatrix<Scalar> d3 = out.grad_logits.matrix().template cast<Scalar>();
  const auto& l2 = net.layers[1];
  const auto& l3 = net.layers[2];

  r.grads.weight[2] = f.act2.transpose() * d3;
  r.grads.bias[2] = d3.colwise().sum().transpose();
  RowMatrix<Scalar> d2 = (d3 * l3.weight.transpose()).cwiseProduct(
      (f.act2.array() > Scalar(0)).template cast<Scalar>().matrix());

  r.grads.weight[1] = f.cols2.transpose() * d2;
  r.grads.bias[1] = d2.colwise().sum().transpose();
  const RowMatrix<Scalar> dcols2 = d2 * l2.weight.transpose();
  RowMatrix<Scalar> d1 = col2im(dcols2, f.batch, f.height, f.width, l2.kernel, l2.in_channels)
                             .cwiseProduct((f.act1.array() > Scalar(0)).template cast<Scalar>().matrix());

  r.grads.weight[0] = f.cols1.transpose() * d1;
  r.grads.bias[0] = d1.colwise().sum().transpose();
  return r;
}

template <typename Scalar>
void sgd_step(TinySegNet<Scalar>& net, const NetGradients<Scalar>& g, double learning_rate) {
  const Scalar lr(learning_rate);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    net.layers[i].weight -= lr * g.weight[i];
    net.layers[i].bias -= lr * g.bias[i];
  }
}

}  // namespace imloss
