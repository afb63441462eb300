#pragma once

// Dense autoencoder core: forward pass, masked losses over rated entries,
// exact backpropagation and the SGD/Adam optimizers.
//
// Activations are laid out batch x width; a layer maps A -> A * W^T + 1 b^T.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfr/data.hpp"

namespace pfr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StaleCacheError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out)
      : weight(Matrix::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in))),
        bias(Vector::Zero(static_cast<Eigen::Index>(out))) {}

  std::size_t in_dim() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(weight.size() + bias.size());
  }

  friend bool operator==(const DenseLayer& a, const DenseLayer& b) {
    return a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols() &&
           a.bias.size() == b.bias.size() && a.weight == b.weight && a.bias == b.bias;
  }
};

using LayerStack = std::vector<DenseLayer>;

std::size_t parameter_count(std::span<const DenseLayer> layers);

// Largest absolute elementwise difference; throws ShapeError on mismatch.
double max_abs_difference(std::span<const DenseLayer> a, std::span<const DenseLayer> b);

enum class Activation { kSigmoid, kIdentity };
enum class OutputHead { kIdentity, kSigmoid };
enum class LossKind { kQuadratic, kCrossEntropy };

struct Network {
  LayerStack encoder;
  LayerStack decoder;
  Activation hidden = Activation::kSigmoid;
  OutputHead head = OutputHead::kIdentity;
  // Bumped whenever parameters change; forward caches record it.
  std::uint64_t revision = 0;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;
};

struct Architecture {
  std::vector<std::size_t> encoder_widths{256, 128};
  std::vector<std::size_t> decoder_widths{256};
  Activation hidden = Activation::kSigmoid;
};

struct MaskedBatch {
  Matrix inputs;   // batch x n_in, zeros at unrated positions
  Matrix targets;  // batch x n_out
  Mask mask;       // batch x n_out, true where rated

  std::size_t rated_count() const { return static_cast<std::size_t>(mask.count()); }
};

struct ForwardCache {
  std::vector<Matrix> activations;  // [0] = inputs, back() = predictions
  std::uint64_t revision = 0;
  const Network* network = nullptr;

  const Matrix& predictions() const { return activations.back(); }
};

struct Gradients {
  LayerStack encoder;
  LayerStack decoder;
};

ForwardCache forward(const Network& net, const Matrix& inputs);
inline ForwardCache forward(const Network& net, const MaskedBatch& batch) {
  return forward(net, batch.inputs);
}

// Forward pass without a cache, for evaluation with separately held
// encoder and decoder stacks.
Matrix predict(std::span<const DenseLayer> encoder, std::span<const DenseLayer> decoder,
               Activation hidden, OutputHead head, const Matrix& inputs);

// 2 * in * out summed over layers, for one sample.
std::uint64_t forward_flops(const Network& net);

// Mean per-entry loss over mask-true positions. Cross-entropy expects
// probabilities (sigmoid head output).
double masked_loss(const Matrix& predictions, const MaskedBatch& batch, LossKind kind);

Gradients backward(const Network& net, const ForwardCache& cache, const MaskedBatch& batch,
                   LossKind kind);

enum class OptimizerKind { kSgd, kAdam };

// kActive: weight decay is added only where the data gradient is nonzero.
enum class WeightDecayScope { kAll, kActive };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  WeightDecayScope decay_scope = WeightDecayScope::kActive;
};

// Moment buffers are zero-initialized on first use and must then keep the
// parameter shapes.
struct OptimizerState {
  OptimizerConfig config;
  LayerStack first;   // SGD velocity / Adam first moment
  LayerStack second;  // Adam second moment
  std::uint64_t steps = 0;

  OptimizerState() = default;
  explicit OptimizerState(OptimizerConfig cfg) : config(cfg) {}

  void reset() {
    first.clear();
    second.clear();
    steps = 0;
  }
};

void step(std::span<DenseLayer> params, std::span<const DenseLayer> grads, OptimizerState& state);
void step(Network& net, const Gradients& grads, OptimizerState& encoder_state,
          OptimizerState& decoder_state);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights in row-major order, zero biases.
LayerStack init_layers(std::span<const std::size_t> widths, std::uint64_t seed);
LayerStack init_encoder(std::size_t num_items, const Architecture& arch, std::uint64_t seed);
LayerStack init_decoder(std::size_t num_items, const Architecture& arch, std::uint64_t seed);

// Encoder and decoder draw from independent streams derived from `seed`.
Network init_network(std::size_t num_items, std::uint64_t seed, Feedback mode,
                     const Architecture& arch = {});

inline OutputHead head_for(Feedback mode) {
  return mode == Feedback::kImplicit ? OutputHead::kSigmoid : OutputHead::kIdentity;
}
inline LossKind loss_for(Feedback mode) {
  return mode == Feedback::kImplicit ? LossKind::kCrossEntropy : LossKind::kQuadratic;
}

}  // namespace pfr
