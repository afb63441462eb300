#include "pfr/nn.hpp"

#include <algorithm>
#include <cmath>

#include "pfr/random.hpp"

namespace pfr {

namespace {

void apply_activation(Matrix& z, Activation act) {
  if (act == Activation::kSigmoid) z = (1.0 + (-z.array()).exp()).inverse().matrix();
}

void apply_head(Matrix& z, OutputHead head) {
  if (head == OutputHead::kSigmoid) z = (1.0 + (-z.array()).exp()).inverse().matrix();
}

void check_chain(const Network& net) {
  if (net.encoder.empty() || net.decoder.empty()) throw ShapeError("network needs encoder and decoder layers");
  std::size_t width = net.encoder.front().in_dim();
  auto check = [&](const DenseLayer& layer) {
    if (layer.in_dim() != width) throw ShapeError("layer dimensions do not chain");
    if (static_cast<std::size_t>(layer.bias.size()) != layer.out_dim()) {
      throw ShapeError("bias length does not match layer output");
    }
    width = layer.out_dim();
  };
  for (const auto& l : net.encoder) check(l);
  for (const auto& l : net.decoder) check(l);
}

const DenseLayer& layer_at(const Network& net, std::size_t i) {
  return i < net.encoder.size() ? net.encoder[i] : net.decoder[i - net.encoder.size()];
}

bool finite(const DenseLayer& g) {
  return g.weight.allFinite() && g.bias.allFinite();
}

// Adds lambda * theta to the gradient (elementwise where scoped).
template <typename Param>
Param decayed(const Param& grad, const Param& theta, const OptimizerConfig& cfg) {
  if (cfg.weight_decay == 0.0) return grad;
  if (cfg.decay_scope == WeightDecayScope::kAll) return grad + cfg.weight_decay * theta;
  Param out = grad;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    if (grad.data()[i] != 0.0) out.data()[i] += cfg.weight_decay * theta.data()[i];
  }
  return out;
}

template <typename Param>
void update(Param& theta, const Param& grad, Param& m, Param& v, const OptimizerState& state) {
  const auto& cfg = state.config;
  const Param g = decayed(grad, theta, cfg);
  if (cfg.kind == OptimizerKind::kSgd) {
    m = cfg.momentum * m + g;
    theta -= cfg.learning_rate * m;
    return;
  }
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  theta.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
}

LayerStack zeros_like(std::span<const DenseLayer> layers) {
  LayerStack out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.emplace_back(l.in_dim(), l.out_dim());
  return out;
}

bool same_shapes(std::span<const DenseLayer> a, std::span<const DenseLayer> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].in_dim() != b[i].in_dim() || a[i].out_dim() != b[i].out_dim() ||
        a[i].bias.size() != b[i].bias.size()) {
      return false;
    }
  }
  return true;
}

}  // namespace

std::size_t parameter_count(std::span<const DenseLayer> layers) {
  std::size_t total = 0;
  for (const auto& l : layers) total += l.parameter_count();
  return total;
}

double max_abs_difference(std::span<const DenseLayer> a, std::span<const DenseLayer> b) {
  if (!same_shapes(a, b)) throw ShapeError("layer stacks differ in shape");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].weight.size() > 0) worst = std::max(worst, (a[i].weight - b[i].weight).cwiseAbs().maxCoeff());
    if (a[i].bias.size() > 0) worst = std::max(worst, (a[i].bias - b[i].bias).cwiseAbs().maxCoeff());
  }
  return worst;
}

std::size_t Network::input_dim() const { return encoder.empty() ? 0 : encoder.front().in_dim(); }
std::size_t Network::output_dim() const { return decoder.empty() ? 0 : decoder.back().out_dim(); }
std::size_t Network::parameter_count() const {
  return pfr::parameter_count(encoder) + pfr::parameter_count(decoder);
}

ForwardCache forward(const Network& net, const Matrix& inputs) {
  check_chain(net);
  if (static_cast<std::size_t>(inputs.cols()) != net.input_dim()) {
    throw ShapeError("batch has " + std::to_string(inputs.cols()) + " columns, network expects " +
                     std::to_string(net.input_dim()));
  }
  const std::size_t depth = net.encoder.size() + net.decoder.size();
  ForwardCache cache;
  cache.revision = net.revision;
  cache.network = &net;
  cache.activations.reserve(depth + 1);
  cache.activations.push_back(inputs);
  for (std::size_t i = 0; i < depth; ++i) {
    const auto& layer = layer_at(net, i);
    Matrix z = cache.activations.back() * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    if (i + 1 < depth) {
      apply_activation(z, net.hidden);
    } else {
      apply_head(z, net.head);
    }
    cache.activations.push_back(std::move(z));
  }
  return cache;
}

Matrix predict(std::span<const DenseLayer> encoder, std::span<const DenseLayer> decoder,
               Activation hidden, OutputHead head, const Matrix& inputs) {
  const std::size_t depth = encoder.size() + decoder.size();
  if (depth == 0) throw ShapeError("network has no layers");
  const auto& first = encoder.empty() ? decoder.front() : encoder.front();
  if (static_cast<std::size_t>(inputs.cols()) != first.in_dim()) throw ShapeError("input width mismatch");
  Matrix a = inputs;
  for (std::size_t i = 0; i < depth; ++i) {
    const auto& layer = i < encoder.size() ? encoder[i] : decoder[i - encoder.size()];
    if (static_cast<std::size_t>(a.cols()) != layer.in_dim()) throw ShapeError("layer dimensions do not chain");
    Matrix z = a * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    if (i + 1 < depth) {
      apply_activation(z, hidden);
    } else {
      apply_head(z, head);
    }
    a = std::move(z);
  }
  return a;
}

std::uint64_t forward_flops(const Network& net) {
  std::uint64_t flops = 0;
  for (const auto& l : net.encoder) flops += 2ULL * l.in_dim() * l.out_dim();
  for (const auto& l : net.decoder) flops += 2ULL * l.in_dim() * l.out_dim();
  return flops;
}

double masked_loss(const Matrix& predictions, const MaskedBatch& batch, LossKind kind) {
  if (predictions.rows() != batch.targets.rows() || predictions.cols() != batch.targets.cols() ||
      batch.mask.rows() != batch.targets.rows() || batch.mask.cols() != batch.targets.cols()) {
    throw ShapeError("predictions, targets and mask must share a shape");
  }
  const std::size_t count = batch.rated_count();
  if (count == 0) throw std::domain_error("masked loss is undefined without rated entries");

  double sum = 0.0;
  for (Eigen::Index c = 0; c < predictions.cols(); ++c) {
    for (Eigen::Index r = 0; r < predictions.rows(); ++r) {
      if (!batch.mask(r, c)) continue;
      const double p = predictions(r, c);
      const double t = batch.targets(r, c);
      if (kind == LossKind::kQuadratic) {
        sum += (p - t) * (p - t);
      } else {
        const double q = std::clamp(p, 1e-15, 1.0 - 1e-15);
        sum -= t * std::log(q) + (1.0 - t) * std::log(1.0 - q);
      }
    }
  }
  return sum / static_cast<double>(count);
}

Gradients backward(const Network& net, const ForwardCache& cache, const MaskedBatch& batch,
                   LossKind kind) {
  const std::size_t depth = net.encoder.size() + net.decoder.size();
  if (cache.network != &net || cache.revision != net.revision || cache.activations.size() != depth + 1) {
    throw StaleCacheError("forward cache does not belong to the current parameters");
  }
  const Matrix& out = cache.predictions();
  if (out.rows() != batch.targets.rows() || out.cols() != batch.targets.cols() ||
      batch.mask.rows() != out.rows() || batch.mask.cols() != out.cols() ||
      cache.activations.front().rows() != batch.inputs.rows()) {
    throw StaleCacheError("forward cache was computed for a different batch");
  }
  if (kind == LossKind::kCrossEntropy && net.head != OutputHead::kSigmoid) {
    throw ShapeError("cross-entropy loss requires a sigmoid output head");
  }
  const std::size_t count = batch.rated_count();
  if (count == 0) throw std::domain_error("masked loss is undefined without rated entries");
  const double scale = 1.0 / static_cast<double>(count);

  // dL/dz at the output layer; exactly zero off the mask.
  Matrix delta = Matrix::Zero(out.rows(), out.cols());
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      if (!batch.mask(r, c)) continue;
      const double p = out(r, c);
      const double t = batch.targets(r, c);
      if (kind == LossKind::kCrossEntropy) {
        delta(r, c) = (p - t) * scale;
      } else {
        double d = 2.0 * (p - t) * scale;
        if (net.head == OutputHead::kSigmoid) d *= p * (1.0 - p);
        delta(r, c) = d;
      }
    }
  }

  Gradients grads;
  grads.encoder.resize(net.encoder.size());
  grads.decoder.resize(net.decoder.size());
  for (std::size_t i = depth; i-- > 0;) {
    const auto& layer = layer_at(net, i);
    const Matrix& input = cache.activations[i];
    DenseLayer& g = i < net.encoder.size() ? grads.encoder[i] : grads.decoder[i - net.encoder.size()];
    g.weight = delta.transpose() * input;
    g.bias = delta.colwise().sum().transpose();
    if (i == 0) break;
    Matrix upstream = delta * layer.weight;
    if (net.hidden == Activation::kSigmoid) {
      upstream.array() *= input.array() * (1.0 - input.array());
    }
    delta = std::move(upstream);
  }
  return grads;
}

void step(std::span<DenseLayer> params, std::span<const DenseLayer> grads, OptimizerState& state) {
  if (!same_shapes(std::span<const DenseLayer>(params.data(), params.size()), grads)) {
    throw ShapeError("gradient shapes do not match parameters");
  }
  for (const auto& g : grads) {
    if (!finite(g)) throw DivergenceError("non-finite gradient");
  }
  const std::span<const DenseLayer> cparams(params.data(), params.size());
  if (state.first.empty()) {
    state.first = zeros_like(cparams);
    if (state.config.kind == OptimizerKind::kAdam) state.second = zeros_like(cparams);
  } else if (!same_shapes(state.first, cparams)) {
    throw ShapeError("optimizer buffers do not match parameter shapes");
  }
  if (state.config.kind == OptimizerKind::kAdam && state.second.empty()) state.second = zeros_like(cparams);
  ++state.steps;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix unused_w;
    Vector unused_b;
    Matrix& vw = state.config.kind == OptimizerKind::kAdam ? state.second[i].weight : unused_w;
    Vector& vb = state.config.kind == OptimizerKind::kAdam ? state.second[i].bias : unused_b;
    update(params[i].weight, grads[i].weight, state.first[i].weight, vw, state);
    update(params[i].bias, grads[i].bias, state.first[i].bias, vb, state);
  }
}

void step(Network& net, const Gradients& grads, OptimizerState& encoder_state,
          OptimizerState& decoder_state) {
  step(net.encoder, grads.encoder, encoder_state);
  step(net.decoder, grads.decoder, decoder_state);
  ++net.revision;
}

LayerStack init_layers(std::span<const std::size_t> widths, std::uint64_t seed) {
  LayerStack layers;
  Rng rng(seed);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    DenseLayer layer(widths[i], widths[i + 1]);
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths[i]));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = rng.uniform(-bound, bound);
    }
    layers.push_back(std::move(layer));
  }
  return layers;
}

LayerStack init_encoder(std::size_t num_items, const Architecture& arch, std::uint64_t seed) {
  std::vector<std::size_t> widths{num_items};
  widths.insert(widths.end(), arch.encoder_widths.begin(), arch.encoder_widths.end());
  return init_layers(widths, seed);
}

LayerStack init_decoder(std::size_t num_items, const Architecture& arch, std::uint64_t seed) {
  if (arch.encoder_widths.empty()) throw ShapeError("architecture needs a latent width");
  std::vector<std::size_t> widths{arch.encoder_widths.back()};
  widths.insert(widths.end(), arch.decoder_widths.begin(), arch.decoder_widths.end());
  widths.push_back(num_items);
  return init_layers(widths, seed);
}

Network init_network(std::size_t num_items, std::uint64_t seed, Feedback mode, const Architecture& arch) {
  if (num_items < 1) throw ShapeError("network needs at least one item");
  Network net;
  net.encoder = init_encoder(num_items, arch, derive_seed(seed, Stream::kEncoderInit));
  net.decoder = init_decoder(num_items, arch, derive_seed(seed, Stream::kDecoderInit));
  net.hidden = arch.hidden;
  net.head = head_for(mode);
  return net;
}

}  // namespace pfr
