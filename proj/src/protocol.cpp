#include "pfr/protocol.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace pfr {

namespace {

void check_index_set(std::span<const std::uint32_t> items, std::size_t num_items) {
  if (items.empty()) throw std::invalid_argument("active item set is empty");
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i] >= num_items) {
      throw std::out_of_range("active item " + std::to_string(items[i]) + " outside decoder with " +
                              std::to_string(num_items) + " outputs");
    }
    if (i > 0 && items[i] <= items[i - 1]) throw std::invalid_argument("active item set must be strictly ascending");
  }
}

}  // namespace

std::size_t ActiveDecoderSlice::parameter_count() const {
  return pfr::parameter_count(inner_layers) + static_cast<std::size_t>(w_prime.size() + b_prime.size());
}

ActiveDecoderSlice extract_active(std::span<const DenseLayer> decoder, std::span<const std::uint32_t> active_items) {
  if (decoder.empty()) throw ShapeError("decoder has no layers");
  const auto& output = decoder.back();
  check_index_set(active_items, output.out_dim());

  ActiveDecoderSlice slice;
  slice.inner_layers.assign(decoder.begin(), decoder.end() - 1);
  slice.active_items.assign(active_items.begin(), active_items.end());
  const auto rows = static_cast<Eigen::Index>(active_items.size());
  slice.w_prime.resize(rows, output.weight.cols());
  slice.b_prime.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    slice.w_prime.row(r) = output.weight.row(active_items[static_cast<std::size_t>(r)]);
    slice.b_prime(r) = output.bias(active_items[static_cast<std::size_t>(r)]);
  }
  return slice;
}

LayerStack refill(std::span<const DenseLayer> previous, const ActiveDecoderSlice& update) {
  if (previous.empty() || previous.size() != update.inner_layers.size() + 1) {
    throw ShapeError("slice depth does not match the decoder");
  }
  const auto& output = previous.back();
  check_index_set(update.active_items, output.out_dim());
  if (update.w_prime.rows() != static_cast<Eigen::Index>(update.active_items.size()) ||
      update.w_prime.cols() != output.weight.cols() ||
      update.b_prime.size() != static_cast<Eigen::Index>(update.active_items.size())) {
    throw ShapeError("slice output rows do not match the decoder");
  }
  for (std::size_t i = 0; i < update.inner_layers.size(); ++i) {
    if (update.inner_layers[i].weight.rows() != previous[i].weight.rows() ||
        update.inner_layers[i].weight.cols() != previous[i].weight.cols()) {
      throw ShapeError("slice inner layer shape does not match the decoder");
    }
  }

  LayerStack out(update.inner_layers.begin(), update.inner_layers.end());
  DenseLayer merged = output;
  for (std::size_t r = 0; r < update.active_items.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(update.active_items[r]);
    merged.weight.row(row) = update.w_prime.row(static_cast<Eigen::Index>(r));
    merged.bias(row) = update.b_prime(static_cast<Eigen::Index>(r));
  }
  out.push_back(std::move(merged));
  return out;
}

LayerStack local_decoder(const ActiveDecoderSlice& slice) {
  LayerStack layers(slice.inner_layers.begin(), slice.inner_layers.end());
  DenseLayer output;
  output.weight = slice.w_prime;
  output.bias = slice.b_prime;
  layers.push_back(std::move(output));
  return layers;
}

ActiveDecoderSlice slice_from_local(LayerStack local, std::vector<std::uint32_t> active_items) {
  if (local.empty()) throw ShapeError("decoder has no layers");
  if (local.back().out_dim() != active_items.size()) throw ShapeError("output width differs from active set size");
  ActiveDecoderSlice slice;
  slice.w_prime = std::move(local.back().weight);
  slice.b_prime = std::move(local.back().bias);
  local.pop_back();
  slice.inner_layers = std::move(local);
  slice.active_items = std::move(active_items);
  return slice;
}

MessageCost wire_size(const IndexRegistration& message) { return {0, message.items.items.size()}; }
MessageCost wire_size(const DecoderDownlink& message) { return {message.decoder.parameter_count(), 0}; }
MessageCost wire_size(const DecoderUplink& message) { return {message.decoder.parameter_count(), 0}; }

}  // namespace pfr
