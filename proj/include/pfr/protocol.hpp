#pragma once

// Everything that crosses the client/server boundary in PersonalFR.
//
// Only item index sets and decoder parameters may appear in a message. The
// WireSafe concept pins each message to an exact field list drawn from an
// allowlist, so adding a member of any other type (ratings, latent codes,
// encoder layers) fails to compile.

#include <compare>
#include <cstdint>
#include <span>
#include <vector>

#include "pfr/metrics.hpp"
#include "pfr/nn.hpp"

namespace pfr {

struct ClientId {
  std::uint32_t value = 0;
  auto operator<=>(const ClientId&) const = default;
};

struct RoundIndex {
  std::uint64_t value = 0;
  auto operator<=>(const RoundIndex&) const = default;
};

// Sorted, duplicate-free item indices (I_m).
struct ItemIndexSet {
  std::vector<std::uint32_t> items;
};

// Decoder parameters restricted to a client's rated items: every layer but
// the output layer in full, plus the output rows/biases at `active_items`.
struct ActiveDecoderSlice {
  LayerStack inner_layers;
  std::vector<std::uint32_t> active_items;  // ascending
  Matrix w_prime;                           // n' x q
  Vector b_prime;                           // n'

  std::size_t parameter_count() const;
  std::size_t active_count() const { return active_items.size(); }
};

// Gathers the active output rows. Throws on an empty, unsorted or
// out-of-range index set.
ActiveDecoderSlice extract_active(std::span<const DenseLayer> decoder,
                                  std::span<const std::uint32_t> active_items);

// Splices the slice's output rows into `previous` at its active items; all
// other output rows come from `previous` verbatim, inner layers from the slice.
LayerStack refill(std::span<const DenseLayer> previous, const ActiveDecoderSlice& update);

// Decoder the client computes with: inner layers plus an n' x q output layer.
LayerStack local_decoder(const ActiveDecoderSlice& slice);
ActiveDecoderSlice slice_from_local(LayerStack local, std::vector<std::uint32_t> active_items);

struct IndexRegistration {
  ClientId client;
  ItemIndexSet items;
};

struct DecoderDownlink {
  RoundIndex round;
  ClientId client;
  ActiveDecoderSlice decoder;
};

struct DecoderUplink {
  RoundIndex round;
  ClientId client;
  ActiveDecoderSlice decoder;
};

// 8 bytes per float64 parameter, 4 per transmitted index.
MessageCost wire_size(const IndexRegistration& message);
MessageCost wire_size(const DecoderDownlink& message);
MessageCost wire_size(const DecoderUplink& message);

namespace wire {

template <typename T>
inline constexpr bool kAllowedField = false;
template <>
inline constexpr bool kAllowedField<ClientId> = true;
template <>
inline constexpr bool kAllowedField<RoundIndex> = true;
template <>
inline constexpr bool kAllowedField<ItemIndexSet> = true;
template <>
inline constexpr bool kAllowedField<ActiveDecoderSlice> = true;

struct AnyField {
  template <typename T>
  operator T() const;
};

template <typename... Fields>
struct FieldList {};

template <typename Message, typename List>
struct ExactFields;

template <typename Message, typename... Fields>
struct ExactFields<Message, FieldList<Fields...>> {
  static constexpr bool value =
      (kAllowedField<Fields> && ...) &&
      requires { Message{std::declval<Fields>()...}; } &&
      !requires { Message{std::declval<Fields>()..., AnyField{}}; };
};

}  // namespace wire

template <typename Message, typename... Fields>
concept WireSafe = wire::ExactFields<Message, wire::FieldList<Fields...>>::value;

static_assert(WireSafe<IndexRegistration, ClientId, ItemIndexSet>);
static_assert(WireSafe<DecoderDownlink, RoundIndex, ClientId, ActiveDecoderSlice>);
static_assert(WireSafe<DecoderUplink, RoundIndex, ClientId, ActiveDecoderSlice>);

}  // namespace pfr
