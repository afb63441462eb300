#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pfr/data.hpp"

namespace pfr {

// ---------------------------------------------------------------------------
// Accuracy metrics

// Root mean squared error over rated test entries. When `clamp` is given,
// predictions are clipped to the rating scale before scoring.
double rmse(std::span<const double> predictions, std::span<const double> targets,
            std::optional<RatingScale> clamp = std::nullopt);

struct RankedItem {
  std::uint32_t item = 0;
  double score = 0.0;
  double relevance = 0.0;  // 0 or 1
};

// NDCG for one user over that user's test items. Items are ranked by score
// descending, ties by ascending item index, gain rel / log2(rank + 1).
// Returns nullopt when the user has no positive item.
std::optional<double> ndcg(std::span<const RankedItem> items,
                           std::optional<std::size_t> cutoff = std::nullopt);

// Mean over evaluable users; throws when no user has a positive item.
double mean_ndcg(const std::vector<std::vector<RankedItem>>& users,
                 std::optional<std::size_t> cutoff = std::nullopt);

// ---------------------------------------------------------------------------
// Cost accounting

enum class Algorithm { kJoint, kFedAvg, kPersonalFR };

std::string to_string(Algorithm algorithm);
Algorithm parse_algorithm(const std::string& name);

inline constexpr std::uint64_t kBytesPerParameter = 8;
inline constexpr std::uint64_t kBytesPerIndex = 4;

// Layer widths of the autoencoder: [n, enc..., dec..., n].
struct ModelShape {
  std::size_t num_items = 0;
  std::vector<std::size_t> encoder_widths{256, 128};
  std::vector<std::size_t> decoder_widths{256};

  std::size_t encoder_parameters() const;
  std::size_t decoder_parameters() const;
  // Every decoder layer but the output layer.
  std::size_t inner_decoder_parameters() const;
  std::size_t last_hidden_width() const;
  // Inner decoder plus n' output rows with their biases.
  std::size_t slice_parameters(std::size_t active_items) const;
  std::size_t model_parameters() const { return encoder_parameters() + decoder_parameters(); }

  // 2 * in * out per layer for one sample, output layer narrowed to `output_width`.
  std::uint64_t forward_flops(std::size_t output_width) const;
  std::uint64_t forward_flops() const { return forward_flops(num_items); }
};

struct MessageCost {
  std::uint64_t parameters = 0;
  std::uint64_t indices = 0;
  std::uint64_t bytes() const { return kBytesPerParameter * parameters + kBytesPerIndex * indices; }
};

struct CommCost {
  std::uint64_t params_down = 0;
  std::uint64_t params_up = 0;
  std::uint64_t indices_up = 0;

  std::uint64_t bytes_down() const { return kBytesPerParameter * params_down; }
  std::uint64_t bytes_up() const { return kBytesPerParameter * params_up + kBytesPerIndex * indices_up; }
  std::uint64_t total_bytes() const { return bytes_down() + bytes_up(); }

  CommCost& operator+=(const CommCost& o) {
    params_down += o.params_down;
    params_up += o.params_up;
    indices_up += o.indices_up;
    return *this;
  }
  friend bool operator==(const CommCost&, const CommCost&) = default;
};

// Clients selected in each round, ascending ids.
using SelectionSchedule = std::vector<std::vector<std::size_t>>;

std::size_t clients_per_round(std::size_t num_clients, double participation);

// Replays the seeded client-sampling stream without training.
SelectionSchedule sampling_schedule(std::size_t num_clients, double participation,
                                    std::size_t rounds, std::uint64_t seed);

// Closed-form traffic for a schedule. `active_counts[m]` is |I_m|.
// FedAvg moves the whole model each way; PersonalFR moves the inner decoder
// plus n'(q+1) output parameters (the full decoder without PC) and, with PC,
// registers every client's index set once.
CommCost comm_cost(Algorithm algorithm, const ModelShape& shape,
                   std::span<const std::size_t> active_counts, const SelectionSchedule& schedule,
                   bool pc_enabled = true);

// Analytic client FLOPs: forward 2*in*out per layer per sample, backward
// twice the forward; PC narrows the output layer to n'. `samples[m]` is the
// number of training users on client m, each visited `local_epochs` times
// per selection. Joint treats each scheduled round as one epoch over every
// client's samples at full output width.
std::uint64_t compute_cost(Algorithm algorithm, const ModelShape& shape,
                           std::span<const std::size_t> samples,
                           std::span<const std::size_t> active_counts,
                           const SelectionSchedule& schedule, std::size_t local_epochs,
                           bool pc_enabled = true);

// ---------------------------------------------------------------------------
// Round reports

struct RoundReport {
  std::size_t round = 0;
  double train_loss = 0.0;
  std::string metric;                 // "rmse" or "ndcg"
  std::optional<double> test_metric;  // absent on rounds without evaluation
  std::size_t clients = 0;
  CommCost comm;
  std::uint64_t flops_client = 0;
  CommCost cumulative_comm;
  std::uint64_t cumulative_flops = 0;
  double wall_seconds = 0.0;
};

// Adds the per-round counters onto the previous cumulative ones.
void accumulate(RoundReport& report, const RoundReport* previous);

struct ReportContext {
  std::string config_hash;
  std::uint64_t seed = 0;
  bool include_wall_time = false;
};

std::string to_json_line(const RoundReport& report, const ReportContext& context);
RoundReport from_json_line(const std::string& line);
void write_summary_csv(std::ostream& out, std::span<const RoundReport> reports,
                       const ReportContext& context);

}  // namespace pfr
