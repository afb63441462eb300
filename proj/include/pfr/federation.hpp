#pragma once

// Federated training loops: PersonalFR (private encoders, partially
// federated decoder, optional partial compression), FedAvg over the whole
// model, and centralized Joint training.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "pfr/archive.hpp"
#include "pfr/data.hpp"
#include "pfr/metrics.hpp"
#include "pfr/nn.hpp"
#include "pfr/protocol.hpp"
#include "pfr/random.hpp"

namespace pfr {

struct FederationConfig {
  Algorithm algorithm = Algorithm::kPersonalFR;
  std::size_t num_clients = 100;   // M
  double participation = 0.1;      // C
  std::size_t local_epochs = 5;    // K
  std::size_t rounds = 800;        // T (epochs for Joint)
  std::size_t batch_size = 10;     // B
  bool pc_enabled = true;
  OptimizerConfig optimizer;
  Architecture architecture;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  std::optional<std::size_t> ndcg_cutoff;
  std::size_t threads = 1;

  std::size_t clients_per_round() const { return pfr::clients_per_round(num_clients, participation); }
};

struct FederatedData {
  RatingMatrix train;
  RatingMatrix test;
  ClientPartition partition;
};

class ClientDivergence : public DivergenceError {
 public:
  ClientDivergence(std::size_t round, std::size_t client, const std::string& what)
      : DivergenceError("round " + std::to_string(round) + ", client " + std::to_string(client) + ": " + what),
        round_(round),
        client_(client) {}
  std::size_t round() const { return round_; }
  std::size_t client() const { return client_; }

 private:
  std::size_t round_;
  std::size_t client_;
};

// Builds a batch for `users`; targets and mask cover `output_items` (all
// items when empty), inputs always span every item.
MaskedBatch make_batch(const RatingMatrix& train, std::span<const std::uint32_t> users,
                       std::span<const std::uint32_t> output_items);

struct LocalTrainStats {
  double loss_sum = 0.0;  // sum of per-batch losses, measured before each step
  std::size_t batches = 0;
  std::uint64_t samples = 0;
  std::uint64_t flops = 0;
};

// `epochs` passes of minibatch training over `users` (those without
// training ratings are skipped), reshuffled each pass by `shuffle`.
LocalTrainStats train_local(Network& net, OptimizerState& encoder_state, OptimizerState& decoder_state,
                            const RatingMatrix& train, std::span<const std::uint32_t> users,
                            std::span<const std::uint32_t> output_items, std::size_t epochs,
                            std::size_t batch_size, Rng& shuffle);

// Client side. The encoder and its optimizer state never leave this struct.
struct ClientState {
  ClientId id;
  std::vector<std::uint32_t> users;
  std::vector<std::uint32_t> item_set;
  LayerStack encoder;
  OptimizerState encoder_state;
  Rng shuffle;
};

struct ClientUpdateResult {
  DecoderUplink uplink;
  LocalTrainStats stats;
};

// K local epochs on the received decoder; the decoder optimizer state starts
// from zero, the encoder's persists. Returns the decoder in the shape it
// arrived in.
ClientUpdateResult client_update(ClientState& client, const DecoderDownlink& downlink,
                                 const RatingMatrix& train, const FederationConfig& cfg);

struct ServerState {
  LayerStack global_decoder;
  std::map<ClientId, ItemIndexSet> registered;
  std::size_t round = 0;

  void register_client(const IndexRegistration& registration);
  DecoderDownlink dispatch(ClientId client, bool pc_enabled) const;
};

// Refills every update against the current global decoder and returns their
// unweighted mean, reduced in ascending client order.
LayerStack server_aggregate(const ServerState& state, std::span<const DecoderUplink> updates);

// Running elementwise mean of layer stacks in the given order.
LayerStack mean_layers(std::span<const LayerStack* const> stacks);

struct EvalGroup {
  std::span<const DenseLayer> encoder;
  std::span<const std::uint32_t> users;
};

// Predicts each user's test entries from their training vector. Explicit
// feedback scores clamped RMSE, implicit feedback mean NDCG.
double evaluate(std::span<const EvalGroup> groups, std::span<const DenseLayer> decoder, Activation hidden,
                OutputHead head, const RatingMatrix& train, const RatingMatrix& test,
                std::optional<std::size_t> ndcg_cutoff = std::nullopt);

class Simulation {
 public:
  virtual ~Simulation() = default;

  RoundReport run_round();
  std::size_t rounds_completed() const { return round_; }
  const FederationConfig& config() const { return cfg_; }
  const FederatedData& data() const { return *data_; }

  virtual double evaluate_now() const = 0;

  void save(TensorArchive& archive) const;
  void load(const TensorArchive& archive);

 protected:
  Simulation(std::shared_ptr<const FederatedData> data, FederationConfig cfg);

  struct RoundWork {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    std::size_t clients = 0;
    CommCost comm;
    std::uint64_t flops = 0;
  };
  virtual RoundWork train_round(std::size_t round) = 0;
  virtual void save_state(TensorArchive& archive) const = 0;
  virtual void load_state(const TensorArchive& archive) = 0;

  std::shared_ptr<const FederatedData> data_;
  FederationConfig cfg_;
  std::size_t round_ = 0;
  std::optional<RoundReport> last_;
};

class PersonalFRSimulation : public Simulation {
 public:
  PersonalFRSimulation(std::shared_ptr<const FederatedData> data, FederationConfig cfg);

  const ServerState& server() const { return server_; }
  const ClientState& client(std::size_t m) const { return clients_.at(m); }
  std::size_t num_clients() const { return clients_.size(); }
  double evaluate_now() const override;

 private:
  RoundWork train_round(std::size_t round) override;
  void save_state(TensorArchive& archive) const override;
  void load_state(const TensorArchive& archive) override;

  ServerState server_;
  std::vector<ClientState> clients_;
  Rng sampling_;
  std::uint64_t registration_indices_ = 0;
};

class FedAvgSimulation : public Simulation {
 public:
  FedAvgSimulation(std::shared_ptr<const FederatedData> data, FederationConfig cfg);

  const Network& global_model() const { return global_; }
  double evaluate_now() const override;

 private:
  RoundWork train_round(std::size_t round) override;
  void save_state(TensorArchive& archive) const override;
  void load_state(const TensorArchive& archive) override;

  Network global_;
  std::vector<Rng> shuffles_;
  Rng sampling_;
};

// One round is one epoch over every user.
class JointSimulation : public Simulation {
 public:
  JointSimulation(std::shared_ptr<const FederatedData> data, FederationConfig cfg);

  const Network& model() const { return net_; }
  double evaluate_now() const override;

 private:
  RoundWork train_round(std::size_t round) override;
  void save_state(TensorArchive& archive) const override;
  void load_state(const TensorArchive& archive) override;

  Network net_;
  OptimizerState encoder_state_;
  OptimizerState decoder_state_;
  std::vector<std::uint32_t> users_;
  Rng shuffle_;
};

std::unique_ptr<Simulation> make_simulation(std::shared_ptr<const FederatedData> data, const FederationConfig& cfg);

std::vector<RoundReport> run_personalfr(const FederatedData& data, const FederationConfig& cfg);
std::vector<RoundReport> run_fedavg(const FederatedData& data, const FederationConfig& cfg);
std::vector<RoundReport> run_joint(const FederatedData& data, const FederationConfig& cfg);

}  // namespace pfr
