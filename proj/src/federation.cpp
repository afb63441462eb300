#include "pfr/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace pfr {

namespace {

// Runs fn(i) for i in [0, count). Work is split statically; the first
// exception in index order is rethrown.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<std::uint32_t> all_items(std::size_t n) {
  std::vector<std::uint32_t> items(n);
  std::iota(items.begin(), items.end(), std::uint32_t{0});
  return items;
}

Matrix dense_inputs(const RatingMatrix& train, std::span<const std::uint32_t> users) {
  Matrix inputs = Matrix::Zero(static_cast<Eigen::Index>(users.size()), static_cast<Eigen::Index>(train.num_items()));
  for (std::size_t r = 0; r < users.size(); ++r) {
    const auto items = train.rated_items(users[r]);
    const auto values = train.rated_values(users[r]);
    for (std::size_t k = 0; k < items.size(); ++k) inputs(static_cast<Eigen::Index>(r), items[k]) = values[k];
  }
  return inputs;
}

void check_config(const FederationConfig& cfg) {
  if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!(cfg.participation > 0.0 && cfg.participation <= 1.0)) {
    throw std::invalid_argument("participation fraction must lie in (0, 1]");
  }
}

void put_optimizer(TensorArchive& archive, const std::string& prefix, const OptimizerState& state) {
  archive.put_layers(prefix + ".first", state.first);
  archive.put_layers(prefix + ".second", state.second);
  archive.put_text(prefix + ".steps", std::to_string(state.steps));
}

void get_optimizer(const TensorArchive& archive, const std::string& prefix, OptimizerState& state) {
  state.first = archive.layers(prefix + ".first");
  state.second = archive.layers(prefix + ".second");
  state.steps = std::stoull(archive.text(prefix + ".steps"));
}

}  // namespace

MaskedBatch make_batch(const RatingMatrix& train, std::span<const std::uint32_t> users,
                       std::span<const std::uint32_t> output_items) {
  const auto rows = static_cast<Eigen::Index>(users.size());
  const auto width = static_cast<Eigen::Index>(output_items.empty() ? train.num_items() : output_items.size());
  MaskedBatch batch;
  batch.inputs = dense_inputs(train, users);
  batch.targets = Matrix::Zero(rows, width);
  batch.mask = Mask::Constant(rows, width, false);
  for (std::size_t r = 0; r < users.size(); ++r) {
    const auto items = train.rated_items(users[r]);
    const auto values = train.rated_values(users[r]);
    for (std::size_t k = 0; k < items.size(); ++k) {
      Eigen::Index col = items[k];
      if (!output_items.empty()) {
        const auto it = std::lower_bound(output_items.begin(), output_items.end(), items[k]);
        if (it == output_items.end() || *it != items[k]) {
          throw std::invalid_argument("rated item " + std::to_string(items[k]) + " missing from the active set");
        }
        col = static_cast<Eigen::Index>(it - output_items.begin());
      }
      batch.targets(static_cast<Eigen::Index>(r), col) = values[k];
      batch.mask(static_cast<Eigen::Index>(r), col) = true;
    }
  }
  return batch;
}

LocalTrainStats train_local(Network& net, OptimizerState& encoder_state, OptimizerState& decoder_state,
                            const RatingMatrix& train, std::span<const std::uint32_t> users,
                            std::span<const std::uint32_t> output_items, std::size_t epochs,
                            std::size_t batch_size, Rng& shuffle) {
  LocalTrainStats stats;
  std::vector<std::uint32_t> order;
  for (auto u : users) {
    if (!train.rated_items(u).empty()) order.push_back(u);
  }
  if (order.empty() || epochs == 0) return stats;
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");

  const auto kind = loss_for(train.feedback());
  const auto per_sample = 3 * forward_flops(net);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    shuffle.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const auto end = std::min(order.size(), start + batch_size);
      const auto batch_users = std::span<const std::uint32_t>(order).subspan(start, end - start);
      const auto batch = make_batch(train, batch_users, output_items);
      const auto cache = forward(net, batch);
      const double loss = masked_loss(cache.predictions(), batch, kind);
      if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss");
      const auto grads = backward(net, cache, batch, kind);
      step(net, grads, encoder_state, decoder_state);
      stats.loss_sum += loss;
      ++stats.batches;
      stats.samples += batch_users.size();
      stats.flops += batch_users.size() * per_sample;
    }
  }
  return stats;
}

ClientUpdateResult client_update(ClientState& client, const DecoderDownlink& downlink, const RatingMatrix& train,
                                 const FederationConfig& cfg) {
  if (downlink.client != client.id) throw std::invalid_argument("downlink addressed to another client");
  const auto& active = downlink.decoder.active_items;
  const bool full = active.size() == train.num_items();

  Network net;
  net.encoder = std::move(client.encoder);
  net.decoder = local_decoder(downlink.decoder);
  net.hidden = cfg.architecture.hidden;
  net.head = head_for(train.feedback());
  OptimizerState decoder_state(cfg.optimizer);

  ClientUpdateResult result;
  try {
    result.stats = train_local(net, client.encoder_state, decoder_state, train, client.users,
                               full ? std::span<const std::uint32_t>() : std::span<const std::uint32_t>(active),
                               cfg.local_epochs, cfg.batch_size, client.shuffle);
  } catch (const DivergenceError& e) {
    client.encoder = std::move(net.encoder);
    throw ClientDivergence(downlink.round.value, client.id.value, e.what());
  } catch (...) {
    client.encoder = std::move(net.encoder);
    throw;
  }
  client.encoder = std::move(net.encoder);
  result.uplink = {downlink.round, client.id, slice_from_local(std::move(net.decoder), active)};
  return result;
}

void ServerState::register_client(const IndexRegistration& registration) {
  const auto& items = registration.items.items;
  if (items.empty()) {
    throw std::invalid_argument("client " + std::to_string(registration.client.value) +
                                " registered no rated items");
  }
  const auto n = global_decoder.empty() ? 0 : global_decoder.back().out_dim();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i] >= n || (i > 0 && items[i] <= items[i - 1])) {
      throw std::invalid_argument("registered index set must be ascending and within the item range");
    }
  }
  registered[registration.client] = registration.items;
}

DecoderDownlink ServerState::dispatch(ClientId client, bool pc_enabled) const {
  const auto it = registered.find(client);
  if (it == registered.end()) throw std::out_of_range("client " + std::to_string(client.value) + " is not registered");
  DecoderDownlink down;
  down.round = RoundIndex{round + 1};
  down.client = client;
  if (pc_enabled) {
    down.decoder = extract_active(global_decoder, it->second.items);
  } else {
    const auto items = all_items(global_decoder.back().out_dim());
    down.decoder = extract_active(global_decoder, items);
  }
  return down;
}

LayerStack mean_layers(std::span<const LayerStack* const> stacks) {
  if (stacks.empty()) throw std::invalid_argument("cannot average zero layer stacks");
  LayerStack mean = *stacks.front();
  for (std::size_t i = 1; i < stacks.size(); ++i) {
    const auto& next = *stacks[i];
    if (next.size() != mean.size()) throw ShapeError("layer stacks differ in depth");
    const double inv = 1.0 / static_cast<double>(i + 1);
    for (std::size_t l = 0; l < mean.size(); ++l) {
      if (next[l].weight.rows() != mean[l].weight.rows() || next[l].weight.cols() != mean[l].weight.cols()) {
        throw ShapeError("layer stacks differ in shape");
      }
      mean[l].weight += (next[l].weight - mean[l].weight) * inv;
      mean[l].bias += (next[l].bias - mean[l].bias) * inv;
    }
  }
  return mean;
}

LayerStack server_aggregate(const ServerState& state, std::span<const DecoderUplink> updates) {
  if (updates.empty()) throw std::invalid_argument("aggregation needs at least one update");
  std::vector<const DecoderUplink*> ordered;
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->client < b->client; });

  std::vector<LayerStack> refilled;
  refilled.reserve(ordered.size());
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    const auto& u = *ordered[i];
    if (!state.registered.count(u.client)) {
      throw std::out_of_range("update from unregistered client " + std::to_string(u.client.value));
    }
    if (i > 0 && ordered[i - 1]->client == u.client) {
      throw std::invalid_argument("duplicate update from client " + std::to_string(u.client.value));
    }
    refilled.push_back(refill(state.global_decoder, u.decoder));
  }
  std::vector<const LayerStack*> ptrs;
  for (const auto& r : refilled) ptrs.push_back(&r);
  return mean_layers(ptrs);
}

double evaluate(std::span<const EvalGroup> groups, std::span<const DenseLayer> decoder, Activation hidden,
                OutputHead head, const RatingMatrix& train, const RatingMatrix& test,
                std::optional<std::size_t> ndcg_cutoff) {
  constexpr std::size_t kChunk = 256;
  const bool explicit_feedback = test.feedback() == Feedback::kExplicit;
  std::vector<double> predictions, targets;
  std::vector<std::vector<RankedItem>> ranked;

  for (const auto& group : groups) {
    std::vector<std::uint32_t> users;
    for (auto u : group.users) {
      if (!test.rated_items(u).empty()) users.push_back(u);
    }
    for (std::size_t start = 0; start < users.size(); start += kChunk) {
      const auto chunk = std::span<const std::uint32_t>(users).subspan(start, std::min(kChunk, users.size() - start));
      const Matrix out = predict(group.encoder, decoder, hidden, head, dense_inputs(train, chunk));
      for (std::size_t r = 0; r < chunk.size(); ++r) {
        const auto items = test.rated_items(chunk[r]);
        const auto values = test.rated_values(chunk[r]);
        if (explicit_feedback) {
          for (std::size_t k = 0; k < items.size(); ++k) {
            predictions.push_back(out(static_cast<Eigen::Index>(r), items[k]));
            targets.push_back(values[k]);
          }
        } else {
          std::vector<RankedItem> user_items;
          for (std::size_t k = 0; k < items.size(); ++k) {
            user_items.push_back({items[k], out(static_cast<Eigen::Index>(r), items[k]), values[k]});
          }
          ranked.push_back(std::move(user_items));
        }
      }
    }
  }
  if (explicit_feedback) return rmse(predictions, targets, test.scale());
  return mean_ndcg(ranked, ndcg_cutoff);
}

// ---------------------------------------------------------------------------

Simulation::Simulation(std::shared_ptr<const FederatedData> data, FederationConfig cfg)
    : data_(std::move(data)), cfg_(std::move(cfg)) {
  check_config(cfg_);
  if (data_->train.num_items() == 0) throw std::invalid_argument("training data has no items");
}

RoundReport Simulation::run_round() {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t t = round_ + 1;
  const RoundWork work = train_round(t);
  round_ = t;

  RoundReport report;
  report.round = t;
  report.train_loss = work.batches > 0 ? work.loss_sum / static_cast<double>(work.batches) : 0.0;
  report.metric = data_->test.feedback() == Feedback::kExplicit ? "rmse" : "ndcg";
  const bool due = (cfg_.eval_every > 0 && t % cfg_.eval_every == 0) || t == cfg_.rounds;
  if (due && data_->test.num_entries() > 0) report.test_metric = evaluate_now();
  report.clients = work.clients;
  report.comm = work.comm;
  report.flops_client = work.flops;
  accumulate(report, last_ ? &*last_ : nullptr);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  last_ = report;
  return report;
}

void Simulation::save(TensorArchive& archive) const {
  archive.put_text("algorithm", to_string(cfg_.algorithm));
  archive.put_text("round", std::to_string(round_));
  if (last_) archive.put_text("last_report", to_json_line(*last_, {}));
  save_state(archive);
}

void Simulation::load(const TensorArchive& archive) {
  if (archive.text("algorithm") != to_string(cfg_.algorithm)) {
    throw ArchiveError("checkpoint was written by a different algorithm");
  }
  round_ = std::stoull(archive.text("round"));
  last_.reset();
  if (archive.contains("last_report")) last_ = from_json_line(archive.text("last_report"));
  load_state(archive);
}

// ---------------------------------------------------------------------------

PersonalFRSimulation::PersonalFRSimulation(std::shared_ptr<const FederatedData> data, FederationConfig cfg)
    : Simulation(std::move(data), std::move(cfg)), sampling_(derive_seed(cfg_.seed, Stream::kSampling)) {
  const auto& partition = data_->partition;
  if (partition.num_clients != cfg_.num_clients) {
    throw std::invalid_argument("partition has " + std::to_string(partition.num_clients) +
                                " clients, configuration expects " + std::to_string(cfg_.num_clients));
  }
  const auto n = data_->train.num_items();
  server_.global_decoder = init_decoder(n, cfg_.architecture, derive_seed(cfg_.seed, Stream::kDecoderInit));
  const auto initial_encoder = init_encoder(n, cfg_.architecture, derive_seed(cfg_.seed, Stream::kEncoderInit));

  clients_.reserve(partition.num_clients);
  for (std::uint32_t m = 0; m < partition.num_clients; ++m) {
    ClientState client{ClientId{m},
                       partition.users[m],
                       partition.item_sets[m],
                       initial_encoder,
                       OptimizerState(cfg_.optimizer),
                       Rng(derive_seed(cfg_.seed, Stream::kShuffle, m))};
    const IndexRegistration registration{client.id, ItemIndexSet{client.item_set}};
    server_.register_client(registration);
    registration_indices_ += wire_size(registration).indices;
    clients_.push_back(std::move(client));
  }
}

Simulation::RoundWork PersonalFRSimulation::train_round(std::size_t round) {
  const auto selected = sampling_.sample_without_replacement(clients_.size(), cfg_.clients_per_round());
  std::vector<DecoderUplink> uplinks(selected.size());
  std::vector<LocalTrainStats> stats(selected.size());
  std::vector<MessageCost> down_cost(selected.size());

  parallel_for(selected.size(), cfg_.threads, [&](std::size_t i) {
    const auto down = server_.dispatch(ClientId{static_cast<std::uint32_t>(selected[i])}, cfg_.pc_enabled);
    down_cost[i] = wire_size(down);
    auto result = client_update(clients_[selected[i]], down, data_->train, cfg_);
    uplinks[i] = std::move(result.uplink);
    stats[i] = result.stats;
  });

  RoundWork work;
  work.clients = selected.size();
  if (round == 1 && cfg_.pc_enabled) work.comm.indices_up += registration_indices_;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    work.comm.params_down += down_cost[i].parameters;
    work.comm.params_up += wire_size(uplinks[i]).parameters;
    work.loss_sum += stats[i].loss_sum;
    work.batches += stats[i].batches;
    work.flops += stats[i].flops;
  }
  server_.global_decoder = server_aggregate(server_, uplinks);
  server_.round = round;
  return work;
}

double PersonalFRSimulation::evaluate_now() const {
  std::vector<EvalGroup> groups;
  groups.reserve(clients_.size());
  for (const auto& c : clients_) groups.push_back({c.encoder, c.users});
  return evaluate(groups, server_.global_decoder, cfg_.architecture.hidden, head_for(data_->train.feedback()),
                  data_->train, data_->test, cfg_.ndcg_cutoff);
}

void PersonalFRSimulation::save_state(TensorArchive& archive) const {
  archive.put_layers("server.decoder", server_.global_decoder);
  archive.put_text("sampling", sampling_.state());
  for (const auto& c : clients_) {
    const auto prefix = "client." + std::to_string(c.id.value);
    archive.put_layers(prefix + ".encoder", c.encoder);
    put_optimizer(archive, prefix + ".encoder_state", c.encoder_state);
    archive.put_text(prefix + ".shuffle", c.shuffle.state());
  }
}

void PersonalFRSimulation::load_state(const TensorArchive& archive) {
  server_.global_decoder = archive.layers("server.decoder");
  server_.round = round_;
  sampling_.restore(archive.text("sampling"));
  for (auto& c : clients_) {
    const auto prefix = "client." + std::to_string(c.id.value);
    c.encoder = archive.layers(prefix + ".encoder");
    get_optimizer(archive, prefix + ".encoder_state", c.encoder_state);
    c.shuffle.restore(archive.text(prefix + ".shuffle"));
  }
}

// ---------------------------------------------------------------------------

FedAvgSimulation::FedAvgSimulation(std::shared_ptr<const FederatedData> data, FederationConfig cfg)
    : Simulation(std::move(data), std::move(cfg)), sampling_(derive_seed(cfg_.seed, Stream::kSampling)) {
  if (data_->partition.num_clients != cfg_.num_clients) {
    throw std::invalid_argument("partition does not match the configured number of clients");
  }
  global_ = init_network(data_->train.num_items(), cfg_.seed, data_->train.feedback(), cfg_.architecture);
  for (std::size_t m = 0; m < cfg_.num_clients; ++m) shuffles_.emplace_back(derive_seed(cfg_.seed, Stream::kShuffle, m));
}

Simulation::RoundWork FedAvgSimulation::train_round(std::size_t round) {
  const auto selected = sampling_.sample_without_replacement(cfg_.num_clients, cfg_.clients_per_round());
  std::vector<Network> locals(selected.size());
  std::vector<LocalTrainStats> stats(selected.size());

  parallel_for(selected.size(), cfg_.threads, [&](std::size_t i) {
    const auto m = selected[i];
    Network local = global_;
    OptimizerState encoder_state(cfg_.optimizer), decoder_state(cfg_.optimizer);
    try {
      stats[i] = train_local(local, encoder_state, decoder_state, data_->train, data_->partition.users[m], {},
                             cfg_.local_epochs, cfg_.batch_size, shuffles_[m]);
    } catch (const DivergenceError& e) {
      throw ClientDivergence(round, m, e.what());
    }
    locals[i] = std::move(local);
  });

  RoundWork work;
  work.clients = selected.size();
  const auto model_params = global_.parameter_count();
  std::vector<const LayerStack*> encoders, decoders;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    work.comm.params_down += model_params;
    work.comm.params_up += locals[i].parameter_count();
    work.loss_sum += stats[i].loss_sum;
    work.batches += stats[i].batches;
    work.flops += stats[i].flops;
    encoders.push_back(&locals[i].encoder);
    decoders.push_back(&locals[i].decoder);
  }
  global_.encoder = mean_layers(encoders);
  global_.decoder = mean_layers(decoders);
  ++global_.revision;
  return work;
}

double FedAvgSimulation::evaluate_now() const {
  std::vector<std::uint32_t> users(data_->train.num_users());
  std::iota(users.begin(), users.end(), std::uint32_t{0});
  const EvalGroup group{global_.encoder, users};
  return evaluate(std::span<const EvalGroup>(&group, 1), global_.decoder, global_.hidden, global_.head, data_->train,
                  data_->test, cfg_.ndcg_cutoff);
}

void FedAvgSimulation::save_state(TensorArchive& archive) const {
  archive.put_layers("global.encoder", global_.encoder);
  archive.put_layers("global.decoder", global_.decoder);
  archive.put_text("sampling", sampling_.state());
  for (std::size_t m = 0; m < shuffles_.size(); ++m) archive.put_text("client." + std::to_string(m) + ".shuffle", shuffles_[m].state());
}

void FedAvgSimulation::load_state(const TensorArchive& archive) {
  global_.encoder = archive.layers("global.encoder");
  global_.decoder = archive.layers("global.decoder");
  ++global_.revision;
  sampling_.restore(archive.text("sampling"));
  for (std::size_t m = 0; m < shuffles_.size(); ++m) shuffles_[m].restore(archive.text("client." + std::to_string(m) + ".shuffle"));
}

// ---------------------------------------------------------------------------

JointSimulation::JointSimulation(std::shared_ptr<const FederatedData> data, FederationConfig cfg)
    : Simulation(std::move(data), std::move(cfg)),
      encoder_state_(cfg_.optimizer),
      decoder_state_(cfg_.optimizer),
      shuffle_(derive_seed(cfg_.seed, Stream::kShuffle, 0)) {
  net_ = init_network(data_->train.num_items(), cfg_.seed, data_->train.feedback(), cfg_.architecture);
  users_.resize(data_->train.num_users());
  std::iota(users_.begin(), users_.end(), std::uint32_t{0});
}

Simulation::RoundWork JointSimulation::train_round(std::size_t round) {
  LocalTrainStats stats;
  try {
    stats = train_local(net_, encoder_state_, decoder_state_, data_->train, users_, {}, 1, cfg_.batch_size, shuffle_);
  } catch (const DivergenceError& e) {
    throw ClientDivergence(round, 0, e.what());
  }
  RoundWork work;
  work.loss_sum = stats.loss_sum;
  work.batches = stats.batches;
  work.flops = stats.flops;
  return work;
}

double JointSimulation::evaluate_now() const {
  const EvalGroup group{net_.encoder, users_};
  return evaluate(std::span<const EvalGroup>(&group, 1), net_.decoder, net_.hidden, net_.head, data_->train,
                  data_->test, cfg_.ndcg_cutoff);
}

void JointSimulation::save_state(TensorArchive& archive) const {
  archive.put_layers("model.encoder", net_.encoder);
  archive.put_layers("model.decoder", net_.decoder);
  put_optimizer(archive, "model.encoder_state", encoder_state_);
  put_optimizer(archive, "model.decoder_state", decoder_state_);
  archive.put_text("shuffle", shuffle_.state());
}

void JointSimulation::load_state(const TensorArchive& archive) {
  net_.encoder = archive.layers("model.encoder");
  net_.decoder = archive.layers("model.decoder");
  ++net_.revision;
  get_optimizer(archive, "model.encoder_state", encoder_state_);
  get_optimizer(archive, "model.decoder_state", decoder_state_);
  shuffle_.restore(archive.text("shuffle"));
}

// ---------------------------------------------------------------------------

std::unique_ptr<Simulation> make_simulation(std::shared_ptr<const FederatedData> data, const FederationConfig& cfg) {
  switch (cfg.algorithm) {
    case Algorithm::kPersonalFR: return std::make_unique<PersonalFRSimulation>(std::move(data), cfg);
    case Algorithm::kFedAvg: return std::make_unique<FedAvgSimulation>(std::move(data), cfg);
    case Algorithm::kJoint: return std::make_unique<JointSimulation>(std::move(data), cfg);
  }
  throw std::invalid_argument("unknown algorithm");
}

namespace {

std::vector<RoundReport> run_all(const FederatedData& data, FederationConfig cfg, Algorithm algorithm) {
  cfg.algorithm = algorithm;
  auto sim = make_simulation(std::make_shared<const FederatedData>(data), cfg);
  std::vector<RoundReport> reports;
  reports.reserve(cfg.rounds);
  for (std::size_t t = 0; t < cfg.rounds; ++t) reports.push_back(sim->run_round());
  return reports;
}

}  // namespace

std::vector<RoundReport> run_personalfr(const FederatedData& data, const FederationConfig& cfg) {
  return run_all(data, cfg, Algorithm::kPersonalFR);
}

std::vector<RoundReport> run_fedavg(const FederatedData& data, const FederationConfig& cfg) {
  return run_all(data, cfg, Algorithm::kFedAvg);
}

std::vector<RoundReport> run_joint(const FederatedData& data, const FederationConfig& cfg) {
  return run_all(data, cfg, Algorithm::kJoint);
}

}  // namespace pfr
