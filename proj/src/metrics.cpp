#include "pfr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "pfr/random.hpp"

namespace pfr {

double rmse(std::span<const double> predictions, std::span<const double> targets,
            std::optional<RatingScale> clamp) {
  if (predictions.size() != targets.size()) throw std::invalid_argument("rmse: size mismatch");
  if (targets.empty()) throw std::domain_error("rmse: empty test set");
  double sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    double p = predictions[i];
    if (clamp) p = std::clamp(p, clamp->min, clamp->max);
    const double e = p - targets[i];
    sum += e * e;
  }
  return std::sqrt(sum / static_cast<double>(targets.size()));
}

std::optional<double> ndcg(std::span<const RankedItem> items, std::optional<std::size_t> cutoff) {
  std::vector<RankedItem> ranked(items.begin(), items.end());
  std::sort(ranked.begin(), ranked.end(), [](const RankedItem& a, const RankedItem& b) {
    return a.score != b.score ? a.score > b.score : a.item < b.item;
  });
  std::vector<double> ideal;
  ideal.reserve(ranked.size());
  for (const auto& r : ranked) ideal.push_back(r.relevance);
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  if (ideal.empty() || ideal.front() <= 0.0) return std::nullopt;

  const std::size_t depth = std::min(ranked.size(), cutoff.value_or(ranked.size()));
  double dcg = 0.0, idcg = 0.0;
  for (std::size_t i = 0; i < depth; ++i) {
    const double discount = std::log2(static_cast<double>(i) + 2.0);
    dcg += ranked[i].relevance / discount;
    idcg += ideal[i] / discount;
  }
  return dcg / idcg;
}

double mean_ndcg(const std::vector<std::vector<RankedItem>>& users, std::optional<std::size_t> cutoff) {
  double sum = 0.0;
  std::size_t counted = 0;
  for (const auto& u : users) {
    if (auto v = ndcg(u, cutoff)) {
      sum += *v;
      ++counted;
    }
  }
  if (counted == 0) throw std::domain_error("ndcg: no user has a positive test item");
  return sum / static_cast<double>(counted);
}

std::string to_string(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::kJoint: return "joint";
    case Algorithm::kFedAvg: return "fedavg";
    case Algorithm::kPersonalFR: return "personalfr";
  }
  return "unknown";
}

Algorithm parse_algorithm(const std::string& name) {
  if (name == "joint") return Algorithm::kJoint;
  if (name == "fedavg") return Algorithm::kFedAvg;
  if (name == "personalfr") return Algorithm::kPersonalFR;
  throw std::invalid_argument("unknown algorithm '" + name + "'");
}

namespace {

std::vector<std::size_t> encoder_chain(const ModelShape& s) {
  std::vector<std::size_t> w{s.num_items};
  w.insert(w.end(), s.encoder_widths.begin(), s.encoder_widths.end());
  return w;
}

std::vector<std::size_t> decoder_chain(const ModelShape& s) {
  std::vector<std::size_t> w{s.encoder_widths.back()};
  w.insert(w.end(), s.decoder_widths.begin(), s.decoder_widths.end());
  w.push_back(s.num_items);
  return w;
}

std::size_t chain_parameters(const std::vector<std::size_t>& w, std::size_t layers) {
  std::size_t total = 0;
  for (std::size_t i = 0; i < layers; ++i) total += w[i] * w[i + 1] + w[i + 1];
  return total;
}

}  // namespace

std::size_t ModelShape::encoder_parameters() const {
  const auto w = encoder_chain(*this);
  return chain_parameters(w, w.size() - 1);
}

std::size_t ModelShape::decoder_parameters() const {
  const auto w = decoder_chain(*this);
  return chain_parameters(w, w.size() - 1);
}

std::size_t ModelShape::inner_decoder_parameters() const {
  const auto w = decoder_chain(*this);
  return chain_parameters(w, w.size() - 2);
}

std::size_t ModelShape::last_hidden_width() const {
  return decoder_widths.empty() ? encoder_widths.back() : decoder_widths.back();
}

std::size_t ModelShape::slice_parameters(std::size_t active_items) const {
  return inner_decoder_parameters() + active_items * (last_hidden_width() + 1);
}

std::uint64_t ModelShape::forward_flops(std::size_t output_width) const {
  auto w = encoder_chain(*this);
  const auto d = decoder_chain(*this);
  w.insert(w.end(), d.begin() + 1, d.end());
  w.back() = output_width;
  std::uint64_t flops = 0;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) flops += 2ULL * w[i] * w[i + 1];
  return flops;
}

std::size_t clients_per_round(std::size_t num_clients, double participation) {
  const auto wanted = static_cast<std::size_t>(std::ceil(participation * static_cast<double>(num_clients)));
  return std::min(num_clients, std::max<std::size_t>(wanted, 1));
}

SelectionSchedule sampling_schedule(std::size_t num_clients, double participation, std::size_t rounds,
                                    std::uint64_t seed) {
  Rng rng(derive_seed(seed, Stream::kSampling));
  const auto per_round = clients_per_round(num_clients, participation);
  SelectionSchedule schedule;
  schedule.reserve(rounds);
  for (std::size_t t = 0; t < rounds; ++t) schedule.push_back(rng.sample_without_replacement(num_clients, per_round));
  return schedule;
}

CommCost comm_cost(Algorithm algorithm, const ModelShape& shape, std::span<const std::size_t> active_counts,
                   const SelectionSchedule& schedule, bool pc_enabled) {
  CommCost cost;
  if (algorithm == Algorithm::kJoint) return cost;
  if (algorithm == Algorithm::kPersonalFR && pc_enabled) {
    for (auto n : active_counts) cost.indices_up += n;
  }
  for (const auto& round : schedule) {
    for (auto m : round) {
      std::uint64_t params = 0;
      if (algorithm == Algorithm::kFedAvg) {
        params = shape.model_parameters();
      } else {
        params = pc_enabled ? shape.slice_parameters(active_counts[m]) : shape.decoder_parameters();
      }
      cost.params_down += params;
      cost.params_up += params;
    }
  }
  return cost;
}

std::uint64_t compute_cost(Algorithm algorithm, const ModelShape& shape, std::span<const std::size_t> samples,
                           std::span<const std::size_t> active_counts, const SelectionSchedule& schedule,
                           std::size_t local_epochs, bool pc_enabled) {
  std::uint64_t flops = 0;
  if (algorithm == Algorithm::kJoint) {
    std::uint64_t total_samples = 0;
    for (auto s : samples) total_samples += s;
    return schedule.size() * total_samples * 3ULL * shape.forward_flops();
  }
  for (const auto& round : schedule) {
    for (auto m : round) {
      const bool narrow = algorithm == Algorithm::kPersonalFR && pc_enabled;
      const auto width = narrow ? active_counts[m] : shape.num_items;
      flops += local_epochs * samples[m] * 3ULL * shape.forward_flops(width);
    }
  }
  return flops;
}

void accumulate(RoundReport& report, const RoundReport* previous) {
  report.cumulative_comm = previous ? previous->cumulative_comm : CommCost{};
  report.cumulative_comm += report.comm;
  report.cumulative_flops = (previous ? previous->cumulative_flops : 0) + report.flops_client;
}

std::string to_json_line(const RoundReport& r, const ReportContext& context) {
  nlohmann::ordered_json j;
  j["round"] = r.round;
  j["train_loss"] = r.train_loss;
  j["metric"] = r.metric;
  j["test_metric"] = r.test_metric ? nlohmann::ordered_json(*r.test_metric) : nlohmann::ordered_json();
  j["clients"] = r.clients;
  j["params_down"] = r.comm.params_down;
  j["params_up"] = r.comm.params_up;
  j["indices_up"] = r.comm.indices_up;
  j["bytes_down"] = r.comm.bytes_down();
  j["bytes_up"] = r.comm.bytes_up();
  j["flops_client"] = r.flops_client;
  j["cum_params_down"] = r.cumulative_comm.params_down;
  j["cum_params_up"] = r.cumulative_comm.params_up;
  j["cum_indices_up"] = r.cumulative_comm.indices_up;
  j["cum_bytes_down"] = r.cumulative_comm.bytes_down();
  j["cum_bytes_up"] = r.cumulative_comm.bytes_up();
  j["cum_flops_client"] = r.cumulative_flops;
  if (context.include_wall_time) j["wall_seconds"] = r.wall_seconds;
  j["config_hash"] = context.config_hash;
  j["seed"] = context.seed;
  return j.dump();
}

RoundReport from_json_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  RoundReport r;
  r.round = j.at("round").get<std::size_t>();
  r.train_loss = j.at("train_loss").get<double>();
  r.metric = j.at("metric").get<std::string>();
  if (!j.at("test_metric").is_null()) r.test_metric = j.at("test_metric").get<double>();
  r.clients = j.at("clients").get<std::size_t>();
  r.comm.params_down = j.at("params_down").get<std::uint64_t>();
  r.comm.params_up = j.at("params_up").get<std::uint64_t>();
  r.comm.indices_up = j.at("indices_up").get<std::uint64_t>();
  r.flops_client = j.at("flops_client").get<std::uint64_t>();
  r.cumulative_comm.params_down = j.at("cum_params_down").get<std::uint64_t>();
  r.cumulative_comm.params_up = j.at("cum_params_up").get<std::uint64_t>();
  r.cumulative_comm.indices_up = j.at("cum_indices_up").get<std::uint64_t>();
  r.cumulative_flops = j.at("cum_flops_client").get<std::uint64_t>();
  if (j.contains("wall_seconds")) r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

void write_summary_csv(std::ostream& out, std::span<const RoundReport> reports, const ReportContext& context) {
  out << "round,train_loss,metric,test_metric,clients,bytes_down,bytes_up,flops_client,"
         "cum_bytes_down,cum_bytes_up,cum_flops_client,config_hash,seed\n";
  for (const auto& r : reports) {
    out << r.round << ',' << nlohmann::json(r.train_loss).dump() << ',' << r.metric << ',';
    if (r.test_metric) out << nlohmann::json(*r.test_metric).dump();
    out << ',' << r.clients << ',' << r.comm.bytes_down() << ',' << r.comm.bytes_up() << ','
        << r.flops_client << ',' << r.cumulative_comm.bytes_down() << ',' << r.cumulative_comm.bytes_up()
        << ',' << r.cumulative_flops << ',' << context.config_hash << ',' << context.seed << '\n';
  }
}

}  // namespace pfr
