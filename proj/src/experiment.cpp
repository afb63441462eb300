#include "pfr/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "pfr/archive.hpp"
#include "pfr/random.hpp"

namespace fs = std::filesystem;

namespace pfr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(parse_u64(key, v)); }

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

DatasetKind parse_dataset(const std::string& v) {
  if (v == "ml1m") return DatasetKind::kMl1m;
  if (v == "anime") return DatasetKind::kAnime;
  if (v == "synthetic") return DatasetKind::kSynthetic;
  throw ConfigError("dataset: expected ml1m, anime or synthetic, got '" + v + "'");
}

Feedback parse_feedback(const std::string& v) {
  if (v == "explicit") return Feedback::kExplicit;
  if (v == "implicit") return Feedback::kImplicit;
  throw ConfigError("feedback: expected explicit or implicit, got '" + v + "'");
}

struct Field {
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define PFR_SIZE_FIELD(name, member)                                                  \
  Field {                                                                             \
    name, [](ExperimentConfig& c, const std::string& v) { c.member = parse_size(name, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }            \
  }
#define PFR_DOUBLE_FIELD(name, member)                                                  \
  Field {                                                                               \
    name, [](ExperimentConfig& c, const std::string& v) { c.member = parse_double(name, v); }, \
        [](const ExperimentConfig& c) { return format_double(c.member); }               \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"dataset", [](ExperimentConfig& c, const std::string& v) { c.dataset = parse_dataset(v); },
       [](const ExperimentConfig& c) { return to_string(c.dataset); }},
      {"data_path", [](ExperimentConfig& c, const std::string& v) { c.data_path = v; },
       [](const ExperimentConfig& c) { return c.data_path; }},
      {"feedback", [](ExperimentConfig& c, const std::string& v) { c.feedback = parse_feedback(v); },
       [](const ExperimentConfig& c) { return to_string(c.feedback); }},
      {"algorithm",
       [](ExperimentConfig& c, const std::string& v) {
         try {
           c.algorithm = parse_algorithm(v);
         } catch (const std::exception&) {
           throw ConfigError("algorithm: expected joint, fedavg or personalfr, got '" + v + "'");
         }
       },
       [](const ExperimentConfig& c) { return to_string(c.algorithm); }},
      {"pc", [](ExperimentConfig& c, const std::string& v) { c.pc_enabled = parse_bool("pc", v); },
       [](const ExperimentConfig& c) { return std::string(c.pc_enabled ? "true" : "false"); }},
      PFR_SIZE_FIELD("M", num_clients),
      PFR_DOUBLE_FIELD("C", participation),
      PFR_SIZE_FIELD("B", batch_size),
      PFR_SIZE_FIELD("K", local_epochs),
      PFR_SIZE_FIELD("T", rounds),
      {"optimizer",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "sgd") c.optimizer.kind = OptimizerKind::kSgd;
         else if (v == "adam") c.optimizer.kind = OptimizerKind::kAdam;
         else throw ConfigError("optimizer: expected sgd or adam, got '" + v + "'");
       },
       [](const ExperimentConfig& c) {
         return std::string(c.optimizer.kind == OptimizerKind::kSgd ? "sgd" : "adam");
       }},
      PFR_DOUBLE_FIELD("lr", optimizer.learning_rate),
      PFR_DOUBLE_FIELD("momentum", optimizer.momentum),
      PFR_DOUBLE_FIELD("weight_decay", optimizer.weight_decay),
      {"decay_scope",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "active") c.optimizer.decay_scope = WeightDecayScope::kActive;
         else if (v == "all") c.optimizer.decay_scope = WeightDecayScope::kAll;
         else throw ConfigError("decay_scope: expected active or all, got '" + v + "'");
       },
       [](const ExperimentConfig& c) {
         return std::string(c.optimizer.decay_scope == WeightDecayScope::kActive ? "active" : "all");
       }},
      PFR_DOUBLE_FIELD("beta1", optimizer.beta1),
      PFR_DOUBLE_FIELD("beta2", optimizer.beta2),
      PFR_DOUBLE_FIELD("epsilon", optimizer.epsilon),
      {"seed", [](ExperimentConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
       [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      PFR_SIZE_FIELD("eval_every", eval_every),
      {"output_dir", [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; },
       [](const ExperimentConfig& c) { return c.output_dir; }},
      PFR_DOUBLE_FIELD("train_fraction", train_fraction),
      PFR_DOUBLE_FIELD("user_fraction", user_fraction),
      PFR_DOUBLE_FIELD("threshold", threshold),
      {"ndcg_cutoff",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "none") c.ndcg_cutoff.reset();
         else c.ndcg_cutoff = parse_size("ndcg_cutoff", v);
       },
       [](const ExperimentConfig& c) { return c.ndcg_cutoff ? std::to_string(*c.ndcg_cutoff) : "none"; }},
      PFR_SIZE_FIELD("anime.min_ratings", anime.min_ratings),
      PFR_SIZE_FIELD("anime.max_users", anime.max_users),
      PFR_SIZE_FIELD("synthetic.users", synthetic.users),
      PFR_SIZE_FIELD("synthetic.items", synthetic.items),
      PFR_DOUBLE_FIELD("synthetic.density", synthetic.density),
      PFR_SIZE_FIELD("synthetic.rank", synthetic.rank),
      PFR_DOUBLE_FIELD("synthetic.noise", synthetic.noise),
      PFR_DOUBLE_FIELD("synthetic.signal", synthetic.signal),
      PFR_DOUBLE_FIELD("synthetic.bias_spread", synthetic.bias_spread),
      PFR_DOUBLE_FIELD("synthetic.user_activity_sigma", synthetic.user_activity_sigma),
      PFR_DOUBLE_FIELD("synthetic.item_popularity_sigma", synthetic.item_popularity_sigma),
      PFR_SIZE_FIELD("synthetic.min_per_user", synthetic.min_per_user),
      {"synthetic.seed", [](ExperimentConfig& c, const std::string& v) { c.synthetic.seed = parse_u64("synthetic.seed", v); },
       [](const ExperimentConfig& c) { return std::to_string(c.synthetic.seed); }},
      PFR_SIZE_FIELD("threads", threads),
      {"wall_time", [](ExperimentConfig& c, const std::string& v) { c.include_wall_time = parse_bool("wall_time", v); },
       [](const ExperimentConfig& c) { return std::string(c.include_wall_time ? "true" : "false"); }},
  };
  return table;
}

#undef PFR_SIZE_FIELD
#undef PFR_DOUBLE_FIELD

// Keys that never change results.
const std::set<std::string> kRunOnlyKeys = {"seed", "output_dir", "threads", "wall_time", "config_hash"};

// Keys that define the data and the evaluation; a report needs them equal.
bool is_data_key(const std::string& key) {
  static const std::set<std::string> keys = {"dataset", "data_path", "feedback", "T", "train_fraction",
                                             "user_fraction", "threshold", "ndcg_cutoff", "eval_every"};
  return keys.count(key) || key.rfind("anime.", 0) == 0 || key.rfind("synthetic.", 0) == 0;
}

void apply_defaults(ExperimentConfig& c) {
  const bool joint = c.algorithm == Algorithm::kJoint;
  c.optimizer = OptimizerConfig{};
  c.optimizer.momentum = 0.9;
  c.optimizer.weight_decay = 5e-4;
  c.rounds = 800;
  if (joint) {
    c.optimizer.kind = OptimizerKind::kAdam;
    c.optimizer.learning_rate = 1e-3;
    c.batch_size = c.dataset == DatasetKind::kAnime ? 100 : 500;
    c.num_clients = 1;
    c.participation = 1.0;
    c.local_epochs = 1;
  } else {
    c.optimizer.kind = OptimizerKind::kSgd;
    c.optimizer.learning_rate = 0.1;
    c.batch_size = 10;
    c.num_clients = 100;
    c.participation = 0.1;
    c.local_epochs = 5;
  }
  c.threshold = c.dataset == DatasetKind::kAnime ? 8.0 : 3.5;
  c.synthetic.seed = 1;
}

void validate(const ExperimentConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(c.dataset == DatasetKind::kSynthetic || !c.data_path.empty(), "data_path is required for " + to_string(c.dataset));
  require(c.num_clients >= 1, "M must be at least 1");
  require(c.algorithm != Algorithm::kJoint || c.num_clients == 1, "joint training uses M = 1");
  require(c.participation > 0.0 && c.participation <= 1.0, "C must lie in (0, 1]");
  require(c.batch_size >= 1, "B must be at least 1");
  require(c.local_epochs >= 1, "K must be at least 1");
  require(c.rounds >= 1, "T must be at least 1");
  require(c.optimizer.learning_rate > 0.0, "lr must be positive");
  require(c.optimizer.momentum >= 0.0 && c.optimizer.momentum < 1.0, "momentum must lie in [0, 1)");
  require(c.optimizer.weight_decay >= 0.0, "weight_decay must be non-negative");
  require(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0, "beta1 must lie in [0, 1)");
  require(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0, "beta2 must lie in [0, 1)");
  require(c.optimizer.epsilon > 0.0, "epsilon must be positive");
  require(c.train_fraction > 0.0 && c.train_fraction < 1.0, "train_fraction must lie in (0, 1)");
  require(c.user_fraction > 0.0 && c.user_fraction <= 1.0, "user_fraction must lie in (0, 1]");
  require(!c.ndcg_cutoff || *c.ndcg_cutoff >= 1, "ndcg_cutoff must be at least 1");
  require(c.threads >= 1, "threads must be at least 1");
  require(!c.output_dir.empty(), "output_dir must not be empty");
  require(c.synthetic.users >= 1 && c.synthetic.items >= 1, "synthetic dataset needs users and items");
  require(c.synthetic.density > 0.0 && c.synthetic.density <= 1.0, "synthetic.density must lie in (0, 1]");
  require(c.synthetic.rank >= 1, "synthetic.rank must be at least 1");
  require(c.synthetic.noise >= 0.0, "synthetic.noise must be non-negative");
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void save_checkpoint(const Simulation& sim, const std::string& hash, const fs::path& path) {
  TensorArchive archive;
  archive.put_text("config_hash", hash);
  sim.save(archive);
  archive.save(path);
}

std::vector<std::size_t> users_with_ratings(const RatingMatrix& train, const ClientPartition& p) {
  std::vector<std::size_t> samples(p.num_clients, 0);
  for (std::size_t m = 0; m < p.num_clients; ++m) {
    for (auto u : p.users[m]) samples[m] += train.rated_items(u).empty() ? 0 : 1;
  }
  return samples;
}

}  // namespace

std::string to_string(DatasetKind dataset) {
  switch (dataset) {
    case DatasetKind::kMl1m: return "ml1m";
    case DatasetKind::kAnime: return "anime";
    case DatasetKind::kSynthetic: return "synthetic";
  }
  return "unknown";
}

std::string to_string(Feedback feedback) { return feedback == Feedback::kExplicit ? "explicit" : "implicit"; }

FederationConfig ExperimentConfig::federation() const {
  FederationConfig f;
  f.algorithm = algorithm;
  f.num_clients = algorithm == Algorithm::kJoint ? 1 : num_clients;
  f.participation = participation;
  f.local_epochs = local_epochs;
  f.rounds = rounds;
  f.batch_size = batch_size;
  f.pc_enabled = pc_enabled;
  f.optimizer = optimizer;
  f.seed = seed;
  f.eval_every = eval_every;
  f.ndcg_cutoff = ndcg_cutoff;
  f.threads = threads;
  return f;
}

std::vector<std::pair<std::string, std::string>> parse_key_values(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& tokens) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& t : tokens) {
    const auto eq = t.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + t + "'");
    out.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return out;
}

ExperimentConfig resolve_config(const std::vector<std::pair<std::string, std::string>>& file,
                                const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::map<std::string, std::string> merged;
  for (const auto& [k, v] : file) merged[k] = v;
  for (const auto& [k, v] : overrides) merged[k] = v;

  std::set<std::string> known;
  for (const auto& f : fields()) known.insert(f.key);
  for (const auto& [k, v] : merged) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

  ExperimentConfig cfg;
  if (auto it = merged.find("dataset"); it != merged.end()) cfg.dataset = parse_dataset(it->second);
  for (const auto& f : fields()) {
    if (std::string(f.key) == "algorithm" && merged.count("algorithm")) f.set(cfg, merged.at("algorithm"));
  }
  apply_defaults(cfg);
  for (const auto& f : fields()) {
    if (auto it = merged.find(f.key); it != merged.end()) f.set(cfg, it->second);
  }
  validate(cfg);
  return cfg;
}

ExperimentConfig parse_config(const fs::path& file, const std::vector<std::string>& overrides) {
  std::vector<std::pair<std::string, std::string>> values;
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file " + file.string());
    values = parse_key_values(in);
  }
  return resolve_config(values, parse_overrides(overrides));
}

std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

std::string config_echo(const ExperimentConfig& cfg) {
  std::string text;
  for (const auto& [k, v] : config_entries(cfg)) text += k + " = " + v + "\n";
  text += "config_hash = " + config_hash(cfg) + "\n";
  return text;
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::string canonical;
  for (const auto& [k, v] : config_entries(cfg)) {
    if (!kRunOnlyKeys.count(k)) canonical += k + "=" + v + "\n";
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(canonical)));
  return buf;
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  RatingMatrix matrix;
  switch (cfg.dataset) {
    case DatasetKind::kMl1m: {
      fs::path path = cfg.data_path;
      if (fs::is_directory(path)) path /= "ratings.dat";
      matrix = load_movielens(path);
      break;
    }
    case DatasetKind::kAnime: {
      fs::path path = cfg.data_path;
      if (fs::is_directory(path)) path /= "rating.csv";
      matrix = load_anime(path, cfg.anime);
      break;
    }
    case DatasetKind::kSynthetic: {
      auto spec = cfg.synthetic;
      spec.scale = kMovieLensScale;
      matrix = generate_synthetic(spec);
      break;
    }
  }
  if (cfg.user_fraction < 1.0) matrix = subsample_users(matrix, cfg.user_fraction, derive_seed(cfg.seed, Stream::kSubsample));
  if (cfg.feedback == Feedback::kImplicit) matrix = binarize(matrix, cfg.threshold);

  auto parts = split(matrix, SplitSpec{cfg.train_fraction, derive_seed(cfg.seed, Stream::kSplit)});
  const auto clients = cfg.algorithm == Algorithm::kJoint ? std::size_t{1} : cfg.num_clients;
  auto assignment = partition(parts.train, clients, derive_seed(cfg.seed, Stream::kPartition));

  PreparedData out;
  out.train_mean = parts.train.mean_value();
  out.data = FederatedData{std::move(parts.train), std::move(parts.test), std::move(assignment)};
  return out;
}

double constant_predictor_rmse(const RatingMatrix& train, const RatingMatrix& test) {
  const double mean = train.mean_value();
  std::vector<double> predictions(test.num_entries(), mean), targets;
  targets.reserve(test.num_entries());
  for (const auto& e : test.entries()) targets.push_back(e.value);
  return rmse(predictions, targets);
}

RunOutcome run(const ExperimentConfig& cfg, const RunOptions& options) {
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  if (fs::exists(dir / "summary.csv")) throw std::runtime_error("run directory " + dir.string() + " is already complete");

  const auto echo = config_echo(cfg);
  const auto hash = config_hash(cfg);
  const bool resuming = options.resume && fs::exists(dir / "checkpoint.bin");
  if (resuming) {
    std::ifstream in(dir / "config.txt");
    std::stringstream existing;
    existing << in.rdbuf();
    if (existing.str() != echo) throw ConfigError("config differs from the one recorded in " + dir.string());
  } else {
    write_text(dir / "config.txt", echo);
  }

  auto prepared = prepare_data(cfg);
  {
    std::ofstream manifest(dir / "partition.tsv", std::ios::trunc);
    write_partition_manifest(manifest, prepared.data.partition, prepared.data.train);
  }
  auto data = std::make_shared<const FederatedData>(std::move(prepared.data));
  auto sim = make_simulation(data, cfg.federation());

  std::vector<RoundReport> reports;
  std::vector<std::string> kept;
  if (resuming) {
    const auto archive = TensorArchive::load(dir / "checkpoint.bin");
    if (archive.text("config_hash") != hash) throw ConfigError("checkpoint belongs to a different config");
    sim->load(archive);
    const auto lines = read_lines(dir / "rounds.jsonl");
    if (lines.size() < sim->rounds_completed()) throw std::runtime_error("rounds.jsonl is shorter than the checkpoint");
    for (std::size_t i = 0; i < sim->rounds_completed(); ++i) {
      reports.push_back(from_json_line(lines[i]));
      if (reports.back().round != i + 1) throw std::runtime_error("rounds.jsonl is out of order");
      kept.push_back(lines[i]);
    }
  }

  const ReportContext context{hash, cfg.seed, cfg.include_wall_time};
  std::ofstream log_file(dir / "rounds.jsonl", std::ios::binary | std::ios::trunc);
  for (const auto& line : kept) log_file << line << '\n';
  log_file.flush();

  RunOutcome outcome;
  while (sim->rounds_completed() < cfg.rounds) {
    if (options.stop_after && sim->rounds_completed() >= *options.stop_after) {
      save_checkpoint(*sim, hash, dir / "checkpoint.bin");
      outcome.status = RunStatus::kStopped;
      outcome.rounds_completed = sim->rounds_completed();
      return outcome;
    }
    auto report = sim->run_round();
    log_file << to_json_line(report, context) << '\n';
    log_file.flush();
    if (options.log) {
      *options.log << "round " << report.round << " loss " << format_fixed4(report.train_loss);
      if (report.test_metric) *options.log << ' ' << report.metric << ' ' << format_fixed4(*report.test_metric);
      *options.log << '\n';
    }
    reports.push_back(std::move(report));
    if (options.checkpoint_every > 0 && sim->rounds_completed() % options.checkpoint_every == 0) {
      save_checkpoint(*sim, hash, dir / "checkpoint.bin");
    }
  }

  save_checkpoint(*sim, hash, dir / "checkpoint.bin");
  {
    std::ofstream summary(dir / "summary.csv.tmp", std::ios::trunc);
    write_summary_csv(summary, reports, context);
  }
  fs::rename(dir / "summary.csv.tmp", dir / "summary.csv");

  outcome.rounds_completed = sim->rounds_completed();
  for (auto it = reports.rbegin(); it != reports.rend(); ++it) {
    if (it->test_metric) {
      outcome.final_metric = it->test_metric;
      break;
    }
  }
  return outcome;
}

DryRunSummary dry_run(const ExperimentConfig& cfg, std::ostream& out) {
  const auto prepared = prepare_data(cfg);
  const auto& data = prepared.data;
  const auto fed = cfg.federation();

  const ModelShape shape{data.train.num_items(), Architecture{}.encoder_widths, Architecture{}.decoder_widths};
  std::vector<std::size_t> active_counts;
  for (const auto& items : data.partition.item_sets) active_counts.push_back(items.size());
  const auto samples = users_with_ratings(data.train, data.partition);
  const auto schedule = sampling_schedule(fed.num_clients, fed.participation, fed.rounds, fed.seed);

  DryRunSummary s;
  s.clients_per_round = fed.clients_per_round();
  s.comm = comm_cost(cfg.algorithm, shape, active_counts, schedule, cfg.pc_enabled);
  s.fedavg_comm = comm_cost(Algorithm::kFedAvg, shape, active_counts, schedule);
  s.flops = compute_cost(cfg.algorithm, shape, samples, active_counts, schedule, fed.local_epochs, cfg.pc_enabled);
  s.fedavg_flops = compute_cost(Algorithm::kFedAvg, shape, samples, active_counts, schedule, fed.local_epochs);

  auto ratio = [](double a, double b) { return b > 0 ? format_fixed4(a / b) : std::string("n/a"); };
  out << config_echo(cfg);
  out << "users = " << data.train.num_users() << "\n";
  out << "items = " << data.train.num_items() << "\n";
  out << "train_entries = " << data.train.num_entries() << "\n";
  out << "test_entries = " << data.test.num_entries() << "\n";
  out << "clients_per_round = " << s.clients_per_round << "\n";
  out << "predicted_params_down = " << s.comm.params_down << "\n";
  out << "predicted_params_up = " << s.comm.params_up << "\n";
  out << "predicted_indices_up = " << s.comm.indices_up << "\n";
  out << "predicted_total_bytes = " << s.comm.total_bytes() << "\n";
  out << "fedavg_total_bytes = " << s.fedavg_comm.total_bytes() << "\n";
  out << "comm_ratio_vs_fedavg = "
      << ratio(static_cast<double>(s.fedavg_comm.total_bytes()), static_cast<double>(s.comm.total_bytes())) << "\n";
  out << "predicted_client_flops = " << s.flops << "\n";
  out << "fedavg_client_flops = " << s.fedavg_flops << "\n";
  out << "compute_ratio_vs_fedavg = " << ratio(static_cast<double>(s.fedavg_flops), static_cast<double>(s.flops))
      << "\n";
  return s;
}

std::string RunRecord::value(const std::string& key) const {
  for (const auto& [k, v] : config) {
    if (k == key) return v;
  }
  throw std::out_of_range("run " + dir.string() + " has no config key " + key);
}

RunRecord load_run(const fs::path& dir) {
  if (!fs::exists(dir / "summary.csv")) throw std::runtime_error("run " + dir.string() + " is not complete");
  RunRecord record;
  record.dir = dir;
  std::ifstream in(dir / "config.txt");
  if (!in) throw std::runtime_error("run " + dir.string() + " has no config.txt");
  record.config = parse_key_values(in);
  for (const auto& line : read_lines(dir / "rounds.jsonl")) record.rounds.push_back(from_json_line(line));
  return record;
}

std::string format_fixed4(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", value);
  return buf;
}

namespace {

std::vector<std::string> differing_keys(const RunRecord& a, const RunRecord& b, bool data_only) {
  std::map<std::string, std::string> ma(a.config.begin(), a.config.end()), mb(b.config.begin(), b.config.end());
  std::set<std::string> keys;
  for (const auto& [k, v] : ma) keys.insert(k);
  for (const auto& [k, v] : mb) keys.insert(k);
  std::vector<std::string> out;
  for (const auto& k : keys) {
    if (kRunOnlyKeys.count(k) || (data_only && !is_data_key(k))) continue;
    const auto ia = ma.find(k), ib = mb.find(k);
    if (ia == ma.end() || ib == mb.end() || ia->second != ib->second) out.push_back(k);
  }
  return out;
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

int algorithm_rank(const std::string& name) {
  return static_cast<int>(parse_algorithm(name));
}

}  // namespace

std::vector<ReportRow> emit_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw std::invalid_argument("report needs at least one run directory");
  std::vector<RunRecord> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d));

  for (std::size_t i = 1; i < runs.size(); ++i) {
    const auto diff = differing_keys(runs[0], runs[i], true);
    if (!diff.empty()) {
      throw ConfigError("runs " + runs[0].dir.string() + " and " + runs[i].dir.string() + " differ in: " + join(diff, ", "));
    }
  }

  using GroupKey = std::tuple<int, std::size_t, bool>;
  std::map<GroupKey, std::vector<const RunRecord*>> groups;
  for (const auto& r : runs) {
    const GroupKey key{algorithm_rank(r.value("algorithm")), std::stoull(r.value("M")), r.value("pc") != "true"};
    groups[key].push_back(&r);
  }

  std::vector<ReportRow> rows;
  std::ostringstream curves;
  curves << "algorithm,M,pc,config_hash,seed,round,train_loss,test_metric,cum_bytes_down,cum_bytes_up,cum_flops_client\n";
  std::map<std::size_t, std::map<std::string, std::pair<double, double>>> totals;  // M -> algorithm -> (bytes, flops)

  for (auto& [key, members] : groups) {
    std::sort(members.begin(), members.end(), [](auto* a, auto* b) {
      return std::stoull(a->value("seed")) < std::stoull(b->value("seed"));
    });
    for (std::size_t i = 1; i < members.size(); ++i) {
      const auto diff = differing_keys(*members[0], *members[i], false);
      if (!diff.empty()) {
        throw ConfigError("runs " + members[0]->dir.string() + " and " + members[i]->dir.string() + " differ in: " +
                          join(diff, ", "));
      }
      if (members[i]->value("seed") == members[i - 1]->value("seed")) {
        throw ConfigError("runs " + members[i - 1]->dir.string() + " and " + members[i]->dir.string() +
                          " share seed " + members[i]->value("seed"));
      }
    }

    ReportRow row;
    row.algorithm = members[0]->value("algorithm");
    row.num_clients = std::get<1>(key);
    row.pc_enabled = !std::get<2>(key);
    row.config_hash = members[0]->value("config_hash");
    double bytes = 0.0, flops = 0.0;
    for (const auto* r : members) {
      const auto seed = std::stoull(r->value("seed"));
      row.seeds.push_back(seed);
      std::optional<double> final_metric;
      for (const auto& rep : r->rounds) {
        row.metric = rep.metric;
        if (rep.test_metric) final_metric = rep.test_metric;
        curves << row.algorithm << ',' << row.num_clients << ',' << (row.pc_enabled ? "true" : "false") << ','
               << row.config_hash << ',' << seed << ',' << rep.round << ',' << format_double(rep.train_loss) << ','
               << (rep.test_metric ? format_double(*rep.test_metric) : "") << ',' << rep.cumulative_comm.bytes_down()
               << ',' << rep.cumulative_comm.bytes_up() << ',' << rep.cumulative_flops << '\n';
      }
      if (!final_metric) throw std::runtime_error("run " + r->dir.string() + " has no evaluated round");
      row.finals.push_back(*final_metric);
      if (!r->rounds.empty()) {
        bytes += static_cast<double>(r->rounds.back().cumulative_comm.total_bytes());
        flops += static_cast<double>(r->rounds.back().cumulative_flops);
      }
    }
    const double n = static_cast<double>(row.finals.size());
    row.mean = std::accumulate(row.finals.begin(), row.finals.end(), 0.0) / n;
    if (row.finals.size() > 1) {
      double ss = 0.0;
      for (double v : row.finals) ss += (v - row.mean) * (v - row.mean);
      row.std_dev = std::sqrt(ss / (n - 1.0));
    }
    if (row.pc_enabled) totals[row.num_clients][row.algorithm] = {bytes / n, flops / n};
    rows.push_back(std::move(row));
  }

  fs::create_directories(out_dir);
  std::ostringstream table, md, compression;
  table << "algorithm,M,pc,metric,runs,mean,std,config_hash,seeds\n";
  md << "| algorithm | M | PC | metric | result | runs |\n|---|---|---|---|---|---|\n";
  for (const auto& row : rows) {
    std::vector<std::string> seeds;
    for (auto s : row.seeds) seeds.push_back(std::to_string(s));
    const auto std_text = row.std_dev ? format_fixed4(*row.std_dev) : std::string();
    table << row.algorithm << ',' << row.num_clients << ',' << (row.pc_enabled ? "true" : "false") << ',' << row.metric
          << ',' << row.finals.size() << ',' << format_fixed4(row.mean) << ',' << std_text << ',' << row.config_hash
          << ',' << join(seeds, ";") << '\n';
    md << "| " << row.algorithm << " | " << row.num_clients << " | " << (row.pc_enabled ? "on" : "off") << " | "
       << row.metric << " | " << format_fixed4(row.mean) << (row.std_dev ? " (" + std_text + ")" : "") << " | "
       << row.finals.size() << " |\n";
  }
  compression << "M,fedavg_bytes,personalfr_bytes,comm_ratio,fedavg_flops,personalfr_flops,compute_ratio\n";
  for (const auto& [m, by_alg] : totals) {
    const auto fa = by_alg.find("fedavg"), pf = by_alg.find("personalfr");
    if (fa == by_alg.end() || pf == by_alg.end()) continue;
    compression << m << ',' << format_double(fa->second.first) << ',' << format_double(pf->second.first) << ','
                << format_fixed4(fa->second.first / pf->second.first) << ',' << format_double(fa->second.second) << ','
                << format_double(pf->second.second) << ',' << format_fixed4(fa->second.second / pf->second.second)
                << '\n';
  }
  write_text(out_dir / "table.csv", table.str());
  write_text(out_dir / "table.md", md.str());
  write_text(out_dir / "curves.csv", curves.str());
  write_text(out_dir / "compression.csv", compression.str());
  return rows;
}

}  // namespace pfr
