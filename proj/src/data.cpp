#include "pfr/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <string_view>
#include <unordered_map>

#include "pfr/random.hpp"

namespace pfr {

namespace {

std::vector<std::int64_t> identity_ids(std::size_t n) {
  std::vector<std::int64_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::int64_t{0});
  return ids;
}

bool in_scale(double value, Feedback feedback, RatingScale scale) {
  if (feedback == Feedback::kImplicit) return value == 0.0 || value == 1.0;
  return value >= scale.min && value <= scale.max;
}

std::string_view trim_cr(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view field, T& out) {
  while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
  while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
  if (field.empty()) return false;
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

std::vector<std::string_view> split_fields(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

struct RawRating {
  std::int64_t user;
  std::int64_t item;
  double value;
  std::size_t line;
};

// Contiguous indices in ascending raw-id order; rejects duplicate pairs.
RatingMatrix remap(const std::vector<RawRating>& raw, Feedback feedback, RatingScale scale) {
  std::vector<std::int64_t> users, items;
  users.reserve(raw.size());
  items.reserve(raw.size());
  for (const auto& r : raw) {
    users.push_back(r.user);
    items.push_back(r.item);
  }
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());

  auto index_of = [](const std::vector<std::int64_t>& ids, std::int64_t id) {
    return static_cast<std::uint32_t>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
  };

  std::vector<Rating> entries;
  entries.reserve(raw.size());
  for (const auto& r : raw) entries.push_back({index_of(users, r.user), index_of(items, r.item), r.value});

  // Duplicate check with line numbers before handing off to from_entries.
  std::vector<std::size_t> order(raw.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (entries[a].user != entries[b].user) return entries[a].user < entries[b].user;
    if (entries[a].item != entries[b].item) return entries[a].item < entries[b].item;
    return raw[a].line < raw[b].line;
  });
  for (std::size_t i = 1; i < order.size(); ++i) {
    const auto& a = entries[order[i - 1]];
    const auto& b = entries[order[i]];
    if (a.user == b.user && a.item == b.item) {
      throw ParseError(raw[order[i]].line,
                       "duplicate rating for user " + std::to_string(raw[order[i]].user) +
                           " item " + std::to_string(raw[order[i]].item));
    }
  }

  const auto num_users = users.size();
  const auto num_items = items.size();
  return RatingMatrix::from_entries(num_users, num_items, std::move(entries), feedback, scale,
                                    std::move(users), std::move(items));
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

}  // namespace

RatingMatrix RatingMatrix::from_entries(std::size_t num_users, std::size_t num_items,
                                        std::vector<Rating> entries, Feedback feedback,
                                        RatingScale scale, std::vector<std::int64_t> user_ids,
                                        std::vector<std::int64_t> item_ids) {
  if (user_ids.empty()) user_ids = identity_ids(num_users);
  if (item_ids.empty()) item_ids = identity_ids(num_items);
  if (user_ids.size() != num_users || item_ids.size() != num_items) {
    throw DataError("raw id table size does not match matrix dimensions");
  }

  std::sort(entries.begin(), entries.end(), [](const Rating& a, const Rating& b) {
    return a.user != b.user ? a.user < b.user : a.item < b.item;
  });

  RatingMatrix m;
  m.num_users_ = num_users;
  m.num_items_ = num_items;
  m.feedback_ = feedback;
  m.scale_ = feedback == Feedback::kImplicit ? kBinaryScale : scale;
  m.offsets_.assign(num_users + 1, 0);
  m.items_.reserve(entries.size());
  m.values_.reserve(entries.size());

  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.user >= num_users || e.item >= num_items) {
      throw DataError("rating index (" + std::to_string(e.user) + ", " + std::to_string(e.item) +
                      ") out of range");
    }
    if (i > 0 && entries[i - 1].user == e.user && entries[i - 1].item == e.item) {
      throw DataError("duplicate rating for user index " + std::to_string(e.user) +
                      " item index " + std::to_string(e.item));
    }
    if (!in_scale(e.value, feedback, scale)) {
      throw DataError("rating " + std::to_string(e.value) + " outside the declared scale");
    }
    ++m.offsets_[e.user + 1];
    m.items_.push_back(e.item);
    m.values_.push_back(e.value);
  }
  std::partial_sum(m.offsets_.begin(), m.offsets_.end(), m.offsets_.begin());
  m.entries_ = std::move(entries);
  m.user_ids_ = std::move(user_ids);
  m.item_ids_ = std::move(item_ids);
  return m;
}

std::span<const std::uint32_t> RatingMatrix::rated_items(std::size_t user) const {
  return std::span<const std::uint32_t>(items_).subspan(offsets_[user],
                                                        offsets_[user + 1] - offsets_[user]);
}

std::span<const double> RatingMatrix::rated_values(std::size_t user) const {
  return std::span<const double>(values_).subspan(offsets_[user], offsets_[user + 1] - offsets_[user]);
}

double RatingMatrix::sparsity() const {
  const double cells = static_cast<double>(num_users_) * static_cast<double>(num_items_);
  if (cells == 0.0) return 1.0;
  return 1.0 - static_cast<double>(entries_.size()) / cells;
}

double RatingMatrix::mean_value() const {
  if (entries_.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& e : entries_) sum += e.value;
  return sum / static_cast<double>(entries_.size());
}

RatingMatrix parse_movielens(std::istream& in) {
  std::vector<RawRating> raw;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto text = trim_cr(line);
    if (text.empty()) continue;
    const auto fields = split_fields(text, "::");
    if (fields.size() != 4) throw ParseError(line_no, "expected UserID::MovieID::Rating::Timestamp");
    RawRating r{0, 0, 0.0, line_no};
    std::int64_t rating = 0, timestamp = 0;
    if (!parse_number(fields[0], r.user) || !parse_number(fields[1], r.item) ||
        !parse_number(fields[2], rating) || !parse_number(fields[3], timestamp)) {
      throw ParseError(line_no, "non-integer field");
    }
    if (rating < 1 || rating > 5) throw ParseError(line_no, "rating outside 1-5");
    r.value = static_cast<double>(rating);
    raw.push_back(r);
  }
  return remap(raw, Feedback::kExplicit, kMovieLensScale);
}

RatingMatrix load_movielens(const std::filesystem::path& path) {
  auto in = open_or_throw(path);
  return parse_movielens(in);
}

RatingMatrix parse_anime(std::istream& in, const AnimeFilter& filter, FilterStats* stats) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) return RatingMatrix::from_entries(0, 0, {}, Feedback::kExplicit, kAnimeScale);
  ++line_no;
  if (trim_cr(line) != "user_id,anime_id,rating") {
    throw ParseError(line_no, "expected header user_id,anime_id,rating");
  }

  FilterStats local;
  std::vector<RawRating> rated;
  while (std::getline(in, line)) {
    ++line_no;
    const auto text = trim_cr(line);
    if (text.empty()) continue;
    const auto fields = split_fields(text, ",");
    if (fields.size() != 3) throw ParseError(line_no, "expected user_id,anime_id,rating");
    RawRating r{0, 0, 0.0, line_no};
    std::int64_t rating = 0;
    if (!parse_number(fields[0], r.user) || !parse_number(fields[1], r.item) ||
        !parse_number(fields[2], rating)) {
      throw ParseError(line_no, "non-integer field");
    }
    ++local.raw_rows;
    if (rating == -1) continue;
    if (rating < 1 || rating > 10) throw ParseError(line_no, "rating outside 1-10");
    r.value = static_cast<double>(rating);
    rated.push_back(r);
  }

  // Single joint threshold pass over the sentinel-free rows.
  std::unordered_map<std::int64_t, std::size_t> user_count, item_count;
  for (const auto& r : rated) {
    ++user_count[r.user];
    ++item_count[r.item];
  }
  local.rated_users = user_count.size();
  local.rated_items = item_count.size();
  local.rated_entries = rated.size();

  std::vector<RawRating> survivors;
  for (const auto& r : rated) {
    if (user_count[r.user] >= filter.min_ratings && item_count[r.item] >= filter.min_ratings) {
      survivors.push_back(r);
    }
  }

  std::vector<std::int64_t> users;
  for (const auto& r : survivors) users.push_back(r.user);
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  if (users.size() > filter.max_users) users.resize(filter.max_users);

  std::vector<RawRating> kept;
  for (const auto& r : survivors) {
    if (std::binary_search(users.begin(), users.end(), r.user)) kept.push_back(r);
  }

  auto matrix = remap(kept, Feedback::kExplicit, kAnimeScale);
  local.kept_users = matrix.num_users();
  local.kept_items = matrix.num_items();
  local.kept_entries = matrix.num_entries();
  if (stats) *stats = local;
  return matrix;
}

RatingMatrix load_anime(const std::filesystem::path& path, const AnimeFilter& filter,
                        FilterStats* stats) {
  auto in = open_or_throw(path);
  return parse_anime(in, filter, stats);
}

RatingMatrix binarize(const RatingMatrix& matrix, double threshold) {
  std::vector<Rating> entries(matrix.entries().begin(), matrix.entries().end());
  for (auto& e : entries) e.value = e.value > threshold ? 1.0 : 0.0;
  return RatingMatrix::from_entries(matrix.num_users(), matrix.num_items(), std::move(entries),
                                    Feedback::kImplicit, kBinaryScale, matrix.user_ids(),
                                    matrix.item_ids());
}

RatingMatrix subsample_users(const RatingMatrix& matrix, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw DataError("user fraction must lie in (0, 1]");
  const auto k = matrix.num_users();
  if (k == 0) throw DataError("cannot subsample an empty rating matrix");
  const auto keep = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(k))), 1, k);
  Rng rng(seed);
  const auto chosen = rng.sample_without_replacement(k, keep);

  std::vector<Rating> entries;
  std::vector<std::int64_t> user_ids;
  for (std::size_t r = 0; r < chosen.size(); ++r) {
    const auto u = static_cast<std::uint32_t>(chosen[r]);
    user_ids.push_back(matrix.user_ids().at(u));
    const auto items = matrix.rated_items(u);
    const auto values = matrix.rated_values(u);
    for (std::size_t i = 0; i < items.size(); ++i) {
      entries.push_back({static_cast<std::uint32_t>(r), items[i], values[i]});
    }
  }
  return RatingMatrix::from_entries(keep, matrix.num_items(), std::move(entries), matrix.feedback(),
                                    matrix.scale(), std::move(user_ids), matrix.item_ids());
}

TrainTestSplit split(const RatingMatrix& matrix, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw DataError("train_fraction must lie in (0, 1)");
  }
  if (matrix.num_entries() == 0) throw DataError("cannot split an empty rating matrix");

  std::vector<Rating> shuffled(matrix.entries().begin(), matrix.entries().end());
  Rng rng(spec.seed);
  rng.shuffle(shuffled);
  const auto n_train = static_cast<std::size_t>(
      std::llround(spec.train_fraction * static_cast<double>(shuffled.size())));

  std::vector<Rating> train(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<Rating> test(shuffled.begin() + static_cast<std::ptrdiff_t>(n_train), shuffled.end());
  auto make = [&](std::vector<Rating> part) {
    return RatingMatrix::from_entries(matrix.num_users(), matrix.num_items(), std::move(part),
                                      matrix.feedback(), matrix.scale(), matrix.user_ids(),
                                      matrix.item_ids());
  };
  return {make(std::move(train)), make(std::move(test))};
}

std::size_t ClientPartition::client_entry_count(const RatingMatrix& matrix, std::size_t client) const {
  std::size_t count = 0;
  for (auto u : users.at(client)) count += matrix.rated_items(u).size();
  return count;
}

ClientPartition partition_from_assignment(const RatingMatrix& train, std::size_t num_clients,
                                          std::vector<std::uint32_t> assignment) {
  if (num_clients < 1) throw DataError("number of clients must be at least 1");
  if (assignment.size() != train.num_users()) {
    throw DataError("assignment must cover every user");
  }
  ClientPartition p;
  p.num_clients = num_clients;
  p.users.resize(num_clients);
  p.item_sets.resize(num_clients);
  for (std::uint32_t u = 0; u < assignment.size(); ++u) {
    if (assignment[u] >= num_clients) throw DataError("assignment names an unknown client");
    p.users[assignment[u]].push_back(u);
  }
  for (std::size_t c = 0; c < num_clients; ++c) {
    auto& items = p.item_sets[c];
    for (auto u : p.users[c]) {
      const auto rated = train.rated_items(u);
      items.insert(items.end(), rated.begin(), rated.end());
    }
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
  }
  p.assignment = std::move(assignment);
  return p;
}

ClientPartition partition(const RatingMatrix& train, std::size_t num_clients, std::uint64_t seed) {
  if (num_clients < 1) throw DataError("number of clients must be at least 1");
  if (num_clients > train.num_users()) {
    throw DataError("cannot partition " + std::to_string(train.num_users()) + " users into " +
                    std::to_string(num_clients) + " clients");
  }
  std::vector<std::uint32_t> order(train.num_users());
  std::iota(order.begin(), order.end(), std::uint32_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::uint32_t> assignment(train.num_users());
  for (std::size_t i = 0; i < order.size(); ++i) {
    assignment[order[i]] = static_cast<std::uint32_t>(i % num_clients);
  }
  return partition_from_assignment(train, num_clients, std::move(assignment));
}

void write_partition_manifest(std::ostream& out, const ClientPartition& partition,
                              const RatingMatrix& matrix) {
  for (std::size_t c = 0; c < partition.num_clients; ++c) {
    for (auto u : partition.users[c]) out << c << '\t' << matrix.user_ids().at(u) << '\n';
  }
}

RatingMatrix generate_synthetic(const SyntheticSpec& spec) {
  if (spec.users == 0 || spec.items == 0) throw DataError("synthetic dataset needs users and items");
  if (!(spec.density > 0.0 && spec.density <= 1.0)) throw DataError("density must lie in (0, 1]");
  if (spec.rank == 0) throw DataError("latent rank must be positive");

  Rng rng(spec.seed);
  const auto rank = spec.rank;
  std::vector<double> user_factors(spec.users * rank), item_factors(spec.items * rank);
  std::vector<double> user_bias(spec.users), item_bias(spec.items), popularity(spec.items);
  for (auto& x : user_factors) x = rng.normal();
  for (auto& x : item_factors) x = rng.normal();
  for (auto& x : user_bias) x = spec.bias_spread * rng.normal();
  for (auto& x : item_bias) x = spec.bias_spread * rng.normal();
  for (auto& w : popularity) w = std::exp(spec.item_popularity_sigma * rng.normal());

  const double target = spec.density * static_cast<double>(spec.items);
  const double extra = std::max(target - static_cast<double>(spec.min_per_user), 1e-9);
  const double sigma = spec.user_activity_sigma;
  const double mu = std::log(extra) - 0.5 * sigma * sigma;
  const double center = 0.5 * (spec.scale.min + spec.scale.max) + 0.5;
  const double inv_sqrt_rank = 1.0 / std::sqrt(static_cast<double>(rank));

  std::vector<Rating> entries;
  std::vector<std::pair<double, std::uint32_t>> keys(spec.items);
  for (std::uint32_t u = 0; u < spec.users; ++u) {
    const double draw = std::exp(mu + sigma * rng.normal());
    const auto count = std::min<std::size_t>(
        spec.items, spec.min_per_user + static_cast<std::size_t>(std::llround(draw)));
    // Weighted sampling without replacement (exponential-clock keys).
    for (std::uint32_t j = 0; j < spec.items; ++j) {
      double uniform = rng.uniform();
      while (uniform <= 0.0) uniform = rng.uniform();
      keys[j] = {std::log(uniform) / popularity[j], j};
    }
    if (count == 0) continue;
    std::nth_element(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(count) - 1, keys.end(),
                     [](const auto& a, const auto& b) {
                       return a.first > b.first || (a.first == b.first && a.second < b.second);
                     });
    std::sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(count),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    for (std::size_t c = 0; c < count; ++c) {
      const auto j = keys[c].second;
      double dot = 0.0;
      for (std::size_t r = 0; r < rank; ++r) dot += user_factors[u * rank + r] * item_factors[j * rank + r];
      const double value = center + user_bias[u] + item_bias[j] + spec.signal * dot * inv_sqrt_rank +
                           spec.noise * rng.normal();
      const double rounded = std::clamp(std::round(value), spec.scale.min, spec.scale.max);
      entries.push_back({u, j, rounded});
    }
  }
  return RatingMatrix::from_entries(spec.users, spec.items, std::move(entries), Feedback::kExplicit,
                                    spec.scale);
}

void write_movielens(std::ostream& out, const RatingMatrix& matrix) {
  for (const auto& e : matrix.entries()) {
    out << matrix.user_ids()[e.user] << "::" << matrix.item_ids()[e.item]
        << "::" << static_cast<long long>(std::llround(e.value)) << "::0\n";
  }
}

}  // namespace pfr
