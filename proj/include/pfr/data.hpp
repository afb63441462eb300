#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfr {

enum class Feedback { kExplicit, kImplicit };

struct RatingScale {
  double min = 1.0;
  double max = 5.0;
};

inline constexpr RatingScale kMovieLensScale{1.0, 5.0};
inline constexpr RatingScale kAnimeScale{1.0, 10.0};
inline constexpr RatingScale kBinaryScale{0.0, 1.0};

struct Rating {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  double value = 0.0;

  friend bool operator==(const Rating&, const Rating&) = default;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Sparse user x item rating matrix. Entries are kept sorted by (user, item);
// per-user rated item lists are views into that order.
class RatingMatrix {
 public:
  RatingMatrix() = default;

  // Validates range, uniqueness and scale. Raw id tables default to identity.
  static RatingMatrix from_entries(std::size_t num_users, std::size_t num_items,
                                   std::vector<Rating> entries, Feedback feedback,
                                   RatingScale scale, std::vector<std::int64_t> user_ids = {},
                                   std::vector<std::int64_t> item_ids = {});

  std::size_t num_users() const { return num_users_; }
  std::size_t num_items() const { return num_items_; }
  std::size_t num_entries() const { return entries_.size(); }

  std::span<const Rating> entries() const { return entries_; }
  std::span<const std::uint32_t> rated_items(std::size_t user) const;
  std::span<const double> rated_values(std::size_t user) const;

  Feedback feedback() const { return feedback_; }
  RatingScale scale() const { return scale_; }

  // Raw dataset ids, indexed by contiguous user/item index.
  const std::vector<std::int64_t>& user_ids() const { return user_ids_; }
  const std::vector<std::int64_t>& item_ids() const { return item_ids_; }

  // Fraction of unrated user-item pairs.
  double sparsity() const;

  double mean_value() const;

 private:
  std::size_t num_users_ = 0;
  std::size_t num_items_ = 0;
  std::vector<Rating> entries_;
  std::vector<std::size_t> offsets_{0};
  std::vector<std::uint32_t> items_;
  std::vector<double> values_;
  Feedback feedback_ = Feedback::kExplicit;
  RatingScale scale_ = kMovieLensScale;
  std::vector<std::int64_t> user_ids_;
  std::vector<std::int64_t> item_ids_;
};

// `UserID::MovieID::Rating::Timestamp` per line; ids are remapped to
// contiguous indices in ascending raw-id order.
RatingMatrix load_movielens(const std::filesystem::path& path);
RatingMatrix parse_movielens(std::istream& in);

struct AnimeFilter {
  std::size_t min_ratings = 20;
  std::size_t max_users = 6000;
};

// Counts before and after filtering; the first three are taken after the
// -1 sentinel rows are dropped.
struct FilterStats {
  std::size_t raw_rows = 0;
  std::size_t rated_users = 0;
  std::size_t rated_items = 0;
  std::size_t rated_entries = 0;
  std::size_t kept_users = 0;
  std::size_t kept_items = 0;
  std::size_t kept_entries = 0;
};

RatingMatrix load_anime(const std::filesystem::path& path, const AnimeFilter& filter = {},
                        FilterStats* stats = nullptr);
RatingMatrix parse_anime(std::istream& in, const AnimeFilter& filter = {},
                         FilterStats* stats = nullptr);

// rating > threshold -> 1, else 0. Rated sets are unchanged.
RatingMatrix binarize(const RatingMatrix& matrix, double threshold);

// Keeps llround(fraction * k) users drawn without replacement (at least
// one), renumbered in ascending original order. Items are kept as they are.
RatingMatrix subsample_users(const RatingMatrix& matrix, double fraction, std::uint64_t seed);

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

struct TrainTestSplit {
  RatingMatrix train;
  RatingMatrix test;
};

TrainTestSplit split(const RatingMatrix& matrix, const SplitSpec& spec);

struct ClientPartition {
  std::size_t num_clients = 0;
  std::vector<std::uint32_t> assignment;               // user -> client
  std::vector<std::vector<std::uint32_t>> users;       // client -> sorted users
  std::vector<std::vector<std::uint32_t>> item_sets;   // client -> sorted rated items (I_m)

  std::size_t client_entry_count(const RatingMatrix& matrix, std::size_t client) const;
};

// Users shuffled by `seed` and dealt round-robin into `num_clients` clients.
ClientPartition partition(const RatingMatrix& train, std::size_t num_clients, std::uint64_t seed);
ClientPartition partition_from_assignment(const RatingMatrix& train, std::size_t num_clients,
                                          std::vector<std::uint32_t> assignment);

// `client_id<TAB>user_raw_id` lines, clients ascending then users ascending.
void write_partition_manifest(std::ostream& out, const ClientPartition& partition,
                              const RatingMatrix& matrix);

// Low-rank synthetic ratings with log-normal user activity and item
// popularity. Ratings are round(center + user bias + item bias +
// signal * <u, v> / sqrt(rank) + noise * N(0,1)), clamped to the scale.
struct SyntheticSpec {
  std::size_t users = 600;
  std::size_t items = 1000;
  double density = 0.04;
  std::size_t rank = 8;
  double noise = 0.3;
  double signal = 1.0;
  double bias_spread = 0.4;
  double user_activity_sigma = 1.0;
  double item_popularity_sigma = 1.0;
  std::size_t min_per_user = 5;
  RatingScale scale = kMovieLensScale;
  std::uint64_t seed = 0;
};

RatingMatrix generate_synthetic(const SyntheticSpec& spec);

// Writes the matrix back out in MovieLens `::` format (timestamp 0).
void write_movielens(std::ostream& out, const RatingMatrix& matrix);

}  // namespace pfr
