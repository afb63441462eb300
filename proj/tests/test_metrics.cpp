#include "catch_amalgamated.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "pfr/metrics.hpp"
#include "pfr/nn.hpp"
#include "pfr/protocol.hpp"
#include "pfr/random.hpp"

using namespace pfr;
using Catch::Approx;

namespace {

// DCG of the unique permutation that respects (score desc, item asc), found
// by enumeration; IDCG as the best DCG over every permutation.
std::optional<double> brute_ndcg(const std::vector<RankedItem>& items) {
  std::vector<std::size_t> perm(items.size());
  std::iota(perm.begin(), perm.end(), 0);
  auto dcg_of = [&](const std::vector<std::size_t>& p) {
    double s = 0.0;
    for (std::size_t pos = 0; pos < p.size(); ++pos) s += items[p[pos]].relevance / std::log2(pos + 2.0);
    return s;
  };
  double best = 0.0, chosen = -1.0;
  do {
    best = std::max(best, dcg_of(perm));
    bool ordered = true;
    for (std::size_t i = 0; i + 1 < perm.size(); ++i) {
      const auto& a = items[perm[i]];
      const auto& b = items[perm[i + 1]];
      if (!(a.score > b.score || (a.score == b.score && a.item < b.item))) ordered = false;
    }
    if (ordered) chosen = dcg_of(perm);
  } while (std::next_permutation(perm.begin(), perm.end()));
  if (best == 0.0) return std::nullopt;
  return chosen / best;
}

double brute_rmse(const std::vector<double>& p, const std::vector<double>& t, double lo, double hi) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double c = p[i] < lo ? lo : (p[i] > hi ? hi : p[i]);
    s += (c - t[i]) * (c - t[i]);
  }
  return std::sqrt(s / static_cast<double>(p.size()));
}

// Multiply-add counting over a naive dense layer loop.
std::uint64_t counted_forward_flops(const std::vector<std::size_t>& widths) {
  std::uint64_t ops = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    for (std::size_t o = 0; o < widths[l + 1]; ++o) {
      for (std::size_t i = 0; i < widths[l]; ++i) ops += 2;  // one multiply, one add
    }
  }
  return ops;
}

LayerStack decoder_for(const ModelShape& shape) {
  std::vector<std::size_t> widths{shape.encoder_widths.back()};
  widths.insert(widths.end(), shape.decoder_widths.begin(), shape.decoder_widths.end());
  widths.push_back(shape.num_items);
  return init_layers(widths, 1);
}

std::uint64_t float_count(const LayerStack& layers) {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += static_cast<std::uint64_t>(l.weight.rows() * l.weight.cols() + l.bias.rows());
  return n;
}

}  // namespace

TEST_CASE("rmse examples") {
  const std::vector<double> t{3, 4, 5};
  CHECK(rmse(t, t) == 0.0);
  const std::vector<double> p{1, 2}, q{2, 5};
  CHECK(rmse(p, q) == Approx(std::sqrt(5.0)).epsilon(1e-15));
  CHECK(rmse(std::vector<double>{7.5}, std::vector<double>{5}, kMovieLensScale) == 0.0);
  CHECK_THROWS(rmse(std::vector<double>{}, std::vector<double>{}));
}

TEST_CASE("ndcg examples") {
  std::vector<RankedItem> perfect{{0, 0.9, 1}, {1, 0.5, 1}, {2, 0.1, 0}};
  CHECK(*ndcg(perfect) == 1.0);
  std::vector<RankedItem> split_hits{{0, 0.9, 1}, {1, 0.5, 0}, {2, 0.1, 1}};
  CHECK(*ndcg(split_hits) == Approx((1.0 + 1.0 / 2.0) / (1.0 + 1.0 / std::log2(3.0))).epsilon(1e-15));
  CHECK(*ndcg(split_hits) == Approx(0.9197).margin(5e-5));
  std::vector<RankedItem> none{{0, 0.9, 0}};
  CHECK_FALSE(ndcg(none).has_value());
  // Ties go to the lower item index.
  std::vector<RankedItem> tie{{5, 0.5, 0}, {2, 0.5, 1}};
  CHECK(*ndcg(tie) == 1.0);
  CHECK(*ndcg(split_hits, 1) == 1.0);
}

TEST_CASE("mean ndcg skips users without positives") {
  std::vector<std::vector<RankedItem>> users{{{0, 1.0, 1}}, {{0, 1.0, 0}}, {{0, 0.2, 0}, {1, 0.1, 1}}};
  CHECK(mean_ndcg(users) == Approx((1.0 + 1.0 / std::log2(3.0)) / 2.0));
  CHECK_THROWS(mean_ndcg({{{0, 1.0, 0}}}));
}

TEST_CASE("ndcg and rmse agree with exhaustive oracles") {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(6);
    std::vector<RankedItem> items;
    for (auto id : rng.sample_without_replacement(20, n)) {
      items.push_back({static_cast<std::uint32_t>(id), static_cast<double>(rng.below(3)), static_cast<double>(rng.below(2))});
    }
    rng.shuffle(items);
    const auto expected = brute_ndcg(items);
    const auto got = ndcg(items);
    REQUIRE(expected.has_value() == got.has_value());
    if (got) {
      CHECK(*got == *expected);
      CHECK(*got >= 0.0);
      CHECK(*got <= 1.0);
    }

    std::vector<double> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform(-1.0, 7.0);
      t[i] = 1.0 + static_cast<double>(rng.below(5));
    }
    CHECK(rmse(p, t, kMovieLensScale) == brute_rmse(p, t, 1.0, 5.0));
  }
}

TEST_CASE("ndcg is invariant to user order") {
  std::vector<std::vector<RankedItem>> users{{{0, 0.3, 1}, {1, 0.6, 0}}, {{3, 0.1, 1}}, {{4, 0.2, 0}, {7, 0.1, 1}}};
  const double a = mean_ndcg(users);
  std::reverse(users.begin(), users.end());
  CHECK(mean_ndcg(users) == Approx(a).epsilon(1e-15));
}

TEST_CASE("model shape counts") {
  const ModelShape ml{3706};
  CHECK(ml.model_parameters() == 1'967'354);
  CHECK(ml.decoder_parameters() == 985'466);
  CHECK(ml.inner_decoder_parameters() == 33'024);
  CHECK(ml.last_hidden_width() == 256);
  CHECK(ml.slice_parameters(3706) == ml.decoder_parameters());
  CHECK(ml.forward_flops() == counted_forward_flops({3706, 256, 128, 256, 3706}));
  CHECK(ml.forward_flops(137) == counted_forward_flops({3706, 256, 128, 256, 137}));
  const ModelShape one{7, {3}, {}};
  CHECK(one.forward_flops() == 2 * (7 * 3 + 3 * 7));
}

TEST_CASE("slice ratio at 3.7 percent of ml1m items") {
  const ModelShape ml{3706};
  const auto n_active = static_cast<std::size_t>(std::llround(0.037 * 3706));
  const double ratio = static_cast<double>(ml.slice_parameters(n_active)) / static_cast<double>(ml.decoder_parameters());
  // Counting by hand: 33,024 + 137 * 257 = 68,233 over 985,466.
  CHECK(ml.slice_parameters(n_active) == 68'233);
  CHECK(ratio == Approx(68233.0 / 985466.0));
}

TEST_CASE("hand-counted toy slice") {
  // n = 4, q = 2, inner decoder a single 1 -> 2 layer, n' = 2.
  const ModelShape toy{4, {1}, {2}};
  CHECK(toy.inner_decoder_parameters() == 1 * 2 + 2);
  CHECK(toy.slice_parameters(2) == 4 + 2 * (2 + 1));
  const auto dec = decoder_for(toy);
  CHECK(float_count({extract_active(dec, std::vector<std::uint32_t>{1, 3}).inner_layers}) +
            2 * 3 ==
        10);
}

TEST_CASE("comm and compute meters match brute-force counting") {
  Rng rng(23);
  for (int trial = 0; trial < 40; ++trial) {
    ModelShape shape;
    shape.num_items = 2 + rng.below(30);
    shape.encoder_widths = {1 + rng.below(6), 1 + rng.below(4)};
    shape.decoder_widths = {1 + rng.below(6)};
    const std::size_t M = 1 + rng.below(8);
    const double C = 0.1 + 0.9 * rng.uniform();
    const std::size_t T = 1 + rng.below(5), K = 1 + rng.below(3);
    std::vector<std::vector<std::uint32_t>> sets(M);
    std::vector<std::size_t> counts(M), samples(M);
    for (std::size_t m = 0; m < M; ++m) {
      for (auto i : rng.sample_without_replacement(shape.num_items, 1 + rng.below(shape.num_items))) {
        sets[m].push_back(static_cast<std::uint32_t>(i));
      }
      counts[m] = sets[m].size();
      samples[m] = 1 + rng.below(5);
    }
    const auto schedule = sampling_schedule(M, C, T, trial);
    const auto decoder = decoder_for(shape);
    std::vector<std::size_t> enc_widths{shape.num_items};
    enc_widths.insert(enc_widths.end(), shape.encoder_widths.begin(), shape.encoder_widths.end());
    const auto encoder = init_layers(enc_widths, 2);

    for (bool pc : {true, false}) {
      CommCost brute;
      std::uint64_t brute_flops = 0;
      if (pc) {
        for (std::size_t m = 0; m < M; ++m) brute.indices_up += wire_size(IndexRegistration{ClientId{0}, ItemIndexSet{sets[m]}}).indices;
      }
      for (const auto& round : schedule) {
        for (auto m : round) {
          std::vector<std::uint32_t> all(shape.num_items);
          std::iota(all.begin(), all.end(), 0u);
          const auto slice = extract_active(decoder, pc ? sets[m] : all);
          const auto floats = float_count(slice.inner_layers) +
                              static_cast<std::uint64_t>(slice.w_prime.size() + slice.b_prime.size());
          brute.params_down += floats;
          brute.params_up += floats;
          auto widths = enc_widths;
          widths.insert(widths.end(), shape.decoder_widths.begin(), shape.decoder_widths.end());
          widths.push_back(pc ? sets[m].size() : shape.num_items);
          brute_flops += K * samples[m] * 3 * counted_forward_flops(widths);
        }
      }
      CHECK(comm_cost(Algorithm::kPersonalFR, shape, counts, schedule, pc) == brute);
      CHECK(compute_cost(Algorithm::kPersonalFR, shape, samples, counts, schedule, K, pc) == brute_flops);
    }

    CommCost fedavg;
    std::uint64_t fedavg_flops = 0;
    for (const auto& round : schedule) {
      for (auto m : round) {
        fedavg.params_down += float_count(encoder) + float_count(decoder);
        fedavg.params_up += float_count(encoder) + float_count(decoder);
        auto widths = enc_widths;
        widths.insert(widths.end(), shape.decoder_widths.begin(), shape.decoder_widths.end());
        widths.push_back(shape.num_items);
        fedavg_flops += K * samples[m] * 3 * counted_forward_flops(widths);
      }
    }
    CHECK(comm_cost(Algorithm::kFedAvg, shape, counts, schedule) == fedavg);
    CHECK(compute_cost(Algorithm::kFedAvg, shape, samples, counts, schedule, K) == fedavg_flops);
    CHECK(comm_cost(Algorithm::kPersonalFR, shape, counts, schedule).total_bytes() <= fedavg.total_bytes() +
                                                                                         4 * std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}));
  }
}

TEST_CASE("full slices only save the encoder") {
  const ModelShape shape{20, {6, 3}, {5}};
  const std::vector<std::size_t> counts(3, 20);
  const auto schedule = sampling_schedule(3, 1.0, 2, 0);
  const auto pfr = comm_cost(Algorithm::kPersonalFR, shape, counts, schedule, false);
  const auto fa = comm_cost(Algorithm::kFedAvg, shape, counts, schedule);
  CHECK(static_cast<double>(fa.params_down) / static_cast<double>(pfr.params_down) ==
        Approx(static_cast<double>(shape.model_parameters()) / static_cast<double>(shape.decoder_parameters())));
  const std::vector<std::size_t> samples(3, 4);
  CHECK(compute_cost(Algorithm::kPersonalFR, shape, samples, counts, schedule, 5) ==
        compute_cost(Algorithm::kFedAvg, shape, samples, counts, schedule, 5));
}

TEST_CASE("selection schedule") {
  CHECK(clients_per_round(100, 0.1) == 10);
  CHECK(clients_per_round(6040, 0.1) == 604);
  CHECK(clients_per_round(5, 0.01) == 1);
  CHECK(clients_per_round(3, 1.0) == 3);
  const auto a = sampling_schedule(50, 0.2, 10, 3);
  CHECK(a == sampling_schedule(50, 0.2, 10, 3));
  for (const auto& round : a) {
    CHECK(round.size() == 10);
    CHECK(std::is_sorted(round.begin(), round.end()));
    CHECK(std::adjacent_find(round.begin(), round.end()) == round.end());
  }
  CHECK(a != sampling_schedule(50, 0.2, 10, 4));
}

TEST_CASE("round report serialization") {
  RoundReport r;
  r.round = 3;
  r.train_loss = 0.123456789;
  r.metric = "rmse";
  r.test_metric = 0.95;
  r.clients = 10;
  r.comm = {100, 100, 7};
  r.flops_client = 5000;
  RoundReport prev;
  prev.cumulative_comm = {50, 50, 0};
  prev.cumulative_flops = 1000;
  accumulate(r, &prev);
  CHECK(r.cumulative_comm == CommCost{150, 150, 7});
  CHECK(r.cumulative_flops == 6000);
  CHECK(r.comm.bytes_up() == 8 * 100 + 4 * 7);

  const ReportContext ctx{"abc", 9, false};
  const auto line = to_json_line(r, ctx);
  CHECK(line.find("wall_seconds") == std::string::npos);
  CHECK(line.find("\"config_hash\":\"abc\"") != std::string::npos);
  const auto back = from_json_line(line);
  CHECK(back.round == 3);
  CHECK(back.train_loss == r.train_loss);
  CHECK(*back.test_metric == 0.95);
  CHECK(back.cumulative_comm == r.cumulative_comm);
  CHECK(to_json_line(back, ctx) == line);

  r.test_metric.reset();
  CHECK(!from_json_line(to_json_line(r, ctx)).test_metric.has_value());
  CHECK(to_json_line(r, {"abc", 9, true}).find("wall_seconds") != std::string::npos);

  std::ostringstream csv;
  const std::vector<RoundReport> rows{back};
  write_summary_csv(csv, rows, ctx);
  CHECK(csv.str().rfind("round,train_loss,", 0) == 0);
  CHECK(csv.str().find(",abc,9\n") != std::string::npos);
}
