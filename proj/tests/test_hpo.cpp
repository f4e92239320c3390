#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <set>

#include "protoprobe/hpo.hpp"
#include "support.hpp"

using namespace protoprobe;

namespace {

// Published Joe-Kuo reference values, first two dimensions, zero point skipped.
constexpr double kSobolDim1[8] = {0.5, 0.75, 0.25, 0.375, 0.875, 0.625, 0.125, 0.1875};
constexpr double kSobolDim2[8] = {0.5, 0.25, 0.75, 0.375, 0.875, 0.125, 0.625, 0.3125};

// Largest gap between the empirical CDF of `xs` and the uniform CDF on [0, 1].
double ks_uniform(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    d = std::max(d, std::abs(static_cast<double>(i + 1) / n - xs[i]));
    d = std::max(d, std::abs(xs[i] - static_cast<double>(i) / n));
  }
  return d;
}

TrialRecord completed(int id, double u_lr, double u_wd, double metric) {
  TrialRecord t;
  t.id = id;
  t.source = "sobol";
  t.u_lr = u_lr;
  t.u_wd = u_wd;
  t.rung_metrics = {metric};
  return t;
}

// Smooth synthetic objective peaked near (0.7, 0.3), improving with budget.
double toy_metric(double lr, double wd, int epochs) {
  const SearchSpace space;
  const double a = std::log(lr / space.lr.low) / std::log(space.lr.high / space.lr.low);
  const double b = std::log(wd / space.wd.low) / std::log(space.wd.high / space.wd.low);
  return std::exp(-((a - 0.7) * (a - 0.7) + (b - 0.3) * (b - 0.3)) * 4.0) * (1.0 - 1.0 / (1.0 + epochs));
}

class MockRunner final : public TrialRunner {
 public:
  void start(const TrialRecord& t) override {
    std::lock_guard lock(mutex_);
    configs_[t.id] = {t.lr, t.wd};
    done_[t.id] = 0;
    ++starts;
  }
  double advance(int id, int epochs) override {
    std::lock_guard lock(mutex_);
    REQUIRE(!stopped_.count(id));
    REQUIRE(epochs > done_[id]);
    epochs_trained += static_cast<std::uint64_t>(epochs - done_[id]);
    done_[id] = epochs;
    reached[id] = epochs;
    return toy_metric(configs_[id].first, configs_[id].second, epochs);
  }
  void stop(int id) override {
    std::lock_guard lock(mutex_);
    stopped_.insert(id);
  }

  std::uint64_t epochs_trained = 0;
  int starts = 0;
  std::map<int, int> reached;

 private:
  std::mutex mutex_;
  std::map<int, std::pair<double, double>> configs_;
  std::map<int, int> done_;
  std::set<int> stopped_;
};

class TableRunner final : public FinalizeRunner {
 public:
  std::map<int, std::vector<double>> val, tst;
  int test_calls = 0;
  std::vector<int> reevaluated;

  std::vector<double> reevaluate(const TrialRecord& t, std::span<const std::uint64_t> seeds) override {
    reevaluated.push_back(t.id);
    auto v = val.at(t.id);
    v.resize(seeds.size(), v.back());
    return v;
  }
  std::vector<double> test(const TrialRecord& t, std::span<const std::uint64_t> seeds) override {
    ++test_calls;
    auto v = tst.count(t.id) ? tst.at(t.id) : std::vector<double>(seeds.size(), 0.5);
    v.resize(seeds.size(), v.back());
    return v;
  }
};

}  // namespace

TEST_CASE("sobol matches the reference sequence") {
  SobolSequence s(2);
  for (int i = 0; i < 8; ++i) {
    const auto p = s.next();
    CHECK(p[0] == kSobolDim1[i]);
    CHECK(p[1] == kSobolDim2[i]);
  }
  CHECK(s.index() == 8);
}

namespace {

// True when `pts` (2^k of them) put one point in every elementary box of area 2^-k.
bool is_net(const std::vector<std::vector<double>>& pts, int k) {
  const std::size_t n = std::size_t{1} << k;
  for (int a = 0; a <= k; ++a) {
    std::set<std::pair<std::size_t, std::size_t>> boxes;
    for (const auto& p : pts) {
      boxes.insert({static_cast<std::size_t>(std::floor(p[0] * std::ldexp(1.0, a))),
                    static_cast<std::size_t>(std::floor(p[1] * std::ldexp(1.0, k - a)))});
    }
    if (boxes.size() != n) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("sobol blocks stratify every dyadic partition") {
  // Points 2^k .. 2^(k+1) - 1 form a net, and so does the skipped origin plus the first 2^k - 1 points.
  SobolSequence s(2);
  std::vector<std::vector<double>> all{{0.0, 0.0}};
  for (int i = 1; i < (1 << 11); ++i) all.push_back(s.next());
  for (int k = 0; k <= 10; ++k) {
    const std::size_t n = std::size_t{1} << k;
    const std::vector<std::vector<double>> block(all.begin() + static_cast<std::ptrdiff_t>(n),
                                                 all.begin() + static_cast<std::ptrdiff_t>(2 * n));
    const std::vector<std::vector<double>> prefix(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
    CAPTURE(k);
    CHECK(is_net(block, k));
    CHECK(is_net(prefix, k));
  }
}

TEST_CASE("sobol contracts") {
  CHECK_THROWS_AS(SobolSequence(0), ConfigError);
  CHECK_THROWS_AS(SobolSequence(SobolSequence::kMaxDims + 1), ConfigError);
  SobolSequence s(3);
  for (int i = 0; i < 1000; ++i) {
    for (double v : s.next()) REQUIRE((v >= 0.0 && v < 1.0));
  }
}

TEST_CASE("log-uniform mapping") {
  const LogRange r{1e-4, 7e-3};
  CHECK(to_loguniform(0.0, r) == doctest::Approx(1e-4).epsilon(1e-14));
  CHECK(to_loguniform(std::nextafter(1.0, 0.0), r) <= 7e-3);
  CHECK(to_loguniform(std::nextafter(1.0, 0.0), r) == doctest::Approx(7e-3).epsilon(1e-12));
  CHECK(to_loguniform(0.5, r) == doctest::Approx(std::sqrt(1e-4 * 7e-3)).epsilon(1e-14));
  CHECK_THROWS_AS(to_loguniform(-0.1, r), RangeError);
  CHECK_THROWS_AS(to_loguniform(0.5, LogRange{1e-3, 1e-4}), ConfigError);
  CHECK_THROWS_AS(to_loguniform(0.5, LogRange{0.0, 1e-4}), ConfigError);

  RngStream rng(61, 0);
  std::vector<double> draws(100000);
  for (auto& d : draws) d = to_loguniform(rng.uniform(), r);
  std::nth_element(draws.begin(), draws.begin() + 50000, draws.end());
  CHECK(std::abs(draws[50000] / std::sqrt(1e-4 * 7e-3) - 1.0) <= 0.02);

  for (HeadKind k : {HeadKind::linear, HeadKind::protobin}) {
    const auto space = SearchSpace::for_head(k);
    SobolSequence s(2);
    for (int i = 0; i < 4096; ++i) {
      const auto p = s.next();
      const double lr = to_loguniform(p[0], space.lr);
      const double wd = to_loguniform(p[1], space.wd);
      REQUIRE((lr >= space.lr.low && lr <= space.lr.high));
      REQUIRE((wd >= space.wd.low && wd <= space.wd.high));
    }
  }
  CHECK(SearchSpace::for_head(HeadKind::proto).lr.low == 2e-3);
  CHECK(SearchSpace::for_head(HeadKind::proto).lr.high == 8e-2);
  CHECK(SearchSpace::for_head(HeadKind::mhca).lr.high == 7e-3);
}

TEST_CASE("tpe with a flat history suggests uniformly") {
  std::vector<TrialRecord> history;
  SobolSequence grid(2);
  for (int i = 0; i < 32; ++i) {
    const auto p = grid.next();
    history.push_back(completed(i, p[0], p[1], 0.5));
  }
  RngStream rng(62, 3);
  SobolSequence fallback(2);
  std::vector<double> xs, ys;
  for (int i = 0; i < 1000; ++i) {
    const auto s = tpe_suggest(history, rng, fallback);
    REQUIRE(s.source == "tpe");
    xs.push_back(s.u_lr);
    ys.push_back(s.u_wd);
  }
  // Kolmogorov critical value at alpha = 0.01 for n = 1000.
  const double critical = 1.628 / std::sqrt(1000.0);
  CHECK(ks_uniform(xs) < critical);
  CHECK(ks_uniform(ys) < critical);
  CHECK(fallback.index() == 0);
}

TEST_CASE("tpe concentrates on a dominant region") {
  RngStream setup(63, 0);
  std::vector<TrialRecord> history;
  double lo0 = 1, hi0 = 0, lo1 = 1, hi1 = 0;
  for (int i = 0; i < 10; ++i) {
    const double a = setup.uniform(0.55, 0.8), b = setup.uniform(0.2, 0.45);
    lo0 = std::min(lo0, a), hi0 = std::max(hi0, a), lo1 = std::min(lo1, b), hi1 = std::max(hi1, b);
    history.push_back(completed(i, a, b, 0.8 + 0.01 * i));
  }
  for (int i = 10; i < 40; ++i) history.push_back(completed(i, setup.uniform(), setup.uniform(), 0.3 * setup.uniform()));

  RngStream rng(64, 3);
  SobolSequence fallback(2);
  int inside = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = tpe_suggest(history, rng, fallback);
    inside += s.u_lr >= lo0 && s.u_lr <= hi0 && s.u_wd >= lo1 && s.u_wd <= hi1;
  }
  CHECK(inside >= 800);
}

TEST_CASE("tpe is deterministic and falls back below ten trials") {
  std::vector<TrialRecord> history;
  RngStream setup(65, 0);
  for (int i = 0; i < 15; ++i) history.push_back(completed(i, setup.uniform(), setup.uniform(), setup.uniform()));
  RngStream r1(9, 3), r2(9, 3);
  SobolSequence f1(2), f2(2);
  for (int i = 0; i < 20; ++i) {
    const auto a = tpe_suggest(history, r1, f1);
    const auto b = tpe_suggest(history, r2, f2);
    CHECK(a.u_lr == b.u_lr);
    CHECK(a.u_wd == b.u_wd);
  }

  history.resize(9);
  history.push_back(completed(9, 0.1, 0.1, 0.0));
  history.back().rung_metrics.clear();  // started, not yet measured
  SobolSequence fallback(2);
  const auto s = tpe_suggest(history, r1, fallback);
  CHECK(s.source == "sobol");
  CHECK(s.u_lr == 0.5);
  CHECK(fallback.index() == 1);
}

TEST_CASE("survivors keep the top third") {
  const std::vector<double> m{1, 2, 3, 4, 5, 6, 7, 8, 9};
  const std::vector<int> ids{1, 2, 3, 4, 5, 6, 7, 8, 9};
  CHECK(survivors(m, ids, 3) == std::vector<std::size_t>{6, 7, 8});

  // Ceiling division and ties to the lower id.
  const std::vector<double> tied{0.5, 0.5, 0.5, 0.5};
  const std::vector<int> tid{13, 11, 12, 10};
  CHECK(survivors(tied, tid, 3) == std::vector<std::size_t>{1, 3});

  // Monotone: nothing pruned beats a survivor.
  RngStream rng(66, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> ms(n);
    std::vector<int> is(n);
    for (std::size_t i = 0; i < n; ++i) {
      ms[i] = static_cast<double>(rng.below(6));
      is[i] = static_cast<int>(i);
    }
    const auto keep = survivors(ms, is, 3);
    REQUIRE(keep.size() == (n + 2) / 3);
    double worst_kept = 1e9;
    for (auto k : keep) worst_kept = std::min(worst_kept, ms[k]);
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::binary_search(keep.begin(), keep.end(), i)) REQUIRE(ms[i] <= worst_kept);
    }
  }
  CHECK_THROWS_AS(survivors(m, std::vector<int>{1}, 3), DimensionError);
}

TEST_CASE("successive halving follows the protocol") {
  for (unsigned threads : {1u, 3u}) {
    MockRunner runner;
    HalvingConfig cfg;
    cfg.threads = threads;
    const auto trials = successive_halving(runner, SearchSpace{}, cfg, 17);
    REQUIRE(trials.size() == 50);
    CHECK(runner.starts == 50);
    int sobol = 0, tpe = 0, full = 0;
    for (std::size_t i = 0; i < trials.size(); ++i) {
      const auto& t = trials[i];
      CHECK(t.id == static_cast<int>(i));
      (i < 25 ? sobol : tpe) += 1;
      CHECK(t.source == (i < 25 ? "sobol" : "tpe"));
      REQUIRE(t.rungs_completed() >= 1);
      CHECK(runner.reached[t.id] == cfg.rungs[static_cast<std::size_t>(t.rungs_completed() - 1)]);
      if (t.rungs_completed() == 3) {
        CHECK_FALSE(t.pruned);
        ++full;
      } else {
        CHECK(t.pruned);
      }
    }
    CHECK(sobol == 25);
    CHECK(tpe == 25);
    CHECK(full == 6);
    CHECK(std::count_if(trials.begin(), trials.end(), [](const auto& t) { return t.rungs_completed() >= 2; }) == 17);
    CHECK(runner.epochs_trained <= 50 * 3 + 17 * 7 + 6 * 20);

    // Same seed, same search, whatever the thread count.
    MockRunner again;
    const auto repeat = successive_halving(again, SearchSpace{}, HalvingConfig{}, 17);
    for (std::size_t i = 0; i < 50; ++i) {
      CHECK(repeat[i].u_lr == trials[i].u_lr);
      CHECK(repeat[i].rung_metrics == trials[i].rung_metrics);
    }
  }
  HalvingConfig bad;
  bad.rungs = {3, 3};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = HalvingConfig{};
  bad.startup_trials = 60;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("tpe trials move toward the optimum of the toy objective") {
  MockRunner runner;
  const auto trials = successive_halving(runner, SearchSpace{}, HalvingConfig{}, 5);
  double sobol = 0, tpe = 0;
  for (const auto& t : trials) (t.source == "sobol" ? sobol : tpe) += t.rung_metrics[0];
  CHECK(tpe > sobol);
}

TEST_CASE("selection uses the mean over seeds") {
  std::vector<TrialRecord> records{completed(0, 0, 0, 0.9), completed(1, 0, 0, 0.8), completed(2, 0, 0, 0.7),
                                   completed(3, 0, 0, 0.95)};
  records[3].pruned = true;
  const auto seeds = reevaluation_seeds(100, 5);
  CHECK(seeds == std::vector<std::uint64_t>{101, 102, 103, 104, 105});

  SUBCASE("k = 1 picks the best finished trial") {
    TableRunner runner;
    runner.val = {{0, {0.1}}, {1, {0.9}}, {2, {0.9}}};
    const auto r = select_and_finalize(records, 1, seeds, runner);
    CHECK(r.winner.id == 0);
    CHECK(runner.reevaluated == std::vector<int>{0});
    CHECK(runner.test_calls == 1);
  }
  SUBCASE("a single lucky seed does not win") {
    TableRunner runner;
    runner.val = {{0, {0.95, 0.1, 0.1, 0.1, 0.1}}, {1, {0.6, 0.6, 0.6, 0.6, 0.6}}, {2, {0.5}}};
    runner.tst = {{1, {0.4, 0.5, 0.6, 0.5, 0.5}}};
    const auto r = select_and_finalize(records, 3, seeds, runner);
    CHECK(r.winner.id == 1);
    CHECK(runner.reevaluated == std::vector<int>{0, 1, 2});
    CHECK(runner.test_calls == 1);
    CHECK(r.val_mean == doctest::Approx(0.6));
    CHECK(r.test_mean == doctest::Approx(0.5));
    CHECK(r.test_sd == doctest::Approx(std::sqrt(0.02 / 4)));
    CHECK(r.candidates.size() == 3);
  }
  SUBCASE("nothing finished") {
    TableRunner runner;
    std::vector<TrialRecord> none{records[3]};
    CHECK_THROWS_AS(select_and_finalize(none, 3, seeds, runner), DegenerateError);
    CHECK(runner.test_calls == 0);
  }
}

TEST_CASE("journal round trip") {
  HpoConfig cfg;
  cfg.master_seed = 3;
  std::vector<TrialRecord> trials{completed(0, 0.5, 0.5, 0.25), completed(1, 0.75, 0.25, 1.0 / 3.0)};
  trials[0].lr = to_loguniform(0.5, SearchSpace{}.lr);
  trials[0].pruned = true;
  trials[1].source = "tpe";
  trials[1].rung_metrics = {0.1, 0.2, 0.30000000000000004};
  FinalResult fin;
  fin.winner = trials[1];
  fin.candidates.push_back({1, 0.5, 0.1, {0.4, 0.6}});
  fin.test_per_seed = {0.45, 0.55};
  const auto text = format_journal(cfg, trials, fin);
  CHECK(text.rfind("# protoprobe hpo journal v1\nconfig,head=linear,master_seed=3,trials=50,startup=25,rungs=3/10/30", 0) ==
        0);
  const auto back = parse_journal_trials(text);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].id == trials[i].id);
    CHECK(back[i].source == trials[i].source);
    CHECK(back[i].u_lr == trials[i].u_lr);
    CHECK(back[i].lr == trials[i].lr);
    CHECK(back[i].rung_metrics == trials[i].rung_metrics);
    CHECK(back[i].pruned == trials[i].pruned);
  }
  CHECK(format_journal(cfg, back, fin) == text);
  CHECK_THROWS_AS(parse_journal_trials("trial,0,sobol,0.5\n"), FormatError);
  CHECK_THROWS_AS(parse_journal_trials("trial,0,sobol,0.5,0.5,1,1,2,0,0.1\n"), FormatError);
  CHECK_THROWS_AS(parse_journal_trials("trial,0,sobol,x,0.5,1,1,1,0,0.1\n"), FormatError);
}

TEST_CASE("trainer-backed search touches the test set once") {
  SynthSpec spec;
  spec.classes = 4;
  spec.dim = 8;
  spec.grid_t = 4;
  spec.grid_f = 2;
  spec.classes_min = 1;
  spec.classes_max = 2;
  spec.record_count = 60;
  spec.split_stream = split_stream_id("train");
  const Store train_store = generate_synthetic_store(spec);
  spec.record_count = 30;
  spec.split_stream = split_stream_id("val");
  const Store val_store = generate_synthetic_store(spec);
  spec.split_stream = split_stream_id("test");
  const Store test_store = generate_synthetic_store(spec);

  HpoConfig cfg;
  cfg.base.head = HeadKind::mlp;
  cfg.base.hyper = support::small_hyper();
  cfg.base.batch_size = 16;
  cfg.halving.trials = 12;
  cfg.halving.startup_trials = 10;
  cfg.halving.rungs = {1, 2, 4};
  cfg.top_k = 2;
  cfg.master_seed = 8;
  const auto out = run_hpo(Dataset::all(train_store), Dataset::all(val_store), Dataset::all(test_store), cfg);
  CHECK(out.test_evaluations == 1);
  CHECK(out.trials.size() == 12);
  CHECK(out.trials[10].source == "tpe");
  CHECK(out.final.seeds == std::vector<std::uint64_t>{9, 10, 11, 12, 13});
  CHECK(out.final.test_per_seed.size() == 5);
  CHECK(out.epochs_trained == 12 * 1 + 4 * 1 + 2 * 2);
  REQUIRE(out.winner_head);
  CHECK(evaluate(Dataset::all(test_store), *out.winner_head).map == out.final.test_per_seed[0]);

  // Resuming from the journal reproduces the outcome without searching again.
  const auto resumed = run_hpo(Dataset::all(train_store), Dataset::all(val_store), Dataset::all(test_store), cfg,
                               parse_journal_trials(out.journal));
  CHECK(resumed.journal == out.journal);
  CHECK(resumed.epochs_trained == 0);

  const Store empty_store = [&] {
    Store s = test_store;
    s.records.clear();
    return s;
  }();
  CHECK_THROWS_AS(
      run_hpo(Dataset::all(train_store), Dataset::all(val_store), Dataset::all(empty_store), cfg),
      DegenerateError);
}
