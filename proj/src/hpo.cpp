#include "protoprobe/hpo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include "protoprobe/errors.hpp"

namespace protoprobe {

void LogRange::validate() const {
  if (!(low > 0.0 && low < high && std::isfinite(high))) {
    throw ConfigError("search range needs 0 < low < high");
  }
}

double to_loguniform(double u, const LogRange& range) {
  range.validate();
  if (!(u >= 0.0 && u <= 1.0)) throw RangeError("to_loguniform: u must lie in [0, 1)");
  const double lo = std::log(range.low);
  const double hi = std::log(range.high);
  return std::clamp(std::exp(lo + u * (hi - lo)), range.low, range.high);
}

SearchSpace SearchSpace::for_head(HeadKind kind) {
  SearchSpace s;
  if (is_prototype_head(kind)) s.lr = LogRange{2e-3, 8e-2};
  return s;
}

double TrialRecord::latest_metric() const {
  if (rung_metrics.empty()) throw StateError("trial " + std::to_string(id) + " has no completed rung");
  return rung_metrics.back();
}

// ---------------------------------------------------------------------------
// TPE-lite

namespace {

constexpr double kUnitMax = 0x1.fffffffffffffp-1;  // largest double below 1

double reflect_unit(double x) {
  // Fold onto [0, 1]; a couple of folds is enough for bandwidths far below 1.
  for (int i = 0; i < 8 && (x < 0.0 || x > 1.0); ++i) x = x < 0.0 ? -x : 2.0 - x;
  return std::clamp(x, 0.0, kUnitMax);
}

struct Kde {
  std::vector<double> centers;
  double bandwidth = 1.0;

  Kde(std::vector<double> pts, double min_bw) : centers(std::move(pts)) {
    const auto n = static_cast<double>(centers.size());
    double sigma = 0.0;
    if (centers.size() > 1) {
      double mean = 0.0;
      for (double c : centers) mean += c;
      mean /= n;
      double ss = 0.0;
      for (double c : centers) ss += (c - mean) * (c - mean);
      sigma = std::sqrt(ss / (n - 1.0));
    }
    bandwidth = std::max(1.06 * sigma * std::pow(n, -0.2), min_bw);
  }

  double sample(RngStream& rng) const {
    const double c = centers[static_cast<std::size_t>(rng.below(centers.size()))];
    return reflect_unit(c + bandwidth * rng.gaussian());
  }

  // Density on [0, 1] with mirror images at both walls.
  double log_density(double x) const {
    const double inv_h = 1.0 / bandwidth;
    double sum = 0.0;
    for (double c : centers) {
      for (double image : {c, -c, 2.0 - c}) {
        const double z = (x - image) * inv_h;
        sum += std::exp(-0.5 * z * z);
      }
    }
    const double norm = std::sqrt(2.0 * std::numbers::pi) * bandwidth * static_cast<double>(centers.size());
    return std::log(std::max(sum / norm, 1e-300));
  }
};

}  // namespace

Suggestion tpe_suggest(std::span<const TrialRecord> history, RngStream& rng, SobolSequence& fallback,
                       const TpeConfig& cfg) {
  std::vector<const TrialRecord*> done;
  for (const auto& t : history) {
    if (t.rungs_completed() > 0) done.push_back(&t);
  }
  if (done.size() < cfg.min_history || done.size() < 2) {
    const auto p = fallback.next();
    return {"sobol", p[0], p[1]};
  }
  std::vector<double> sorted;
  for (const auto* t : done) sorted.push_back(t->latest_metric());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const auto n = sorted.size();
  auto n_good = static_cast<std::size_t>(std::ceil(cfg.gamma * static_cast<double>(n)));
  n_good = std::clamp<std::size_t>(n_good, 1, n - 1);
  const double good_cut = sorted[n_good - 1];
  const double bad_cut = sorted[n_good];

  std::array<std::vector<double>, 2> good_pts, bad_pts;
  for (const auto* t : done) {
    const double m = t->latest_metric();
    if (m >= good_cut) {
      good_pts[0].push_back(t->u_lr);
      good_pts[1].push_back(t->u_wd);
    }
    if (m <= bad_cut) {
      bad_pts[0].push_back(t->u_lr);
      bad_pts[1].push_back(t->u_wd);
    }
  }
  const std::array<Kde, 2> good{Kde(good_pts[0], cfg.min_bandwidth), Kde(good_pts[1], cfg.min_bandwidth)};
  const std::array<Kde, 2> bad{Kde(bad_pts[0], cfg.min_bandwidth), Kde(bad_pts[1], cfg.min_bandwidth)};

  Suggestion best{"tpe", 0.0, 0.0};
  double best_score = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < cfg.candidates; ++i) {
    const double x0 = good[0].sample(rng);
    const double x1 = good[1].sample(rng);
    const double score =
        good[0].log_density(x0) - bad[0].log_density(x0) + good[1].log_density(x1) - bad[1].log_density(x1);
    if (score > best_score) {
      best_score = score;
      best.u_lr = x0;
      best.u_wd = x1;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Successive halving

void HalvingConfig::validate() const {
  if (trials < 1) throw ConfigError("hpo: need at least one trial");
  if (startup_trials < 0 || startup_trials > trials) throw ConfigError("hpo: startup trials must lie in [0, trials]");
  if (rungs.empty()) throw ConfigError("hpo: need at least one rung");
  for (std::size_t i = 0; i < rungs.size(); ++i) {
    if (rungs[i] < 1 || (i > 0 && rungs[i] <= rungs[i - 1])) {
      throw ConfigError("hpo: rungs must be positive and strictly increasing");
    }
  }
  if (reduction < 1) throw ConfigError("hpo: reduction factor must be >= 1");
  if (threads < 1) throw ConfigError("hpo: need at least one thread");
}

std::vector<std::size_t> survivors(std::span<const double> metrics, std::span<const int> ids, int reduction) {
  if (metrics.size() != ids.size()) throw DimensionError("survivors: metric and id counts differ");
  if (reduction < 1) throw ConfigError("survivors: reduction must be >= 1");
  std::vector<std::size_t> order(metrics.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (metrics[a] != metrics[b]) return metrics[a] > metrics[b];
    return ids[a] < ids[b];
  });
  const std::size_t keep = (metrics.size() + static_cast<std::size_t>(reduction) - 1) / static_cast<std::size_t>(reduction);
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

namespace {

// Runs fn(0..count-1) on up to `threads` workers; rethrows the first failure.
template <class Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

std::vector<TrialRecord> successive_halving(TrialRunner& runner, const SearchSpace& space, const HalvingConfig& cfg,
                                            std::uint64_t master_seed) {
  cfg.validate();
  space.lr.validate();
  space.wd.validate();
  SobolSequence sobol(2);
  RngStream tpe_rng(master_seed, 3);
  std::vector<TrialRecord> trials;
  trials.reserve(static_cast<std::size_t>(cfg.trials));

  auto make_trial = [&](int id, const Suggestion& s) {
    TrialRecord t;
    t.id = id;
    t.source = s.source;
    t.u_lr = s.u_lr;
    t.u_wd = s.u_wd;
    t.lr = to_loguniform(s.u_lr, space.lr);
    t.wd = to_loguniform(s.u_wd, space.wd);
    return t;
  };

  // Rung 1, exploration block: configurations are fixed up front, so these may run together.
  for (int i = 0; i < cfg.startup_trials; ++i) {
    const auto p = sobol.next();
    trials.push_back(make_trial(i, Suggestion{"sobol", p[0], p[1]}));
  }
  for (auto& t : trials) runner.start(t);
  parallel_for(trials.size(), cfg.threads, [&](std::size_t i) {
    trials[i].rung_metrics.push_back(runner.advance(trials[i].id, cfg.rungs[0]));
  });

  // Rung 1, exploitation block: each suggestion sees every finished rung-1 result.
  for (int i = cfg.startup_trials; i < cfg.trials; ++i) {
    const Suggestion s = tpe_suggest(trials, tpe_rng, sobol, cfg.tpe);
    trials.push_back(make_trial(i, s));
    runner.start(trials.back());
    trials.back().rung_metrics.push_back(runner.advance(i, cfg.rungs[0]));
  }

  std::vector<std::size_t> alive(trials.size());
  for (std::size_t i = 0; i < alive.size(); ++i) alive[i] = i;
  for (std::size_t r = 0; r < cfg.rungs.size(); ++r) {
    if (r > 0) {
      parallel_for(alive.size(), cfg.threads, [&](std::size_t i) {
        auto& t = trials[alive[i]];
        t.rung_metrics.push_back(runner.advance(t.id, cfg.rungs[r]));
      });
    }
    if (r + 1 == cfg.rungs.size()) break;
    std::vector<double> metrics;
    std::vector<int> ids;
    for (std::size_t i : alive) {
      metrics.push_back(trials[i].rung_metrics[r]);
      ids.push_back(trials[i].id);
    }
    const auto keep = survivors(metrics, ids, cfg.reduction);
    std::vector<std::size_t> next_alive;
    std::size_t k = 0;
    for (std::size_t pos = 0; pos < alive.size(); ++pos) {
      if (k < keep.size() && keep[k] == pos) {
        next_alive.push_back(alive[pos]);
        ++k;
      } else {
        trials[alive[pos]].pruned = true;
        runner.stop(trials[alive[pos]].id);
      }
    }
    alive = std::move(next_alive);
  }
  for (std::size_t i : alive) runner.stop(trials[i].id);
  return trials;
}

// ---------------------------------------------------------------------------
// Selection

std::vector<std::uint64_t> reevaluation_seeds(std::uint64_t master_seed, int count) {
  if (count < 1) throw ConfigError("need at least one re-evaluation seed");
  std::vector<std::uint64_t> seeds;
  for (int i = 1; i <= count; ++i) seeds.push_back(master_seed + static_cast<std::uint64_t>(i));
  return seeds;
}

FinalResult select_and_finalize(std::span<const TrialRecord> records, int k, std::span<const std::uint64_t> seeds,
                                FinalizeRunner& runner) {
  if (k < 1) throw ConfigError("select: k must be >= 1");
  if (seeds.empty()) throw ConfigError("select: no seeds");
  std::size_t full_rungs = 0;
  for (const auto& t : records) full_rungs = std::max(full_rungs, t.rung_metrics.size());
  std::vector<const TrialRecord*> finished;
  for (const auto& t : records) {
    if (!t.pruned && t.rung_metrics.size() == full_rungs && full_rungs > 0) finished.push_back(&t);
  }
  if (finished.empty()) throw DegenerateError("select: no trial completed every rung");
  std::sort(finished.begin(), finished.end(), [](const TrialRecord* a, const TrialRecord* b) {
    if (a->latest_metric() != b->latest_metric()) return a->latest_metric() > b->latest_metric();
    return a->id < b->id;
  });
  if (finished.size() > static_cast<std::size_t>(k)) finished.resize(static_cast<std::size_t>(k));

  FinalResult out;
  out.seeds.assign(seeds.begin(), seeds.end());
  std::size_t best = 0;
  for (std::size_t i = 0; i < finished.size(); ++i) {
    CandidateScore c;
    c.trial_id = finished[i]->id;
    c.per_seed = runner.reevaluate(*finished[i], seeds);
    if (c.per_seed.size() != seeds.size()) throw StateError("select: runner returned the wrong number of metrics");
    std::tie(c.mean, c.sd) = mean_sd(c.per_seed);
    out.candidates.push_back(std::move(c));
    if (out.candidates[i].mean > out.candidates[best].mean) best = i;
  }
  out.winner = *finished[best];
  out.val_mean = out.candidates[best].mean;
  out.val_sd = out.candidates[best].sd;
  out.test_per_seed = runner.test(out.winner, seeds);
  if (out.test_per_seed.size() != seeds.size()) throw StateError("select: runner returned the wrong number of metrics");
  std::tie(out.test_mean, out.test_sd) = mean_sd(out.test_per_seed);
  return out;
}

// ---------------------------------------------------------------------------
// Trainer-backed runners

namespace {

TrainConfig trial_config(const HpoConfig& cfg, const TrialRecord& t, std::uint64_t seed) {
  TrainConfig c = cfg.base;
  c.epochs = cfg.halving.rungs.back();
  c.lr = t.lr;
  c.weight_decay = t.wd;
  c.seed = seed;
  return c;
}

class SessionRunner final : public TrialRunner {
 public:
  SessionRunner(const Dataset& train, const Dataset& val, const HpoConfig& cfg) : train_(train), val_(val), cfg_(cfg) {}

  void start(const TrialRecord& trial) override {
    auto session = std::make_unique<TrainingSession>(train_, val_, trial_config(cfg_, trial, cfg_.master_seed));
    std::lock_guard lock(mutex_);
    sessions_[trial.id] = std::move(session);
  }

  double advance(int trial_id, int epochs) override {
    TrainingSession* s = nullptr;
    {
      std::lock_guard lock(mutex_);
      auto it = sessions_.find(trial_id);
      if (it == sessions_.end()) throw StateError("hpo: trial " + std::to_string(trial_id) + " is not running");
      s = it->second.get();
    }
    const int before = s->epochs_done();
    const double metric = s->advance_to(epochs);
    epochs_ += static_cast<std::uint64_t>(s->epochs_done() - before);
    return metric;
  }

  void stop(int trial_id) override {
    std::lock_guard lock(mutex_);
    sessions_.erase(trial_id);
  }

  std::uint64_t epochs_trained() const { return epochs_; }

 private:
  const Dataset& train_;
  const Dataset& val_;
  const HpoConfig& cfg_;
  std::mutex mutex_;
  std::map<int, std::unique_ptr<TrainingSession>> sessions_;
  std::atomic<std::uint64_t> epochs_{0};
};

// Trains each candidate once per seed; the test stage reuses those same models.
class SeedRunner final : public FinalizeRunner {
 public:
  SeedRunner(const Dataset& train, const Dataset& val, const Dataset& test, const HpoConfig& cfg)
      : train_(train), val_(val), test_(test), cfg_(cfg) {}

  std::vector<double> reevaluate(const TrialRecord& trial, std::span<const std::uint64_t> seeds) override {
    std::vector<std::unique_ptr<Head<float>>> heads(seeds.size());
    std::vector<double> metrics(seeds.size());
    parallel_for(seeds.size(), cfg_.halving.threads, [&](std::size_t i) {
      auto [head, result] = train(train_, val_, trial_config(cfg_, trial, seeds[i]));
      metrics[i] = result.per_epoch_val.back();
      heads[i] = std::move(head);
    });
    models_[trial.id] = std::move(heads);
    return metrics;
  }

  std::vector<double> test(const TrialRecord& trial, std::span<const std::uint64_t> seeds) override {
    auto it = models_.find(trial.id);
    if (it == models_.end() || it->second.size() != seeds.size()) {
      throw StateError("hpo: test requested for a configuration that was not re-evaluated");
    }
    ++test_calls_;
    std::vector<double> metrics;
    for (const auto& head : it->second) metrics.push_back(evaluate(test_, *head).map);
    return metrics;
  }

  std::unique_ptr<Head<float>> take_first_model(int trial_id) { return std::move(models_.at(trial_id).front()); }
  std::size_t test_calls() const { return test_calls_; }

 private:
  const Dataset& train_;
  const Dataset& val_;
  const Dataset& test_;
  const HpoConfig& cfg_;
  std::map<int, std::vector<std::unique_ptr<Head<float>>>> models_;
  std::size_t test_calls_ = 0;
};

}  // namespace

HpoOutcome run_hpo(const Dataset& train, const Dataset& val, const Dataset& test, const HpoConfig& cfg,
                   std::vector<TrialRecord> resume_trials) {
  cfg.halving.validate();
  TrainConfig probe = cfg.base;
  probe.epochs = cfg.halving.rungs.back();
  probe.validate();
  if (test.empty()) throw DegenerateError("hpo: empty test store");
  if (!(test.dims() == train.dims()) || !(val.dims() == train.dims())) {
    throw DimensionError("hpo: train, validation and test stores have different dims");
  }

  HpoOutcome out;
  if (resume_trials.empty()) {
    SessionRunner runner(train, val, cfg);
    out.trials = successive_halving(runner, SearchSpace::for_head(cfg.base.head), cfg.halving, cfg.master_seed);
    out.epochs_trained = runner.epochs_trained();
  } else {
    out.trials = std::move(resume_trials);
  }
  SeedRunner finalizer(train, val, test, cfg);
  const auto seeds = reevaluation_seeds(cfg.master_seed, cfg.seeds);
  out.final = select_and_finalize(out.trials, cfg.top_k, seeds, finalizer);
  out.test_evaluations = finalizer.test_calls();
  out.winner_head = finalizer.take_first_model(out.final.winner.id);
  out.journal = format_journal(cfg, out.trials, out.final);
  return out;
}

// ---------------------------------------------------------------------------
// Journal

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double parse_double(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("journal line " + std::to_string(line_no) + ": bad number '" + s + "'");
  }
}

int parse_int(const std::string& s, std::size_t line_no) {
  const double v = parse_double(s, line_no);
  if (v != std::floor(v)) throw FormatError("journal line " + std::to_string(line_no) + ": expected an integer");
  return static_cast<int>(v);
}

}  // namespace

std::string format_journal(const HpoConfig& cfg, std::span<const TrialRecord> trials, const FinalResult& final) {
  std::string out = "# protoprobe hpo journal v1\n";
  out += "config,head=" + std::string(head_name(cfg.base.head)) + ",master_seed=" + std::to_string(cfg.master_seed) +
         ",trials=" + std::to_string(cfg.halving.trials) + ",startup=" + std::to_string(cfg.halving.startup_trials) +
         ",rungs=";
  for (std::size_t i = 0; i < cfg.halving.rungs.size(); ++i) {
    out += (i ? "/" : "") + std::to_string(cfg.halving.rungs[i]);
  }
  out += ",reduction=" + std::to_string(cfg.halving.reduction) + ",top_k=" + std::to_string(cfg.top_k) +
         ",seeds=" + std::to_string(cfg.seeds) + ",batch=" + std::to_string(cfg.base.batch_size) + "\n";
  for (const auto& t : trials) {
    out += "trial," + std::to_string(t.id) + "," + t.source + "," + num(t.u_lr) + "," + num(t.u_wd) + "," + num(t.lr) +
           "," + num(t.wd) + "," + std::to_string(t.rungs_completed()) + "," + (t.pruned ? "1" : "0");
    for (double m : t.rung_metrics) out += "," + num(m);
    out += "\n";
  }
  for (const auto& c : final.candidates) {
    out += "reeval," + std::to_string(c.trial_id) + "," + num(c.mean) + "," + num(c.sd);
    for (double m : c.per_seed) out += "," + num(m);
    out += "\n";
  }
  if (!final.candidates.empty()) {
    out += "final," + std::to_string(final.winner.id) + "," + num(final.winner.lr) + "," + num(final.winner.wd) + "," +
           num(final.val_mean) + "," + num(final.val_sd) + "," + num(final.test_mean) + "," + num(final.test_sd);
    for (double m : final.test_per_seed) out += "," + num(m);
    out += "\n";
  }
  return out;
}

std::vector<TrialRecord> parse_journal_trials(const std::string& text) {
  std::vector<TrialRecord> trials;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.rfind("trial,", 0) != 0) continue;
    const auto f = split_csv(line);
    if (f.size() < 9) throw FormatError("journal line " + std::to_string(line_no) + ": truncated trial record");
    TrialRecord t;
    t.id = parse_int(f[1], line_no);
    t.source = f[2];
    t.u_lr = parse_double(f[3], line_no);
    t.u_wd = parse_double(f[4], line_no);
    t.lr = parse_double(f[5], line_no);
    t.wd = parse_double(f[6], line_no);
    const int rungs = parse_int(f[7], line_no);
    if (f[8] != "0" && f[8] != "1") throw FormatError("journal line " + std::to_string(line_no) + ": bad pruned flag");
    t.pruned = f[8] == "1";
    if (rungs < 0 || f.size() != 9 + static_cast<std::size_t>(rungs)) {
      throw FormatError("journal line " + std::to_string(line_no) + ": rung count does not match metrics");
    }
    for (int r = 0; r < rungs; ++r) t.rung_metrics.push_back(parse_double(f[9 + static_cast<std::size_t>(r)], line_no));
    trials.push_back(std::move(t));
  }
  return trials;
}

}  // namespace protoprobe
