#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "protoprobe/heads.hpp"
#include "protoprobe/rng.hpp"
#include "protoprobe/sobol.hpp"
#include "protoprobe/trainer.hpp"

namespace protoprobe {

struct LogRange {
  double low = 0.0;
  double high = 0.0;
  void validate() const;
};

/// exp(log(low) + u * (log(high) - log(low))), u in [0, 1).
double to_loguniform(double u, const LogRange& range);

/// Learning rate and weight decay, both log-uniform.
struct SearchSpace {
  LogRange lr{1e-4, 7e-3};
  LogRange wd{1e-5, 5e-4};

  /// Prototype heads search lr over [2e-3, 8e-2]; wd is shared.
  static SearchSpace for_head(HeadKind kind);
};

struct TrialRecord {
  int id = 0;
  std::string source;  // "sobol" or "tpe"
  double u_lr = 0.0;   // unit-cube coordinates of the configuration
  double u_wd = 0.0;
  double lr = 0.0;
  double wd = 0.0;
  std::vector<double> rung_metrics;  // one entry per completed rung
  bool pruned = false;

  int rungs_completed() const { return static_cast<int>(rung_metrics.size()); }
  /// Metric at the highest completed rung.
  double latest_metric() const;
};

struct Suggestion {
  std::string source;
  double u_lr = 0.0;
  double u_wd = 0.0;
};

/// Simplified TPE: per-dimension Parzen estimators in log space.
struct TpeConfig {
  double gamma = 0.25;            // good-set quantile
  int candidates = 24;
  std::size_t min_history = 10;
  double min_bandwidth = 0.02;    // in unit-cube coordinates
};

/// Splits `history` at the top-gamma quantile of latest_metric(), fits reflected gaussian
/// KDEs (bandwidth 1.06 sigma n^-1/5) per dimension to the good and bad sets, draws
/// candidates from the good density and returns the one maximising good/bad. Trials tied
/// with the split value are placed in both sets. Falls back to `fallback` when fewer than
/// min_history trials have completed a rung.
Suggestion tpe_suggest(std::span<const TrialRecord> history, RngStream& rng, SobolSequence& fallback,
                       const TpeConfig& cfg = {});

/// Drives trials for the halving search. Calls for distinct trial ids may run concurrently.
class TrialRunner {
 public:
  virtual ~TrialRunner() = default;
  virtual void start(const TrialRecord& trial) = 0;
  /// Trains `trial_id` until `epochs` epochs are complete and returns its validation metric.
  virtual double advance(int trial_id, int epochs) = 0;
  virtual void stop(int /*trial_id*/) {}
};

struct HalvingConfig {
  int trials = 50;
  int startup_trials = 25;  // Sobol; the rest come from TPE
  std::vector<int> rungs{3, 10, 30};
  int reduction = 3;        // keep ceil(alive / reduction) after each non-final rung
  unsigned threads = 1;
  TpeConfig tpe;

  void validate() const;
};

/// Synchronous successive halving. Rung 1 is run trial by trial so TPE sees every
/// finished rung-1 result; later rungs advance all survivors together.
std::vector<TrialRecord> successive_halving(TrialRunner& runner, const SearchSpace& space, const HalvingConfig& cfg,
                                            std::uint64_t master_seed);

/// Indices kept after a rung: the top ceil(n / reduction) by metric, ties to the lower id.
std::vector<std::size_t> survivors(std::span<const double> metrics, std::span<const int> ids, int reduction);

class FinalizeRunner {
 public:
  virtual ~FinalizeRunner() = default;
  /// Validation metric of `trial`'s configuration for each seed.
  virtual std::vector<double> reevaluate(const TrialRecord& trial, std::span<const std::uint64_t> seeds) = 0;
  /// Test metric of the chosen configuration for each seed. Called exactly once.
  virtual std::vector<double> test(const TrialRecord& trial, std::span<const std::uint64_t> seeds) = 0;
};

struct CandidateScore {
  int trial_id = 0;
  double mean = 0.0;
  double sd = 0.0;
  std::vector<double> per_seed;
};

struct FinalResult {
  TrialRecord winner;
  std::vector<CandidateScore> candidates;
  double val_mean = 0.0;
  double val_sd = 0.0;
  double test_mean = 0.0;
  double test_sd = 0.0;
  std::vector<double> test_per_seed;
  std::vector<std::uint64_t> seeds;
};

/// Takes the top-k trials that completed every rung, re-evaluates each over `seeds`,
/// picks the highest mean and runs the single test evaluation for it.
FinalResult select_and_finalize(std::span<const TrialRecord> records, int k, std::span<const std::uint64_t> seeds,
                                FinalizeRunner& runner);

/// Seeds used for the re-evaluation stage: master_seed + 1, ..., master_seed + count.
std::vector<std::uint64_t> reevaluation_seeds(std::uint64_t master_seed, int count);

// Trainer-backed search.

struct HpoConfig {
  TrainConfig base;  // head, hyper, epochs, batch size, loss; lr/wd/seed are set per trial
  HalvingConfig halving;
  int top_k = 3;
  int seeds = 5;
  std::uint64_t master_seed = 0;
};

struct HpoOutcome {
  std::vector<TrialRecord> trials;
  FinalResult final;
  std::unique_ptr<Head<float>> winner_head;  // the winner's first-seed model
  std::size_t test_evaluations = 0;
  std::uint64_t epochs_trained = 0;          // search phase only
  std::string journal;
};

/// Full two-stage protocol. The test set is touched once, after selection.
/// If `resume_trials` is non-empty the search phase is skipped and those records are used.
HpoOutcome run_hpo(const Dataset& train, const Dataset& val, const Dataset& test, const HpoConfig& cfg,
                   std::vector<TrialRecord> resume_trials = {});

// Journal: one line per event, comma separated.
//   config,<key=value>...
//   trial,<id>,<source>,<u_lr>,<u_wd>,<lr>,<wd>,<rungs completed>,<pruned 0|1>,<metric rung 1>,...
//   reeval,<id>,<mean>,<sd>,<metric seed 1>,...
//   final,<id>,<lr>,<wd>,<val mean>,<val sd>,<test mean>,<test sd>,<test seed 1>,...
std::string format_journal(const HpoConfig& cfg, std::span<const TrialRecord> trials, const FinalResult& final);
std::vector<TrialRecord> parse_journal_trials(const std::string& text);

}  // namespace protoprobe
