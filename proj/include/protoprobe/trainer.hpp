#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "protoprobe/embedstore.hpp"
#include "protoprobe/heads.hpp"
#include "protoprobe/objective.hpp"
#include "protoprobe/optim.hpp"

namespace protoprobe {

/// Fixed training protocol: AdamW, per-step cosine annealing, asymmetric loss.
/// Prototype parameters share the global learning rate.
struct TrainConfig {
  int epochs = 30;
  int batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  HeadKind head = HeadKind::linear;
  HeadHyper hyper;
  AslConfig asl;
  AdamHyper adam;
  double lr_min = 0.0;

  void validate() const;
};

/// An ordered subset of a loaded store.
struct Dataset {
  const Store* store = nullptr;
  std::vector<std::size_t> indices;

  static Dataset all(const Store& store);

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  const EmbeddingRecord& record(std::size_t i) const { return store->records[indices[i]]; }
  HeadDims dims() const;
};

/// Seeded split: `val_fraction` of the records (rounded) go to the second set.
std::pair<Dataset, Dataset> split_train_val(const Store& store, double val_fraction, std::uint64_t seed);

Clip<float> clip_of(const Store& store, const EmbeddingRecord& rec);

struct MetricReport {
  double map = 0.0;
  std::optional<double> accuracy;  // set when every example carries exactly one label
  std::size_t examples = 0;
};

/// Throws DegenerateError on an empty dataset and DimensionError when head and store disagree.
MetricReport evaluate(const Dataset& data, const Head<float>& head);

struct EpochLog {
  int epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double val_metric = 0.0;
};

struct RunResult {
  double final_test_metric = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> per_epoch_val;
  std::uint64_t seed = 0;
  double wallclock_seconds = 0.0;
  std::vector<EpochLog> log;
};

/// A resumable training run. advance_to() may be called repeatedly with increasing epoch
/// counts; the learning-rate schedule always spans cfg.epochs.
class TrainingSession {
 public:
  TrainingSession(Dataset train, Dataset val, TrainConfig cfg);

  /// Trains until `epoch` epochs are complete and returns the latest validation mAP.
  double advance_to(int epoch);

  int epochs_done() const { return epochs_done_; }
  std::uint64_t steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  const Head<float>& head() const { return *head_; }
  Head<float>& head() { return *head_; }
  std::unique_ptr<Head<float>> take_head() { return std::move(head_); }
  const RunResult& result() const { return result_; }

  /// Mean loss over a batch of training positions without touching parameters or grads.
  double batch_loss(std::span<const std::size_t> positions) const;

 private:
  void run_epoch();

  Dataset train_;
  Dataset val_;
  TrainConfig cfg_;
  std::unique_ptr<Head<float>> head_;
  AdamW<float> optimizer_;
  CosineSchedule schedule_;
  RngStream shuffle_;
  int epochs_done_ = 0;
  std::uint64_t step_ = 0;
  RunResult result_;
};

/// A full cfg.epochs run.
std::pair<std::unique_ptr<Head<float>>, RunResult> train(const Dataset& train, const Dataset& val,
                                                         const TrainConfig& cfg);

/// Mean and sample standard deviation (n - 1 denominator; 0 for a single value),
/// independent of the order of `values`.
std::pair<double, double> mean_sd(std::span<const double> values);

struct MultiSeedResult {
  double mean = 0.0;
  double sd = 0.0;
  std::vector<RunResult> runs;
  std::vector<std::unique_ptr<Head<float>>> heads;
};

/// One full run per seed; the summary statistic is each run's final validation mAP.
MultiSeedResult multi_seed(const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                           std::span<const std::uint64_t> seeds);

/// Writes `epoch,step,lr,loss,val_metric` lines, appending to an existing log.
void append_run_log(const std::filesystem::path& path, const RunResult& result);

}  // namespace protoprobe
