#include "protoprobe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace protoprobe {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: learning rate must be >= 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("train: weight decay must be >= 0");
  if (!(lr_min >= 0.0) || lr_min > lr) throw ConfigError("train: need 0 <= lr_min <= lr");
  asl.validate();
}

Dataset Dataset::all(const Store& store) {
  Dataset d;
  d.store = &store;
  d.indices.resize(store.size());
  std::iota(d.indices.begin(), d.indices.end(), std::size_t{0});
  return d;
}

HeadDims Dataset::dims() const {
  const auto& h = store->header;
  return HeadDims{h.dim, h.grid_t, h.grid_f, h.classes};
}

std::pair<Dataset, Dataset> split_train_val(const Store& store, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in (0, 1)");
  RngStream rng(seed, 0x5EED5);
  auto perm = rng.permutation(store.size());
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(store.size())));
  Dataset train{&store, {perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end()}};
  Dataset val{&store, {perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val)}};
  std::sort(train.indices.begin(), train.indices.end());
  std::sort(val.indices.begin(), val.indices.end());
  return {std::move(train), std::move(val)};
}

Clip<float> clip_of(const Store& store, const EmbeddingRecord& rec) {
  const auto& h = store.header;
  return Clip<float>{rec.token_matrix(h.dim), rec.cls_vector(), h.grid_t, h.grid_f};
}

namespace {

void require_compatible(const Dataset& data, const HeadDims& head_dims, const char* what) {
  if (data.store == nullptr) throw ConfigError(std::string(what) + ": dataset has no store");
  const HeadDims d = data.dims();
  if (!(d == head_dims)) {
    throw DimensionError(std::string(what) + ": store dims (D=" + std::to_string(d.dim) + ", " +
                         std::to_string(d.grid_t) + "x" + std::to_string(d.grid_f) + ", C=" + std::to_string(d.classes) +
                         ") do not match head dims (D=" + std::to_string(head_dims.dim) + ", " +
                         std::to_string(head_dims.grid_t) + "x" + std::to_string(head_dims.grid_f) +
                         ", C=" + std::to_string(head_dims.classes) + ")");
  }
}

std::vector<double> to_double(const Vector<float>& v) {
  std::vector<double> out(static_cast<std::size_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = v(i);
  return out;
}

}  // namespace

MetricReport evaluate(const Dataset& data, const Head<float>& head) {
  if (data.empty()) throw DegenerateError("evaluate: empty store");
  require_compatible(data, head.dims(), "evaluate");
  const Index n = static_cast<Index>(data.size());
  const Index c = head.dims().classes;
  Matrix<double> scores(n, c);
  Matrix<std::uint8_t> labels(n, c);
  bool single_label = true;
  std::vector<Index> targets(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto& rec = data.record(static_cast<std::size_t>(i));
    const auto out = head.forward(clip_of(*data.store, rec));
    scores.row(i) = out.logits.cast<double>().transpose();
    for (Index k = 0; k < c; ++k) {
      labels(i, k) = rec.labels[static_cast<std::size_t>(k)];
      if (labels(i, k)) targets[static_cast<std::size_t>(i)] = k;
    }
    single_label = single_label && rec.positive_count() == 1;
  }
  MetricReport report;
  report.examples = data.size();
  report.map = mean_average_precision(scores, labels);
  if (single_label) report.accuracy = top1_accuracy(scores, targets);
  return report;
}

// ---------------------------------------------------------------------------

namespace {

std::unique_ptr<Head<float>> build_head(const Dataset& train, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw DegenerateError("train: empty training store");
  auto head = make_head<float>(cfg.head, train.dims(), cfg.hyper);
  RngStream init(cfg.seed, 1);
  head->initialize(init);
  return head;
}

std::uint64_t steps_per_epoch(const Dataset& train, const TrainConfig& cfg) {
  const auto bs = static_cast<std::uint64_t>(cfg.batch_size);
  return (train.size() + bs - 1) / bs;
}

}  // namespace

TrainingSession::TrainingSession(Dataset train, Dataset val, TrainConfig cfg)
    : train_(std::move(train)),
      val_(std::move(val)),
      cfg_(std::move(cfg)),
      head_(build_head(train_, cfg_)),
      optimizer_(head_->params(), cfg_.weight_decay, cfg_.adam),
      schedule_{cfg_.lr, cfg_.lr_min, static_cast<std::uint64_t>(cfg_.epochs) * steps_per_epoch(train_, cfg_)},
      shuffle_(cfg_.seed, 2) {
  require_compatible(val_, head_->dims(), "train (validation store)");
  if (val_.empty()) throw DegenerateError("train: empty validation store");
  result_.seed = cfg_.seed;
}

double TrainingSession::batch_loss(std::span<const std::size_t> positions) const {
  double total = 0.0;
  for (std::size_t pos : positions) {
    const auto& rec = train_.record(pos);
    const auto out = head_->forward(clip_of(*train_.store, rec));
    total += asl_loss(to_double(out.logits), rec.labels, cfg_.asl).loss;
  }
  return total / static_cast<double>(positions.size());
}

void TrainingSession::run_epoch() {
  const auto order = shuffle_.permutation(train_.size());
  const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
  double epoch_loss = 0.0;
  double lr = cfg_.lr;
  Vector<float> dlogits(head_->dims().classes);
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < order.size(); start += bs, ++batch_index) {
    const std::size_t end = std::min(order.size(), start + bs);
    const double inv_b = 1.0 / static_cast<double>(end - start);
    head_->zero_grad();
    double batch_loss = 0.0;
    for (std::size_t i = start; i < end; ++i) {
      const auto& rec = train_.record(order[i]);
      const auto clip = clip_of(*train_.store, rec);
      const auto out = head_->forward(clip);
      LossResult loss;
      try {
        loss = asl_loss(to_double(out.logits), rec.labels, cfg_.asl);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epochs_done_ + 1) + ", batch " +
                           std::to_string(batch_index + 1) + ")");
      }
      batch_loss += loss.loss * inv_b;
      for (Index k = 0; k < dlogits.size(); ++k) {
        dlogits(k) = static_cast<float>(loss.dlogits[static_cast<std::size_t>(k)] * inv_b);
      }
      head_->backward(clip, out, dlogits);
    }
    if (!std::isfinite(batch_loss)) {
      throw NumericError("train: non-finite loss at epoch " + std::to_string(epochs_done_ + 1) + ", batch " +
                         std::to_string(batch_index + 1));
    }
    lr = cosine_lr(step_, schedule_);
    optimizer_.step(head_->params(), head_->grads(), lr);
    ++step_;
    epoch_loss += batch_loss * static_cast<double>(end - start);
  }
  ++epochs_done_;
  const double val = evaluate(val_, *head_).map;
  result_.per_epoch_val.push_back(val);
  result_.log.push_back(EpochLog{epochs_done_, step_, lr, epoch_loss / static_cast<double>(train_.size()), val});
}

double TrainingSession::advance_to(int epoch) {
  if (epoch > cfg_.epochs) {
    throw ConfigError("train: cannot advance to epoch " + std::to_string(epoch) + " of " + std::to_string(cfg_.epochs));
  }
  if (!head_) throw StateError("train: session head has been taken");
  const auto t0 = std::chrono::steady_clock::now();
  while (epochs_done_ < epoch) run_epoch();
  result_.wallclock_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (result_.per_epoch_val.empty()) throw StateError("train: no epoch has completed yet");
  return result_.per_epoch_val.back();
}

std::pair<std::unique_ptr<Head<float>>, RunResult> train(const Dataset& train, const Dataset& val,
                                                         const TrainConfig& cfg) {
  TrainingSession session(train, val, cfg);
  session.advance_to(cfg.epochs);
  RunResult result = session.result();
  return {session.take_head(), std::move(result)};
}

std::pair<double, double> mean_sd(std::span<const double> input) {
  if (input.empty()) throw DegenerateError("mean_sd: no values");
  // Sorted summation makes the result independent of the input order.
  std::vector<double> values(input.begin(), input.end());
  std::sort(values.begin(), values.end());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

MultiSeedResult multi_seed(const Dataset& train_set, const Dataset& val, const TrainConfig& cfg,
                           std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw ConfigError("multi_seed: no seeds");
  MultiSeedResult out;
  std::vector<double> finals;
  for (std::uint64_t seed : seeds) {
    TrainConfig c = cfg;
    c.seed = seed;
    auto [head, result] = train(train_set, val, c);
    finals.push_back(result.per_epoch_val.back());
    out.runs.push_back(std::move(result));
    out.heads.push_back(std::move(head));
  }
  std::tie(out.mean, out.sd) = mean_sd(finals);
  return out;
}

void append_run_log(const std::filesystem::path& path, const RunResult& result) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open " + path.string() + " for appending");
  if (fresh) out << "epoch,step,lr,loss,val_metric\n";
  char line[256];
  for (const auto& e : result.log) {
    std::snprintf(line, sizeof line, "%d,%llu,%.9g,%.9g,%.9g\n", e.epoch, static_cast<unsigned long long>(e.step),
                  e.lr, e.loss, e.val_metric);
    out << line;
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace protoprobe
