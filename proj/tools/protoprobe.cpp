// protoprobe command-line tool: synth, train, eval, hpo, report.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "protoprobe/checkpoint.hpp"
#include "protoprobe/embedstore.hpp"
#include "protoprobe/errors.hpp"
#include "protoprobe/hpo.hpp"
#include "protoprobe/report.hpp"
#include "protoprobe/trainer.hpp"

namespace fs = std::filesystem;
using namespace protoprobe;

namespace {

fs::path with_env_dir(const std::string& path, const char* var) {
  fs::path p(path);
  if (p.is_absolute()) return p;
  if (const char* dir = std::getenv(var); dir != nullptr && *dir != '\0') return fs::path(dir) / p;
  return p;
}

fs::path input_path(const std::string& p) { return with_env_dir(p, "PROTOPROBE_DATA_DIR"); }
fs::path output_path(const std::string& p) { return with_env_dir(p, "PROTOPROBE_OUT_DIR"); }

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  ensure_parent(p);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Flags shared by train and hpo.
struct ProbeFlags {
  std::string head = "linear";
  int batch = 128;
  int prototypes = 20;
  int mlp_hidden = 512;
  int conv_hidden = 256;

  void add(CLI::App* app) {
    app->add_option("--head", head, "Head kind (" + valid_head_names() + ")");
    app->add_option("--batch", batch, "Batch size");
    app->add_option("--prototypes", prototypes, "Prototypes per class");
    app->add_option("--mlp-hidden", mlp_hidden, "MLP hidden width");
    app->add_option("--conv-hidden", conv_hidden, "Conv head channels");
  }

  TrainConfig config() const {
    TrainConfig c;
    c.head = parse_head_kind(head);
    c.batch_size = batch;
    c.hyper.prototypes_per_class = prototypes;
    c.hyper.mlp_hidden = mlp_hidden;
    c.hyper.conv_hidden = conv_hidden;
    return c;
  }
};

// Train/validation sets: an explicit validation store, or a seeded 80/20 split.
struct Splits {
  Store train_store;
  Store val_store;
  Dataset train;
  Dataset val;
};

void load_splits(Splits& s, const std::string& train_path, const std::string& val_path, double val_fraction,
                 std::uint64_t seed) {
  s.train_store = load_store(input_path(train_path));
  if (!val_path.empty()) {
    s.val_store = load_store(input_path(val_path));
    s.train = Dataset::all(s.train_store);
    s.val = Dataset::all(s.val_store);
  } else {
    std::tie(s.train, s.val) = split_train_val(s.train_store, val_fraction, seed);
  }
}

// --------------------------------------------------------------------------- synth

struct SynthCmd {
  SynthSpec spec;
  std::string out;
  std::string split = "train";

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("synth", "Write a synthetic planted-event store");
    app->add_option("--out", out, "Store path")->required();
    app->add_option("--classes", spec.classes);
    app->add_option("--dim", spec.dim);
    app->add_option("--grid-t", spec.grid_t);
    app->add_option("--grid-f", spec.grid_f);
    app->add_option("--classes-min", spec.classes_min, "Fewest labels per clip");
    app->add_option("--classes-max", spec.classes_max, "Most labels per clip");
    app->add_option("--footprint", spec.event_footprint, "Token positions per event");
    app->add_option("--sigma", spec.noise_sigma, "Planted-token noise");
    app->add_option("--rho", spec.correlation_rho, "Background correlation");
    app->add_option("--seed", spec.seed);
    app->add_option("--count", spec.record_count, "Number of clips");
    app->add_option("--split", split, "train, val or test");
    app->callback([this] { run(); });
  }

  void run() {
    spec.split_stream = split_stream_id(split);
    const auto path = output_path(out);
    ensure_parent(path);
    const Store store = generate_synthetic_store(spec);
    const auto bytes = write_store(path, store);
    Manifest m;
    m.store_path = path.filename().string();
    m.provenance = spec.describe();
    m.split = split;
    for (std::uint32_t c = 0; c < spec.classes; ++c) m.class_names.push_back("class" + std::to_string(c));
    write_manifest(manifest_path_for(path), m);
    std::cout << "wrote " << store.records.size() << " records (" << bytes << " bytes) to " << path.string() << "\n";
  }
};

// --------------------------------------------------------------------------- train

struct TrainCmd {
  ProbeFlags probe;
  std::string store, val, out, log;
  double lr = 1e-3, wd = 1e-4, val_fraction = 0.2;
  std::uint64_t seed = 0;
  int epochs = 30;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("train", "Train one probe head");
    app->add_option("--store", store, "Training store")->required();
    app->add_option("--val", val, "Validation store (default: 20% of the training store)");
    app->add_option("--val-fraction", val_fraction);
    probe.add(app);
    app->add_option("--lr", lr);
    app->add_option("--wd", wd);
    app->add_option("--seed", seed);
    app->add_option("--epochs", epochs);
    app->add_option("--out", out, "Checkpoint path")->required();
    app->add_option("--log", log, "Run log path (default: <out>.log.csv)");
    app->callback([this] { run(); });
  }

  void run() {
    TrainConfig cfg = probe.config();
    cfg.lr = lr;
    cfg.weight_decay = wd;
    cfg.seed = seed;
    cfg.epochs = epochs;
    Splits s;
    load_splits(s, store, val, val_fraction, seed);
    auto [head, result] = train(s.train, s.val, cfg);
    const auto ckpt = output_path(out);
    ensure_parent(ckpt);
    save_checkpoint(ckpt, *head);
    const auto log_path = log.empty() ? fs::path(ckpt.string() + ".log.csv") : output_path(log);
    ensure_parent(log_path);
    if (fs::exists(log_path)) fs::remove(log_path);
    append_run_log(log_path, result);
    std::cout << "val_map=" << fmt(result.per_epoch_val.back()) << "\n";
  }
};

// --------------------------------------------------------------------------- eval

struct EvalCmd {
  std::string store, checkpoint;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("eval", "Evaluate a checkpoint on a store");
    app->add_option("--store", store)->required();
    app->add_option("--checkpoint", checkpoint)->required();
    app->callback([this] { run(); });
  }

  void run() {
    const Store s = load_store(input_path(store));
    const auto head = load_checkpoint(input_path(checkpoint));
    const auto report = evaluate(Dataset::all(s), *head);
    char buf[64];
    std::snprintf(buf, sizeof buf, "map=%.17g\n", report.map);
    std::cout << buf;
    if (report.accuracy) {
      std::snprintf(buf, sizeof buf, "accuracy=%.17g\n", *report.accuracy);
      std::cout << buf;
    }
    std::cout << "examples=" << report.examples << "\n";
  }
};

// --------------------------------------------------------------------------- hpo

struct HpoCmd {
  ProbeFlags probe;
  std::string train_path, val_path, test_path, out_dir = "hpo";
  std::string dataset, backbone = "synthetic";
  std::vector<int> rungs{3, 10, 30};
  HpoConfig cfg;
  double val_fraction = 0.2;
  bool resume = false;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("hpo", "Two-stage search: halving trials, then seeded re-evaluation");
    app->add_option("--train", train_path, "Training store")->required();
    app->add_option("--val", val_path, "Validation store (default: 20% of the training store)");
    app->add_option("--val-fraction", val_fraction);
    app->add_option("--test", test_path, "Test store")->required();
    probe.add(app);
    app->add_option("--seed", cfg.master_seed, "Master seed");
    app->add_option("--trials", cfg.halving.trials);
    app->add_option("--startup", cfg.halving.startup_trials, "Sobol trials before TPE");
    app->add_option("--rungs", rungs, "Rung epochs")->delimiter(',');
    app->add_option("--reduction", cfg.halving.reduction, "Keep 1/reduction after each rung");
    app->add_option("-k,--top-k", cfg.top_k, "Configurations re-evaluated with several seeds");
    app->add_option("--seeds", cfg.seeds, "Re-evaluation seeds");
    app->add_option("--threads", cfg.halving.threads);
    app->add_option("--out-dir", out_dir);
    app->add_option("--dataset", dataset, "Dataset name for the result row (default: training store name)");
    app->add_option("--backbone", backbone, "Backbone name for the result row");
    app->add_flag("--resume", resume, "Reuse the search phase of an existing journal");
    app->callback([this] { run(); });
  }

  void run() {
    cfg.base = probe.config();
    cfg.halving.rungs = rungs;
    const fs::path dir = output_path(out_dir);
    fs::create_directories(dir);
    const fs::path journal_path = dir / "journal.csv";

    std::vector<TrialRecord> previous;
    if (resume && fs::exists(journal_path)) {
      previous = parse_journal_trials(read_text(journal_path));
      if (static_cast<int>(previous.size()) != cfg.halving.trials) {
        throw StateError("hpo: journal " + journal_path.string() + " holds " + std::to_string(previous.size()) +
                         " trials, expected " + std::to_string(cfg.halving.trials));
      }
    }

    Splits s;
    load_splits(s, train_path, val_path, val_fraction, cfg.master_seed);
    const Store test_store = load_store(input_path(test_path));
    const auto out = run_hpo(s.train, s.val, Dataset::all(test_store), cfg, std::move(previous));

    write_text(journal_path, out.journal);
    save_checkpoint(dir / "winner.ckpt", *out.winner_head);
    ResultCell cell;
    cell.dataset = dataset.empty() ? fs::path(train_path).stem().string() : dataset;
    cell.backbone = backbone;
    cell.method = std::string(head_name(cfg.base.head));
    cell.mean = out.final.test_mean;
    cell.sd = out.final.test_sd;
    cell.seeds = cfg.seeds;
    cell.metric = "mAP";
    write_text(dir / "result.csv", format_results_csv({cell}));

    std::string report = "# " + cell.method + " on " + cell.dataset + "\n\n";
    report += "winner: trial " + std::to_string(out.final.winner.id) + " (" + out.final.winner.source + ")\n";
    report += "lr: " + fmt(out.final.winner.lr) + "\nwd: " + fmt(out.final.winner.wd) + "\n";
    report += "validation mAP: " + fmt(out.final.val_mean) + " ± " + fmt(out.final.val_sd) + "\n";
    report += "test mAP: " + fmt(out.final.test_mean) + " ± " + fmt(out.final.test_sd) + "\n";
    write_text(dir / "report.md", report);
    std::cout << report;
  }
};

// --------------------------------------------------------------------------- report

struct ReportCmd {
  std::vector<std::string> inputs;
  std::string format = "markdown", out, wins_out, rule = "opponent-sd";

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("report", "Merge result files into a table and a win matrix");
    app->add_option("inputs", inputs, "Result CSV files")->required();
    app->add_option("--format", format, "csv or markdown");
    app->add_option("--out", out, "Table output (default: stdout)");
    app->add_option("--win-matrix", wins_out, "Win matrix output");
    app->add_option("--win-rule", rule, "opponent-sd (mean > other mean + other sd) or own-sd");
    app->callback([this] { run(); });
  }

  void run() {
    std::vector<ResultCell> cells;
    for (const auto& in : inputs) {
      auto part = parse_results_csv(read_text(input_path(in)));
      cells.insert(cells.end(), part.begin(), part.end());
    }
    const auto table = emit_table(cells, parse_table_format(format));
    if (out.empty()) {
      std::cout << table;
    } else {
      write_text(output_path(out), table);
    }
    if (!wins_out.empty()) write_text(output_path(wins_out), format_win_matrix(win_matrix(cells, parse_win_rule(rule))));
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pooling probes over frozen token maps"};
  app.require_subcommand(1);
  SynthCmd synth;
  TrainCmd train_cmd;
  EvalCmd eval_cmd;
  HpoCmd hpo;
  ReportCmd report;
  synth.add(app);
  train_cmd.add(app);
  eval_cmd.add(app);
  hpo.add(app);
  report.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
