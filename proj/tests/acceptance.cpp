// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero if any fails.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "protoprobe/checkpoint.hpp"
#include "protoprobe/embedstore.hpp"
#include "protoprobe/hpo.hpp"
#include "protoprobe/optim.hpp"
#include "protoprobe/report.hpp"
#include "support.hpp"

using namespace protoprobe;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double max_abs_diff(const Vector<double>& a, const Vector<double>& b) { return (a - b).cwiseAbs().maxCoeff(); }

template <typename Scalar>
std::unique_ptr<Head<Scalar>> seeded(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper, std::uint64_t seed) {
  RngStream rng(seed, 1);
  return make_initialized_head<Scalar>(kind, dims, hyper, rng);
}

// ---------------------------------------------------------------------------

Verdict gradient_fidelity() {
  const HeadDims dims{8, 4, 2, 3};
  const auto start = std::chrono::steady_clock::now();
  bool ok = true;
  std::string detail;
  for (HeadKind k : kAllHeadKinds) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      worst = std::max(worst, support::head_grad_error(k, dims, support::small_hyper(), seed));
    }
    ok = ok && worst <= 1e-3;
    detail += fmt("%s=%.1e ", std::string(head_name(k)).c_str(), worst);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ok = ok && secs < 30.0;
  return {ok, detail + fmt("(%.2f s)", secs)};
}

Verdict brute_force_equivalence() {
  const HeadDims dims{8, 4, 2, 3};
  HeadHyper h;
  h.prototypes_per_class = 2;
  double worst_forward = 0.0;
  for (bool binary : {false, true}) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      auto head = seeded<double>(binary ? HeadKind::protobin : HeadKind::proto, dims, h, seed);
      RngStream rng(seed, 9);
      const auto clip = support::random_clip<double>(rng, dims);
      const auto out = head->forward(clip.view());
      const auto ref = oracle::prototype_forward(head->param("P").matrix().eval(), head->param("W").matrix().eval(),
                                                 clip.tokens, dims.grid_t, dims.grid_f, binary);
      for (Index j = 0; j < out.pooled.size(); ++j) {
        worst_forward = std::max(worst_forward, std::abs(out.pooled(j) - ref.pooled[static_cast<std::size_t>(j)]));
      }
      for (Index c = 0; c < out.logits.size(); ++c) {
        worst_forward = std::max(worst_forward, std::abs(out.logits(c) - ref.logits[static_cast<std::size_t>(c)]));
      }
    }
  }
  double worst_map = 0.0;
  RngStream rng(23, 0);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix<double> s(20, 4);
    Matrix<std::uint8_t> y(20, 4);
    std::vector<std::vector<double>> so(20, std::vector<double>(4));
    std::vector<std::vector<int>> yo(20, std::vector<int>(4));
    for (Index i = 0; i < 20; ++i) {
      for (Index c = 0; c < 4; ++c) {
        s(i, c) = so[i][c] = trial % 2 ? rng.gaussian() : static_cast<double>(rng.below(4));
        y(i, c) = static_cast<std::uint8_t>(yo[i][c] = static_cast<int>(rng.below(3) == 0));
      }
    }
    y(0, 0) = 1;
    yo[0][0] = 1;
    worst_map = std::max(worst_map, std::abs(mean_average_precision(s, y) - oracle::mean_average_precision(so, yo)));
  }
  return {worst_forward <= 1e-6 && worst_map <= 1e-9,
          fmt("prototype forward max err %.2e (tol 1e-6), mAP max err %.2e (tol 1e-9)", worst_forward, worst_map)};
}

Verdict sobol_reference() {
  // Joe-Kuo reference values for the first two dimensions, origin skipped.
  const double dim1[8] = {0.5, 0.75, 0.25, 0.375, 0.875, 0.625, 0.125, 0.1875};
  const double dim2[8] = {0.5, 0.25, 0.75, 0.375, 0.875, 0.125, 0.625, 0.3125};
  SobolSequence s(2);
  int mismatches = 0;
  for (int i = 0; i < 8; ++i) {
    const auto p = s.next();
    mismatches += p[0] != dim1[i];
    mismatches += p[1] != dim2[i];
  }
  return {mismatches == 0, fmt("%d of 16 values differ from the reference", mismatches)};
}

// Full protocol on the planted-event store, shared by the bottleneck, contrast and audit criteria.
struct HeadRun {
  double test_mean = 0.0;
  double test_sd = 0.0;
  std::size_t test_evaluations = 0;
  std::uint64_t epochs = 0;
  std::string journal;
  HpoConfig cfg;
  double seconds = 0.0;
  std::unique_ptr<Head<float>> winner;
};

HeadRun full_protocol(const Store& train_store, const Store& test_store, HeadKind head, std::uint64_t master_seed) {
  const auto start = std::chrono::steady_clock::now();
  HpoConfig cfg;
  cfg.base.head = head;
  cfg.master_seed = master_seed;
  const auto [train_set, val_set] = split_train_val(train_store, 0.2, master_seed);
  auto out = run_hpo(train_set, val_set, Dataset::all(test_store), cfg);
  HeadRun r;
  r.test_mean = out.final.test_mean;
  r.test_sd = out.final.test_sd;
  r.test_evaluations = out.test_evaluations;
  r.epochs = out.epochs_trained;
  r.journal = out.journal;
  r.cfg = cfg;
  r.winner = std::move(out.winner_head);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("  %-8s test mAP %.4f +- %.4f  (%llu search epochs, %.0f s)\n", std::string(head_name(head)).c_str(),
              r.test_mean, r.test_sd, static_cast<unsigned long long>(r.epochs), r.seconds);
  std::fflush(stdout);
  return r;
}

SynthSpec planted_spec(std::uint64_t count, const std::string& split) {
  SynthSpec s;  // C=10, D=64, 16x4, footprint 1, sigma 0.1, rho 0.5, 2-4 labels
  s.record_count = count;
  s.split_stream = split_stream_id(split);
  return s;
}

std::map<HeadKind, HeadRun> multi_label_runs;

Verdict pooling_bottleneck() {
  const Store train_store = generate_synthetic_store(planted_spec(2000, "train"));
  const Store test_store = generate_synthetic_store(planted_spec(500, "test"));
  double total = 0.0;
  for (HeadKind k : {HeadKind::protobin, HeadKind::proto, HeadKind::mhca, HeadKind::linear}) {
    multi_label_runs[k] = full_protocol(train_store, test_store, k, 1);
    total += multi_label_runs[k].seconds;
  }
  const double pb = multi_label_runs[HeadKind::protobin].test_mean;
  const double pr = multi_label_runs[HeadKind::proto].test_mean;
  const double mh = multi_label_runs[HeadKind::mhca].test_mean;
  const double li = multi_label_runs[HeadKind::linear].test_mean;
  const auto sim = prototype_similarity(multi_label_runs[HeadKind::protobin].winner->param("P").matrix().eval(), true);
  std::printf("  trained protobin prototypes: mean |cos| %.4f, max |cos| %.4f over pairs\n", sim.mean_abs, sim.max_abs);
  const bool ordered = pb >= pr && pr > mh && mh > li;
  const bool margin = pb - li >= 0.15;
  return {ordered && margin,
          fmt("protobin %.4f >= proto %.4f > mhca %.4f > linear %.4f: %s; protobin - linear = %.4f (need >= 0.15); "
              "%.0f s",
              pb, pr, mh, li, ordered ? "yes" : "no", pb - li, total)};
}

Verdict single_label_contrast() {
  auto train_spec = planted_spec(2000, "train");
  auto test_spec = planted_spec(500, "test");
  train_spec.classes_min = train_spec.classes_max = 1;
  test_spec.classes_min = test_spec.classes_max = 1;
  const Store train_store = generate_synthetic_store(train_spec);
  const Store test_store = generate_synthetic_store(test_spec);
  const auto mh = full_protocol(train_store, test_store, HeadKind::mhca, 1);
  const auto pb = full_protocol(train_store, test_store, HeadKind::protobin, 1);
  const double gap = std::abs(mh.test_mean - pb.test_mean);
  std::string multi;
  if (multi_label_runs.count(HeadKind::mhca) && multi_label_runs.count(HeadKind::protobin)) {
    multi = fmt(" (multi-label gap %.4f)",
                std::abs(multi_label_runs[HeadKind::mhca].test_mean - multi_label_runs[HeadKind::protobin].test_mean));
  }
  return {gap <= 0.05, fmt("single-label mhca %.4f vs protobin %.4f, |gap| = %.4f (need <= 0.05)%s", mh.test_mean,
                           pb.test_mean, gap, multi.c_str())};
}

Verdict compression() {
  RngStream rng(19, 0);
  bool ok = true;
  std::string detail;
  for (Index dim : {8, 64, 768}) {
    const Index j = 200;
    Matrix<float> p(j, dim);
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = static_cast<float>(rng.gaussian());
    p(0, 0) = 0.0f;
    const auto bytes = pack_prototypes(p);
    const bool size_ok = bytes.size() == static_cast<std::size_t>(j * dim / 8);
    const bool exact = unpack_prototypes(bytes, j, dim) == Matrix<float>(binarize(p));
    const double ratio = static_cast<double>(j * dim) * sizeof(float) / static_cast<double>(bytes.size());
    ok = ok && size_ok && exact && ratio == 32.0;
    detail += fmt("D=%ld: %zu bytes, %.0fx, round trip %s; ", static_cast<long>(dim), bytes.size(), ratio,
                  exact ? "exact" : "differs");
  }
  return {ok, detail};
}

Verdict parameter_budgets() {
  const HeadDims urban{768, 64, 8, 10};
  const HeadHyper h;
  const std::pair<HeadKind, std::uint64_t> expected[] = {{HeadKind::linear, 7690},
                                                          {HeadKind::ep, 9216},
                                                          {HeadKind::proto, 155600},
                                                          {HeadKind::protobin, 155600},
                                                          {HeadKind::linearc, 3932160}};
  bool ok = true;
  std::string detail;
  for (const auto& [k, n] : expected) {
    const auto got = param_count(k, urban, h);
    ok = ok && got == n;
    detail += fmt("%s %llu/%llu ", std::string(head_name(k)).c_str(), static_cast<unsigned long long>(got),
                  static_cast<unsigned long long>(n));
  }
  return {ok, detail};
}

Verdict protocol_fidelity() {
  if (!multi_label_runs.count(HeadKind::protobin)) return {false, "no full run to audit"};
  const auto& run = multi_label_runs[HeadKind::protobin];
  std::istringstream in(run.journal);
  std::string line;
  int trials = 0, sobol = 0, tpe = 0, reached2 = 0, reached3 = 0, reevals = 0, finals = 0;
  bool pruning_consistent = true, seeds_ok = true, config_ok = false;
  while (std::getline(in, line)) {
    if (line.rfind("config,", 0) == 0) {
      config_ok = line.find(",trials=50,startup=25,rungs=3/10/30,reduction=3,") != std::string::npos &&
                  line.find(",seeds=5,") != std::string::npos;
    }
    if (line.rfind("reeval,", 0) == 0) {
      ++reevals;
      seeds_ok = seeds_ok && std::count(line.begin(), line.end(), ',') == 3 + 5;
    }
    if (line.rfind("final,", 0) == 0) {
      ++finals;
      seeds_ok = seeds_ok && std::count(line.begin(), line.end(), ',') == 7 + 5;
    }
  }
  for (const auto& t : parse_journal_trials(run.journal)) {
    ++trials;
    (t.source == "sobol" ? sobol : tpe) += (t.source == "sobol" || t.source == "tpe");
    if (t.id < 25 && t.source != "sobol") pruning_consistent = false;
    reached2 += t.rungs_completed() >= 2;
    reached3 += t.rungs_completed() == 3;
    if (t.pruned == (t.rungs_completed() == 3)) pruning_consistent = false;
  }
  const bool ok = config_ok && trials == 50 && sobol == 25 && tpe == 25 && reached2 == 17 && reached3 == 6 &&
                  pruning_consistent && reevals == run.cfg.top_k && seeds_ok && finals == 1 &&
                  run.test_evaluations == 1 && run.epochs <= 50 * 3 + 17 * 7 + 6 * 20;
  return {ok, fmt("%d trials (%d sobol, %d tpe), rung survivors 50/%d/%d, %d re-evaluated x 5 seeds, %d final line, "
                  "%zu test evaluation(s), %llu search epochs (bound 389)",
                  trials, sobol, tpe, reached2, reached3, reevals, finals, run.test_evaluations,
                  static_cast<unsigned long long>(run.epochs))};
}

// Store files -> search -> checkpoint, result rows and table, all on disk.
void end_to_end(const fs::path& dir, std::uint64_t master_seed) {
  fs::create_directories(dir);
  write_store(dir / "train.ppst", generate_synthetic_store(planted_spec(400, "train")));
  write_store(dir / "test.ppst", generate_synthetic_store(planted_spec(100, "test")));
  const Store train_store = load_store(dir / "train.ppst");
  const Store test_store = load_store(dir / "test.ppst");
  std::vector<ResultCell> cells;
  for (HeadKind k : {HeadKind::protobin, HeadKind::linear}) {
    HpoConfig cfg;
    cfg.base.head = k;
    cfg.master_seed = master_seed;
    const auto [tr, va] = split_train_val(train_store, 0.2, master_seed);
    const auto out = run_hpo(tr, va, Dataset::all(test_store), cfg);
    const std::string name(head_name(k));
    std::ofstream(dir / (name + ".journal.csv"), std::ios::binary) << out.journal;
    save_checkpoint(dir / (name + ".ckpt"), *out.winner_head);
    cells.push_back(ResultCell{"planted", "synthetic", name, out.final.test_mean, out.final.test_sd, cfg.seeds, "mAP"});
  }
  std::ofstream(dir / "results.csv", std::ios::binary) << format_results_csv(cells);
  std::ofstream(dir / "report.md", std::ios::binary) << emit_table(cells, TableFormat::markdown);
  std::ofstream(dir / "wins.csv", std::ios::binary) << format_win_matrix(win_matrix(cells));
}

Verdict determinism() {
  const auto root = support::scratch_dir("acceptance_determinism");
  end_to_end(root / "a", 7);
  end_to_end(root / "b", 7);
  int compared = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    const auto name = entry.path().filename();
    ++compared;
    differing += slurp(entry.path()) != slurp(root / "b" / name);
  }
  return {compared == 9 && differing == 0, fmt("%d artifacts compared (journals, checkpoints, stores, results, "
                                                "report, win matrix), %d differ",
                                                compared, differing)};
}

Verdict invariance_suite() {
  const HeadDims dims{8, 4, 2, 3};
  const HeadHyper hyper = support::small_hyper();
  RngStream rng(81, 0);
  int failures = 0;

  // Token scale: cosine scoring ignores positive rescaling of any token.
  // Prototype scale: rescaling a real prototype leaves proto unchanged, protobin sees only signs.
  for (HeadKind k : {HeadKind::proto, HeadKind::protobin}) {
    for (std::uint64_t t = 0; t < 20; ++t) {
      auto head = seeded<double>(k, dims, hyper, t);
      const auto clip = support::random_clip<double>(rng, dims);
      const auto base = head->forward(clip.view()).logits;
      auto scaled = clip;
      scaled.tokens.col(static_cast<Index>(rng.below(8))) *= rng.uniform(0.01, 100.0);
      failures += max_abs_diff(head->forward(scaled.view()).logits, base) > 1e-12;
      auto P = head->param("P").matrix();
      P.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(P.rows())))) *= rng.uniform(0.01, 100.0);
      failures += max_abs_diff(head->forward(clip.view()).logits, base) > 1e-12;
    }
  }

  // Permutation: positional heads react to token order, pooled heads do not.
  for (HeadKind k : kAllHeadKinds) {
    auto head = seeded<double>(k, dims, hyper, 3);
    const auto clip = support::random_clip<double>(rng, dims);
    auto shuffled = clip;
    const std::vector<std::size_t> perm{7, 1, 2, 3, 4, 5, 6, 0};
    for (std::size_t n = 0; n < perm.size(); ++n) {
      shuffled.tokens.col(static_cast<Index>(n)) = clip.tokens.col(static_cast<Index>(perm[n]));
    }
    const double diff = max_abs_diff(head->forward(clip.view()).logits, head->forward(shuffled.view()).logits);
    const bool positional = k == HeadKind::conv || k == HeadKind::linearc;
    failures += positional ? diff <= 1e-6 : diff >= 1e-12;
  }

  // Max-pool monotonicity: an extra token never lowers a prototype score.
  for (HeadKind k : {HeadKind::proto, HeadKind::protobin}) {
    for (std::uint64_t t = 0; t < 20; ++t) {
      const HeadDims before{8, 4, 1, 3}, after{8, 5, 1, 3};
      auto small = seeded<double>(k, before, hyper, t);
      auto big = make_head<double>(k, after, hyper);
      for (std::size_t i = 0; i < small->params().size(); ++i) big->params()[i].value = small->params()[i].value;
      const auto clip = support::random_clip<double>(rng, before);
      auto grown = support::random_clip<double>(rng, after);
      grown.tokens.leftCols(4) = clip.tokens;
      const auto a = small->forward(clip.view()).pooled;
      const auto b = big->forward(grown.view()).pooled;
      for (Index j = 0; j < a.size(); ++j) failures += b(j) < a(j);
    }
  }

  // Cosine schedule: starts at the peak, ends at the floor, never rises.
  const CosineSchedule s{0.05, 1e-4, 300};
  failures += cosine_lr(0, s) != 0.05;
  failures += std::abs(cosine_lr(300, s) - 1e-4) > 1e-15;
  for (std::uint64_t t = 1; t <= 300; ++t) failures += cosine_lr(t, s) > cosine_lr(t - 1, s);

  return {failures == 0, fmt("%d violations across token scale, prototype scale, permutation, max-pool and "
                             "schedule checks",
                             failures)};
}

}  // namespace

int main() {
  const std::pair<int, std::function<Verdict()>> criteria[] = {
      {1, gradient_fidelity}, {2, brute_force_equivalence}, {3, sobol_reference}, {4, pooling_bottleneck},
      {5, single_label_contrast}, {6, compression}, {7, parameter_budgets}, {8, protocol_fidelity},
      {9, determinism}, {10, invariance_suite}};
  int failed = 0;
  for (const auto& [n, check] : criteria) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("criterion %d: %s %s\n", n, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of 10 criteria passed\n", 10 - failed);
  return failed == 0 ? 0 : 1;
}
