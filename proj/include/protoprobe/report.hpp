#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace protoprobe {

/// One benchmark result: mean and sd of a metric over seeds.
struct ResultCell {
  std::string dataset;
  std::string backbone;
  std::string method;
  double mean = 0.0;
  double sd = 0.0;
  int seeds = 0;
  std::string metric = "mAP";

  void validate() const;
  bool operator==(const ResultCell&) const = default;
};

/// CSV with header `dataset,backbone,method,mean,sd,seeds,metric`. Numbers use %.17g so a
/// parse/format round trip is byte-identical.
std::string format_results_csv(const std::vector<ResultCell>& cells);
std::vector<ResultCell> parse_results_csv(const std::string& text);

enum class TableFormat { csv, markdown };
TableFormat parse_table_format(std::string_view name);

/// For each cell, whether it holds the highest mean within its (dataset, backbone) group.
/// Ties are all flagged.
std::vector<bool> best_cells(const std::vector<ResultCell>& cells);

/// csv: the result CSV plus a trailing `best` column (0/1).
/// markdown: one row per method, one column per (dataset, backbone) in order of first
/// appearance, entries "mean ± sd" with the best entry of each column in bold.
std::string emit_table(const std::vector<ResultCell>& cells, TableFormat format);

enum class WinRule {
  beats_opponent_band,  // mean_a > mean_b + sd_b
  clears_own_band,      // mean_a - sd_a > mean_b
};
WinRule parse_win_rule(std::string_view name);

struct WinMatrix {
  std::vector<std::string> methods;
  std::vector<std::vector<int>> wins;  // wins[i][j]: configurations where method i beats method j
  int configurations = 0;
};

/// Counts wins over every (dataset, backbone) configuration. Every method must have a cell
/// for every configuration; a hole raises CoverageError naming it.
WinMatrix win_matrix(const std::vector<ResultCell>& cells, WinRule rule = WinRule::beats_opponent_band);

std::string format_win_matrix(const WinMatrix& m);

}  // namespace protoprobe
