#include "protoprobe/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <utility>

#include "protoprobe/errors.hpp"

namespace protoprobe {

namespace {

constexpr std::string_view kHeader = "dataset,backbone,method,mean,sd,seeds,metric";

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void check_field(const std::string& s, const char* what) {
  if (s.empty()) throw FormatError(std::string("result cell: empty ") + what);
  if (s.find_first_of(",\n\r|") != std::string::npos) {
    throw FormatError(std::string("result cell: ") + what + " '" + s + "' contains a separator");
  }
}

std::string row(const ResultCell& c) {
  return c.dataset + "," + c.backbone + "," + c.method + "," + num(c.mean) + "," + num(c.sd) + "," +
         std::to_string(c.seeds) + "," + c.metric;
}

using Config = std::pair<std::string, std::string>;

std::vector<Config> configurations(const std::vector<ResultCell>& cells) {
  std::vector<Config> out;
  for (const auto& c : cells) {
    Config k{c.dataset, c.backbone};
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(std::move(k));
  }
  return out;
}

std::vector<std::string> methods(const std::vector<ResultCell>& cells) {
  std::vector<std::string> out;
  for (const auto& c : cells) {
    if (std::find(out.begin(), out.end(), c.method) == out.end()) out.push_back(c.method);
  }
  return out;
}

}  // namespace

void ResultCell::validate() const {
  check_field(dataset, "dataset");
  check_field(backbone, "backbone");
  check_field(method, "method");
  check_field(metric, "metric");
  if (!std::isfinite(mean)) throw FormatError("result cell: mean must be finite");
  if (!(sd >= 0.0) || !std::isfinite(sd)) throw FormatError("result cell: sd must be finite and >= 0");
  if (seeds < 0) throw FormatError("result cell: seed count must be >= 0");
}

std::string format_results_csv(const std::vector<ResultCell>& cells) {
  std::string out(kHeader);
  out += "\n";
  for (const auto& c : cells) {
    c.validate();
    out += row(c) + "\n";
  }
  return out;
}

std::vector<ResultCell> parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw FormatError("results csv: expected header '" + std::string(kHeader) + "'");
  }
  std::vector<ResultCell> cells;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (line.back() == ',') f.emplace_back();
    const std::string where = "results csv line " + std::to_string(line_no);
    if (f.size() != 7) throw FormatError(where + ": expected 7 fields, got " + std::to_string(f.size()));
    ResultCell c;
    c.dataset = f[0];
    c.backbone = f[1];
    c.method = f[2];
    try {
      std::size_t used = 0;
      c.mean = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument(f[3]);
      c.sd = std::stod(f[4], &used);
      if (used != f[4].size()) throw std::invalid_argument(f[4]);
      c.seeds = std::stoi(f[5], &used);
      if (used != f[5].size()) throw std::invalid_argument(f[5]);
    } catch (const std::exception&) {
      throw FormatError(where + ": malformed number");
    }
    c.metric = f[6];
    try {
      c.validate();
    } catch (const FormatError& e) {
      throw FormatError(where + ": " + e.what());
    }
    cells.push_back(std::move(c));
  }
  return cells;
}

TableFormat parse_table_format(std::string_view name) {
  if (name == "csv") return TableFormat::csv;
  if (name == "markdown" || name == "md") return TableFormat::markdown;
  throw ConfigError("unknown table format '" + std::string(name) + "' (valid: csv, markdown)");
}

std::vector<bool> best_cells(const std::vector<ResultCell>& cells) {
  std::map<Config, double> best;
  for (const auto& c : cells) {
    auto [it, fresh] = best.try_emplace(Config{c.dataset, c.backbone}, c.mean);
    if (!fresh) it->second = std::max(it->second, c.mean);
  }
  std::vector<bool> flags;
  for (const auto& c : cells) flags.push_back(c.mean == best.at(Config{c.dataset, c.backbone}));
  return flags;
}

std::string emit_table(const std::vector<ResultCell>& cells, TableFormat format) {
  for (const auto& c : cells) c.validate();
  const auto flags = best_cells(cells);
  if (format == TableFormat::csv) {
    std::string out(kHeader);
    out += ",best\n";
    for (std::size_t i = 0; i < cells.size(); ++i) out += row(cells[i]) + (flags[i] ? ",1\n" : ",0\n");
    return out;
  }
  const auto configs = configurations(cells);
  const auto names = methods(cells);
  std::string out = "| method |";
  for (const auto& [ds, bb] : configs) out += " " + ds + " / " + bb + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < configs.size(); ++i) out += "---:|";
  out += "\n";
  for (const auto& m : names) {
    out += "| " + m + " |";
    for (const auto& cfg : configs) {
      std::string entry = " - ";
      for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& c = cells[i];
        if (c.method != m || c.dataset != cfg.first || c.backbone != cfg.second) continue;
        const std::string text = fixed(c.mean) + " ± " + fixed(c.sd);
        entry = " " + (flags[i] ? "**" + text + "**" : text) + " ";
        break;
      }
      out += entry + "|";
    }
    out += "\n";
  }
  return out;
}

WinRule parse_win_rule(std::string_view name) {
  if (name == "opponent-sd") return WinRule::beats_opponent_band;
  if (name == "own-sd") return WinRule::clears_own_band;
  throw ConfigError("unknown win rule '" + std::string(name) + "' (valid: opponent-sd, own-sd)");
}

WinMatrix win_matrix(const std::vector<ResultCell>& cells, WinRule rule) {
  WinMatrix m;
  m.methods = methods(cells);
  const auto configs = configurations(cells);
  m.configurations = static_cast<int>(configs.size());
  const std::size_t k = m.methods.size();
  m.wins.assign(k, std::vector<int>(k, 0));

  std::map<std::pair<Config, std::string>, const ResultCell*> index;
  for (const auto& c : cells) {
    c.validate();
    if (!index.emplace(std::pair{Config{c.dataset, c.backbone}, c.method}, &c).second) {
      throw ConfigError("win matrix: duplicate cell for " + c.method + " on " + c.dataset + "/" + c.backbone);
    }
  }
  for (const auto& cfg : configs) {
    std::vector<const ResultCell*> row_cells(k);
    for (std::size_t i = 0; i < k; ++i) {
      auto it = index.find({cfg, m.methods[i]});
      if (it == index.end()) {
        throw CoverageError("win matrix: no result for method " + m.methods[i] + " on " + cfg.first + "/" +
                            cfg.second);
      }
      row_cells[i] = it->second;
    }
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        if (i == j) continue;
        const auto& a = *row_cells[i];
        const auto& b = *row_cells[j];
        const bool win = rule == WinRule::beats_opponent_band ? a.mean > b.mean + b.sd : a.mean - a.sd > b.mean;
        if (win) ++m.wins[i][j];
      }
    }
  }
  return m;
}

std::string format_win_matrix(const WinMatrix& m) {
  std::string out = "method";
  for (const auto& name : m.methods) out += "," + name;
  out += "\n";
  for (std::size_t i = 0; i < m.methods.size(); ++i) {
    out += m.methods[i];
    for (int w : m.wins[i]) out += "," + std::to_string(w);
    out += "\n";
  }
  return out;
}

}  // namespace protoprobe
