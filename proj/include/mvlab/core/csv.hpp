#pragma once

#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mvlab/core/errors.hpp"
#include "mvlab/core/grid.hpp"

namespace mvlab::csv {

/// Shortest round-trippable decimal form; byte-stable across runs.
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(const std::string& cell, std::size_t line_no) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != cell.size()) {
    throw DomainError("csv line " + std::to_string(line_no) + ": not a number: '" + cell + "'");
  }
  return v;
}

/// Header `path_id,t,x1,...,xd`, one row per (path, node). Path ids start at `first_id`.
inline void write_ensemble(std::ostream& os, const Ensemble& e, std::size_t first_id = 0) {
  os << "path_id,t";
  for (std::size_t c = 1; c <= e.dim(); ++c) os << ",x" << c;
  os << '\n';
  const TimeGrid& g = e.grid();
  for (std::size_t i = 0; i < e.size(); ++i) {
    const Path& p = e.path(i);
    for (std::size_t k = 0; k < g.nodes(); ++k) {
      os << (first_id + i) << ',' << num(g.time(k));
      for (double v : p.at(k)) os << ',' << num(v);
      os << '\n';
    }
  }
}

/// Inverse of write_ensemble. Rows of a path must be consecutive and in time
/// order; the grid is inferred from the first path and checked for uniformity.
inline Ensemble read_ensemble(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DomainError("csv: empty ensemble file");
  const auto header = split(line);
  if (header.size() < 3 || header[0] != "path_id" || header[1] != "t") {
    throw DomainError("csv: ensemble header must be path_id,t,x1,...");
  }
  const std::size_t dim = header.size() - 2;
  std::vector<std::string> ids;
  std::vector<std::vector<double>> times, values;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw DomainError("csv line " + std::to_string(line_no) + ": wrong column count");
    if (ids.empty() || ids.back() != cells[0]) {
      ids.push_back(cells[0]);
      times.emplace_back();
      values.emplace_back();
    }
    times.back().push_back(parse_double(cells[1], line_no));
    for (std::size_t c = 0; c < dim; ++c) values.back().push_back(parse_double(cells[2 + c], line_no));
  }
  if (ids.empty()) throw DomainError("csv: ensemble file has no rows");
  const auto& t0 = times.front();
  if (t0.size() < 2 || t0.front() != 0.0) throw DomainError("csv: path must start at t=0 with >= 2 nodes");
  const TimeGrid grid(t0.back(), t0.size() - 1);
  for (std::size_t k = 0; k < t0.size(); ++k) {
    if (std::abs(t0[k] - grid.time(k)) > 1e-9 * grid.dt()) throw DomainError("csv: non-uniform time grid");
  }
  std::vector<Path> paths;
  paths.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (times[i] != t0) throw DomainError("csv: path " + ids[i] + " has a different grid");
    paths.emplace_back(grid, dim, std::move(values[i]));
  }
  return Ensemble(std::move(paths));
}

}  // namespace mvlab::csv
