#include "flowgm/csvio.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <string_view>
#include <system_error>

#include "flowgm/errors.hpp"

namespace flowgm {

namespace {

[[noreturn]] void fail(const std::string& path, long line,
                       const std::string& msg) {
  throw ConfigError("csv: " + path + ":" + std::to_string(line) + ": " + msg);
}

std::vector<std::string_view> split(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, comma - start));
    start = comma + 1;
  }
}

double parse_double(std::string_view f, const std::string& path, long line) {
  double v = 0.0;
  const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
  if (res.ec != std::errc{} || res.ptr != f.data() + f.size()) {
    fail(path, line, "malformed number '" + std::string(f) + "'");
  }
  return v;
}

std::uint64_t parse_u64(std::string_view f, const std::string& path,
                        long line) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
  if (res.ec != std::errc{} || res.ptr != f.data() + f.size()) {
    fail(path, line, "malformed integer '" + std::string(f) + "'");
  }
  return v;
}

std::string_view strip_prefix(std::string_view f, std::string_view prefix,
                              const std::string& path) {
  if (!f.starts_with(prefix)) {
    fail(path, 1,
         "malformed header (expected dim=<d>,seed=<s>,source=<kind>)");
  }
  return f.substr(prefix.size());
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_samples_csv(const std::string& path, const SampleSet& s) {
  if (s.dim <= 0 || s.x.cols() != s.dim) {
    throw ConfigError("csv: " + path + ": sample dimension mismatch");
  }
  if (s.source.find(',') != std::string::npos ||
      s.source.find('\n') != std::string::npos || s.source.empty()) {
    throw ConfigError("csv: " + path + ": invalid source tag");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("csv: cannot write '" + path + "'");
  out << "dim=" << s.dim << ",seed=" << s.seed << ",source=" << s.source
      << "\n";
  for (Eigen::Index i = 0; i < s.x.rows(); ++i) {
    for (int j = 0; j < s.dim; ++j) {
      if (j > 0) out << ',';
      out << format_double(s.x(i, j));
    }
    out << "\n";
  }
  if (!out) throw ConfigError("csv: write failed for '" + path + "'");
}

SampleSet read_samples_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("csv: cannot read '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) fail(path, 1, "empty file");
  const auto fields = split(line);
  if (fields.size() != 3) {
    fail(path, 1, "malformed header (expected dim=<d>,seed=<s>,source=<kind>)");
  }
  SampleSet s;
  s.dim = static_cast<int>(parse_u64(strip_prefix(fields[0], "dim=", path),
                                     path, 1));
  s.seed = parse_u64(strip_prefix(fields[1], "seed=", path), path, 1);
  s.source = std::string(strip_prefix(fields[2], "source=", path));
  if (s.dim <= 0) fail(path, 1, "dimension must be positive");
  if (s.source.empty()) fail(path, 1, "empty source tag");

  std::vector<double> values;
  long rows = 0;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() && in.peek() == std::ifstream::traits_type::eof()) break;
    const auto cells = split(line);
    if (static_cast<int>(cells.size()) != s.dim) {
      fail(path, line_no,
           "expected " + std::to_string(s.dim) + " fields, got " +
               std::to_string(cells.size()));
    }
    for (const auto cell : cells) {
      values.push_back(parse_double(cell, path, line_no));
    }
    ++rows;
  }

  s.x.resize(rows, s.dim);
  for (long i = 0; i < rows; ++i) {
    for (int j = 0; j < s.dim; ++j) {
      s.x(i, j) = values[static_cast<std::size_t>(i) *
                             static_cast<std::size_t>(s.dim) +
                         static_cast<std::size_t>(j)];
    }
  }
  return s;
}

void write_table_csv(const std::string& path,
                     const std::vector<std::string>& columns,
                     const std::vector<std::vector<double>>& rows) {
  if (columns.empty()) {
    throw ConfigError("csv: " + path + ": no columns");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("csv: cannot write '" + path + "'");
  for (std::size_t j = 0; j < columns.size(); ++j) {
    if (j > 0) out << ',';
    out << columns[j];
  }
  out << "\n";
  for (const auto& row : rows) {
    if (row.size() != columns.size()) {
      throw ConfigError("csv: " + path + ": row width differs from header");
    }
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j > 0) out << ',';
      out << format_double(row[j]);
    }
    out << "\n";
  }
  if (!out) throw ConfigError("csv: write failed for '" + path + "'");
}

}  // namespace flowgm
